//! Run configuration, hardware specs and tuning configs as JSON files.

use std::fs;
use std::path::{Path, PathBuf};

use nnchip_core::models::Arch;
use nnchip_core::tuning::TuneConfig;
use nnchip_core::{CodecKind, HardwareSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Invalid(String),
}

/// Baseline training settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 64,
            lr: 0.05,
            momentum: 0.9,
        }
    }
}

/// Everything one pipeline invocation needs. Relative paths in a config file
/// resolve against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Architecture string, e.g. `mlp:784-100-10` or `lenet-small`.
    pub model: String,
    /// Directory holding the four standard MNIST IDX files.
    pub data_dir: PathBuf,
    /// Preset name (`tianji-ann`, `prime`) or path to a hardware spec file.
    pub hardware: String,
    /// Tuning config file; defaults apply when absent.
    pub tuning: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub train: TrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: "mlp:784-100-10".into(),
            data_dir: PathBuf::from("data/mnist"),
            hardware: "tianji-ann".into(),
            tuning: None,
            out: PathBuf::from("out"),
            seed: 1,
            train: TrainSettings::default(),
        }
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })
}

fn parse<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ConfigError> {
    serde_json::from_str(&read(path)?).map_err(|source| ConfigError::Parse { path: path.into(), source })
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut c: RunConfig = parse(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut c.data_dir);
        rebase(&mut c.out);
        if let Some(t) = c.tuning.as_mut() {
            rebase(t);
        }
        if HardwareSpec::preset(&c.hardware).is_none() && Path::new(&c.hardware).is_relative() {
            c.hardware = base.join(&c.hardware).to_string_lossy().into_owned();
        }
        Ok(c)
    }

    pub fn arch(&self) -> Result<Arch, ConfigError> {
        Arch::parse(&self.model).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn hardware_spec(&self) -> Result<HardwareSpec, ConfigError> {
        let spec = match HardwareSpec::preset(&self.hardware) {
            Some(s) => s,
            None => parse(Path::new(&self.hardware))?,
        };
        spec.check().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(spec)
    }

    /// Tuning config with the run seed applied.
    pub fn tune_config(&self) -> Result<TuneConfig, ConfigError> {
        let mut t: TuneConfig = match &self.tuning {
            Some(p) => parse(p)?,
            None => TuneConfig::default(),
        };
        t.seed = self.seed;
        Ok(t)
    }

    /// Checks that referenced files exist.
    pub fn check(&self) -> Result<(), ConfigError> {
        self.arch()?;
        for f in [
            "train-images-idx3-ubyte",
            "train-labels-idx1-ubyte",
            "t10k-images-idx3-ubyte",
            "t10k-labels-idx1-ubyte",
        ] {
            let p = self.data_dir.join(f);
            if !p.is_file() {
                return Err(ConfigError::Invalid(format!("dataset file {} not found", p.display())));
            }
        }
        if let Some(t) = &self.tuning {
            if !t.is_file() {
                return Err(ConfigError::Invalid(format!("tuning config {} not found", t.display())));
            }
        }
        self.hardware_spec()?;
        Ok(())
    }
}

/// Constraint and tuning overrides from the command line.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub io_bits: Option<u32>,
    pub weight_bits: Option<u32>,
    pub encoding: Option<CodecKind>,
    pub scale: Option<(usize, usize)>,
    pub reencode_factor: Option<usize>,
    pub granularity: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, spec: &mut HardwareSpec, tune: &mut TuneConfig) -> Result<(), ConfigError> {
        if let Some(b) = self.io_bits {
            spec.io_bits = b;
        }
        if let Some(b) = self.weight_bits {
            spec.weight_bits = b;
        }
        if let Some(e) = self.encoding {
            spec.encoding = e;
        }
        if let Some((m, n)) = self.scale {
            spec.scale_m = m;
            spec.scale_n = n;
        }
        if let Some(m) = self.reencode_factor {
            tune.reencode_factor = m;
        }
        if let Some(g) = self.granularity {
            tune.granularity = g;
        }
        spec.check().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        tune.check().map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

/// `MxN`, e.g. `256x256`.
pub fn parse_scale(s: &str) -> Result<(usize, usize), String> {
    let (m, n) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("scale {s:?} is not of the form MxN"))?;
    let dim = |t: &str| t.trim().parse::<usize>().ok().filter(|&v| v > 0);
    match (dim(m), dim(n)) {
        (Some(m), Some(n)) => Ok((m, n)),
        _ => Err(format!("scale {s:?} needs two positive integers")),
    }
}

pub fn parse_encoding(s: &str) -> Result<CodecKind, String> {
    CodecKind::parse(s).ok_or_else(|| format!("unknown encoding {s:?} (dynamic, fraction or sharing)"))
}

/// Value of `granularity`: a count or `all` (0).
pub fn parse_granularity(s: &str) -> Result<usize, String> {
    if s == "all" {
        Ok(0)
    } else {
        s.parse().map_err(|_| format!("granularity {s:?} is not a count or \"all\""))
    }
}
