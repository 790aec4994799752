//! End-to-end stages: baseline training, compilation, simulation-based
//! evaluation, placement and sweeps.

use std::time::Instant;

use nnchip_core::exec::accuracy;
use nnchip_core::graph::{CompGraph, Stage};
use nnchip_core::hardware::{encode_batch, simulate, EdgeTrace, SimOptions};
use nnchip_core::mapping::{build_comm_graph, map_to_mesh, CommGraph, MapConfig, MeshCost, Placement};
use nnchip_core::models::{build, Arch};
use nnchip_core::train::{evaluate_classifier, round_params_f32, train_classifier, EpochStat, TrainConfig};
use nnchip_core::tuning::{transform, Transformed, TuneConfig};
use nnchip_core::HardwareSpec;

use crate::config::{parse_encoding, parse_granularity, TrainSettings};
use crate::idx::Dataset;
use crate::report::SweepRow;
use crate::Error;

/// Baseline accuracy below which training is reported as failed.
pub const SANITY_FLOOR: f64 = 90.0;

/// Sweep points may lose this much accuracy (percentage points) to noise as
/// bits increase before a warning is raised.
pub const SWEEP_NOISE: f64 = 0.5;

pub struct Baseline {
    pub graph: CompGraph,
    /// Test accuracy in percent.
    pub accuracy: f64,
    pub seconds: f64,
    pub epochs: Vec<EpochStat>,
}

/// Trains `arch` from scratch. Parameters are rounded to `f32` before
/// evaluation so the reported accuracy is that of the saved graph.
pub fn train_baseline(arch: &Arch, settings: &TrainSettings, seed: u64, train: &Dataset, test: &Dataset) -> Result<Baseline, Error> {
    let mut graph = build(arch, seed)?;
    let cfg = TrainConfig {
        epochs: settings.epochs,
        batch: settings.batch,
        lr: settings.lr,
        momentum: settings.momentum,
        seed,
    };
    let t = Instant::now();
    let epochs = train_classifier(&mut graph, &train.images, &train.labels, &cfg, &mut |s| {
        log::info!("epoch {} loss {:.4}", s.epoch, s.loss);
    })?;
    let seconds = t.elapsed().as_secs_f64();
    round_params_f32(&mut graph);
    let accuracy = evaluate_graph(&graph, None, test)?.0;
    if accuracy < SANITY_FLOOR {
        return Err(Error::BelowFloor {
            accuracy,
            floor: SANITY_FLOOR,
        });
    }
    Ok(Baseline {
        graph,
        accuracy,
        seconds,
        epochs,
    })
}

pub struct Compiled {
    pub out: Transformed,
    pub seconds: f64,
}

/// Rows of the training set handed to the tuner.
pub fn tuning_rows(cfg: &TuneConfig) -> usize {
    (cfg.train_samples + cfg.eval_samples).max(cfg.calib_samples)
}

/// Reforms, re-encodes, tiles and tunes `baseline` for `spec`.
pub fn compile_graph(baseline: &CompGraph, spec: &HardwareSpec, cfg: &TuneConfig, train: &Dataset) -> Result<Compiled, Error> {
    let x = train.images.slice_rows(0, tuning_rows(cfg).min(train.len()));
    let t = Instant::now();
    let out = transform(baseline, spec, cfg, &[x])?;
    Ok(Compiled {
        out,
        seconds: t.elapsed().as_secs_f64(),
    })
}

/// Test accuracy in percent, with edge traces when the graph was simulated.
/// Core-op graphs run on the simulator under `spec`; other stages run the
/// float executor.
pub fn evaluate_graph(graph: &CompGraph, spec: Option<&HardwareSpec>, test: &Dataset) -> Result<(f64, Vec<EdgeTrace>), Error> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    if graph.stage != Stage::CoreOps {
        return Ok((100.0 * evaluate_classifier(graph, &test.images, &test.labels)?, Vec::new()));
    }
    let spec = spec.ok_or_else(|| Error::Config("a core-op graph needs a hardware spec".into()))?;
    let words = encode_batch(graph, &[test.images.clone()])?;
    let sim = simulate(graph, spec, &words, test.len(), &SimOptions::default())?;
    let logits = sim.outputs.first().ok_or(Error::Validation("graph has no outputs".into()))?;
    Ok((100.0 * accuracy(logits, &test.labels), sim.traces))
}

pub struct Mapped {
    pub comm: CommGraph,
    pub mesh: MeshCost,
    pub placement: Placement,
    pub warnings: Vec<String>,
}

/// Places the core-ops of a compiled graph, weighting links by the traffic
/// observed while simulating `sample`.
pub fn map_graph(graph: &CompGraph, spec: &HardwareSpec, sample: &Dataset, seed: u64) -> Result<Mapped, Error> {
    let (_, traces) = evaluate_graph(graph, Some(spec), sample)?;
    let (comm, warnings) = build_comm_graph(graph, &traces);
    let mesh = MeshCost::new(&spec.mesh)?;
    let cfg = MapConfig {
        seed,
        ..MapConfig::default()
    };
    let placement = map_to_mesh(&comm, &spec.mesh, &cfg)?;
    Ok(Mapped {
        comm,
        mesh,
        placement,
        warnings,
    })
}

/// Experimental axis of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    IoBits,
    WeightBits,
    ReencodeFactor,
    Encoding,
    Granularity,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Self, Error> {
        Ok(match s {
            "io_bits" | "io-bits" => Axis::IoBits,
            "weight_bits" | "weight-bits" => Axis::WeightBits,
            "reencode_factor" | "reencode-factor" => Axis::ReencodeFactor,
            "encoding" => Axis::Encoding,
            "granularity" => Axis::Granularity,
            _ => return Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::IoBits => "io_bits",
            Axis::WeightBits => "weight_bits",
            Axis::ReencodeFactor => "reencode_factor",
            Axis::Encoding => "encoding",
            Axis::Granularity => "granularity",
        }
    }

    /// Applies one sweep value.
    pub fn set(self, value: &str, spec: &mut HardwareSpec, cfg: &mut TuneConfig) -> Result<(), Error> {
        let count = || value.parse::<usize>().map_err(|_| Error::Config(format!("{}: bad value {value:?}", self.name())));
        match self {
            Axis::IoBits => spec.io_bits = count()? as u32,
            Axis::WeightBits => spec.weight_bits = count()? as u32,
            Axis::ReencodeFactor => cfg.reencode_factor = count()?,
            Axis::Encoding => spec.encoding = parse_encoding(value).map_err(Error::Config)?,
            Axis::Granularity => cfg.granularity = parse_granularity(value).map_err(Error::Config)?,
        }
        spec.check().map_err(|e| Error::Config(e.to_string()))?;
        cfg.check().map_err(|e| Error::Config(e.to_string()))
    }
}

pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub warnings: Vec<String>,
}

/// One compile and evaluation per value against a shared baseline. A failed
/// point is recorded in its row and the sweep moves on.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    baseline: &CompGraph,
    baseline_accuracy: f64,
    spec: &HardwareSpec,
    cfg: &TuneConfig,
    axis: Axis,
    values: &[String],
    train: &Dataset,
    test: &Dataset,
) -> SweepOutcome {
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let (mut s, mut c) = (*spec, *cfg);
        let t = Instant::now();
        let point = axis.set(v, &mut s, &mut c).and_then(|_| {
            let compiled = compile_graph(baseline, &s, &c, train)?;
            let (acc, _) = evaluate_graph(&compiled.out.graph, Some(&s), test)?;
            Ok((acc, compiled.out.report.core_ops))
        });
        let secs = t.elapsed().as_secs_f64();
        rows.push(match point {
            Ok((accuracy, core_ops)) => SweepRow {
                axis: axis.name().into(),
                value: v.clone(),
                accuracy,
                drop: baseline_accuracy - accuracy,
                core_ops,
                wall_clock_s: secs,
                error: String::new(),
            },
            Err(e) => SweepRow {
                axis: axis.name().into(),
                value: v.clone(),
                accuracy: f64::NAN,
                drop: f64::NAN,
                core_ops: 0,
                wall_clock_s: secs,
                error: e.to_string(),
            },
        });
    }
    let warnings = monotonic_warnings(axis, &rows);
    SweepOutcome { rows, warnings }
}

/// Bit-width sweeps should not lose accuracy as bits grow.
pub fn monotonic_warnings(axis: Axis, rows: &[SweepRow]) -> Vec<String> {
    if !matches!(axis, Axis::IoBits | Axis::WeightBits) {
        return Vec::new();
    }
    let mut pts: Vec<(u32, f64)> = rows
        .iter()
        .filter(|r| r.error.is_empty())
        .filter_map(|r| r.value.parse().ok().map(|b| (b, r.accuracy)))
        .collect();
    pts.sort_by_key(|p| p.0);
    pts.windows(2)
        .filter(|w| w[1].1 < w[0].1 - SWEEP_NOISE)
        .map(|w| {
            format!(
                "{}: accuracy falls from {:.2}% at {} to {:.2}% at {}",
                axis.name(),
                w[0].1,
                w[0].0,
                w[1].1,
                w[1].0
            )
        })
        .collect()
}

