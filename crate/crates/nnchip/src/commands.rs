//! The CLI verbs. Each reads its inputs from the run's output directory and
//! writes its artifacts back there, so every report can be regenerated from
//! saved files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nnchip_core::graph::CompGraph;
use nnchip_core::tuning::TuneConfig;
use nnchip_core::HardwareSpec;
use serde::{Deserialize, Serialize};

use crate::config::{Overrides, RunConfig};
use crate::idx::{load_mnist_dir, Dataset};
use crate::report::{self, EvalReport, PlacementSummary, SweepRow};
use crate::{manifest, pipeline, Error};

/// Test images simulated to collect link traffic for placement.
pub const TRACE_SAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineInfo {
    pub model: String,
    pub seed: u64,
    pub epochs: usize,
    pub accuracy: f64,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileInfo {
    pub compile_seconds: f64,
    /// Baseline training time, when the baseline was trained by this tool.
    pub train_seconds: Option<f64>,
    pub core_ops: usize,
    pub logical_core_ops: usize,
    pub parts: usize,
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EpochRow {
    epoch: usize,
    loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SweepSummary {
    axis: String,
    baseline_accuracy: f64,
    warnings: Vec<String>,
}

fn out_dir(run: &RunConfig) -> Result<&Path, Error> {
    fs::create_dir_all(&run.out).map_err(|source| Error::Io {
        path: run.out.clone(),
        source,
    })?;
    Ok(&run.out)
}

fn data(run: &RunConfig) -> Result<(Dataset, Dataset), Error> {
    Ok(load_mnist_dir(&run.data_dir)?)
}

fn baseline_stem(run: &RunConfig) -> PathBuf {
    run.out.join("baseline")
}

fn compiled_stem(run: &RunConfig) -> PathBuf {
    run.out.join("compiled")
}

fn specs(run: &RunConfig, ov: &Overrides) -> Result<(HardwareSpec, TuneConfig), Error> {
    let mut spec = run.hardware_spec()?;
    let mut tune = run.tune_config()?;
    ov.apply(&mut spec, &mut tune)?;
    Ok((spec, tune))
}

/// Hardware spec a compiled graph was built for, falling back to the run's.
fn compiled_spec(run: &RunConfig, ov: &Overrides) -> Result<HardwareSpec, Error> {
    let saved = run.out.join("hardware.json");
    if saved.is_file() {
        report::read_json(&saved)
    } else {
        Ok(specs(run, ov)?.0)
    }
}

pub fn train(run: &RunConfig) -> Result<String, Error> {
    run.check()?;
    let (tr, te) = data(run)?;
    let b = pipeline::train_baseline(&run.arch()?, &run.train, run.seed, &tr, &te)?;
    let out = out_dir(run)?;
    manifest::save(&b.graph, &baseline_stem(run))?;
    let rows: Vec<EpochRow> = b.epochs.iter().map(|s| EpochRow { epoch: s.epoch, loss: s.loss }).collect();
    report::write_rows(&out.join("train.csv"), &rows)?;
    let info = BaselineInfo {
        model: run.arch()?.name(),
        seed: run.seed,
        epochs: run.train.epochs,
        accuracy: b.accuracy,
        train_seconds: b.seconds,
    };
    report::write_json(&out.join("baseline.json"), &info)?;
    Ok(format!(
        "{}: test accuracy {:.2}% after {} epochs ({:.1}s)",
        info.model, b.accuracy, info.epochs, b.seconds
    ))
}

pub fn compile(run: &RunConfig, ov: &Overrides) -> Result<String, Error> {
    let (spec, tune) = specs(run, ov)?;
    let baseline = manifest::load(&baseline_stem(run))?;
    let (tr, _) = data(run)?;
    let c = pipeline::compile_graph(&baseline, &spec, &tune, &tr)?;
    let out = out_dir(run)?;
    let t = &c.out;
    manifest::save(&t.graph, &compiled_stem(run))?;
    report::write_json(&out.join("hardware.json"), &spec)?;
    report::write_json(&out.join("tuning_config.json"), &tune)?;
    report::write_rows(&out.join("tuning.csv"), &report::tuning_rows(&t.report))?;
    let train_seconds = report::read_json::<BaselineInfo>(&out.join("baseline.json"))
        .ok()
        .map(|b| b.train_seconds);
    let info = CompileInfo {
        compile_seconds: c.seconds,
        train_seconds,
        core_ops: t.report.core_ops,
        logical_core_ops: t.report.logical_core_ops,
        parts: t.report.parts.len(),
        violations: t.violations.iter().map(|v| v.to_string()).collect(),
        warnings: t.report.warnings.clone(),
    };
    report::write_json(&out.join("compile.json"), &info)?;
    if !info.violations.is_empty() {
        return Err(Error::Validation(format!(
            "{} finding(s); first: {}",
            info.violations.len(),
            info.violations[0]
        )));
    }
    Ok(format!(
        "compiled into {} core-ops ({} logical) over {} part(s) in {:.1}s",
        info.core_ops, info.logical_core_ops, info.parts, c.seconds
    ))
}

/// Evaluates `graph` (default: the compiled graph) and the baseline on the
/// test set.
pub fn evaluate(run: &RunConfig, ov: &Overrides, graph: Option<&Path>) -> Result<String, Error> {
    let stem = graph.map_or_else(|| compiled_stem(run), Path::to_path_buf);
    let g = manifest::load(&stem)?;
    let base = manifest::load(&baseline_stem(run))?;
    let spec = compiled_spec(run, ov)?;
    let (_, te) = data(run)?;
    let rep = eval_report(&run.arch()?.name(), &base, &g, &spec, &te)?;
    let out = out_dir(run)?;
    report::write_json(&out.join("eval.json"), &rep)?;
    let row = SweepRow {
        axis: "none".into(),
        value: String::new(),
        accuracy: rep.accuracy,
        drop: rep.drop,
        core_ops: rep.core_ops,
        wall_clock_s: report::read_json::<CompileInfo>(&out.join("compile.json")).map_or(0.0, |c| c.compile_seconds),
        error: String::new(),
    };
    report::write_rows(&out.join("eval.csv"), &[row])?;
    Ok(format!(
        "accuracy {:.2}% (baseline {:.2}%, drop {:.2} pt), {} core-ops",
        rep.accuracy, rep.baseline_accuracy, rep.drop, rep.core_ops
    ))
}

pub fn eval_report(model: &str, base: &CompGraph, g: &CompGraph, spec: &HardwareSpec, test: &Dataset) -> Result<EvalReport, Error> {
    let (b, _) = pipeline::evaluate_graph(base, None, test)?;
    let (a, _) = pipeline::evaluate_graph(g, Some(spec), test)?;
    let mut rep = EvalReport::new(model, test.len(), b, a);
    for v in &g.vertices {
        if let nnchip_core::OpKind::CoreOp(op) = &v.kind {
            rep.core_ops += 1;
            rep.logical_core_ops += op.logical_count();
        }
    }
    Ok(rep)
}

pub fn map(run: &RunConfig, ov: &Overrides) -> Result<String, Error> {
    let g = manifest::load(&compiled_stem(run))?;
    let spec = compiled_spec(run, ov)?;
    let (_, te) = data(run)?;
    let m = pipeline::map_graph(&g, &spec, &te.head(TRACE_SAMPLES), run.seed)?;
    let out = out_dir(run)?;
    report::write_rows(&out.join("placement.csv"), &report::placement_rows(&m.placement, &m.mesh))?;
    let summary = report::placement_summary(&m.comm, &m.placement, &m.mesh, spec.mesh.cores_per_chip, m.warnings);
    report::write_json(&out.join("placement.json"), &summary)?;
    Ok(format!(
        "placed {} cores on a {}x{} mesh: cost {:.1} (intra {:.1}, inter {:.1})",
        summary.nodes, summary.rows, summary.cols, summary.total, summary.intra, summary.inter
    ))
}

pub fn sweep(run: &RunConfig, ov: &Overrides, axis: &str, values: &[String]) -> Result<String, Error> {
    let axis = pipeline::Axis::parse(axis)?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let (spec, tune) = specs(run, ov)?;
    let base = manifest::load(&baseline_stem(run))?;
    let (tr, te) = data(run)?;
    let (b, _) = pipeline::evaluate_graph(&base, None, &te)?;
    let s = pipeline::sweep(&base, b, &spec, &tune, axis, values, &tr, &te);
    let out = out_dir(run)?;
    report::write_rows(&out.join(format!("sweep_{}.csv", axis.name())), &s.rows)?;
    let summary = SweepSummary {
        axis: axis.name().into(),
        baseline_accuracy: b,
        warnings: s.warnings.clone(),
    };
    report::write_json(&out.join(format!("sweep_{}.json", axis.name())), &summary)?;
    let mut text = String::new();
    for r in &s.rows {
        if r.error.is_empty() {
            let _ = writeln!(text, "{}={}: {:.2}% (drop {:.2}), {} core-ops", r.axis, r.value, r.accuracy, r.drop, r.core_ops);
        } else {
            let _ = writeln!(text, "{}={}: failed: {}", r.axis, r.value, r.error);
        }
    }
    for w in &s.warnings {
        let _ = writeln!(text, "warning: {w}");
    }
    Ok(text.trim_end().into())
}

/// Summarizes whatever artifacts the output directory holds.
pub fn report(run: &RunConfig) -> Result<String, Error> {
    let out = &run.out;
    let mut text = String::new();
    if let Ok(b) = report::read_json::<BaselineInfo>(&out.join("baseline.json")) {
        let _ = writeln!(text, "baseline  {} {:.2}% ({} epochs, {:.1}s)", b.model, b.accuracy, b.epochs, b.train_seconds);
    }
    if let Ok(c) = report::read_json::<CompileInfo>(&out.join("compile.json")) {
        let ratio = c.train_seconds.map_or(String::new(), |t| format!(", {:.0}% of training time", 100.0 * c.compile_seconds / t));
        let _ = writeln!(
            text,
            "compile   {} core-ops ({} logical), {:.1}s{ratio}, {} violation(s)",
            c.core_ops,
            c.logical_core_ops,
            c.compile_seconds,
            c.violations.len()
        );
    }
    if let Ok(e) = report::read_json::<EvalReport>(&out.join("eval.json")) {
        let _ = writeln!(text, "evaluate  {:.2}% vs {:.2}% (drop {:.2} pt)", e.accuracy, e.baseline_accuracy, e.drop);
    }
    if let Ok(p) = report::read_json::<PlacementSummary>(&out.join("placement.json")) {
        let _ = writeln!(
            text,
            "placement {} cores on {}x{}, cost {:.1} (intra {:.1}, inter {:.1})",
            p.nodes, p.rows, p.cols, p.total, p.intra, p.inter
        );
    }
    let mut sweeps: Vec<PathBuf> = fs::read_dir(out)
        .map_err(|source| Error::Io { path: out.clone(), source })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv") && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("sweep_")))
        .collect();
    sweeps.sort();
    for p in sweeps {
        for r in report::read_rows::<SweepRow>(&p)? {
            let _ = writeln!(text, "sweep     {}={} {:.2}% (drop {:.2})", r.axis, r.value, r.accuracy, r.drop);
        }
    }
    if text.is_empty() {
        return Err(Error::Config(format!("no reports in {}", out.display())));
    }
    Ok(text.trim_end().into())
}
