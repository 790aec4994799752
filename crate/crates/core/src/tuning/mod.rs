//! Turns a trained source graph into a validated core-op graph.
//!
//! The graph is reformed into weighted sums, cut into parts at the edges that
//! correspond to source edges, and each group of parts is re-encoded, fully
//! expanded into core-ops and tuned against the source graph's activations in
//! three phases: free (float weights), value range (codebook parameter) and
//! rounding (codebook members). Every part reads the exact words emitted for
//! the parts before it.

mod expand;
mod model;
mod reencode;

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Taps};
use crate::codec::{Codebook, CodecError};
use crate::exec::{self, ExecError};
use crate::graph::{group_parts, CompGraph, CoreOp, GraphError, OpKind, Stage};
use crate::hardware::{self, encode_ingress, HardwareSpec, HwError, Violation};
use crate::math;
use crate::reform::{self, ApproxConfig, ReformError, ReformReport};
use crate::tensor::Tensor;

use expand::{expand_vertex, line_value, Ctx, Enc, TOp};
use model::{Head, HeadKind, Hyper, Mode, PartModel, Quant, Source, WordStore};

pub use reencode::{calibrate, fit_range, fuse_linear_triple, x_max, Autoencoder, Range};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TuneError {
    #[error(transparent)]
    Reform(#[from] ReformError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("core-op {op}: {source}")]
    Codec { op: usize, source: CodecError },
    #[error(transparent)]
    Hw(#[from] HwError),
    #[error("vertex {vertex}: {detail}")]
    Unsupported { vertex: usize, detail: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("part {part}, {phase} phase: {source}")]
    Part {
        part: usize,
        phase: &'static str,
        source: Box<TuneError>,
    },
    #[error("no calibration samples")]
    NoData,
    #[error("words of vertex {0} are missing or not produced by emitted core-ops")]
    Tainted(usize),
    #[error("invalid tuning config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    /// Hidden units per value in the re-encoding autoencoders (`m`).
    pub reencode_factor: usize,
    /// Parts tuned together; 0 tunes the whole graph at once.
    pub granularity: usize,
    pub iters_per_phase: usize,
    pub value_range_rounds: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Per-step update size as a fraction of each op's weight norm (before
    /// the learning rate).
    pub trust: f64,
    pub batch: usize,
    pub seed: u64,
    /// Rows of the supplied data used for tuning steps.
    pub train_samples: usize,
    /// Rows held out for checkpoint selection and value-range search.
    pub eval_samples: usize,
    /// Rows used to calibrate encoding ranges.
    pub calib_samples: usize,
    pub percentile: f64,
    /// Narrow percentile ranges to the least round-trip error (autoencoder
    /// mode only).
    pub fit_ranges: bool,
    /// Lanes per partial sum in blocked expansions; 0 uses `reencode_factor`.
    pub partial_lanes: usize,
    /// `false` gives plain scale-and-round: one lane, no tuning, weights
    /// projected onto fitted codebooks.
    pub autoencoder: bool,
    pub free: bool,
    pub value_range: bool,
    pub rounding: bool,
    pub reform: ApproxConfig,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            reencode_factor: 1,
            granularity: 1,
            iters_per_phase: 2000,
            value_range_rounds: 3,
            lr: 0.01,
            momentum: 0.9,
            trust: 0.3,
            batch: 64,
            seed: 1,
            train_samples: 4096,
            eval_samples: 512,
            calib_samples: 1024,
            percentile: 99.9,
            fit_ranges: true,
            partial_lanes: 0,
            autoencoder: true,
            free: true,
            value_range: true,
            rounding: true,
            reform: ApproxConfig::default(),
        }
    }
}

impl TuneConfig {
    pub fn check(&self) -> Result<(), TuneError> {
        let bad = |m: &str| Err(TuneError::Config(m.into()));
        if self.reencode_factor == 0 {
            return bad("reencode_factor must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr must be positive and momentum in [0, 1)");
        }
        if !(self.trust > 0.0 && self.trust.is_finite()) {
            return bad("trust must be positive");
        }
        if self.batch == 0 || self.train_samples == 0 || self.calib_samples == 0 {
            return bad("batch and sample counts must be positive");
        }
        if !(self.percentile > 50.0 && self.percentile <= 100.0) {
            return bad("percentile must lie in (50, 100]");
        }
        Ok(())
    }

    fn lanes(&self) -> usize {
        if self.autoencoder {
            self.reencode_factor
        } else {
            1
        }
    }

    fn partial(&self) -> usize {
        if self.partial_lanes == 0 {
            self.lanes()
        } else {
            self.partial_lanes
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Free,
    ValueRange,
    Rounding,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Free => "free",
            Phase::ValueRange => "value_range",
            Phase::Rounding => "rounding",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: Phase,
    /// Best held-out loss so far at each checkpoint (search round for the
    /// value-range phase); the first entry is the phase's starting loss.
    pub curve: Vec<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartReport {
    pub part: usize,
    /// Weighted-sum vertices of the part.
    pub vertices: Vec<usize>,
    pub core_ops: usize,
    /// Held-out loss of the untuned float expansion.
    pub pre_mse: f64,
    /// Held-out loss of the emitted core-ops.
    pub post_mse: f64,
    pub phases: Vec<PhaseReport>,
    pub codebooks: Vec<Codebook>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub parts: Vec<PartReport>,
    pub warnings: Vec<String>,
    pub reform: ReformReport,
    /// Core-op vertices (shared-weight groups count once).
    pub core_ops: usize,
    /// Core-ops counting every position of a shared-weight group.
    pub logical_core_ops: usize,
}

#[derive(Debug, Clone)]
pub struct Transformed {
    pub graph: CompGraph,
    /// The reformed intermediate graph the parts were supervised against.
    pub ghat: CompGraph,
    pub report: TuneReport,
    pub violations: Vec<Violation>,
}

struct Prepared {
    ghat: CompGraph,
    reform: ReformReport,
    widths: Vec<usize>,
    ranges: Vec<Range>,
    probe: exec::Forward,
    warnings: Vec<String>,
}

fn prepare(
    graph: &CompGraph,
    cfg: &TuneConfig,
    inputs: &[Tensor],
    calib: usize,
    pct: f64,
    bits: u32,
    fit: bool,
) -> Result<Prepared, TuneError> {
    let n = inputs.first().map_or(0, Tensor::rows);
    if n == 0 {
        return Err(TuneError::NoData);
    }
    let nc = calib.min(n);
    let sample: Vec<Tensor> = inputs.iter().map(|t| t.slice_rows(0, nc)).collect();
    let reform_samples = if sample.len() == 1 { Some(&sample[0]) } else { None };
    let (ghat, reform) = reform::reform(graph, reform_samples, &cfg.reform)?;
    let widths = ghat.widths()?;
    let gin = ghat.inputs();
    if gin.len() != inputs.len() {
        return Err(TuneError::Config(alloc::format!(
            "graph has {} inputs, {} tensors supplied",
            gin.len(),
            inputs.len()
        )));
    }
    for (&v, t) in gin.iter().zip(inputs) {
        if t.len() != t.rows() * widths[v] {
            return Err(TuneError::Shape(alloc::format!("input {v}: rows of width {} expected", widths[v])));
        }
    }
    let probe = exec::forward(&ghat, &sample)?;
    let mut warnings = Vec::new();
    let mut ranges = Vec::with_capacity(ghat.len());
    for v in &ghat.vertices {
        let values = probe.value(v.id).expect("probe evaluates every vertex").data();
        let relu = v.kind.as_local().is_some_and(|l| l.relu);
        let p = if ghat.outputs.contains(&v.id) { 100.0 } else { pct };
        let (mut r, w) = calibrate(values, p, relu);
        if let Some(w) = w {
            warnings.push(alloc::format!("vertex {}: {w}", v.id));
        }
        if fit && ghat.outputs.contains(&v.id) {
            // Only the top of each row decides the argmax: spend the words there.
            let w = widths[v.id];
            let tops: Vec<f64> = values
                .chunks(w)
                .flat_map(|row| {
                    let mut r = row.to_vec();
                    r.sort_unstable_by(|a, b| b.total_cmp(a));
                    r.truncate(2);
                    r
                })
                .collect();
            let (t, _) = calibrate(&tops, pct, false);
            r = fit_range(&tops, Range { lo: t.lo, hi: r.hi }, bits, cfg.lanes());
        } else if fit && v.origin.is_some() {
            r = fit_range(values, r, bits, cfg.lanes());
        }
        ranges.push(r);
    }
    Ok(Prepared {
        ghat,
        reform,
        widths,
        ranges,
        probe,
        warnings,
    })
}

/// Column-wise concatenation of equally tall matrices.
fn concat_cols(ts: &[&Tensor]) -> Tensor {
    let rows = ts.first().map_or(0, |t| t.rows());
    let width: usize = ts.iter().map(|t| t.cols()).sum();
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for t in ts {
            data.extend_from_slice(t.row(r));
        }
    }
    Tensor::new(vec![rows, width], data).expect("concat rows")
}

/// Clean values of `vertices` over `rows` of the inputs, in chunks.
fn clean_values(ghat: &CompGraph, inputs: &[Tensor], n: usize, vertices: &[usize]) -> Result<BTreeMap<usize, Tensor>, TuneError> {
    let mut acc: BTreeMap<usize, Vec<f64>> = vertices.iter().map(|&v| (v, Vec::new())).collect();
    let mut start = 0;
    while start < n {
        let end = (start + 512).min(n);
        let chunk: Vec<Tensor> = inputs.iter().map(|t| t.slice_rows(start, end)).collect();
        let f = exec::forward(ghat, &chunk)?;
        for (v, a) in acc.iter_mut() {
            a.extend_from_slice(f.value(*v).expect("evaluated").data());
        }
        start = end;
    }
    Ok(acc
        .into_iter()
        .map(|(v, d)| {
            let w = d.len() / n.max(1);
            (v, Tensor::new(vec![n, w], d).expect("clean rows"))
        })
        .collect())
}

fn make_head(ghat: usize, enc: &Enc, width: usize, egress: bool, target: Tensor, gwidth: &[usize]) -> Head {
    let mut srcs: Vec<usize> = enc.words.iter().map(|w| w.0).collect();
    srcs.sort_unstable();
    srcs.dedup();
    let mut base = BTreeMap::new();
    let mut cols = 0usize;
    for &s in &srcs {
        base.insert(s, cols as u32);
        cols += gwidth[s];
    }
    let idx: Vec<u32> = enc.words.iter().map(|(g, w)| base[g] + w).collect();
    let kind = if egress {
        let mut weight = vec![0.0; width * cols];
        for j in 0..width {
            for i in 0..enc.lanes {
                weight[j * cols + idx[j * enc.lanes + i] as usize] = enc.unit;
            }
        }
        HeadKind::Egress {
            weight,
            offset: vec![enc.off; width],
        }
    } else {
        HeadKind::Fixed {
            unit: enc.unit,
            off: enc.off,
        }
    };
    Head {
        ghat,
        srcs,
        taps: Arc::new(Taps::new(width, enc.lanes, idx)),
        cols,
        kind,
        target,
    }
}

fn ingress_enc(gid: usize, width: usize, r: Range, bits: u32) -> Enc {
    let top = math::io_max(bits) as f64;
    Enc {
        lanes: 1,
        unit: (r.hi - r.lo) / top,
        off: r.lo,
        top,
        words: (0..width as u32).map(|j| (gid, j)).collect(),
    }
}

fn part_err(part: usize, phase: &'static str) -> impl Fn(TuneError) -> TuneError {
    move |e| TuneError::Part {
        part,
        phase,
        source: Box::new(e),
    }
}

/// Reforms, re-encodes, expands and tunes `graph` for `spec`. `inputs` holds
/// sample rows (one tensor per graph input) drawn from the training set.
pub fn transform(
    graph: &CompGraph,
    spec: &HardwareSpec,
    cfg: &TuneConfig,
    inputs: &[Tensor],
) -> Result<Transformed, TuneError> {
    spec.check()?;
    cfg.check()?;
    let n = inputs.first().map_or(0, Tensor::rows);
    let n_train = cfg.train_samples.min(n);
    let (eval_lo, eval_hi) = if n > n_train && cfg.eval_samples > 0 {
        (n_train, (n_train + cfg.eval_samples).min(n))
    } else {
        (0, cfg.eval_samples.clamp(1, n_train.max(1)))
    };
    let n_used = n_train.max(eval_hi);
    let train_rows: Vec<usize> = (0..n_train).collect();
    let eval_rows: Vec<usize> = (eval_lo..eval_hi).collect();

    let fit = cfg.fit_ranges && cfg.autoencoder;
    let prep = prepare(graph, cfg, inputs, cfg.calib_samples, cfg.percentile, spec.io_bits, fit)?;
    let Prepared {
        ghat,
        reform,
        widths,
        ranges,
        probe,
        mut warnings,
    } = prep;
    let bits = spec.io_bits;
    let top = math::io_max(bits) as f64;
    let gin = ghat.inputs();

    let parts = ghat.split_by_anchors(&ghat.origin_anchors())?;
    let g = if cfg.granularity == 0 { parts.len().max(1) } else { cfg.granularity };
    let groups = group_parts(&ghat, &parts, g);
    let mut part_of = vec![usize::MAX; ghat.len()];
    for (pi, p) in groups.iter().enumerate() {
        for &v in &p.vertices {
            part_of[v] = pi;
        }
    }
    let consumers = ghat.consumers();
    let last_use: Vec<usize> = (0..ghat.len())
        .map(|v| consumers[v].iter().map(|&c| part_of[c]).chain([part_of[v]]).filter(|&p| p != usize::MAX).max().unwrap_or(0))
        .collect();
    let needed: Vec<usize> = groups.iter().flat_map(|p| p.outputs.iter().copied()).collect();
    let mut targets = clean_values(&ghat, inputs, n_used, &needed)?;

    // G′ ids: ingress vertices, the bias-line constant, then core-ops.
    let mut gwidth: Vec<usize> = gin.iter().map(|&v| widths[v]).collect();
    let const_gid = gin.len();
    gwidth.push(spec.scale_n);
    let mut next = const_gid + 1;
    let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
    let mut store = WordStore::default();
    let mut encs: Vec<Option<Enc>> = vec![None; ghat.len()];
    for (gid, (&v, t)) in gin.iter().zip(inputs).enumerate() {
        let r = ranges[v];
        let words: Vec<f64> = t.data()[..n_used * widths[v]]
            .iter()
            .map(|&x| encode_ingress(x, r.lo, r.hi, bits) as f64)
            .collect();
        store
            .words
            .insert(gid, (Tensor::new(vec![n_used, widths[v]], words).expect("ingress words"), Source::Ingress));
        encs[v] = Some(ingress_enc(gid, widths[v], r, bits));
        owner.insert(gid, v);
    }
    let line_row: Vec<f64> = (0..spec.scale_n).map(|l| line_value(l, bits) as f64).collect();
    let mut const_words = Vec::with_capacity(n_used * spec.scale_n);
    for _ in 0..n_used {
        const_words.extend_from_slice(&line_row);
    }
    store.words.insert(
        const_gid,
        (Tensor::new(vec![n_used, spec.scale_n], const_words).expect("line words"), Source::Emitted),
    );

    let family = spec.family();
    let mut emitted: Vec<(usize, CoreOp, Vec<usize>)> = Vec::new();
    let mut egress: BTreeMap<usize, Head> = BTreeMap::new();
    let mut reports = Vec::with_capacity(groups.len());
    for (pi, part) in groups.iter().enumerate() {
        let mut ops: Vec<TOp> = Vec::new();
        for &v in &part.vertices {
            let lanes = if ghat.vertices[v].origin.is_some() { cfg.lanes() } else { 1 };
            let code = Autoencoder::new(bits, lanes, ranges[v]);
            let mut ctx = Ctx {
                spec,
                partial_lanes: cfg.partial(),
                pct: cfg.percentile,
                probe: &probe,
                gwidth: &mut gwidth,
                warnings: &mut warnings,
            };
            let (tops, enc) = expand_vertex(&ghat, v, &widths, &encs, &code, &mut ctx, &mut next)
                .map_err(part_err(pi, "expand"))?;
            for op in &tops {
                owner.insert(op.gid, v);
            }
            ops.extend(tops);
            encs[v] = Some(enc);
        }
        let heads: Vec<Head> = part
            .outputs
            .iter()
            .map(|&o| {
                let target = targets.get(&o).expect("clean part output").clone();
                let enc = encs[o].as_ref().expect("expanded");
                make_head(o, enc, widths[o], ghat.outputs.contains(&o), target, &gwidth)
            })
            .collect();
        let mut model = PartModel {
            ops,
            heads,
            bits,
            fan_in: spec.scale_n,
            float_inputs: false,
        };
        let quant = Quant::Round(bits);
        let hp = |phase: u64| Hyper {
            iters: cfg.iters_per_phase,
            lr: cfg.lr,
            momentum: cfg.momentum,
            trust: cfg.trust,
            batch: cfg.batch,
            seed: cfg.seed ^ ((pi as u64) << 16) ^ (phase << 8),
        };
        let pre_mse = model
            .eval_loss(&store, &eval_rows, Mode::Float, quant)
            .map_err(part_err(pi, "free"))?;
        let mut phases = Vec::new();
        if cfg.autoencoder && cfg.free && cfg.iters_per_phase > 0 {
            let r = model
                .train(&store, &train_rows, &eval_rows, Mode::Float, quant, &hp(1), Phase::Free)
                .map_err(part_err(pi, "free"))?;
            phases.push(r);
        }
        model.em_init(family).map_err(part_err(pi, "value_range"))?;
        if cfg.autoencoder && cfg.value_range && cfg.value_range_rounds > 0 {
            let r = model
                .tune_value_range(&store, &eval_rows, quant, cfg.value_range_rounds)
                .map_err(part_err(pi, "value_range"))?;
            phases.push(r);
        }
        if cfg.autoencoder && cfg.rounding && cfg.iters_per_phase > 0 {
            let r = model
                .train(&store, &train_rows, &eval_rows, Mode::Projected, quant, &hp(3), Phase::Rounding)
                .map_err(part_err(pi, "rounding"))?;
            phases.push(r);
        }
        for r in &phases {
            if r.diverged {
                warnings.push(alloc::format!(
                    "part {pi}: {} phase diverged; best checkpoint kept",
                    r.phase.name()
                ));
            }
        }

        // Emit: exact words from the hardware arithmetic feed every later part.
        for op in &model.ops {
            let (core, ins) = model.emit(op, const_gid, &gwidth);
            let xs: Vec<&Tensor> = ins.iter().map(|&g| store.get(g)).collect::<Result<_, _>>()?;
            let x = concat_cols(&xs);
            let words = exec::core_op_batch(&core, &x, bits).map_err(|detail| {
                part_err(pi, "rounding")(TuneError::Unsupported { vertex: op.ghat, detail })
            })?;
            store.words.insert(op.gid, (words, Source::Emitted));
            emitted.push((op.gid, core, ins));
        }
        let post_mse = model
            .eval_loss(&store, &eval_rows, Mode::Projected, quant)
            .map_err(part_err(pi, "rounding"))?;
        for h in &model.heads {
            if matches!(h.kind, HeadKind::Egress { .. }) {
                egress.insert(h.ghat, h.clone());
            }
        }
        reports.push(PartReport {
            part: pi,
            vertices: part.vertices.clone(),
            core_ops: model.ops.len(),
            pre_mse,
            post_mse,
            phases,
            codebooks: model.ops.iter().filter_map(|o| o.codebook.clone()).collect(),
        });
        for &o in &part.outputs {
            targets.remove(&o);
        }
        store.words.retain(|gid, _| *gid == const_gid || owner.get(gid).is_none_or(|&v| last_use[v] > pi));
    }

    let mut out = CompGraph::new(Stage::CoreOps);
    for &v in &gin {
        let r = ranges[v];
        out.add(
            OpKind::Ingress {
                width: widths[v],
                lo: r.lo,
                hi: r.hi,
                bits,
            },
            &[],
        )?;
    }
    out.add(
        OpKind::Const {
            values: (0..spec.scale_n).map(|l| line_value(l, bits)).collect(),
        },
        &[],
    )?;
    emitted.sort_by_key(|e| e.0);
    let mut logical = 0;
    for (gid, core, ins) in emitted {
        logical += core.logical_count();
        let id = out.add_with_origin(OpKind::CoreOp(core), &ins, None)?;
        debug_assert_eq!(id, gid);
    }
    let core_ops = out.len() - gin.len() - 1;
    let mut outs = Vec::with_capacity(ghat.outputs.len());
    for &o in &ghat.outputs {
        let h = egress.get(&o).ok_or_else(|| TuneError::Unsupported {
            vertex: o,
            detail: "graph output is not a weighted sum".into(),
        })?;
        let HeadKind::Egress { weight, offset } = &h.kind else {
            unreachable!("graph-output heads decode through egress")
        };
        let id = out.add(
            OpKind::Egress {
                weight: Tensor::new(vec![widths[o], h.cols], weight.clone()).expect("egress weight"),
                offset: Tensor::vector(offset.clone()),
            },
            &h.srcs,
        )?;
        outs.push(id);
    }
    out.set_outputs(&outs)?;
    let violations = hardware::validate(&out, spec);
    let _ = top;
    Ok(Transformed {
        graph: out,
        ghat,
        report: TuneReport {
            parts: reports,
            warnings,
            reform,
            core_ops,
            logical_core_ops: logical,
        },
        violations,
    })
}

/// Largest absolute gap between every decoded weighted-sum output of the
/// untuned float expansion and the reformed graph, over `inputs`. Ranges are
/// calibrated at the maximum so nothing saturates; words are not rounded.
pub fn expansion_error(graph: &CompGraph, spec: &HardwareSpec, cfg: &TuneConfig, inputs: &[Tensor]) -> Result<f64, TuneError> {
    spec.check()?;
    cfg.check()?;
    let n = inputs.first().map_or(0, Tensor::rows);
    let prep = prepare(graph, cfg, inputs, n, 100.0, spec.io_bits, false)?;
    let bits = spec.io_bits;
    let top = math::io_max(bits) as f64;
    let gin = prep.ghat.inputs();
    let mut gwidth: Vec<usize> = gin.iter().map(|&v| prep.widths[v]).collect();
    gwidth.push(spec.scale_n);
    let mut next = gin.len() + 1;
    let mut store = WordStore::default();
    let mut encs: Vec<Option<Enc>> = vec![None; prep.ghat.len()];
    for (gid, (&v, t)) in gin.iter().zip(inputs).enumerate() {
        let enc = ingress_enc(gid, prep.widths[v], prep.ranges[v], bits);
        let words = t.map(|x| enc.lane_word(x, 0));
        let words = Tensor::new(vec![n, prep.widths[v]], words.into_data()).expect("float words");
        store.words.insert(gid, (words, Source::Float));
        encs[v] = Some(enc);
    }
    let mut warnings = Vec::new();
    let mut ops = Vec::new();
    let mut heads = Vec::new();
    for v in &prep.ghat.vertices {
        if v.kind.is_source_input() {
            continue;
        }
        let lanes = if v.origin.is_some() { cfg.lanes() } else { 1 };
        let code = Autoencoder::new(bits, lanes, prep.ranges[v.id]);
        let mut ctx = Ctx {
            spec,
            partial_lanes: cfg.partial(),
            pct: 100.0,
            probe: &prep.probe,
            gwidth: &mut gwidth,
            warnings: &mut warnings,
        };
        let (tops, enc) = expand_vertex(&prep.ghat, v.id, &prep.widths, &encs, &code, &mut ctx, &mut next)?;
        ops.extend(tops);
        let target = prep.probe.value(v.id).expect("probe").clone();
        heads.push(make_head(v.id, &enc, prep.widths[v.id], false, target, &gwidth));
        encs[v.id] = Some(enc);
    }
    let model = PartModel {
        ops,
        heads,
        bits,
        fan_in: spec.scale_n,
        float_inputs: true,
    };
    let rows: Vec<usize> = (0..n).collect();
    let values = model.head_values(&store, &rows, Mode::Float, Quant::Clamp(top))?;
    Ok(values
        .iter()
        .zip(&model.heads)
        .map(|(v, h)| v.max_abs_diff(&h.target))
        .fold(0.0, f64::max))
}
