//! Chip constraints, bit-faithful core-op evaluation and whole-graph simulation.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::Taps;
use crate::codec::{CodecFamily, CodecKind, Codebook};
use crate::graph::{CompGraph, CoreOp, GraphError, OpKind, Stage};
use crate::math;
use crate::tensor::Tensor;

/// Physical mesh and link costs used by placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshSpec {
    pub rows: usize,
    pub cols: usize,
    pub cores_per_chip: usize,
    pub intra_cost: f64,
    pub inter_cost: f64,
}

impl Default for MeshSpec {
    fn default() -> Self {
        Self {
            rows: 12,
            cols: 8,
            cores_per_chip: 6,
            intra_cost: 1.0,
            inter_cost: 10.0,
        }
    }
}

/// Constraint bundle of a target chip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    /// Output ports per core-op (`M`).
    pub scale_m: usize,
    /// Input ports per core-op (`N`).
    pub scale_n: usize,
    pub io_bits: u32,
    pub weight_bits: u32,
    pub encoding: CodecKind,
    pub mesh: MeshSpec,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HwError {
    #[error("invalid hardware spec: {0}")]
    Spec(String),
    #[error("core-op reads word {index} of a {len}-word input")]
    InputLength { index: usize, len: usize },
    #[error("graph fails validation with {} finding(s); first: {}", .0.len(), .0[0])]
    Invalid(Vec<Violation>),
    #[error("expected {expected} ingress batches, got {got}")]
    Ingress { expected: usize, got: usize },
    #[error("ingress {vertex}: {got} words for batch {batch} × width {width}")]
    IngressWidth {
        vertex: usize,
        got: usize,
        batch: usize,
        width: usize,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl HardwareSpec {
    pub const MAX_IO_BITS: u32 = 16;

    /// TianJi in ANN mode: 256×256 cores, 8-bit I/O, 8-bit dynamic fixed point.
    pub fn tianji_ann() -> Self {
        Self {
            scale_m: 256,
            scale_n: 256,
            io_bits: 8,
            weight_bits: 8,
            encoding: CodecKind::DynamicFixedPoint,
            mesh: MeshSpec::default(),
        }
    }

    /// PRIME: 256×256 crossbars, 6-bit I/O, 8-bit fraction-encoded weights.
    pub fn prime() -> Self {
        Self {
            scale_m: 256,
            scale_n: 256,
            io_bits: 6,
            weight_bits: 8,
            encoding: CodecKind::FractionEncoding,
            mesh: MeshSpec::default(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tianji-ann" => Some(Self::tianji_ann()),
            "prime" => Some(Self::prime()),
            _ => None,
        }
    }

    pub fn family(&self) -> CodecFamily {
        CodecFamily {
            kind: self.encoding,
            bits: self.weight_bits,
        }
    }

    pub fn check(&self) -> Result<(), HwError> {
        let bad = |m: String| Err(HwError::Spec(m));
        if self.scale_m == 0 || self.scale_n == 0 {
            return bad(alloc::format!("scale {}x{} must be positive", self.scale_m, self.scale_n));
        }
        if self.io_bits == 0 || self.io_bits > Self::MAX_IO_BITS {
            return bad(alloc::format!("io_bits {} outside 1..=16", self.io_bits));
        }
        if self.weight_bits == 0 || self.weight_bits > CodecFamily::MAX_BITS {
            return bad(alloc::format!("weight_bits {} outside 1..=16", self.weight_bits));
        }
        let m = &self.mesh;
        if m.rows == 0 || m.cols == 0 || m.cores_per_chip == 0 {
            return bad("mesh dimensions must be positive".into());
        }
        if !(m.intra_cost >= 0.0 && m.inter_cost >= 0.0 && m.intra_cost.is_finite() && m.inter_cost.is_finite()) {
            return bad("link costs must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationKind {
    Stage { found: Stage },
    NotCoreOp { op: String },
    Scale { rows: usize, fan_in: usize },
    Family { found: CodecFamily },
    Codebook { row: usize, col: usize, value: f64 },
    IoBits { found: u32 },
    ConstRange { value: u32 },
    NonWordInput { producer: usize },
    Structure { detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub vertex: Option<usize>,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

impl core::fmt::Display for Violation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self.vertex {
            Some(v) => write!(f, "vertex {v}: {:?}", self.kind),
            None => write!(f, "{:?}", self.kind),
        }
    }
}

/// Lists every constraint violation of a core-op graph (empty means valid).
pub fn validate(graph: &CompGraph, spec: &HardwareSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |vertex: Option<usize>, kind| out.push(Violation { vertex, kind });
    if let Err(e) = spec.check() {
        push(None, ViolationKind::Structure { detail: alloc::format!("{e}") });
        return out;
    }
    if graph.stage != Stage::CoreOps {
        push(None, ViolationKind::Stage { found: graph.stage });
    }
    if let Err(e) = graph.validate() {
        push(None, ViolationKind::Structure { detail: alloc::format!("{e}") });
        return out;
    }
    let top = math::io_max(spec.io_bits);
    let is_word = |id: usize| {
        matches!(
            graph.vertices[id].kind,
            OpKind::Ingress { .. } | OpKind::Const { .. } | OpKind::CoreOp(_)
        )
    };
    for v in &graph.vertices {
        match &v.kind {
            OpKind::CoreOp(op) => {
                let fan_in = op.fan_in();
                if op.rows() > spec.scale_m || fan_in > spec.scale_n {
                    push(Some(v.id), ViolationKind::Scale { rows: op.rows(), fan_in });
                }
                if op.codebook.family() != spec.family() {
                    push(Some(v.id), ViolationKind::Family { found: op.codebook.family() });
                }
                let k = op.weight.cols();
                for (i, &w) in op.weight.data().iter().enumerate() {
                    if !op.codebook.contains(w) {
                        push(
                            Some(v.id),
                            ViolationKind::Codebook {
                                row: i / k.max(1),
                                col: i % k.max(1),
                                value: w,
                            },
                        );
                        break;
                    }
                }
                for &p in &v.inputs {
                    if !is_word(p) {
                        push(Some(v.id), ViolationKind::NonWordInput { producer: p });
                    }
                }
            }
            OpKind::Ingress { bits, .. } => {
                if *bits != spec.io_bits {
                    push(Some(v.id), ViolationKind::IoBits { found: *bits });
                }
            }
            OpKind::Const { values } => {
                if let Some(&bad) = values.iter().find(|&&x| x > top) {
                    push(Some(v.id), ViolationKind::ConstRange { value: bad });
                }
            }
            OpKind::Egress { .. } => {
                for &p in &v.inputs {
                    if !is_word(p) {
                        push(Some(v.id), ViolationKind::NonWordInput { producer: p });
                    }
                }
            }
            other => push(
                Some(v.id),
                ViolationKind::NotCoreOp {
                    op: other.name().into(),
                },
            ),
        }
    }
    out
}

/// Core-op with weights resolved to codebook levels for integer evaluation.
#[derive(Debug, Clone)]
pub struct PreparedOp {
    pub rows: usize,
    pub k: usize,
    pub codebook: Codebook,
    /// Uniform families: integer level per weight. Sharing: codeword index.
    pub code: Vec<i64>,
}

impl PreparedOp {
    /// Fails if some weight is not a codebook member.
    pub fn new(op: &CoreOp) -> Option<Self> {
        let book = &op.codebook;
        let mut code = Vec::with_capacity(op.weight.len());
        for &w in op.weight.data() {
            let k = book.index_of(w)?;
            code.push(match book.level(k) {
                Some(q) => q,
                None => k as i64,
            });
        }
        Some(Self {
            rows: op.rows(),
            k: op.taps.k,
            codebook: book.clone(),
            code,
        })
    }

    pub fn is_uniform(&self) -> bool {
        self.codebook.family().kind != CodecKind::WeightSharing
    }

    /// Pre-activation of row `r` on a gathered input window, exactly as the
    /// trainer's level-matrix path computes it.
    pub fn accumulate(&self, r: usize, window: &[u32]) -> f64 {
        let row = &self.code[r * self.k..(r + 1) * self.k];
        if self.is_uniform() {
            let s: i64 = row.iter().zip(window).map(|(&q, &x)| q * x as i64).sum();
            self.codebook.scale_level_sum(s as f64)
        } else {
            let vals = self.codebook.values();
            let mut counts = vec![0u64; vals.len()];
            for (&c, &x) in row.iter().zip(window) {
                counts[c as usize] += x as u64;
            }
            let mut acc = 0.0;
            for (c, &v) in vals.iter().enumerate() {
                if v != 0.0 {
                    acc += v * counts[c] as f64;
                }
            }
            acc
        }
    }
}

fn gather(taps: &Taps, p: usize, input: &[u32], window: &mut [u32]) -> Result<(), HwError> {
    for (slot, &i) in window.iter_mut().zip(&taps.idx[p * taps.k..(p + 1) * taps.k]) {
        *slot = if i == Taps::ZERO {
            0
        } else {
            *input.get(i as usize).ok_or(HwError::InputLength {
                index: i as usize,
                len: input.len(),
            })?
        };
    }
    Ok(())
}

fn eval_prepared(op: &CoreOp, prep: &PreparedOp, input: &[u32], bits: u32, out: &mut Vec<u32>) -> Result<(), HwError> {
    let mut window = vec![0u32; op.taps.k];
    for p in 0..op.taps.positions {
        gather(&op.taps, p, input, &mut window)?;
        for r in 0..prep.rows {
            out.push(math::quantize_io(prep.accumulate(r, &window), bits));
        }
    }
    Ok(())
}

/// Evaluates one core-op on its (concatenated) input words.
pub fn eval_core_op(op: &CoreOp, input: &[u32], bits: u32) -> Result<Vec<u32>, HwError> {
    let prep = PreparedOp::new(op).ok_or_else(|| HwError::Spec("weight outside its codebook".into()))?;
    let mut out = Vec::with_capacity(op.taps.positions * op.rows());
    eval_prepared(op, &prep, input, bits, &mut out)?;
    Ok(out)
}

/// Host-side ingress encoding of one value.
pub fn encode_ingress(x: f64, lo: f64, hi: f64, bits: u32) -> u32 {
    let top = math::io_max(bits) as f64;
    math::quantize_io(top * (x - lo) / (hi - lo), bits)
}

/// Per-edge transfer statistics gathered during simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeTrace {
    pub producer: usize,
    pub consumer: usize,
    /// Distinct producer words the consumer reads per inference.
    pub words: f64,
    /// Mean number of those words that were nonzero.
    pub nonzero: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    /// Keep every vertex's output words (`batch × width`, row-major).
    pub keep_values: bool,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    /// One tensor per graph output: decoded values for egress vertices, raw
    /// words otherwise.
    pub outputs: Vec<Tensor>,
    pub traces: Vec<EdgeTrace>,
    pub values: Vec<Option<Vec<u32>>>,
}

/// Encodes raw batches (`[batch, width]`, one per ingress vertex in id order).
pub fn encode_batch(graph: &CompGraph, inputs: &[Tensor]) -> Result<Vec<Vec<u32>>, HwError> {
    let ingress: Vec<_> = graph
        .vertices
        .iter()
        .filter_map(|v| match v.kind {
            OpKind::Ingress { lo, hi, bits, .. } => Some((lo, hi, bits)),
            _ => None,
        })
        .collect();
    if ingress.len() != inputs.len() {
        return Err(HwError::Ingress {
            expected: ingress.len(),
            got: inputs.len(),
        });
    }
    Ok(ingress
        .iter()
        .zip(inputs)
        .map(|(&(lo, hi, bits), t)| t.data().iter().map(|&x| encode_ingress(x, lo, hi, bits)).collect())
        .collect())
}

/// Runs a validated core-op graph over a batch of encoded inputs.
pub fn simulate(
    graph: &CompGraph,
    spec: &HardwareSpec,
    ingress_words: &[Vec<u32>],
    batch: usize,
    opts: &SimOptions,
) -> Result<SimOutput, HwError> {
    let findings = validate(graph, spec);
    if !findings.is_empty() {
        return Err(HwError::Invalid(findings));
    }
    let widths = graph.widths()?;
    let order = graph.topological_order()?;
    let n = graph.len();
    let ingress_ids: Vec<usize> = graph.inputs();
    if ingress_ids.len() != ingress_words.len() {
        return Err(HwError::Ingress {
            expected: ingress_ids.len(),
            got: ingress_words.len(),
        });
    }
    for (&id, w) in ingress_ids.iter().zip(ingress_words) {
        if w.len() != batch * widths[id] {
            return Err(HwError::IngressWidth {
                vertex: id,
                got: w.len(),
                batch,
                width: widths[id],
            });
        }
    }
    let prepared: Vec<Option<PreparedOp>> = graph
        .vertices
        .iter()
        .map(|v| match &v.kind {
            OpKind::CoreOp(op) => PreparedOp::new(op),
            _ => None,
        })
        .collect();

    // Words each consumer reads from each producer, as (producer, consumer, word offsets).
    let mut reads: Vec<(usize, usize, Vec<usize>)> = Vec::new();
    for v in &graph.vertices {
        let mut offset = 0;
        let mut spans = Vec::new();
        for &p in &v.inputs {
            spans.push((p, offset, widths[p]));
            offset += widths[p];
        }
        let mut used: Vec<bool> = vec![false; offset];
        match &v.kind {
            OpKind::CoreOp(op) => {
                for &i in &op.taps.idx {
                    if i != Taps::ZERO {
                        used[i as usize] = true;
                    }
                }
            }
            _ => used.iter_mut().for_each(|u| *u = true),
        }
        for (p, start, w) in spans {
            let words: Vec<usize> = (0..w).filter(|&j| used[start + j]).collect();
            reads.push((p, v.id, words));
        }
    }

    let mut values: Vec<Option<Vec<u32>>> = vec![None; n];
    let mut decoded: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut nonzero = vec![0u64; reads.len()];
    let mut row_words: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut concat: Vec<u32> = Vec::new();
    for s in 0..batch {
        for &id in &order {
            let v = &graph.vertices[id];
            let mut out = Vec::with_capacity(widths[id]);
            match &v.kind {
                OpKind::Ingress { .. } => {
                    let slot = ingress_ids.iter().position(|&i| i == id).expect("ingress");
                    let w = widths[id];
                    out.extend_from_slice(&ingress_words[slot][s * w..(s + 1) * w]);
                }
                OpKind::Const { values } => out.extend_from_slice(values),
                OpKind::CoreOp(op) => {
                    concat.clear();
                    for &p in &v.inputs {
                        concat.extend_from_slice(&row_words[p]);
                    }
                    let prep = prepared[id].as_ref().expect("validated core-op");
                    eval_prepared(op, prep, &concat, spec.io_bits, &mut out)?;
                }
                OpKind::Egress { weight, offset } => {
                    concat.clear();
                    for &p in &v.inputs {
                        concat.extend_from_slice(&row_words[p]);
                    }
                    let k = weight.cols();
                    let dec = decoded[id].get_or_insert_with(Vec::new);
                    for o in 0..weight.rows() {
                        let row = &weight.data()[o * k..(o + 1) * k];
                        let mut acc = 0.0;
                        for (&w, &x) in row.iter().zip(&concat) {
                            acc += w * x as f64;
                        }
                        dec.push(acc + offset.data()[o]);
                    }
                }
                _ => unreachable!("validated core-op graph"),
            }
            row_words[id] = out;
        }
        for (e, (p, _, words)) in reads.iter().enumerate() {
            let src = &row_words[*p];
            if !src.is_empty() {
                nonzero[e] += words.iter().filter(|&&j| src[j] != 0).count() as u64;
            }
        }
        if opts.keep_values {
            for id in 0..n {
                values[id].get_or_insert_with(Vec::new).extend_from_slice(&row_words[id]);
            }
        }
    }

    let mut outputs = Vec::with_capacity(graph.outputs.len());
    for &o in &graph.outputs {
        let w = widths[o];
        let t = match &graph.vertices[o].kind {
            OpKind::Egress { .. } => {
                Tensor::new(vec![batch, w], decoded[o].take().unwrap_or_default()).expect("egress output")
            }
            _ => {
                let data = if opts.keep_values {
                    values[o].clone().unwrap_or_default()
                } else if batch == 0 {
                    Vec::new()
                } else {
                    return Err(HwError::Spec(alloc::format!(
                        "output vertex {o} is not an egress; simulate with keep_values"
                    )));
                };
                Tensor::new(vec![batch, w], data.iter().map(|&x| x as f64).collect()).expect("word output")
            }
        };
        outputs.push(t);
    }
    let traces = reads
        .iter()
        .zip(&nonzero)
        .map(|((p, c, words), &nz)| EdgeTrace {
            producer: *p,
            consumer: *c,
            words: words.len() as f64,
            nonzero: if batch == 0 { 0.0 } else { nz as f64 / batch as f64 },
        })
        .collect();
    Ok(SimOutput {
        outputs,
        traces,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::sync::Arc;

    fn int_book() -> Codebook {
        Codebook::dynamic(4, 0).unwrap()
    }

    fn op(rows: &[&[f64]]) -> CoreOp {
        let w = Tensor::matrix(rows);
        let k = w.cols();
        CoreOp {
            taps: Arc::new(Taps::select(&(0..k as u32).collect::<Vec<_>>())),
            weight: w,
            codebook: int_book(),
        }
    }

    #[test]
    fn eval_examples() {
        let a = op(&[&[1.0, -1.0], &[0.0, 2.0]]);
        assert_eq!(eval_core_op(&a, &[1, 3], 2).unwrap(), [0, 3]);
        let z = op(&[&[0.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(eval_core_op(&z, &[7, 9], 8).unwrap(), [0, 0]);
        let i = op(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(eval_core_op(&i, &[2, 1], 8).unwrap(), [2, 1]);
    }

    #[test]
    fn eval_short_input() {
        let a = op(&[&[1.0, -1.0]]);
        assert!(matches!(eval_core_op(&a, &[1], 2), Err(HwError::InputLength { .. })));
    }

    fn spec() -> HardwareSpec {
        HardwareSpec {
            scale_m: 2,
            scale_n: 2,
            io_bits: 2,
            weight_bits: 4,
            encoding: CodecKind::DynamicFixedPoint,
            mesh: MeshSpec::default(),
        }
    }

    fn one_op_graph(o: CoreOp) -> CompGraph {
        let mut g = CompGraph::new(Stage::CoreOps);
        let x = g
            .add(
                OpKind::Ingress {
                    width: o.taps.k,
                    lo: 0.0,
                    hi: 3.0,
                    bits: 2,
                },
                &[],
            )
            .unwrap();
        let c = g.add(OpKind::CoreOp(o), &[x]).unwrap();
        g.set_outputs(&[c]).unwrap();
        g
    }

    #[test]
    fn validate_reports() {
        let g = one_op_graph(op(&[&[1.0, -1.0], &[0.0, 2.0]]));
        assert!(validate(&g, &spec()).is_empty());
        let mut wide = op(&[&[1.0, 1.0, 1.0]]);
        wide.weight = Tensor::matrix(&[&[1.0, 1.0, 1.0]]);
        let g = one_op_graph(wide);
        let v = validate(&g, &spec());
        assert!(v.iter().any(|f| f.vertex == Some(1) && matches!(f.kind, ViolationKind::Scale { .. })));
        let mut off = op(&[&[1.0, 0.0]]);
        off.codebook = Codebook::sharing(1, vec![0.5]).unwrap();
        off.weight = Tensor::matrix(&[&[0.3, 0.0]]);
        let v = validate(&one_op_graph(off), &HardwareSpec {
            encoding: CodecKind::WeightSharing,
            weight_bits: 1,
            ..spec()
        });
        assert!(v.iter().any(|f| matches!(f.kind, ViolationKind::Codebook { value, .. } if value == 0.3)));
    }

    #[test]
    fn simulate_single_op_matches_eval() {
        let o = op(&[&[1.0, -1.0], &[0.0, 2.0]]);
        let g = one_op_graph(o.clone());
        let words = vec![vec![1, 3, 2, 0, 3, 3]];
        let sim = simulate(&g, &spec(), &words, 3, &SimOptions { keep_values: true }).unwrap();
        for s in 0..3 {
            let expect = eval_core_op(&o, &words[0][s * 2..s * 2 + 2], 2).unwrap();
            let got: Vec<u32> = sim.outputs[0].row(s).iter().map(|&x| x as u32).collect();
            assert_eq!(got, expect);
        }
        let t = sim.traces.iter().find(|t| t.consumer == 1).unwrap();
        assert_eq!(t.words, 2.0);
    }

    #[test]
    fn simulate_empty_batch() {
        let g = one_op_graph(op(&[&[1.0, -1.0], &[0.0, 2.0]]));
        let sim = simulate(&g, &spec(), &[vec![]], 0, &SimOptions::default()).unwrap();
        assert_eq!(sim.outputs[0].shape(), &[0, 2]);
    }

    #[test]
    fn presets() {
        let t = HardwareSpec::tianji_ann();
        assert_eq!((t.io_bits, t.weight_bits, t.scale_m, t.encoding), (8, 8, 256, CodecKind::DynamicFixedPoint));
        let p = HardwareSpec::prime();
        assert_eq!((p.io_bits, p.weight_bits, p.encoding), (6, 8, CodecKind::FractionEncoding));
        assert!(t.check().is_ok());
    }
}
