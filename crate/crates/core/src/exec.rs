//! Evaluates graphs of any stage on an autodiff tape.
//!
//! Source and core-op-like vertices are differentiable. Core-ops run the
//! canonical exact multiply-accumulate (integer level sums through GEMM), which
//! reproduces [`crate::hardware::simulate`] bit for bit.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{AutodiffError, Taps, Tape, Var};
use crate::graph::{CompGraph, CoreOp, GraphError, OpKind};
use crate::hardware::{encode_ingress, PreparedOp};
use crate::math::{self, gemm_nt};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExecError {
    #[error("vertex {vertex} ({op}): {source}")]
    Vertex {
        vertex: usize,
        op: &'static str,
        source: AutodiffError,
    },
    #[error("vertex {0}: input not bound")]
    Unbound(usize),
    #[error("expected {expected} input tensors, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("vertex {vertex}: {detail}")]
    Bad { vertex: usize, detail: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// A trainable tensor on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Param {
    pub vertex: usize,
    pub name: &'static str,
    pub var: Var,
}

#[derive(Debug)]
pub struct Forward {
    pub tape: Tape,
    /// Output var of each vertex that was evaluated.
    pub vars: Vec<Option<Var>>,
    pub params: Vec<Param>,
    pub batch: usize,
}

impl Forward {
    pub fn value(&self, vertex: usize) -> Option<&Tensor> {
        self.vars[vertex].map(|v| self.tape.value(v))
    }
}

/// Runs the whole graph with `inputs` bound to its input vertices in id order.
pub fn forward(graph: &CompGraph, inputs: &[Tensor]) -> Result<Forward, ExecError> {
    let ids = graph.inputs();
    if ids.len() != inputs.len() {
        return Err(ExecError::InputCount {
            expected: ids.len(),
            got: inputs.len(),
        });
    }
    let bound: Vec<(usize, Tensor)> = ids.into_iter().zip(inputs.iter().cloned()).collect();
    let order = graph.topological_order()?;
    forward_subset(graph, &order, &bound)
}

fn as_batch(t: Tensor) -> Tensor {
    if t.shape().len() == 2 {
        t
    } else {
        let (r, c) = (t.rows(), t.cols());
        t.reshape(vec![r, c]).expect("same length")
    }
}

/// Evaluates `vertices` (in a valid order); producers outside the list must
/// appear in `bound` as `[batch, width]` tensors.
pub fn forward_subset(
    graph: &CompGraph,
    vertices: &[usize],
    bound: &[(usize, Tensor)],
) -> Result<Forward, ExecError> {
    let mut tape = Tape::new();
    let mut vars: Vec<Option<Var>> = vec![None; graph.len()];
    let mut params = Vec::new();
    let batch = bound.first().map_or(0, |(_, t)| t.rows());
    let mut raw: Vec<Option<Var>> = vec![None; graph.len()];
    for (id, t) in bound {
        let v = tape.leaf(as_batch(t.clone()));
        if matches!(graph.vertices[*id].kind, OpKind::Ingress { .. }) && vertices.contains(id) {
            raw[*id] = Some(v);
        } else {
            vars[*id] = Some(v);
        }
    }
    for &id in vertices {
        if vars[id].is_some() {
            continue;
        }
        let vx = &graph.vertices[id];
        let wrap = |source: AutodiffError| ExecError::Vertex {
            vertex: id,
            op: vx.kind.name(),
            source,
        };
        let input = |tape: &mut Tape| -> Result<Var, ExecError> {
            let xs: Vec<Var> = vx
                .inputs
                .iter()
                .map(|&p| vars[p].ok_or(ExecError::Unbound(p)))
                .collect::<Result<_, _>>()?;
            match xs.len() {
                0 => Err(ExecError::Bad {
                    vertex: id,
                    detail: "no inputs".into(),
                }),
                1 => Ok(xs[0]),
                _ => tape.concat(&xs).map_err(wrap),
            }
        };
        let mut param = |tape: &mut Tape, name: &'static str, t: &Tensor| {
            let var = tape.leaf(t.clone());
            params.push(Param { vertex: id, name, var });
            var
        };
        let out = match &vx.kind {
            OpKind::Input { .. } => return Err(ExecError::Unbound(id)),
            OpKind::Dense { weight } => {
                let x = input(&mut tape)?;
                let w = param(&mut tape, "weight", weight);
                tape.dense(x, w).map_err(wrap)?
            }
            OpKind::Conv2d { geom, weight } => {
                let x = input(&mut tape)?;
                let w = param(&mut tape, "weight", weight);
                tape.local(x, w, Arc::new(geom.taps())).map_err(wrap)?
            }
            OpKind::BiasAdd { bias } => {
                let x = input(&mut tape)?;
                let b = param(&mut tape, "bias", bias);
                tape.bias_add(x, b).map_err(wrap)?
            }
            OpKind::Relu => {
                let x = input(&mut tape)?;
                tape.relu(x)
            }
            OpKind::MaxPool { geom } => {
                let x = input(&mut tape)?;
                tape.max_pool(x, &geom.windows()).map_err(wrap)?
            }
            OpKind::Elementwise { f } => {
                let x = input(&mut tape)?;
                tape.pointwise(x, *f)
            }
            OpKind::DotLike { .. } | OpKind::ConvLike { .. } | OpKind::LocalLike { .. } => {
                let lv = vx.kind.as_local().expect("weighted sum");
                let x = input(&mut tape)?;
                let w = param(&mut tape, "weight", lv.weight);
                let b = param(&mut tape, "bias", lv.bias);
                let z = if matches!(vx.kind, OpKind::DotLike { .. }) {
                    tape.dense(x, w).map_err(wrap)?
                } else {
                    tape.local(x, w, lv.taps.clone()).map_err(wrap)?
                };
                let z = tape.bias_add(z, b).map_err(wrap)?;
                if lv.relu {
                    tape.relu(z)
                } else {
                    z
                }
            }
            OpKind::Ingress { lo, hi, bits, .. } => {
                let r = raw[id].ok_or(ExecError::Unbound(id))?;
                let words = tape.value(r).map(|x| encode_ingress(x, *lo, *hi, *bits) as f64);
                tape.leaf(words)
            }
            OpKind::Const { values } => {
                let row: Vec<f64> = values.iter().map(|&v| v as f64).collect();
                let mut data = Vec::with_capacity(batch * row.len());
                for _ in 0..batch {
                    data.extend_from_slice(&row);
                }
                tape.leaf(Tensor::new(vec![batch, row.len()], data).expect("const batch"))
            }
            OpKind::CoreOp(op) => {
                let x = input(&mut tape)?;
                let xv = tape.value(x);
                let bits = core_bits(graph);
                let y = core_op_batch(op, xv, bits).map_err(|detail| ExecError::Bad { vertex: id, detail })?;
                tape.leaf(y)
            }
            OpKind::Egress { weight, offset } => {
                let x = input(&mut tape)?;
                let w = param(&mut tape, "weight", weight);
                let b = param(&mut tape, "offset", offset);
                let z = tape.dense(x, w).map_err(wrap)?;
                tape.bias_add(z, b).map_err(wrap)?
            }
        };
        vars[id] = Some(out);
    }
    Ok(Forward {
        tape,
        vars,
        params,
        batch,
    })
}

/// I/O width of a core-op graph (taken from its ingress vertices).
pub fn core_bits(graph: &CompGraph) -> u32 {
    graph
        .vertices
        .iter()
        .find_map(|v| match v.kind {
            OpKind::Ingress { bits, .. } => Some(bits),
            _ => None,
        })
        .unwrap_or(8)
}

/// Canonical exact evaluation of a core-op over a `[batch, in]` batch of words.
pub fn core_op_batch(op: &CoreOp, x: &Tensor, bits: u32) -> Result<Tensor, String> {
    let prep = PreparedOp::new(op).ok_or_else(|| String::from("weight outside its codebook"))?;
    let (b, n_in) = (x.rows(), x.cols());
    let (p, k, rows) = (op.taps.positions, op.taps.k, prep.rows);
    if op.taps.min_width() > n_in {
        return Err(alloc::format!("taps exceed input width {n_in}"));
    }
    let mut patches = vec![0.0; b * p * k];
    for s in 0..b {
        let row = &x.data()[s * n_in..(s + 1) * n_in];
        for (d, &i) in patches[s * p * k..(s + 1) * p * k].iter_mut().zip(&op.taps.idx) {
            if i != Taps::ZERO {
                *d = row[i as usize];
            }
        }
    }
    let mut acc = vec![0.0; b * p * rows];
    if prep.is_uniform() {
        let q: Vec<f64> = prep.code.iter().map(|&c| c as f64).collect();
        gemm_nt(b * p, k, rows, &patches, &q, &mut acc, false);
        acc.iter_mut().for_each(|s| *s = prep.codebook.scale_level_sum(*s));
    } else {
        let mut ind = vec![0.0; rows * k];
        let mut count = vec![0.0; b * p * rows];
        for (c, &v) in prep.codebook.values().iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for (d, &code) in ind.iter_mut().zip(&prep.code) {
                *d = if code as usize == c { 1.0 } else { 0.0 };
            }
            gemm_nt(b * p, k, rows, &patches, &ind, &mut count, false);
            for (a, &n) in acc.iter_mut().zip(&count) {
                *a += v * n;
            }
        }
    }
    let y: Vec<f64> = acc.iter().map(|&a| math::quantize_io(a, bits) as f64).collect();
    Ok(Tensor::new(vec![b, p * rows], y).expect("core-op output"))
}

/// Runs the graph in chunks of `chunk` rows and returns its outputs.
pub fn predict(graph: &CompGraph, inputs: &[Tensor], chunk: usize) -> Result<Vec<Tensor>, ExecError> {
    let n = inputs.first().map_or(0, |t| t.rows());
    let chunk = chunk.max(1);
    let mut parts: Vec<Vec<f64>> = vec![Vec::new(); graph.outputs.len()];
    let mut widths = vec![0; graph.outputs.len()];
    let mut start = 0;
    let all = graph.widths()?;
    for (i, &o) in graph.outputs.iter().enumerate() {
        widths[i] = all[o];
    }
    while start < n {
        let end = (start + chunk).min(n);
        let slice: Vec<Tensor> = inputs.iter().map(|t| t.slice_rows(start, end)).collect();
        let f = forward(graph, &slice)?;
        for (i, &o) in graph.outputs.iter().enumerate() {
            parts[i].extend_from_slice(f.value(o).expect("output evaluated").data());
        }
        start = end;
    }
    Ok(parts
        .into_iter()
        .zip(widths)
        .map(|(d, w)| Tensor::new(vec![n, w], d).expect("output rows"))
        .collect())
}

/// Index of the largest entry of each row (first on ties).
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}
