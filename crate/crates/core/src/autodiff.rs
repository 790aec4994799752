//! Reverse-mode differentiation over a flat tape.
//!
//! Every primitive records its inputs and whatever it needs for the backward
//! sweep. Values are batched 2-D tensors `[batch, features]` except weights
//! (`[out, in]`), biases (`[n]`) and the scalar losses (`[1]`).

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::{self, gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: alloc::string::String },
    #[error("seed gradient for var {var} has shape {got:?}, value has {expected:?}")]
    SeedShape {
        var: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

fn shape_err(op: &'static str, detail: alloc::string::String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

/// Index of a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub usize);

/// Gather pattern shared by every position of a local (shared-weight) product.
///
/// `idx[p * k + i]` is the input column feeding slot `i` at position `p`, or
/// [`Taps::ZERO`] for padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taps {
    pub positions: usize,
    pub k: usize,
    pub idx: Vec<u32>,
}

impl Taps {
    pub const ZERO: u32 = u32::MAX;

    pub fn new(positions: usize, k: usize, idx: Vec<u32>) -> Self {
        assert_eq!(idx.len(), positions * k, "taps length");
        Self { positions, k, idx }
    }

    /// One position reading columns `cols` in order.
    pub fn select(cols: &[u32]) -> Self {
        Self::new(1, cols.len(), cols.to_vec())
    }

    /// Largest referenced column + 1 (0 if all padding).
    pub fn min_width(&self) -> usize {
        self.idx
            .iter()
            .filter(|&&i| i != Self::ZERO)
            .map(|&i| i as usize + 1)
            .max()
            .unwrap_or(0)
    }
}

/// Pointwise functions used by source graphs that have no dedicated lowering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarFn {
    Square,
    Sigmoid,
    Tanh,
    Abs,
    Identity,
    Zero,
}

impl ScalarFn {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ScalarFn::Square => x * x,
            ScalarFn::Sigmoid => 1.0 / (1.0 + math::exp(-x)),
            ScalarFn::Tanh => math::tanh(x),
            ScalarFn::Abs => libm::fabs(x),
            ScalarFn::Identity => x,
            ScalarFn::Zero => 0.0,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ScalarFn::Square => 2.0 * x,
            ScalarFn::Sigmoid => {
                let s = self.apply(x);
                s * (1.0 - s)
            }
            ScalarFn::Tanh => {
                let t = math::tanh(x);
                1.0 - t * t
            }
            ScalarFn::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            ScalarFn::Identity => 1.0,
            ScalarFn::Zero => 0.0,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense { x: Var, w: Var },
    Local { x: Var, w: Var, taps: Arc<Taps>, patches: Vec<f64> },
    BiasAdd { x: Var, b: Var },
    Relu { x: Var },
    RoundClamp { x: Var, top: f64 },
    MaxPool { x: Var, argmax: Vec<u32> },
    Pointwise { x: Var, f: ScalarFn },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Concat { xs: Vec<Var> },
    Columns { x: Var, cols: Vec<u32> },
    Mse { pred: Var, target: Var },
    SoftmaxCe { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn batch_cols(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `y[b, o] = Σ_i x[b, i] · w[o, i]`.
    pub fn dense(&mut self, x: Var, w: Var) -> Result<Var, AutodiffError> {
        let (b, n_in) = batch_cols(self.value(x));
        let wt = self.value(w);
        if wt.shape().len() != 2 || wt.cols() != n_in {
            return Err(shape_err(
                "dense",
                alloc::format!("input width {n_in}, weight {:?}", wt.shape()),
            ));
        }
        let n_out = wt.rows();
        let mut out = vec![0.0; b * n_out];
        gemm_nt(b, n_in, n_out, self.value(x).data(), wt.data(), &mut out, false);
        let value = Tensor::new(vec![b, n_out], out).expect("dense shape");
        Ok(self.push(value, Op::Dense { x, w }))
    }

    /// Shared-weight product over gathered windows:
    /// `y[b, p * out + o] = Σ_i w[o, i] · x[b, taps[p, i]]`.
    pub fn local(&mut self, x: Var, w: Var, taps: Arc<Taps>) -> Result<Var, AutodiffError> {
        let (b, n_in) = batch_cols(self.value(x));
        let wt = self.value(w);
        if wt.shape().len() != 2 || wt.cols() != taps.k {
            return Err(shape_err(
                "local",
                alloc::format!("taps k={}, weight {:?}", taps.k, wt.shape()),
            ));
        }
        if taps.min_width() > n_in {
            return Err(shape_err(
                "local",
                alloc::format!("taps reach column {}, input width {n_in}", taps.min_width() - 1),
            ));
        }
        let (p, k, n_out) = (taps.positions, taps.k, wt.rows());
        let xd = self.value(x).data();
        let mut patches = vec![0.0; b * p * k];
        for s in 0..b {
            let row = &xd[s * n_in..(s + 1) * n_in];
            let dst = &mut patches[s * p * k..(s + 1) * p * k];
            for (d, &i) in dst.iter_mut().zip(&taps.idx) {
                if i != Taps::ZERO {
                    *d = row[i as usize];
                }
            }
        }
        let mut out = vec![0.0; b * p * n_out];
        gemm_nt(b * p, k, n_out, &patches, wt.data(), &mut out, false);
        let value = Tensor::new(vec![b, p * n_out], out).expect("local shape");
        Ok(self.push(value, Op::Local { x, w, taps, patches }))
    }

    /// Adds `bias[j % len]` to column `j` (per-channel bias for channel-last maps).
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (b, c) = batch_cols(self.value(x));
        let bl = self.value(bias).len();
        if bl == 0 || c % bl != 0 {
            return Err(shape_err(
                "bias_add",
                alloc::format!("width {c} not a multiple of bias length {bl}"),
            ));
        }
        let bd = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for s in 0..b {
            for j in 0..c {
                out[s * c + j] += bd[j % bl];
            }
        }
        let value = Tensor::new(vec![b, c], out).expect("bias shape");
        Ok(self.push(value, Op::BiasAdd { x, b: bias }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu { x })
    }

    /// Hardware activation: round half to even, clamp to `[0, 2^bits - 1]`.
    /// Backward is the straight-through estimator over the unsaturated range.
    pub fn round_clamp(&mut self, x: Var, bits: u32) -> Var {
        let value = self.value(x).map(|v| math::quantize_io(v, bits) as f64);
        let top = math::io_max(bits) as f64;
        self.push(value, Op::RoundClamp { x, top })
    }

    /// Clamp to `[0, top]` without rounding (the unquantized reference of
    /// [`Tape::round_clamp`]); same gradient.
    pub fn clamp(&mut self, x: Var, top: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(0.0, top));
        self.push(value, Op::RoundClamp { x, top })
    }

    /// Max over windows described by `taps` (`k` elements per output position).
    pub fn max_pool(&mut self, x: Var, taps: &Taps) -> Result<Var, AutodiffError> {
        let (b, n_in) = batch_cols(self.value(x));
        if taps.min_width() > n_in {
            return Err(shape_err("max_pool", alloc::format!("taps exceed width {n_in}")));
        }
        let xd = self.value(x).data();
        let p = taps.positions;
        let mut out = vec![0.0; b * p];
        let mut argmax = vec![Taps::ZERO; b * p];
        for s in 0..b {
            let row = &xd[s * n_in..(s + 1) * n_in];
            for q in 0..p {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = Taps::ZERO;
                for &i in &taps.idx[q * taps.k..(q + 1) * taps.k] {
                    let v = if i == Taps::ZERO { 0.0 } else { row[i as usize] };
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                out[s * p + q] = best;
                argmax[s * p + q] = best_i;
            }
        }
        let value = Tensor::new(vec![b, p], out).expect("pool shape");
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    pub fn pointwise(&mut self, x: Var, f: ScalarFn) -> Var {
        let value = self.value(x).map(|v| f.apply(v));
        self.push(value, Op::Pointwise { x, f })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, "add", |x, y| x + y, |va, vb| Op::Add { a: va, b: vb })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, "sub", |x, y| x - y, |va, vb| Op::Sub { a: va, b: vb })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(Var, Var) -> Op,
    ) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                name,
                alloc::format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("binary shape");
        Ok(self.push(value, op(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c })
    }

    /// Column-wise concatenation of batched values.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var, AutodiffError> {
        let b = xs.first().map_or(0, |&v| self.value(v).rows());
        if xs.iter().any(|&v| self.value(v).rows() != b) {
            return Err(shape_err("concat", "batch sizes differ".into()));
        }
        let widths: Vec<usize> = xs.iter().map(|&v| self.value(v).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(b * total);
        for s in 0..b {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[s * w..(s + 1) * w]);
            }
        }
        let value = Tensor::new(vec![b, total], out).expect("concat shape");
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }))
    }

    /// Selects columns (`Taps::ZERO` yields a zero column).
    pub fn columns(&mut self, x: Var, cols: &[u32]) -> Result<Var, AutodiffError> {
        let (b, c) = batch_cols(self.value(x));
        if cols.iter().any(|&i| i != Taps::ZERO && i as usize >= c) {
            return Err(shape_err("columns", alloc::format!("index beyond width {c}")));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * cols.len());
        for s in 0..b {
            for &i in cols {
                out.push(if i == Taps::ZERO { 0.0 } else { xd[s * c + i as usize] });
            }
        }
        let value = Tensor::new(vec![b, cols.len()], out).expect("columns shape");
        Ok(self.push(value, Op::Columns { x, cols: cols.to_vec() }))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, AutodiffError> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(shape_err(
                "mse",
                alloc::format!("{:?} vs {:?}", p.shape(), t.shape()),
            ));
        }
        let n = p.len().max(1) as f64;
        let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { pred, target }))
    }

    /// Mean softmax cross-entropy against integer labels.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
        let (b, c) = batch_cols(self.value(logits));
        if labels.len() != b || labels.iter().any(|&l| l >= c) {
            return Err(shape_err("softmax_ce", alloc::format!("{} labels for batch {b}", labels.len())));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for s in 0..b {
            let row = &ld[s * c..(s + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = math::exp(row[j] - mx);
                probs[s * c + j] = e;
                z += e;
            }
            for j in 0..c {
                probs[s * c + j] /= z;
            }
            loss -= math::ln(probs[s * c + labels[s]].max(1e-300));
        }
        let value = Tensor::scalar(loss / b.max(1) as f64);
        Ok(self.push(value, Op::SoftmaxCe { logits, probs, labels: labels.to_vec() }))
    }

    /// Reverse sweep from `seeds` (value, upstream gradient) in exact reverse
    /// order of recording; gradients accumulate additively at fan-out.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients, AutodiffError> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            let expected = self.value(*v).shape();
            if g.shape() != expected {
                return Err(AutodiffError::SeedShape {
                    var: v.0,
                    expected: expected.to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            accumulate(&mut grads, *v, g.data());
        }
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let gd = g.data();
            match &node.op {
                Op::Leaf => {}
                Op::Dense { x, w } => {
                    let (b, n_in) = batch_cols(self.value(*x));
                    let n_out = self.value(*w).rows();
                    let mut dw = vec![0.0; n_out * n_in];
                    gemm_tn(n_out, b, n_in, gd, self.value(*x).data(), &mut dw, false);
                    accumulate(&mut grads, *w, &dw);
                    let mut dx = vec![0.0; b * n_in];
                    gemm_nn(b, n_out, n_in, gd, self.value(*w).data(), &mut dx, false);
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Local { x, w, taps, patches } => {
                    let (b, n_in) = batch_cols(self.value(*x));
                    let (p, k) = (taps.positions, taps.k);
                    let n_out = self.value(*w).rows();
                    let mut dw = vec![0.0; n_out * k];
                    gemm_tn(n_out, b * p, k, gd, patches, &mut dw, false);
                    accumulate(&mut grads, *w, &dw);
                    let mut dp = vec![0.0; b * p * k];
                    gemm_nn(b * p, n_out, k, gd, self.value(*w).data(), &mut dp, false);
                    let mut dx = vec![0.0; b * n_in];
                    for s in 0..b {
                        let src = &dp[s * p * k..(s + 1) * p * k];
                        let dst = &mut dx[s * n_in..(s + 1) * n_in];
                        for (&i, &d) in taps.idx.iter().zip(src) {
                            if i != Taps::ZERO {
                                dst[i as usize] += d;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::BiasAdd { x, b } => {
                    accumulate(&mut grads, *x, gd);
                    let bl = self.value(*b).len();
                    let mut db = vec![0.0; bl];
                    for (j, &v) in gd.iter().enumerate() {
                        db[j % bl] += v;
                    }
                    accumulate(&mut grads, *b, &db);
                }
                Op::Relu { x } => {
                    let xd = self.value(*x).data();
                    let dx: Vec<f64> = gd
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::RoundClamp { x, top } => {
                    let top = *top;
                    let xd = self.value(*x).data();
                    let dx: Vec<f64> = gd
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| if (0.0..=top).contains(&v) { g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::MaxPool { x, argmax } => {
                    let (b, n_in) = batch_cols(self.value(*x));
                    let p = node.value.cols();
                    let mut dx = vec![0.0; b * n_in];
                    for s in 0..b {
                        for q in 0..p {
                            let i = argmax[s * p + q];
                            if i != Taps::ZERO {
                                dx[s * n_in + i as usize] += gd[s * p + q];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Pointwise { x, f } => {
                    let xd = self.value(*x).data();
                    let dx: Vec<f64> = gd.iter().zip(xd).map(|(&g, &v)| g * f.derivative(v)).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, gd);
                    accumulate(&mut grads, *b, gd);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, *a, gd);
                    let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, &neg);
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = gd.iter().map(|v| v * c).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Concat { xs } => {
                    let b = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &v in xs {
                        let w = self.value(v).cols();
                        let mut dx = Vec::with_capacity(b * w);
                        for s in 0..b {
                            dx.extend_from_slice(&gd[s * total + offset..s * total + offset + w]);
                        }
                        accumulate(&mut grads, v, &dx);
                        offset += w;
                    }
                }
                Op::Columns { x, cols } => {
                    let (b, c) = batch_cols(self.value(*x));
                    let n = cols.len();
                    let mut dx = vec![0.0; b * c];
                    for s in 0..b {
                        for (j, &i) in cols.iter().enumerate() {
                            if i != Taps::ZERO {
                                dx[s * c + i as usize] += gd[s * n + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Mse { pred, target } => {
                    let (p, t) = (self.value(*pred), self.value(*target));
                    let scale = 2.0 * gd[0] / p.len().max(1) as f64;
                    let dp: Vec<f64> = p.data().iter().zip(t.data()).map(|(a, b)| scale * (a - b)).collect();
                    let dt: Vec<f64> = dp.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *pred, &dp);
                    accumulate(&mut grads, *target, &dt);
                }
                Op::SoftmaxCe { logits, probs, labels } => {
                    let (b, c) = batch_cols(self.value(*logits));
                    let scale = gd[0] / b.max(1) as f64;
                    let mut dl = probs.clone();
                    for s in 0..b {
                        dl[s * c + labels[s]] -= 1.0;
                    }
                    dl.iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut grads, *logits, &dl);
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(t) => t.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(Tensor::vector(g.to_vec())),
    }
}

impl Gradients {
    /// Gradient reshaped like the value it belongs to.
    pub fn shaped(&self, tape: &Tape, v: Var) -> Option<Tensor> {
        self.get(v)
            .map(|g| Tensor::new(tape.value(v).shape().to_vec(), g.data().to_vec()).expect("grad shape"))
    }
}
