//! Rewrites a source graph into weighted-sum-plus-ReLU operations only.
//!
//! Three rules run in one topological sweep, highest priority first:
//! chain merging (`dense|conv → bias? → relu?`), max-pool lowering into trees
//! of 2-input max blocks, and a per-element MLP fallback for scalar functions.
//! Remaining lone bias/ReLU/dense vertices become identity weighted sums.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ScalarFn, Taps, Tape};
use crate::exec::{self, ExecError};
use crate::graph::{CompGraph, GraphError, Layout, OpKind, PoolGeom, Stage};
use crate::optim::{step_decay, Sgd};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReformError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("vertex {vertex} ({kind}) needs sample inputs for the MLP fallback")]
    NoSamples { vertex: usize, kind: &'static str },
    #[error("vertex {vertex}: {detail}")]
    Unsupported { vertex: usize, detail: String },
    #[error("MLP fallback: {0}")]
    Approx(String),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ApproxConfig {
    /// Hidden units per scalar input.
    pub hidden_per_input: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Early stop once the held-out max error drops below this.
    pub target: f64,
    /// Per-vertex cap on collected activation samples.
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for ApproxConfig {
    fn default() -> Self {
        Self {
            hidden_per_input: 8,
            steps: 2000,
            batch: 64,
            lr: 0.01,
            target: 1e-3,
            max_samples: 4096,
            seed: 7,
        }
    }
}

/// One-hidden-layer ReLU network `y = Σ_u w2[u]·ReLU(w1[u]·x + b1[u]) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Approx {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    /// Held-out errors (the training set when there are too few samples).
    pub max_err: f64,
    pub mean_err: f64,
    pub met_target: bool,
}

impl Approx {
    pub fn eval(&self, x: f64) -> f64 {
        let mut y = self.b2;
        for u in 0..self.w1.len() {
            y += self.w2[u] * (self.w1[u] * x + self.b1[u]).max(0.0);
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ApproxSummary {
    pub vertex: usize,
    pub hidden: usize,
    pub max_err: f64,
    pub mean_err: f64,
    pub met_target: bool,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReformReport {
    pub warnings: Vec<String>,
    pub approximations: Vec<ApproxSummary>,
}

#[derive(Debug, Clone, Copy)]
struct Rules {
    merge: bool,
    maxpool: bool,
    rest: bool,
}

/// Fuses every maximal `dense|conv → bias-add? → relu?` chain into one
/// dot-like or conv-like vertex. Everything else passes through.
pub fn merge_weighted_sum(graph: &CompGraph) -> Result<CompGraph, ReformError> {
    let rules = Rules {
        merge: true,
        maxpool: false,
        rest: false,
    };
    Ok(rewrite(graph, rules, None, &ApproxConfig::default(), &mut ReformReport::default())?)
}

/// Replaces every max-pool with a tree of 4-ReLU max blocks.
pub fn lower_maxpool(graph: &CompGraph) -> Result<(CompGraph, Vec<String>), ReformError> {
    let rules = Rules {
        merge: false,
        maxpool: true,
        rest: false,
    };
    let mut report = ReformReport::default();
    let g = rewrite(graph, rules, None, &ApproxConfig::default(), &mut report)?;
    Ok((g, report.warnings))
}

/// Full rewrite into a core-op-like graph. `samples` (graph inputs, one row per
/// sample) is only needed when a vertex falls through to the MLP fallback.
pub fn reform(
    graph: &CompGraph,
    samples: Option<&Tensor>,
    cfg: &ApproxConfig,
) -> Result<(CompGraph, ReformReport), ReformError> {
    let rules = Rules {
        merge: true,
        maxpool: true,
        rest: true,
    };
    let mut report = ReformReport::default();
    let g = rewrite(graph, rules, samples, cfg, &mut report)?;
    Ok((g, report))
}

/// True where a vertex's output is provably non-negative.
fn non_negative(graph: &CompGraph) -> Vec<bool> {
    let mut out = vec![false; graph.len()];
    for v in &graph.vertices {
        out[v.id] = match &v.kind {
            OpKind::Relu => true,
            OpKind::DotLike { relu, .. } | OpKind::ConvLike { relu, .. } => *relu,
            OpKind::LocalLike { relu, .. } => *relu,
            OpKind::MaxPool { .. } => v.inputs.iter().all(|&i| out[i]),
            OpKind::Elementwise { f } => matches!(f, ScalarFn::Square | ScalarFn::Sigmoid | ScalarFn::Abs | ScalarFn::Zero),
            _ => false,
        };
    }
    out
}

fn rewrite(
    graph: &CompGraph,
    rules: Rules,
    samples: Option<&Tensor>,
    cfg: &ApproxConfig,
    report: &mut ReformReport,
) -> Result<CompGraph, ReformError> {
    let layouts = graph.layouts()?;
    let consumers = graph.consumers();
    let nonneg = non_negative(graph);
    let fresh = graph.vertices.iter().all(|v| v.origin.is_none());
    let origin_of = |v: usize| if fresh { Some(v) } else { graph.vertices[v].origin };
    let stage = if rules.rest { Stage::CoreLike } else { Stage::Source };
    let mut out = CompGraph::new(stage);
    let mut new_id: Vec<Option<usize>> = vec![None; graph.len()];
    let mut absorbed = vec![false; graph.len()];
    // Activation samples are computed lazily, once, for the fallback rule.
    let mut activations: Option<exec::Forward> = None;

    // The sole consumer of `v` when a chain may continue through it.
    let chain_next = |v: usize| -> Option<usize> {
        if graph.outputs.contains(&v) || consumers[v].len() != 1 {
            return None;
        }
        let c = consumers[v][0];
        (graph.vertices[c].inputs.len() == 1).then_some(c)
    };

    for old in graph.topological_order()? {
        if absorbed[old] {
            continue;
        }
        let vx = &graph.vertices[old];
        let ins: Vec<usize> = vx
            .inputs
            .iter()
            .map(|&i| new_id[i].expect("producers rewritten first"))
            .collect();
        let layout = layouts[old];
        let in_layout = vx.inputs.first().map(|&i| layouts[i]);
        let id = match &vx.kind {
            OpKind::Dense { .. } | OpKind::Conv2d { .. } if rules.merge => {
                let mut end = old;
                let mut bias = None;
                let mut relu = false;
                if let Some(n) = chain_next(end) {
                    if let OpKind::BiasAdd { bias: b } = &graph.vertices[n].kind {
                        if b.len() == layout.channels {
                            bias = Some(b.clone());
                            absorbed[n] = true;
                            end = n;
                        }
                    }
                }
                if let Some(n) = chain_next(end) {
                    if matches!(graph.vertices[n].kind, OpKind::Relu) {
                        relu = true;
                        absorbed[n] = true;
                        end = n;
                    }
                }
                let bias = bias.unwrap_or_else(|| Tensor::zeros(&[layout.channels]));
                let kind = match &vx.kind {
                    OpKind::Dense { weight } => OpKind::DotLike {
                        weight: weight.clone(),
                        bias,
                        relu,
                    },
                    OpKind::Conv2d { geom, weight } => OpKind::ConvLike {
                        geom: *geom,
                        weight: weight.clone(),
                        bias,
                        relu,
                    },
                    _ => unreachable!(),
                };
                let id = out.add_with_origin(kind, &ins, origin_of(end))?;
                new_id[end] = Some(id);
                continue;
            }
            OpKind::MaxPool { geom } if rules.maxpool => {
                if !nonneg[vx.inputs[0]] {
                    let w = format!(
                        "vertex {old}: max-pool input is not provably non-negative; the lowered tree computes max(|a|, |b|)"
                    );
                    log::warn!("{w}");
                    report.warnings.push(w);
                }
                max_tree(&mut out, ins[0], geom, origin_of(old))?
            }
            OpKind::Dense { weight } if rules.rest => out.add_with_origin(
                OpKind::DotLike {
                    weight: weight.clone(),
                    bias: Tensor::zeros(&[weight.rows()]),
                    relu: false,
                },
                &ins,
                origin_of(old),
            )?,
            OpKind::Conv2d { geom, weight } if rules.rest => out.add_with_origin(
                OpKind::ConvLike {
                    geom: *geom,
                    weight: weight.clone(),
                    bias: Tensor::zeros(&[geom.out_c]),
                    relu: false,
                },
                &ins,
                origin_of(old),
            )?,
            OpKind::BiasAdd { bias } if rules.rest => {
                let l = in_layout.expect("one input");
                out.add_with_origin(identity_local(l, Some(bias), false), &ins, origin_of(old))?
            }
            OpKind::Relu if rules.rest => {
                let l = in_layout.expect("one input");
                out.add_with_origin(identity_local(l, None, true), &ins, origin_of(old))?
            }
            OpKind::Elementwise { f } if rules.rest => {
                let Some(x) = samples else {
                    return Err(ReformError::NoSamples {
                        vertex: old,
                        kind: vx.kind.name(),
                    });
                };
                if activations.is_none() {
                    activations = Some(exec::forward(graph, &[x.clone()])?);
                }
                let acts = activations.as_ref().expect("computed above");
                let producer = vx.inputs[0];
                let values = acts.value(producer).ok_or(ExecError::Unbound(producer))?.data();
                let picked = subsample(values, cfg.max_samples, cfg.seed ^ old as u64);
                let f = *f;
                let approx = mlp_approximate(|t| f.apply(t), &picked, 1, cfg)?;
                if !approx.met_target {
                    let w = format!(
                        "vertex {old}: MLP fallback reached max error {:.3e}, target {:.1e}",
                        approx.max_err, cfg.target
                    );
                    log::warn!("{w}");
                    report.warnings.push(w);
                }
                report.approximations.push(ApproxSummary {
                    vertex: old,
                    hidden: approx.w1.len(),
                    max_err: approx.max_err,
                    mean_err: approx.mean_err,
                    met_target: approx.met_target,
                });
                mlp_subgraph(&mut out, ins[0], layout, &approx, origin_of(old))?
            }
            kind => {
                if rules.rest && !matches!(kind, OpKind::Input { .. }) && !kind.allowed_in(Stage::CoreLike) {
                    return Err(ReformError::Unsupported {
                        vertex: old,
                        detail: format!("no rewrite for {}", kind.name()),
                    });
                }
                out.add_with_origin(kind.clone(), &ins, origin_of(old))?
            }
        };
        new_id[old] = Some(id);
    }
    let outputs: Vec<usize> = graph
        .outputs
        .iter()
        .map(|&o| new_id[o].expect("outputs are chain ends"))
        .collect();
    out.set_outputs(&outputs)?;
    Ok(out)
}

/// Per-position identity weights, optional bias and ReLU.
fn identity_local(l: Layout, bias: Option<&Tensor>, relu: bool) -> OpKind {
    // A per-element bias cannot be shared across positions: use one position.
    let per_element = bias.is_some_and(|b| b.len() != l.channels);
    let (positions, k) = if per_element { (1, l.width()) } else { (l.positions, l.channels) };
    let idx = (0..(positions * k) as u32).collect();
    let mut w = Tensor::zeros(&[k, k]);
    for i in 0..k {
        w.data_mut()[i * k + i] = 1.0;
    }
    OpKind::LocalLike {
        taps: Arc::new(Taps::new(positions, k, idx)),
        weight: w,
        bias: bias.cloned().unwrap_or_else(|| Tensor::zeros(&[k])),
        relu,
        channels: l.channels,
    }
}

/// Weights of the 4-hidden-ReLU block: `max(a, b) = ½ Σ ReLU(±a ± b)` for `a, b ≥ 0`.
pub const MAX_BLOCK_HIDDEN: [[f64; 2]; 4] = [[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]];

/// Evaluates one 2-input max block as the lowered graph would.
pub fn max_block(a: f64, b: f64) -> f64 {
    MAX_BLOCK_HIDDEN
        .iter()
        .map(|w| 0.5 * (w[0] * a + w[1] * b).max(0.0))
        .sum()
}

fn max_tree(out: &mut CompGraph, input: usize, geom: &PoolGeom, origin: Option<usize>) -> Result<usize, GraphError> {
    let windows = geom.windows();
    let nw = windows.positions;
    let mut refs: Vec<Vec<u32>> = (0..nw)
        .map(|w| windows.idx[w * windows.k..(w + 1) * windows.k].to_vec())
        .collect();
    let mut src = input;
    if windows.k == 1 {
        let idx: Vec<u32> = refs.iter().map(|r| r[0]).collect();
        return out.add_with_origin(
            OpKind::LocalLike {
                taps: Arc::new(Taps::new(nw, 1, idx)),
                weight: Tensor::full(&[1, 1], 1.0),
                bias: Tensor::zeros(&[1]),
                relu: false,
                channels: geom.c,
            },
            &[src],
            origin,
        );
    }
    while refs[0].len() > 1 {
        let len = refs[0].len();
        let npairs = len.div_ceil(2);
        let mut idx = Vec::with_capacity(nw * npairs * 2);
        for r in &refs {
            for j in 0..npairs {
                idx.push(r[2 * j]);
                idx.push(if 2 * j + 1 < len { r[2 * j + 1] } else { Taps::ZERO });
            }
        }
        let positions = nw * npairs;
        let hidden_w: Vec<f64> = MAX_BLOCK_HIDDEN.iter().flatten().copied().collect();
        let hidden = out.add(
            OpKind::LocalLike {
                taps: Arc::new(Taps::new(positions, 2, idx)),
                weight: Tensor::new(vec![4, 2], hidden_w).expect("block shape"),
                bias: Tensor::zeros(&[4]),
                relu: true,
                channels: 4,
            },
            &[src],
        )?;
        let last = npairs == 1;
        src = out.add_with_origin(
            OpKind::LocalLike {
                taps: Arc::new(Taps::new(positions, 4, (0..(positions * 4) as u32).collect())),
                weight: Tensor::full(&[1, 4], 0.5),
                bias: Tensor::zeros(&[1]),
                relu: false,
                channels: if last { geom.c } else { 1 },
            },
            &[hidden],
            if last { origin } else { None },
        )?;
        refs = (0..nw)
            .map(|w| (0..npairs).map(|j| (w * npairs + j) as u32).collect())
            .collect();
    }
    Ok(src)
}

/// Emits the per-element network of `a` as two local vertices.
fn mlp_subgraph(
    out: &mut CompGraph,
    input: usize,
    layout: Layout,
    a: &Approx,
    origin: Option<usize>,
) -> Result<usize, GraphError> {
    let width = layout.width();
    let h = a.w1.len();
    let hidden = out.add(
        OpKind::LocalLike {
            taps: Arc::new(Taps::new(width, 1, (0..width as u32).collect())),
            weight: Tensor::new(vec![h, 1], a.w1.clone()).expect("hidden shape"),
            bias: Tensor::vector(a.b1.clone()),
            relu: true,
            channels: h,
        },
        &[input],
    )?;
    out.add_with_origin(
        OpKind::LocalLike {
            taps: Arc::new(Taps::new(width, h, (0..(width * h) as u32).collect())),
            weight: Tensor::new(vec![1, h], a.w2.clone()).expect("output shape"),
            bias: Tensor::vector(vec![a.b2]),
            relu: false,
            channels: layout.channels,
        },
        &[hidden],
        origin,
    )
}

/// Deterministic subsample of at most `n` values.
fn subsample(values: &[f64], n: usize, seed: u64) -> Vec<f64> {
    if values.len() <= n {
        return values.to_vec();
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| values[i]).collect()
}

/// Solves `A x = b` (`A` is `n × n`, row-major) by Gaussian elimination with
/// partial pivoting; near-singular pivots yield zero components.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Vec<f64> {
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .expect("non-empty");
        if a[piv * n + col].abs() < 1e-12 {
            continue;
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            b.swap(piv, col);
        }
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[r * n + k] -= f * a[col * n + k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let d = a[col * n + col];
        if d.abs() < 1e-12 {
            continue;
        }
        let s: f64 = (col + 1..n).map(|k| a[col * n + k] * x[k]).sum();
        x[col] = (b[col] - s) / d;
    }
    x
}

fn errors(a: &Approx, xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let mut max = 0.0f64;
    let mut sum = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let e = (a.eval(x) - y).abs();
        max = max.max(e);
        sum += e;
    }
    (max, sum / xs.len().max(1) as f64)
}

/// Fits a 1-hidden-layer ReLU MLP to `f` on `samples`.
///
/// Hidden units start as ±1 ramps with knots spread over the sample range and
/// the output layer is solved by least squares; SGD then refines all weights,
/// keeping the best held-out (last 20 % after shuffling) parameters.
pub fn mlp_approximate(
    f: impl Fn(f64) -> f64,
    samples: &[f64],
    arity: usize,
    cfg: &ApproxConfig,
) -> Result<Approx, ReformError> {
    if samples.is_empty() || samples.iter().any(|x| !x.is_finite()) {
        return Err(ReformError::Approx("samples must be non-empty and finite".into()));
    }
    let h = (cfg.hidden_per_input * arity.max(1)).max(1);
    let mut xs = samples.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    xs.shuffle(&mut rng);
    let n_hold = if xs.len() >= 5 { xs.len() / 5 } else { 0 };
    let (train_x, hold_x) = xs.split_at(xs.len() - n_hold);
    let (train_x, hold_x) = (train_x.to_vec(), if n_hold == 0 { train_x.to_vec() } else { hold_x.to_vec() });
    let train_y: Vec<f64> = train_x.iter().map(|&x| f(x)).collect();
    let hold_y: Vec<f64> = hold_x.iter().map(|&x| f(x)).collect();
    if train_y.iter().chain(&hold_y).any(|y| !y.is_finite()) {
        return Err(ReformError::Approx("target function is not finite on the samples".into()));
    }

    let lo = train_x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = train_x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w1 = Vec::with_capacity(h);
    let mut b1 = Vec::with_capacity(h);
    for u in 0..h {
        let t = if h > 1 { lo + (hi - lo) * u as f64 / (h - 1) as f64 } else { lo };
        let w = if u % 2 == 0 { 1.0 } else { -1.0 };
        w1.push(w);
        b1.push(-w * t);
    }
    // Least squares for [w2; b2] with a tiny ridge.
    let d = h + 1;
    let mut ata = vec![0.0; d * d];
    let mut atb = vec![0.0; d];
    let mut feat = vec![0.0; d];
    for (&x, &y) in train_x.iter().zip(&train_y) {
        for u in 0..h {
            feat[u] = (w1[u] * x + b1[u]).max(0.0);
        }
        feat[h] = 1.0;
        for i in 0..d {
            atb[i] += feat[i] * y;
            for j in 0..d {
                ata[i * d + j] += feat[i] * feat[j];
            }
        }
    }
    let trace: f64 = (0..d).map(|i| ata[i * d + i]).sum();
    for i in 0..d {
        ata[i * d + i] += 1e-12 * trace.max(1.0);
    }
    let sol = solve(ata, atb, d);
    let mut best = Approx {
        w1,
        b1,
        w2: sol[..h].to_vec(),
        b2: sol[h],
        max_err: 0.0,
        mean_err: 0.0,
        met_target: false,
    };
    (best.max_err, best.mean_err) = errors(&best, &hold_x, &hold_y);

    let mut cur = best.clone();
    let mut opt = Sgd::new(cfg.lr, 0.9).map_err(|e| ReformError::Approx(format!("{e}")))?;
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut pos = order.len();
    let batch = cfg.batch.max(1);
    for step in 0..cfg.steps {
        if best.max_err < cfg.target {
            break;
        }
        if pos >= order.len() {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let idx = &order[pos..(pos + batch).min(order.len())];
        pos += batch;
        let bx: Vec<f64> = idx.iter().map(|&i| train_x[i]).collect();
        let by: Vec<f64> = idx.iter().map(|&i| train_y[i]).collect();
        let m = bx.len();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![m, 1], bx).expect("batch"));
        let y = tape.leaf(Tensor::new(vec![m, 1], by).expect("batch"));
        let vw1 = tape.leaf(Tensor::new(vec![h, 1], cur.w1.clone()).expect("w1"));
        let vb1 = tape.leaf(Tensor::vector(cur.b1.clone()));
        let vw2 = tape.leaf(Tensor::new(vec![1, h], cur.w2.clone()).expect("w2"));
        let vb2 = tape.leaf(Tensor::vector(vec![cur.b2]));
        let run = |tape: &mut Tape| -> Result<_, crate::autodiff::AutodiffError> {
            let z = tape.dense(x, vw1)?;
            let z = tape.bias_add(z, vb1)?;
            let z = tape.relu(z);
            let o = tape.dense(z, vw2)?;
            let o = tape.bias_add(o, vb2)?;
            tape.mse(o, y)
        };
        let loss = run(&mut tape).map_err(|e| ReformError::Approx(format!("{e}")))?;
        let grads = tape
            .backward(&[(loss, Tensor::scalar(1.0))])
            .map_err(|e| ReformError::Approx(format!("{e}")))?;
        let g = |v| grads.get(v).map(|t| t.data().to_vec()).unwrap_or_default();
        let (g1, gb1, g2, gb2) = (g(vw1), g(vb1), g(vw2), g(vb2));
        if [&g1, &gb1, &g2, &gb2].iter().any(|v| v.is_empty()) {
            break;
        }
        opt.lr = step_decay(cfg.lr, step, cfg.steps);
        let mut b2 = [cur.b2];
        let ok = opt
            .step(
                &mut [&mut cur.w1, &mut cur.b1, &mut cur.w2, &mut b2],
                &[&g1, &gb1, &g2, &gb2],
            )
            .is_ok();
        cur.b2 = b2[0];
        if !ok {
            break;
        }
        if step % 50 == 49 || step + 1 == cfg.steps {
            let (mx, mean) = errors(&cur, &hold_x, &hold_y);
            if !mx.is_finite() {
                break;
            }
            if mx < best.max_err {
                best = Approx {
                    max_err: mx,
                    mean_err: mean,
                    ..cur.clone()
                };
            }
        }
    }
    best.met_target = best.max_err < cfg.target;
    Ok(best)
}
