//! Trainable view of one part: its core-ops as tape operations, decoding
//! heads at the part's output anchors, and the three tuning phases.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Taps, Tape, Var};
use crate::codec::{em_fit, CodecFamily, CodecParams, Codebook, DYNAMIC_RANGE};
use crate::graph::CoreOp;
use crate::math;
use crate::optim::{step_decay, Sgd};
use crate::tensor::Tensor;

use super::expand::{line_value, lines_for, TOp};
use super::{Phase, PhaseReport, TuneError};

/// Where a cached word matrix came from. Parts only ever read words produced
/// by emitted core-ops or by the ingress encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Source {
    Ingress,
    Emitted,
    /// Unrounded words for the float-exactness check.
    Float,
}

/// Per-vertex word matrices `[rows, width]` of the transformed graph.
#[derive(Debug, Default)]
pub(crate) struct WordStore {
    pub words: BTreeMap<usize, (Tensor, Source)>,
}

impl WordStore {
    pub fn get(&self, gid: usize) -> Result<&Tensor, TuneError> {
        self.words.get(&gid).map(|w| &w.0).ok_or(TuneError::Tainted(gid))
    }
}

#[derive(Debug, Clone)]
pub(crate) enum HeadKind {
    /// Fixed per-lane decoder `unit · Σ words + off`.
    Fixed { unit: f64, off: f64 },
    /// Trainable host-side decoder `weight · words + offset`.
    Egress { weight: Vec<f64>, offset: Vec<f64> },
}

#[derive(Debug, Clone)]
pub(crate) struct Head {
    pub ghat: usize,
    pub srcs: Vec<usize>,
    /// `positions = width`, `k = lanes`, indices into `concat(srcs)`.
    pub taps: Arc<Taps>,
    pub cols: usize,
    pub kind: HeadKind,
    /// Clean values `[rows, width]` in the same row space as the word store.
    pub target: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Mode {
    Float,
    Projected,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Quant {
    Round(u32),
    Clamp(f64),
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Hyper {
    pub iters: usize,
    pub lr: f64,
    pub momentum: f64,
    pub trust: f64,
    pub batch: usize,
    pub seed: u64,
}

pub(crate) struct PartModel {
    pub ops: Vec<TOp>,
    pub heads: Vec<Head>,
    pub bits: u32,
    /// Input ports per core-op; bounds the bias lines.
    pub fan_in: usize,
    pub float_inputs: bool,
}

struct Built {
    tape: Tape,
    loss: Var,
    params: Vec<(Var, Var)>,
    egress: Vec<Option<(Var, Var)>>,
    heads: Vec<Var>,
}

/// Greedy digits of `bias` over lines `c_l`, largest line first.
pub(crate) fn realize_bias(book: &Codebook, bias: f64, lines: usize, bits: u32) -> (Vec<f64>, f64) {
    let mut digits = vec![0.0; lines];
    let mut r = bias;
    for l in (0..lines).rev() {
        let c = line_value(l, bits) as f64;
        let d = book.project_value(r / c);
        digits[l] = d;
        r -= d * c;
    }
    let sum = digits.iter().enumerate().map(|(l, d)| d * line_value(l, bits) as f64).sum();
    (digits, sum)
}

fn norm(v: &[f64]) -> f64 {
    math::sqrt(v.iter().map(|x| x * x).sum())
}

/// Layer-wise trust ratio: steps are a fixed fraction of the weight norm, so
/// ops in very different word scales train at comparable relative rates.
fn trust_factor(theta: &[f64], g: &[f64], trust: f64) -> f64 {
    let (tn, gn) = (norm(theta), norm(g));
    if gn == 0.0 {
        0.0
    } else if tn == 0.0 {
        trust
    } else {
        trust * tn / gn
    }
}

type Checkpoint = (Vec<(Vec<f64>, Vec<f64>)>, Vec<HeadKind>, Vec<Option<Codebook>>);

impl PartModel {
    fn op_weight(&self, op: &TOp, mode: Mode) -> Vec<f64> {
        match (mode, &op.codebook) {
            (Mode::Projected, Some(book)) => op.weight.iter().map(|&w| book.project_value(w)).collect(),
            _ => op.weight.clone(),
        }
    }

    fn op_bias(&self, op: &TOp, mode: Mode) -> Vec<f64> {
        if op.lines == 0 {
            return vec![0.0; op.rows];
        }
        match (mode, &op.codebook) {
            (Mode::Projected, Some(book)) => op
                .bias
                .iter()
                .map(|&b| realize_bias(book, b, op.lines, self.bits).1)
                .collect(),
            _ => op.bias.clone(),
        }
    }

    fn build(&self, store: &WordStore, rows: &[usize], mode: Mode, quant: Quant) -> Result<Built, TuneError> {
        let mut tape = Tape::new();
        let mut vars: BTreeMap<usize, Var> = BTreeMap::new();
        let fetch = |tape: &mut Tape, vars: &mut BTreeMap<usize, Var>, gid: usize| -> Result<Var, TuneError> {
            if let Some(&v) = vars.get(&gid) {
                return Ok(v);
            }
            let (t, src) = store.words.get(&gid).ok_or(TuneError::Tainted(gid))?;
            if (*src == Source::Float) != self.float_inputs {
                return Err(TuneError::Tainted(gid));
            }
            let v = tape.leaf(t.select_rows(rows));
            vars.insert(gid, v);
            Ok(v)
        };
        let mut params = Vec::with_capacity(self.ops.len());
        for op in &self.ops {
            let mut xs = Vec::with_capacity(op.inputs.len());
            for &i in &op.inputs {
                xs.push(fetch(&mut tape, &mut vars, i)?);
            }
            let x = if xs.len() == 1 { xs[0] } else { tape.concat(&xs)? };
            let k = op.taps.k;
            let wv = tape.leaf(Tensor::new(vec![op.rows, k], self.op_weight(op, mode)).expect("op weight"));
            let bv = tape.leaf(Tensor::vector(self.op_bias(op, mode)));
            let z = tape.local(x, wv, op.taps.clone())?;
            let z = tape.bias_add(z, bv)?;
            let y = match quant {
                Quant::Round(bits) => tape.round_clamp(z, bits),
                Quant::Clamp(top) => tape.clamp(z, top),
            };
            vars.insert(op.gid, y);
            params.push((wv, bv));
        }
        let mut loss = None;
        let mut egress = Vec::with_capacity(self.heads.len());
        let mut heads = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let mut xs = Vec::with_capacity(h.srcs.len());
            for &s in &h.srcs {
                xs.push(fetch(&mut tape, &mut vars, s)?);
            }
            let x = if xs.len() == 1 { xs[0] } else { tape.concat(&xs)? };
            let width = h.taps.positions;
            let (y, e) = match &h.kind {
                HeadKind::Fixed { unit, off } => {
                    let dw = tape.leaf(Tensor::full(&[1, h.taps.k], *unit));
                    let z = tape.local(x, dw, h.taps.clone())?;
                    let ov = tape.leaf(Tensor::vector(vec![*off]));
                    (tape.bias_add(z, ov)?, None)
                }
                HeadKind::Egress { weight, offset } => {
                    let ev = tape.leaf(Tensor::new(vec![width, h.cols], weight.clone()).expect("egress weight"));
                    let ov = tape.leaf(Tensor::vector(offset.clone()));
                    let z = tape.dense(x, ev)?;
                    (tape.bias_add(z, ov)?, Some((ev, ov)))
                }
            };
            let t = tape.leaf(h.target.select_rows(rows));
            let l = tape.mse(y, t)?;
            loss = Some(match loss {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
            egress.push(e);
            heads.push(y);
        }
        let loss = loss.ok_or_else(|| TuneError::Config("part has no output anchor".into()))?;
        Ok(Built {
            tape,
            loss,
            params,
            egress,
            heads,
        })
    }

    /// Mean loss over `rows`, evaluated in chunks.
    pub fn eval_loss(&self, store: &WordStore, rows: &[usize], mode: Mode, quant: Quant) -> Result<f64, TuneError> {
        let mut total = 0.0;
        for chunk in rows.chunks(256) {
            let b = self.build(store, chunk, mode, quant)?;
            total += b.tape.value(b.loss).data()[0] * chunk.len() as f64;
        }
        Ok(total / rows.len().max(1) as f64)
    }

    /// Decoded head values over `rows` (one tensor per head).
    pub fn head_values(
        &self,
        store: &WordStore,
        rows: &[usize],
        mode: Mode,
        quant: Quant,
    ) -> Result<Vec<Tensor>, TuneError> {
        let mut out: Vec<Vec<f64>> = vec![Vec::new(); self.heads.len()];
        for chunk in rows.chunks(256) {
            let b = self.build(store, chunk, mode, quant)?;
            for (o, &v) in out.iter_mut().zip(&b.heads) {
                o.extend_from_slice(b.tape.value(v).data());
            }
        }
        Ok(out
            .into_iter()
            .zip(&self.heads)
            .map(|(d, h)| Tensor::new(vec![rows.len(), h.taps.positions], d).expect("head rows"))
            .collect())
    }

    fn checkpoint(&self) -> Checkpoint {
        (
            self.ops.iter().map(|o| (o.weight.clone(), o.bias.clone())).collect(),
            self.heads.iter().map(|h| h.kind.clone()).collect(),
            self.ops.iter().map(|o| o.codebook.clone()).collect(),
        )
    }

    fn restore(&mut self, c: &Checkpoint) {
        for (o, (w, b)) in self.ops.iter_mut().zip(&c.0) {
            o.weight.clone_from(w);
            o.bias.clone_from(b);
        }
        for (h, k) in self.heads.iter_mut().zip(&c.1) {
            h.kind = k.clone();
        }
        for (o, b) in self.ops.iter_mut().zip(&c.2) {
            o.codebook.clone_from(b);
        }
    }

    /// Gradient descent on the part loss. `Mode::Projected` trains float
    /// shadows through rounded forward weights (straight-through).
    #[allow(clippy::too_many_arguments)]
    pub fn train(
        &mut self,
        store: &WordStore,
        train_rows: &[usize],
        eval_rows: &[usize],
        mode: Mode,
        quant: Quant,
        hp: &Hyper,
        phase: Phase,
    ) -> Result<PhaseReport, TuneError> {
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let mut sgd: Vec<Sgd> = Vec::with_capacity(self.ops.len() + self.heads.len());
        for _ in 0..self.ops.len() + self.heads.len() {
            sgd.push(Sgd::new(hp.lr, hp.momentum).map_err(|e| TuneError::Config(alloc::format!("{e}")))?);
        }
        let eval_every = (hp.iters / 20).max(1);
        let mut best = self.eval_loss(store, eval_rows, mode, quant)?;
        let mut best_state = self.checkpoint();
        let mut curve = vec![best];
        let mut diverged = false;
        let mut order: Vec<usize> = train_rows.to_vec();
        let mut cursor = order.len();
        let batch = hp.batch.max(1).min(order.len().max(1));
        let mut batch_rows = Vec::with_capacity(batch);
        for it in 0..hp.iters {
            batch_rows.clear();
            while batch_rows.len() < batch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch_rows.push(order[cursor]);
                cursor += 1;
            }
            let built = self.build(store, &batch_rows, mode, quant)?;
            let loss = built.tape.value(built.loss).data()[0];
            if !loss.is_finite() || loss > 10.0 * curve[0].max(1e-12) {
                diverged = true;
                break;
            }
            let mut grads = built.tape.backward(&[(built.loss, Tensor::scalar(1.0))])?;
            let lr = step_decay(hp.lr, it, hp.iters);
            for (oi, op) in self.ops.iter_mut().enumerate() {
                let (wv, bv) = built.params[oi];
                let mut gw = grads.take(wv).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; op.weight.len()]);
                let mut gb = grads.take(bv).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; op.rows]);
                if let Some(mask) = &op.mask {
                    for (g, &m) in gw.iter_mut().zip(mask) {
                        if !m {
                            *g = 0.0;
                        }
                    }
                }
                if op.lines == 0 {
                    gb.iter_mut().for_each(|g| *g = 0.0);
                }
                let f = trust_factor(&op.weight, &gw, hp.trust);
                gw.iter_mut().for_each(|g| *g *= f);
                gb.iter_mut().for_each(|g| *g *= f);
                sgd[oi].lr = lr;
                sgd[oi]
                    .step(&mut [&mut op.weight, &mut op.bias], &[&gw, &gb])
                    .map_err(|e| TuneError::Config(alloc::format!("op {}: {e}", op.gid)))?;
            }
            let nops = self.ops.len();
            for (hi, h) in self.heads.iter_mut().enumerate() {
                let (Some((ev, ov)), HeadKind::Egress { weight, offset }) = (built.egress[hi], &mut h.kind) else {
                    continue;
                };
                let mut ge = grads.take(ev).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; weight.len()]);
                let mut go = grads.take(ov).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; offset.len()]);
                let f = trust_factor(weight, &ge, hp.trust);
                ge.iter_mut().for_each(|g| *g *= f);
                go.iter_mut().for_each(|g| *g *= f);
                sgd[nops + hi].lr = lr;
                sgd[nops + hi]
                    .step(&mut [weight.as_mut_slice(), offset.as_mut_slice()], &[&ge, &go])
                    .map_err(|e| TuneError::Config(alloc::format!("egress: {e}")))?;
            }
            if (it + 1) % eval_every == 0 || it + 1 == hp.iters {
                let l = self.eval_loss(store, eval_rows, mode, quant)?;
                if l < best {
                    best = l;
                    best_state = self.checkpoint();
                }
                curve.push(best);
            }
        }
        self.restore(&best_state);
        Ok(PhaseReport {
            phase,
            curve,
            diverged,
        })
    }

    /// Fits one codebook per core-op to its free weights.
    pub fn em_init(&mut self, family: CodecFamily) -> Result<(), TuneError> {
        for op in &mut self.ops {
            let free: Vec<f64> = match &op.mask {
                Some(m) => op.weight.iter().zip(m).filter(|(_, &k)| k).map(|(&w, _)| w).collect(),
                None => op.weight.clone(),
            };
            let fit = em_fit(family, &free).map_err(|e| TuneError::Codec { op: op.gid, source: e })?;
            if op.lines > 0 {
                // Line count again, now that the largest digit is known.
                let wmax = fit.codebook.values().iter().fold(0.0f64, |m, v| m.max(libm::fabs(*v)));
                let bmax = op.bias.iter().fold(0.0f64, |m, b| m.max(libm::fabs(*b)));
                let cap = self.fan_in.saturating_sub(op.taps.k).max(op.lines);
                op.lines = lines_for(bmax, wmax, self.bits, cap).0.max(1);
            }
            op.codebook = Some(fit.codebook);
        }
        Ok(())
    }

    /// Gradient of the loss with respect to every codeword of every op's book,
    /// summed over the weights projected onto it.
    fn codeword_grads(&self, store: &WordStore, rows: &[usize], quant: Quant) -> Result<Vec<Vec<f64>>, TuneError> {
        let built = self.build(store, rows, Mode::Projected, quant)?;
        let grads = built.tape.backward(&[(built.loss, Tensor::scalar(1.0))])?;
        Ok(self
            .ops
            .iter()
            .zip(&built.params)
            .map(|(op, &(wv, _))| {
                let book = op.codebook.as_ref().expect("initialized");
                let mut g = vec![0.0; book.len()];
                if let Some(gw) = grads.get(wv) {
                    for (&w, &d) in op.weight.iter().zip(gw.data()) {
                        g[book.project(w).0] += d;
                    }
                }
                g
            })
            .collect())
    }

    /// Coordinate search over each op's codebook parameter, accepting strict
    /// improvements of the held-out loss.
    pub fn tune_value_range(
        &mut self,
        store: &WordStore,
        eval_rows: &[usize],
        quant: Quant,
        rounds: usize,
    ) -> Result<PhaseReport, TuneError> {
        let mut cur = self.eval_loss(store, eval_rows, Mode::Projected, quant)?;
        let mut curve = vec![cur];
        let probe: Vec<usize> = eval_rows.iter().copied().take(256).collect();
        for _ in 0..rounds {
            let mut improved = false;
            let cgrads = self.codeword_grads(store, &probe, quant)?;
            for oi in 0..self.ops.len() {
                let book = self.ops[oi].codebook.clone().expect("initialized");
                let mut best: Option<(f64, Codebook)> = None;
                for cand in candidates(&book, &cgrads[oi]) {
                    self.ops[oi].codebook = Some(cand.clone());
                    let l = self.eval_loss(store, eval_rows, Mode::Projected, quant)?;
                    if l < best.as_ref().map_or(cur, |b| b.0) {
                        best = Some((l, cand));
                    }
                }
                match best {
                    Some((l, b)) => {
                        cur = l;
                        self.ops[oi].codebook = Some(b);
                        improved = true;
                    }
                    None => self.ops[oi].codebook = Some(book),
                }
            }
            curve.push(cur);
            if !improved {
                break;
            }
        }
        Ok(PhaseReport {
            phase: Phase::ValueRange,
            curve,
            diverged: false,
        })
    }

    /// The final hardware op: projected main weights followed by bias digits
    /// on lines read from `const_gid`.
    pub fn emit(&self, op: &TOp, const_gid: usize, gwidth: &[usize]) -> (CoreOp, Vec<usize>) {
        let book = op.codebook.clone().expect("codebook fitted before emission");
        let k = op.taps.k;
        let kt = k + op.lines;
        let mut weight = Vec::with_capacity(op.rows * kt);
        for r in 0..op.rows {
            weight.extend(op.weight[r * k..(r + 1) * k].iter().map(|&w| book.project_value(w)));
            if op.lines > 0 {
                weight.extend(realize_bias(&book, op.bias[r], op.lines, self.bits).0);
            }
        }
        let mut inputs = op.inputs.clone();
        let base: u32 = op.inputs.iter().map(|&g| gwidth[g] as u32).sum();
        let mut idx = Vec::with_capacity(op.taps.positions * kt);
        for p in 0..op.taps.positions {
            idx.extend_from_slice(&op.taps.idx[p * k..(p + 1) * k]);
            idx.extend((0..op.lines as u32).map(|l| base + l));
        }
        if op.lines > 0 {
            inputs.push(const_gid);
        }
        (
            CoreOp {
                taps: Arc::new(Taps::new(op.taps.positions, kt, idx)),
                weight: Tensor::new(vec![op.rows, kt], weight).expect("core-op weight"),
                codebook: book,
            },
            inputs,
        )
    }
}

fn candidates(book: &Codebook, cgrad: &[f64]) -> Vec<Codebook> {
    let family = book.family();
    let mut out = Vec::new();
    match book.params() {
        CodecParams::Exponent(p) => {
            for q in [p - 1, p + 1] {
                if (DYNAMIC_RANGE.0..=DYNAMIC_RANGE.1).contains(&q) {
                    out.extend(Codebook::realize(family, CodecParams::Exponent(q)).ok());
                }
            }
        }
        CodecParams::Fraction(p) => {
            for e in [1.0 / 8.0, -1.0 / 8.0, 1.0 / 32.0, -1.0 / 32.0] {
                out.extend(Codebook::realize(family, CodecParams::Fraction(p * libm::exp2(e))).ok());
            }
        }
        CodecParams::Centroids(c) => {
            for delta in [0.02, 0.005] {
                let moved: Vec<f64> = c
                    .iter()
                    .map(|&v| {
                        let g = book.index_of(v).map_or(0.0, |k| cgrad[k]);
                        v - delta * libm::fabs(v) * if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 }
                    })
                    .collect();
                out.extend(Codebook::realize(family, CodecParams::Centroids(moved)).ok());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_digits() {
        let book = Codebook::dynamic(8, 4).unwrap();
        let (d, s) = realize_bias(&book, 37.3, 8, 8);
        assert_eq!(d.len(), 8);
        assert!((s - 37.3).abs() <= 1.0 / 32.0);
        let (_, s) = realize_bias(&book, -5.0, 3, 8);
        assert_eq!(s, -5.0);
    }

    #[test]
    fn one_weight_free_tuning() {
        // y = w · x against target 2x: a single-op part with a fixed decoder.
        let xs: Vec<f64> = (0..64).map(|i| 1.0 + (i % 8) as f64).collect();
        let mut store = WordStore::default();
        store
            .words
            .insert(0, (Tensor::new(vec![64, 1], xs.clone()).unwrap(), Source::Float));
        let op = TOp {
            gid: 1,
            ghat: 0,
            inputs: vec![0],
            taps: Arc::new(Taps::select(&[0])),
            rows: 1,
            weight: vec![0.5],
            mask: None,
            bias: vec![0.0],
            lines: 0,
            codebook: None,
        };
        let head = Head {
            ghat: 0,
            srcs: vec![1],
            taps: Arc::new(Taps::select(&[0])),
            cols: 1,
            kind: HeadKind::Fixed { unit: 1.0, off: 0.0 },
            target: Tensor::new(vec![64, 1], xs.iter().map(|x| 2.0 * x).collect()).unwrap(),
        };
        let mut m = PartModel {
            ops: vec![op],
            heads: vec![head],
            bits: 16,
            fan_in: 256,
            float_inputs: true,
        };
        let rows: Vec<usize> = (0..64).collect();
        let hp = Hyper {
            iters: 300,
            lr: 0.01,
            momentum: 0.9,
            trust: 1.0,
            batch: 16,
            seed: 1,
        };
        m.train(&store, &rows, &rows, Mode::Float, Quant::Clamp(1e9), &hp, Phase::Free)
            .unwrap();
        assert!((m.ops[0].weight[0] - 2.0).abs() <= 1e-3, "{}", m.ops[0].weight[0]);

        // Rounding onto {0, 0.5} (sharing, one bit): the forward weight is 0.5
        // once the shadow passes the midpoint.
        m.ops[0].weight[0] = 0.3;
        m.ops[0].codebook = Some(Codebook::sharing(1, vec![0.5]).unwrap());
        assert_eq!(m.op_weight(&m.ops[0], Mode::Projected), [0.5]);
        m.ops[0].weight[0] = 0.2;
        assert_eq!(m.op_weight(&m.ops[0], Mode::Projected), [0.0]);
        let hp = Hyper { iters: 40, trust: 1.0, ..hp };
        let r = m
            .train(&store, &rows, &rows, Mode::Projected, Quant::Clamp(1e9), &hp, Phase::Rounding)
            .unwrap();
        assert!(m.ops[0].weight[0] > 0.25);
        assert_eq!(m.op_weight(&m.ops[0], Mode::Projected), [0.5]);
        assert!(r.curve.windows(2).all(|w| w[1] <= w[0]));
    }
}
