//! Full expansion of one weighted-sum vertex into scale-bounded core-ops.
//!
//! The producer decoders, the vertex weights and the output encoder are fused
//! into one matrix over input words. If that matrix (plus bias lines) fits the
//! fan-in, it is cut into row groups only. Otherwise input slots are split into
//! blocks whose partial sums leave on paired positive/negative lanes and are
//! summed back by a single reduce level.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Taps;
use crate::codec::Codebook;
use crate::exec::Forward;
use crate::graph::CompGraph;
use crate::hardware::HardwareSpec;
use crate::math::{self, gemm_nt, percentile};

use super::reencode::Autoencoder;
use super::TuneError;

/// How a vertex's values are carried by core-op words: `lanes` words per
/// value, `x ≈ unit · Σ_i word_i + off`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Enc {
    pub lanes: usize,
    pub unit: f64,
    pub off: f64,
    pub top: f64,
    /// `(G′ vertex, word)` of lane `i` of value `j`, at `j · lanes + i`.
    pub words: Vec<(usize, u32)>,
}

impl Enc {
    /// Unrounded word of lane `i` for value `x`.
    pub fn lane_word(&self, x: f64, i: usize) -> f64 {
        ((x - self.off) / self.unit - self.top * i as f64).clamp(0.0, self.top)
    }

    pub fn from_autoencoder(a: &Autoencoder, words: Vec<(usize, u32)>) -> Self {
        Self {
            lanes: a.m,
            unit: a.w_dec(),
            off: a.lo,
            top: math::io_max(a.bits) as f64,
            words,
        }
    }
}

/// A core-op under construction: float weights over its main taps, a bias
/// realized later through constant lines, and (after value-range init) a
/// codebook.
#[derive(Debug, Clone)]
pub(crate) struct TOp {
    pub gid: usize,
    pub ghat: usize,
    /// Producer G′ vertices, concatenated in this order.
    pub inputs: Vec<usize>,
    pub taps: Arc<Taps>,
    pub rows: usize,
    /// `[rows, taps.k]`.
    pub weight: Vec<f64>,
    /// `false` marks a structural zero that never trains.
    pub mask: Option<Vec<bool>>,
    pub bias: Vec<f64>,
    pub lines: usize,
    pub codebook: Option<Codebook>,
}

/// Value of bias line `l`.
pub(crate) fn line_value(l: usize, bits: u32) -> u32 {
    1u32 << (l.min(bits as usize - 1) as u32)
}

/// Fewest lines whose capacity covers `2 · bmax` with digits up to `wmax`,
/// at most `cap`. The flag is set when `cap` cut the count short.
pub(crate) fn lines_for(bmax: f64, wmax: f64, bits: u32, cap: usize) -> (usize, bool) {
    if bmax <= 0.0 {
        return (0, false);
    }
    let w = if wmax > 0.0 { wmax } else { bmax };
    let mut l = 0;
    let mut sum = 0.0;
    while w * sum < 2.0 * bmax {
        if l == cap {
            return (l, true);
        }
        sum += line_value(l, bits) as f64;
        l += 1;
    }
    (l, false)
}

pub(crate) struct Ctx<'a> {
    pub spec: &'a HardwareSpec,
    /// Lanes per partial sum in the blocked expansion.
    pub partial_lanes: usize,
    pub pct: f64,
    /// Clean Ĝ values on calibration rows (partial-sum scales).
    pub probe: &'a Forward,
    /// Output width of every G′ vertex allocated so far (indexed by id).
    pub gwidth: &'a mut Vec<usize>,
    pub warnings: &'a mut Vec<String>,
}

/// Concatenates the distinct sources of `srcs` in ascending id order and maps
/// every source to its concat index.
fn gather(srcs: &[Option<(usize, u32)>], gwidth: &[usize]) -> (Vec<usize>, Vec<u32>) {
    let mut ids: Vec<usize> = srcs.iter().flatten().map(|s| s.0).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut base = BTreeMap::new();
    let mut acc = 0u32;
    for &g in &ids {
        base.insert(g, acc);
        acc += gwidth[g] as u32;
    }
    let idx = srcs
        .iter()
        .map(|s| match s {
            Some((g, w)) => base[g] + w,
            None => Taps::ZERO,
        })
        .collect();
    (ids, idx)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, &x| a.max(libm::fabs(x)))
}

fn unsupported(vertex: usize, detail: String) -> TuneError {
    TuneError::Unsupported { vertex, detail }
}

/// Expands Ĝ vertex `v` whose producers are encoded by `encs`, with output
/// encoder `code`. New G′ ids start at `*next`.
pub(crate) fn expand_vertex(
    g: &CompGraph,
    v: usize,
    widths: &[usize],
    encs: &[Option<Enc>],
    code: &Autoencoder,
    ctx: &mut Ctx<'_>,
    next: &mut usize,
) -> Result<(Vec<TOp>, Enc), TuneError> {
    let vx = &g.vertices[v];
    let lv = vx
        .kind
        .as_local()
        .ok_or_else(|| unsupported(v, alloc::format!("{} is not a weighted sum", vx.kind.name())))?;
    let (pn, k) = (lv.taps.positions, lv.taps.k);
    let r_out = lv.weight.rows();
    let w = lv.weight.data();
    let bits = ctx.spec.io_bits;
    let top = math::io_max(bits) as f64;
    let (m_scale, n_scale) = (ctx.spec.scale_m, ctx.spec.scale_n);

    // Producer of every concatenated input column.
    let mut spans = Vec::with_capacity(vx.inputs.len());
    let mut acc = 0;
    for &p in &vx.inputs {
        let e = encs[p]
            .as_ref()
            .ok_or_else(|| unsupported(v, alloc::format!("producer {p} not encoded yet")))?;
        spans.push((p, acc, e));
        acc += widths[p];
    }
    let locate = |col: u32| -> (usize, usize) {
        let c = col as usize;
        let s = spans.iter().rposition(|s| s.1 <= c).expect("column inside the concat");
        (s, c - spans[s].1)
    };

    let mut slot_prod: Vec<Option<usize>> = vec![None; k];
    let mut slot_pad = vec![false; k];
    for p in 0..pn {
        for t in 0..k {
            let c = lv.taps.idx[p * k + t];
            if c == Taps::ZERO {
                slot_pad[t] = true;
                continue;
            }
            let (s, _) = locate(c);
            match slot_prod[t] {
                None => slot_prod[t] = Some(s),
                Some(q) if q != s => {
                    return Err(unsupported(v, alloc::format!("slot {t} reads more than one producer")));
                }
                _ => {}
            }
        }
    }

    // Expanded slots: every lane of every live slot.
    let mut exp: Vec<(usize, usize)> = Vec::new();
    for t in 0..k {
        if let Some(s) = slot_prod[t] {
            for i in 0..spans[s].2.lanes {
                exp.push((t, i));
            }
        }
    }
    let kk = exp.len();
    if kk == 0 {
        return Err(unsupported(v, "no live input slot".into()));
    }

    // Fused weights `a` over expanded slots and fused bias `a0`, in encoder units.
    let we = code.w_enc();
    let mut a = vec![0.0; r_out * kk];
    let mut a0 = vec![0.0; r_out];
    for u in 0..r_out {
        let mut cst = 0.0;
        for t in 0..k {
            if let Some(s) = slot_prod[t] {
                let off = spans[s].2.off;
                let wt = w[u * k + t];
                if off != 0.0 && wt != 0.0 {
                    if slot_pad[t] {
                        return Err(unsupported(
                            v,
                            alloc::format!("padded slot {t} reads producer {} with a nonzero offset", spans[s].0),
                        ));
                    }
                    cst += wt * off;
                }
            }
        }
        a0[u] = we * (lv.bias.data()[u] + cst - code.lo);
        for (e, &(t, _)) in exp.iter().enumerate() {
            let s = slot_prod[t].expect("live slot");
            a[u * kk + e] = we * w[u * k + t] * spans[s].2.unit;
        }
    }
    let src = |p: usize, e: usize| -> Option<(usize, u32)> {
        let (t, i) = exp[e];
        let c = lv.taps.idx[p * k + t];
        if c == Taps::ZERO {
            return None;
        }
        let (s, j) = locate(c);
        let enc = spans[s].2;
        Some(enc.words[j * enc.lanes + i])
    };

    let lanes = code.m;
    let lane_bias = |u: usize, i: usize| a0[u] - top * i as f64;
    let bmax = (0..r_out)
        .flat_map(|u| (0..lanes).map(move |i| (u, i)))
        .fold(0.0f64, |m, (u, i)| m.max(libm::fabs(lane_bias(u, i))));
    let mut words = vec![(0usize, 0u32); pn * r_out * lanes];
    let mut ops = Vec::new();
    let (lines_a, _) = lines_for(bmax, max_abs(&a), bits, n_scale.saturating_sub(kk));
    let need_bias = bmax > 0.0;

    if kk + lines_a <= n_scale && (!need_bias || lines_a > 0) {
        let nu = m_scale / lanes;
        if nu == 0 {
            return Err(unsupported(v, alloc::format!("{lanes} lanes exceed {m_scale} output ports")));
        }
        for u0 in (0..r_out).step_by(nu) {
            let u1 = (u0 + nu).min(r_out);
            let rows = (u1 - u0) * lanes;
            let srcs: Vec<_> = (0..pn).flat_map(|p| (0..kk).map(move |e| (p, e))).map(|(p, e)| src(p, e)).collect();
            let (inputs, idx) = gather(&srcs, ctx.gwidth);
            let mut weight = Vec::with_capacity(rows * kk);
            let mut bias = Vec::with_capacity(rows);
            for u in u0..u1 {
                for i in 0..lanes {
                    weight.extend_from_slice(&a[u * kk..(u + 1) * kk]);
                    bias.push(lane_bias(u, i));
                }
            }
            let gid = *next;
            *next += 1;
            ctx.gwidth.push(pn * rows);
            for p in 0..pn {
                for u in u0..u1 {
                    for i in 0..lanes {
                        words[(p * r_out + u) * lanes + i] = (gid, (p * rows + (u - u0) * lanes + i) as u32);
                    }
                }
            }
            ops.push(TOp {
                gid,
                ghat: v,
                inputs,
                taps: Arc::new(Taps::new(pn, kk, idx)),
                rows,
                weight,
                mask: None,
                bias,
                lines: lines_a,
                codebook: None,
            });
        }
    } else {
        blocked(v, &exp, &a, &a0, code, pn, r_out, &src, ctx, next, &mut ops, &mut words, &spans, &lv.taps)?;
    }
    Ok((ops, Enc::from_autoencoder(code, words)))
}

#[allow(clippy::too_many_arguments)]
fn blocked(
    v: usize,
    exp: &[(usize, usize)],
    a: &[f64],
    a0: &[f64],
    code: &Autoencoder,
    pn: usize,
    r_out: usize,
    src: &dyn Fn(usize, usize) -> Option<(usize, u32)>,
    ctx: &mut Ctx<'_>,
    next: &mut usize,
    ops: &mut Vec<TOp>,
    words: &mut [(usize, u32)],
    spans: &[(usize, usize, &Enc)],
    taps: &Taps,
) -> Result<(), TuneError> {
    let kk = exp.len();
    let bits = ctx.spec.io_bits;
    let top = math::io_max(bits) as f64;
    let (m_scale, n_scale) = (ctx.spec.scale_m, ctx.spec.scale_n);
    let lp = ctx.partial_lanes.max(1);
    let lanes = code.m;
    let rc = m_scale / (2 * lp);
    if rc == 0 {
        return Err(unsupported(v, alloc::format!("{m_scale} output ports cannot hold paired partial lanes")));
    }
    // Line slots reserved per compute block when partial lanes need offsets.
    let reserve = if lp > 1 { (2 * bits as usize).min(n_scale / 4) } else { 0 };
    let wb = n_scale.saturating_sub(reserve);
    if wb == 0 {
        return Err(unsupported(v, "fan-in too small for a compute block".into()));
    }
    let nb = kk.div_ceil(wb);
    let mut blocks = Vec::with_capacity(nb);
    let mut start = 0;
    for b in 0..nb {
        let len = kk / nb + usize::from(b < kk % nb);
        blocks.push(start..start + len);
        start += len;
    }

    // Partial-sum scales from clean producer values.
    let probe_rows = ctx.probe.batch;
    let nrows = probe_rows.min((65_536 / pn).max(1)).max(1);
    let stride = (probe_rows / nrows).max(1);
    let sample: Vec<usize> = (0..probe_rows).step_by(stride).take(nrows).collect();
    let mut scale = vec![vec![1.0; r_out]; nb];
    if !sample.is_empty() {
        for (b, range) in blocks.iter().enumerate() {
            let bw = range.len();
            let mut patches = vec![0.0; sample.len() * pn * bw];
            for (si, &row) in sample.iter().enumerate() {
                for p in 0..pn {
                    for (el, e) in range.clone().enumerate() {
                        let (t, i) = exp[e];
                        let c = taps.idx[p * taps.k + t];
                        if c == Taps::ZERO {
                            continue;
                        }
                        let c = c as usize;
                        let s = spans.iter().rposition(|s| s.1 <= c).expect("column inside the concat");
                        let (prod, base, enc) = spans[s];
                        let x = ctx.probe.value(prod).expect("probe covers every vertex").row(row)[c - base];
                        patches[(si * pn + p) * bw + el] = enc.lane_word(x, i);
                    }
                }
            }
            let mut ab = vec![0.0; r_out * bw];
            for u in 0..r_out {
                ab[u * bw..(u + 1) * bw].copy_from_slice(&a[u * kk + range.start..u * kk + range.end]);
            }
            let mut part = vec![0.0; sample.len() * pn * r_out];
            gemm_nt(sample.len() * pn, bw, r_out, &patches, &ab, &mut part, false);
            for u in 0..r_out {
                let mags: Vec<f64> = part.iter().skip(u).step_by(r_out).map(|x| libm::fabs(*x)).collect();
                let pmax = percentile(&mags, ctx.pct);
                if pmax > 1e-12 {
                    scale[b][u] = top * lp as f64 / pmax;
                }
            }
        }
    }

    // Compute layer: rows (unit, sign, lane).
    let n_uc = r_out.div_ceil(rc);
    let mut cop = vec![vec![(0usize, 0usize); n_uc]; nb];
    for (b, range) in blocks.iter().enumerate() {
        let bw = range.len();
        for c in 0..n_uc {
            let (u0, u1) = (c * rc, ((c + 1) * rc).min(r_out));
            let rows = (u1 - u0) * 2 * lp;
            let srcs: Vec<_> = (0..pn)
                .flat_map(|p| range.clone().map(move |e| (p, e)))
                .map(|(p, e)| src(p, e))
                .collect();
            let (inputs, idx) = gather(&srcs, ctx.gwidth);
            let mut weight = Vec::with_capacity(rows * bw);
            let mut bias = Vec::with_capacity(rows);
            for u in u0..u1 {
                for sign in [1.0, -1.0] {
                    for i in 0..lp {
                        weight.extend(a[u * kk + range.start..u * kk + range.end].iter().map(|x| sign * scale[b][u] * x));
                        bias.push(-top * i as f64);
                    }
                }
            }
            let (lines, capped) = if lp > 1 {
                lines_for(top * (lp - 1) as f64, max_abs(&weight), bits, n_scale - bw)
            } else {
                (0, false)
            };
            if capped {
                ctx.warnings.push(alloc::format!("vertex {v}: partial-lane offsets need more bias lines than fit"));
            }
            let gid = *next;
            *next += 1;
            ctx.gwidth.push(pn * rows);
            cop[b][c] = (gid, rows);
            ops.push(TOp {
                gid,
                ghat: v,
                inputs,
                taps: Arc::new(Taps::new(pn, bw, idx)),
                rows,
                weight,
                mask: None,
                bias,
                lines,
                codebook: None,
            });
        }
    }

    // Reduce layer: one unit's taps are (block, sign, lane) words of its compute ops.
    let per_unit = nb * 2 * lp;
    if per_unit > n_scale {
        return Err(unsupported(
            v,
            alloc::format!("{per_unit} partial words per output exceed fan-in {n_scale}; a deeper reduce tree is not supported"),
        ));
    }
    let wmax_r = scale.iter().flatten().fold(0.0f64, |m, s| m.max(1.0 / s));
    let lane_bias = |u: usize, i: usize| a0[u] - top * i as f64;
    let bmax = (0..r_out)
        .flat_map(|u| (0..lanes).map(move |i| (u, i)))
        .fold(0.0f64, |m, (u, i)| m.max(libm::fabs(lane_bias(u, i))));
    let (lines0, _) = lines_for(bmax, wmax_r, bits, n_scale - per_unit);
    let r = ((n_scale - lines0) / per_unit).min(m_scale / lanes);
    if r == 0 {
        return Err(unsupported(v, "reduce core-op cannot hold one output".into()));
    }
    for u0 in (0..r_out).step_by(r) {
        let u1 = (u0 + r).min(r_out);
        let nu = u1 - u0;
        let k = nu * per_unit;
        let rows = nu * lanes;
        let mut srcs = Vec::with_capacity(pn * k);
        for p in 0..pn {
            for u in u0..u1 {
                let c = u / rc;
                for crow in &cop {
                    let (gid, crows) = crow[c];
                    for sg in 0..2 {
                        for i in 0..lp {
                            let word = p * crows + (u - c * rc) * 2 * lp + sg * lp + i;
                            srcs.push(Some((gid, word as u32)));
                        }
                    }
                }
            }
        }
        let (inputs, idx) = gather(&srcs, ctx.gwidth);
        let mut weight = vec![0.0; rows * k];
        let mut mask = vec![false; rows * k];
        let mut bias = Vec::with_capacity(rows);
        for u in u0..u1 {
            for i in 0..lanes {
                let row = (u - u0) * lanes + i;
                for b in 0..nb {
                    for sg in 0..2 {
                        for l in 0..lp {
                            let col = (u - u0) * per_unit + (b * 2 + sg) * lp + l;
                            let sign = if sg == 0 { 1.0 } else { -1.0 };
                            weight[row * k + col] = sign / scale[b][u];
                            mask[row * k + col] = true;
                        }
                    }
                }
                bias.push(lane_bias(u, i));
            }
        }
        let (lines, capped) = lines_for(bmax, wmax_r, bits, n_scale - k);
        if capped {
            ctx.warnings.push(alloc::format!("vertex {v}: bias needs more lines than fit beside {k} inputs"));
        }
        let gid = *next;
        *next += 1;
        ctx.gwidth.push(pn * rows);
        for p in 0..pn {
            for u in u0..u1 {
                for i in 0..lanes {
                    words[(p * r_out + u) * lanes + i] = (gid, (p * rows + (u - u0) * lanes + i) as u32);
                }
            }
        }
        ops.push(TOp {
            gid,
            ghat: v,
            inputs,
            taps: Arc::new(Taps::new(pn, k, idx)),
            rows,
            weight,
            mask: Some(mask),
            bias,
            lines,
            codebook: None,
        });
    }
    Ok(())
}
