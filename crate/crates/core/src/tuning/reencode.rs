//! Calibration, the re-encoding autoencoder and linear-map fusion.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::{self, percentile};
use crate::tensor::Tensor;

use super::TuneError;

/// Value range `[lo, hi]` a vertex's outputs are encoded over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

/// `pct`-th percentile of activation magnitudes. An all-zero stream has no
/// scale; it gets 1 and a warning.
pub fn x_max(values: &[f64], pct: f64) -> (f64, Option<String>) {
    let mags: Vec<f64> = values.iter().map(|v| libm::fabs(*v)).collect();
    let m = percentile(&mags, pct);
    if m > 0.0 {
        (m, None)
    } else {
        (1.0, Some("all-zero activations; x_max set to 1".into()))
    }
}

/// Encoding range of a stream. Non-negative streams (ReLU outputs, or a low
/// percentile at or above zero) start at 0; otherwise `lo` is the mirrored
/// percentile.
pub fn calibrate(values: &[f64], pct: f64, relu: bool) -> (Range, Option<String>) {
    let low = percentile(values, 100.0 - pct);
    let lo = if relu || low >= 0.0 { 0.0 } else { low };
    let hi = percentile(values, pct);
    if hi > lo {
        (Range { lo, hi }, None)
    } else if lo == 0.0 && hi <= 0.0 {
        (Range { lo: 0.0, hi: 1.0 }, Some("all-zero activations; x_max set to 1".into()))
    } else {
        (Range { lo, hi: lo + 1.0 }, Some(alloc::format!("constant activations at {lo}")))
    }
}

/// Narrows `r.hi` to the candidate (geometric steps of a quarter octave
/// below it) with the least round-trip error through `bits`-bit, `m`-lane
/// words. At low widths a percentile range leaves most values in the bottom
/// step.
pub fn fit_range(values: &[f64], r: Range, bits: u32, m: usize) -> Range {
    let stride = (values.len() / 65_536).max(1);
    let sample: Vec<f64> = values.iter().step_by(stride).copied().collect();
    if sample.is_empty() {
        return r;
    }
    let err = |hi: f64| -> f64 {
        let a = Autoencoder::new(bits, m, Range { lo: r.lo, hi });
        sample
            .iter()
            .map(|&x| {
                let d = a.decode(&a.encode(x)) - x.max(r.lo);
                d * d
            })
            .sum()
    };
    let mut best = (err(r.hi), r.hi);
    for j in 1..=24 {
        let hi = r.lo + (r.hi - r.lo) * libm::exp2(-(j as f64) / 4.0);
        let e = err(hi);
        if e < best.0 {
            best = (e, hi);
        }
    }
    Range { lo: r.lo, hi: best.1 }
}

/// Autoencoder inserted after a weighted-sum vertex: `m` hidden B-bit units
/// splitting `[lo, hi]` into adjacent intervals, and a linear decoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Autoencoder {
    pub bits: u32,
    pub m: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Autoencoder {
    pub fn new(bits: u32, m: usize, range: Range) -> Self {
        Self {
            bits,
            m: m.max(1),
            lo: range.lo,
            hi: range.hi,
        }
    }

    fn top(&self) -> f64 {
        math::io_max(self.bits) as f64
    }

    /// Encoder weight shared by all hidden units.
    pub fn w_enc(&self) -> f64 {
        self.top() * self.m as f64 / (self.hi - self.lo)
    }

    /// Encoder bias of hidden unit `i` (the range offset folded in).
    pub fn b_enc(&self, i: usize) -> f64 {
        -self.top() * i as f64 - self.w_enc() * self.lo
    }

    /// Decoder weight of every hidden unit.
    pub fn w_dec(&self) -> f64 {
        (self.hi - self.lo) / (self.top() * self.m as f64)
    }

    pub fn encode(&self, x: f64) -> Vec<u32> {
        (0..self.m)
            .map(|i| math::quantize_io(self.w_enc() * x + self.b_enc(i), self.bits))
            .collect()
    }

    pub fn decode(&self, words: &[u32]) -> f64 {
        self.w_dec() * words.iter().map(|&w| w as f64).sum::<f64>() + self.lo
    }
}

/// `enc · w · dec` as one matrix: three consecutive linear maps collapsed
/// into a single weighted sum.
pub fn fuse_linear_triple(dec: &Tensor, w: &Tensor, enc: &Tensor) -> Result<Tensor, TuneError> {
    let as2 = |t: &Tensor| -> Tensor {
        if t.shape().len() == 2 {
            t.clone()
        } else {
            Tensor::new(vec![t.rows(), t.cols()], t.data().to_vec()).expect("same length")
        }
    };
    let (dec, w, enc) = (as2(dec), as2(w), as2(enc));
    if enc.cols() != w.rows() || w.cols() != dec.rows() {
        return Err(TuneError::Shape(alloc::format!(
            "cannot fuse encoder {:?} · weight {:?} · decoder {:?}",
            enc.shape(),
            w.shape(),
            dec.shape()
        )));
    }
    Ok(enc.matmul(&w).matmul(&dec))
}
