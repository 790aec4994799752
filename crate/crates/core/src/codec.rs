//! Weight value sets (codebooks), nearest-element projection and EM fitting.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    DynamicFixedPoint,
    FractionEncoding,
    WeightSharing,
}

impl CodecKind {
    pub const ALL: [CodecKind; 3] = [
        CodecKind::DynamicFixedPoint,
        CodecKind::FractionEncoding,
        CodecKind::WeightSharing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CodecKind::DynamicFixedPoint => "dynamic_fixed_point",
            CodecKind::FractionEncoding => "fraction_encoding",
            CodecKind::WeightSharing => "weight_sharing",
        }
    }

    /// Accepts the canonical names plus the short forms `dynamic`, `fraction`, `sharing`.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dynamic_fixed_point" | "dynamic" => Some(CodecKind::DynamicFixedPoint),
            "fraction_encoding" | "fraction" => Some(CodecKind::FractionEncoding),
            "weight_sharing" | "sharing" => Some(CodecKind::WeightSharing),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecFamily {
    pub kind: CodecKind,
    pub bits: u32,
}

impl CodecFamily {
    pub const MAX_BITS: u32 = 16;

    pub fn new(kind: CodecKind, bits: u32) -> Result<Self, CodecError> {
        if bits == 0 || bits > Self::MAX_BITS {
            return Err(CodecError::Bits(bits));
        }
        Ok(Self { kind, bits })
    }

    pub fn size(&self) -> usize {
        1 << self.bits
    }

    /// Integer level range `[qmin, qmax]` of the uniform families.
    pub fn level_range(&self) -> (i64, i64) {
        let half = 1i64 << (self.bits - 1);
        (-half, half - 1)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CodecError {
    #[error("weight bit-width must be in 1..=16, got {0}")]
    Bits(u32),
    #[error("fraction parameter must be positive and finite, got {0}")]
    Fraction(f64),
    #[error("exponent {0} outside [-64, 64]")]
    Exponent(i32),
    #[error("weight sharing needs {expected} distinct nonzero finite centroids, got {got:?}")]
    Centroids { expected: usize, got: Vec<f64> },
    #[error("parameter kind does not match family {0:?}")]
    Mismatch(CodecKind),
    #[error("no weights to fit")]
    Empty,
    #[error("non-finite weight at index {0}")]
    NonFinite(usize),
}

/// Family parameter `P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecParams {
    /// Dynamic fixed point: values `k / 2^P`.
    Exponent(i32),
    /// Fraction encoding: values `k / P`.
    Fraction(f64),
    /// Weight sharing: the nonzero centroids (zero is implicit).
    Centroids(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CodebookRepr {
    family: CodecFamily,
    params: CodecParams,
}

/// Realized value set `S^P`, sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CodebookRepr", into = "CodebookRepr")]
pub struct Codebook {
    family: CodecFamily,
    params: CodecParams,
    values: Vec<f64>,
}

impl TryFrom<CodebookRepr> for Codebook {
    type Error = CodecError;
    fn try_from(r: CodebookRepr) -> Result<Self, CodecError> {
        Codebook::realize(r.family, r.params)
    }
}

impl From<Codebook> for CodebookRepr {
    fn from(c: Codebook) -> Self {
        CodebookRepr {
            family: c.family,
            params: c.params,
        }
    }
}

impl Codebook {
    pub fn realize(family: CodecFamily, params: CodecParams) -> Result<Self, CodecError> {
        CodecFamily::new(family.kind, family.bits)?;
        let values = match (&family.kind, &params) {
            (CodecKind::DynamicFixedPoint, CodecParams::Exponent(p)) => {
                if !(-64..=64).contains(p) {
                    return Err(CodecError::Exponent(*p));
                }
                let (lo, hi) = family.level_range();
                (lo..=hi).map(|q| math::ldexp(q as f64, -p)).collect()
            }
            (CodecKind::FractionEncoding, CodecParams::Fraction(p)) => {
                if !(*p > 0.0 && p.is_finite()) {
                    return Err(CodecError::Fraction(*p));
                }
                let (lo, hi) = family.level_range();
                (lo..=hi).map(|q| q as f64 / p).collect()
            }
            (CodecKind::WeightSharing, CodecParams::Centroids(c)) => {
                let expected = family.size() - 1;
                let mut v: Vec<f64> = c.clone();
                v.push(0.0);
                v.sort_by(f64::total_cmp);
                let bad = c.len() != expected
                    || c.iter().any(|x| !x.is_finite() || *x == 0.0)
                    || v.windows(2).any(|w| w[0] == w[1]);
                if bad {
                    return Err(CodecError::Centroids {
                        expected,
                        got: c.clone(),
                    });
                }
                v
            }
            _ => return Err(CodecError::Mismatch(family.kind)),
        };
        Ok(Self {
            family,
            params,
            values,
        })
    }

    /// Codebook that contains every finite value exactly is impossible; this is
    /// the widest dynamic fixed-point book used when no constraint is requested.
    pub fn dynamic(bits: u32, exponent: i32) -> Result<Self, CodecError> {
        Self::realize(
            CodecFamily::new(CodecKind::DynamicFixedPoint, bits)?,
            CodecParams::Exponent(exponent),
        )
    }

    pub fn fraction(bits: u32, p: f64) -> Result<Self, CodecError> {
        Self::realize(
            CodecFamily::new(CodecKind::FractionEncoding, bits)?,
            CodecParams::Fraction(p),
        )
    }

    pub fn sharing(bits: u32, centroids: Vec<f64>) -> Result<Self, CodecError> {
        Self::realize(
            CodecFamily::new(CodecKind::WeightSharing, bits)?,
            CodecParams::Centroids(centroids),
        )
    }

    pub fn family(&self) -> CodecFamily {
        self.family
    }

    pub fn params(&self) -> &CodecParams {
        &self.params
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn zero_index(&self) -> usize {
        self.values.iter().position(|&v| v == 0.0).expect("every codebook contains zero")
    }

    /// Nearest element; ties go to the smaller value.
    pub fn project(&self, w: f64) -> (usize, f64) {
        let v = &self.values;
        let i = v.partition_point(|&x| x < w);
        let k = if i == 0 {
            0
        } else if i == v.len() {
            v.len() - 1
        } else if w - v[i - 1] <= v[i] - w {
            i - 1
        } else {
            i
        };
        (k, v[k])
    }

    pub fn project_value(&self, w: f64) -> f64 {
        self.project(w).1
    }

    /// Exact index of a member value.
    pub fn index_of(&self, w: f64) -> Option<usize> {
        let (k, v) = self.project(w);
        (v == w).then_some(k)
    }

    pub fn contains(&self, w: f64) -> bool {
        self.index_of(w).is_some()
    }

    /// Integer level of index `k` for the uniform families (`value = level · unit`).
    pub fn level(&self, k: usize) -> Option<i64> {
        match self.family.kind {
            CodecKind::WeightSharing => None,
            _ => Some(self.family.level_range().0 + k as i64),
        }
    }

    /// Converts an exact integer sum of `level · input` products into a real
    /// value. Both the simulator and the trainer go through this.
    pub fn scale_level_sum(&self, s: f64) -> f64 {
        match &self.params {
            CodecParams::Exponent(p) => math::ldexp(s, -p),
            CodecParams::Fraction(p) => s / p,
            CodecParams::Centroids(_) => s,
        }
    }

    /// `Σ (w − project(w))²`.
    pub fn residual(&self, weights: &[f64]) -> f64 {
        weights
            .iter()
            .map(|&w| {
                let d = w - self.project_value(w);
                d * d
            })
            .sum()
    }
}

/// Result of [`em_fit`].
#[derive(Debug, Clone)]
pub struct EmFit {
    pub codebook: Codebook,
    pub indices: Vec<usize>,
    pub j: f64,
    /// `J` after every iteration (the first entry is the initialization).
    pub history: Vec<f64>,
    /// Set when the fit was degenerate (all-zero weights for fraction encoding).
    pub degenerate: bool,
}

pub const EM_TOLERANCE: f64 = 1e-9;
pub const EM_MAX_ITERS: usize = 100;
pub const DYNAMIC_RANGE: (i32, i32) = (-16, 16);
const SHARING_SEED: u64 = 0x5eed_c0de;

/// Fits the family parameter to `weights` by alternating projection (E) and
/// parameter refit (M) until `J` moves by less than [`EM_TOLERANCE`].
pub fn em_fit(family: CodecFamily, weights: &[f64]) -> Result<EmFit, CodecError> {
    CodecFamily::new(family.kind, family.bits)?;
    if weights.is_empty() {
        return Err(CodecError::Empty);
    }
    if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
        return Err(CodecError::NonFinite(i));
    }
    match family.kind {
        CodecKind::DynamicFixedPoint => fit_dynamic(family, weights),
        CodecKind::FractionEncoding => fit_fraction(family, weights),
        CodecKind::WeightSharing => fit_sharing(family, weights),
    }
}

fn assign(book: &Codebook, weights: &[f64]) -> (Vec<usize>, f64) {
    let mut j = 0.0;
    let idx = weights
        .iter()
        .map(|&w| {
            let (k, v) = book.project(w);
            j += (w - v) * (w - v);
            k
        })
        .collect();
    (idx, j)
}

fn finish(book: Codebook, weights: &[f64], history: Vec<f64>, degenerate: bool) -> EmFit {
    let (indices, j) = assign(&book, weights);
    EmFit {
        codebook: book,
        indices,
        j,
        history,
        degenerate,
    }
}

fn fit_dynamic(family: CodecFamily, weights: &[f64]) -> Result<EmFit, CodecError> {
    // Discrete parameter: both the start and the M-step scan the whole range.
    let book_for = |p| Codebook::realize(family, CodecParams::Exponent(p));
    let mut best: Option<(f64, i32)> = None;
    for p in DYNAMIC_RANGE.0..=DYNAMIC_RANGE.1 {
        let j = book_for(p)?.residual(weights);
        if best.is_none_or(|(bj, _)| j < bj) {
            best = Some((j, p));
        }
    }
    let (mut j, mut p) = best.expect("non-empty range");
    let mut history = vec![j];
    for _ in 0..EM_MAX_ITERS {
        let book = book_for(p)?;
        let (idx, _) = assign(&book, weights);
        let levels: Vec<f64> = idx.iter().map(|&k| book.level(k).unwrap() as f64).collect();
        let mut next = (j, p);
        for cand in DYNAMIC_RANGE.0..=DYNAMIC_RANGE.1 {
            let jc: f64 = weights
                .iter()
                .zip(&levels)
                .map(|(&w, &q)| {
                    let d = w - math::ldexp(q, -cand);
                    d * d
                })
                .sum();
            if jc < next.0 {
                next = (jc, cand);
            }
        }
        p = next.1;
        let j_new = book_for(p)?.residual(weights);
        history.push(j_new);
        let done = j - j_new < EM_TOLERANCE;
        j = j_new;
        if done {
            break;
        }
    }
    Ok(finish(book_for(p)?, weights, history, false))
}

fn fit_fraction(family: CodecFamily, weights: &[f64]) -> Result<EmFit, CodecError> {
    let (qmin, qmax) = family.level_range();
    let pos = weights.iter().copied().fold(0.0, f64::max);
    let neg = -weights.iter().copied().fold(0.0, f64::min);
    if pos == 0.0 && neg == 0.0 {
        let book = Codebook::realize(family, CodecParams::Fraction(1.0))?;
        return Ok(finish(book, weights, vec![0.0], true));
    }
    let mut s = f64::max(
        if qmax > 0 { pos / qmax as f64 } else { 0.0 },
        neg / (-qmin) as f64,
    );
    if !(s > 0.0) {
        // Only the side without levels holds weights (1-bit: levels −1, 0);
        // every scale leaves them at 0, so take the span of the other side.
        s = pos.max(neg) / qmax.max(-qmin) as f64;
    }
    let mut book = Codebook::realize(family, CodecParams::Fraction(1.0 / s))?;
    let (mut idx, mut j) = assign(&book, weights);
    let mut history = vec![j];
    for _ in 0..EM_MAX_ITERS {
        let (mut num, mut den) = (0.0, 0.0);
        for (&w, &k) in weights.iter().zip(&idx) {
            let q = book.level(k).unwrap() as f64;
            num += w * q;
            den += q * q;
        }
        if den > 0.0 && num > 0.0 {
            s = num / den;
        }
        let cand = Codebook::realize(family, CodecParams::Fraction(1.0 / s))?;
        let (cidx, cj) = assign(&cand, weights);
        // 1/(1/s) can differ from s in the last bit; never accept a worse fit.
        if cj > j {
            history.push(j);
            break;
        }
        let done = j - cj < EM_TOLERANCE;
        book = cand;
        idx = cidx;
        j = cj;
        history.push(j);
        if done {
            break;
        }
    }
    Ok(finish(book, weights, history, false))
}

fn distinct_fill(centroids: &mut Vec<f64>, needed: usize, scale: f64) {
    let base = if scale > 0.0 { scale } else { 1.0 };
    let mut step = 1.0;
    while centroids.len() < needed {
        let cand = base * (1.0 + step);
        step += 1.0;
        if !centroids.contains(&cand) {
            centroids.push(cand);
        }
    }
}

fn fit_sharing(family: CodecFamily, weights: &[f64]) -> Result<EmFit, CodecError> {
    let needed = family.size() - 1;
    let max_abs = weights.iter().fold(0.0f64, |a, &w| a.max(libm::fabs(w)));
    // Farthest-point (k-means++) seeding from the pinned zero.
    let mut rng = ChaCha8Rng::seed_from_u64(SHARING_SEED);
    let mut centroids: Vec<f64> = Vec::with_capacity(needed);
    let mut d2: Vec<f64> = weights.iter().map(|w| w * w).collect();
    while centroids.len() < needed {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut r = rng.random::<f64>() * total;
        let mut pick = d2.len() - 1;
        for (i, &d) in d2.iter().enumerate() {
            if r < d {
                pick = i;
                break;
            }
            r -= d;
        }
        let c = weights[pick];
        if c == 0.0 || centroids.contains(&c) {
            d2[pick] = 0.0;
            continue;
        }
        centroids.push(c);
        for (d, &w) in d2.iter_mut().zip(weights) {
            *d = d.min((w - c) * (w - c));
        }
    }
    distinct_fill(&mut centroids, needed, max_abs);
    let mut book = Codebook::realize(family, CodecParams::Centroids(centroids.clone()))?;
    let (mut idx, mut j) = assign(&book, weights);
    let mut history = vec![j];
    for _ in 0..EM_MAX_ITERS {
        let vals = book.values().to_vec();
        let mut sum = vec![0.0; vals.len()];
        let mut cnt = vec![0usize; vals.len()];
        for (&w, &k) in weights.iter().zip(&idx) {
            sum[k] += w;
            cnt[k] += 1;
        }
        let mut next: Vec<f64> = Vec::with_capacity(needed);
        for (k, &v) in vals.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let mean = if cnt[k] > 0 { sum[k] / cnt[k] as f64 } else { v };
            // Keeping the old value is always J-safe; use it on collisions.
            let ok = mean != 0.0 && !next.contains(&mean) && !vals.iter().any(|&o| o == mean && o != v);
            next.push(if ok { mean } else { v });
        }
        let cand = match Codebook::realize(family, CodecParams::Centroids(next)) {
            Ok(c) => c,
            Err(_) => break,
        };
        let (cidx, cj) = assign(&cand, weights);
        if cj > j {
            history.push(j);
            break;
        }
        let done = j - cj < EM_TOLERANCE;
        book = cand;
        idx = cidx;
        j = cj;
        history.push(j);
        if done {
            break;
        }
    }
    Ok(finish(book, weights, history, false))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn realize_examples() {
        let d = Codebook::dynamic(3, 1).unwrap();
        assert!(close(d.values(), &[-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5]));
        let f = Codebook::fraction(3, 4.0).unwrap();
        assert!(close(f.values(), &[-1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75]));
        let s = Codebook::sharing(1, vec![0.7]).unwrap();
        assert!(close(s.values(), &[0.0, 0.7]));
    }

    #[test]
    fn realize_rejects_bad_params() {
        assert!(Codebook::fraction(3, 0.0).is_err());
        assert!(Codebook::fraction(3, f64::NAN).is_err());
        assert!(Codebook::sharing(2, vec![0.1, 0.1, 0.2]).is_err());
        assert!(Codebook::sharing(2, vec![0.1, 0.0, 0.2]).is_err());
        assert!(Codebook::sharing(2, vec![0.1]).is_err());
        assert!(Codebook::dynamic(0, 1).is_err());
    }

    #[test]
    fn projection_examples() {
        let d = Codebook::dynamic(3, 1).unwrap();
        assert_eq!(d.project(0.7), (5, 0.5));
        assert_eq!(d.project(0.5), (5, 0.5));
        assert_eq!(d.project(0.25), (4, 0.0));
        assert_eq!(d.project(-0.25), (3, -0.5));
        assert_eq!(d.project(9.0), (7, 1.5));
    }

    #[test]
    fn dynamic_em_example() {
        let fam = CodecFamily::new(CodecKind::DynamicFixedPoint, 2).unwrap();
        let fit = em_fit(fam, &[0.30, 0.24, -0.26]).unwrap();
        assert_eq!(fit.codebook.params(), &CodecParams::Exponent(2));
        let vals: Vec<f64> = fit.indices.iter().map(|&k| fit.codebook.values()[k]).collect();
        assert_eq!(vals, [0.25, 0.25, -0.25]);
        assert!((fit.j - 0.0027).abs() < 1e-12);
    }

    #[test]
    fn fraction_single_weight_exact() {
        let fam = CodecFamily::new(CodecKind::FractionEncoding, 2).unwrap();
        let fit = em_fit(fam, &[0.5]).unwrap();
        assert_eq!(fit.j, 0.0);
        assert_eq!(fit.codebook.values()[fit.indices[0]], 0.5);
    }

    #[test]
    fn fraction_all_zero_is_flagged() {
        let fam = CodecFamily::new(CodecKind::FractionEncoding, 4).unwrap();
        let fit = em_fit(fam, &[0.0, 0.0]).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.codebook.params(), &CodecParams::Fraction(1.0));
        assert!(fit.indices.iter().all(|&k| fit.codebook.values()[k] == 0.0));
    }

    #[test]
    fn representable_weights_are_a_fixed_point() {
        for kind in CodecKind::ALL {
            let fam = CodecFamily::new(kind, 3).unwrap();
            let fit = em_fit(fam, &[0.5, -0.25, 0.75, 0.0]).unwrap();
            assert_eq!(fit.j, 0.0, "{kind:?}");
        }
    }

    #[test]
    fn sharing_is_kmeans_with_zero() {
        let fam = CodecFamily::new(CodecKind::WeightSharing, 2).unwrap();
        let w = [1.0, 1.1, 0.9, -2.0, -2.2, 5.0, 0.01];
        let fit = em_fit(fam, &w).unwrap();
        assert!(fit.codebook.values().contains(&0.0));
        let v = fit.codebook.values();
        assert!(close(v, &[-2.1, 0.0, 1.0, 5.0]), "{v:?}");
    }

    #[test]
    fn sharing_with_few_distinct_values() {
        let fam = CodecFamily::new(CodecKind::WeightSharing, 3).unwrap();
        let fit = em_fit(fam, &[0.5, 0.5, 0.0]).unwrap();
        assert_eq!(fit.j, 0.0);
        assert_eq!(fit.codebook.len(), 8);
    }

    #[test]
    fn codebook_serde_roundtrip() {
        let b = Codebook::fraction(4, 3.7).unwrap();
        let s = serde_json::to_string(&b).unwrap();
        let back: Codebook = serde_json::from_str(&s).unwrap();
        assert_eq!(b, back);
    }
}
