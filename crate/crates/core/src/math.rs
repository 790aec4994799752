//! Scalar helpers and the dense GEMM kernel shared by training and simulation.

use alloc::vec::Vec;

/// Round to nearest integer, ties to even.
pub fn round_half_even(x: f64) -> f64 {
    libm::rint(x)
}

/// Quantize a pre-activation to an I/O word: ReLU, round half to even, clamp to `[0, 2^bits - 1]`.
pub fn quantize_io(x: f64, bits: u32) -> u32 {
    let top = io_max(bits);
    let r = round_half_even(if x > 0.0 { x } else { 0.0 });
    if r >= top as f64 {
        top
    } else {
        r as u32
    }
}

/// Largest representable I/O word for `bits`.
pub fn io_max(bits: u32) -> u32 {
    if bits >= 32 {
        u32::MAX
    } else {
        (1u32 << bits) - 1
    }
}

pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub fn log2(x: f64) -> f64 {
    libm::log2(x)
}

pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

/// `x * 2^e`, exact for in-range results.
pub fn ldexp(x: f64, e: i32) -> f64 {
    libm::ldexp(x, e)
}

/// Nearest-rank percentile (`q` in `[0, 100]`) of `values`. Returns 0 for an empty slice.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // The epsilon keeps ranks like 99.9% of 1000 from rounding up to 1000.
    let rank = libm::ceil(q / 100.0 * sorted.len() as f64 - 1e-9) as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// `c = a · bᵀ` (+ `c` when `accumulate`), with `a: m×k`, `b: n×k`, `c: m×n`, all row-major.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    gemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), c, accumulate);
}

/// `c = a · b` with `a: m×k`, `b: k×n`.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), c, accumulate);
}

/// `c = aᵀ · b` with `a: k×m`, `b: k×n`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    gemm(m, k, n, a, (1, m as isize), b, (n as isize, 1), c, accumulate);
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the debug assertions above (and every caller) guarantee the
    // slices cover the m×k, k×n and m×n extents addressed by these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_even_rounding() {
        assert_eq!(round_half_even(0.5), 0.0);
        assert_eq!(round_half_even(1.5), 2.0);
        assert_eq!(round_half_even(2.5), 2.0);
        assert_eq!(round_half_even(-0.4), 0.0);
        assert_eq!(round_half_even(3.7), 4.0);
    }

    #[test]
    fn io_quantization_clamps() {
        assert_eq!(quantize_io(-0.4, 2), 0);
        assert_eq!(quantize_io(1.2, 2), 1);
        assert_eq!(quantize_io(3.7, 2), 3);
        assert_eq!(quantize_io(6.0, 2), 3);
        assert_eq!(quantize_io(2.5, 8), 2);
    }

    #[test]
    fn gemm_variants_agree() {
        // a: 2×3, b: 3×2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        gemm_nn(2, 3, 2, &a, &b, &mut c, false);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // bᵀ stored as 2×3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0; 4];
        gemm_nt(2, 3, 2, &a, &bt, &mut c2, false);
        assert_eq!(c2, c);
        // aᵀ stored as 3×2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c3 = [1.0; 4];
        gemm_tn(2, 3, 2, &at, &b, &mut c3, true);
        assert_eq!(c3, [59.0, 65.0, 140.0, 155.0]);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 99.9), 999.0);
        assert_eq!(percentile(&[5.0; 10], 99.9), 5.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }
}
