//! Slice-level kernels shared by the graph and the quantized paths.

use super::Real;

/// `out += a · b` for row-major `a: [m, k]`, `b: [k, n]`, `out: [m, n]`.
pub fn gemm<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

pub fn transpose<F: Real>(rows: usize, cols: usize, src: &[F], dst: &mut [F]) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

/// Softmax over one row. Masked entries (`mask[j] == true`) get probability
/// exactly zero; a fully masked row yields all zeros.
pub fn softmax_row<F: Real>(x: &[F], mask: Option<&[bool]>, out: &mut [F]) {
    let masked = |j: usize| mask.is_some_and(|m| m[j]);
    let mut max = F::neg_infinity();
    for (j, &v) in x.iter().enumerate() {
        if !masked(j) && v > max {
            max = v;
        }
    }
    if max == F::neg_infinity() {
        out.iter_mut().for_each(|o| *o = F::zero());
        return;
    }
    let mut sum = F::zero();
    for (j, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        *o = if masked(j) { F::zero() } else { (v - max).exp() };
        sum = sum + *o;
    }
    let inv = F::one() / sum;
    out.iter_mut().for_each(|o| *o = *o * inv);
}

pub fn log_sum_exp<F: Real>(x: &[F]) -> F {
    let max = x.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let sum: F = x.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;

/// Exact (erf-based) GELU.
pub fn gelu<F: Real>(x: F) -> F {
    let xf = x.as_f64();
    F::of(0.5 * xf * (1.0 + libm::erf(xf * INV_SQRT_2)))
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let xf = x.as_f64();
    let cdf = 0.5 * (1.0 + libm::erf(xf * INV_SQRT_2));
    let pdf = libm::exp(-0.5 * xf * xf) / libm::sqrt(2.0 * core::f64::consts::PI);
    F::of(cdf + xf * pdf)
}
