//! Round-trip error bounds for absmax quantization, checked against the
//! original f32 values.

use nphd_core::numerics::Tensor;
use nphd_core::quant::{nf4_codebook, QuantScheme, QuantizedMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Slack for f32 rounding in `v / a · top` and `a · (c / top)`: a few ulps
/// of the absmax.
pub const ULP_SLACK: f32 = 4.0 * f32::EPSILON;

/// A random matrix whose rows span very different magnitudes, with the
/// occasional all-zero row.
pub fn random_matrix(rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (rows, cols) = (rng.gen_range(1..12), rng.gen_range(1..40));
    let mags: Vec<f32> = (0..rows)
        .map(|_| if rng.gen_bool(0.05) { 0.0 } else { 10f32.powf(rng.gen_range(-4.0..3.0)) })
        .collect();
    Tensor::from_fn(rows, cols, |r, _| mags[r] * rng.gen_range(-1.0f32..1.0))
}

/// Largest `error / bound` over every entry; at most 1 means the bound holds.
/// Bounds: 8-bit `absmax/254`, linear 4-bit `scale/2 = absmax/14`, NF4 half
/// the widest codebook gap times absmax. Each gets [`ULP_SLACK`]·absmax.
pub fn worst_ratio(w: &Tensor<f32>, scheme: QuantScheme, block: usize) -> f64 {
    let q = QuantizedMatrix::quantize(w, scheme, block).unwrap();
    let d: Tensor<f32> = q.dequantize();
    let book = nf4_codebook();
    let nf4_half_gap = book.windows(2).map(|p| p[1] - p[0]).fold(0.0f32, f32::max) / 2.0;
    let cols = w.cols();
    let mut worst = 0.0f64;
    for (i, (&x, &y)) in w.data().iter().zip(d.data()).enumerate() {
        let a = match scheme {
            QuantScheme::Int8Row => q.absmax()[i / cols],
            _ => q.absmax()[i / block],
        };
        let bound = match scheme {
            QuantScheme::Int8Row => a / 254.0,
            QuantScheme::Int4Block => q.scales()[i / block] / 2.0,
            QuantScheme::Nf4Block => a * nf4_half_gap,
        } + ULP_SLACK * a;
        let err = (x - y).abs();
        let r = if bound == 0.0 {
            if err == 0.0 { 0.0 } else { f64::INFINITY }
        } else {
            (err / bound) as f64
        };
        worst = worst.max(r);
    }
    worst
}

/// Worst ratio per scheme over `n` random matrices.
pub fn report(n: u64) -> [(QuantScheme, f64); 3] {
    let mut out = [(QuantScheme::Int8Row, 0.0), (QuantScheme::Int4Block, 0.0), (QuantScheme::Nf4Block, 0.0)];
    for s in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let w = random_matrix(&mut rng);
        let block = 2 * rng.gen_range(1..20);
        for (scheme, worst) in out.iter_mut() {
            *worst = f64::max(*worst, worst_ratio(&w, *scheme, block));
        }
    }
    out
}
