//! Absmax quantization of frozen weight matrices.
//!
//! Two layouts are supported:
//!
//! * `Int8Row`: one absmax per row, signed codes in `-127..=127`.
//! * `Int4Block`: the row-major flattened matrix is cut into contiguous
//!   blocks of `block_size` entries (the last block may be short), one absmax
//!   per block, codes packed two per byte. The linear variant uses signed
//!   codes `-7..=7`; the normal-float variant indexes a 16-entry codebook
//!   placed at quantiles of the standard normal.
//!
//! Each row/block stores its absmax `a`. The scale is `a / top_code` and an
//! entry dequantizes to `a * (code / top_code)`, so the saturated code maps
//! back to `a` exactly. Rounding is half away from zero.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::numerics::{kernels, FrozenLinear, Real, Tensor};

pub const DEFAULT_BLOCK_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantScheme {
    Int8Row,
    Int4Block,
    Nf4Block,
}

impl QuantScheme {
    pub fn tag(self) -> u8 {
        match self {
            QuantScheme::Int8Row => 8,
            QuantScheme::Int4Block => 4,
            QuantScheme::Nf4Block => 0x4f,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            8 => Some(QuantScheme::Int8Row),
            4 => Some(QuantScheme::Int4Block),
            0x4f => Some(QuantScheme::Nf4Block),
            _ => None,
        }
    }

    /// Largest code magnitude for linear schemes.
    pub fn top_code(self) -> i32 {
        match self {
            QuantScheme::Int8Row => 127,
            QuantScheme::Int4Block => 7,
            QuantScheme::Nf4Block => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuantError {
    #[error("block size {0} must be a positive even number")]
    BlockSize(usize),
    #[error("non-finite weight at flat index {0}")]
    NonFinite(usize),
    #[error("code {code} at flat index {index} is outside the representable range")]
    CodeOutOfRange { index: usize, code: i32 },
    #[error("payload inconsistent with shape: {0}")]
    Layout(&'static str),
    #[error("shape mismatch: quantized {rows}x{cols} against {other:?}")]
    Shape {
        rows: usize,
        cols: usize,
        other: Vec<usize>,
    },
}

pub type Result<T, E = QuantError> = core::result::Result<T, E>;

/// Frozen quantized weight matrix. There is no way to mutate one after
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    scheme: QuantScheme,
    rows: usize,
    cols: usize,
    block_size: usize,
    absmax: Vec<f32>,
    codes: Vec<u8>,
}

/// Round half away from zero.
#[inline]
fn round_half_away(x: f32) -> f32 {
    libm::roundf(x)
}

/// 16-level codebook at standard-normal quantiles, normalized to [-1, 1].
///
/// Eight positive levels come from quantiles evenly spaced on
/// `[0.5, offset]`, seven negative levels from `[0.5, offset]` with 8 points,
/// plus an exact zero; `offset = (1 - 1/(2·15) + 1 - 1/(2·16)) / 2`.
pub fn nf4_codebook() -> [f32; 16] {
    let offset = 0.5 * ((1.0 - 1.0 / 30.0) + (1.0 - 1.0 / 32.0));
    let linspace = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|i| offset + (0.5 - offset) * i as f64 / (n - 1) as f64)
            .collect()
    };
    let mut levels: Vec<f64> = Vec::with_capacity(16);
    for p in &linspace(9)[..8] {
        levels.push(normal_quantile(*p));
    }
    levels.push(0.0);
    for p in &linspace(8)[..7] {
        levels.push(-normal_quantile(*p));
    }
    let max = levels.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out = [0.0f32; 16];
    for (o, v) in out.iter_mut().zip(&levels) {
        *o = (v / max) as f32;
    }
    out
}

/// Inverse of the standard normal CDF, by bisection on `erfc` refined with
/// Newton steps.
fn normal_quantile(p: f64) -> f64 {
    let cdf = |x: f64| 0.5 * libm::erfc(-x / core::f64::consts::SQRT_2);
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..3 {
        let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
        if pdf > 0.0 {
            x -= (cdf(x) - p) / pdf;
        }
    }
    x
}

/// Packs 4-bit values two per byte, low nibble first. Odd lengths leave the
/// final high nibble zero.
pub fn pack_nibbles(values: &[u8]) -> Vec<u8> {
    values
        .chunks(2)
        .map(|pair| (pair[0] & 0x0f) | (pair.get(1).copied().unwrap_or(0) & 0x0f) << 4)
        .collect()
}

pub fn unpack_nibbles(packed: &[u8], len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len);
    for &b in packed {
        out.push(b & 0x0f);
        out.push(b >> 4);
    }
    out.truncate(len);
    out
}

fn nearest_level(book: &[f32; 16], x: f32) -> u8 {
    let mut best = 0usize;
    let mut best_d = f32::INFINITY;
    for (i, &v) in book.iter().enumerate() {
        let d = (v - x).abs();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best as u8
}

impl QuantizedMatrix {
    /// Quantizes a `[rows, cols]` matrix. Values are converted to `f32`
    /// before quantization. `block_size` is ignored for `Int8Row`.
    pub fn quantize<F: Real>(w: &Tensor<F>, scheme: QuantScheme, block_size: usize) -> Result<Self> {
        let (rows, cols) = (w.rows(), w.cols());
        let vals: Vec<f32> = w.data().iter().map(|x| x.as_f64() as f32).collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(QuantError::NonFinite(i));
        }
        match scheme {
            QuantScheme::Int8Row => {
                let mut absmax = Vec::with_capacity(rows);
                let mut codes = Vec::with_capacity(rows * cols);
                for row in vals.chunks(cols.max(1)).take(rows) {
                    let a = row.iter().fold(0.0f32, |m, v| m.max(v.abs()));
                    absmax.push(a);
                    for &v in row {
                        let c = if a == 0.0 {
                            0.0
                        } else {
                            round_half_away(v / a * 127.0).clamp(-127.0, 127.0)
                        };
                        codes.push(c as i8 as u8);
                    }
                }
                Ok(Self {
                    scheme,
                    rows,
                    cols,
                    block_size: cols,
                    absmax,
                    codes,
                })
            }
            QuantScheme::Int4Block | QuantScheme::Nf4Block => {
                if block_size == 0 || !block_size.is_multiple_of(2) {
                    return Err(QuantError::BlockSize(block_size));
                }
                let book = nf4_codebook();
                let mut absmax = Vec::with_capacity(vals.len().div_ceil(block_size));
                let mut nibbles = Vec::with_capacity(vals.len());
                for block in vals.chunks(block_size) {
                    let a = block.iter().fold(0.0f32, |m, v| m.max(v.abs()));
                    absmax.push(a);
                    for &v in block {
                        let nib = if scheme == QuantScheme::Int4Block {
                            let c = if a == 0.0 {
                                0.0
                            } else {
                                round_half_away(v / a * 7.0).clamp(-7.0, 7.0)
                            };
                            (c as i32 + 8) as u8
                        } else if a == 0.0 {
                            nearest_level(&book, 0.0)
                        } else {
                            nearest_level(&book, v / a)
                        };
                        nibbles.push(nib);
                    }
                }
                Ok(Self {
                    scheme,
                    rows,
                    cols,
                    block_size,
                    absmax,
                    codes: pack_nibbles(&nibbles),
                })
            }
        }
    }

    /// Rebuilds a matrix from serialized parts, validating layout and code
    /// ranges.
    pub fn from_parts(
        scheme: QuantScheme,
        rows: usize,
        cols: usize,
        block_size: usize,
        absmax: Vec<f32>,
        codes: Vec<u8>,
    ) -> Result<Self> {
        let n = rows * cols;
        let (want_scales, want_codes) = match scheme {
            QuantScheme::Int8Row => (rows, n),
            _ => {
                if block_size == 0 || !block_size.is_multiple_of(2) {
                    return Err(QuantError::BlockSize(block_size));
                }
                (n.div_ceil(block_size), n.div_ceil(2))
            }
        };
        if absmax.len() != want_scales {
            return Err(QuantError::Layout("scale count"));
        }
        if codes.len() != want_codes {
            return Err(QuantError::Layout("code byte count"));
        }
        if absmax.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(QuantError::Layout("scales must be finite and non-negative"));
        }
        let q = Self {
            scheme,
            rows,
            cols,
            block_size: if scheme == QuantScheme::Int8Row { cols } else { block_size },
            absmax,
            codes,
        };
        q.validate()?;
        Ok(q)
    }

    /// Checks every stored code against the scheme's range.
    pub fn validate(&self) -> Result<()> {
        match self.scheme {
            QuantScheme::Int8Row => {
                for (i, &b) in self.codes.iter().enumerate() {
                    let c = b as i8 as i32;
                    if c < -127 {
                        return Err(QuantError::CodeOutOfRange { index: i, code: c });
                    }
                }
            }
            QuantScheme::Int4Block => {
                let nibbles = unpack_nibbles(&self.codes, self.rows * self.cols);
                for (i, &nib) in nibbles.iter().enumerate() {
                    if nib == 0 {
                        return Err(QuantError::CodeOutOfRange { index: i, code: -8 });
                    }
                }
            }
            QuantScheme::Nf4Block => {}
        }
        Ok(())
    }

    pub fn scheme(&self) -> QuantScheme {
        self.scheme
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Per-row (8-bit) or per-block (4-bit) absmax.
    pub fn absmax(&self) -> &[f32] {
        &self.absmax
    }

    /// Absmax divided by the top code magnitude.
    pub fn scales(&self) -> Vec<f32> {
        let top = self.scheme.top_code() as f32;
        self.absmax.iter().map(|a| a / top).collect()
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    /// Signed integer codes for linear schemes, codebook indices for NF4.
    pub fn codes(&self) -> Vec<i32> {
        match self.scheme {
            QuantScheme::Int8Row => self.codes.iter().map(|&b| b as i8 as i32).collect(),
            QuantScheme::Int4Block => unpack_nibbles(&self.codes, self.rows * self.cols)
                .into_iter()
                .map(|n| n as i32 - 8)
                .collect(),
            QuantScheme::Nf4Block => unpack_nibbles(&self.codes, self.rows * self.cols)
                .into_iter()
                .map(|n| n as i32)
                .collect(),
        }
    }

    /// Dequantizes flat entries `[start, start + out.len())` into `out`.
    fn decode_range(&self, start: usize, out: &mut [f32], book: &[f32; 16]) {
        match self.scheme {
            QuantScheme::Int8Row => {
                for (k, o) in out.iter_mut().enumerate() {
                    let idx = start + k;
                    let a = self.absmax[idx / self.cols];
                    let c = self.codes[idx] as i8 as f32;
                    *o = a * (c / 127.0);
                }
            }
            QuantScheme::Int4Block | QuantScheme::Nf4Block => {
                for (k, o) in out.iter_mut().enumerate() {
                    let idx = start + k;
                    let a = self.absmax[idx / self.block_size];
                    let byte = self.codes[idx / 2];
                    let nib = if idx.is_multiple_of(2) { byte & 0x0f } else { byte >> 4 };
                    *o = if self.scheme == QuantScheme::Int4Block {
                        a * ((nib as i32 - 8) as f32 / 7.0)
                    } else {
                        a * book[nib as usize]
                    };
                }
            }
        }
    }

    pub fn dequantize<F: Real>(&self) -> Tensor<F> {
        let book = nf4_codebook();
        let mut flat = vec![0.0f32; self.rows * self.cols];
        self.decode_range(0, &mut flat, &book);
        Tensor::new(
            vec![self.rows, self.cols],
            flat.into_iter().map(|v| F::of(v as f64)).collect(),
        )
        .expect("dequantize shape")
    }

    /// `Q · x` for `x: [cols, n]`, decoding one row of codes at a time.
    pub fn qmatmul<F: Real>(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.shape().len() != 2 || x.rows() != self.cols {
            return Err(QuantError::Shape {
                rows: self.rows,
                cols: self.cols,
                other: x.shape().to_vec(),
            });
        }
        let n = x.cols();
        let book = nf4_codebook();
        let mut row32 = vec![0.0f32; self.cols];
        let mut row = vec![F::zero(); self.cols];
        let mut out = vec![F::zero(); self.rows * n];
        for i in 0..self.rows {
            self.decode_range(i * self.cols, &mut row32, &book);
            for (r, &v) in row.iter_mut().zip(&row32) {
                *r = F::of(v as f64);
            }
            kernels::gemm(1, self.cols, n, &row, x.data(), &mut out[i * n..(i + 1) * n]);
        }
        Ok(Tensor::new(vec![self.rows, n], out).expect("qmatmul shape"))
    }

    /// `x · Qᵀ` for `x: [n, cols]`, the row-activation layout used by layers.
    pub fn qmatmul_rows<F: Real>(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.shape().len() != 2 || x.cols() != self.cols {
            return Err(QuantError::Shape {
                rows: self.rows,
                cols: self.cols,
                other: x.shape().to_vec(),
            });
        }
        let w: Tensor<F> = self.dequantize();
        Ok(FrozenLinear::forward_rows(&w, x))
    }
}

/// Lets a quantized matrix act as a frozen graph weight in precision `F`.
/// The forward pass goes through [`QuantizedMatrix::qmatmul_rows`]; nothing
/// dense is kept between calls.
pub struct QuantizedLinear(pub Arc<QuantizedMatrix>);

impl<F: Real> FrozenLinear<F> for QuantizedLinear {
    fn out_dim(&self) -> usize {
        self.0.rows
    }

    fn in_dim(&self) -> usize {
        self.0.cols
    }

    fn forward_rows(&self, x: &Tensor<F>) -> Tensor<F> {
        self.0.qmatmul_rows(x).expect("shape checked by the graph")
    }

    fn backward_rows(&self, g: &Tensor<F>) -> Tensor<F> {
        let w: Tensor<F> = self.0.dequantize();
        FrozenLinear::backward_rows(&w, g)
    }
}
