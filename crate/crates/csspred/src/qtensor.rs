//! Power-of-two int8 tensors and the exact integer attention reference.
//!
//! All quantized tensors carry a power-of-two scale exponent: the real
//! value of an element is `data[i] * 2^scale`. Keeping scales in the
//! exponent domain means every rescaling step is a shift, so the whole
//! integer pipeline is bit-exact and platform independent.
//!
//! Rounding is half-away-from-zero everywhere, including the shift-based
//! requantizer. Accumulators are 32-bit; with 8-bit operands that allows
//! inner dimensions up to 1024 without overflow.

use crate::costmodel::{CostReport, Event, Stage};
use crate::error::{Error, Result};

/// Largest supported inner dimension for 8-bit matmuls into i32.
pub const MAX_INNER_DIM: usize = 1024;

/// Row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Row-major i8 matrix with a power-of-two scale exponent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantTensor8 {
    pub rows: usize,
    pub cols: usize,
    /// Real value = data * 2^scale.
    pub scale: i32,
    pub data: Vec<i8>,
}

/// Row-major i32 accumulator matrix with a power-of-two scale exponent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccumTensor32 {
    pub rows: usize,
    pub cols: usize,
    pub scale: i32,
    pub data: Vec<i32>,
}

/// Exact-reference attention artifacts: integer scores, float probs and output.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub scores: AccumTensor32,
    pub probs: FloatTensor,
    pub output: FloatTensor,
}

impl FloatTensor {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        FloatTensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        FloatTensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Plain float matmul with fixed left-to-right summation.
    pub fn matmul(&self, other: &FloatTensor) -> Result<FloatTensor> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "float matmul",
                left: (self.rows, self.cols),
                right: (other.rows, other.cols),
            });
        }
        let mut out = FloatTensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.at(i, k) * other.at(k, j);
                }
                out.data[i * other.cols + j] = acc;
            }
        }
        Ok(out)
    }
}

impl QuantTensor8 {
    pub fn from_vec(rows: usize, cols: usize, scale: i32, data: Vec<i8>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        QuantTensor8 { rows, cols, scale, data }
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> i8 {
        self.data[r * self.cols + c]
    }

    pub fn transposed(&self) -> QuantTensor8 {
        let mut data = vec![0i8; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.at(r, c);
            }
        }
        QuantTensor8 { rows: self.cols, cols: self.rows, scale: self.scale, data }
    }

    pub fn dequantize(&self) -> FloatTensor {
        let f = pow2(self.scale);
        FloatTensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v as f64 * f).collect(),
        }
    }
}

impl AccumTensor32 {
    pub fn from_vec(rows: usize, cols: usize, scale: i32, data: Vec<i32>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        AccumTensor32 { rows, cols, scale, data }
    }

    pub fn row(&self, r: usize) -> &[i32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }

    pub fn dequantize(&self) -> FloatTensor {
        let f = pow2(self.scale);
        FloatTensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v as f64 * f).collect(),
        }
    }
}

/// 2^e as f64, exact over the exponent range used here.
pub fn pow2(e: i32) -> f64 {
    (2.0f64).powi(e)
}

/// Number of bits needed for the magnitude `v` (0 for 0).
pub fn bitwidth(v: u32) -> u32 {
    32 - v.leading_zeros()
}

/// Shift `v` right by `s` with half-away-from-zero rounding of the
/// discarded bits. `s == 0` is the identity.
pub fn shift_round_half_away(v: i64, s: u32) -> i64 {
    if s == 0 {
        return v;
    }
    let half = 1i64 << (s - 1);
    let mag = (v.unsigned_abs() as i64 + half) >> s;
    if v < 0 { -mag } else { mag }
}

/// Quantize to int8 with a per-tensor power-of-two scale.
///
/// The scale exponent is the smallest `s` with `max|t| <= 128 * 2^s`, so
/// the largest magnitude lands in (64, 128]; a rounded 128 clamps to 127.
/// Clamping is symmetric: -128 is never emitted.
pub fn quantize(t: &FloatTensor) -> Result<QuantTensor8> {
    if t.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("quantize: non-finite input".into()));
    }
    let max = t.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if max == 0.0 {
        return Ok(QuantTensor8 {
            rows: t.rows,
            cols: t.cols,
            scale: 0,
            data: vec![0i8; t.data.len()],
        });
    }
    let mut s = (max.log2().ceil() as i32) - 7;
    // log2 is not guaranteed correctly rounded at boundaries; nudge to the
    // exact minimum.
    while max > 128.0 * pow2(s) {
        s += 1;
    }
    while max <= 128.0 * pow2(s - 1) {
        s -= 1;
    }
    let inv = pow2(-s);
    let data = t
        .data
        .iter()
        .map(|&v| {
            let q = (v * inv).round();
            q.clamp(-127.0, 127.0) as i8
        })
        .collect();
    Ok(QuantTensor8 { rows: t.rows, cols: t.cols, scale: s, data })
}

/// Exact i8 x i8 -> i32 matmul. Result scale is the sum of operand scales.
pub fn matmul_exact(a: &QuantTensor8, b: &QuantTensor8) -> Result<AccumTensor32> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul_exact",
            left: (a.rows, a.cols),
            right: (b.rows, b.cols),
        });
    }
    if a.cols > MAX_INNER_DIM {
        return Err(Error::InvalidConfig(format!(
            "matmul_exact: inner dimension {} exceeds {}",
            a.cols, MAX_INNER_DIM
        )));
    }
    let mut out = vec![0i32; a.rows * b.cols];
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.cols {
            let mut acc: i32 = 0;
            for (k, &av) in arow.iter().enumerate() {
                acc += av as i32 * b.at(k, j) as i32;
            }
            out[i * b.cols + j] = acc;
        }
    }
    Ok(AccumTensor32 {
        rows: a.rows,
        cols: b.cols,
        scale: a.scale + b.scale,
        data: out,
    })
}

/// `matmul_exact` with cost instrumentation: one 8x8 multiply per inner
/// product term and one 16-bit add per accumulation step.
pub fn matmul_counted(
    a: &QuantTensor8,
    b: &QuantTensor8,
    stage: Stage,
    sink: &mut CostReport,
) -> Result<AccumTensor32> {
    let out = matmul_exact(a, b)?;
    let terms = (a.rows * b.cols * a.cols) as u64;
    let adds = (a.rows * b.cols * a.cols.saturating_sub(1)) as u64;
    sink.record(stage, Event::Mult { a_bits: 8, b_bits: 8 }, terms);
    sink.record(stage, Event::Add { bits: 16 }, adds);
    Ok(out)
}

/// Narrow a 32-bit accumulator tensor back to int8 by a power-of-two shift.
///
/// The shift is `max(0, bitwidth(max|t|) - 7)`; discarded bits round
/// half-away-from-zero and the scale exponent grows by the shift. A
/// rounded magnitude of 128 clamps to 127.
pub fn requantize_pow2(t: &AccumTensor32) -> QuantTensor8 {
    let max = t.data.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
    let s = bitwidth(max).saturating_sub(7);
    let data = t
        .data
        .iter()
        .map(|&v| shift_round_half_away(v as i64, s).clamp(-127, 127) as i8)
        .collect();
    QuantTensor8 {
        rows: t.rows,
        cols: t.cols,
        scale: t.scale + s as i32,
        data,
    }
}

/// Row-wise softmax with max subtraction, left-to-right summation.
pub fn softmax_rows(t: &FloatTensor) -> FloatTensor {
    let mut out = FloatTensor::zeros(t.rows, t.cols);
    for r in 0..t.rows {
        let row = t.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        for (c, &v) in row.iter().enumerate() {
            out.data[r * t.cols + c] = (v - max).exp() / denom;
        }
    }
    out
}

/// Exact integer attention reference.
///
/// Q, K, V are exact 32-bit matmul results; Q and K narrow to int8 before
/// the score matmul so scores stay exactly representable in 32 bits. The
/// probability and output stages run in f64 with `1/sqrt(d_k)` applied to
/// the dequantized scores.
pub fn attention_ref(
    x: &QuantTensor8,
    wq: &QuantTensor8,
    wk: &QuantTensor8,
    wv: &QuantTensor8,
    d_k: usize,
) -> Result<AttentionOutput> {
    let q32 = matmul_exact(x, wq)?;
    let k32 = matmul_exact(x, wk)?;
    let v32 = matmul_exact(x, wv)?;
    let q8 = requantize_pow2(&q32);
    let k8 = requantize_pow2(&k32);
    let scores = matmul_exact(&q8, &k8.transposed())?;
    let inv_sqrt = 1.0 / (d_k as f64).sqrt();
    let mut scaled = scores.dequantize();
    for v in scaled.data.iter_mut() {
        *v *= inv_sqrt;
    }
    let probs = softmax_rows(&scaled);
    let output = probs.matmul(&v32.dequantize())?;
    Ok(AttentionOutput { scores, probs, output })
}
