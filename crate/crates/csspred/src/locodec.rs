//! Leading-one codes: sign + leading-one position, with the asymmetric
//! shift-multiply built on them.
//!
//! A nonzero value `y` is summarized as `sign(y) * 2^lo(y)` where `lo` is
//! the index of the highest set bit of `|y|`. The approximate multiply
//! keeps one operand `x` at full precision and replaces the other by its
//! code: `x * y ~= (negative ? -x : x) << lo`. Only one side is ever
//! converted, the full mantissa of `x` survives, and a stored code needs
//! just 5 bits (sign + 4-bit position).
//!
//! The sign is pre-assigned: the shifter input is `x` or `-x` depending on
//! the code's sign, which is identical to negating after the shift.

use crate::error::{Error, Result};
use crate::qtensor::{bitwidth, QuantTensor8};

/// Sign and leading-one position of one operand; zero is explicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoCode {
    Zero,
    Nonzero { negative: bool, lo: u8 },
}

impl LoCode {
    pub fn is_zero(self) -> bool {
        matches!(self, LoCode::Zero)
    }

    /// Pack into the serialized byte layout: bit 7 zero-flag, bit 6 sign
    /// (1 = negative), bits 5..4 reserved zero, bits 3..0 position.
    pub fn to_byte(self) -> u8 {
        match self {
            LoCode::Zero => 0x80,
            LoCode::Nonzero { negative, lo } => {
                debug_assert!(lo < 16);
                ((negative as u8) << 6) | (lo & 0x0f)
            }
        }
    }

    /// Unpack from the serialized byte layout; reserved bits must be zero
    /// and a set zero-flag clears sign and position.
    pub fn from_byte(b: u8) -> Result<LoCode> {
        if b & 0x30 != 0 {
            return Err(Error::Format(format!("lo code byte {b:#04x}: reserved bits set")));
        }
        if b & 0x80 != 0 {
            if b != 0x80 {
                return Err(Error::Format(format!(
                    "lo code byte {b:#04x}: zero flag with nonzero payload"
                )));
            }
            return Ok(LoCode::Zero);
        }
        Ok(LoCode::Nonzero { negative: b & 0x40 != 0, lo: b & 0x0f })
    }
}

/// Leading-one encode of a signed value with the given source width.
///
/// For `width`-bit sources the position ranges over `[0, width-2]`, except
/// the most negative value whose magnitude is exactly `2^(width-1)` and
/// encodes with position `width-1`.
pub fn loe(y: i32, width: u32) -> LoCode {
    assert!((2..=31).contains(&width), "loe: unsupported width {width}");
    assert!(
        y.unsigned_abs() <= 1u32 << (width - 1),
        "loe: |{y}| exceeds {width}-bit range"
    );
    if y == 0 {
        return LoCode::Zero;
    }
    LoCode::Nonzero {
        negative: y < 0,
        lo: (bitwidth(y.unsigned_abs()) - 1) as u8,
    }
}

/// `loe` specialized to int8 sources.
pub fn loe_i8(y: i8) -> LoCode {
    loe(y as i32, 8)
}

/// Asymmetric approximate multiply: full-precision `x` against coded `y`.
pub fn aloc_mul(x: i32, y: LoCode) -> i32 {
    match y {
        LoCode::Zero => 0,
        LoCode::Nonzero { negative, lo } => {
            let signed = if negative { -x } else { x };
            signed << lo
        }
    }
}

/// Inner product of full-precision `xs` against coded `ys`.
pub fn aloc_dot(xs: &[i8], ys: &[LoCode]) -> i32 {
    assert_eq!(xs.len(), ys.len(), "aloc_dot: length mismatch");
    assert!(xs.len() <= crate::qtensor::MAX_INNER_DIM, "aloc_dot: length over limit");
    let mut acc = 0i32;
    for (&x, &y) in xs.iter().zip(ys.iter()) {
        acc += aloc_mul(x as i32, y);
    }
    acc
}

/// Row-major matrix of leading-one codes with the source tensor's scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoTensor {
    pub rows: usize,
    pub cols: usize,
    /// Scale exponent inherited from the encoded tensor.
    pub scale: i32,
    pub codes: Vec<LoCode>,
}

impl LoTensor {
    pub fn row(&self, r: usize) -> &[LoCode] {
        &self.codes[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> LoCode {
        self.codes[r * self.cols + c]
    }

    pub fn transposed(&self) -> LoTensor {
        let mut codes = vec![LoCode::Zero; self.codes.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                codes[c * self.rows + r] = self.at(r, c);
            }
        }
        LoTensor { rows: self.cols, cols: self.rows, scale: self.scale, codes }
    }
}

/// Elementwise leading-one encode of an int8 tensor.
pub fn loe_tensor(t: &QuantTensor8) -> LoTensor {
    LoTensor {
        rows: t.rows,
        cols: t.cols,
        scale: t.scale,
        codes: t.data.iter().map(|&v| loe_i8(v)).collect(),
    }
}
