//! On-disk container for tensors plus the text mask export.
//!
//! The container is a fixed 16-byte little-endian header followed by a
//! row-major payload:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "QT8\0"
//! 4       1     dtype tag: 0 = i8, 1 = i32, 2 = f64, 3 = LO1 code bytes
//! 5       1     scale exponent (i8; 0 for f64)
//! 6       2     reserved, must be zero
//! 8       4     rows (u32)
//! 12      4     cols (u32)
//! ```
//!
//! Payload element sizes are 1 (i8), 4 (i32 LE), 8 (f64 LE bits) and
//! 1 (packed leading-one code byte). Every field is validated on read;
//! any mismatch is a format error, not a silent reinterpretation.

use crate::error::{Error, Result};
use crate::locodec::{LoCode, LoTensor};
use crate::css::SparsityMask;
use crate::qtensor::{AccumTensor32, FloatTensor, QuantTensor8};
use std::io::{Read, Write};

const MAGIC: [u8; 4] = *b"QT8\0";
const TAG_I8: u8 = 0;
const TAG_I32: u8 = 1;
const TAG_F64: u8 = 2;
const TAG_LO1: u8 = 3;
/// Upper bound on elements accepted from a header, to fail fast on
/// corrupt sizes instead of attempting a huge allocation.
const MAX_ELEMS: u64 = 1 << 26;

fn tag_name(tag: u8) -> &'static str {
    match tag {
        TAG_I8 => "i8",
        TAG_I32 => "i32",
        TAG_F64 => "f64",
        TAG_LO1 => "lo1",
        _ => "unknown",
    }
}

fn write_header(w: &mut impl Write, tag: u8, scale: i32, rows: usize, cols: usize) -> Result<()> {
    let scale8 = i8::try_from(scale)
        .map_err(|_| Error::Format(format!("scale exponent {scale} out of i8 range")))?;
    let rows32 = u32::try_from(rows)
        .map_err(|_| Error::Format(format!("rows {rows} out of u32 range")))?;
    let cols32 = u32::try_from(cols)
        .map_err(|_| Error::Format(format!("cols {cols} out of u32 range")))?;
    w.write_all(&MAGIC)?;
    w.write_all(&[tag, scale8 as u8, 0, 0])?;
    w.write_all(&rows32.to_le_bytes())?;
    w.write_all(&cols32.to_le_bytes())?;
    Ok(())
}

fn read_header(r: &mut impl Read, want_tag: u8) -> Result<(i32, usize, usize)> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)?;
    if head[0..4] != MAGIC {
        return Err(Error::Format("bad magic, not a QT8 container".into()));
    }
    let tag = head[4];
    if tag != want_tag {
        return Err(Error::Format(format!(
            "dtype mismatch: file holds {}, expected {}",
            tag_name(tag),
            tag_name(want_tag)
        )));
    }
    if head[6] != 0 || head[7] != 0 {
        return Err(Error::Format("reserved header bytes must be zero".into()));
    }
    let scale = head[5] as i8 as i32;
    let rows = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    let elems = rows as u64 * cols as u64;
    if elems > MAX_ELEMS {
        return Err(Error::Format(format!("element count {elems} exceeds limit {MAX_ELEMS}")));
    }
    Ok((scale, rows, cols))
}

pub fn write_quant8(w: &mut impl Write, t: &QuantTensor8) -> Result<()> {
    write_header(w, TAG_I8, t.scale, t.rows, t.cols)?;
    let bytes: Vec<u8> = t.data.iter().map(|&v| v as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_quant8(r: &mut impl Read) -> Result<QuantTensor8> {
    let (scale, rows, cols) = read_header(r, TAG_I8)?;
    let mut bytes = vec![0u8; rows * cols];
    r.read_exact(&mut bytes)?;
    let data = bytes.into_iter().map(|b| b as i8).collect();
    Ok(QuantTensor8 { rows, cols, scale, data })
}

pub fn write_accum32(w: &mut impl Write, t: &AccumTensor32) -> Result<()> {
    write_header(w, TAG_I32, t.scale, t.rows, t.cols)?;
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_accum32(r: &mut impl Read) -> Result<AccumTensor32> {
    let (scale, rows, cols) = read_header(r, TAG_I32)?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut buf = [0u8; 4];
    for _ in 0..rows * cols {
        r.read_exact(&mut buf)?;
        data.push(i32::from_le_bytes(buf));
    }
    Ok(AccumTensor32 { rows, cols, scale, data })
}

pub fn write_float64(w: &mut impl Write, t: &FloatTensor) -> Result<()> {
    write_header(w, TAG_F64, 0, t.rows, t.cols)?;
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_float64(r: &mut impl Read) -> Result<FloatTensor> {
    let (scale, rows, cols) = read_header(r, TAG_F64)?;
    if scale != 0 {
        return Err(Error::Format("f64 container must carry scale 0".into()));
    }
    let mut data = Vec::with_capacity(rows * cols);
    let mut buf = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Ok(FloatTensor { rows, cols, data })
}

pub fn write_lotensor(w: &mut impl Write, t: &LoTensor) -> Result<()> {
    write_header(w, TAG_LO1, t.scale, t.rows, t.cols)?;
    let bytes: Vec<u8> = t.codes.iter().map(|c| c.to_byte()).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_lotensor(r: &mut impl Read) -> Result<LoTensor> {
    let (scale, rows, cols) = read_header(r, TAG_LO1)?;
    let mut bytes = vec![0u8; rows * cols];
    r.read_exact(&mut bytes)?;
    let mut codes = Vec::with_capacity(bytes.len());
    for b in bytes {
        codes.push(LoCode::from_byte(b)?);
    }
    Ok(LoTensor { rows, cols, scale, codes })
}

/// Text export of a sparsity mask: one `row <i>: <indices>` line per
/// query, a blank separator, then the dense 0/1 matrix.
pub fn write_mask_text(w: &mut impl Write, mask: &SparsityMask) -> Result<()> {
    for (i, keys) in mask.selected.iter().enumerate() {
        let list: Vec<String> = keys.iter().map(|k| k.to_string()).collect();
        writeln!(w, "row {}: {}", i, list.join(" "))?;
    }
    writeln!(w)?;
    for keys in &mask.selected {
        let mut dense = vec![0u8; mask.cols];
        for &k in keys {
            dense[k] = 1;
        }
        let line: Vec<String> = dense.iter().map(|b| b.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}
