//! Competing predictors used as accuracy and cost referees.
//!
//! Each baseline has a fixed, documented event profile so cost
//! comparisons under shared weights are apples-to-apples:
//!
//! * `SymmetricLo` — both operands pass through leading-one detection in
//!   the datapath (two 8-bit LOE events per operand pair), the exponents
//!   add (4-bit add), and the decoded power-of-two lands in the
//!   accumulator through a 14-bit shift. Weights load at full 8 bits.
//! * `Msb4` — exact int8 Q/K generation (8x8 multiplies), then score
//!   speculation on the top 4 bits of each operand (4x4 multiplies) with
//!   a static global threshold for selection.
//! * `TopK` — exact int8 Q/K generation and exact 8-bit score
//!   speculation, selecting the k best keys per row by sort.
//! * `Oracle` — dynamic-threshold selection applied to the exact scores;
//!   defines ground truth for recall and records no cost.
//!
//! The up-scaling shift that aligns 4-bit score magnitudes for display is
//! bookkeeping, not hardware, and is never recorded.

use crate::costmodel::{CostReport, Event, Stage};
use crate::css::{ddf_select, ddf_threshold, CssConfig, SparsityMask, ACC_BITS, SHIFT8_BITS};
use crate::error::{Error, Result};
use crate::locodec::{loe_tensor, LoCode, LoTensor};
use crate::qtensor::{matmul_counted, requantize_pow2, AccumTensor32, QuantTensor8};
use serde::{Deserialize, Serialize};

/// Which baseline pipeline to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    SymmetricLo,
    Msb4,
    TopK,
    Oracle,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] =
        [BaselineKind::SymmetricLo, BaselineKind::Msb4, BaselineKind::TopK, BaselineKind::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::SymmetricLo => "symmetric-lo",
            BaselineKind::Msb4 => "msb4",
            BaselineKind::TopK => "topk",
            BaselineKind::Oracle => "oracle",
        }
    }
}

/// Symmetric log-domain multiply: both operands coded, magnitudes
/// collapse to `2^(lo_x + lo_y)`.
pub fn symmetric_lo_mul(x: LoCode, y: LoCode) -> i32 {
    match (x, y) {
        (LoCode::Zero, _) | (_, LoCode::Zero) => 0,
        (
            LoCode::Nonzero { negative: nx, lo: lx },
            LoCode::Nonzero { negative: ny, lo: ly },
        ) => {
            let mag = 1i32 << (lx + ly);
            if nx ^ ny {
                -mag
            } else {
                mag
            }
        }
    }
}

/// Score speculation from the top 4 bits of 8-bit Q/K: arithmetic shift
/// right by 4 on both operands, exact 4x4 matmul, result re-aligned by
/// 8 bits for comparability with full-precision scores.
pub fn msb4_predict(q8: &QuantTensor8, k8: &QuantTensor8) -> Result<AccumTensor32> {
    if q8.cols != k8.cols {
        return Err(Error::ShapeMismatch {
            op: "msb4_predict",
            left: (q8.rows, q8.cols),
            right: (k8.rows, k8.cols),
        });
    }
    let s = q8.rows;
    let n = k8.rows;
    let h = q8.cols;
    let mut data = vec![0i32; s * n];
    for i in 0..s {
        let qrow = q8.row(i);
        for j in 0..n {
            let krow = k8.row(j);
            let mut acc = 0i32;
            for k in 0..h {
                acc += (qrow[k] as i32 >> 4) * (krow[k] as i32 >> 4);
            }
            data[i * n + j] = acc << 8;
        }
    }
    Ok(AccumTensor32 { rows: s, cols: n, scale: q8.scale + k8.scale, data })
}

/// Per-row top-k selection; ties break toward the lower key index and
/// `k` clamps to `[1, cols]`.
pub fn topk_select(scores: &AccumTensor32, k: usize) -> SparsityMask {
    let k = k.clamp(1, scores.cols);
    let mut selected = Vec::with_capacity(scores.rows);
    for r in 0..scores.rows {
        let row = scores.row(r);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].cmp(&row[a]).then(a.cmp(&b)));
        let mut keep: Vec<usize> = order[..k].to_vec();
        keep.sort_unstable();
        selected.push(keep);
    }
    SparsityMask { rows: scores.rows, cols: scores.cols, selected, round_history: None }
}

/// Global static threshold selection: keep `score >= theta`, with the
/// row argmax forced in so no row goes empty.
pub fn static_threshold_mask(scores: &AccumTensor32, theta: i64) -> SparsityMask {
    let mut selected = Vec::with_capacity(scores.rows);
    for r in 0..scores.rows {
        let row = scores.row(r);
        let max = *row.iter().max().expect("non-empty score row");
        let argmax = row.iter().position(|&v| v == max).unwrap();
        let mut keep: Vec<usize> = row
            .iter()
            .enumerate()
            .filter(|(_, &v)| v as i64 >= theta)
            .map(|(j, _)| j)
            .collect();
        if keep.is_empty() {
            keep.push(argmax);
        }
        selected.push(keep);
    }
    SparsityMask { rows: scores.rows, cols: scores.cols, selected, round_history: None }
}

/// Ground-truth mask: the dynamic threshold schedule applied per round to
/// the exact scores (full precision in every round, survivors narrowing).
pub fn oracle_mask(exact_scores: &AccumTensor32, cfg: &CssConfig) -> Result<SparsityMask> {
    cfg.validate()?;
    let mut selected = Vec::with_capacity(exact_scores.rows);
    for i in 0..exact_scores.rows {
        let row = exact_scores.row(i);
        let mut survivors: Vec<usize> = (0..row.len()).collect();
        for r in 0..cfg.rounds {
            let partials: Vec<i32> = survivors.iter().map(|&j| row[j]).collect();
            let phi10 = ddf_threshold(&partials, cfg.eta_tenths[r])?;
            let keep = ddf_select(&partials, phi10);
            survivors = keep.iter().map(|&slot| survivors[slot]).collect();
        }
        selected.push(survivors);
    }
    Ok(SparsityMask {
        rows: exact_scores.rows,
        cols: exact_scores.cols,
        selected,
        round_history: None,
    })
}

// ---- counted speculation pipelines ----------------------------------------

/// Symmetric log-domain matmul with the FACT-style per-pair event
/// profile: 2 LOE, one 4-bit exponent add and one 14-bit decode shift per
/// term, 14-bit accumulation adds.
fn symmetric_matmul_counted(
    a_codes: &LoTensor,
    b_codes_t: &LoTensor,
    scale: i32,
    sink: &mut CostReport,
) -> AccumTensor32 {
    let rows = a_codes.rows;
    let cols = b_codes_t.rows;
    let inner = a_codes.cols;
    assert_eq!(inner, b_codes_t.cols, "symmetric matmul: inner dim");
    let mut data = vec![0i32; rows * cols];
    for i in 0..rows {
        let arow = a_codes.row(i);
        for j in 0..cols {
            let brow = b_codes_t.row(j);
            let mut acc = 0i32;
            for k in 0..inner {
                acc += symmetric_lo_mul(arow[k], brow[k]);
            }
            data[i * cols + j] = acc;
        }
    }
    let terms = (rows * cols * inner) as u64;
    let adds = (rows * cols * (inner - 1)) as u64;
    sink.record(Stage::Speculation, Event::Loe { bits: 8 }, 2 * terms);
    sink.record(Stage::Speculation, Event::Add { bits: 4 }, terms);
    sink.record(Stage::Speculation, Event::Shift { bits: SHIFT8_BITS }, terms);
    sink.record(Stage::Speculation, Event::Add { bits: SHIFT8_BITS }, adds);
    AccumTensor32 { rows, cols, scale, data }
}

/// Speculative scores for the symmetric-LO baseline: both projection and
/// scoring run in the symmetric log domain; weights load at 8 bits.
pub fn symmetric_scores(
    x: &QuantTensor8,
    wq: &QuantTensor8,
    wk: &QuantTensor8,
    sink: &mut CostReport,
) -> Result<AccumTensor32> {
    if x.cols != wq.rows || x.cols != wk.rows {
        return Err(Error::ShapeMismatch {
            op: "symmetric_scores",
            left: (x.rows, x.cols),
            right: (wq.rows, wq.cols),
        });
    }
    sink.record(
        Stage::Speculation,
        Event::Mem { bits: 8 },
        (wq.rows * wq.cols + wk.rows * wk.cols) as u64,
    );
    let x_codes = loe_tensor(x);
    let q32 = symmetric_matmul_counted(
        &x_codes,
        &loe_tensor(wq).transposed(),
        x.scale + wq.scale,
        sink,
    );
    let k32 = symmetric_matmul_counted(
        &x_codes,
        &loe_tensor(wk).transposed(),
        x.scale + wk.scale,
        sink,
    );
    let q8 = requantize_pow2(&q32);
    let k8 = requantize_pow2(&k32);
    sink.record(
        Stage::Speculation,
        Event::Shift { bits: ACC_BITS },
        (q32.data.len() + k32.data.len()) as u64,
    );
    let scores = symmetric_matmul_counted(
        &loe_tensor(&q8),
        &loe_tensor(&k8),
        q8.scale + k8.scale,
        sink,
    );
    Ok(scores)
}

/// Speculative scores for the 4-bit MSB baseline: exact counted Q/K
/// projection, int8 narrowing, then 4x4 score multiplies.
pub fn msb4_scores(
    x: &QuantTensor8,
    wq: &QuantTensor8,
    wk: &QuantTensor8,
    sink: &mut CostReport,
) -> Result<AccumTensor32> {
    sink.record(
        Stage::Speculation,
        Event::Mem { bits: 8 },
        (wq.rows * wq.cols + wk.rows * wk.cols) as u64,
    );
    let q32 = matmul_counted(x, wq, Stage::Speculation, sink)?;
    let k32 = matmul_counted(x, wk, Stage::Speculation, sink)?;
    let q8 = requantize_pow2(&q32);
    let k8 = requantize_pow2(&k32);
    sink.record(
        Stage::Speculation,
        Event::Shift { bits: ACC_BITS },
        (q32.data.len() + k32.data.len()) as u64,
    );
    // Truncation to the top nibble, then 4x4 score terms.
    sink.record(
        Stage::Speculation,
        Event::Shift { bits: 8 },
        (q8.data.len() + k8.data.len()) as u64,
    );
    let scores = msb4_predict(&q8, &k8)?;
    let terms = (q8.rows * k8.rows * q8.cols) as u64;
    let adds = (q8.rows * k8.rows * (q8.cols - 1)) as u64;
    sink.record(Stage::Speculation, Event::Mult { a_bits: 4, b_bits: 4 }, terms);
    sink.record(Stage::Speculation, Event::Add { bits: 8 }, adds);
    Ok(scores)
}

/// Speculative scores for the full-precision top-k baseline: exact
/// counted Q/K projection and exact 8-bit score matmul.
pub fn exact_scores_counted(
    x: &QuantTensor8,
    wq: &QuantTensor8,
    wk: &QuantTensor8,
    sink: &mut CostReport,
) -> Result<AccumTensor32> {
    sink.record(
        Stage::Speculation,
        Event::Mem { bits: 8 },
        (wq.rows * wq.cols + wk.rows * wk.cols) as u64,
    );
    let q32 = matmul_counted(x, wq, Stage::Speculation, sink)?;
    let k32 = matmul_counted(x, wk, Stage::Speculation, sink)?;
    let q8 = requantize_pow2(&q32);
    let k8 = requantize_pow2(&k32);
    sink.record(
        Stage::Speculation,
        Event::Shift { bits: ACC_BITS },
        (q32.data.len() + k32.data.len()) as u64,
    );
    let scores = matmul_counted(&q8, &k8.transposed(), Stage::Speculation, sink)?;
    Ok(scores)
}

/// Selection cost of a per-row sort-based top-k: `n * ceil(log2 n)`
/// compares per row.
pub fn record_topk_cost(rows: usize, n: usize, sink: &mut CostReport) {
    let logn = (usize::BITS - n.next_power_of_two().leading_zeros() - 1) as u64;
    sink.record(
        Stage::Selection,
        Event::Compare { bits: ACC_BITS },
        rows as u64 * n as u64 * logn.max(1),
    );
}

/// Selection cost of a static global threshold: one compare per score
/// plus an argmax scan per row for the fallback.
pub fn record_static_threshold_cost(rows: usize, n: usize, sink: &mut CostReport) {
    sink.record(Stage::Selection, Event::Compare { bits: ACC_BITS }, (rows * n) as u64);
    sink.record(
        Stage::Selection,
        Event::Compare { bits: ACC_BITS },
        (rows * (n - 1)) as u64,
    );
}
