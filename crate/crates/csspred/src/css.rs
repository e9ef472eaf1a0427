//! Cross-stage sparsity prediction: speculate approximate Q/K from the
//! input, score query/key pairs in rounds of increasing key precision,
//! and keep only pairs that clear a per-row dynamic threshold.
//!
//! Round `r` consumes the next `nibble_schedule[r]` bits of every
//! surviving key element (most-significant slice first, signed; later
//! slices unsigned) and folds them into the running partial score:
//!
//! ```text
//! partial' = (partial << width_r) + sum_k aloc_mul(slice_r(K[j,k]), q_code[i,k])
//! ```
//!
//! After the last round the partial equals the full 8-bit shift-multiply
//! score exactly, so early rounds are free to prune on coarse scores
//! without changing what survivors ultimately see.
//!
//! Thresholds are scale-free: `phi = max - eta * (max - min)` over the
//! current survivors, computed in tenths so the whole pipeline stays in
//! integers. Selection keeps `score >= phi`, which guarantees the row
//! argmax always survives.

use crate::costmodel::{CostReport, Event, Stage};
use crate::error::{Error, Result};
use crate::locodec::{aloc_dot, aloc_mul, loe_tensor, LoCode, LoTensor};
use crate::qtensor::{requantize_pow2, AccumTensor32, QuantTensor8};

/// Width of the shifter that applies a code to a full 8-bit operand:
/// 8 magnitude bits plus the maximum in-range shift of 6.
pub const SHIFT8_BITS: u16 = 14;

/// Width attributed to accumulator-side bookkeeping ops (folds, requant
/// narrowing, threshold arithmetic) — the simulator's accumulator width.
pub const ACC_BITS: u16 = 32;

/// Shifter width for a `w`-bit key slice applied through a code.
pub fn slice_shift_bits(w: u8) -> u16 {
    w as u16 + 6
}

/// Per-round configuration of the predictor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CssConfig {
    /// Number of refinement rounds R.
    pub rounds: usize,
    /// Threshold aggressiveness per round, in tenths (0..=10).
    pub eta_tenths: Vec<u8>,
    /// Key bit-slice widths per round, most-significant first; sums to 8.
    pub nibble_schedule: Vec<u8>,
    /// Record per-round survivor totals in the mask.
    pub emit_round_stats: bool,
}

impl Default for CssConfig {
    fn default() -> Self {
        CssConfig {
            rounds: 2,
            eta_tenths: vec![5, 5],
            nibble_schedule: vec![4, 4],
            emit_round_stats: false,
        }
    }
}

impl CssConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("rounds must be >= 1".into()));
        }
        if self.eta_tenths.len() != self.rounds {
            return Err(Error::InvalidConfig(format!(
                "eta_tenths has {} entries for {} rounds",
                self.eta_tenths.len(),
                self.rounds
            )));
        }
        if let Some(&bad) = self.eta_tenths.iter().find(|&&e| e > 10) {
            return Err(Error::InvalidConfig(format!("eta tenths {bad} outside 0..=10")));
        }
        if self.nibble_schedule.len() != self.rounds {
            return Err(Error::InvalidConfig(format!(
                "nibble_schedule has {} entries for {} rounds",
                self.nibble_schedule.len(),
                self.rounds
            )));
        }
        if self.nibble_schedule.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("nibble widths must be >= 1".into()));
        }
        let sum: u32 = self.nibble_schedule.iter().map(|&w| w as u32).sum();
        if sum != 8 {
            return Err(Error::InvalidConfig(format!(
                "nibble widths sum to {sum}, expected 8"
            )));
        }
        Ok(())
    }
}

/// Survivor set and aligned partial scores for one query row.
#[derive(Debug, Clone)]
pub struct RoundState {
    /// Ascending key indices still in play.
    pub survivors: Vec<usize>,
    /// Partial scores aligned with `survivors`.
    pub partials: Vec<i32>,
}

impl RoundState {
    /// Fresh state covering every key.
    pub fn full(keys: usize) -> Self {
        RoundState { survivors: (0..keys).collect(), partials: vec![0; keys] }
    }
}

/// Final per-row key selections, ascending, at least one per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityMask {
    pub rows: usize,
    pub cols: usize,
    pub selected: Vec<Vec<usize>>,
    /// Post-selection survivor totals per round, when round stats are on.
    pub round_history: Option<Vec<u64>>,
}

impl SparsityMask {
    pub fn all_ones(rows: usize, cols: usize) -> Self {
        SparsityMask {
            rows,
            cols,
            selected: (0..rows).map(|_| (0..cols).collect()).collect(),
            round_history: None,
        }
    }

    pub fn density(&self) -> f64 {
        if self.rows == 0 || self.cols == 0 {
            return 0.0;
        }
        let kept: usize = self.selected.iter().map(|s| s.len()).sum();
        kept as f64 / (self.rows * self.cols) as f64
    }

    pub fn is_selected(&self, row: usize, col: usize) -> bool {
        self.selected[row].binary_search(&col).is_ok()
    }

    pub fn validate(&self) -> Result<()> {
        if self.selected.len() != self.rows {
            return Err(Error::Format("mask row count mismatch".into()));
        }
        for (i, sel) in self.selected.iter().enumerate() {
            if sel.is_empty() {
                return Err(Error::Format(format!("mask row {i} selects nothing")));
            }
            if !sel.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Format(format!("mask row {i} not strictly ascending")));
            }
            if *sel.last().unwrap() >= self.cols {
                return Err(Error::Format(format!("mask row {i} index out of range")));
            }
        }
        Ok(())
    }
}

/// Everything the predictor produces for one head.
#[derive(Debug, Clone)]
pub struct PredictionResult {
    pub mask: SparsityMask,
    pub q_hat: QuantTensor8,
    pub k_hat: QuantTensor8,
    /// Threshold (in score tenths) per query row per round.
    pub per_round_thresholds: Vec<Vec<i64>>,
}

/// Shift-multiply matmul: full-precision rows of `x` against coded weight
/// columns. Output scale is the sum of the operand scales.
pub fn aloc_matmul(x: &QuantTensor8, w_codes: &LoTensor) -> Result<AccumTensor32> {
    if x.cols != w_codes.rows {
        return Err(Error::ShapeMismatch {
            op: "aloc_matmul",
            left: (x.rows, x.cols),
            right: (w_codes.rows, w_codes.cols),
        });
    }
    let wt = w_codes.transposed();
    let mut data = vec![0i32; x.rows * w_codes.cols];
    for i in 0..x.rows {
        let xrow = x.row(i);
        for j in 0..w_codes.cols {
            data[i * w_codes.cols + j] = aloc_dot(xrow, wt.row(j));
        }
    }
    Ok(AccumTensor32 {
        rows: x.rows,
        cols: w_codes.cols,
        scale: x.scale + w_codes.scale,
        data,
    })
}

/// Stage 1.1: approximate Q and K via coded weights, narrowed to int8,
/// plus the leading-one codes of Q-hat for the scoring rounds.
///
/// Cost profile (speculation stage): one 14-bit shift per term, one
/// 14-bit add per accumulation step, a 5-bit code load per weight
/// element, one 32-bit narrowing shift per output element, and one 8-bit
/// leading-one detect per Q-hat element.
pub fn speculate_qk(
    x: &QuantTensor8,
    wq_codes: &LoTensor,
    wk_codes: &LoTensor,
    sink: &mut CostReport,
) -> Result<(QuantTensor8, LoTensor, QuantTensor8)> {
    let q32 = aloc_matmul(x, wq_codes)?;
    let k32 = aloc_matmul(x, wk_codes)?;

    let s = x.rows as u64;
    let h = x.cols as u64;
    let terms = s * h * wq_codes.cols as u64;
    let adds = s * wq_codes.cols as u64 * (h - 1);
    sink.record(Stage::Speculation, Event::Shift { bits: SHIFT8_BITS }, 2 * terms);
    sink.record(Stage::Speculation, Event::Add { bits: SHIFT8_BITS }, 2 * adds);
    sink.record(
        Stage::Speculation,
        Event::Mem { bits: 5 },
        (wq_codes.rows * wq_codes.cols + wk_codes.rows * wk_codes.cols) as u64,
    );
    // Narrowing both accumulators back to int8.
    sink.record(
        Stage::Speculation,
        Event::Shift { bits: ACC_BITS },
        (q32.data.len() + k32.data.len()) as u64,
    );

    let q_hat = requantize_pow2(&q32);
    let k_hat = requantize_pow2(&k32);
    sink.record(Stage::Speculation, Event::Loe { bits: 8 }, q_hat.data.len() as u64);
    let q_codes = loe_tensor(&q_hat);
    Ok((q_hat, q_codes, k_hat))
}

/// Cumulative bits consumed through round `r` (inclusive).
fn consumed_bits(schedule: &[u8], r: usize) -> u32 {
    schedule[..=r].iter().map(|&w| w as u32).sum()
}

/// Bit slice of a key element for round `r`: the most-significant slice
/// is signed two's complement, later slices are unsigned. Folding the
/// slices left-to-right reconstructs the full value exactly.
pub fn key_slice(v: i8, schedule: &[u8], r: usize) -> i32 {
    let after = consumed_bits(schedule, r);
    let prefix = (v as i32) >> (8 - after);
    if r == 0 {
        prefix
    } else {
        let before = after - schedule[r] as u32;
        let prev = (v as i32) >> (8 - before);
        prefix - (prev << schedule[r])
    }
}

/// One scoring round over the surviving keys of a single query row.
///
/// Updates each surviving partial in place:
/// `partial = (partial << width_r) + sum_k aloc_mul(slice_r(K[j,k]), q_code[k])`.
/// After the final round the partial equals `aloc_dot` of the full key
/// column bit-exactly.
pub fn mrsa_round(
    q_code_row: &[LoCode],
    k_hat: &QuantTensor8,
    state: &mut RoundState,
    r: usize,
    schedule: &[u8],
) {
    assert_eq!(q_code_row.len(), k_hat.cols, "mrsa_round: dimension mismatch");
    let width = schedule[r];
    for (slot, &j) in state.survivors.iter().enumerate() {
        let krow = k_hat.row(j);
        let mut contribution = 0i32;
        for (k, &code) in q_code_row.iter().enumerate() {
            contribution += aloc_mul(key_slice(krow[k], schedule, r), code);
        }
        state.partials[slot] = (state.partials[slot] << width) + contribution;
    }
}

/// Dynamic threshold over one round's surviving scores, in tenths:
/// `phi10 = 10*max - eta_tenths*(max - min)`.
pub fn ddf_threshold(partials: &[i32], eta_tenths: u8) -> Result<i64> {
    if partials.is_empty() {
        return Err(Error::EmptySelection("ddf_threshold"));
    }
    debug_assert!(eta_tenths <= 10);
    let max = *partials.iter().max().unwrap() as i64;
    let min = *partials.iter().min().unwrap() as i64;
    Ok(10 * max - eta_tenths as i64 * (max - min))
}

/// Positions (into `partials`) whose score clears the threshold:
/// `10*score >= phi10`. Never empty for a threshold from `ddf_threshold`.
pub fn ddf_select(partials: &[i32], phi10: i64) -> Vec<usize> {
    partials
        .iter()
        .enumerate()
        .filter(|(_, &p)| 10 * p as i64 >= phi10)
        .map(|(idx, _)| idx)
        .collect()
}

/// Full prediction: speculation, R scoring rounds with per-round
/// thresholding, and the final mask.
pub fn predict_mask(
    x: &QuantTensor8,
    wq_codes: &LoTensor,
    wk_codes: &LoTensor,
    cfg: &CssConfig,
    sink: &mut CostReport,
) -> Result<PredictionResult> {
    cfg.validate()?;
    let (q_hat, q_codes, k_hat) = speculate_qk(x, wq_codes, wk_codes, sink)?;
    let s = x.rows;
    let h = x.cols;

    let mut selected = Vec::with_capacity(s);
    let mut thresholds = Vec::with_capacity(s);
    let mut survivors_entering_round = vec![0u64; cfg.rounds];
    let mut survivors_after_round = vec![0u64; cfg.rounds];

    for i in 0..s {
        let q_code_row = q_codes.row(i);
        let mut state = RoundState::full(s);
        let mut row_thresholds = Vec::with_capacity(cfg.rounds);
        for r in 0..cfg.rounds {
            survivors_entering_round[r] += state.survivors.len() as u64;
            mrsa_round(q_code_row, &k_hat, &mut state, r, &cfg.nibble_schedule);
            let phi10 = ddf_threshold(&state.partials, cfg.eta_tenths[r])?;
            row_thresholds.push(phi10);
            let keep = ddf_select(&state.partials, phi10);
            state.survivors = keep.iter().map(|&slot| state.survivors[slot]).collect();
            state.partials = keep.iter().map(|&slot| state.partials[slot]).collect();
            survivors_after_round[r] += state.survivors.len() as u64;
        }
        thresholds.push(row_thresholds);
        selected.push(state.survivors);
    }

    // Scoring-round arithmetic, aggregated analytically from the exact
    // survivor populations (identical to counting inside the loops).
    for r in 0..cfg.rounds {
        let n = survivors_entering_round[r];
        let w = slice_shift_bits(cfg.nibble_schedule[r]);
        sink.record(Stage::Speculation, Event::Shift { bits: w }, n * h as u64);
        sink.record(Stage::Speculation, Event::Add { bits: w }, n * (h as u64 - 1));
        if r > 0 {
            // Partial fold: one shift and one add per surviving pair.
            sink.record(Stage::Speculation, Event::Shift { bits: ACC_BITS }, n);
            sink.record(Stage::Speculation, Event::Add { bits: ACC_BITS }, n);
        }
        // Selection: max and min scans, threshold arithmetic (constant
        // multiplies by 10 and eta as shift+add pairs), one compare per
        // surviving score.
        sink.record(Stage::Selection, Event::Compare { bits: ACC_BITS }, 2 * n.saturating_sub(s as u64));
        sink.record(Stage::Selection, Event::Shift { bits: ACC_BITS }, 2 * s as u64);
        sink.record(Stage::Selection, Event::Add { bits: ACC_BITS }, 2 * s as u64);
        sink.record(Stage::Selection, Event::Compare { bits: ACC_BITS }, n);
    }

    let mask = SparsityMask {
        rows: s,
        cols: s,
        selected,
        round_history: cfg.emit_round_stats.then(|| survivors_after_round.clone()),
    };
    debug_assert!(mask.validate().is_ok());
    Ok(PredictionResult { mask, q_hat, k_hat, per_round_thresholds: thresholds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::locodec::{loe_i8, loe_tensor};
    use crate::qtensor::QuantTensor8;
    use proptest::prelude::*;

    fn identity_codes(h: usize) -> LoTensor {
        let data: Vec<i8> = (0..h * h)
            .map(|idx| if idx / h == idx % h { 1 } else { 0 })
            .collect();
        loe_tensor(&QuantTensor8::from_vec(h, h, 0, data))
    }

    #[test]
    fn config_validation() {
        assert!(CssConfig::default().validate().is_ok());
        let bad_sum = CssConfig { nibble_schedule: vec![4, 3], ..CssConfig::default() };
        assert!(bad_sum.validate().is_err());
        let bad_eta = CssConfig { eta_tenths: vec![5, 11], ..CssConfig::default() };
        assert!(bad_eta.validate().is_err());
        let bad_rounds = CssConfig { rounds: 0, eta_tenths: vec![], nibble_schedule: vec![], emit_round_stats: false };
        assert!(bad_rounds.validate().is_err());
        let bad_len = CssConfig { rounds: 3, eta_tenths: vec![5, 5, 5], nibble_schedule: vec![4, 4], ..CssConfig::default() };
        assert!(bad_len.validate().is_err());
    }

    #[test]
    fn key_slice_examples() {
        // 91 = 0b0101_1011: high nibble 5, low nibble 11.
        assert_eq!(key_slice(91, &[4, 4], 0), 5);
        assert_eq!(key_slice(91, &[4, 4], 1), 11);
        // -91 = 0b1010_0101: signed high nibble -6, unsigned low nibble 5.
        assert_eq!(key_slice(-91, &[4, 4], 0), -6);
        assert_eq!(key_slice(-91, &[4, 4], 1), 5);
    }

    #[test]
    fn mrsa_fold_reconstructs_shifted_value_exhaustively() {
        // Any key value, any in-range shift, both slice schedules: after
        // the last round the folded partial equals value << lo exactly.
        for schedule in [vec![4u8, 4], vec![2, 2, 2, 2]] {
            for v in -128i32..=127 {
                for lo in 0u8..=6 {
                    for negative in [false, true] {
                        let code = LoCode::Nonzero { negative, lo };
                        let mut partial = 0i32;
                        for r in 0..schedule.len() {
                            let slice = key_slice(v as i8, &schedule, r);
                            partial = (partial << schedule[r]) + aloc_mul(slice, code);
                        }
                        assert_eq!(partial, aloc_mul(v, code), "v={v} lo={lo} neg={negative}");
                    }
                }
            }
        }
    }

    #[test]
    fn mrsa_round1_example() {
        // Single-element row: q code with shift 2, key 91, schedule [4,4].
        let k = QuantTensor8::from_vec(1, 1, 0, vec![91]);
        let codes = [loe_i8(4)]; // lo = 2
        let mut state = RoundState::full(1);
        mrsa_round(&codes, &k, &mut state, 0, &[4, 4]);
        assert_eq!(state.partials, vec![20]); // 5 << 2
        mrsa_round(&codes, &k, &mut state, 1, &[4, 4]);
        assert_eq!(state.partials, vec![364]); // 91 << 2
    }

    #[test]
    fn ddf_example_midpoint() {
        let scores = [40, -8, 16, 2];
        let phi10 = ddf_threshold(&scores, 5).unwrap();
        assert_eq!(phi10, 160);
        assert_eq!(ddf_select(&scores, phi10), vec![0, 2]);
    }

    #[test]
    fn ddf_eta_extremes() {
        let scores = [40, -8, 16, 2];
        let keep_all = ddf_select(&scores, ddf_threshold(&scores, 10).unwrap());
        assert_eq!(keep_all, vec![0, 1, 2, 3]);
        let argmax_only = ddf_select(&scores, ddf_threshold(&scores, 0).unwrap());
        assert_eq!(argmax_only, vec![0]);
        assert!(ddf_threshold(&[], 5).is_err());
    }

    #[test]
    fn ddf_constant_row_keeps_everything() {
        let scores = [7, 7, 7];
        for eta in 0..=10 {
            let phi10 = ddf_threshold(&scores, eta).unwrap();
            assert_eq!(ddf_select(&scores, phi10).len(), 3);
        }
    }

    #[test]
    fn predict_single_token_keeps_itself() {
        let x = QuantTensor8::from_vec(1, 4, 0, vec![3, -1, 2, 5]);
        let codes = identity_codes(4);
        let mut sink = CostReport::default();
        let res = predict_mask(&x, &codes, &codes, &CssConfig::default(), &mut sink).unwrap();
        assert_eq!(res.mask.selected, vec![vec![0]]);
    }

    #[test]
    fn eta_ten_selects_everything() {
        let x = QuantTensor8::from_vec(
            4,
            4,
            0,
            vec![9, -3, 7, 1, -5, 4, -2, 8, 3, 3, -9, 2, 6, -6, 1, -1],
        );
        let codes = identity_codes(4);
        let cfg = CssConfig { eta_tenths: vec![10, 10], ..CssConfig::default() };
        let mut sink = CostReport::default();
        let res = predict_mask(&x, &codes, &codes, &cfg, &mut sink).unwrap();
        for row in &res.mask.selected {
            assert_eq!(row.len(), 4);
        }
        assert!((res.mask.density() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_survivor_rounds_match_single_pass_dot() {
        // With no pruning, round-R partials must equal the one-shot
        // shift-multiply dot of the full key rows.
        let h = 8;
        let s = 6;
        let kdata: Vec<i8> = (0..s * h).map(|i| ((i * 37 + 11) % 255) as i8).collect();
        let k_hat = QuantTensor8::from_vec(s, h, 0, kdata);
        let qcodes: Vec<LoCode> = (0..h).map(|i| loe_i8(((i * 29 + 3) % 200) as i8)).collect();
        for schedule in [vec![4u8, 4], vec![2, 2, 2, 2]] {
            let mut state = RoundState::full(s);
            for r in 0..schedule.len() {
                mrsa_round(&qcodes, &k_hat, &mut state, r, &schedule);
            }
            for (slot, &j) in state.survivors.iter().enumerate() {
                assert_eq!(state.partials[slot], aloc_dot(k_hat.row(j), &qcodes));
            }
        }
    }

    #[test]
    fn speculation_records_no_multiplies() {
        let x = QuantTensor8::from_vec(2, 4, 0, vec![1, 2, 3, 4, 5, 6, 7, 8]);
        let codes = identity_codes(4);
        let mut sink = CostReport::default();
        predict_mask(&x, &codes, &codes, &CssConfig::default(), &mut sink).unwrap();
        assert_eq!(sink.count_of(crate::costmodel::Kind::Mult), 0);
        assert!(sink.stage_weighted(Stage::Speculation) > 0.0);
        // Weight codes: two 4x4 tensors at 5 bits per element.
        assert_eq!(sink.mem_bits_in(Stage::Speculation), 2 * 16 * 5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(400))]

        #[test]
        fn selection_nests_as_eta_grows(
            scores in proptest::collection::vec(-100_000i32..100_000, 1..64),
            e1 in 0u8..=10, e2 in 0u8..=10,
        ) {
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let tight = ddf_select(&scores, ddf_threshold(&scores, lo).unwrap());
            let loose = ddf_select(&scores, ddf_threshold(&scores, hi).unwrap());
            for idx in &tight {
                prop_assert!(loose.contains(idx));
            }
            // Argmax retention at any eta.
            let max = *scores.iter().max().unwrap();
            let argmax = scores.iter().position(|&v| v == max).unwrap();
            prop_assert!(tight.contains(&argmax));
        }

        #[test]
        fn selection_is_scale_invariant(
            scores in proptest::collection::vec(-60_000i32..60_000, 1..48),
            pow in 1u32..8,
        ) {
            let base = ddf_select(&scores, ddf_threshold(&scores, 5).unwrap());
            let scaled: Vec<i32> = scores.iter().map(|&v| v << pow).collect();
            let sel = ddf_select(&scaled, ddf_threshold(&scaled, 5).unwrap());
            prop_assert_eq!(base, sel);
        }
    }
}
