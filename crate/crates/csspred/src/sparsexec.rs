//! Formal-stage execution: dense reference and mask-driven sparse path.
//!
//! The sparse executor generates Q for every token, but K and V rows only
//! for keys some query actually selected. Key narrowing happens over the
//! gathered subset, which is exactly what on-demand generation sees; with
//! an all-ones mask the gathered set is the full set, so every integer
//! and float operation replays the dense reference bit for bit.
//!
//! The value path stays exact in the functional model (no V narrowing, to
//! match the dense reference); datapath events for the probability-value
//! products are charged at the nominal 8-bit operand width. Softmax
//! floating-point work is outside the cost model's scope and never
//! recorded.

use crate::costmodel::{CostReport, Event, Stage};
use crate::css::{SparsityMask, ACC_BITS};
use crate::error::{Error, Result};
use crate::qtensor::{
    matmul_counted, pow2, requantize_pow2, AccumTensor32, AttentionOutput, FloatTensor,
    QuantTensor8,
};

/// Result of a sparse execution: per-row subset scores plus the dense
/// shaped float output (unselected positions contribute nothing).
#[derive(Debug, Clone)]
pub struct SparseAttentionOutput {
    pub output: FloatTensor,
    /// Ascending union of keys any row selected.
    pub needed_keys: Vec<usize>,
    /// Integer scores aligned with `mask.selected`, at `score_scale`.
    pub row_scores: Vec<Vec<i32>>,
    pub score_scale: i32,
}

/// Accuracy and sparsity summary of one predicted-mask execution.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ExecMetrics {
    /// Fraction of query-key pairs the mask dropped.
    pub pruning_ratio: f64,
    /// Fraction of keys whose K/V rows had to be generated.
    pub kv_coverage: f64,
    /// Fraction of ground-truth selections the mask retained.
    pub recall: f64,
    /// Frobenius relative error of the sparse output vs the dense output.
    pub rel_error: f64,
}

/// Ascending union of all selected key indices.
pub fn gather_needed_keys(mask: &SparsityMask) -> Vec<usize> {
    let mut seen = vec![false; mask.cols];
    for row in &mask.selected {
        for &k in row {
            seen[k] = true;
        }
    }
    (0..mask.cols).filter(|&k| seen[k]).collect()
}

/// Generate K and V rows only for the listed tokens (exact 32-bit
/// projection). Tokens absent from `keys` are never touched, which the
/// recorded multiply counts make auditable.
pub fn ondemand_kv(
    x: &QuantTensor8,
    wk: &QuantTensor8,
    wv: &QuantTensor8,
    keys: &[usize],
    sink: &mut CostReport,
) -> Result<(AccumTensor32, AccumTensor32)> {
    let h = x.cols;
    let mut xn_data = Vec::with_capacity(keys.len() * h);
    for &j in keys {
        if j >= x.rows {
            return Err(Error::InvalidConfig(format!(
                "ondemand_kv: key index {j} out of range for {} tokens",
                x.rows
            )));
        }
        xn_data.extend_from_slice(x.row(j));
    }
    let xn = QuantTensor8 { rows: keys.len(), cols: h, scale: x.scale, data: xn_data };
    let k = matmul_counted(&xn, wk, Stage::Formal, sink)?;
    let v = matmul_counted(&xn, wv, Stage::Formal, sink)?;
    Ok((k, v))
}

fn record_formal_weights_mem(h: usize, kv_rows: usize, sink: &mut CostReport) {
    // Three full weight matrices plus one write/read of the generated
    // K and V rows.
    sink.record(Stage::Formal, Event::Mem { bits: 8 }, (3 * h * h) as u64);
    sink.record(Stage::Formal, Event::Mem { bits: 8 }, (2 * kv_rows * h) as u64);
}

/// Dense attention with full cost instrumentation; numerically identical
/// to the uncounted reference.
pub fn dense_attention_counted(
    x: &QuantTensor8,
    wq: &QuantTensor8,
    wk: &QuantTensor8,
    wv: &QuantTensor8,
    d_k: usize,
    sink: &mut CostReport,
) -> Result<AttentionOutput> {
    let out = crate::qtensor::attention_ref(x, wq, wk, wv, d_k)?;
    let s = x.rows;
    let h = x.cols;
    let proj_terms = (3 * s * h * h) as u64;
    let proj_adds = (3 * s * h * h.saturating_sub(1)) as u64;
    sink.record(Stage::Formal, Event::Mult { a_bits: 8, b_bits: 8 }, proj_terms);
    sink.record(Stage::Formal, Event::Add { bits: 16 }, proj_adds);
    sink.record(Stage::Formal, Event::Shift { bits: ACC_BITS }, (2 * s * h) as u64);
    let score_terms = (s * s * h) as u64;
    let score_adds = (s * s * h.saturating_sub(1)) as u64;
    sink.record(Stage::Formal, Event::Mult { a_bits: 8, b_bits: 8 }, score_terms);
    sink.record(Stage::Formal, Event::Add { bits: 16 }, score_adds);
    let sv_terms = (s * s * h) as u64;
    let sv_adds = (s * s.saturating_sub(1) * h) as u64;
    sink.record(Stage::Formal, Event::Mult { a_bits: 8, b_bits: 8 }, sv_terms);
    sink.record(Stage::Formal, Event::Add { bits: 16 }, sv_adds);
    record_formal_weights_mem(h, s, sink);
    Ok(out)
}

/// Execute attention under a sparsity mask with on-demand K/V generation.
pub fn sparse_attention(
    x: &QuantTensor8,
    wq: &QuantTensor8,
    wk: &QuantTensor8,
    wv: &QuantTensor8,
    mask: &SparsityMask,
    d_k: usize,
    sink: &mut CostReport,
) -> Result<SparseAttentionOutput> {
    mask.validate()?;
    if mask.rows != x.rows || mask.cols != x.rows {
        return Err(Error::ShapeMismatch {
            op: "sparse_attention: mask vs sequence",
            left: (mask.rows, mask.cols),
            right: (x.rows, x.rows),
        });
    }
    let s = x.rows;
    let h = x.cols;

    // Q is generated for every token; K/V only for needed ones.
    let q32 = matmul_counted(x, wq, Stage::Formal, sink)?;
    let needed = gather_needed_keys(mask);
    let (k32n, v32n) = ondemand_kv(x, wk, wv, &needed, sink)?;

    let q8 = requantize_pow2(&q32);
    let k8n = requantize_pow2(&k32n);
    sink.record(
        Stage::Formal,
        Event::Shift { bits: ACC_BITS },
        (q32.data.len() + k32n.data.len()) as u64,
    );

    let mut local = vec![usize::MAX; mask.cols];
    for (slot, &j) in needed.iter().enumerate() {
        local[j] = slot;
    }

    let score_scale = q8.scale + k8n.scale;
    let inv_sqrt = 1.0 / (d_k as f64).sqrt();
    let deq = pow2(score_scale);
    let vdeq = v32n.dequantize();

    let mut output = FloatTensor::zeros(s, h);
    let mut row_scores = Vec::with_capacity(s);
    let mut score_terms = 0u64;
    let mut score_adds = 0u64;
    let mut sv_terms = 0u64;
    let mut sv_adds = 0u64;
    for i in 0..s {
        let sel = &mask.selected[i];
        let qrow = q8.row(i);
        let mut scores = Vec::with_capacity(sel.len());
        for &j in sel {
            let krow = k8n.row(local[j]);
            let mut acc = 0i32;
            for k in 0..h {
                acc += qrow[k] as i32 * krow[k] as i32;
            }
            scores.push(acc);
        }
        score_terms += (sel.len() * h) as u64;
        score_adds += (sel.len() * h.saturating_sub(1)) as u64;

        // Subset softmax, same operation order as the dense reference.
        let scaled: Vec<f64> = scores.iter().map(|&v| v as f64 * deq * inv_sqrt).collect();
        let max = scaled.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0.0;
        for &v in &scaled {
            denom += (v - max).exp();
        }
        for c in 0..h {
            let mut acc = 0.0;
            for (slot, &j) in sel.iter().enumerate() {
                let p = (scaled[slot] - max).exp() / denom;
                acc += p * vdeq.at(local[j], c);
            }
            output.data[i * h + c] = acc;
        }
        sv_terms += (sel.len() * h) as u64;
        sv_adds += (sel.len().saturating_sub(1) * h) as u64;
        row_scores.push(scores);
    }
    sink.record(Stage::Formal, Event::Mult { a_bits: 8, b_bits: 8 }, score_terms);
    sink.record(Stage::Formal, Event::Add { bits: 16 }, score_adds);
    sink.record(Stage::Formal, Event::Mult { a_bits: 8, b_bits: 8 }, sv_terms);
    sink.record(Stage::Formal, Event::Add { bits: 16 }, sv_adds);
    record_formal_weights_mem(h, needed.len(), sink);

    Ok(SparseAttentionOutput { output, needed_keys: needed, row_scores, score_scale })
}

/// Fraction of ground-truth pairs the predicted mask retained.
pub fn mask_recall(pred: &SparsityMask, truth: &SparsityMask) -> f64 {
    assert_eq!((pred.rows, pred.cols), (truth.rows, truth.cols), "mask shapes");
    let mut hit = 0usize;
    let mut total = 0usize;
    for (p, t) in pred.selected.iter().zip(truth.selected.iter()) {
        total += t.len();
        hit += t.iter().filter(|k| p.binary_search(k).is_ok()).count();
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

/// Frobenius relative error of `approx` against `reference`.
pub fn output_rel_error(approx: &FloatTensor, reference: &FloatTensor) -> f64 {
    assert_eq!(
        (approx.rows, approx.cols),
        (reference.rows, reference.cols),
        "output shapes"
    );
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in approx.data.iter().zip(reference.data.iter()) {
        num += (a - b) * (a - b);
        den += b * b;
    }
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{CostWeights, Kind};
    use proptest::prelude::*;

    fn fixture(s: usize, h: usize) -> (QuantTensor8, QuantTensor8, QuantTensor8, QuantTensor8) {
        // Small deterministic integer fixture with mixed signs.
        let gen = |seed: usize, n: usize| -> Vec<i8> {
            (0..n).map(|i| (((i * 37 + seed * 101 + 13) % 255) as i32 - 127) as i8).collect()
        };
        let x = QuantTensor8::from_vec(s, h, -4, gen(1, s * h));
        let wq = QuantTensor8::from_vec(h, h, -6, gen(2, h * h));
        let wk = QuantTensor8::from_vec(h, h, -6, gen(3, h * h));
        let wv = QuantTensor8::from_vec(h, h, -6, gen(4, h * h));
        (x, wq, wk, wv)
    }

    #[test]
    fn all_ones_mask_replays_dense_bit_for_bit() {
        let (x, wq, wk, wv) = fixture(6, 8);
        let mask = SparsityMask::all_ones(6, 6);
        let mut dense_sink = CostReport::new(CostWeights::default());
        let dense = dense_attention_counted(&x, &wq, &wk, &wv, 8, &mut dense_sink).unwrap();
        let mut sparse_sink = CostReport::new(CostWeights::default());
        let sparse = sparse_attention(&x, &wq, &wk, &wv, &mask, 8, &mut sparse_sink).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(sparse.row_scores[i][j], dense.scores.at(i, j));
            }
        }
        for (a, b) in sparse.output.data.iter().zip(dense.output.data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // The instrumented event streams collapse to the same report.
        assert_eq!(sparse_sink.to_csv(), dense_sink.to_csv());
    }

    #[test]
    fn needed_keys_are_the_union() {
        let mask = SparsityMask {
            rows: 3,
            cols: 5,
            selected: vec![vec![0, 4], vec![4], vec![2]],
            round_history: None,
        };
        assert_eq!(gather_needed_keys(&mask), vec![0, 2, 4]);
    }

    #[test]
    fn formal_multiply_count_matches_formula() {
        let (x, wq, wk, wv) = fixture(4, 8);
        let mask = SparsityMask {
            rows: 4,
            cols: 4,
            selected: vec![vec![0, 2], vec![2], vec![1, 2, 3], vec![0]],
            round_history: None,
        };
        let mut sink = CostReport::new(CostWeights::default());
        let out = sparse_attention(&x, &wq, &wk, &wv, &mask, 8, &mut sink).unwrap();
        let s = 4u64;
        let h = 8u64;
        let needed = out.needed_keys.len() as u64;
        let selected: u64 = mask.selected.iter().map(|r| r.len() as u64).sum();
        let want = s * h * h + 2 * needed * h * h + 2 * selected * h;
        assert_eq!(sink.count_of(Kind::Mult), want);
    }

    #[test]
    fn subset_rows_renormalize() {
        let (x, wq, wk, wv) = fixture(5, 8);
        let mask = SparsityMask {
            rows: 5,
            cols: 5,
            selected: vec![vec![0], vec![1, 3], vec![0, 2, 4], vec![3], vec![4]],
            round_history: None,
        };
        let mut sink = CostReport::new(CostWeights::default());
        let sparse = sparse_attention(&x, &wq, &wk, &wv, &mask, 8, &mut sink).unwrap();
        // Row 0 attends to a single key: output equals that V row exactly.
        let xn = QuantTensor8::from_vec(1, 8, x.scale, x.row(0).to_vec());
        let v_row = crate::qtensor::matmul_exact(&xn, &wv).unwrap().dequantize();
        for c in 0..8 {
            assert!((sparse.output.at(0, c) - v_row.at(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn recall_examples() {
        let truth = SparsityMask {
            rows: 2,
            cols: 4,
            selected: vec![vec![0, 1], vec![2, 3]],
            round_history: None,
        };
        let pred = SparsityMask {
            rows: 2,
            cols: 4,
            selected: vec![vec![0, 2], vec![2, 3]],
            round_history: None,
        };
        assert!((mask_recall(&pred, &truth) - 0.75).abs() < 1e-12);
        assert!((mask_recall(&truth, &truth) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rel_error_examples() {
        let a = FloatTensor::from_vec(1, 2, vec![3.0, 4.0]);
        let zero = FloatTensor::from_vec(1, 2, vec![0.0, 0.0]);
        assert!((output_rel_error(&zero, &a) - 1.0).abs() < 1e-12);
        assert_eq!(output_rel_error(&a, &a), 0.0);
        assert_eq!(output_rel_error(&a, &zero), f64::INFINITY);
    }

    #[test]
    fn mask_shape_mismatch_rejected() {
        let (x, wq, wk, wv) = fixture(4, 8);
        let mask = SparsityMask::all_ones(3, 3);
        let mut sink = CostReport::new(CostWeights::default());
        assert!(sparse_attention(&x, &wq, &wk, &wv, &mask, 8, &mut sink).is_err());
    }

    #[test]
    fn ondemand_all_keys_degenerates_to_dense() {
        let (x, _, wk, wv) = fixture(6, 8);
        let all: Vec<usize> = (0..6).collect();
        let mut sink = CostReport::new(CostWeights::default());
        let (k, v) = ondemand_kv(&x, &wk, &wv, &all, &mut sink).unwrap();
        let k_full = crate::qtensor::matmul_exact(&x, &wk).unwrap();
        let v_full = crate::qtensor::matmul_exact(&x, &wv).unwrap();
        assert_eq!(k.data, k_full.data);
        assert_eq!(v.data, v_full.data);
        assert_eq!(k.scale, k_full.scale);
    }

    #[test]
    fn ondemand_empty_keys_yields_empty_tensors() {
        let (x, _, wk, wv) = fixture(6, 8);
        let mut sink = CostReport::new(CostWeights::default());
        let (k, v) = ondemand_kv(&x, &wk, &wv, &[], &mut sink).unwrap();
        assert_eq!((k.rows, v.rows), (0, 0));
        assert!(k.data.is_empty() && v.data.is_empty());
        assert_eq!(sink.count_of(Kind::Mult), 0);
    }

    #[test]
    fn ondemand_half_keys_halves_multiply_count() {
        let (x, _, wk, wv) = fixture(8, 8);
        let mut full_sink = CostReport::new(CostWeights::default());
        let all: Vec<usize> = (0..8).collect();
        ondemand_kv(&x, &wk, &wv, &all, &mut full_sink).unwrap();
        let mut half_sink = CostReport::new(CostWeights::default());
        ondemand_kv(&x, &wk, &wv, &[0, 2, 5, 7], &mut half_sink).unwrap();
        assert_eq!(half_sink.count_of(Kind::Mult) * 2, full_sink.count_of(Kind::Mult));
    }

    #[test]
    fn ondemand_rejects_out_of_range_key() {
        let (x, _, wk, wv) = fixture(4, 8);
        let mut sink = CostReport::new(CostWeights::default());
        assert!(ondemand_kv(&x, &wk, &wv, &[4], &mut sink).is_err());
    }

    #[test]
    fn enlarging_a_row_selection_rarely_hurts_that_row() {
        // Statistical invariant: adding a key to one row's selection should
        // weakly reduce that row's output error vs dense. Softmax
        // renormalization permits rare regressions, so tolerate up to 5%.
        use crate::rng::DetRng;
        let s = 12usize;
        let h = 8usize;
        let mut trials = 0usize;
        let mut violations = 0usize;
        for seed in 0..150u64 {
            let mut rng = DetRng::substream(seed, 0x5EED);
            let draw = |rng: &mut DetRng, n: usize| -> Vec<i8> {
                (0..n).map(|_| (rng.below(255) as i32 - 127) as i8).collect()
            };
            let x = QuantTensor8::from_vec(s, h, -4, draw(&mut rng, s * h));
            let wq = QuantTensor8::from_vec(h, h, -6, draw(&mut rng, h * h));
            let wk = QuantTensor8::from_vec(h, h, -6, draw(&mut rng, h * h));
            let wv = QuantTensor8::from_vec(h, h, -6, draw(&mut rng, h * h));
            let dense = crate::qtensor::attention_ref(&x, &wq, &wk, &wv, h).unwrap();

            // Random mask, 4 of 12 keys per row.
            let mut selected = Vec::with_capacity(s);
            for _ in 0..s {
                let mut pool: Vec<usize> = (0..s).collect();
                let mut picks = Vec::new();
                for _ in 0..4 {
                    picks.push(pool.swap_remove(rng.below(pool.len() as u64) as usize));
                }
                picks.sort_unstable();
                selected.push(picks);
            }
            let base = SparsityMask { rows: s, cols: s, selected, round_history: None };

            let row = rng.below(s as u64) as usize;
            let extra = loop {
                let j = rng.below(s as u64) as usize;
                if !base.selected[row].contains(&j) {
                    break j;
                }
            };
            let mut grown = base.clone();
            grown.selected[row].push(extra);
            grown.selected[row].sort_unstable();

            let row_err = |mask: &SparsityMask| -> f64 {
                let mut sink = CostReport::new(CostWeights::default());
                let out = sparse_attention(&x, &wq, &wk, &wv, mask, h, &mut sink).unwrap();
                let mut num = 0.0;
                let mut den = 0.0;
                for c in 0..h {
                    let d = out.output.at(row, c) - dense.output.at(row, c);
                    num += d * d;
                    den += dense.output.at(row, c) * dense.output.at(row, c);
                }
                (num / den.max(1e-300)).sqrt()
            };
            let before = row_err(&base);
            let after = row_err(&grown);
            trials += 1;
            if after > before + 1e-12 {
                violations += 1;
                println!(
                    "monotonicity violation at seed {seed}: row {row} err {before:.6} -> {after:.6}"
                );
            }
        }
        assert!(trials >= 100);
        assert!(
            (violations as f64) <= trials as f64 * 0.05,
            "{violations}/{trials} enlargements increased row error"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn selected_scores_match_independent_dot(
            seed in 0usize..1000,
            picks in proptest::collection::vec(proptest::collection::btree_set(0usize..6, 1..=6), 6),
        ) {
            let (x, wq, wk, wv) = fixture(6, 8);
            let _ = seed;
            let mask = SparsityMask {
                rows: 6,
                cols: 6,
                selected: picks.into_iter().map(|s| s.into_iter().collect()).collect(),
                round_history: None,
            };
            let mut sink = CostReport::new(CostWeights::default());
            let out = sparse_attention(&x, &wq, &wk, &wv, &mask, 8, &mut sink).unwrap();
            // Oracle: recompute requantized Q and gathered K independently.
            let q8 = requantize_pow2(&crate::qtensor::matmul_exact(&x, &wq).unwrap());
            let needed = gather_needed_keys(&mask);
            let mut xn_data = Vec::new();
            for &j in &needed { xn_data.extend_from_slice(x.row(j)); }
            let xn = QuantTensor8::from_vec(needed.len(), 8, x.scale, xn_data);
            let k8 = requantize_pow2(&crate::qtensor::matmul_exact(&xn, &wk).unwrap());
            let _ = &wv;
            for (i, sel) in mask.selected.iter().enumerate() {
                for (slot, &j) in sel.iter().enumerate() {
                    let local = needed.binary_search(&j).unwrap();
                    let mut acc = 0i64;
                    for k in 0..8 {
                        acc += q8.at(i, k) as i64 * k8.at(local, k) as i64;
                    }
                    prop_assert_eq!(out.row_scores[i][slot] as i64, acc);
                }
            }
            prop_assert!(out.needed_keys.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
