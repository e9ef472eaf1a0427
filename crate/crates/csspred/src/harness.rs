//! Workload synthesis and end-to-end evaluation drivers.
//!
//! A workload is one synthetic activation matrix plus per-head projection
//! weights, generated deterministically from a seed: identical seeds give
//! byte-identical tensors on every platform. The drivers run the
//! predictor and its baselines over every head, execute the masked
//! attention, and aggregate accuracy metrics with cost reports.
//!
//! Heads and sweep points are independent, so they fan out across the
//! rayon pool; per-worker cost reports merge commutatively, which keeps
//! parallel totals identical to a serial run.

use crate::baselines::{
    exact_scores_counted, msb4_scores, oracle_mask, record_static_threshold_cost,
    record_topk_cost, static_threshold_mask, symmetric_scores, topk_select,
};
use crate::costmodel::{compare_reports, CostReport, CostWeights, Stage};
use crate::css::{predict_mask, CssConfig, PredictionResult, SparsityMask};
use crate::error::{Error, Result};
use crate::locodec::{loe_tensor, LoTensor};
use crate::qtensor::{quantize, AccumTensor32, AttentionOutput, FloatTensor, QuantTensor8};
use crate::rng::DetRng;
use crate::sparsexec::{
    dense_attention_counted, mask_recall, output_rel_error, sparse_attention, ExecMetrics,
    SparseAttentionOutput,
};
use crate::tune::{exhaustive_best, successive_halving, TuneBudget, TuneResult};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Shape and seed of a synthetic workload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub seq_len: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.seq_len > 1024 {
            return Err(Error::InvalidConfig(format!(
                "seq_len {} outside 1..=1024",
                self.seq_len
            )));
        }
        if self.model_dim == 0 || self.model_dim > 1024 {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} outside 1..=1024",
                self.model_dim
            )));
        }
        if self.heads == 0 || self.heads > 64 {
            return Err(Error::InvalidConfig(format!("heads {} outside 1..=64", self.heads)));
        }
        Ok(())
    }
}

/// Projection weights of one attention head, with the coded forms the
/// speculative stage consumes.
#[derive(Debug, Clone)]
pub struct HeadWeights {
    pub wq: QuantTensor8,
    pub wk: QuantTensor8,
    pub wv: QuantTensor8,
    pub wq_codes: LoTensor,
    pub wk_codes: LoTensor,
}

/// One synthetic evaluation workload.
#[derive(Debug, Clone)]
pub struct Workload {
    pub spec: WorkloadSpec,
    pub x: QuantTensor8,
    pub heads: Vec<HeadWeights>,
}

fn gaussian_tensor(rng: &mut DetRng, rows: usize, cols: usize, sigma: f64) -> FloatTensor {
    let data = (0..rows * cols).map(|_| rng.normal() * sigma).collect();
    FloatTensor { rows, cols, data }
}

/// Generate a workload: standard-normal activations and
/// `1/sqrt(model_dim)`-scaled normal weights, quantized to int8.
pub fn gen_workload(spec: &WorkloadSpec) -> Result<Workload> {
    spec.validate()?;
    let s = spec.seq_len;
    let h = spec.model_dim;
    let mut xr = DetRng::substream(spec.seed, 0);
    let x = quantize(&gaussian_tensor(&mut xr, s, h, 1.0))?;
    let sigma = 1.0 / (h as f64).sqrt();
    let mut heads = Vec::with_capacity(spec.heads);
    for head in 0..spec.heads {
        let draw = |slot: u64| -> Result<QuantTensor8> {
            let mut r = DetRng::substream(spec.seed, 1 + head as u64 * 3 + slot);
            quantize(&gaussian_tensor(&mut r, h, h, sigma))
        };
        let wq = draw(0)?;
        let wk = draw(1)?;
        let wv = draw(2)?;
        let wq_codes = loe_tensor(&wq);
        let wk_codes = loe_tensor(&wk);
        heads.push(HeadWeights { wq, wk, wv, wq_codes, wk_codes });
    }
    Ok(Workload { spec: spec.clone(), x, heads })
}

/// Assemble a workload from externally supplied tensors (e.g. files),
/// deriving the leading-one codes the speculative stage needs. Shapes are
/// validated against the declared dimensions.
pub fn workload_from_tensors(
    spec: &WorkloadSpec,
    x: QuantTensor8,
    weights: Vec<(QuantTensor8, QuantTensor8, QuantTensor8)>,
) -> Result<Workload> {
    spec.validate()?;
    if x.rows != spec.seq_len || x.cols != spec.model_dim {
        return Err(Error::ShapeMismatch {
            op: "workload activations",
            left: (x.rows, x.cols),
            right: (spec.seq_len, spec.model_dim),
        });
    }
    if weights.len() != spec.heads {
        return Err(Error::InvalidConfig(format!(
            "workload has {} weight triples but spec declares {} heads",
            weights.len(),
            spec.heads
        )));
    }
    let h = spec.model_dim;
    let mut heads = Vec::with_capacity(weights.len());
    for (wq, wk, wv) in weights {
        for w in [&wq, &wk, &wv] {
            if w.rows != h || w.cols != h {
                return Err(Error::ShapeMismatch {
                    op: "workload head weights",
                    left: (w.rows, w.cols),
                    right: (h, h),
                });
            }
        }
        let wq_codes = loe_tensor(&wq);
        let wk_codes = loe_tensor(&wk);
        heads.push(HeadWeights { wq, wk, wv, wq_codes, wk_codes });
    }
    Ok(Workload { spec: spec.clone(), x, heads })
}

/// Everything one head's prediction + execution produced.
#[derive(Debug, Clone)]
pub struct HeadRun {
    pub prediction: PredictionResult,
    pub sparse: SparseAttentionOutput,
    pub dense: AttentionOutput,
    pub oracle: SparsityMask,
    pub metrics: ExecMetrics,
    /// Speculation + selection + sparse formal execution.
    pub cost: CostReport,
    /// Dense formal execution only.
    pub cost_dense: CostReport,
}

fn metrics_for(
    mask: &SparsityMask,
    sparse: &SparseAttentionOutput,
    dense_output: &FloatTensor,
    oracle: &SparsityMask,
) -> ExecMetrics {
    ExecMetrics {
        pruning_ratio: 1.0 - mask.density(),
        kv_coverage: sparse.needed_keys.len() as f64 / mask.cols as f64,
        recall: mask_recall(mask, oracle),
        rel_error: output_rel_error(&sparse.output, dense_output),
    }
}

/// Predict a mask for one head, execute it, and measure against the dense
/// reference and the exact-score ground truth.
pub fn run_predict_head(
    x: &QuantTensor8,
    head: &HeadWeights,
    cfg: &CssConfig,
    weights: &CostWeights,
) -> Result<HeadRun> {
    let d_k = x.cols;
    let mut cost = CostReport::new(weights.clone());
    let prediction = predict_mask(x, &head.wq_codes, &head.wk_codes, cfg, &mut cost)?;
    let sparse =
        sparse_attention(x, &head.wq, &head.wk, &head.wv, &prediction.mask, d_k, &mut cost)?;
    let mut cost_dense = CostReport::new(weights.clone());
    let dense = dense_attention_counted(x, &head.wq, &head.wk, &head.wv, d_k, &mut cost_dense)?;
    let oracle = oracle_mask(&dense.scores, cfg)?;
    let metrics = metrics_for(&prediction.mask, &sparse, &dense.output, &oracle);
    Ok(HeadRun { prediction, sparse, dense, oracle, metrics, cost, cost_dense })
}

/// Aggregate of a predict run across heads.
#[derive(Debug, Clone)]
pub struct PredictOutcome {
    pub head_runs: Vec<HeadRun>,
    /// Mean metrics across heads.
    pub metrics: ExecMetrics,
    pub density: f64,
    pub cost: CostReport,
    pub cost_dense: CostReport,
    /// Weighted-unit reduction of the full pipeline vs dense execution.
    pub cost_reduction_pct: f64,
}

fn mean_metrics(runs: &[ExecMetrics]) -> ExecMetrics {
    let n = runs.len().max(1) as f64;
    ExecMetrics {
        pruning_ratio: runs.iter().map(|m| m.pruning_ratio).sum::<f64>() / n,
        kv_coverage: runs.iter().map(|m| m.kv_coverage).sum::<f64>() / n,
        recall: runs.iter().map(|m| m.recall).sum::<f64>() / n,
        rel_error: runs.iter().map(|m| m.rel_error).sum::<f64>() / n,
    }
}

pub fn run_predict(
    w: &Workload,
    cfg: &CssConfig,
    weights: &CostWeights,
) -> Result<PredictOutcome> {
    cfg.validate()?;
    let head_runs: Vec<HeadRun> = w
        .heads
        .par_iter()
        .map(|head| run_predict_head(&w.x, head, cfg, weights))
        .collect::<Result<_>>()?;
    let mut cost = CostReport::new(weights.clone());
    let mut cost_dense = CostReport::new(weights.clone());
    for run in &head_runs {
        cost.merge(&run.cost);
        cost_dense.merge(&run.cost_dense);
    }
    let metrics = mean_metrics(&head_runs.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>());
    let density = head_runs.iter().map(|r| r.prediction.mask.density()).sum::<f64>()
        / head_runs.len().max(1) as f64;
    let cost_reduction_pct =
        compare_reports(&cost, &cost_dense).total_pct.unwrap_or(0.0);
    Ok(PredictOutcome { head_runs, metrics, density, cost, cost_dense, cost_reduction_pct })
}

/// Predictors the comparison driver can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    Css,
    SymmetricLo,
    Msb4,
    TopK,
    Oracle,
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 5] = [
        PredictorKind::Css,
        PredictorKind::SymmetricLo,
        PredictorKind::Msb4,
        PredictorKind::TopK,
        PredictorKind::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PredictorKind::Css => "css",
            PredictorKind::SymmetricLo => "symmetric-lo",
            PredictorKind::Msb4 => "msb4",
            PredictorKind::TopK => "topk",
            PredictorKind::Oracle => "oracle",
        }
    }

    pub fn parse(name: &str) -> Option<PredictorKind> {
        PredictorKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// One comparison line: a predictor's accuracy and cost at matched density.
#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub predictor: String,
    pub density: f64,
    pub metrics: ExecMetrics,
    pub speculation_units: f64,
    pub selection_units: f64,
    pub formal_units: f64,
    pub total_units: f64,
    pub speculation_mem_bits: u64,
    pub cost_reduction_pct: f64,
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub rows: Vec<CompareRow>,
    pub dense_units: f64,
    pub dense_mem_bits: u64,
}

/// Pick the static threshold whose selection density lands closest to the
/// target, by bisection over the sorted score values. The row-argmax
/// fallback is ignored during calibration; it only tops up empty rows.
pub fn calibrate_theta(scores: &AccumTensor32, target_density: f64) -> i64 {
    let mut all: Vec<i64> = scores.data.iter().map(|&v| v as i64).collect();
    all.sort_unstable();
    let n = all.len();
    let mut uniq = all.clone();
    uniq.dedup();
    let density_at = |theta: i64| -> f64 {
        let below = all.partition_point(|&v| v < theta);
        (n - below) as f64 / n as f64
    };
    // First unique value whose density drops to or below the target;
    // density is non-increasing in theta, so this is a true bisection.
    let split = uniq.partition_point(|&u| density_at(u) > target_density);
    let mut best = i64::MIN; // theta below every score: density 1
    let mut best_gap = (1.0 - target_density).abs();
    for idx in [split.wrapping_sub(1), split] {
        if let Some(&u) = uniq.get(idx) {
            let gap = (density_at(u) - target_density).abs();
            // Strictly better only: ties keep the denser (smaller) theta.
            if gap < best_gap {
                best = u;
                best_gap = gap;
            }
        }
    }
    best
}

struct HeadCompare {
    dense_cost: CostReport,
    per_kind: Vec<(PredictorKind, CostReport, ExecMetrics, f64)>,
}

fn compare_head(
    x: &QuantTensor8,
    head: &HeadWeights,
    cfg: &CssConfig,
    weights: &CostWeights,
    kinds: &[PredictorKind],
) -> Result<HeadCompare> {
    let s = x.rows;
    let d_k = x.cols;
    let mut dense_cost = CostReport::new(weights.clone());
    let dense = dense_attention_counted(x, &head.wq, &head.wk, &head.wv, d_k, &mut dense_cost)?;
    let oracle = oracle_mask(&dense.scores, cfg)?;

    // The primary predictor runs first; its density is the match target.
    let mut css_cost = CostReport::new(weights.clone());
    let prediction = predict_mask(x, &head.wq_codes, &head.wk_codes, cfg, &mut css_cost)?;
    let css_sparse =
        sparse_attention(x, &head.wq, &head.wk, &head.wv, &prediction.mask, d_k, &mut css_cost)?;
    let target = prediction.mask.density();
    let k_match = (target * s as f64).ceil() as usize;

    let mut per_kind = vec![(
        PredictorKind::Css,
        css_cost,
        metrics_for(&prediction.mask, &css_sparse, &dense.output, &oracle),
        target,
    )];

    for &kind in kinds.iter().filter(|&&k| k != PredictorKind::Css) {
        let mut cost = CostReport::new(weights.clone());
        let mask = match kind {
            PredictorKind::SymmetricLo => {
                let scores = symmetric_scores(x, &head.wq, &head.wk, &mut cost)?;
                record_topk_cost(s, s, &mut cost);
                topk_select(&scores, k_match)
            }
            PredictorKind::Msb4 => {
                let scores = msb4_scores(x, &head.wq, &head.wk, &mut cost)?;
                let theta = calibrate_theta(&scores, target);
                record_static_threshold_cost(s, s, &mut cost);
                static_threshold_mask(&scores, theta)
            }
            PredictorKind::TopK => {
                let scores = exact_scores_counted(x, &head.wq, &head.wk, &mut cost)?;
                record_topk_cost(s, s, &mut cost);
                topk_select(&scores, k_match)
            }
            PredictorKind::Oracle => oracle.clone(),
            PredictorKind::Css => unreachable!(),
        };
        let sparse = sparse_attention(x, &head.wq, &head.wk, &head.wv, &mask, d_k, &mut cost)?;
        let metrics = metrics_for(&mask, &sparse, &dense.output, &oracle);
        per_kind.push((kind, cost, metrics, mask.density()));
    }
    Ok(HeadCompare { dense_cost, per_kind })
}

/// Run the primary predictor and the requested baselines over every head
/// at matched selection density, against one shared dense reference.
pub fn run_compare(
    w: &Workload,
    cfg: &CssConfig,
    weights: &CostWeights,
    kinds: &[PredictorKind],
) -> Result<CompareOutcome> {
    cfg.validate()?;
    let heads: Vec<HeadCompare> = w
        .heads
        .par_iter()
        .map(|head| compare_head(&w.x, head, cfg, weights, kinds))
        .collect::<Result<_>>()?;

    let mut dense_cost = CostReport::new(weights.clone());
    for h in &heads {
        dense_cost.merge(&h.dense_cost);
    }
    let dense_units = dense_cost.total_weighted();
    let dense_mem_bits = dense_cost.mem_bits_total();

    // Aggregate by predictor, preserving first-seen order.
    let order: Vec<PredictorKind> = heads[0].per_kind.iter().map(|(k, ..)| *k).collect();
    let mut rows = Vec::with_capacity(order.len());
    for kind in order {
        let mut cost = CostReport::new(weights.clone());
        let mut ms = Vec::new();
        let mut density_sum = 0.0;
        for h in &heads {
            let (_, c, m, d) = h
                .per_kind
                .iter()
                .find(|(k, ..)| *k == kind)
                .expect("predictor present for every head");
            cost.merge(c);
            ms.push(m.clone());
            density_sum += d;
        }
        let total_units = cost.total_weighted();
        rows.push(CompareRow {
            predictor: kind.name().to_string(),
            density: density_sum / heads.len() as f64,
            metrics: mean_metrics(&ms),
            speculation_units: cost.stage_weighted(Stage::Speculation),
            selection_units: cost.stage_weighted(Stage::Selection),
            formal_units: cost.stage_weighted(Stage::Formal),
            total_units,
            speculation_mem_bits: cost.mem_bits_in(Stage::Speculation),
            cost_reduction_pct: if dense_units == 0.0 {
                0.0
            } else {
                (1.0 - total_units / dense_units) * 100.0
            },
        });
    }
    Ok(CompareOutcome { rows, dense_units, dense_mem_bits })
}

/// CSV rows of a comparison, one line per predictor.
pub fn compare_csv(out: &CompareOutcome) -> String {
    let mut text = String::from(
        "predictor,density,pruning_ratio,kv_coverage,recall,rel_error,\
         speculation_units,selection_units,formal_units,total_units,\
         speculation_mem_bits,cost_reduction_pct\n",
    );
    for r in &out.rows {
        text.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.9},{},{},{},{},{},{:.4}\n",
            r.predictor,
            r.density,
            r.metrics.pruning_ratio,
            r.metrics.kv_coverage,
            r.metrics.recall,
            r.metrics.rel_error,
            r.speculation_units,
            r.selection_units,
            r.formal_units,
            r.total_units,
            r.speculation_mem_bits,
            r.cost_reduction_pct,
        ));
    }
    text
}

/// One sweep point: a threshold schedule and what it bought.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub eta_tenths: Vec<u8>,
    pub density: f64,
    pub recall: f64,
    pub rel_error: f64,
    pub cost_reduction_pct: f64,
}

/// Evaluate a list of threshold schedules on one workload.
pub fn run_sweep(
    w: &Workload,
    base: &CssConfig,
    weights: &CostWeights,
    schedules: &[Vec<u8>],
) -> Result<Vec<SweepRow>> {
    schedules
        .par_iter()
        .map(|eta| {
            let cfg = CssConfig { eta_tenths: eta.clone(), ..base.clone() };
            let out = run_predict(w, &cfg, weights)?;
            Ok(SweepRow {
                eta_tenths: eta.clone(),
                density: out.density,
                recall: out.metrics.recall,
                rel_error: out.metrics.rel_error,
                cost_reduction_pct: out.cost_reduction_pct,
            })
        })
        .collect()
}

/// CSV export of sweep rows; the schedule renders as colon-joined tenths.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut text = String::from("eta_tenths,density,recall,rel_error,cost_reduction_pct\n");
    for r in rows {
        let eta: Vec<String> = r.eta_tenths.iter().map(|v| v.to_string()).collect();
        text.push_str(&format!(
            "{},{:.6},{:.6},{:.9},{:.4}\n",
            eta.join(":"),
            r.density,
            r.recall,
            r.rel_error,
            r.cost_reduction_pct,
        ));
    }
    text
}

/// Uniform-schedule calibration: the tenths value whose mask density on
/// head 0 lands closest to the target (ties prefer the denser schedule).
pub fn calibrate_eta(w: &Workload, base: &CssConfig, target_density: f64) -> Result<u8> {
    base.validate()?;
    let head = &w.heads[0];
    let mut best = 0u8;
    let mut best_gap = f64::INFINITY;
    for eta in 0..=10u8 {
        let cfg = CssConfig { eta_tenths: vec![eta; base.rounds], ..base.clone() };
        let mut sink = CostReport::new(CostWeights::default());
        let pred = predict_mask(&w.x, &head.wq_codes, &head.wk_codes, &cfg, &mut sink)?;
        let gap = (pred.mask.density() - target_density).abs();
        if gap < best_gap {
            best = eta;
            best_gap = gap;
        }
    }
    Ok(best)
}

/// Search outcome plus the exhaustive referee on the final rung.
#[derive(Debug, Clone, Serialize)]
pub struct TuneOutcome {
    pub search: TuneResult,
    pub exhaustive: TuneResult,
    pub agree: bool,
    pub budget_label: String,
    pub max_rel_error: f64,
}

fn rung_spec(spec: &WorkloadSpec, rung: usize) -> WorkloadSpec {
    let len = 8usize
        .checked_shl(rung as u32)
        .unwrap_or(usize::MAX)
        .min(spec.seq_len)
        .max(1);
    WorkloadSpec {
        seq_len: len,
        model_dim: spec.model_dim,
        heads: spec.heads,
        seed: spec
            .seed
            .wrapping_add((rung as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    }
}

/// Tune the threshold schedule under an error budget: successive halving
/// over the schedule grid with growing rung workloads, then an exhaustive
/// final-rung pass as the referee.
pub fn run_tune(
    spec: &WorkloadSpec,
    base: &CssConfig,
    weights: &CostWeights,
    budget: &TuneBudget,
) -> Result<TuneOutcome> {
    base.validate()?;
    spec.validate()?;
    let rounds = base.rounds;
    let mut cache: BTreeMap<usize, Workload> = BTreeMap::new();
    let base = base.clone();
    let weights = weights.clone();
    let spec = spec.clone();
    let mut eval = move |eta: &[u8], rung: usize| -> Result<(f64, f64)> {
        if !cache.contains_key(&rung) {
            cache.insert(rung, gen_workload(&rung_spec(&spec, rung))?);
        }
        let w = cache.get(&rung).unwrap();
        let cfg = CssConfig { eta_tenths: eta.to_vec(), ..base.clone() };
        let out = run_predict(w, &cfg, &weights)?;
        Ok((out.metrics.rel_error, out.cost_reduction_pct))
    };
    let search = successive_halving(rounds, budget, &mut eval)?;
    let exhaustive = exhaustive_best(rounds, budget, search.final_rung, &mut eval)?;
    let agree = search.chosen == exhaustive.chosen;
    Ok(TuneOutcome {
        search,
        exhaustive,
        agree,
        budget_label: budget.label.clone(),
        max_rel_error: budget.max_rel_error,
    })
}
