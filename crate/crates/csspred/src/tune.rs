//! Threshold-schedule search under an accuracy budget.
//!
//! The tuner walks the per-round schedule grid `{2..8}^R` (tenths) with
//! successive halving: every surviving candidate is scored on a rung
//! workload, the field is cut to the better half, and the rung grows.
//! Scoring is delegated to a caller-supplied closure so the search logic
//! stays independent of workload synthesis and directly testable.
//!
//! Ranking is feasibility first: candidates within the error budget sort
//! by cost reduction (descending); infeasible candidates rank below all
//! feasible ones, by error (ascending). Ties prefer the larger schedule
//! sum among feasible candidates — the safer choice at equal cost.

use crate::error::{Error, Result};
use serde::Serialize;

/// Grid bounds for each round's threshold parameter, in tenths.
pub const ETA_GRID_MIN: u8 = 2;
pub const ETA_GRID_MAX: u8 = 8;

/// Relative-error budget the chosen schedule must satisfy.
#[derive(Debug, Clone, Serialize)]
pub struct TuneBudget {
    pub max_rel_error: f64,
    pub label: String,
}

impl TuneBudget {
    pub fn conservative() -> Self {
        TuneBudget { max_rel_error: 0.005, label: "conservative".into() }
    }

    pub fn aggressive() -> Self {
        TuneBudget { max_rel_error: 0.02, label: "aggressive".into() }
    }
}

/// Outcome of one search. `feasible == false` means no candidate met the
/// budget; `chosen` then carries the lowest-error schedule found.
#[derive(Debug, Clone, Serialize)]
pub struct TuneResult {
    pub chosen: Vec<u8>,
    pub rel_error: f64,
    pub cost_reduction_pct: f64,
    pub feasible: bool,
    /// Rung index of the last evaluation that decided the winner.
    pub final_rung: usize,
    pub log: Vec<String>,
}

#[derive(Debug, Clone)]
struct Scored {
    eta: Vec<u8>,
    rel_error: f64,
    cost_reduction_pct: f64,
    feasible: bool,
}

fn eta_sum(eta: &[u8]) -> u32 {
    eta.iter().map(|&v| v as u32).sum()
}

fn rank_cmp(a: &Scored, b: &Scored) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    match (a.feasible, b.feasible) {
        (true, false) => Ordering::Less,
        (false, true) => Ordering::Greater,
        (true, true) => b
            .cost_reduction_pct
            .partial_cmp(&a.cost_reduction_pct)
            .unwrap_or(Ordering::Equal)
            .then(eta_sum(&b.eta).cmp(&eta_sum(&a.eta)))
            .then(b.eta.cmp(&a.eta)),
        (false, false) => a
            .rel_error
            .partial_cmp(&b.rel_error)
            .unwrap_or(Ordering::Equal)
            .then(eta_sum(&a.eta).cmp(&eta_sum(&b.eta)))
            .then(a.eta.cmp(&b.eta)),
    }
}

/// Full schedule grid `{ETA_GRID_MIN..=ETA_GRID_MAX}^rounds`.
pub fn grid_candidates(rounds: usize) -> Result<Vec<Vec<u8>>> {
    if rounds == 0 {
        return Err(Error::InvalidConfig("tune: rounds must be at least 1".into()));
    }
    let span = (ETA_GRID_MAX - ETA_GRID_MIN + 1) as usize;
    let total = span.pow(rounds as u32);
    let mut out = Vec::with_capacity(total);
    for mut idx in 0..total {
        let mut eta = vec![0u8; rounds];
        for slot in (0..rounds).rev() {
            eta[slot] = ETA_GRID_MIN + (idx % span) as u8;
            idx /= span;
        }
        out.push(eta);
    }
    Ok(out)
}

fn score_all(
    candidates: &[Vec<u8>],
    rung: usize,
    budget: &TuneBudget,
    eval: &mut dyn FnMut(&[u8], usize) -> Result<(f64, f64)>,
) -> Result<Vec<Scored>> {
    let mut scored = Vec::with_capacity(candidates.len());
    for eta in candidates {
        let (rel_error, cost_reduction_pct) = eval(eta, rung)?;
        scored.push(Scored {
            eta: eta.clone(),
            rel_error,
            cost_reduction_pct,
            feasible: rel_error <= budget.max_rel_error,
        });
    }
    scored.sort_by(rank_cmp);
    Ok(scored)
}

fn result_from(best: &Scored, final_rung: usize, log: Vec<String>) -> TuneResult {
    TuneResult {
        chosen: best.eta.clone(),
        rel_error: best.rel_error,
        cost_reduction_pct: best.cost_reduction_pct,
        feasible: best.feasible,
        final_rung,
        log,
    }
}

/// Successive-halving search. `eval(eta, rung)` must return
/// `(rel_error, cost_reduction_pct)` for the schedule on the rung's
/// workload; rung indices grow as the field narrows.
pub fn successive_halving(
    rounds: usize,
    budget: &TuneBudget,
    eval: &mut dyn FnMut(&[u8], usize) -> Result<(f64, f64)>,
) -> Result<TuneResult> {
    let mut candidates = grid_candidates(rounds)?;
    let mut log = Vec::new();
    let mut rung = 0usize;
    let mut last: Vec<Scored> = score_all(&candidates, rung, budget, eval)?;
    loop {
        let best = &last[0];
        log.push(format!(
            "rung {}: {} candidates, best {:?} err {:.6} cost {:.2}% {}",
            rung,
            candidates.len(),
            best.eta,
            best.rel_error,
            best.cost_reduction_pct,
            if best.feasible { "feasible" } else { "infeasible" },
        ));
        if candidates.len() == 1 {
            return Ok(result_from(&last[0], rung, log));
        }
        let keep = candidates.len().div_ceil(2);
        candidates = last[..keep].iter().map(|s| s.eta.clone()).collect();
        rung += 1;
        last = score_all(&candidates, rung, budget, eval)?;
    }
}

/// Rank the whole grid on one rung; the referee for the halving search.
pub fn exhaustive_best(
    rounds: usize,
    budget: &TuneBudget,
    rung: usize,
    eval: &mut dyn FnMut(&[u8], usize) -> Result<(f64, f64)>,
) -> Result<TuneResult> {
    let candidates = grid_candidates(rounds)?;
    let scored = score_all(&candidates, rung, budget, eval)?;
    let log = vec![format!(
        "exhaustive rung {}: {} candidates, best {:?}",
        rung,
        scored.len(),
        scored[0].eta
    )];
    Ok(result_from(&scored[0], rung, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Toy model: error falls and cost reduction falls as the schedule sum
    // grows (keeping more keys is safer but cheaper to skip).
    fn toy(eta: &[u8], _rung: usize) -> Result<(f64, f64)> {
        let s = eta_sum(eta) as f64;
        Ok(((16.0 - s) * 0.001, 80.0 - 3.0 * s))
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(grid_candidates(1).unwrap().len(), 7);
        assert_eq!(grid_candidates(2).unwrap().len(), 49);
        assert!(grid_candidates(0).is_err());
        let g = grid_candidates(2).unwrap();
        assert_eq!(g[0], vec![2, 2]);
        assert_eq!(g[48], vec![8, 8]);
    }

    #[test]
    fn tight_budget_picks_cheapest_feasible() {
        // Feasible needs sum >= 11; cheapest feasible is sum 11 exactly,
        // and the lexicographically larger schedule wins the tie.
        let budget = TuneBudget { max_rel_error: 0.005, label: "t".into() };
        let r = successive_halving(2, &budget, &mut toy).unwrap();
        assert!(r.feasible);
        assert_eq!(r.chosen, vec![8, 3]);
        let ex = exhaustive_best(2, &budget, r.final_rung, &mut toy).unwrap();
        assert_eq!(ex.chosen, r.chosen);
    }

    #[test]
    fn loose_budget_prefers_max_pruning() {
        let budget = TuneBudget { max_rel_error: f64::INFINITY, label: "inf".into() };
        let r = successive_halving(2, &budget, &mut toy).unwrap();
        assert!(r.feasible);
        assert_eq!(r.chosen, vec![2, 2]);
    }

    #[test]
    fn impossible_budget_reports_infeasible_best_error() {
        // Error floor of 0.001 sits above the budget, so nothing is
        // feasible and the lowest-error schedule must be surfaced.
        let mut floor = |eta: &[u8], _rung: usize| -> Result<(f64, f64)> {
            let s = eta_sum(eta) as f64;
            Ok(((17.0 - s) * 0.001, 80.0 - 3.0 * s))
        };
        let budget = TuneBudget { max_rel_error: 0.0005, label: "zero".into() };
        let r = successive_halving(2, &budget, &mut floor).unwrap();
        assert!(!r.feasible);
        assert_eq!(r.chosen, vec![8, 8]);
        assert!((r.rel_error - 0.001).abs() < 1e-12);
    }

    #[test]
    fn budget_monotonicity() {
        let budgets = [0.0005, 0.005, 0.02, f64::INFINITY];
        let mut prev = f64::NEG_INFINITY;
        for b in budgets {
            let budget = TuneBudget { max_rel_error: b, label: "m".into() };
            let r = successive_halving(2, &budget, &mut toy).unwrap();
            assert!(
                r.cost_reduction_pct >= prev - 1e-12,
                "larger budget reduced cost reduction: {} -> {}",
                prev,
                r.cost_reduction_pct
            );
            prev = r.cost_reduction_pct;
        }
    }

    #[test]
    fn single_round_grid_searches_all_seven() {
        let budget = TuneBudget::aggressive();
        let r = successive_halving(1, &budget, &mut toy).unwrap();
        // sum in [2,8]; feasible needs (16-s)*0.001 <= 0.02 -> all feasible;
        // max cost reduction at s = 2.
        assert_eq!(r.chosen, vec![2]);
    }

    #[test]
    fn log_reports_every_rung() {
        let budget = TuneBudget::conservative();
        let r = successive_halving(2, &budget, &mut toy).unwrap();
        // 49 -> 25 -> 13 -> 7 -> 4 -> 2 -> 1 means seven log lines.
        assert_eq!(r.log.len(), 7);
        assert_eq!(r.final_rung, 6);
        assert!(r.log[0].starts_with("rung 0: 49 candidates"));
    }

    #[test]
    fn presets_have_expected_budgets() {
        assert!((TuneBudget::conservative().max_rel_error - 0.005).abs() < 1e-12);
        assert!((TuneBudget::aggressive().max_rel_error - 0.02).abs() < 1e-12);
    }

    #[test]
    fn rung_dependent_noise_still_converges() {
        // Error shrinks as rungs grow (bigger calibration workloads);
        // ranking must stay stable because order is rung-independent.
        let mut eval = |eta: &[u8], rung: usize| -> Result<(f64, f64)> {
            let s = eta_sum(eta) as f64;
            Ok((((16.0 - s) * 0.001) / (1.0 + rung as f64 * 0.1), 80.0 - 3.0 * s))
        };
        let budget = TuneBudget { max_rel_error: f64::INFINITY, label: "n".into() };
        let r = successive_halving(2, &budget, &mut eval).unwrap();
        assert_eq!(r.chosen, vec![2, 2]);
    }
}
