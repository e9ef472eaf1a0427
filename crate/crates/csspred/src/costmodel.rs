//! Analytic cost accounting for the prediction and execution pipelines.
//!
//! Every arithmetic or memory event is recorded against a pipeline stage
//! with an explicit width profile. Default weights follow the classic
//! bit-complexity heuristic: an `a x b` multiply costs `a*b` units, while
//! adds, shifts, compares and leading-one detection cost their operand
//! width. Memory traffic is tallied in bits and reported separately
//! (weight 0 by default) so compute and bandwidth never blend silently.
//!
//! Reports merge commutatively, which lets per-worker counters from a
//! parallel run collapse into one report in any order.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// Pipeline stage an event is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Approximate score generation (Q-hat/K-hat production and scoring).
    Speculation,
    /// Thresholding, sorting and survivor bookkeeping.
    Selection,
    /// Exact sparse attention execution.
    Formal,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Speculation, Stage::Selection, Stage::Formal];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Speculation => "speculation",
            Stage::Selection => "selection",
            Stage::Formal => "formal",
        }
    }
}

/// One arithmetic or memory event with its width profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Mult { a_bits: u16, b_bits: u16 },
    Add { bits: u16 },
    Shift { bits: u16 },
    Compare { bits: u16 },
    Loe { bits: u16 },
    /// Memory load of `bits` per recorded element.
    Mem { bits: u16 },
}

/// Event category, used as the stable CSV/JSON vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Mult,
    Add,
    Shift,
    Compare,
    Loe,
    Mem,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Mult => "mult",
            Kind::Add => "add",
            Kind::Shift => "shift",
            Kind::Compare => "compare",
            Kind::Loe => "loe",
            Kind::Mem => "mem",
        }
    }
}

impl Event {
    fn key(self) -> (Kind, u16, u16) {
        match self {
            Event::Mult { a_bits, b_bits } => (Kind::Mult, a_bits, b_bits),
            Event::Add { bits } => (Kind::Add, bits, 0),
            Event::Shift { bits } => (Kind::Shift, bits, 0),
            Event::Compare { bits } => (Kind::Compare, bits, 0),
            Event::Loe { bits } => (Kind::Loe, bits, 0),
            Event::Mem { bits } => (Kind::Mem, bits, 0),
        }
    }
}

/// Per-category linear weight coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    /// Name echoed into every export so reports are self-describing.
    pub name: String,
    /// Multiply weight = `mult_scale * a_bits * b_bits`.
    pub mult_scale: f64,
    pub add_per_bit: f64,
    pub shift_per_bit: f64,
    pub compare_per_bit: f64,
    pub loe_per_bit: f64,
    /// Memory weight per bit; 0 keeps bandwidth out of compute totals.
    pub mem_per_bit: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            name: "default".into(),
            mult_scale: 1.0,
            add_per_bit: 1.0,
            shift_per_bit: 1.0,
            compare_per_bit: 1.0,
            loe_per_bit: 1.0,
            mem_per_bit: 0.0,
        }
    }
}

impl CostWeights {
    /// Weighted units for one event occurrence.
    pub fn unit(&self, kind: Kind, a: u16, b: u16) -> f64 {
        match kind {
            Kind::Mult => self.mult_scale * a as f64 * b as f64,
            Kind::Add => self.add_per_bit * a as f64,
            Kind::Shift => self.shift_per_bit * a as f64,
            Kind::Compare => self.compare_per_bit * a as f64,
            Kind::Loe => self.loe_per_bit * a as f64,
            Kind::Mem => self.mem_per_bit * a as f64,
        }
    }
}

type Key = (Stage, Kind, u16, u16);

/// Accumulated event counters for one pipeline run.
#[derive(Debug, Clone)]
pub struct CostReport {
    weights: CostWeights,
    counts: BTreeMap<Key, u64>,
}

impl Default for CostReport {
    fn default() -> Self {
        CostReport::new(CostWeights::default())
    }
}

impl CostReport {
    pub fn new(weights: CostWeights) -> Self {
        CostReport { weights, counts: BTreeMap::new() }
    }

    pub fn weights(&self) -> &CostWeights {
        &self.weights
    }

    /// Add `count` occurrences of `event` under `stage`.
    pub fn record(&mut self, stage: Stage, event: Event, count: u64) {
        if count == 0 {
            return;
        }
        let (kind, a, b) = event.key();
        *self.counts.entry((stage, kind, a, b)).or_insert(0) += count;
    }

    /// Commutative merge of two reports produced under the same weights.
    pub fn merge(&mut self, other: &CostReport) {
        assert_eq!(
            self.weights.name, other.weights.name,
            "merging reports with different weight sets"
        );
        for (key, count) in &other.counts {
            *self.counts.entry(*key).or_insert(0) += count;
        }
    }

    /// Total event count for a category, across stages.
    pub fn count_of(&self, kind: Kind) -> u64 {
        self.counts
            .iter()
            .filter(|((_, k, _, _), _)| *k == kind)
            .map(|(_, c)| *c)
            .sum()
    }

    /// Event count for a category within one stage.
    pub fn count_in(&self, stage: Stage, kind: Kind) -> u64 {
        self.counts
            .iter()
            .filter(|((s, k, _, _), _)| *s == stage && *k == kind)
            .map(|(_, c)| *c)
            .sum()
    }

    /// Weighted units for one stage (memory included at its weight).
    pub fn stage_weighted(&self, stage: Stage) -> f64 {
        self.counts
            .iter()
            .filter(|((s, _, _, _), _)| *s == stage)
            .map(|(&(_, k, a, b), &c)| self.weights.unit(k, a, b) * c as f64)
            .sum()
    }

    /// Weighted units over all stages.
    pub fn total_weighted(&self) -> f64 {
        Stage::ALL.iter().map(|&s| self.stage_weighted(s)).sum()
    }

    /// Bits loaded within one stage.
    pub fn mem_bits_in(&self, stage: Stage) -> u64 {
        self.counts
            .iter()
            .filter(|((s, k, _, _), _)| *s == stage && *k == Kind::Mem)
            .map(|(&(_, _, a, _), &c)| a as u64 * c)
            .sum()
    }

    /// Total bits loaded.
    pub fn mem_bits_total(&self) -> u64 {
        Stage::ALL.iter().map(|&s| self.mem_bits_in(s)).sum()
    }

    /// CSV rows: stage, category, count, width_profile, weighted_units.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,category,count,width_profile,weighted_units\n");
        for (&(stage, kind, a, b), &count) in &self.counts {
            let profile = match kind {
                Kind::Mult => format!("{a}x{b}"),
                _ => format!("{a}"),
            };
            let units = self.weights.unit(kind, a, b) * count as f64;
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                stage.name(),
                kind.name(),
                count,
                profile,
                units
            ));
        }
        out
    }

    /// Structured summary mirroring the CSV plus per-stage totals.
    pub fn summary_json(&self) -> serde_json::Value {
        let mut stages = serde_json::Map::new();
        for stage in Stage::ALL {
            stages.insert(
                stage.name().to_string(),
                serde_json::json!({
                    "weighted_units": self.stage_weighted(stage),
                    "memory_bits": self.mem_bits_in(stage),
                }),
            );
        }
        serde_json::json!({
            "weights": self.weights.name,
            "stages": stages,
            "total_weighted_units": self.total_weighted(),
            "total_memory_bits": self.mem_bits_total(),
        })
    }

    /// Parse a CSV produced by `to_csv` back into a report.
    pub fn from_csv(text: &str, weights: CostWeights) -> crate::error::Result<CostReport> {
        let mut report = CostReport::new(weights);
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(crate::error::Error::Format(format!(
                    "cost csv line {}: expected 5 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let stage = match fields[0] {
                "speculation" => Stage::Speculation,
                "selection" => Stage::Selection,
                "formal" => Stage::Formal,
                other => {
                    return Err(crate::error::Error::Format(format!(
                        "cost csv line {}: unknown stage {other}",
                        lineno + 1
                    )))
                }
            };
            let count: u64 = fields[2].parse().map_err(|_| {
                crate::error::Error::Format(format!("cost csv line {}: bad count", lineno + 1))
            })?;
            let parse_width = |s: &str| -> crate::error::Result<u16> {
                s.parse().map_err(|_| {
                    crate::error::Error::Format(format!(
                        "cost csv line {}: bad width profile",
                        lineno + 1
                    ))
                })
            };
            let event = match fields[1] {
                "mult" => {
                    let (a, b) = fields[3].split_once('x').ok_or_else(|| {
                        crate::error::Error::Format(format!(
                            "cost csv line {}: mult profile must be AxB",
                            lineno + 1
                        ))
                    })?;
                    Event::Mult { a_bits: parse_width(a)?, b_bits: parse_width(b)? }
                }
                "add" => Event::Add { bits: parse_width(fields[3])? },
                "shift" => Event::Shift { bits: parse_width(fields[3])? },
                "compare" => Event::Compare { bits: parse_width(fields[3])? },
                "loe" => Event::Loe { bits: parse_width(fields[3])? },
                "mem" => Event::Mem { bits: parse_width(fields[3])? },
                other => {
                    return Err(crate::error::Error::Format(format!(
                        "cost csv line {}: unknown category {other}",
                        lineno + 1
                    )))
                }
            };
            report.record(stage, event, count);
        }
        Ok(report)
    }
}

/// Percentage reduction of `a` relative to `b`, per stage and overall.
#[derive(Debug, Clone, Serialize)]
pub struct ReductionSummary {
    /// Stage name -> percent reduction; absent stages in `b` are undefined.
    pub per_stage: BTreeMap<String, Option<f64>>,
    pub total_pct: Option<f64>,
    pub memory_pct: Option<f64>,
}

impl fmt::Display for ReductionSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.total_pct {
            Some(p) => write!(f, "total reduction {p:.2}%"),
            None => write!(f, "total reduction undefined (empty baseline)"),
        }
    }
}

fn pct_reduction(a: f64, b: f64) -> Option<f64> {
    if b == 0.0 {
        None
    } else {
        Some((1.0 - a / b) * 100.0)
    }
}

/// Compare report `a` against baseline `b`.
pub fn compare_reports(a: &CostReport, b: &CostReport) -> ReductionSummary {
    let mut per_stage = BTreeMap::new();
    for stage in Stage::ALL {
        per_stage.insert(
            stage.name().to_string(),
            pct_reduction(a.stage_weighted(stage), b.stage_weighted(stage)),
        );
    }
    ReductionSummary {
        per_stage,
        total_pct: pct_reduction(a.total_weighted(), b.total_weighted()),
        memory_pct: pct_reduction(a.mem_bits_total() as f64, b.mem_bits_total() as f64),
    }
}
