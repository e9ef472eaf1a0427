//! TOML run-configuration schema.
//!
//! Every file starts with `schema_version = 1`; unknown keys anywhere are
//! rejected so typos fail loudly instead of silently running defaults.

use csspred::costmodel::CostWeights;
use csspred::css::CssConfig;
use csspred::harness::{PredictorKind, WorkloadSpec};
use csspred::tune::TuneBudget;
use serde::Deserialize;
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema_version: u32,
    pub workload: Option<WorkloadSection>,
    pub css: Option<CssSection>,
    pub cost: Option<CostWeights>,
    pub compare: Option<CompareSection>,
    pub sweep: Option<SweepSection>,
    pub tune: Option<TuneSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    pub seq_len: usize,
    pub model_dim: usize,
    #[serde(default = "one")]
    pub heads: usize,
    #[serde(default)]
    pub seed: u64,
    /// "gaussian-synthetic" (default) or "tensor-files".
    #[serde(default = "gaussian")]
    pub source: String,
    /// Directory holding x.qt8 / head{i}.{wq,wk,wv}.qt8; required when
    /// source is "tensor-files" (gen-workload writes this layout).
    #[serde(default)]
    pub tensor_dir: Option<PathBuf>,
    /// Quantization mode; "pow2" (per-tensor power-of-two scales) is the
    /// only supported value.
    #[serde(default = "pow2_mode")]
    pub quantization: String,
}

fn one() -> usize {
    1
}

fn gaussian() -> String {
    "gaussian-synthetic".into()
}

fn pow2_mode() -> String {
    "pow2".into()
}

/// Where workload tensors come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WorkloadSource {
    GaussianSynthetic,
    TensorFiles(PathBuf),
}

impl WorkloadSection {
    pub fn to_spec(&self, seed_override: Option<u64>) -> WorkloadSpec {
        WorkloadSpec {
            seq_len: self.seq_len,
            model_dim: self.model_dim,
            heads: self.heads,
            seed: seed_override.unwrap_or(self.seed),
        }
    }

    pub fn source(&self) -> Result<WorkloadSource, String> {
        if self.quantization != "pow2" {
            return Err(format!(
                "unsupported workload.quantization {:?}; only \"pow2\" is implemented",
                self.quantization
            ));
        }
        match self.source.as_str() {
            "gaussian-synthetic" => Ok(WorkloadSource::GaussianSynthetic),
            "tensor-files" => {
                let dir = self.tensor_dir.clone().ok_or_else(|| {
                    "workload.source \"tensor-files\" requires workload.tensor_dir".to_string()
                })?;
                Ok(WorkloadSource::TensorFiles(dir))
            }
            other => Err(format!(
                "unsupported workload.source {other:?}; use \"gaussian-synthetic\" or \"tensor-files\""
            )),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CssSection {
    pub rounds: usize,
    pub eta_tenths: Vec<u8>,
    pub nibble_schedule: Vec<u8>,
    pub emit_round_stats: bool,
}

impl Default for CssSection {
    fn default() -> Self {
        let d = CssConfig::default();
        CssSection {
            rounds: d.rounds,
            eta_tenths: d.eta_tenths,
            nibble_schedule: d.nibble_schedule,
            emit_round_stats: d.emit_round_stats,
        }
    }
}

impl CssSection {
    pub fn to_config(&self) -> CssConfig {
        CssConfig {
            rounds: self.rounds,
            eta_tenths: self.eta_tenths.clone(),
            nibble_schedule: self.nibble_schedule.clone(),
            emit_round_stats: self.emit_round_stats,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub predictors: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub etas: Vec<Vec<u8>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneSection {
    pub budget: Option<String>,
    pub max_rel_error: Option<f64>,
}

impl TuneSection {
    pub fn to_budget(&self) -> Result<TuneBudget, String> {
        if let Some(max) = self.max_rel_error {
            if !(max.is_finite() && max >= 0.0) {
                return Err(format!("tune.max_rel_error {max} must be finite and >= 0"));
            }
            return Ok(TuneBudget { max_rel_error: max, label: "custom".into() });
        }
        match self.budget.as_deref() {
            None | Some("conservative") => Ok(TuneBudget::conservative()),
            Some("aggressive") => Ok(TuneBudget::aggressive()),
            Some(other) => Err(format!(
                "tune.budget {other:?} unknown; use \"conservative\" or \"aggressive\""
            )),
        }
    }
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<ConfigFile, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let cfg: ConfigFile =
            toml::from_str(&text).map_err(|e| format!("config parse error: {e}"))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            ));
        }
        Ok(cfg)
    }

    pub fn require_workload(&self, seed_override: Option<u64>) -> Result<WorkloadSpec, String> {
        self.workload
            .as_ref()
            .map(|w| w.to_spec(seed_override))
            .ok_or_else(|| "config is missing the [workload] section".into())
    }

    pub fn workload_source(&self) -> Result<WorkloadSource, String> {
        self.workload
            .as_ref()
            .ok_or_else(|| "config is missing the [workload] section".to_string())?
            .source()
    }

    pub fn css_config(&self) -> CssConfig {
        self.css.as_ref().map(|c| c.to_config()).unwrap_or_default()
    }

    pub fn cost_weights(&self) -> CostWeights {
        self.cost.clone().unwrap_or_default()
    }

    pub fn predictors(&self) -> Result<Vec<PredictorKind>, String> {
        let names: Vec<String> = match &self.compare {
            Some(c) => c.predictors.clone(),
            None => PredictorKind::ALL.iter().map(|k| k.name().to_string()).collect(),
        };
        names
            .iter()
            .map(|n| {
                PredictorKind::parse(n).ok_or_else(|| format!("unknown predictor {n:?}"))
            })
            .collect()
    }
}
