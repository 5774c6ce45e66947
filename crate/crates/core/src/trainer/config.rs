use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::BatchMode;
use crate::error::{arg_err, Error, Result};
use crate::numerics::Precision;
use crate::optim::OptimizerConfig;
use crate::router::DEFAULT_TEMPERATURE;
use crate::schedule::{DEFAULT_STABILIZATION_FRACTION, DEFAULT_WARMUP_FRACTION};
use crate::specialization::{DEFAULT_EMA_WEIGHT, DEFAULT_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Policy {
    DesMoe,
    Fft,
    StaticEsft,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::DesMoe, Policy::StaticEsft, Policy::Fft];

    /// Command-line spelling.
    pub fn flag(self) -> &'static str {
        match self {
            Policy::DesMoe => "des-moe",
            Policy::Fft => "fft",
            Policy::StaticEsft => "static-esft",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.flag() == s)
            .ok_or_else(|| arg_err!("unknown policy {s:?} (expected des-moe, fft or static-esft)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub policy: Policy,
    pub optimizer: OptimizerConfig,
    /// Total fine-tuning steps `T`.
    pub steps: usize,
    /// Steps between affinity refreshes.
    pub update_period: usize,
    pub threshold: f64,
    pub ema_weight: f64,
    pub temperature: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub batch_mode: BatchMode,
    /// Copies allowed per layer over a whole run.
    pub duplication_cap: usize,
    pub duplicate_shared_experts: bool,
    /// Apply the per-domain expert gradient filter (off only for ablations).
    pub expert_filter: bool,
    pub eval_interval: usize,
    pub eval_size: usize,
    pub warmup_fraction: f64,
    pub stabilization_fraction: f64,
    pub experts_in_warmup: bool,
    /// Fraction of each layer's experts STATIC_ESFT trains.
    pub static_fraction: f64,
    /// Batches routed before STATIC_ESFT training to pick its experts.
    pub static_probe_batches: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            policy: Policy::DesMoe,
            optimizer: OptimizerConfig::default(),
            steps: 600,
            update_period: 50,
            threshold: DEFAULT_THRESHOLD,
            ema_weight: DEFAULT_EMA_WEIGHT,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
            batch_size: 32,
            batch_mode: BatchMode::Mixed,
            duplication_cap: 8,
            duplicate_shared_experts: true,
            expert_filter: true,
            eval_interval: 100,
            eval_size: 64,
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
            stabilization_fraction: DEFAULT_STABILIZATION_FRACTION,
            experts_in_warmup: false,
            static_fraction: 0.25,
            static_probe_batches: 8,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        self.optimizer.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.steps == 0 || self.batch_size == 0 || self.eval_interval == 0 || self.update_period == 0 {
            return cfg("steps, batch_size, eval_interval and update_period must be positive".into());
        }
        if self.eval_size == 0 {
            return cfg("eval_size must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return cfg(format!("threshold must lie in (0, 1], got {}", self.threshold));
        }
        if !(self.ema_weight > 0.0 && self.ema_weight <= 1.0) {
            return cfg(format!("ema_weight must lie in (0, 1], got {}", self.ema_weight));
        }
        if self.temperature <= 0.0 {
            return cfg(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.policy == Policy::DesMoe {
            crate::schedule::PhasePlan::from_fractions(self.steps, self.warmup_fraction, self.stabilization_fraction)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.policy == Policy::StaticEsft && !(self.static_fraction > 0.0 && self.static_fraction <= 1.0) {
            return cfg(format!("static_fraction must lie in (0, 1], got {}", self.static_fraction));
        }
        if self.policy == Policy::StaticEsft && self.static_probe_batches == 0 {
            return cfg("static_probe_batches must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_interval: usize,
    pub eval_size: usize,
    /// Share of each batch drawn from the general task.
    pub general_fraction: f64,
    /// Weight of the load-balancing auxiliary loss.
    pub balance_weight: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            optimizer: OptimizerConfig {
                lr: 3e-3,
                ..OptimizerConfig::default()
            },
            batch_size: 32,
            seed: 0,
            eval_interval: 100,
            eval_size: 64,
            general_fraction: 0.25,
            balance_weight: 0.01,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.steps == 0 || self.batch_size == 0 || self.eval_interval == 0 || self.eval_size == 0 {
            return Err(Error::Config(
                "pretrain steps, batch_size, eval_interval and eval_size must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.general_fraction) || self.balance_weight < 0.0 {
            return Err(Error::Config("general_fraction must lie in [0, 1], balance_weight >= 0".into()));
        }
        Ok(())
    }
}
