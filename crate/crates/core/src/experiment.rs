//! Experiment configuration and the domain-count sweep.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{DomainSpec, GeneralTask};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MoeModel};
use crate::numerics::{Precision, Real};
use crate::trainer::{pretrain, run_finetune, Policy, PretrainConfig, TrainConfig};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "MOELAB_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub n_min: usize,
    pub n_max: usize,
    /// Fine-tuning steps per domain: a run on N domains takes `N · steps_per_domain` steps.
    pub steps_per_domain: usize,
    pub policies: Vec<Policy>,
    /// Offsets added to every seed in the config, one full sweep each.
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n_min: 2,
            n_max: 6,
            steps_per_domain: 60,
            policies: Policy::ALL.to_vec(),
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    /// Explicit domains; when absent the six standard tasks are generated from `data_seed`.
    pub domains: Option<Vec<DomainSpec>>,
    pub data_seed: u64,
    /// Pretrained checkpoint for `finetune`; defaults to the one `pretrain` writes.
    pub checkpoint: Option<PathBuf>,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            output_dir: PathBuf::from("runs"),
            model: ModelConfig {
                shared_expert: true,
                ..ModelConfig::default()
            },
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            domains: None,
            data_seed: 7,
            checkpoint: None,
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingInput(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("name {:?} is not a usable directory name", self.name)));
        }
        self.model.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        if self.model.precision != self.train.precision {
            return Err(Error::Config(format!(
                "model precision {:?} differs from train precision {:?}",
                self.model.precision, self.train.precision
            )));
        }
        let specs = self.specs(0)?;
        for (i, s) in specs.iter().enumerate() {
            s.validate().map_err(|e| Error::Config(e.to_string()))?;
            if s.id != i {
                return Err(Error::Config(format!("domain ids must be 0..{}, found {} at {i}", specs.len(), s.id)));
            }
        }
        for (i, a) in specs.iter().enumerate() {
            if specs[..i].iter().any(|b| b.kind == a.kind) {
                return Err(Error::Config(format!("task kind {:?} appears twice", a.kind)));
            }
        }
        let sw = &self.sweep;
        if sw.n_min == 0 || sw.n_min > sw.n_max || sw.steps_per_domain == 0 || sw.policies.is_empty() || sw.seeds.is_empty()
        {
            return Err(Error::Config(
                "sweep needs 0 < n_min <= n_max, positive steps_per_domain, policies and seeds".into(),
            ));
        }
        Ok(())
    }

    /// Output directory after the environment override.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV).map_or_else(|| self.output_dir.clone(), PathBuf::from)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root().join(&self.name)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.run_dir().join("pretrain").join("checkpoint.bin"))
    }

    /// Domain specs for the sweep seed offset `offset`.
    pub fn specs(&self, offset: u64) -> Result<Vec<DomainSpec>> {
        match &self.domains {
            Some(d) => Ok(d.clone()),
            None => DomainSpec::standard_set(6, self.data_seed + offset),
        }
    }

    pub fn general(&self, offset: u64) -> GeneralTask {
        GeneralTask::new(self.data_seed + offset)
    }

    pub fn pretrain_config(&self, offset: u64) -> PretrainConfig {
        PretrainConfig {
            seed: self.pretrain.seed + offset,
            ..self.pretrain.clone()
        }
    }

    /// Train config for `policy` on `n` domains under seed offset `offset`.
    pub fn sweep_train_config(&self, policy: Policy, n: usize, offset: u64) -> TrainConfig {
        TrainConfig {
            policy,
            steps: self.sweep.steps_per_domain * n,
            seed: self.train.seed + offset,
            ..self.train.clone()
        }
    }

    /// Pretty JSON echo of the config.
    pub fn echo(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Hex SHA-256 of [`Self::echo`].
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.echo()?.as_bytes())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub policy: Policy,
    pub seed: u64,
    pub general_before: f64,
    pub general_after: f64,
    pub retention: f64,
    pub overlap: f64,
}

pub const SWEEP_CSV_HEADER: &str = "n,policy,seed,general_before,general_after,retention,overlap";

impl SweepRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.n,
            self.policy.flag(),
            self.seed,
            self.general_before,
            self.general_after,
            self.retention,
            self.overlap
        )
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_CSV_HEADER) {
        return Err(Error::Argument("not a sweep table".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Argument(format!("malformed sweep row {l:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Argument(format!("{s:?}: {e}")));
            Ok(SweepRow {
                n: f[0].parse().map_err(|e| Error::Argument(format!("{:?}: {e}", f[0])))?,
                policy: f[1].parse()?,
                seed: f[2].parse().map_err(|e| Error::Argument(format!("{:?}: {e}", f[2])))?,
                general_before: num(f[3])?,
                general_after: num(f[4])?,
                retention: num(f[5])?,
                overlap: num(f[6])?,
            })
        })
        .collect()
}

/// Pretrains the base model for one seed offset.
pub fn pretrain_base<S: Real>(cfg: &ExperimentConfig, offset: u64) -> Result<MoeModel<S>> {
    let out = pretrain::<S>(cfg.model.clone(), &cfg.pretrain_config(offset), &cfg.specs(offset)?, &cfg.general(offset))?;
    Ok(out.model)
}

/// Fine-tunes on the first `n` domains for every policy and seed, from a
/// model pretrained on all of them. Rows arrive in (seed, n, policy) order.
pub fn run_sweep(cfg: &ExperimentConfig, on_row: &mut dyn FnMut(&SweepRow)) -> Result<Vec<SweepRow>> {
    match cfg.model.precision {
        Precision::F32 => sweep_typed::<f32>(cfg, on_row),
        Precision::F64 => sweep_typed::<f64>(cfg, on_row),
    }
}

fn sweep_typed<S: Real>(cfg: &ExperimentConfig, on_row: &mut dyn FnMut(&SweepRow)) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &offset in &cfg.sweep.seeds {
        let specs = cfg.specs(offset)?;
        if specs.len() < cfg.sweep.n_max {
            return Err(Error::Argument(format!(
                "sweep up to {} domains but only {} are configured",
                cfg.sweep.n_max,
                specs.len()
            )));
        }
        let general = cfg.general(offset);
        let base = pretrain_base::<S>(cfg, offset)?;
        for n in cfg.sweep.n_min..=cfg.sweep.n_max {
            for &policy in &cfg.sweep.policies {
                let tc = cfg.sweep_train_config(policy, n, offset);
                let out = run_finetune(base.clone(), specs[..n].to_vec(), tc, &general)?;
                let row = SweepRow {
                    n,
                    policy,
                    seed: offset,
                    general_before: out.before.general,
                    general_after: out.after.general,
                    retention: out.general_retention()?,
                    overlap: out.overlap,
                };
                info!("sweep seed {offset} N={n} {policy}: retention {:.3}", row.retention);
                on_row(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// Mean retention per (policy, N), averaged over seeds.
pub fn mean_retention(rows: &[SweepRow]) -> Vec<(Policy, usize, f64)> {
    let mut keys: Vec<(Policy, usize)> = rows.iter().map(|r| (r.policy, r.n)).collect();
    keys.sort_by_key(|&(p, n)| (Policy::ALL.iter().position(|&q| q == p), n));
    keys.dedup();
    keys.into_iter()
        .map(|(p, n)| {
            let v: Vec<f64> = rows.iter().filter(|r| r.policy == p && r.n == n).map(|r| r.retention).collect();
            (p, n, v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}
