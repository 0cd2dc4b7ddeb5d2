use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::PipelineError;
use crate::io::sha256_hex;
use crate::metrics::MetricConfig;
use crate::policy::{LossMode, PolicyTrainConfig};
use crate::prefreward::RewardConfig;
use crate::toywoz::EnvConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoldConfig {
    pub k: usize,
    /// Baseline epochs harvested per fold.
    pub epochs: usize,
}

impl Default for FoldConfig {
    fn default() -> Self {
        Self { k: 10, epochs: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    /// Network, optimizer and loss settings; `train.mode` is the default mode
    /// for `train-policy` and `evaluate`.
    pub train: PolicyTrainConfig,
    pub data_fraction: f64,
    pub seeds: Vec<u64>,
    /// Keep the epoch with the best validation combined score.
    pub select_on_val: bool,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self { train: PolicyTrainConfig::default(), data_fraction: 1.0, seeds: (0..5).collect(), select_on_val: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
    pub modes: Vec<LossMode>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { fractions: vec![0.05, 0.1, 0.2], modes: vec![LossMode::CeBaseline, LossMode::CaspiFull], seeds: (0..5).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HitlConfig {
    pub n_tasks: usize,
    /// Two `ce_baseline` policy seeds whose predictions form the candidates.
    pub model_seeds: [u64; 2],
    /// Label journal; relative paths resolve against the run directory.
    pub journal: PathBuf,
}

impl Default for HitlConfig {
    fn default() -> Self {
        Self { n_tasks: 40, model_seeds: [0, 1], journal: PathBuf::from("hitl/journal.jsonl") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out: PathBuf::from("runs/default") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Master seed; every stage derives its streams from it.
    pub seed: u64,
    pub env: EnvConfig,
    pub folds: FoldConfig,
    pub metric: MetricConfig,
    pub reward: RewardConfig,
    pub policy: PolicySection,
    pub sweep: SweepConfig,
    pub hitl: HitlConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            env: EnvConfig::default(),
            folds: FoldConfig::default(),
            metric: MetricConfig::default(),
            reward: RewardConfig::default(),
            policy: PolicySection::default(),
            sweep: SweepConfig::default(),
            hitl: HitlConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn fraction_ok(f: f64) -> bool {
    f > 0.0 && f <= 1.0
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.env.schema().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.metric.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.reward.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.policy.train.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.folds.k < 2 {
            return bad(format!("folds.k must be at least 2, got {}", self.folds.k));
        }
        if self.folds.epochs == 0 {
            return bad("folds.epochs must be positive".into());
        }
        if self.folds.k > self.env.n_train {
            return bad(format!("folds.k = {} exceeds env.n_train = {}", self.folds.k, self.env.n_train));
        }
        if !fraction_ok(self.policy.data_fraction) {
            return bad(format!("policy.data_fraction must lie in (0, 1], got {}", self.policy.data_fraction));
        }
        if self.policy.seeds.is_empty() {
            return bad("policy.seeds must not be empty".into());
        }
        if let Some(f) = self.sweep.fractions.iter().find(|f| !fraction_ok(**f)) {
            return bad(format!("sweep fractions must lie in (0, 1], got {f}"));
        }
        if self.sweep.seeds.is_empty() || self.sweep.modes.is_empty() {
            return bad("sweep.seeds and sweep.modes must not be empty".into());
        }
        if self.hitl.model_seeds[0] == self.hitl.model_seeds[1] {
            return bad("hitl.model_seeds must differ".into());
        }
        if let Some(s) = self.hitl.model_seeds.iter().find(|s| !self.policy.seeds.contains(s)) {
            return bad(format!("hitl model seed {s} is not in policy.seeds"));
        }
        Ok(())
    }

    /// Canonical JSON: object keys sorted, no insignificant whitespace.
    pub fn canonical_json(&self) -> String {
        canonical(&serde_json::to_value(self).expect("config serializes")).to_string()
    }

    /// SHA-256 of the canonical JSON with `paths` left out, so moving a run
    /// does not change its identity.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("paths");
        }
        sha256_hex(canonical(&v).to_string().as_bytes())
    }
}

/// Rebuilds objects with sorted keys whatever map ordering serde_json uses.
pub fn canonical(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            Value::Object(keys.into_iter().map(|k| (k.clone(), canonical(&m[k]))).collect())
        }
        Value::Array(xs) => Value::Array(xs.iter().map(canonical).collect()),
        other => other.clone(),
    }
}
