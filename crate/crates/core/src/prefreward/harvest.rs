use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RewardError, RolloutMetric, ScoredRollout};
use crate::io::mix_seed;
use crate::metrics::{training_metric, MetricConfig};
use crate::policy::{predict, train_policy, LossMode, PolicyError, PolicyTrainConfig};
use crate::toywoz::{Dialogue, Schema, Vocab};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Shuffles the ids under `seed` and deals them round-robin into `k` validation
/// folds; each fold trains on the rest. Lists keep the input order.
pub fn kfold_split(ids: &[String], k: usize, seed: u64) -> Result<FoldSpec, RewardError> {
    if k < 2 {
        return Err(RewardError::Config(format!("K must be at least 2, got {k}")));
    }
    if ids.len() < k {
        return Err(RewardError::TooFewDialogues { k, n: ids.len() });
    }
    let mut perm: Vec<usize> = (0..ids.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut owner = vec![0; ids.len()];
    for (pos, &i) in perm.iter().enumerate() {
        owner[i] = pos % k;
    }
    let folds = (0..k)
        .map(|f| {
            let (val, train): (Vec<_>, Vec<_>) = ids.iter().zip(&owner).partition(|(_, o)| **o == f);
            Fold {
                index: f,
                train: train.into_iter().map(|(id, _)| id.clone()).collect(),
                val: val.into_iter().map(|(id, _)| id.clone()).collect(),
            }
        })
        .collect();
    Ok(FoldSpec { k, seed, folds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEpochSummary {
    pub fold: usize,
    pub epoch: usize,
    pub mean_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestReport {
    /// Ordered by fold, epoch, then validation order.
    pub rollouts: Vec<ScoredRollout>,
    pub summaries: Vec<FoldEpochSummary>,
    /// Folds whose baseline diverged, with the error.
    pub aborted: Vec<(usize, String)>,
}

impl HarvestReport {
    pub fn mean_m_at_epoch(&self, epoch: usize) -> Option<f64> {
        let xs: Vec<f64> = self.summaries.iter().filter(|s| s.epoch == epoch).map(|s| s.mean_m).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Trains one likelihood baseline per fold and, after every epoch, scores its
/// predictions on the fold's validation dialogues.
pub fn harvest(
    schema: &Schema,
    vocab: &Vocab,
    dialogues: &[&Dialogue],
    spec: &FoldSpec,
    baseline: &PolicyTrainConfig,
    metric: &MetricConfig,
    seed: u64,
) -> Result<HarvestReport, RewardError> {
    metric.validate().map_err(PolicyError::from)?;
    let cfg = PolicyTrainConfig { mode: LossMode::CeBaseline, ..baseline.clone() };
    let acts = schema.act_inventory();
    let by_id: HashMap<&str, &Dialogue> = dialogues.iter().map(|d| (d.id.as_str(), *d)).collect();
    let mut report = HarvestReport { rollouts: Vec::new(), summaries: Vec::new(), aborted: Vec::new() };
    for fold in &spec.folds {
        let train_ids: HashSet<&str> = fold.train.iter().map(String::as_str).collect();
        let train: Vec<&Dialogue> = dialogues.iter().copied().filter(|d| train_ids.contains(d.id.as_str())).collect();
        let val: Vec<&Dialogue> = fold
            .val
            .iter()
            .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| RewardError::UnknownDialogue(id.clone())))
            .collect::<Result<_, _>>()?;
        let fold_seed = mix_seed(seed, fold.index as u64);
        let mut rollouts = Vec::new();
        let mut summaries = Vec::new();
        let result = train_policy(&train, vocab, acts.clone(), &cfg, fold_seed, |epoch, net, store| {
            let preds = predict(net, store, vocab, &val, cfg.threshold, mix_seed(fold_seed, 1 + epoch as u64))?;
            let mut sum = 0.0;
            for (p, d) in preds.into_iter().zip(&val) {
                let metric: RolloutMetric = training_metric(schema, d, &p, metric)?.into();
                sum += metric.m;
                rollouts.push(ScoredRollout {
                    dialogue_id: p.dialogue_id,
                    fold: fold.index,
                    epoch,
                    acts: p.acts,
                    responses: p.responses,
                    metric,
                });
            }
            summaries.push(FoldEpochSummary { fold: fold.index, epoch, mean_m: sum / val.len().max(1) as f64 });
            Ok(None)
        });
        match result {
            Ok(_) => {
                report.rollouts.extend(rollouts);
                report.summaries.extend(summaries);
            }
            Err(e @ PolicyError::Diverged { .. }) => report.aborted.push((fold.index, e.to_string())),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(report)
}
