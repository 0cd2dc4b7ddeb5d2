//! Pairwise causal reward learning: K-fold baseline harvesting of scored
//! rollouts, preference pairs with normalized-metric targets, and a per-turn
//! reward model bounded by a sigmoid.

mod harvest;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::diffkit::DiffError;
use crate::metrics::MetricScore;
use crate::policy::PolicyError;
use crate::toywoz::ActToken;

pub use harvest::{harvest, kfold_split, Fold, FoldEpochSummary, FoldSpec, HarvestReport};
pub use model::{RewardInputs, RewardMeta, RewardModel, RewardNetConfig, RewardTurn};
pub use train::{
    annotate_corpus, batch_pair_loss, draw_pairs, rollout_scores, train_reward, EvalPoint, HumanPair, PairRef, Pairing, RewardConfig, RewardLog,
    TrainedReward,
};

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("K = {k} folds need at least {k} dialogues, got {n}")]
    TooFewDialogues { k: usize, n: usize },
    #[error("preference dataset needs at least two rollouts, got {0}")]
    TooFewRollouts(usize),
    #[error("no usable preference pairs (all pairs have zero metric or non-finite scores)")]
    NoUsablePairs,
    #[error("mix_prob = {0} requires human-labeled pairs, none given")]
    NoHumanPairs(f64),
    #[error("identity preference is undefined when r1 + r2 = 0")]
    ZeroRewardSum,
    #[error("rollout for dialogue `{0}` has no reference dialogue")]
    UnknownDialogue(String),
    #[error("rollout for dialogue `{dialogue}` has {got} turns, reference has {expected}")]
    TurnCount { dialogue: String, got: usize, expected: usize },
    #[error("token `{0}` is not in the vocabulary")]
    UnknownToken(String),
    #[error("vocabulary fingerprint {model} of the reward model does not match corpus {corpus}")]
    VocabMismatch { model: String, corpus: String },
    #[error("checkpoint does not match the reward model layout: {0}")]
    Layout(String),
    #[error("invalid config: {0}")]
    Config(String),
}

/// How rollout sums map to preference strengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phi {
    Identity,
    Exp,
}

/// Metric components recorded with each harvested rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutMetric {
    pub inform: f64,
    pub success: f64,
    pub bleu: f64,
    #[serde(rename = "M")]
    pub m: f64,
}

impl From<MetricScore> for RolloutMetric {
    fn from(s: MetricScore) -> Self {
        Self { inform: s.inform, success: s.success, bleu: s.bleu, m: s.m }
    }
}

/// One element of the preference dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredRollout {
    pub dialogue_id: String,
    pub fold: usize,
    pub epoch: usize,
    pub acts: Vec<Vec<ActToken>>,
    pub responses: Vec<Vec<String>>,
    pub metric: RolloutMetric,
}

/// `P[tau1 > tau2] = phi(r1) / (phi(r1) + phi(r2))`.
pub fn preference_prob(r1: f64, r2: f64, phi: Phi) -> Result<f64, RewardError> {
    match phi {
        Phi::Identity => {
            let z = r1 + r2;
            if z == 0.0 {
                return Err(RewardError::ZeroRewardSum);
            }
            Ok(r1 / z)
        }
        Phi::Exp => Ok(1.0 / (1.0 + (r2 - r1).exp())),
    }
}

/// Normalized metric target `mu(tau1) = M1 / (M1 + M2)`; `None` when both
/// scores are zero or the result is not finite.
pub fn pair_target(m1: f64, m2: f64) -> Option<f64> {
    let z = m1 + m2;
    let mu = m1 / z;
    (z != 0.0 && mu.is_finite()).then_some(mu)
}

/// Binary cross-entropy between target `mu` and preference probability `p`.
pub fn pair_loss_value(mu: f64, p: f64) -> f64 {
    let term = |w: f64, q: f64| if w == 0.0 { 0.0 } else { w * q.ln() };
    -(term(mu, p) + term(1.0 - mu, 1.0 - p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preference_examples() {
        for phi in [Phi::Identity, Phi::Exp] {
            assert_eq!(preference_prob(1.3, 1.3, phi).unwrap(), 0.5);
        }
        assert!((preference_prob(0.6, 0.2, Phi::Identity).unwrap() - 0.75).abs() < 1e-15);
        assert!((preference_prob(1.0 + 3f64.ln(), 1.0, Phi::Exp).unwrap() - 0.75).abs() < 1e-12);
        assert!(matches!(preference_prob(0.0, 0.0, Phi::Identity), Err(RewardError::ZeroRewardSum)));
    }

    #[test]
    fn targets_and_loss() {
        assert_eq!(pair_target(3.0, 1.0), Some(0.75));
        assert_eq!(pair_target(0.0, 0.0), None);
        assert!((pair_loss_value(0.5, 0.5) - 2f64.ln()).abs() < 1e-15);
        assert!(pair_loss_value(1.0, 1.0 - 1e-12) < 1e-11);
        assert!(pair_loss_value(0.3, 0.3) < pair_loss_value(0.3, 0.31));
        assert!(pair_loss_value(0.3, 0.3) < pair_loss_value(0.3, 0.29));
    }
}
