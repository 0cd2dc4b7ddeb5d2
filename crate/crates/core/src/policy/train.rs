use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    behavior_view, discounted_return, total_loss, BehaviorTable, EncodedDialogue, EncodedTurn, LossMode, PolicyError,
    PolicyNet, PolicyNetConfig,
};
use crate::diffkit::{adam_step, AdamConfig, OptimState, ParamStore, Tape};
use crate::io::{mix_seed, stable_hash};
use crate::metrics::{corpus_score, ActionForm, MetricConfig, MetricScore, PredictedDialogue};
use crate::toywoz::{canonical_act, realize_response, ActToken, Dialogue, Schema, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyTrainConfig {
    pub mode: LossMode,
    pub net: PolicyNetConfig,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_dialogues: usize,
    pub gamma: f64,
    /// Behavior-table smoothing.
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub threshold: f64,
    /// Rescale returns to unit mean over the training turns.
    pub normalize_returns: bool,
    pub clip_norm: Option<f64>,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::CaspiFull,
            net: PolicyNetConfig::default(),
            adam: AdamConfig::default(),
            epochs: 10,
            batch_dialogues: 8,
            gamma: 0.9,
            alpha: 0.1,
            beta: 1.0,
            eta: 0.1,
            threshold: 0.5,
            normalize_returns: true,
            clip_norm: Some(5.0),
        }
    }
}

impl PolicyTrainConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::Config(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive and finite, got {}", self.eta));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold must lie in [0, 1], got {}", self.threshold));
        }
        if self.epochs == 0 || self.batch_dialogues == 0 {
            return bad("epochs and batch_dialogues must be positive".into());
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.adam.lr));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub mode: LossMode,
    pub n_dialogues: usize,
    pub n_turns: usize,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

pub struct TrainedPolicy {
    pub net: PolicyNet,
    pub store: ParamStore,
    pub log: TrainLog,
}

fn returns_of(d: &Dialogue, gamma: f64) -> Result<Vec<f64>, PolicyError> {
    let mut r = Vec::with_capacity(d.turns.len());
    for (i, t) in d.turns.iter().enumerate() {
        r.push(t.learned_reward.ok_or_else(|| PolicyError::MissingReward { dialogue: d.id.clone(), turn: i })?);
    }
    Ok(discounted_return(&r, gamma))
}

/// Trains a policy on `train`. `on_epoch` runs after every epoch; when it
/// returns a score, the parameters of the best-scoring epoch are kept.
pub fn train_policy<F>(
    train: &[&Dialogue],
    vocab: &Vocab,
    acts: Vec<ActToken>,
    cfg: &PolicyTrainConfig,
    seed: u64,
    mut on_epoch: F,
) -> Result<TrainedPolicy, PolicyError>
where
    F: FnMut(usize, &PolicyNet, &ParamStore) -> Result<Option<f64>, PolicyError>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(PolicyError::EmptyCorpus);
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0));
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
    let mut store = ParamStore::new();
    let net = PolicyNet::init(&mut store, vocab.len(), acts, &cfg.net, &mut init_rng)?;

    let encoded: Vec<EncodedDialogue> = train.iter().map(|d| net.encode_dialogue(vocab, d)).collect::<Result<_, _>>()?;
    let mut returns: Vec<Vec<f64>> = match cfg.mode {
        LossMode::CeBaseline => train.iter().map(|d| vec![1.0; d.turns.len()]).collect(),
        _ => train.iter().map(|d| returns_of(d, cfg.gamma)).collect::<Result<_, _>>()?,
    };
    if cfg.normalize_returns && cfg.mode != LossMode::CeBaseline {
        let (sum, n) = returns.iter().flatten().fold((0.0, 0usize), |(s, n), g| (s + g, n + 1));
        if sum > 0.0 {
            let scale = n as f64 / sum;
            returns.iter_mut().flatten().for_each(|g| *g *= scale);
        }
    }
    let table = match cfg.mode {
        LossMode::CaspiFull => Some(BehaviorTable::estimate(train.iter().copied(), cfg.alpha)?),
        _ => None,
    };

    let mut opt = OptimState::new(&store, cfg.adam);
    let mut log = TrainLog {
        mode: cfg.mode,
        n_dialogues: train.len(),
        n_turns: encoded.iter().map(|d| d.turns.len()).sum(),
        epochs: Vec::new(),
        best_epoch: None,
    };
    let mut best: Option<(f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut ratio_sum, mut kl_sum, mut batches, mut ratio_n) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_dialogues) {
            let turns: Vec<&EncodedTurn> = chunk.iter().flat_map(|&i| encoded[i].turns.iter()).collect();
            if turns.is_empty() {
                continue;
            }
            let g: Vec<f64> = chunk.iter().flat_map(|&i| returns[i].iter().copied()).collect();
            let view = table.as_ref().map(|t| behavior_view(&net, t, &turns)).transpose()?;
            let mut tape = Tape::new();
            let parts = total_loss(&mut tape, &net, &store, &turns, cfg.mode, &g, view.as_ref(), cfg.beta, cfg.eta)?;
            let loss = tape.value(parts.total).item();
            if !loss.is_finite() {
                return Err(PolicyError::Diverged { epoch });
            }
            if let Some(sto) = parts.sto {
                let r = tape.value(sto.ratio);
                ratio_sum += r.data().iter().sum::<f64>();
                ratio_n += r.len();
                kl_sum += tape.value(sto.kl).item();
            }
            let mut grads = tape.backward(parts.total, &store)?;
            if let Some(c) = cfg.clip_norm {
                grads.clip_global_norm(c);
            }
            adam_step(&mut store, &grads, &mut opt)?;
            loss_sum += loss;
            batches += 1;
        }
        let val_score = on_epoch(epoch, &net, &store)?;
        if let Some(s) = val_score {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, store.clone()));
                log.best_epoch = Some(epoch);
            }
        }
        let n = batches.max(1) as f64;
        log.epochs.push(EpochLog {
            epoch,
            loss: loss_sum / n,
            mean_ratio: (ratio_n > 0).then(|| ratio_sum / ratio_n as f64),
            mean_kl: (ratio_n > 0).then(|| kl_sum / n),
            val_score,
        });
    }
    if let Some((_, s)) = best {
        store = s;
    }
    Ok(TrainedPolicy { net, store, log })
}

/// Tokens with probability at or above `threshold`; the argmax token when none
/// qualifies.
pub fn decode_act(probs: &[f64], acts: &[ActToken], threshold: f64) -> Vec<ActToken> {
    let picked: Vec<ActToken> =
        probs.iter().zip(acts).filter(|(p, _)| **p >= threshold).map(|(_, a)| a.clone()).collect();
    if !picked.is_empty() {
        return canonical_act(picked);
    }
    let best = probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
    vec![acts[best.0].clone()]
}

/// Turn-by-turn predictions conditioned on the reference observations.
/// Responses use a generator seeded from `decode_seed`, the dialogue id and the
/// turn index, so results do not depend on evaluation order.
pub fn predict(
    net: &PolicyNet,
    store: &ParamStore,
    vocab: &Vocab,
    dialogues: &[&Dialogue],
    threshold: f64,
    decode_seed: u64,
) -> Result<Vec<PredictedDialogue>, PolicyError> {
    let mut out = Vec::with_capacity(dialogues.len());
    for d in dialogues {
        let enc = net.encode_dialogue(vocab, d)?;
        let turns: Vec<&EncodedTurn> = enc.turns.iter().collect();
        let mut acts = Vec::with_capacity(turns.len());
        let mut responses = Vec::with_capacity(turns.len());
        if !turns.is_empty() {
            let probs = net.probabilities(store, &turns)?;
            for t in 0..turns.len() {
                let act = decode_act(probs.row_slice(t), &net.acts, threshold);
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(decode_seed, stable_hash(&format!("{}#{t}", d.id))));
                responses.push(realize_response(&act, &mut rng));
                acts.push(act);
            }
        }
        out.push(PredictedDialogue { dialogue_id: d.id.clone(), acts, responses });
    }
    Ok(out)
}

/// Decodes `references` and scores them as a corpus.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    schema: &Schema,
    net: &PolicyNet,
    store: &ParamStore,
    vocab: &Vocab,
    references: &[&Dialogue],
    metric: &MetricConfig,
    bleu_form: ActionForm,
    threshold: f64,
    decode_seed: u64,
) -> Result<(MetricScore, Vec<PredictedDialogue>), PolicyError> {
    let preds = predict(net, store, vocab, references, threshold, decode_seed)?;
    let score = corpus_score(schema, references, &preds, metric, bleu_form)?;
    Ok((score, preds))
}

/// One line of the evaluation trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrace {
    pub dialogue_id: String,
    pub acts: Vec<Vec<ActToken>>,
    pub responses: Vec<Vec<String>>,
    /// Discounted returns over learned rewards; absent when a turn is unannotated.
    pub returns: Option<Vec<f64>>,
    pub learned_rewards: Vec<Option<f64>>,
}

impl PolicyTrace {
    pub fn new(pred: PredictedDialogue, reference: &Dialogue, gamma: f64) -> Self {
        let learned_rewards: Vec<Option<f64>> = reference.turns.iter().map(|t| t.learned_reward).collect();
        let returns = learned_rewards.iter().copied().collect::<Option<Vec<f64>>>().map(|r| discounted_return(&r, gamma));
        Self { dialogue_id: pred.dialogue_id, acts: pred.acts, responses: pred.responses, returns, learned_rewards }
    }
}

/// A seeded subset of `fraction` of the dialogues (at least one), in input
/// order. `fraction = 1` returns everything.
pub fn subsample<'a>(dialogues: &[&'a Dialogue], fraction: f64, seed: u64) -> Result<Vec<&'a Dialogue>, PolicyError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(PolicyError::Config(format!("data fraction must lie in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok(dialogues.to_vec());
    }
    let n = ((dialogues.len() as f64 * fraction).round() as usize).clamp(1, dialogues.len().max(1));
    let mut idx: Vec<usize> = (0..dialogues.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| dialogues[i]).collect())
}
