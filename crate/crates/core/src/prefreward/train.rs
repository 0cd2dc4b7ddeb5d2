use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::RewardInputs;
use super::{pair_target, Phi, RewardError, RewardMeta, RewardModel, RewardNetConfig, ScoredRollout};
use crate::diffkit::{adam_step, AdamConfig, NodeId, OptimState, ParamStore, Tape, Tensor};
use crate::io::mix_seed;
use crate::metrics::ActionForm;
use crate::toywoz::{Dialogue, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub net: RewardNetConfig,
    pub phi: Phi,
    pub action_form: ActionForm,
    pub adam: AdamConfig,
    pub batch_pairs: usize,
    pub max_epochs: usize,
    /// Minibatches between held-out evaluations.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Share of dialogues whose rollouts are held out for ranking accuracy.
    pub val_fraction: f64,
    /// Probability that a minibatch element is a human-labeled pair.
    pub mix_prob: f64,
    pub pairing: Pairing,
    pub clip_norm: Option<f64>,
}

/// Which rollouts may be compared with each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Any two rollouts of the dataset.
    Unrestricted,
    /// Only rollouts predicted for the same reference dialogue.
    SameDialogue,
}

/// Splits `pool` into disjoint pairs under `mode`; pair order is random.
pub fn draw_pairs<R: Rng>(pool: &[usize], rollouts: &[ScoredRollout], mode: Pairing, rng: &mut R) -> Vec<(usize, usize)> {
    match mode {
        Pairing::Unrestricted => {
            let mut perm = pool.to_vec();
            perm.shuffle(rng);
            perm.chunks_exact(2).map(|c| (c[0], c[1])).collect()
        }
        Pairing::SameDialogue => {
            let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for &i in pool {
                groups.entry(rollouts[i].dialogue_id.as_str()).or_default().push(i);
            }
            let mut pairs = Vec::new();
            for g in groups.values_mut() {
                g.shuffle(rng);
                pairs.extend(g.chunks_exact(2).map(|c| (c[0], c[1])));
            }
            pairs.shuffle(rng);
            pairs
        }
    }
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            net: RewardNetConfig::default(),
            phi: Phi::Identity,
            action_form: ActionForm::Act,
            adam: AdamConfig::default(),
            batch_pairs: 16,
            max_epochs: 5,
            eval_every: 50,
            patience: 10,
            val_fraction: 0.1,
            mix_prob: 0.0,
            pairing: Pairing::SameDialogue,
            clip_norm: Some(5.0),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let bad = |m: String| Err(RewardError::Config(m));
        if !(0.0..=1.0).contains(&self.mix_prob) {
            return bad(format!("mix_prob must lie in [0, 1], got {}", self.mix_prob));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        if self.batch_pairs == 0 || self.max_epochs == 0 || self.eval_every == 0 || self.patience == 0 {
            return bad("batch_pairs, max_epochs, eval_every and patience must be positive".into());
        }
        if self.net.embed == 0 || self.net.hidden == 0 || self.net.head.contains(&0) {
            return bad("reward network sizes must be positive".into());
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.adam.lr));
        }
        Ok(())
    }
}

/// A pair of rollouts with a human preference target for the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanPair {
    pub first: ScoredRollout,
    pub second: ScoredRollout,
    pub mu_first: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardLog {
    pub n_rollouts: usize,
    pub n_train_rollouts: usize,
    pub n_val_rollouts: usize,
    pub n_val_pairs: usize,
    /// Pairs dropped because both metric scores were zero.
    pub skipped_zero_pairs: usize,
    pub metric_pairs_used: usize,
    pub human_pairs_used: usize,
    pub steps: usize,
    pub evaluations: Vec<EvalPoint>,
    pub best_accuracy: Option<f64>,
    pub stopped_early: bool,
}

pub struct TrainedReward {
    pub model: RewardModel,
    pub store: ParamStore,
    pub log: RewardLog,
}

/// One element of a pair minibatch: rollout indices into the inputs and the
/// target for the first.
pub type PairRef = (usize, usize, f64);

/// Mean pair cross-entropy over a minibatch.
pub fn batch_pair_loss(
    tape: &mut Tape,
    model: &RewardModel,
    store: &ParamStore,
    inputs: &RewardInputs,
    pairs: &[PairRef],
) -> Result<NodeId, RewardError> {
    let mut rollouts: Vec<usize> = pairs.iter().flat_map(|p| [p.0, p.1]).collect();
    rollouts.sort_unstable();
    rollouts.dedup();
    let pos: HashMap<usize, usize> = rollouts.iter().enumerate().map(|(i, r)| (*r, i)).collect();
    let sums = model.rollout_sums(tape, store, inputs, &rollouts)?;
    let first: Vec<usize> = pairs.iter().map(|p| pos[&p.0]).collect();
    let second: Vec<usize> = pairs.iter().map(|p| pos[&p.1]).collect();
    let s1 = tape.gather_rows(sums, &first)?;
    let s2 = tape.gather_rows(sums, &second)?;
    let (l1, l2) = match model.meta.phi {
        Phi::Identity => {
            let z = tape.add(s1, s2)?;
            let lz = tape.log(z);
            let a = tape.log(s1);
            let b = tape.log(s2);
            (tape.sub(a, lz)?, tape.sub(b, lz)?)
        }
        Phi::Exp => {
            let d = tape.sub(s1, s2)?;
            let nd = tape.scale(d, -1.0);
            (tape.log_sigmoid(d), tape.log_sigmoid(nd))
        }
    };
    let mu: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    let not_mu: Vec<f64> = mu.iter().map(|m| 1.0 - m).collect();
    let mu = tape.constant(Tensor::column(&mu));
    let not_mu = tape.constant(Tensor::column(&not_mu));
    let a = tape.mul(mu, l1)?;
    let b = tape.mul(not_mu, l2)?;
    let ll = tape.add(a, b)?;
    let m = tape.mean(ll);
    Ok(tape.scale(m, -1.0))
}

/// Rollout reward sums, evaluated in chunks without gradients.
pub fn rollout_scores(
    model: &RewardModel,
    store: &ParamStore,
    inputs: &RewardInputs,
    rollouts: &[usize],
) -> Result<Vec<f64>, RewardError> {
    let mut out = Vec::with_capacity(rollouts.len());
    for chunk in rollouts.chunks(64) {
        let mut tape = Tape::new();
        let s = model.rollout_sums(&mut tape, store, inputs, chunk)?;
        out.extend_from_slice(tape.value(s).data());
    }
    Ok(out)
}

fn ranking_accuracy(scores: &HashMap<usize, f64>, pairs: &[(usize, usize, f64, f64)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let hits = pairs.iter().filter(|(a, b, ma, mb)| (scores[a] - scores[b]) * (ma - mb) > 0.0).count();
    Some(hits as f64 / pairs.len() as f64)
}

/// Preference training of a per-turn reward model on the harvested rollouts.
///
/// Rollouts of a held-out share of dialogues provide ranking-accuracy pairs.
/// Training pairs come from a fresh permutation each epoch, taken two at a
/// time; each slot is replaced by a random human pair with probability
/// `mix_prob`, drawn from a separate generator. Training stops when held-out
/// accuracy has not improved for `patience` evaluations, and the best
/// parameters are kept.
pub fn train_reward(
    rollouts: &[ScoredRollout],
    human: &[HumanPair],
    references: &[&Dialogue],
    vocab: &Vocab,
    cfg: &RewardConfig,
    seed: u64,
) -> Result<TrainedReward, RewardError> {
    cfg.validate()?;
    if rollouts.len() < 2 {
        return Err(RewardError::TooFewRollouts(rollouts.len()));
    }
    if cfg.mix_prob > 0.0 && human.is_empty() {
        return Err(RewardError::NoHumanPairs(cfg.mix_prob));
    }
    for p in human {
        if !(0.0..=1.0).contains(&p.mu_first) {
            return Err(RewardError::Config(format!("human target {} outside [0, 1]", p.mu_first)));
        }
    }
    let meta = RewardMeta {
        vocab_fingerprint: vocab.fingerprint(),
        vocab_size: vocab.len(),
        phi: cfg.phi,
        action_form: cfg.action_form,
        net: cfg.net.clone(),
    };
    let mut store = ParamStore::new();
    let model = RewardModel::init(&mut store, meta, &mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0)))?;

    let refs: HashMap<&str, &Dialogue> = references.iter().map(|d| (d.id.as_str(), *d)).collect();
    let mut inputs = RewardInputs::default();
    let mut add = |r: &ScoredRollout| -> Result<usize, RewardError> {
        let d = refs.get(r.dialogue_id.as_str()).ok_or_else(|| RewardError::UnknownDialogue(r.dialogue_id.clone()))?;
        Ok(inputs.push(model.turn_inputs(vocab, d, &r.acts, &r.responses)?))
    };
    for r in rollouts {
        add(r)?;
    }
    let human_refs: Vec<PairRef> =
        human.iter().map(|p| Ok((add(&p.first)?, add(&p.second)?, p.mu_first))).collect::<Result<_, RewardError>>()?;

    let ids: BTreeSet<&str> = rollouts.iter().map(|r| r.dialogue_id.as_str()).collect();
    let mut ids: Vec<&str> = ids.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 2)));
    let n_val_ids = if ids.len() < 2 || cfg.val_fraction == 0.0 {
        0
    } else {
        ((ids.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, ids.len() - 1)
    };
    let val_ids: BTreeSet<&str> = ids[..n_val_ids].iter().copied().collect();
    let (val, train): (Vec<usize>, Vec<usize>) =
        (0..rollouts.len()).partition(|&i| val_ids.contains(rollouts[i].dialogue_id.as_str()));
    let usable = |i: usize| rollouts[i].metric.m.is_finite();
    let train: Vec<usize> = train.into_iter().filter(|&i| usable(i)).collect();
    let val: Vec<usize> = val.into_iter().filter(|&i| usable(i)).collect();
    let val_pairs: Vec<(usize, usize, f64, f64)> =
        draw_pairs(&val, rollouts, cfg.pairing, &mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 3)))
            .into_iter()
            .map(|(a, b)| (a, b, rollouts[a].metric.m, rollouts[b].metric.m))
            .filter(|(_, _, a, b)| a != b)
            .collect();
    let val_rollouts: Vec<usize> = {
        let s: BTreeSet<usize> = val_pairs.iter().flat_map(|p| [p.0, p.1]).collect();
        s.into_iter().collect()
    };
    if cfg.mix_prob < 1.0 && !train.iter().any(|&i| rollouts[i].metric.m != 0.0) {
        return Err(RewardError::NoUsablePairs);
    }
    if train.len() < 2 && cfg.mix_prob < 1.0 {
        return Err(RewardError::NoUsablePairs);
    }

    let mut log = RewardLog {
        n_rollouts: rollouts.len(),
        n_train_rollouts: train.len(),
        n_val_rollouts: val_rollouts.len(),
        n_val_pairs: val_pairs.len(),
        skipped_zero_pairs: 0,
        metric_pairs_used: 0,
        human_pairs_used: 0,
        steps: 0,
        evaluations: Vec::new(),
        best_accuracy: None,
        stopped_early: false,
    };
    let evaluate = |store: &ParamStore| -> Result<Option<f64>, RewardError> {
        if val_pairs.is_empty() {
            return Ok(None);
        }
        let s = rollout_scores(&model, store, &inputs, &val_rollouts)?;
        let map: HashMap<usize, f64> = val_rollouts.iter().copied().zip(s).collect();
        Ok(ranking_accuracy(&map, &val_pairs))
    };

    let mut order_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 4));
    let mut mix_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 5));
    let mut opt = OptimState::new(&store, cfg.adam);
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    let mut loss_acc = (0.0, 0usize);
    'epochs: for epoch in 0..cfg.max_epochs {
        let pairs = draw_pairs(&train, rollouts, cfg.pairing, &mut order_rng);
        let mut batch: Vec<PairRef> = Vec::with_capacity(cfg.batch_pairs);
        let slots = pairs.len();
        for (k, &c) in pairs.iter().enumerate() {
            if cfg.mix_prob > 0.0 && mix_rng.random_bool(cfg.mix_prob) {
                batch.push(human_refs[mix_rng.random_range(0..human_refs.len())]);
                log.human_pairs_used += 1;
            } else {
                match pair_target(rollouts[c.0].metric.m, rollouts[c.1].metric.m) {
                    Some(mu) => {
                        batch.push((c.0, c.1, mu));
                        log.metric_pairs_used += 1;
                    }
                    None => log.skipped_zero_pairs += 1,
                }
            }
            if batch.len() < cfg.batch_pairs && k + 1 < slots {
                continue;
            }
            if batch.is_empty() {
                continue;
            }
            let mut tape = Tape::new();
            let loss = batch_pair_loss(&mut tape, &model, &store, &inputs, &batch)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(RewardError::Config(format!("non-finite reward loss at step {}", log.steps)));
            }
            let mut grads = tape.backward(loss, &store)?;
            if let Some(c) = cfg.clip_norm {
                grads.clip_global_norm(c);
            }
            adam_step(&mut store, &grads, &mut opt)?;
            batch.clear();
            log.steps += 1;
            loss_acc.0 += value;
            loss_acc.1 += 1;
            if log.steps % cfg.eval_every == 0 {
                let acc = evaluate(&store)?;
                log.evaluations.push(EvalPoint {
                    step: log.steps,
                    epoch,
                    train_loss: loss_acc.0 / loss_acc.1 as f64,
                    val_accuracy: acc,
                });
                loss_acc = (0.0, 0);
                if let Some(a) = acc {
                    if best.as_ref().is_none_or(|(b, _)| a > *b) {
                        best = Some((a, store.clone()));
                        since_best = 0;
                    } else {
                        since_best += 1;
                        if since_best >= cfg.patience {
                            log.stopped_early = true;
                            break 'epochs;
                        }
                    }
                }
            }
        }
    }
    if log.steps == 0 {
        return Err(RewardError::NoUsablePairs);
    }
    let final_acc = evaluate(&store)?;
    if let Some(a) = final_acc {
        if best.as_ref().is_none_or(|(b, _)| a > *b) {
            best = Some((a, store.clone()));
        }
    }
    if let Some((a, s)) = best {
        log.best_accuracy = Some(a);
        store = s;
    }
    Ok(TrainedReward { model, store, log })
}

/// Writes `R(s_t, a_t, g)` for every turn of every dialogue, using each
/// dialogue's own acts or responses.
pub fn annotate_corpus(
    model: &RewardModel,
    store: &ParamStore,
    vocab: &Vocab,
    dialogues: &mut [Dialogue],
) -> Result<(), RewardError> {
    let fp = vocab.fingerprint();
    if fp != model.meta.vocab_fingerprint {
        return Err(RewardError::VocabMismatch { model: model.meta.vocab_fingerprint.clone(), corpus: fp });
    }
    for chunk in dialogues.chunks_mut(16) {
        let mut turns = Vec::new();
        for d in chunk.iter() {
            let acts: Vec<_> = d.turns.iter().map(|t| t.act_tokens.clone()).collect();
            let resps: Vec<_> = d.turns.iter().map(|t| t.resp_tokens.clone()).collect();
            turns.extend(model.turn_inputs(vocab, d, &acts, &resps)?);
        }
        let refs: Vec<_> = turns.iter().collect();
        let rewards = model.rewards(store, &refs)?;
        let mut it = rewards.into_iter();
        for d in chunk.iter_mut() {
            for t in &mut d.turns {
                t.learned_reward = it.next();
            }
        }
    }
    Ok(())
}
