//! Target-policy learning: a factorized act head over observation encoders, the
//! belief-conditioned behavior table, the stochastic and deterministic
//! safe-improvement losses, reward-weighted likelihood, decoding and evaluation.

mod behavior;
mod loss;
mod train;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::diffkit::{BiGruEncoder, DiffError, Linear, NodeId, ParamStore, Tape, Tensor};
use crate::toywoz::{ActToken, Dialogue, Vocab};

pub use behavior::{kl_divergence, BehaviorTable};
pub use loss::{
    behavior_view, ce_loss, discounted_return, fit_head_to_distribution, loss_det, loss_sto, nll_per_turn,
    sample_weighted_loss, total_loss, BehaviorView, LossParts, StoTerms,
};
pub use train::{
    decode_act, evaluate_policy, predict, subsample, train_policy, EpochLog, PolicyTrace, PolicyTrainConfig, TrainLog,
    TrainedPolicy,
};

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("token `{0}` is not in the vocabulary")]
    UnknownToken(String),
    #[error("act token {0} is outside the act vocabulary")]
    UnknownAct(String),
    #[error("dialogue `{dialogue}` turn {turn} has no learned reward")]
    MissingReward { dialogue: String, turn: usize },
    #[error("behavior probability is zero for an observed act (smoothing disabled?)")]
    ZeroBehavior,
    #[error("act {0} is not in the behavior table")]
    UnknownBehaviorAct(String),
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint does not match the policy layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    CaspiFull,
    DetOnly,
    CeBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyNetConfig {
    pub embed: usize,
    pub hidden: usize,
    pub mlp: usize,
}

impl Default for PolicyNetConfig {
    fn default() -> Self {
        Self { embed: 16, hidden: 16, mlp: 64 }
    }
}

/// Everything needed to rebuild a policy around a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyMeta {
    pub vocab_fingerprint: String,
    pub vocab_size: usize,
    pub acts: Vec<ActToken>,
    pub net: PolicyNetConfig,
    pub mode: LossMode,
    pub threshold: f64,
}

/// Which observation parts feed the act head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// User utterance and previous response masked to zeros.
    BeliefOnly,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub acts: Vec<ActToken>,
    pub belief: BiGruEncoder,
    pub user: BiGruEncoder,
    pub prev: BiGruEncoder,
    pub hidden: Linear,
    pub head: Linear,
    act_index: HashMap<ActToken, usize>,
}

/// One reference turn prepared for the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTurn {
    pub belief: Vec<u32>,
    pub user: Vec<u32>,
    pub prev: Vec<u32>,
    pub belief_key: String,
    pub act: Vec<ActToken>,
    /// Multi-hot target over the act vocabulary.
    pub target: Vec<f64>,
    pub learned_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDialogue {
    pub id: String,
    pub turns: Vec<EncodedTurn>,
}

impl PolicyNet {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        vocab_size: usize,
        acts: Vec<ActToken>,
        cfg: &PolicyNetConfig,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let belief = BiGruEncoder::init(store, "policy.belief", vocab_size, cfg.embed, cfg.hidden, rng)?;
        let user = BiGruEncoder::init(store, "policy.user", vocab_size, cfg.embed, cfg.hidden, rng)?;
        let prev = BiGruEncoder::init(store, "policy.prev", vocab_size, cfg.embed, cfg.hidden, rng)?;
        let width = belief.output_dim() + user.output_dim() + prev.output_dim();
        let hidden = Linear::init(store, "policy.mlp", width, cfg.mlp, rng)?;
        let head = Linear::init(store, "policy.head", cfg.mlp, acts.len(), rng)?;
        let act_index = acts.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        Ok(Self { acts, belief, user, prev, hidden, head, act_index })
    }

    /// Rebuilds the network structure for a loaded checkpoint.
    pub fn for_checkpoint(store: &ParamStore, meta: &PolicyMeta) -> Result<Self, PolicyError> {
        let mut scratch = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let net = Self::init(&mut scratch, meta.vocab_size, meta.acts.clone(), &meta.net, &mut rng)?;
        match store.layout_mismatch(&scratch) {
            Some(m) => Err(PolicyError::Layout(m)),
            None => Ok(net),
        }
    }

    pub fn act_position(&self, tok: &ActToken) -> Option<usize> {
        self.act_index.get(tok).copied()
    }

    pub fn encode_dialogue(&self, vocab: &Vocab, d: &Dialogue) -> Result<EncodedDialogue, PolicyError> {
        let ids = |toks: &[String]| vocab.encode(toks).map_err(PolicyError::UnknownToken);
        let mut turns = Vec::with_capacity(d.turns.len());
        for (i, t) in d.turns.iter().enumerate() {
            let mut target = vec![0.0; self.acts.len()];
            for a in &t.act_tokens {
                let k = self.act_position(a).ok_or_else(|| PolicyError::UnknownAct(a.to_string()))?;
                target[k] = 1.0;
            }
            turns.push(EncodedTurn {
                belief: ids(&t.belief.tokens())?,
                user: ids(&t.user_tokens)?,
                prev: ids(&d.prev_response(i))?,
                belief_key: t.belief.key(),
                act: t.act_tokens.clone(),
                target,
                learned_reward: t.learned_reward,
            });
        }
        Ok(EncodedDialogue { id: d.id.clone(), turns })
    }

    /// Act-head logits, one row per turn. Identical token sequences within the
    /// batch are encoded once.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, turns: &[&EncodedTurn], pass: Pass) -> Result<NodeId, DiffError> {
        let b = self.belief.encode_many(tape, store, turns.iter().map(|t| t.belief.as_slice()))?;
        let (u, p) = match pass {
            Pass::Full => (
                self.user.encode_many(tape, store, turns.iter().map(|t| t.user.as_slice()))?,
                self.prev.encode_many(tape, store, turns.iter().map(|t| t.prev.as_slice()))?,
            ),
            Pass::BeliefOnly => (
                tape.constant(Tensor::zeros(turns.len(), self.user.output_dim())),
                tape.constant(Tensor::zeros(turns.len(), self.prev.output_dim())),
            ),
        };
        let x = tape.concat_cols(&[b, u, p])?;
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.tanh(h);
        self.head.forward(tape, store, h)
    }

    /// Per-token probabilities for every turn, full observation.
    pub fn probabilities(&self, store: &ParamStore, turns: &[&EncodedTurn]) -> Result<Tensor, DiffError> {
        let mut tape = Tape::new();
        let l = self.logits(&mut tape, store, turns, Pass::Full)?;
        let s = tape.sigmoid(l);
        Ok(tape.value(s).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toywoz::{generate_corpus, EnvConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn belief_only_pass_ignores_user_and_response() {
        let cfg = EnvConfig { n_train: 5, n_val: 0, n_test: 0, ..EnvConfig::default() };
        let corpus = generate_corpus(&cfg, 1).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let acts = cfg.schema().unwrap().act_inventory();
        let net = PolicyNet::init(&mut store, corpus.vocab.len(), acts, &PolicyNetConfig::default(), &mut rng).unwrap();
        let d = net.encode_dialogue(&corpus.vocab, &corpus.dialogues[0]).unwrap();
        let mut altered = d.turns[1].clone();
        altered.user = vec![0, 1, 2];
        altered.prev = vec![3];
        let run = |t: &EncodedTurn, pass| {
            let mut tape = Tape::new();
            let l = net.logits(&mut tape, &store, &[t], pass).unwrap();
            tape.value(l).clone()
        };
        assert_eq!(run(&d.turns[1], Pass::BeliefOnly), run(&altered, Pass::BeliefOnly));
        assert_ne!(run(&d.turns[1], Pass::Full), run(&altered, Pass::Full));
    }

    #[test]
    fn batch_encoding_matches_individual() {
        let cfg = EnvConfig { n_train: 3, n_val: 0, n_test: 0, ..EnvConfig::default() };
        let corpus = generate_corpus(&cfg, 2).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let acts = cfg.schema().unwrap().act_inventory();
        let net = PolicyNet::init(&mut store, corpus.vocab.len(), acts, &PolicyNetConfig::default(), &mut rng).unwrap();
        let d = net.encode_dialogue(&corpus.vocab, &corpus.dialogues[0]).unwrap();
        let all: Vec<&EncodedTurn> = d.turns.iter().collect();
        let batch = net.probabilities(&store, &all).unwrap();
        for (i, t) in d.turns.iter().enumerate() {
            let single = net.probabilities(&store, &[t]).unwrap();
            assert_eq!(single.row_slice(0), batch.row_slice(i));
        }
    }
}
