use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Phi, RewardError};
use crate::diffkit::{BiGruEncoder, DiffError, Linear, NodeId, ParamStore, Tape, Tensor};
use crate::metrics::ActionForm;
use crate::toywoz::{act_words, ActToken, Dialogue, Vocab, EMPTY_RESPONSE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardNetConfig {
    pub embed: usize,
    /// Per direction.
    pub hidden: usize,
    /// Widths of the tanh layers between the encoders and the sigmoid output.
    pub head: Vec<usize>,
}

impl Default for RewardNetConfig {
    fn default() -> Self {
        Self { embed: 32, hidden: 64, head: vec![128, 64] }
    }
}

/// Everything needed to rebuild a reward model around a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardMeta {
    pub vocab_fingerprint: String,
    pub vocab_size: usize,
    pub phi: Phi,
    pub action_form: ActionForm,
    pub net: RewardNetConfig,
}

/// Token ids of one `(goal, belief, action)` turn.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RewardTurn {
    pub goal: Vec<u32>,
    pub belief: Vec<u32>,
    pub action: Vec<u32>,
}

/// Deduplicated turns plus, per rollout, indices into them.
#[derive(Debug, Clone, Default)]
pub struct RewardInputs {
    pub turns: Vec<RewardTurn>,
    pub rollouts: Vec<Vec<usize>>,
    index: HashMap<RewardTurn, usize>,
}

impl RewardInputs {
    pub fn push(&mut self, turns: Vec<RewardTurn>) -> usize {
        let ids = turns
            .into_iter()
            .map(|t| {
                let next = self.turns.len();
                *self.index.entry(t.clone()).or_insert_with(|| {
                    self.turns.push(t);
                    next
                })
            })
            .collect();
        self.rollouts.push(ids);
        self.rollouts.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub meta: RewardMeta,
    pub goal: BiGruEncoder,
    pub belief: BiGruEncoder,
    pub action: BiGruEncoder,
    pub head: Vec<Linear>,
    pub out: Linear,
}

impl RewardModel {
    pub fn init<R: Rng>(store: &mut ParamStore, meta: RewardMeta, rng: &mut R) -> Result<Self, DiffError> {
        let n = &meta.net;
        let goal = BiGruEncoder::init(store, "reward.goal", meta.vocab_size, n.embed, n.hidden, rng)?;
        let belief = BiGruEncoder::init(store, "reward.belief", meta.vocab_size, n.embed, n.hidden, rng)?;
        let action = BiGruEncoder::init(store, "reward.action", meta.vocab_size, n.embed, n.hidden, rng)?;
        let mut width = 3 * goal.output_dim();
        let mut head = Vec::new();
        for (i, &w) in n.head.iter().enumerate() {
            head.push(Linear::init(store, &format!("reward.head{i}"), width, w, rng)?);
            width = w;
        }
        let out = Linear::init(store, "reward.out", width, 1, rng)?;
        Ok(Self { meta, goal, belief, action, head, out })
    }

    /// Rebuilds the model structure for a loaded checkpoint, checking that
    /// every parameter id and shape matches.
    pub fn for_checkpoint(store: &ParamStore, meta: RewardMeta) -> Result<Self, RewardError> {
        let mut scratch = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Self::init(&mut scratch, meta, &mut rng)?;
        check_layout(&scratch, store)?;
        Ok(model)
    }

    /// Turn inputs for a rollout conditioned on `reference`.
    pub fn turn_inputs(
        &self,
        vocab: &Vocab,
        reference: &Dialogue,
        acts: &[Vec<ActToken>],
        responses: &[Vec<String>],
    ) -> Result<Vec<RewardTurn>, RewardError> {
        let n = reference.turns.len();
        let got = match self.meta.action_form {
            ActionForm::Act => acts.len(),
            ActionForm::Resp => responses.len(),
        };
        if got != n {
            return Err(RewardError::TurnCount { dialogue: reference.id.clone(), got, expected: n });
        }
        let ids = |toks: &[String]| vocab.encode(toks).map_err(RewardError::UnknownToken);
        let goal = ids(&reference.goal.tokens())?;
        let mut out = Vec::with_capacity(n);
        for (t, turn) in reference.turns.iter().enumerate() {
            let mut action = match self.meta.action_form {
                ActionForm::Act => act_words(&acts[t]),
                ActionForm::Resp => responses[t].clone(),
            };
            if action.is_empty() {
                action.push(EMPTY_RESPONSE.into());
            }
            out.push(RewardTurn { goal: goal.clone(), belief: ids(&turn.belief.tokens())?, action: ids(&action)? });
        }
        Ok(out)
    }

    /// Per-turn rewards in `(0, 1)` as an `N x 1` column.
    pub fn turn_rewards(&self, tape: &mut Tape, store: &ParamStore, turns: &[&RewardTurn]) -> Result<NodeId, DiffError> {
        let g = self.goal.encode_many(tape, store, turns.iter().map(|t| t.goal.as_slice()))?;
        let b = self.belief.encode_many(tape, store, turns.iter().map(|t| t.belief.as_slice()))?;
        let a = self.action.encode_many(tape, store, turns.iter().map(|t| t.action.as_slice()))?;
        let mut h = tape.concat_cols(&[g, b, a])?;
        for layer in &self.head {
            let z = layer.forward(tape, store, h)?;
            h = tape.tanh(z);
        }
        let o = self.out.forward(tape, store, h)?;
        Ok(tape.sigmoid(o))
    }

    pub fn rewards(&self, store: &ParamStore, turns: &[&RewardTurn]) -> Result<Vec<f64>, DiffError> {
        if turns.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let r = self.turn_rewards(&mut tape, store, turns)?;
        Ok(tape.value(r).data().to_vec())
    }

    /// Rollout sums `S r` where `S[i][j]` counts unique turn `j` in rollout `i`.
    pub fn rollout_sums(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &RewardInputs,
        rollouts: &[usize],
    ) -> Result<NodeId, DiffError> {
        let mut local: HashMap<usize, usize> = HashMap::new();
        let mut turns: Vec<&RewardTurn> = Vec::new();
        for &r in rollouts {
            for &u in &inputs.rollouts[r] {
                local.entry(u).or_insert_with(|| {
                    turns.push(&inputs.turns[u]);
                    turns.len() - 1
                });
            }
        }
        let mut seg = Tensor::zeros(rollouts.len(), turns.len());
        for (i, &r) in rollouts.iter().enumerate() {
            for u in &inputs.rollouts[r] {
                let j = local[u];
                seg.set(i, j, seg.get(i, j) + 1.0);
            }
        }
        let rewards = self.turn_rewards(tape, store, &turns)?;
        let seg = tape.constant(seg);
        tape.matmul(seg, rewards)
    }
}

pub(crate) fn check_layout(expected: &ParamStore, got: &ParamStore) -> Result<(), RewardError> {
    got.layout_mismatch(expected).map_or(Ok(()), |m| Err(RewardError::Layout(m)))
}
