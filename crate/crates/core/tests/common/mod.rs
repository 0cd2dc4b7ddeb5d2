//! Fixtures shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeSet;

use caspi_core::diffkit::{grad_check, DiffError, ParamStore};
use caspi_core::metrics::ActionForm;
use caspi_core::policy::*;
use caspi_core::prefreward::*;
use caspi_core::toywoz::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_corpus(n_train: usize, seed: u64, noise_off: bool) -> (Schema, Corpus) {
    let mut cfg = EnvConfig { n_train, n_val: 20, n_test: 20, ..EnvConfig::default() };
    if noise_off {
        cfg.expert.p_nicety = 0.0;
        cfg.expert.p_redundant = 0.0;
    }
    (cfg.schema().unwrap(), generate_corpus(&cfg, seed).unwrap())
}

/// Closed vocabulary over everything the models read from `dialogues`.
pub fn local_vocab(dialogues: &[Dialogue], extra_acts: &[Vec<ActToken>]) -> Vocab {
    let mut toks: BTreeSet<String> = [EMPTY_RESPONSE.to_string()].into();
    for d in dialogues {
        toks.extend(d.goal.tokens());
        for t in &d.turns {
            toks.extend(t.belief.tokens());
            toks.extend(t.user_tokens.iter().cloned());
            toks.extend(t.resp_tokens.iter().cloned());
            toks.extend(act_words(&t.act_tokens));
        }
    }
    for a in extra_acts {
        toks.extend(act_words(a));
    }
    Vocab::from_tokens(toks)
}

fn truncated(d: &Dialogue, turns: usize) -> Dialogue {
    let mut d = d.clone();
    d.turns.truncate(turns);
    d
}

fn diff(e: impl std::fmt::Display) -> DiffError {
    DiffError::Checkpoint(format!("loss construction failed: {e}"))
}

/// Worst relative gradient error of the mean pair loss on a two-dialogue,
/// four-rollout minibatch with freshly seeded weights.
pub fn reward_grad_error(seed: u64, phi: Phi) -> f64 {
    let (_, corpus) = small_corpus(6, 100 + seed, false);
    let refs: Vec<Dialogue> = corpus.dialogues.iter().take(2).map(|d| truncated(d, 3)).collect();
    let vocab = local_vocab(&refs, &[]);
    let meta = RewardMeta {
        vocab_fingerprint: vocab.fingerprint(),
        vocab_size: vocab.len(),
        phi,
        action_form: ActionForm::Act,
        net: RewardNetConfig { embed: 3, hidden: 3, head: vec![4] },
    };
    let mut store = ParamStore::new();
    let model = RewardModel::init(&mut store, meta, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut inputs = RewardInputs::default();
    for d in &refs {
        let acts: Vec<Vec<ActToken>> = d.turns.iter().map(|t| t.act_tokens.clone()).collect();
        let mut corrupted = acts.clone();
        corrupted[1] = acts[0].clone();
        corrupted[2] = Vec::new();
        for a in [acts, corrupted] {
            let resp = vec![Vec::new(); a.len()];
            inputs.push(model.turn_inputs(&vocab, d, &a, &resp).unwrap());
        }
    }
    let pairs: Vec<PairRef> = vec![(0, 1, 0.8), (2, 3, 0.35), (1, 2, 0.5), (3, 0, 0.1)];
    let report = grad_check(&store, 1e-5, |t, s| batch_pair_loss(t, &model, s, &inputs, &pairs).map_err(diff)).unwrap();
    report.max_relative_error
}

/// A tiny policy with a behavior table over two short dialogues.
pub struct PolicyFixture {
    pub net: PolicyNet,
    pub store: ParamStore,
    pub turns: Vec<EncodedTurn>,
    pub table: BehaviorTable,
    pub returns: Vec<f64>,
}

impl PolicyFixture {
    pub fn new(seed: u64, n_dialogues: usize, max_turns: usize) -> Self {
        let (_, corpus) = small_corpus(n_dialogues.max(2), 200 + seed, false);
        let ds: Vec<Dialogue> = corpus.dialogues.iter().take(n_dialogues).map(|d| truncated(d, max_turns)).collect();
        let vocab = local_vocab(&ds, &[]);
        let acts: BTreeSet<ActToken> = ds.iter().flat_map(|d| d.turns.iter().flat_map(|t| t.act_tokens.clone())).collect();
        let cfg = PolicyNetConfig { embed: 3, hidden: 3, mlp: 4 };
        let mut store = ParamStore::new();
        let net = PolicyNet::init(&mut store, vocab.len(), acts.into_iter().collect(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let turns: Vec<EncodedTurn> = ds.iter().flat_map(|d| net.encode_dialogue(&vocab, d).unwrap().turns).collect();
        let table = BehaviorTable::estimate(&ds, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        let returns = turns.iter().map(|_| rng.random_range(0.1..2.0)).collect();
        Self { net, store, turns, table, returns }
    }

    pub fn refs(&self) -> Vec<&EncodedTurn> {
        self.turns.iter().collect()
    }

    pub fn grad_error(&self, mode: LossMode, eta: f64) -> f64 {
        let turns = self.refs();
        let view = behavior_view(&self.net, &self.table, &turns).unwrap();
        let report = grad_check(&self.store, 1e-5, |t, s| {
            total_loss(t, &self.net, s, &turns, mode, &self.returns, Some(&view), 1.0, eta).map(|p| p.total).map_err(diff)
        })
        .unwrap();
        report.max_relative_error
    }
}

/// Rollouts over `dialogues` that keep the expert act on a random subset of
/// turns and emit a filler act elsewhere. The metric is the number of turns
/// matching the reference, so any additive reward that prefers expert turns ranks pairs
/// perfectly.
pub fn separable_rollouts(dialogues: &[&Dialogue], per_dialogue: usize, seed: u64) -> Vec<ScoredRollout> {
    let filler = vec![ActToken::new(ActType::Nicety, GENERAL, NO_SLOT)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for d in dialogues {
        let n = d.turns.len();
        let mut ks: Vec<usize> = (0..=n).collect();
        ks.shuffle(&mut rng);
        for &k in ks.iter().take(per_dialogue) {
            let mut keep: Vec<usize> = (0..n).collect();
            keep.shuffle(&mut rng);
            keep.truncate(k);
            let acts: Vec<Vec<ActToken>> =
                (0..n).map(|t| if keep.contains(&t) { d.turns[t].act_tokens.clone() } else { filler.clone() }).collect();
            let m = acts.iter().zip(&d.turns).filter(|(a, t)| **a == t.act_tokens).count() as f64;
            out.push(ScoredRollout {
                dialogue_id: d.id.clone(),
                fold: 0,
                epoch: 0,
                responses: vec![Vec::new(); n],
                acts,
                metric: RolloutMetric { inform: 0.0, success: 0.0, bleu: 0.0, m },
            });
        }
    }
    out
}

/// Held-out ranking accuracy of a reward model trained on a separable
/// preference dataset.
pub fn separable_accuracy(seed: u64) -> f64 {
    let (_, corpus) = small_corpus(150, 300 + seed, false);
    let train: Vec<&Dialogue> = corpus.split(Split::Train).collect();
    let rollouts = separable_rollouts(&train, 4, seed);
    let cfg = RewardConfig {
        net: RewardNetConfig { embed: 8, hidden: 8, head: vec![16] },
        max_epochs: 8,
        eval_every: 20,
        val_fraction: 0.2,
        ..RewardConfig::default()
    };
    let t = train_reward(&rollouts, &[], &train, &corpus.vocab, &cfg, seed).unwrap();
    assert!(t.log.n_val_pairs >= 20, "{:?}", t.log);
    t.log.best_accuracy.unwrap()
}

/// Largest `|ratio - 1|`, the KL term and the hinge penalty after fitting the
/// policy head to reproduce the behavior distribution of one belief key.
pub fn mode_matched(seed: u64) -> (f64, f64, f64) {
    let mut fx = PolicyFixture::new(seed, 4, 6);
    let (key, _) = fx
        .turns
        .iter()
        .map(|t| (t.belief_key.clone(), fx.table.entropy(&t.belief_key)))
        .fold((String::new(), -1.0), |a, b| if b.1 > a.1 { b } else { a });
    let keep: Vec<bool> = fx.turns.iter().map(|t| t.belief_key == key).collect();
    fx.returns = fx.returns.iter().zip(&keep).filter(|(_, k)| **k).map(|(g, _)| *g).collect();
    fx.turns.retain(|t| t.belief_key == key);
    let target = fx.table.distribution(&key);
    let gap = fit_head_to_distribution(&fx.net, &mut fx.store, &fx.table, &target).unwrap();
    assert!(gap < 1e-12, "head fit gap {gap}");
    let turns = fx.refs();
    let view = behavior_view(&fx.net, &fx.table, &turns).unwrap();
    let mut tape = caspi_core::diffkit::Tape::new();
    let sto = loss_sto(&mut tape, &fx.net, &fx.store, &turns, &view, &fx.returns, 1.0, 0.1).unwrap();
    let ratio = tape.value(sto.ratio).data().iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
    (ratio, tape.value(sto.kl).item(), tape.value(sto.penalty).item())
}
