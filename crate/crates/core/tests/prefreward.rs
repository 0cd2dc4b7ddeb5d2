mod common;

use caspi_core::metrics::MetricConfig;
use caspi_core::pipeline::{run_stage, PipelineConfig, RunDir, Stage, StageOptions};
use caspi_core::policy::{LossMode, PolicyTrainConfig};
use caspi_core::prefreward::*;
use caspi_core::toywoz::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100_000))]

    #[test]
    fn targets_and_preferences_are_normalized(m1 in 0.0..5.0f64, m2 in 0.0..5.0f64, r1 in 1e-3..50.0f64, r2 in 1e-3..50.0f64) {
        if let Some(mu) = pair_target(m1, m2) {
            prop_assert!((mu + pair_target(m2, m1).unwrap() - 1.0).abs() <= 1e-12);
        } else {
            prop_assert!(m1 + m2 == 0.0);
        }
        for phi in [Phi::Identity, Phi::Exp] {
            let p = preference_prob(r1, r2, phi).unwrap();
            let q = preference_prob(r2, r1, phi).unwrap();
            prop_assert!((p + q - 1.0).abs() <= 1e-12, "{phi:?}: {p} + {q}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn exp_preference_ignores_a_common_shift(r1 in -20.0..20.0f64, r2 in -20.0..20.0f64, c in -20.0..20.0f64) {
        let a = preference_prob(r1, r2, Phi::Exp).unwrap();
        let b = preference_prob(r1 + c, r2 + c, Phi::Exp).unwrap();
        prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    #[test]
    fn preference_is_monotone_in_the_first_reward(r1 in 0.01..10.0f64, d in 0.01..5.0f64, r2 in 0.01..10.0f64) {
        for phi in [Phi::Identity, Phi::Exp] {
            prop_assert!(preference_prob(r1 + d, r2, phi).unwrap() > preference_prob(r1, r2, phi).unwrap());
        }
    }
}

#[test]
fn pair_loss_gradients_match_finite_differences() {
    for seed in 0..20 {
        for phi in [Phi::Identity, Phi::Exp] {
            let err = common::reward_grad_error(seed, phi);
            assert!(err < 1e-4, "seed {seed} {phi:?}: {err}");
        }
    }
}

#[test]
fn separable_preferences_are_identified() {
    let acc = common::separable_accuracy(0);
    assert!(acc >= 0.95, "held-out ranking accuracy {acc}");
}

fn harvest_fixture(k: usize, epochs: usize, n: usize, net: caspi_core::policy::PolicyNetConfig) -> (Corpus, HarvestReport, FoldSpec) {
    let (schema, corpus) = common::small_corpus(n, 5, false);
    let train: Vec<&Dialogue> = corpus.split(Split::Train).collect();
    let ids: Vec<String> = train.iter().map(|d| d.id.clone()).collect();
    let spec = kfold_split(&ids, k, 1).unwrap();
    let base = PolicyTrainConfig {
        mode: LossMode::CeBaseline,
        epochs,
        net,
        ..PolicyTrainConfig::default()
    };
    let h = harvest(&schema, &corpus.vocab, &train, &spec, &base, &MetricConfig::default(), 2).unwrap();
    (corpus, h, spec)
}

#[test]
fn harvest_cardinality_law() {
    let tiny = caspi_core::policy::PolicyNetConfig { embed: 8, hidden: 8, mlp: 16 };
    let (_, h, spec) = harvest_fixture(2, 1, 10, tiny.clone());
    assert!(h.aborted.is_empty());
    assert_eq!(h.rollouts.len(), 10);
    let (_, h, spec3) = harvest_fixture(3, 2, 14, tiny);
    let expected: usize = spec3.folds.iter().map(|f| 2 * f.val.len()).sum();
    assert_eq!(h.rollouts.len(), expected);
    assert_eq!(spec.folds.iter().map(|f| f.val.len()).collect::<Vec<_>>(), vec![5, 5]);
}

#[test]
fn later_epochs_score_higher_than_the_first() {
    let (_, h, _) = harvest_fixture(3, 5, 300, Default::default());
    let first = h.mean_m_at_epoch(0).unwrap();
    let last = h.mean_m_at_epoch(4).unwrap();
    assert!(first < last, "epoch 0 mean M {first} vs final {last}");
}

#[test]
fn reference_rollouts_score_the_maximum() {
    let (schema, corpus) = common::small_corpus(20, 9, false);
    let cfg = MetricConfig::default();
    for d in &corpus.dialogues {
        let s = caspi_core::metrics::training_metric(&schema, d, &caspi_core::metrics::PredictedDialogue::replay(d), &cfg).unwrap();
        assert_eq!(s.m, 2.0 + cfg.lambda);
    }
}

fn tiny_reward() -> RewardConfig {
    RewardConfig {
        net: RewardNetConfig { embed: 6, hidden: 6, head: vec![8] },
        max_epochs: 2,
        eval_every: 10,
        ..RewardConfig::default()
    }
}

#[test]
fn mixing_rules() {
    let (_, corpus) = common::small_corpus(40, 4, false);
    let train: Vec<&Dialogue> = corpus.split(Split::Train).collect();
    let rollouts = common::separable_rollouts(&train, 3, 1);
    let human = vec![HumanPair { first: rollouts[0].clone(), second: rollouts[1].clone(), mu_first: 0.9 }];

    let cfg = tiny_reward();
    let a = train_reward(&rollouts, &[], &train, &corpus.vocab, &cfg, 3).unwrap();
    let b = train_reward(&rollouts, &human, &train, &corpus.vocab, &cfg, 3).unwrap();
    assert_eq!(a.store.to_checkpoint_bytes(), b.store.to_checkpoint_bytes());
    assert_eq!(a.log, b.log);

    let all_human = RewardConfig { mix_prob: 1.0, ..cfg.clone() };
    assert!(matches!(train_reward(&rollouts, &[], &train, &corpus.vocab, &all_human, 3), Err(RewardError::NoHumanPairs(_))));
    let t = train_reward(&rollouts, &human, &train, &corpus.vocab, &all_human, 3).unwrap();
    assert_eq!(t.log.metric_pairs_used, 0);
    assert!(t.log.human_pairs_used > 0);
}

#[test]
fn annotation_is_bounded_and_repeatable() {
    let (_, corpus) = common::small_corpus(30, 6, false);
    let train: Vec<&Dialogue> = corpus.split(Split::Train).collect();
    let rollouts = common::separable_rollouts(&train, 3, 2);
    let t = train_reward(&rollouts, &[], &train, &corpus.vocab, &tiny_reward(), 1).unwrap();
    let mut once: Vec<Dialogue> = corpus.dialogues.clone();
    annotate_corpus(&t.model, &t.store, &corpus.vocab, &mut once).unwrap();
    let mut twice = once.clone();
    annotate_corpus(&t.model, &t.store, &corpus.vocab, &mut twice).unwrap();
    assert_eq!(once, twice);
    for d in &once {
        for turn in &d.turns {
            let r = turn.learned_reward.unwrap();
            assert!(r > 0.0 && r < 1.0, "{r}");
        }
    }
}

/// Runs the default stages up to reward training on a corpus whose expert
/// never adds niceties or redundant turns, then checks the learned reward
/// ordering across turn categories on held-out dialogues.
#[test]
fn noise_off_expert_rewards_follow_turn_categories() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.env.expert.p_nicety = 0.0;
    cfg.env.expert.p_redundant = 0.0;
    {
        let run = RunDir::open(tmp.path()).unwrap();
        for stage in [Stage::GenCorpus, Stage::TrainBaselines, Stage::TrainReward] {
            run_stage(&run, &cfg, stage, &StageOptions::default()).unwrap();
        }
    }
    let annotated = Corpus::read_dialogues(&tmp.path().join("reward/annotated.jsonl")).unwrap();
    let ag = caspi_analysis(&annotated);
    assert!(ag.ordered(), "{:?}", ag.categories);
}

fn caspi_analysis(dialogues: &[Dialogue]) -> caspi_core::analysis::RewardAgreement {
    caspi_core::analysis::reward_agreement(dialogues.iter().filter(|d| d.split == Split::Test))
}
