//! One PASS/FAIL line per primary criterion; every criterion runs before the
//! suite asserts.
mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use caspi_core::analysis::reward_agreement;
use caspi_core::diffkit::Tape;
use caspi_core::metrics::combined_score;
use caspi_core::pipeline::{low_resource_run, run_stage, PipelineConfig, RunDir, Stage, StageOptions};
use caspi_core::policy::{ce_loss, loss_det, LossMode};
use caspi_core::prefreward::{pair_target, preference_prob, Phi};
use caspi_core::toywoz::{Corpus, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn combined_arithmetic() -> Outcome {
    let rows = [((96.8, 87.3, 19.10), 111.15), ((89.2, 77.9, 18.6), 102.15)];
    let got: Vec<f64> = rows.iter().map(|((i, s, b), _)| combined_score(*i, *s, *b)).collect();
    let pass = rows.iter().zip(&got).all(|((_, want), g)| (g - want).abs() <= 0.01);
    outcome(pass, format!("{:.4} and {:.4}", got[0], got[1]))
}

fn gradient_integrity() -> Outcome {
    let mut worst_reward: f64 = 0.0;
    let mut worst_policy: f64 = 0.0;
    for seed in 0..20 {
        for phi in [Phi::Identity, Phi::Exp] {
            worst_reward = worst_reward.max(common::reward_grad_error(seed, phi));
        }
        let fx = common::PolicyFixture::new(seed, 2, 4);
        for mode in [LossMode::CaspiFull, LossMode::DetOnly, LossMode::CeBaseline] {
            worst_policy = worst_policy.max(fx.grad_error(mode, 0.1));
        }
    }
    outcome(worst_reward < 1e-4 && worst_policy < 1e-4, format!("20 seeds, worst reward {worst_reward:.2e}, worst policy {worst_policy:.2e}"))
}

fn identifiability() -> Outcome {
    let acc = common::separable_accuracy(0);
    outcome(acc >= 0.95, format!("held-out ranking accuracy {acc:.4}"))
}

fn run(dir: &Path, cfg: &PipelineConfig, stage: Stage, mode: Option<LossMode>) {
    let run = RunDir::open(dir).unwrap();
    run_stage(&run, cfg, stage, &StageOptions { mode }).unwrap();
}

fn credit_assignment() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::default();
    for stage in [Stage::GenCorpus, Stage::TrainBaselines, Stage::TrainReward] {
        run(tmp.path(), &cfg, stage, None);
    }
    let annotated = Corpus::read_dialogues(&tmp.path().join("reward/annotated.jsonl")).unwrap();
    let ag = reward_agreement(annotated.iter().filter(|d| d.split == Split::Test));
    let rho = ag.spearman.unwrap_or(f64::NAN);
    let means: Vec<String> = ag.categories.iter().map(|(c, s)| format!("{c:?} {:.3}", s.mean_learned)).collect();
    outcome(ag.ordered() && rho >= 0.6, format!("ordered {}, spearman {rho:.3}, means [{}]", ag.ordered(), means.join(", ")))
}

fn low_resource() -> Outcome {
    let cfg = PipelineConfig::default();
    let corpus = caspi_core::toywoz::generate_corpus(&cfg.env, cfg.seed).unwrap();
    let mut diffs = Vec::new();
    for seed in 0..5 {
        let r = low_resource_run(&corpus, &cfg, 0.1, seed, &[LossMode::CeBaseline, LossMode::CaspiFull]).unwrap().unwrap();
        diffs.push(r.scores["caspi_full"].success - r.scores["ce_baseline"].success);
    }
    let wins = diffs.iter().filter(|d| **d > 0.0).count();
    let mut sorted = diffs.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[2];
    let shown: Vec<String> = diffs.iter().map(|d| format!("{d:+.3}")).collect();
    outcome(wins >= 4 && median > 0.0, format!("wins {wins}/5, median soft-success gain {median:+.4}, per seed [{}]", shown.join(", ")))
}

fn normalization_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100_000 {
        let (m1, m2) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
        let (r1, r2) = (rng.random_range(1e-3..50.0), rng.random_range(1e-3..50.0));
        if let (Some(a), Some(b)) = (pair_target(m1, m2), pair_target(m2, m1)) {
            worst = worst.max((a + b - 1.0).abs());
        }
        for phi in [Phi::Identity, Phi::Exp] {
            let p = preference_prob(r1, r2, phi).unwrap() + preference_prob(r2, r1, phi).unwrap();
            worst = worst.max((p - 1.0).abs());
        }
    }
    let mut shift: f64 = 0.0;
    for _ in 0..10_000 {
        let (r1, r2, c) = (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
        let d = preference_prob(r1, r2, Phi::Exp).unwrap() - preference_prob(r1 + c, r2 + c, Phi::Exp).unwrap();
        shift = shift.max(d.abs());
    }
    outcome(worst <= 1e-12 && shift <= 1e-12, format!("worst sum error {worst:.1e}, worst shift error {shift:.1e}"))
}

fn safe_improvement() -> Outcome {
    let mut worst_ratio: f64 = 0.0;
    let mut worst_kl: f64 = 0.0;
    let mut penalties_zero = true;
    for seed in 0..5 {
        let (r, kl, p) = common::mode_matched(seed);
        worst_ratio = worst_ratio.max(r);
        worst_kl = worst_kl.max(kl.abs());
        penalties_zero &= p == 0.0;
    }
    let mut bit_equal = true;
    for seed in 0..5 {
        let fx = common::PolicyFixture::new(seed, 3, 6);
        let turns = fx.refs();
        let mut a = Tape::new();
        let det = loss_det(&mut a, &fx.net, &fx.store, &turns, &vec![1.0; turns.len()]).unwrap();
        let mut b = Tape::new();
        let ce = ce_loss(&mut b, &fx.net, &fx.store, &turns).unwrap();
        bit_equal &= a.value(det).item().to_bits() == b.value(ce).item().to_bits();
    }
    let pass = worst_ratio <= 1e-12 && worst_kl <= 1e-12 && penalties_zero && bit_equal;
    outcome(pass, format!("max |ratio - 1| {worst_ratio:.1e}, max kl {worst_kl:.1e}, penalty zero {penalties_zero}, det == ce bits {bit_equal}"))
}

fn small_pipeline() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.env.n_train = 60;
    cfg.env.n_val = 12;
    cfg.env.n_test = 12;
    cfg.folds.k = 3;
    cfg.folds.epochs = 2;
    cfg.reward.max_epochs = 2;
    cfg.policy.train.epochs = 2;
    cfg.policy.seeds = vec![0, 1, 2];
    cfg
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["corpus", "eval/ce_baseline", "eval/caspi_full"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            out.push((p.strip_prefix(dir).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
        }
    }
    out
}

fn determinism() -> Outcome {
    let cfg = small_pipeline();
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let tmp = tempfile::tempdir().unwrap();
            for stage in [Stage::GenCorpus, Stage::TrainBaselines, Stage::TrainReward] {
                run(tmp.path(), &cfg, stage, None);
            }
            for mode in [LossMode::CeBaseline, LossMode::CaspiFull] {
                run(tmp.path(), &cfg, Stage::TrainPolicy, Some(mode));
                run(tmp.path(), &cfg, Stage::Evaluate, Some(mode));
            }
            artifacts(tmp.path())
        })
        .collect();
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    outcome(runs[0] == runs[1], format!("{} artifacts compared: {}", names.len(), names.join(", ")))
}

#[test]
fn primary_acceptance_criteria() {
    let criteria: [(&str, Duration, fn() -> Outcome); 8] = [
        ("combined-score arithmetic", Duration::from_secs(1), combined_arithmetic),
        ("gradient integrity", Duration::from_secs(60), gradient_integrity),
        ("preference identifiability", Duration::from_secs(120), identifiability),
        ("causal credit assignment", Duration::from_secs(15 * 60), credit_assignment),
        ("low-resource improvement", Duration::from_secs(30 * 60), low_resource),
        ("normalization laws", Duration::from_secs(60), normalization_laws),
        ("safe-improvement mechanics", Duration::from_secs(60), safe_improvement),
        ("determinism", Duration::from_secs(10 * 60), determinism),
    ];
    let mut failed = Vec::new();
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let o = check();
        let took = start.elapsed();
        let pass = o.pass && took <= budget;
        println!("{} {name} ({:.1}s, budget {}s): {}", if pass { "PASS" } else { "FAIL" }, took.as_secs_f64(), budget.as_secs(), o.detail);
        if !pass {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
