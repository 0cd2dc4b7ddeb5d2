use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::report::{mode_name, render_table, EvalReport, PipelineReport};
use super::{median_index, ManifestEntry, PipelineConfig, PipelineError, RunDir};
use crate::analysis::reward_agreement;
use crate::diffkit::ParamStore;
use crate::io::{file_digest, from_json_lines, mix_seed, to_json_lines, write_atomic};
use crate::labels::{human_pairs, read_candidates, read_journal, CandidatePair, ContextTurn, TaskContext, TaskRecord};
use crate::metrics::{training_metric, MetricScore, PredictedDialogue};
use crate::policy::{
    evaluate_policy, predict, subsample, train_policy, LossMode, PolicyMeta, PolicyNet, PolicyTrace, PolicyTrainConfig,
};
use crate::prefreward::{
    annotate_corpus, harvest, kfold_split, train_reward, FoldEpochSummary, HumanPair, ScoredRollout,
};
use crate::toywoz::{generate_corpus, Corpus, Dialogue, Goal, Schema, Split, Vocab, CORPUS_FILE, META_FILE, VOCAB_FILE};

const CORPUS_DIR: &str = "corpus";
const FOLDS: &str = "baselines/folds.json";
const DP: &str = "baselines/dp.jsonl";
const HARVEST: &str = "baselines/harvest.json";
const REWARD_CKPT: &str = "reward/reward.ckpt";
const REWARD_META: &str = "reward/reward_meta.json";
const REWARD_LOG: &str = "reward/reward_log.json";
const ANNOTATED: &str = "reward/annotated.jsonl";
const REPORT_JSON: &str = "report/report.json";
const REPORT_TXT: &str = "report/report.txt";
const SWEEP_JSON: &str = "sweep/sweep.json";
const SWEEP_TXT: &str = "sweep/sweep.txt";
const TASKS: &str = "hitl/tasks.jsonl";
const CANDIDATES: &str = "hitl/candidates.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    GenCorpus,
    TrainBaselines,
    TrainReward,
    TrainPolicy,
    Evaluate,
    Report,
    Sweep,
    ExportPairs,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenCorpus,
        Stage::TrainBaselines,
        Stage::TrainReward,
        Stage::TrainPolicy,
        Stage::Evaluate,
        Stage::Report,
        Stage::Sweep,
        Stage::ExportPairs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::TrainBaselines => "train-baselines",
            Stage::TrainReward => "train-reward",
            Stage::TrainPolicy => "train-policy",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
            Stage::Sweep => "sweep",
            Stage::ExportPairs => "export-pairs",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, Default)]
pub struct StageOptions {
    /// Overrides `policy.train.mode` for `train-policy` and `evaluate`.
    pub mode: Option<LossMode>,
}

/// Per-stage bookkeeping: inputs checked against the manifest and outputs
/// written atomically.
struct Ctx<'a> {
    dir: &'a RunDir,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl<'a> Ctx<'a> {
    fn input(&mut self, rel: &str) -> Result<PathBuf, PipelineError> {
        let d = self.dir.check_input(rel)?;
        self.inputs.insert(rel.to_string(), d);
        Ok(self.dir.path(rel))
    }

    /// Records an input produced outside the pipeline without a manifest check.
    fn external_input(&mut self, label: &str, path: &Path) -> Result<(), PipelineError> {
        if !path.exists() {
            return Err(PipelineError::MissingArtifact { path: path.display().to_string(), expected: None });
        }
        let d = file_digest(path).map_err(|e| PipelineError::io(path, e))?;
        self.inputs.insert(label.to_string(), d);
        Ok(())
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.dir.path(rel);
        write_atomic(&path, bytes).map_err(|e| PipelineError::io(&path, e))?;
        self.outputs.push(rel.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), PipelineError> {
        let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    fn write_lines<T: Serialize>(&mut self, rel: &str, items: &[T]) -> Result<(), PipelineError> {
        let bytes = to_json_lines(items).expect("artifact serializes");
        self.write(rel, &bytes)
    }

    fn corpus(&mut self, dialogue_file: Option<&str>) -> Result<Corpus, PipelineError> {
        for f in [CORPUS_FILE, VOCAB_FILE, META_FILE] {
            self.input(&format!("{CORPUS_DIR}/{f}"))?;
        }
        let mut corpus = Corpus::load(&self.dir.path(CORPUS_DIR), CORPUS_FILE).map_err(corrupt(CORPUS_DIR))?;
        if let Some(rel) = dialogue_file {
            let path = self.input(rel)?;
            corpus.dialogues = Corpus::read_dialogues(&path).map_err(corrupt(rel))?;
        }
        Ok(corpus)
    }
}

fn corrupt<E: fmt::Display>(rel: &str) -> impl Fn(E) -> PipelineError + '_ {
    move |e| PipelineError::Corrupt { path: rel.to_string(), reason: e.to_string() }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, rel: &str) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(corrupt(rel))
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path, rel: &str) -> Result<Vec<T>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    from_json_lines(&text).map_err(corrupt(rel))
}

/// Runs one stage inside a locked run directory and appends its manifest entry.
pub fn run_stage(dir: &RunDir, cfg: &PipelineConfig, stage: Stage, opts: &StageOptions) -> Result<ManifestEntry, PipelineError> {
    cfg.validate()?;
    let start = Instant::now();
    let mut ctx = Ctx { dir, inputs: BTreeMap::new(), outputs: Vec::new() };
    let mode = opts.mode.unwrap_or(cfg.policy.train.mode);
    match stage {
        Stage::GenCorpus => gen_corpus(&mut ctx, cfg)?,
        Stage::TrainBaselines => train_baselines(&mut ctx, cfg)?,
        Stage::TrainReward => train_reward_stage(&mut ctx, cfg)?,
        Stage::TrainPolicy => train_policy_stage(&mut ctx, cfg, mode)?,
        Stage::Evaluate => evaluate_stage(&mut ctx, cfg, mode)?,
        Stage::Report => report_stage(&mut ctx, cfg)?,
        Stage::Sweep => sweep_stage(&mut ctx, cfg)?,
        Stage::ExportPairs => export_pairs(&mut ctx, cfg)?,
    }
    let mut outputs = BTreeMap::new();
    for rel in &ctx.outputs {
        let path = dir.path(rel);
        outputs.insert(rel.clone(), file_digest(&path).map_err(|e| PipelineError::io(&path, e))?);
    }
    let entry = ManifestEntry {
        stage: stage.name().to_string(),
        inputs: ctx.inputs,
        outputs,
        config_digest: cfg.digest(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
    };
    dir.append(&entry)?;
    Ok(entry)
}

fn schema(cfg: &PipelineConfig) -> Result<Schema, PipelineError> {
    cfg.env.schema().map_err(|e| PipelineError::Config(e.to_string()))
}

fn gen_corpus(ctx: &mut Ctx, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let corpus = generate_corpus(&cfg.env, mix_seed(cfg.seed, 1))?;
    let dir = ctx.dir.path(CORPUS_DIR);
    corpus.write(&dir)?;
    for f in [CORPUS_FILE, VOCAB_FILE, META_FILE] {
        ctx.outputs.push(format!("{CORPUS_DIR}/{f}"));
    }
    Ok(())
}

fn baseline_config(cfg: &PipelineConfig) -> PolicyTrainConfig {
    PolicyTrainConfig { mode: LossMode::CeBaseline, epochs: cfg.folds.epochs, ..cfg.policy.train.clone() }
}

#[derive(Serialize, Deserialize)]
struct HarvestSummary {
    summaries: Vec<FoldEpochSummary>,
    aborted: Vec<(usize, String)>,
    n_rollouts: usize,
}

fn train_baselines(ctx: &mut Ctx, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let corpus = ctx.corpus(None)?;
    let schema = schema(cfg)?;
    let train: Vec<&Dialogue> = corpus.split(Split::Train).collect();
    let ids: Vec<String> = train.iter().map(|d| d.id.clone()).collect();
    let spec = kfold_split(&ids, cfg.folds.k, mix_seed(cfg.seed, 2))?;
    let report = harvest(&schema, &corpus.vocab, &train, &spec, &baseline_config(cfg), &cfg.metric, mix_seed(cfg.seed, 3))?;
    ctx.write_json(FOLDS, &spec)?;
    ctx.write_lines(DP, &report.rollouts)?;
    let summary = HarvestSummary { n_rollouts: report.rollouts.len(), summaries: report.summaries, aborted: report.aborted };
    ctx.write_json(HARVEST, &summary)
}

fn journal_path(dir: &RunDir, cfg: &PipelineConfig) -> PathBuf {
    if cfg.hitl.journal.is_absolute() {
        cfg.hitl.journal.clone()
    } else {
        dir.path(&cfg.hitl.journal.to_string_lossy())
    }
}

fn train_reward_stage(ctx: &mut Ctx, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let corpus = ctx.corpus(None)?;
    let dp_path = ctx.input(DP)?;
    let rollouts: Vec<ScoredRollout> = read_lines(&dp_path, DP)?;
    let human: Vec<HumanPair> = if cfg.reward.mix_prob > 0.0 {
        let cand_path = ctx.input(CANDIDATES)?;
        let journal = journal_path(ctx.dir, cfg);
        ctx.external_input("journal", &journal)?;
        human_pairs(&read_candidates(&cand_path)?, &read_journal(&journal)?)?
    } else {
        Vec::new()
    };
    let refs: Vec<&Dialogue> = corpus.dialogues.iter().collect();
    let trained = train_reward(&rollouts, &human, &refs, &corpus.vocab, &cfg.reward, mix_seed(cfg.seed, 4))?;
    let mut annotated = corpus.dialogues.clone();
    annotate_corpus(&trained.model, &trained.store, &corpus.vocab, &mut annotated)?;
    ctx.write(REWARD_CKPT, &trained.store.to_checkpoint_bytes())?;
    ctx.write_json(REWARD_META, &trained.model.meta)?;
    ctx.write_json(REWARD_LOG, &trained.log)?;
    ctx.write_lines(ANNOTATED, &annotated)
}

/// Seed of policy run `s`, shared by `train-policy`, `evaluate` and
/// `export-pairs`.
fn policy_run_seed(cfg: &PipelineConfig, s: u64) -> u64 {
    mix_seed(cfg.seed, 1000 + s)
}

fn decode_seed(cfg: &PipelineConfig) -> u64 {
    mix_seed(cfg.seed, 5)
}

fn policy_dir(mode: LossMode) -> String {
    format!("policy/{}", mode_name(mode))
}

/// Trains one policy with optional best-epoch selection on `val`.
#[allow(clippy::too_many_arguments)]
fn fit_policy(
    schema: &Schema,
    vocab: &Vocab,
    train: &[&Dialogue],
    val: &[&Dialogue],
    cfg: &PipelineConfig,
    mode: LossMode,
    seed: u64,
) -> Result<crate::policy::TrainedPolicy, PipelineError> {
    let pcfg = PolicyTrainConfig { mode, ..cfg.policy.train.clone() };
    let select = cfg.policy.select_on_val && !val.is_empty();
    let metric = &cfg.metric;
    let trained = train_policy(train, vocab, schema.act_inventory(), &pcfg, seed, |_, net, store| {
        if !select {
            return Ok(None);
        }
        let (s, _) =
            evaluate_policy(schema, net, store, vocab, val, metric, metric.action_form, pcfg.threshold, mix_seed(seed, 2))?;
        Ok(Some(s.combined))
    })?;
    Ok(trained)
}

fn train_policy_stage(ctx: &mut Ctx, cfg: &PipelineConfig, mode: LossMode) -> Result<(), PipelineError> {
    let corpus = ctx.corpus((mode != LossMode::CeBaseline).then_some(ANNOTATED))?;
    let schema = schema(cfg)?;
    let train: Vec<&Dialogue> = corpus.split(Split::Train).collect();
    let val: Vec<&Dialogue> = corpus.split(Split::Val).collect();
    let dir = policy_dir(mode);
    let meta = PolicyMeta {
        vocab_fingerprint: corpus.vocab.fingerprint(),
        vocab_size: corpus.vocab.len(),
        acts: schema.act_inventory(),
        net: cfg.policy.train.net.clone(),
        mode,
        threshold: cfg.policy.train.threshold,
    };
    for &s in &cfg.policy.seeds {
        let rs = policy_run_seed(cfg, s);
        let sub = subsample(&train, cfg.policy.data_fraction, mix_seed(rs, 1))?;
        let trained = fit_policy(&schema, &corpus.vocab, &sub, &val, cfg, mode, rs)?;
        ctx.write(&format!("{dir}/seed{s}.ckpt"), &trained.store.to_checkpoint_bytes())?;
        ctx.write_json(&format!("{dir}/seed{s}.log.json"), &trained.log)?;
    }
    ctx.write_json(&format!("{dir}/meta.json"), &meta)
}

fn load_policy(ctx: &mut Ctx, mode: LossMode, seed: u64, vocab: &Vocab) -> Result<(PolicyNet, ParamStore, PolicyMeta), PipelineError> {
    let dir = policy_dir(mode);
    let meta_rel = format!("{dir}/meta.json");
    let meta_path = ctx.input(&meta_rel)?;
    let meta: PolicyMeta = read_json(&meta_path, &meta_rel)?;
    if meta.vocab_fingerprint != vocab.fingerprint() {
        return Err(PipelineError::Corrupt { path: meta_rel, reason: "vocabulary fingerprint does not match the corpus".into() });
    }
    let ckpt = format!("{dir}/seed{seed}.ckpt");
    let path = ctx.input(&ckpt)?;
    let store = ParamStore::load(&path).map_err(corrupt(&ckpt))?;
    let net = PolicyNet::for_checkpoint(&store, &meta).map_err(corrupt(&ckpt))?;
    Ok((net, store, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub score: MetricScore,
}

fn evaluate_stage(ctx: &mut Ctx, cfg: &PipelineConfig, mode: LossMode) -> Result<(), PipelineError> {
    let annotated = ctx.dir.recorded_digest(ANNOTATED)?.is_some();
    let corpus = ctx.corpus(annotated.then_some(ANNOTATED))?;
    let schema = schema(cfg)?;
    let test: Vec<&Dialogue> = corpus.split(Split::Test).collect();
    let mut per_seed = Vec::new();
    let mut preds_by_seed = Vec::new();
    for &s in &cfg.policy.seeds {
        let (net, store, meta) = load_policy(ctx, mode, s, &corpus.vocab)?;
        let (score, preds) =
            evaluate_policy(&schema, &net, &store, &corpus.vocab, &test, &cfg.metric, cfg.metric.action_form, meta.threshold, decode_seed(cfg))?;
        per_seed.push(SeedScore { seed: s, score });
        preds_by_seed.push(preds);
    }
    let scores: Vec<MetricScore> = per_seed.iter().map(|s| s.score).collect();
    let report = EvalReport::from_scores(&scores, cfg.metric.success_mode, cfg.metric.lambda, test.len())
        .ok_or_else(|| PipelineError::Config("policy.seeds must not be empty".into()))?;
    let mid = median_index(&scores.iter().map(|s| s.combined).collect::<Vec<_>>()).unwrap_or(0);
    let traces: Vec<PolicyTrace> = preds_by_seed
        .swap_remove(mid)
        .into_iter()
        .zip(&test)
        .map(|(p, d)| PolicyTrace::new(p, d, cfg.policy.train.gamma))
        .collect();
    let dir = format!("eval/{}", mode_name(mode));
    ctx.write_json(&format!("{dir}/report.json"), &report)?;
    ctx.write_json(&format!("{dir}/per_seed.json"), &per_seed)?;
    ctx.write_lines(&format!("{dir}/trace.jsonl"), &traces)
}

fn report_stage(ctx: &mut Ctx, _cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let reports: Vec<String> =
        ctx.dir.latest_outputs("evaluate", "eval/")?.into_iter().filter(|p| p.ends_with("/report.json")).collect();
    if reports.is_empty() {
        return Err(PipelineError::MissingArtifact { path: "eval/<mode>/report.json".into(), expected: None });
    }
    let mut systems = BTreeMap::new();
    for rel in reports {
        let path = ctx.input(&rel)?;
        let name = rel.trim_start_matches("eval/").trim_end_matches("/report.json").to_string();
        systems.insert(name, read_json::<EvalReport>(&path, &rel)?);
    }
    let reward_analysis = if ctx.dir.recorded_digest(ANNOTATED)?.is_some() {
        let path = ctx.input(ANNOTATED)?;
        let dialogues = Corpus::read_dialogues(&path).map_err(corrupt(ANNOTATED))?;
        Some(reward_agreement(dialogues.iter().filter(|d| d.split == Split::Test)))
    } else {
        None
    };
    let report = PipelineReport { systems, reward_analysis };
    ctx.write_json(REPORT_JSON, &report)?;
    ctx.write(REPORT_TXT, report.render().as_bytes())
}

/// Result of one low-resource run: every mode trained on the same subsample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowResourceRun {
    pub fraction: f64,
    pub seed: u64,
    pub n_dialogues: usize,
    pub scores: BTreeMap<String, MetricScore>,
}

/// Subsamples `fraction` of the training split and runs the whole method on
/// it: baselines, preference data and reward when a mode needs learned
/// rewards, then each policy, scored on the test split. `Ok(None)` with a
/// reason when the subsample is smaller than K.
pub fn low_resource_run(
    corpus: &Corpus,
    cfg: &PipelineConfig,
    fraction: f64,
    seed: u64,
    modes: &[LossMode],
) -> Result<Result<LowResourceRun, String>, PipelineError> {
    let schema = schema(cfg)?;
    let train: Vec<&Dialogue> = corpus.split(Split::Train).collect();
    let val: Vec<&Dialogue> = corpus.split(Split::Val).collect();
    let test: Vec<&Dialogue> = corpus.split(Split::Test).collect();
    let rs = mix_seed(cfg.seed, 2000 + seed);
    let sub = subsample(&train, fraction, mix_seed(rs, 1))?;
    if sub.len() < cfg.folds.k {
        return Ok(Err(format!("fraction {fraction} yields {} dialogues, fewer than K = {}", sub.len(), cfg.folds.k)));
    }
    let mut annotated: Vec<Dialogue> = Vec::new();
    if modes.iter().any(|m| *m != LossMode::CeBaseline) {
        let ids: Vec<String> = sub.iter().map(|d| d.id.clone()).collect();
        let spec = kfold_split(&ids, cfg.folds.k, mix_seed(rs, 2))?;
        let h = harvest(&schema, &corpus.vocab, &sub, &spec, &baseline_config(cfg), &cfg.metric, mix_seed(rs, 3))?;
        let reward_cfg = crate::prefreward::RewardConfig { mix_prob: 0.0, ..cfg.reward.clone() };
        let trained = train_reward(&h.rollouts, &[], &sub, &corpus.vocab, &reward_cfg, mix_seed(rs, 4))?;
        annotated = sub.iter().map(|d| (*d).clone()).collect();
        annotate_corpus(&trained.model, &trained.store, &corpus.vocab, &mut annotated)?;
    }
    let mut scores = BTreeMap::new();
    for &mode in modes {
        let data: Vec<&Dialogue> = if mode == LossMode::CeBaseline { sub.clone() } else { annotated.iter().collect() };
        let trained = fit_policy(&schema, &corpus.vocab, &data, &val, cfg, mode, mix_seed(rs, 5))?;
        let (score, _) = evaluate_policy(
            &schema,
            &trained.net,
            &trained.store,
            &corpus.vocab,
            &test,
            &cfg.metric,
            cfg.metric.action_form,
            cfg.policy.train.threshold,
            decode_seed(cfg),
        )?;
        scores.insert(mode_name(mode).to_string(), score);
    }
    Ok(Ok(LowResourceRun { fraction, seed, n_dialogues: sub.len(), scores }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub fraction: f64,
    pub mode: String,
    pub seeds: Vec<u64>,
    pub median: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFraction {
    pub fraction: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    pub runs: Vec<LowResourceRun>,
    pub skipped: Vec<SkippedFraction>,
}

impl SweepReport {
    pub fn render(&self) -> String {
        let rows: Vec<(String, &EvalReport)> =
            self.cells.iter().map(|c| (format!("{} @ {:.0}%", c.mode, c.fraction * 100.0), &c.median)).collect();
        let mut out = render_table(&rows);
        for s in &self.skipped {
            out.push_str(&format!("skipped {:.0}%: {}\n", s.fraction * 100.0, s.reason));
        }
        out
    }
}

fn sweep_stage(ctx: &mut Ctx, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let corpus = ctx.corpus(None)?;
    let n_test = corpus.split(Split::Test).count();
    let mut report = SweepReport { cells: Vec::new(), runs: Vec::new(), skipped: Vec::new() };
    for &fraction in &cfg.sweep.fractions {
        let mut runs = Vec::new();
        for &seed in &cfg.sweep.seeds {
            match low_resource_run(&corpus, cfg, fraction, seed, &cfg.sweep.modes)? {
                Ok(run) => runs.push(run),
                Err(reason) => {
                    report.skipped.push(SkippedFraction { fraction, reason });
                    break;
                }
            }
        }
        if runs.is_empty() {
            continue;
        }
        for &mode in &cfg.sweep.modes {
            let name = mode_name(mode);
            let scores: Vec<MetricScore> = runs.iter().map(|r| r.scores[name]).collect();
            if let Some(median) = EvalReport::from_scores(&scores, cfg.metric.success_mode, cfg.metric.lambda, n_test) {
                report.cells.push(SweepCell { fraction, mode: name.to_string(), seeds: runs.iter().map(|r| r.seed).collect(), median });
            }
        }
        report.runs.extend(runs);
    }
    ctx.write_json(SWEEP_JSON, &report)?;
    ctx.write(SWEEP_TXT, report.render().as_bytes())
}

fn goal_summary(goal: &Goal) -> String {
    goal.domains
        .iter()
        .map(|g| {
            let mut parts = vec![g.domain.clone()];
            parts.extend(g.constraints.iter().map(|(k, v)| format!("{k}={v}")));
            if !g.requests.is_empty() {
                parts.push(format!("request {}", g.requests.join(",")));
            }
            if g.book {
                parts.push("book".into());
            }
            parts.join(" ")
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn scored(schema: &Schema, d: &Dialogue, p: &PredictedDialogue, cfg: &PipelineConfig) -> Result<ScoredRollout, PipelineError> {
    Ok(ScoredRollout {
        dialogue_id: p.dialogue_id.clone(),
        fold: 0,
        epoch: 0,
        acts: p.acts.clone(),
        responses: p.responses.clone(),
        metric: training_metric(schema, d, p, &cfg.metric)?.into(),
    })
}

fn export_pairs(ctx: &mut Ctx, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let corpus = ctx.corpus(None)?;
    let schema = schema(cfg)?;
    let val: Vec<&Dialogue> = corpus.split(Split::Val).collect();
    let [s1, s2] = cfg.hitl.model_seeds;
    let mut preds = Vec::new();
    for s in [s1, s2] {
        let (net, store, meta) = load_policy(ctx, LossMode::CeBaseline, s, &corpus.vocab)?;
        preds.push(predict(&net, &store, &corpus.vocab, &val, meta.threshold, decode_seed(cfg))?);
    }
    let mut tasks = Vec::new();
    let mut candidates = Vec::new();
    for ((d, p1), p2) in val.iter().zip(&preds[0]).zip(&preds[1]) {
        if tasks.len() == cfg.hitl.n_tasks {
            break;
        }
        let Some(div) = (0..d.turns.len()).find(|&t| p1.acts[t] != p2.acts[t]) else { continue };
        let task_id = format!("task-{:04}", tasks.len());
        let context = TaskContext {
            goal: goal_summary(&d.goal),
            turns: (0..div)
                .map(|t| ContextTurn { user: d.turns[t].user_tokens.join(" "), system: p1.responses[t].join(" ") })
                .collect(),
        };
        let render = |p: &PredictedDialogue| p.responses[div..].iter().map(|r| r.join(" ")).collect::<Vec<_>>();
        tasks.push(TaskRecord {
            task_id: task_id.clone(),
            context,
            c1_turns: render(p1),
            c2_turns: render(p2),
            dialogue_id: d.id.clone(),
            model_seeds: [s1, s2],
        });
        candidates.push(CandidatePair { task_id, c1: scored(&schema, d, p1, cfg)?, c2: scored(&schema, d, p2, cfg)? });
    }
    ctx.write_lines(TASKS, &tasks)?;
    ctx.write_lines(CANDIDATES, &candidates)
}
