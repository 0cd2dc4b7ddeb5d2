//! Dialogue-level metrics: inform, success (hard and soft), corpus BLEU, the
//! training metric `M = inform + success + lambda * bleu`, and the combined
//! evaluation score.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::toywoz::{act_words, evaluate_acts, ActToken, Dialogue, Goal, Outcome, Schema};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("metric over an empty set")]
    Empty,
    #[error("hypothesis and reference counts differ ({0} vs {1})")]
    Misaligned(usize, usize),
    #[error("prediction for `{predicted}` scored against `{reference}`")]
    DialogueMismatch { predicted: String, reference: String },
    #[error("lambda must be finite and non-negative, got {0}")]
    BadLambda(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuccessMode {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionForm {
    Act,
    Resp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub lambda: f64,
    pub success_mode: SuccessMode,
    pub action_form: ActionForm,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { lambda: 2.0, success_mode: SuccessMode::Soft, action_form: ActionForm::Act }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        if self.lambda.is_finite() && self.lambda >= 0.0 {
            Ok(())
        } else {
            Err(MetricError::BadLambda(self.lambda))
        }
    }
}

/// Fractions in `[0, 1]` plus `m` and the percent-scale `combined`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub inform: f64,
    pub success: f64,
    pub bleu: f64,
    #[serde(rename = "M")]
    pub m: f64,
    pub combined: f64,
}

impl MetricScore {
    pub fn new(inform: f64, success: f64, bleu: f64, lambda: f64) -> Self {
        Self {
            inform,
            success,
            bleu,
            m: inform + success + lambda * bleu,
            combined: combined_score(inform * 100.0, success * 100.0, bleu * 100.0),
        }
    }
}

/// `(inform + success) * 0.5 + bleu`, all in percent.
pub fn combined_score(inform_pct: f64, success_pct: f64, bleu_pct: f64) -> f64 {
    (inform_pct + success_pct) * 0.5 + bleu_pct
}

/// Fraction of requested slots answered; dialogues without requests score 1.
pub fn soft_success(outcome: &Outcome, goal: &Goal) -> f64 {
    let requested = goal.requested();
    if requested.is_empty() {
        return 1.0;
    }
    requested.iter().filter(|r| outcome.answered.contains(*r)).count() as f64 / requested.len() as f64
}

pub fn hard_success(outcome: &Outcome, goal: &Goal) -> f64 {
    if goal.requested().iter().all(|r| outcome.answered.contains(r)) {
        1.0
    } else {
        0.0
    }
}

pub fn success_of(outcome: &Outcome, goal: &Goal, mode: SuccessMode) -> f64 {
    match mode {
        SuccessMode::Hard => hard_success(outcome, goal),
        SuccessMode::Soft => soft_success(outcome, goal),
    }
}

pub fn inform_rate<'a, I: IntoIterator<Item = &'a Outcome>>(outcomes: I) -> Result<f64, MetricError> {
    mean(outcomes.into_iter().map(|o| if o.entity_offered { 1.0 } else { 0.0 }))
}

pub fn success_rate<'a, I>(items: I, mode: SuccessMode) -> Result<f64, MetricError>
where
    I: IntoIterator<Item = (&'a Outcome, &'a Goal)>,
{
    mean(items.into_iter().map(|(o, g)| success_of(o, g, mode)))
}

fn mean<I: Iterator<Item = f64>>(xs: I) -> Result<f64, MetricError> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        Err(MetricError::Empty)
    } else {
        Ok(s / n as f64)
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU with uniform weights over orders 1 to 4 and one reference per
/// hypothesis.
///
/// An order with matches contributes `clipped / total`; an order with hypothesis
/// n-grams but no matches contributes `1 / (2 * total)`. Orders for which the
/// hypotheses hold no n-grams at all are left out of the geometric mean. The
/// brevity penalty is `exp(1 - r / c)` when `c < r`, and an empty hypothesis
/// corpus (`c = 0`) scores 0.
pub fn bleu<S: AsRef<str>, T: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<T>]) -> Result<f64, MetricError> {
    if hypotheses.is_empty() {
        return Err(MetricError::Empty);
    }
    if hypotheses.len() != references.len() {
        return Err(MetricError::Misaligned(hypotheses.len(), references.len()));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hypotheses.iter().zip(references) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            for (g, k) in &hc {
                total[n - 1] += k;
                matched[n - 1] += (*k).min(rc.get(g).copied().unwrap_or(0));
            }
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 0..4 {
        if total[n] == 0 {
            continue;
        }
        let p = if matched[n] == 0 {
            1.0 / (2.0 * total[n] as f64)
        } else {
            matched[n] as f64 / total[n] as f64
        };
        log_sum += p.ln();
        orders += 1;
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * (log_sum / orders as f64).exp())
}

/// A policy's acts and realized responses for one reference dialogue, predicted
/// turn by turn from the reference observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedDialogue {
    pub dialogue_id: String,
    pub acts: Vec<Vec<ActToken>>,
    pub responses: Vec<Vec<String>>,
}

impl PredictedDialogue {
    /// The reference dialogue replayed verbatim.
    pub fn replay(d: &Dialogue) -> Self {
        Self {
            dialogue_id: d.id.clone(),
            acts: d.turns.iter().map(|t| t.act_tokens.clone()).collect(),
            responses: d.turns.iter().map(|t| t.resp_tokens.clone()).collect(),
        }
    }

    pub fn outcome(&self, schema: &Schema, reference: &Dialogue) -> Outcome {
        evaluate_acts(
            schema,
            &reference.goal,
            reference.turns.iter().zip(&self.acts).map(|(t, a)| (&t.belief, a.as_slice())),
        )
    }

    /// Hypothesis and reference word sequences per reference turn. Missing
    /// predicted turns count as empty hypotheses.
    pub fn bleu_pairs(&self, reference: &Dialogue, form: ActionForm) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
        let mut hyps = Vec::with_capacity(reference.turns.len());
        let mut refs = Vec::with_capacity(reference.turns.len());
        for (i, t) in reference.turns.iter().enumerate() {
            match form {
                ActionForm::Act => {
                    hyps.push(self.acts.get(i).map(|a| act_words(a)).unwrap_or_default());
                    refs.push(act_words(&t.act_tokens));
                }
                ActionForm::Resp => {
                    hyps.push(self.responses.get(i).cloned().unwrap_or_default());
                    refs.push(t.resp_tokens.clone());
                }
            }
        }
        (hyps, refs)
    }
}

/// Per-dialogue training metric: inform and success from this dialogue alone,
/// BLEU over its turns in the configured action form.
pub fn training_metric(
    schema: &Schema,
    reference: &Dialogue,
    prediction: &PredictedDialogue,
    cfg: &MetricConfig,
) -> Result<MetricScore, MetricError> {
    cfg.validate()?;
    if prediction.dialogue_id != reference.id {
        return Err(MetricError::DialogueMismatch {
            predicted: prediction.dialogue_id.clone(),
            reference: reference.id.clone(),
        });
    }
    let outcome = prediction.outcome(schema, reference);
    let inform = if outcome.entity_offered { 1.0 } else { 0.0 };
    let success = success_of(&outcome, &reference.goal, cfg.success_mode);
    let (hyps, refs) = prediction.bleu_pairs(reference, cfg.action_form);
    let b = if hyps.is_empty() { 0.0 } else { bleu(&hyps, &refs)? };
    Ok(MetricScore::new(inform, success, b, cfg.lambda))
}

/// Corpus evaluation: mean inform and success over dialogues, corpus BLEU over
/// every turn in the given form.
pub fn corpus_score(
    schema: &Schema,
    references: &[&Dialogue],
    predictions: &[PredictedDialogue],
    cfg: &MetricConfig,
    bleu_form: ActionForm,
) -> Result<MetricScore, MetricError> {
    cfg.validate()?;
    if references.len() != predictions.len() {
        return Err(MetricError::Misaligned(predictions.len(), references.len()));
    }
    if references.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut outcomes = Vec::with_capacity(references.len());
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for (r, p) in references.iter().zip(predictions) {
        if p.dialogue_id != r.id {
            return Err(MetricError::DialogueMismatch { predicted: p.dialogue_id.clone(), reference: r.id.clone() });
        }
        outcomes.push(p.outcome(schema, r));
        let (h, rf) = p.bleu_pairs(r, bleu_form);
        hyps.extend(h);
        refs.extend(rf);
    }
    let inform = inform_rate(&outcomes)?;
    let success = success_rate(outcomes.iter().zip(references.iter().map(|r| &r.goal)), cfg.success_mode)?;
    let b = bleu(&hyps, &refs)?;
    Ok(MetricScore::new(inform, success, b, cfg.lambda))
}
