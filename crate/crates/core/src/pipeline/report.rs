use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::analysis::RewardAgreement;
use crate::metrics::{MetricScore, SuccessMode};
use crate::policy::LossMode;

/// Evaluation summary in percent, with each field the median over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub inform_pct: f64,
    pub success_pct: f64,
    pub success_mode: SuccessMode,
    pub bleu_pct: f64,
    pub combined: f64,
    pub lambda: f64,
    pub n_dialogues: usize,
    pub seed_protocol: String,
}

/// Middle value; mean of the two middle values for even counts.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Index of the run whose value is the (lower) median.
pub fn median_index(xs: &[f64]) -> Option<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
    idx.get((idx.len().max(1) - 1) / 2).copied()
}

impl EvalReport {
    /// Per-field medians over `scores`; `None` when there are none.
    pub fn from_scores(scores: &[MetricScore], success_mode: SuccessMode, lambda: f64, n_dialogues: usize) -> Option<Self> {
        let field = |f: fn(&MetricScore) -> f64| median(&scores.iter().map(f).collect::<Vec<_>>());
        Some(Self {
            inform_pct: field(|s| s.inform * 100.0)?,
            success_pct: field(|s| s.success * 100.0)?,
            success_mode,
            bleu_pct: field(|s| s.bleu * 100.0)?,
            combined: field(|s| s.combined)?,
            lambda,
            n_dialogues,
            seed_protocol: format!("median of {} runs", scores.len()),
        })
    }
}

pub fn mode_name(mode: LossMode) -> &'static str {
    match mode {
        LossMode::CaspiFull => "caspi_full",
        LossMode::DetOnly => "det_only",
        LossMode::CeBaseline => "ce_baseline",
    }
}

pub fn render_table(rows: &[(String, &EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}  {:>7}  {:>8}  {:>5}", "system", "inform", "success", "bleu", "combined", "n");
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>7.2}  {:>7.2}  {:>7.2}  {:>8.2}  {:>5}",
            name, r.inform_pct, r.success_pct, r.bleu_pct, r.combined, r.n_dialogues
        );
    }
    if let Some((_, r)) = rows.first() {
        let _ = writeln!(out, "success: {:?}, lambda = {}, {}", r.success_mode, r.lambda, r.seed_protocol);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineReport {
    pub systems: BTreeMap<String, EvalReport>,
    /// Learned against planted reward on test turns, when rewards were learned.
    pub reward_analysis: Option<RewardAgreement>,
}

impl PipelineReport {
    pub fn render(&self) -> String {
        let rows: Vec<(String, &EvalReport)> = self.systems.iter().map(|(k, v)| (k.clone(), v)).collect();
        let mut out = render_table(&rows);
        if let Some(a) = &self.reward_analysis {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<12}  {:>8}  {:>8}  {:>6}", "category", "learned", "planted", "turns");
            for (c, s) in &a.categories {
                let _ = writeln!(out, "{:<12}  {:>8.4}  {:>8.4}  {:>6}", format!("{c:?}").to_lowercase(), s.mean_learned, s.mean_planted, s.turns);
            }
            match a.spearman {
                Some(r) => {
                    let _ = writeln!(out, "spearman = {r:.4} over {} turns", a.turns);
                }
                None => {
                    let _ = writeln!(out, "spearman undefined over {} turns", a.turns);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(median_index(&[0.3, 0.1, 0.2]), Some(2));
        assert_eq!(median_index(&[0.4, 0.1, 0.2, 0.3]), Some(2));
    }

    #[test]
    fn report_is_field_wise_median() {
        let s = [MetricScore::new(1.0, 0.5, 0.1, 2.0), MetricScore::new(0.0, 1.0, 0.3, 2.0), MetricScore::new(0.5, 0.0, 0.2, 2.0)];
        let r = EvalReport::from_scores(&s, SuccessMode::Soft, 2.0, 10).unwrap();
        assert_eq!((r.inform_pct, r.success_pct, r.bleu_pct), (50.0, 50.0, 20.0));
        assert_eq!(r.seed_protocol, "median of 3 runs");
    }
}
