//! Comparisons between learned and planted per-turn rewards.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::toywoz::{category, Dialogue, TurnCategory};

/// Ranks starting at 1; ties share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() {
        return None;
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub mean_learned: f64,
    pub mean_planted: f64,
    pub turns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardAgreement {
    pub categories: BTreeMap<TurnCategory, CategoryStats>,
    pub spearman: Option<f64>,
    pub turns: usize,
}

impl RewardAgreement {
    /// True when mean learned reward is strictly ordered transaction > info > nicety.
    pub fn ordered(&self) -> bool {
        let m = |c| self.categories.get(&c).map(|s: &CategoryStats| s.mean_learned);
        match (m(TurnCategory::Transaction), m(TurnCategory::Info), m(TurnCategory::Nicety)) {
            (Some(t), Some(i), Some(n)) => t > i && i > n,
            _ => false,
        }
    }
}

/// Category means and rank agreement over every annotated turn.
pub fn reward_agreement<'a, I: IntoIterator<Item = &'a Dialogue>>(dialogues: I) -> RewardAgreement {
    let mut learned = Vec::new();
    let mut planted = Vec::new();
    let mut acc: BTreeMap<TurnCategory, (f64, f64, usize)> = BTreeMap::new();
    for d in dialogues {
        for t in &d.turns {
            let Some(r) = t.learned_reward else { continue };
            learned.push(r);
            planted.push(t.planted_reward);
            let e = acc.entry(category(&t.act_tokens)).or_default();
            e.0 += r;
            e.1 += t.planted_reward;
            e.2 += 1;
        }
    }
    let categories = acc
        .into_iter()
        .map(|(c, (l, p, n))| (c, CategoryStats { mean_learned: l / n as f64, mean_planted: p / n as f64, turns: n }))
        .collect();
    RewardAgreement { categories, spearman: spearman(&learned, &planted), turns: learned.len() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 100.0, 1000.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        // d = (0, 0, 1, -1): 1 - 6*2 / (4*15) = 0.8
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 4.0, 3.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }
}
