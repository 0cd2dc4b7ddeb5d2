use std::collections::HashMap;

use super::PolicyError;
use crate::toywoz::{act_key, ActToken, Dialogue};

/// Belief-conditioned empirical act distribution with add-alpha smoothing over
/// the corpus act inventory. Unseen belief keys fall back to the marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorTable {
    pub alpha: f64,
    /// Composite acts observed in the corpus, sorted by key.
    pub acts: Vec<Vec<ActToken>>,
    counts: HashMap<String, Vec<f64>>,
    marginal: Vec<f64>,
    index: HashMap<String, usize>,
}

impl BehaviorTable {
    pub fn estimate<'a, I: IntoIterator<Item = &'a Dialogue>>(dialogues: I, alpha: f64) -> Result<Self, PolicyError> {
        let mut pairs: Vec<(String, Vec<ActToken>)> = Vec::new();
        for d in dialogues {
            for t in &d.turns {
                pairs.push((t.belief.key(), t.act_tokens.clone()));
            }
        }
        Self::from_pairs(pairs, alpha)
    }

    /// Builds the table from `(belief key, act)` observations.
    pub fn from_pairs(pairs: Vec<(String, Vec<ActToken>)>, alpha: f64) -> Result<Self, PolicyError> {
        if pairs.is_empty() {
            return Err(PolicyError::EmptyCorpus);
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(PolicyError::Config(format!("behavior smoothing must be >= 0, got {alpha}")));
        }
        let mut acts: Vec<Vec<ActToken>> = pairs.iter().map(|(_, a)| a.clone()).collect();
        acts.sort_by_key(|a| act_key(a));
        acts.dedup();
        let index: HashMap<String, usize> = acts.iter().enumerate().map(|(i, a)| (act_key(a), i)).collect();
        let mut counts: HashMap<String, Vec<f64>> = HashMap::new();
        let mut marginal = vec![0.0; acts.len()];
        for (b, a) in &pairs {
            let i = index[&act_key(a)];
            counts.entry(b.clone()).or_insert_with(|| vec![0.0; acts.len()])[i] += 1.0;
            marginal[i] += 1.0;
        }
        Ok(Self { alpha, acts, counts, marginal, index })
    }

    pub fn len(&self) -> usize {
        self.acts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acts.is_empty()
    }

    pub fn act_index(&self, act: &[ActToken]) -> Option<usize> {
        self.index.get(&act_key(act)).copied()
    }

    pub fn knows(&self, belief_key: &str) -> bool {
        self.counts.contains_key(belief_key)
    }

    pub fn belief_keys(&self) -> impl Iterator<Item = &String> {
        self.counts.keys()
    }

    /// `pi_b(. | b)` over the act inventory.
    pub fn distribution(&self, belief_key: &str) -> Vec<f64> {
        let c = self.counts.get(belief_key).unwrap_or(&self.marginal);
        let total: f64 = c.iter().sum::<f64>() + self.alpha * c.len() as f64;
        c.iter().map(|x| (x + self.alpha) / total).collect()
    }

    pub fn prob(&self, belief_key: &str, act_index: usize) -> f64 {
        self.distribution(belief_key)[act_index]
    }

    pub fn entropy(&self, belief_key: &str) -> f64 {
        -self.distribution(belief_key).iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

/// `D_KL(p || q)` for distributions on the same support.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toywoz::{ActType, NO_SLOT};

    fn act(slot: &str) -> Vec<ActToken> {
        vec![ActToken::new(ActType::Request, "hotel", slot)]
    }

    #[test]
    fn counting_without_smoothing() {
        let mut pairs = vec![("b".to_string(), act("area")); 3];
        pairs.push(("b".to_string(), act("stars")));
        let t = BehaviorTable::from_pairs(pairs, 0.0).unwrap();
        let i = t.act_index(&act("area")).unwrap();
        assert_eq!(t.prob("b", i), 0.75);
    }

    #[test]
    fn single_act_per_belief_is_degenerate() {
        let pairs = vec![("x".to_string(), act("area")), ("y".to_string(), act("stars")), ("x".to_string(), act("area"))];
        let t = BehaviorTable::from_pairs(pairs, 0.0).unwrap();
        for k in ["x", "y"] {
            assert!(t.distribution(k).iter().all(|p| *p == 0.0 || *p == 1.0));
            assert_eq!(t.entropy(k), 0.0);
        }
    }

    #[test]
    fn unseen_belief_uses_marginal() {
        let pairs = vec![("x".to_string(), act("area")), ("y".to_string(), act("stars")), ("y".to_string(), act("stars"))];
        let t = BehaviorTable::from_pairs(pairs, 0.0).unwrap();
        let d = t.distribution("never");
        assert!((d[t.act_index(&act("stars")).unwrap()] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn smoothing_keeps_everything_positive() {
        let pairs = vec![("x".to_string(), act("area")), ("y".to_string(), vec![ActToken::new(ActType::OfferBook, "hotel", NO_SLOT)])];
        let t = BehaviorTable::from_pairs(pairs, 0.1).unwrap();
        for k in ["x", "y", "z"] {
            let d = t.distribution(k);
            assert!(d.iter().all(|p| *p > 0.0));
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_rejected() {
        assert!(matches!(BehaviorTable::from_pairs(vec![], 0.1), Err(PolicyError::EmptyCorpus)));
    }

    #[test]
    fn kl_values() {
        let p = [0.75, 0.25];
        assert_eq!(kl_divergence(&p, &p), 0.0);
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl_divergence(&p, &[0.5, 0.5]) - expected).abs() < 1e-15);
        assert!((expected - 0.1308).abs() < 1e-4);
    }
}
