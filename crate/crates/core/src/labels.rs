//! Human preference labeling records shared by the pair export, the labeling
//! service and reward training: task pool lines, journal lines, journal replay
//! and conversion of labels into human preference pairs.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::prefreward::{HumanPair, ScoredRollout};

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path} line {line}: {source}")]
    Json { path: String, line: usize, source: serde_json::Error },
    #[error("mu_c1 = {0} is outside [0, 1]")]
    MuOutOfRange(f64),
    #[error("task `{task}` already labeled by `{annotator}`")]
    Duplicate { task: String, annotator: String },
    #[error("label for unknown task `{0}`")]
    UnknownTask(String),
    #[error("duplicate task id `{0}` in the pool")]
    DuplicateTask(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextTurn {
    pub user: String,
    pub system: String,
}

/// Goal summary plus the shared turns before the candidates diverge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskContext {
    pub goal: String,
    pub turns: Vec<ContextTurn>,
}

/// One line of the exported task pool. Candidate turns are rendered responses
/// from the divergence point on, in canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub task_id: String,
    pub context: TaskContext,
    pub c1_turns: Vec<String>,
    pub c2_turns: Vec<String>,
    pub dialogue_id: String,
    pub model_seeds: [u64; 2],
}

/// Full rollouts behind a task, used to turn labels into training pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidatePair {
    pub task_id: String,
    pub c1: ScoredRollout,
    pub c2: ScoredRollout,
}

/// One journal line. `mu_c1` refers to the canonical first candidate; `ts` is
/// milliseconds since the Unix epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub task_id: String,
    pub mu_c1: f64,
    pub annotator: String,
    pub ts: u64,
}

pub fn check_mu(mu: f64) -> Result<f64, LabelError> {
    if (0.0..=1.0).contains(&mu) {
        Ok(mu)
    } else {
        Err(LabelError::MuOutOfRange(mu))
    }
}

/// Accepted labels keyed by `(task, annotator)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelStore {
    labels: BTreeMap<(String, String), f64>,
}

impl LabelStore {
    /// Rebuilds the store from journal lines, rejecting anything the service
    /// would have refused.
    pub fn replay<'a, I: IntoIterator<Item = &'a LabelRecord>>(records: I) -> Result<Self, LabelError> {
        let mut store = Self::default();
        for r in records {
            store.insert(r)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, r: &LabelRecord) -> Result<(), LabelError> {
        check_mu(r.mu_c1)?;
        let key = (r.task_id.clone(), r.annotator.clone());
        if self.labels.contains_key(&key) {
            return Err(LabelError::Duplicate { task: key.0, annotator: key.1 });
        }
        self.labels.insert(key, r.mu_c1);
        Ok(())
    }

    pub fn contains(&self, task: &str, annotator: &str) -> bool {
        self.labels.contains_key(&(task.to_string(), annotator.to_string()))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, f64)> {
        self.labels.iter().map(|((t, a), mu)| (t.as_str(), a.as_str(), *mu))
    }

    /// Distinct tasks with at least one label.
    pub fn labeled_tasks(&self) -> usize {
        let mut n = 0;
        let mut last: Option<&str> = None;
        for (t, _) in self.labels.keys() {
            if last != Some(t.as_str()) {
                n += 1;
                last = Some(t);
            }
        }
        n
    }

    pub fn per_annotator(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (_, a) in self.labels.keys() {
            *out.entry(a.clone()).or_insert(0) += 1;
        }
        out
    }
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, LabelError> {
    let text = std::fs::read_to_string(path).map_err(|source| LabelError::Io { path: path.display().to_string(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| LabelError::Json { path: path.display().to_string(), line: i + 1, source }))
        .collect()
}

pub fn read_tasks(path: &Path) -> Result<Vec<TaskRecord>, LabelError> {
    let tasks: Vec<TaskRecord> = read_lines(path)?;
    let mut seen = std::collections::HashSet::new();
    for t in &tasks {
        if !seen.insert(t.task_id.as_str()) {
            return Err(LabelError::DuplicateTask(t.task_id.clone()));
        }
    }
    Ok(tasks)
}

pub fn read_candidates(path: &Path) -> Result<Vec<CandidatePair>, LabelError> {
    read_lines(path)
}

/// A missing journal reads as empty.
pub fn read_journal(path: &Path) -> Result<Vec<LabelRecord>, LabelError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_lines(path)
}

/// One human pair per accepted label, in journal order.
pub fn human_pairs(candidates: &[CandidatePair], labels: &[LabelRecord]) -> Result<Vec<HumanPair>, LabelError> {
    let by_id: HashMap<&str, &CandidatePair> = candidates.iter().map(|c| (c.task_id.as_str(), c)).collect();
    LabelStore::replay(labels)?;
    labels
        .iter()
        .map(|l| {
            let c = by_id.get(l.task_id.as_str()).ok_or_else(|| LabelError::UnknownTask(l.task_id.clone()))?;
            Ok(HumanPair { first: c.c1.clone(), second: c.c2.clone(), mu_first: l.mu_c1 })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(task: &str, who: &str, mu: f64) -> LabelRecord {
        LabelRecord { task_id: task.into(), mu_c1: mu, annotator: who.into(), ts: 0 }
    }

    #[test]
    fn replay_counts() {
        let s = LabelStore::replay(&[rec("a", "x", 0.5), rec("a", "y", 1.0), rec("b", "x", 0.0)]).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.labeled_tasks(), 2);
        assert_eq!(s.per_annotator()["x"], 2);
    }

    #[test]
    fn replay_rejects_duplicates_and_range() {
        assert!(matches!(LabelStore::replay(&[rec("a", "x", 0.5), rec("a", "x", 0.2)]), Err(LabelError::Duplicate { .. })));
        assert!(matches!(LabelStore::replay(&[rec("a", "x", 1.5)]), Err(LabelError::MuOutOfRange(_))));
        assert!(check_mu(f64::NAN).is_err());
    }
}
