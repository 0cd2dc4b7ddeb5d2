//! Synthetic multi-domain task-oriented dialogue environment: schema and
//! database, goal sampling, a scripted stochastic expert, template realization,
//! and the offline corpus generator.

mod corpus;
mod realize;
mod schema;
mod simulate;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use corpus::{generate_corpus, Corpus, CorpusMeta, EnvConfig, Vocab, CORPUS_FILE, META_FILE, VOCAB_FILE};
pub use realize::{realize_response, realize_variant, user_utterance, UserIntent, RESPONSE_VARIANTS};
pub use schema::{DomainSchema, Entity, Schema, Slot};
pub use simulate::{sample_goal, simulate_dialogue, ExpertProfile, GoalConfig, PlantedRewards};

pub const GENERAL: &str = "general";
pub const NO_SLOT: &str = "none";
pub const EMPTY_RESPONSE: &str = "<empty>";
pub const EMPTY_BELIEF: &str = "belief_empty";

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("schema over-constrained: no satisfiable goal after {0} draws")]
    OverConstrained(usize),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActType {
    Inform,
    Request,
    OfferBook,
    BookConfirm,
    Nicety,
    Goodbye,
}

impl ActType {
    pub fn as_str(self) -> &'static str {
        match self {
            ActType::Inform => "inform",
            ActType::Request => "request",
            ActType::OfferBook => "offer_book",
            ActType::BookConfirm => "book_confirm",
            ActType::Nicety => "nicety",
            ActType::Goodbye => "goodbye",
        }
    }
}

/// One constituent `(act type, domain, slot)` of a composite agent action.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActToken(pub ActType, pub String, pub String);

impl ActToken {
    pub fn new(kind: ActType, domain: &str, slot: &str) -> Self {
        Self(kind, domain.to_string(), slot.to_string())
    }

    pub fn kind(&self) -> ActType {
        self.0
    }

    pub fn domain(&self) -> &str {
        &self.1
    }

    pub fn slot(&self) -> &str {
        &self.2
    }
}

impl fmt::Display for ActToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({},{})", self.0.as_str(), self.1, self.2)
    }
}

/// Sorts and deduplicates a composite act.
pub fn canonical_act(mut act: Vec<ActToken>) -> Vec<ActToken> {
    act.sort();
    act.dedup();
    act
}

/// Flattens a composite act into a word sequence, three words per token.
pub fn act_words(act: &[ActToken]) -> Vec<String> {
    act.iter().flat_map(|t| [t.0.as_str().to_string(), t.1.clone(), t.2.clone()]).collect()
}

pub fn act_key(act: &[ActToken]) -> String {
    act.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnCategory {
    Transaction,
    Info,
    Nicety,
}

/// Category of the turn in which `act` was emitted.
pub fn category(act: &[ActToken]) -> TurnCategory {
    if act.iter().any(|t| matches!(t.0, ActType::OfferBook | ActType::BookConfirm)) {
        TurnCategory::Transaction
    } else if act.iter().any(|t| matches!(t.0, ActType::Inform | ActType::Request)) {
        TurnCategory::Info
    } else {
        TurnCategory::Nicety
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DbBucket {
    None,
    One,
    Few,
    Many,
}

impl DbBucket {
    pub fn from_count(n: usize) -> Self {
        match n {
            0 => DbBucket::None,
            1 => DbBucket::One,
            2..=5 => DbBucket::Few,
            _ => DbBucket::Many,
        }
    }

    fn token(self) -> &'static str {
        match self {
            DbBucket::None => "db_none",
            DbBucket::One => "db_one",
            DbBucket::Few => "db_few",
            DbBucket::Many => "db_many",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainBelief {
    pub constraints: BTreeMap<String, String>,
    pub bucket: DbBucket,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BeliefState {
    pub domains: BTreeMap<String, DomainBelief>,
}

impl BeliefState {
    pub fn constraints(&self, domain: &str) -> Option<&BTreeMap<String, String>> {
        self.domains.get(domain).map(|d| &d.constraints)
    }

    /// Delexicalized token form: domain, confirmed slot names, match bucket.
    pub fn tokens(&self) -> Vec<String> {
        if self.domains.is_empty() {
            return vec![EMPTY_BELIEF.to_string()];
        }
        let mut out = Vec::new();
        for (d, b) in &self.domains {
            out.push(d.clone());
            out.extend(b.constraints.keys().cloned());
            out.push(b.bucket.token().to_string());
        }
        out
    }

    /// Canonical key used to condition the behavior policy.
    pub fn key(&self) -> String {
        self.tokens().join(" ")
    }

    /// True when every constraint of `self` is also held, unchanged, by `later`.
    pub fn is_contained_in(&self, later: &BeliefState) -> bool {
        self.domains.iter().all(|(d, b)| {
            later.constraints(d).is_some_and(|lc| b.constraints.iter().all(|(k, v)| lc.get(k) == Some(v)))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainGoal {
    pub domain: String,
    pub constraints: BTreeMap<String, String>,
    /// Requested slots; `ref` is included whenever booking is required.
    pub requests: Vec<String>,
    pub book: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub domains: Vec<DomainGoal>,
}

impl Goal {
    pub fn requested(&self) -> BTreeSet<(String, String)> {
        self.domains
            .iter()
            .flat_map(|g| g.requests.iter().map(move |s| (g.domain.clone(), s.clone())))
            .collect()
    }

    /// Delexicalized token form of the goal.
    pub fn tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        for g in &self.domains {
            out.push(g.domain.clone());
            out.push("inform".into());
            out.extend(g.constraints.keys().cloned());
            if !g.requests.is_empty() {
                out.push("request".into());
                out.extend(g.requests.iter().cloned());
            }
            if g.book {
                out.push("book".into());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub belief: BeliefState,
    pub user_tokens: Vec<String>,
    pub act_tokens: Vec<ActToken>,
    pub resp_tokens: Vec<String>,
    pub planted_reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learned_reward: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub entity_offered: bool,
    pub answered: BTreeSet<(String, String)>,
    pub booking_completed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub split: Split,
    pub goal: Goal,
    pub turns: Vec<Turn>,
    pub outcome: Outcome,
}

impl Dialogue {
    /// Previous agent response at turn `t`, with a placeholder at `t = 0`.
    pub fn prev_response(&self, t: usize) -> Vec<String> {
        if t == 0 || self.turns[t - 1].resp_tokens.is_empty() {
            vec![EMPTY_RESPONSE.to_string()]
        } else {
            self.turns[t - 1].resp_tokens.clone()
        }
    }
}

/// Scores a sequence of `(belief, act)` turns against a goal.
///
/// A goal domain counts as offered when some turn informs its `name` while the
/// first database match for that turn's belief satisfies the goal constraints.
/// The entity is offered when every goal domain is. Requested slots count as
/// answered only once their domain has been offered, and `book_confirm`
/// answers `ref` only after a booking was offered for an offered entity.
pub fn evaluate_acts<'a, I>(schema: &Schema, goal: &Goal, turns: I) -> Outcome
where
    I: IntoIterator<Item = (&'a BeliefState, &'a [ActToken])>,
{
    let mut offered: BTreeSet<&str> = BTreeSet::new();
    let mut answered = BTreeSet::new();
    let mut offer_seen = BTreeSet::new();
    let mut booking_completed = false;
    let empty = BTreeMap::new();
    for (belief, act) in turns {
        for tok in act.iter().filter(|t| t.0 == ActType::Inform && t.2 == "name") {
            let Some(g) = goal.domains.iter().find(|g| g.domain == tok.1) else { continue };
            let Some(d) = schema.domain(&tok.1) else { continue };
            let cons = belief.constraints(&tok.1).unwrap_or(&empty);
            if let Some(e) = d.first_match(cons) {
                if g.constraints.iter().all(|(k, v)| e.values.get(k) == Some(v)) {
                    offered.insert(g.domain.as_str());
                }
            }
        }
        for tok in act {
            match tok.0 {
                ActType::Inform if tok.2 != "name" && offered.contains(tok.1.as_str()) => {
                    answered.insert((tok.1.clone(), tok.2.clone()));
                }
                ActType::OfferBook if offered.contains(tok.1.as_str()) => {
                    offer_seen.insert(tok.1.clone());
                }
                ActType::BookConfirm if offer_seen.contains(&tok.1) => {
                    answered.insert((tok.1.clone(), "ref".to_string()));
                    booking_completed = true;
                }
                _ => {}
            }
        }
    }
    let entity_offered = !goal.domains.is_empty() && goal.domains.iter().all(|g| offered.contains(g.domain.as_str()));
    Outcome { entity_offered, answered, booking_completed }
}

pub fn evaluate_outcome(schema: &Schema, dialogue: &Dialogue) -> Outcome {
    evaluate_acts(schema, &dialogue.goal, dialogue.turns.iter().map(|t| (&t.belief, t.act_tokens.as_slice())))
}
