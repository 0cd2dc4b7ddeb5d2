use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::realize::template_words;
use super::simulate::{sample_goal, simulate_dialogue, ExpertProfile, GoalConfig};
use super::{act_words, evaluate_outcome, Dialogue, EnvError, Schema, Split, EMPTY_BELIEF, EMPTY_RESPONSE};
use crate::io::{mix_seed, write_atomic};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const META_FILE: &str = "corpus_meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub domains: Vec<String>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub goal: GoalConfig,
    pub expert: ExpertProfile,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            domains: vec!["restaurant".into(), "hotel".into(), "taxi".into()],
            n_train: 3000,
            n_val: 500,
            n_test: 500,
            goal: GoalConfig::default(),
            expert: ExpertProfile::default(),
        }
    }
}

impl EnvConfig {
    pub fn schema(&self) -> Result<Schema, EnvError> {
        Schema::standard().restrict(&self.domains)
    }
}

/// Closed token vocabulary shared by every encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocab {
    pub ids: BTreeMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let set: BTreeSet<String> = tokens.into_iter().collect();
        Self { ids: set.into_iter().enumerate().map(|(i, t)| (t, i as u32)).collect() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    /// Maps tokens to ids; the first unknown token is returned as the error.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<u32>, String> {
        tokens.iter().map(|t| self.id(t.as_ref()).ok_or_else(|| t.as_ref().to_string())).collect()
    }

    pub fn fingerprint(&self) -> String {
        crate::io::sha256_hex(&serde_json::to_vec(self).expect("vocab serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub seed: u64,
    pub schema_fingerprint: String,
    pub vocab_fingerprint: String,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub dialogues: Vec<Dialogue>,
    pub vocab: Vocab,
    pub meta: CorpusMeta,
}

fn vocab_for(schema: &Schema, dialogues: &[Dialogue]) -> Vocab {
    let mut tokens = template_words(schema);
    tokens.extend(act_words(&schema.act_inventory()));
    tokens.extend(["db_none", "db_one", "db_few", "db_many", "inform", "request", "book"].map(String::from));
    tokens.push(EMPTY_BELIEF.into());
    tokens.push(EMPTY_RESPONSE.into());
    for d in dialogues {
        tokens.extend(d.goal.tokens());
        for t in &d.turns {
            tokens.extend(t.belief.tokens());
            tokens.extend(t.user_tokens.iter().cloned());
            tokens.extend(t.resp_tokens.iter().cloned());
        }
    }
    Vocab::from_tokens(tokens)
}

/// Generates train, val and test splits. Dialogue `i` uses its own stream
/// seeded from `(seed, i)`, so the output does not depend on generation order.
pub fn generate_corpus(cfg: &EnvConfig, seed: u64) -> Result<Corpus, EnvError> {
    let schema = cfg.schema()?;
    let total = cfg.n_train + cfg.n_val + cfg.n_test;
    let mut dialogues = Vec::with_capacity(total);
    for i in 0..total {
        let split = if i < cfg.n_train {
            Split::Train
        } else if i < cfg.n_train + cfg.n_val {
            Split::Val
        } else {
            Split::Test
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
        let goal = sample_goal(&schema, &cfg.goal, &mut rng)?;
        let turns = simulate_dialogue(&schema, &goal, &cfg.expert, &mut rng);
        let mut d = Dialogue { id: format!("d{i:05}"), split, goal, turns, outcome: Default::default() };
        d.outcome = evaluate_outcome(&schema, &d);
        dialogues.push(d);
    }
    let vocab = vocab_for(&schema, &dialogues);
    let meta = CorpusMeta {
        seed,
        schema_fingerprint: schema.fingerprint(),
        vocab_fingerprint: vocab.fingerprint(),
        n_train: cfg.n_train,
        n_val: cfg.n_val,
        n_test: cfg.n_test,
    };
    Ok(Corpus { dialogues, vocab, meta })
}

fn io_err(path: &Path, source: std::io::Error) -> EnvError {
    EnvError::Io { path: path.display().to_string(), source }
}

fn json_err(path: &Path, source: serde_json::Error) -> EnvError {
    EnvError::Json { path: path.display().to_string(), source }
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Dialogue> {
        self.dialogues.iter().filter(move |d| d.split == split)
    }

    pub fn write_dialogues(path: &Path, dialogues: &[Dialogue]) -> Result<(), EnvError> {
        let bytes = crate::io::to_json_lines(dialogues).map_err(|e| json_err(path, e))?;
        write_atomic(path, &bytes).map_err(|e| io_err(path, e))
    }

    pub fn read_dialogues(path: &Path) -> Result<Vec<Dialogue>, EnvError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        crate::io::from_json_lines(&text).map_err(|e| json_err(path, e))
    }

    /// Writes the corpus, vocabulary and metadata files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EnvError> {
        Self::write_dialogues(&dir.join(CORPUS_FILE), &self.dialogues)?;
        for (name, bytes) in [
            (VOCAB_FILE, serde_json::to_vec_pretty(&self.vocab)),
            (META_FILE, serde_json::to_vec_pretty(&self.meta)),
        ] {
            let path = dir.join(name);
            let mut bytes = bytes.map_err(|e| json_err(&path, e))?;
            bytes.push(b'\n');
            write_atomic(&path, &bytes).map_err(|e| io_err(&path, e))?;
        }
        Ok(())
    }

    /// Loads a corpus directory; `dialogue_file` overrides the dialogue file name
    /// (used for annotated copies).
    pub fn load(dir: &Path, dialogue_file: &str) -> Result<Self, EnvError> {
        let dialogues = Self::read_dialogues(&dir.join(dialogue_file))?;
        let read_json = |name: &str| -> Result<serde_json::Value, EnvError> {
            let path = dir.join(name);
            let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            serde_json::from_str(&text).map_err(|e| json_err(&path, e))
        };
        let vocab: Vocab = serde_json::from_value(read_json(VOCAB_FILE)?).map_err(|e| json_err(&dir.join(VOCAB_FILE), e))?;
        let meta: CorpusMeta = serde_json::from_value(read_json(META_FILE)?).map_err(|e| json_err(&dir.join(META_FILE), e))?;
        Ok(Self { dialogues, vocab, meta })
    }
}
