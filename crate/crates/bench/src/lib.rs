//! Shared fixtures for the benchmarks.

use caspi_core::toywoz::{generate_corpus, Corpus, EnvConfig};

/// A small seeded corpus: 64 train, 16 val and 16 test dialogues.
pub fn small_corpus() -> Corpus {
    let cfg = EnvConfig { n_train: 64, n_val: 16, n_test: 16, ..EnvConfig::default() };
    generate_corpus(&cfg, 3).expect("default schema is valid")
}
