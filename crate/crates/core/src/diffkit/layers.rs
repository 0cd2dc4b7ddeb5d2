use std::collections::HashMap;

use rand::Rng;

use super::{DiffError, NodeId, ParamStore, Tape};

/// Affine map `x·W + b` over row vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let weight = format!("{name}.w");
        let bias = format!("{name}.b");
        store.insert_uniform(&weight, vec![input, output], input, rng)?;
        store.insert_uniform(&bias, vec![output], input, rng)?;
        Ok(Self { weight, bias, input, output })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId, DiffError> {
        let w = tape.param(store, &self.weight)?;
        let b = tape.param(store, &self.bias)?;
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }
}

/// Parameter ids of one recurrent direction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GruParams {
    pub w_input: String,
    pub b_input: String,
    pub u_hidden: String,
    pub b_hidden: String,
}

impl GruParams {
    fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let p = Self {
            w_input: format!("{name}.w"),
            b_input: format!("{name}.bw"),
            u_hidden: format!("{name}.u"),
            b_hidden: format!("{name}.bu"),
        };
        store.insert_uniform(&p.w_input, vec![input, 3 * hidden], hidden, rng)?;
        store.insert_uniform(&p.b_input, vec![3 * hidden], hidden, rng)?;
        store.insert_uniform(&p.u_hidden, vec![hidden, 3 * hidden], hidden, rng)?;
        store.insert_uniform(&p.b_hidden, vec![3 * hidden], hidden, rng)?;
        Ok(p)
    }

    fn run(&self, tape: &mut Tape, store: &ParamStore, embedded: NodeId) -> Result<NodeId, DiffError> {
        let w = tape.param(store, &self.w_input)?;
        let bw = tape.param(store, &self.b_input)?;
        let u = tape.param(store, &self.u_hidden)?;
        let bu = tape.param(store, &self.b_hidden)?;
        let xw = tape.matmul(embedded, w)?;
        let xproj = tape.add(xw, bw)?;
        tape.gru(xproj, u, bu)
    }
}

/// Token embedding followed by a single-layer bidirectional GRU. The output is
/// the final forward state concatenated with the final backward state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiGruEncoder {
    pub embedding: String,
    pub forward: GruParams,
    pub backward: GruParams,
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl BiGruEncoder {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        embed_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let embedding = format!("{name}.emb");
        store.insert_uniform(&embedding, vec![vocab, embed_dim], 1, rng)?;
        let forward = GruParams::init(store, &format!("{name}.fwd"), embed_dim, hidden, rng)?;
        let backward = GruParams::init(store, &format!("{name}.bwd"), embed_dim, hidden, rng)?;
        Ok(Self { embedding, forward, backward, vocab, embed_dim, hidden })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Encodes a non-empty token-id sequence into a `1 x 2H` row.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, tokens: &[u32]) -> Result<NodeId, DiffError> {
        if tokens.is_empty() {
            return Err(DiffError::EmptySequence);
        }
        let mut fwd_ids = Vec::with_capacity(tokens.len());
        for &t in tokens {
            if t as usize >= self.vocab {
                return Err(DiffError::OutOfVocabulary { id: t, vocab: self.vocab });
            }
            fwd_ids.push(t as usize);
        }
        let bwd_ids: Vec<usize> = fwd_ids.iter().rev().copied().collect();
        let emb = tape.param(store, &self.embedding)?;
        let xf = tape.gather_rows(emb, &fwd_ids)?;
        let xb = tape.gather_rows(emb, &bwd_ids)?;
        let hf = self.forward.run(tape, store, xf)?;
        let hb = self.backward.run(tape, store, xb)?;
        tape.concat_cols(&[hf, hb])
    }

    /// Encodes a batch of sequences into one row each. Repeated sequences are
    /// encoded once and shared.
    pub fn encode_many<'a, I>(&self, tape: &mut Tape, store: &ParamStore, seqs: I) -> Result<NodeId, DiffError>
    where
        I: IntoIterator<Item = &'a [u32]>,
    {
        let mut unique: HashMap<&'a [u32], usize> = HashMap::new();
        let mut rows = Vec::new();
        let mut idx = Vec::new();
        for s in seqs {
            let next = unique.len();
            let k = *unique.entry(s).or_insert(next);
            if k == next {
                rows.push(self.encode(tape, store, s)?);
            }
            idx.push(k);
        }
        let stacked = tape.stack_rows(&rows)?;
        tape.gather_rows(stacked, &idx)
    }
}
