use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use super::{DiffError, Tensor};

const CHECKPOINT_MAGIC: &[u8; 10] = b"CASPI-CKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// A named parameter tensor. Rank is 1 or 2; rank-1 parameters behave as `1 x n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub id: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => (1, self.data.len()),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let (r, c) = self.rows_cols();
        Tensor::new(r, c, self.data.clone())
    }
}

/// Named parameter tensors plus a global optimisation step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Ids must be unique.
    pub fn insert(&mut self, id: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<usize, DiffError> {
        if self.index.contains_key(id) {
            return Err(DiffError::DuplicateParam(id.to_string()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.is_empty() || shape.len() > 2 {
            return Err(DiffError::BadParamShape { id: id.to_string(), shape, len: data.len() });
        }
        let idx = self.params.len();
        self.params.push(Param { id: id.to_string(), shape, data });
        self.index.insert(id.to_string(), idx);
        Ok(idx)
    }

    /// Registers a parameter initialised from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        id: &str,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<usize, DiffError> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(id, shape, data)
    }

    pub fn index_of(&self, id: &str) -> Result<usize, DiffError> {
        self.index.get(id).copied().ok_or_else(|| DiffError::UnknownParam(id.to_string()))
    }

    pub fn get(&self, id: &str) -> Option<&Param> {
        self.index.get(id).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Param> {
        self.index.get(id).map(|&i| &mut self.params[i])
    }

    pub fn by_index(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn by_index_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Describes the first id or shape difference from `expected`, if any.
    pub fn layout_mismatch(&self, expected: &ParamStore) -> Option<String> {
        if expected.len() != self.len() {
            return Some(format!("{} parameters, expected {}", self.len(), expected.len()));
        }
        expected
            .iter()
            .zip(self.iter())
            .find(|(a, b)| a.id != b.id || a.shape != b.shape)
            .map(|(a, b)| format!("`{}` {:?}, expected `{}` {:?}", b.id, b.shape, a.id, a.shape))
    }

    /// Writes the checkpoint layout: magic, version, count, then per parameter
    /// id length, id bytes, rank, dims and little-endian values.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let id = p.id.as_bytes();
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id)?;
            w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
            for &d in &p.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &p.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, DiffError> {
        let mut magic = [0u8; 10];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(DiffError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(DiffError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let id_len = read_u32(&mut r)? as usize;
            let mut id = vec![0u8; id_len];
            r.read_exact(&mut id)?;
            let id = String::from_utf8(id).map_err(|_| DiffError::Checkpoint("id is not utf-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            store.insert(&id, shape, data)?;
        }
        Ok(store)
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffError> {
        crate::io::write_atomic(path, &self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DiffError> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(bytes.as_slice())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, DiffError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: store.iter().map(|p| vec![0.0; p.data.len()]).collect() }
    }

    pub fn get(&self, idx: usize) -> &[f64] {
        &self.grads[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.grads[idx]
    }

    pub fn by_id<'a>(&'a self, store: &ParamStore, id: &str) -> Option<&'a [f64]> {
        store.index.get(id).map(|&i| self.grads[i].as_slice())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.grads.iter()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            for x in g.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let n = self.global_norm();
        if n > max_norm && n.is_finite() {
            self.scale(max_norm / n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_ids_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(s.insert("w", vec![1], vec![0.0]), Err(DiffError::DuplicateParam(_))));
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.insert_uniform("w", vec![16, 16], 16, &mut rng).unwrap();
        assert!(s.get("w").unwrap().data.iter().all(|x| x.abs() <= 0.25));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = ParamStore::new().to_checkpoint_bytes();
        bytes[0] = b'X';
        assert!(ParamStore::read_checkpoint(bytes.as_slice()).is_err());
    }

    #[test]
    fn header_layout() {
        let mut s = ParamStore::new();
        s.insert("ab", vec![1], vec![1.5]).unwrap();
        let b = s.to_checkpoint_bytes();
        assert_eq!(&b[..10], b"CASPI-CKPT");
        assert_eq!(u32::from_le_bytes(b[10..14].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[14..18].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[18..22].try_into().unwrap()), 2);
        assert_eq!(&b[22..24], b"ab");
        assert_eq!(b.len(), 10 + 4 + 4 + 4 + 2 + 4 + 8 + 8);
        assert_eq!(f64::from_le_bytes(b[b.len() - 8..].try_into().unwrap()), 1.5);
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            values in proptest::collection::vec(proptest::num::f64::ANY, 1..40),
            cols in 1usize..5,
        ) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let mut s = ParamStore::new();
            s.insert("m", vec![rows, cols], values[..rows * cols].to_vec()).unwrap();
            s.insert("v", vec![values.len()], values.clone()).unwrap();
            let back = ParamStore::read_checkpoint(s.to_checkpoint_bytes().as_slice()).unwrap();
            prop_assert_eq!(back.len(), 2);
            for (a, b) in s.iter().zip(back.iter()) {
                prop_assert_eq!(&a.id, &b.id);
                prop_assert_eq!(&a.shape, &b.shape);
                let abits: Vec<u64> = a.data.iter().map(|x| x.to_bits()).collect();
                let bbits: Vec<u64> = b.data.iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(abits, bbits);
            }
        }
    }
}
