//! Named parameter storage and gradient buffers.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Flat, ordered set of named matrices. Insertion order is the
/// serialization order, so two stores built by the same code are
/// layout-identical.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    /// Glorot-uniform initialised `rows x cols` matrix.
    pub fn add_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        self.add_uniform(name, rows, cols, limit, rng)
    }

    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        limit: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
        let value = Array2::from_shape_fn((rows, cols), |_| T::of(dist.sample(rng)));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        v: T,
    ) -> ParamId {
        self.add(name, Array2::from_elem((rows, cols), v))
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// SHA-256 over name, shape and little-endian bytes of every parameter
    /// whose name starts with `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (_, name, value) in self.iter().filter(|(_, n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            h.update((value.nrows() as u64).to_le_bytes());
            h.update((value.ncols() as u64).to_le_bytes());
            buf.clear();
            for &x in value.iter() {
                x.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    /// Overwrite values from another store with the same layout.
    pub fn copy_from(&mut self, other: &ParamStore<T>) {
        assert_eq!(self.names, other.names, "parameter layouts differ");
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.assign(src);
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub(crate) slots: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn empty(n: usize) -> Self {
        Self {
            slots: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<T>> {
        self.slots.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Array2<T>) {
        match &mut self.slots[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn global_norm(&self) -> T {
        self.slots
            .iter()
            .flatten()
            .map(|g| g.iter().map(|&x| x * x).sum::<T>())
            .sum::<T>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|x| x * s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slots
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hash_depends_on_values_and_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = ParamStore::<f32>::new();
        a.add_glorot("x.w", 3, 4, &mut rng);
        a.add_zeros("y.b", 1, 4);
        let b = a.clone();
        assert_eq!(a.hash_prefix("x."), b.hash_prefix("x."));
        assert_ne!(a.hash_prefix("x."), a.hash_prefix("y."));
        let mut c = a.clone();
        c.get_mut(ParamId(0))[[0, 0]] += 1.0;
        assert_ne!(a.hash_prefix("x."), c.hash_prefix("x."));
        assert_eq!(a.hash_prefix("y."), c.hash_prefix("y."));
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.add_zeros("w", 1, 1);
        s.add_zeros("w", 1, 1);
    }
}
