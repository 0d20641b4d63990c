use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Record, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named parameter tensors of one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, data: Vec<f64>) -> Result<()> {
        let e = &mut self.entries[id.0];
        e.value = Tensor::new(data, e.value.shape())?;
        Ok(())
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.trainable = trainable;
            n += 1;
        }
        n
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.value = Tensor::zeros(e.value.shape());
            n += 1;
        }
        n
    }

    /// A copy whose trainable entries are fresh gradient-tracked leaves.
    pub fn tracked(&self) -> ParamStore {
        let entries = self
            .entries
            .iter()
            .map(|e| Entry {
                name: e.name.clone(),
                value: if e.trainable { e.value.to_param() } else { e.value.detach() },
                trainable: e.trainable,
            })
            .collect();
        ParamStore { entries, index: self.index.clone() }
    }

    /// A copy with the listed entries replaced by the given tensors, graph
    /// links included. Lets gradient checks treat parameters as inputs.
    pub fn substitute(&self, values: &[(ParamId, Tensor)]) -> Result<ParamStore> {
        let mut out = self.clone();
        for (id, t) in values {
            let e = out.entries.get_mut(id.0).ok_or_else(|| Error::Contract(format!("unknown parameter {}", id.0)))?;
            if e.value.shape() != t.shape() {
                return Err(Error::shape("substitute", e.value.shape(), t.shape()));
            }
            e.value = t.clone();
        }
        Ok(out)
    }

    pub fn to_records(&self) -> Vec<Record> {
        self.entries
            .iter()
            .map(|e| Record { name: e.name.clone(), shape: e.value.shape().to_vec(), data: e.value.to_vec() })
            .collect()
    }

    /// Loads values by name. Every parameter must be present with its exact
    /// shape; names in `records` that this store does not know are an error.
    pub fn load_records(&mut self, records: &[Record]) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for r in records {
            let id = self.find(&r.name).ok_or_else(|| Error::Format(format!("unexpected parameter {}", r.name)))?;
            let e = &mut self.entries[id.0];
            if e.value.shape() != r.shape.as_slice() {
                return Err(Error::Shape { op: "load_records", lhs: e.value.shape().to_vec(), rhs: r.shape.clone() });
            }
            e.value = Tensor::new(r.data.clone(), &r.shape)?;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("missing parameter {}", self.entries[i].name)));
        }
        Ok(())
    }
}

/// Creates parameters with deterministic initial values.
pub struct ParamBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder { store: ParamStore::default(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn push(&mut self, name: String, value: Tensor) -> ParamId {
        assert!(!self.store.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.store.entries.len();
        self.store.index.insert(name.clone(), id);
        self.store.entries.push(Entry { name, value, trainable: true });
        ParamId(id)
    }

    /// He-normal initialization for a layer with the given fan-in.
    pub fn he(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> ParamId {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let value = Tensor::randn(shape, std, &mut self.rng);
        self.push(name.into(), value)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.push(name.into(), Tensor::zeros(shape))
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.push(name.into(), Tensor::full(shape, value))
    }

    /// Overwrites an already created parameter with a constant.
    pub fn set_constant(&mut self, id: ParamId, value: f64) {
        let e = &mut self.store.entries[id.0];
        e.value = Tensor::full(e.value.shape(), value);
    }

    /// Multiplies an already created parameter by `factor`.
    pub fn rescale(&mut self, id: ParamId, factor: f64) {
        let e = &mut self.store.entries[id.0];
        e.value = e.value.scale(factor);
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_roundtrip_and_validation() {
        let mut pb = ParamBuilder::new(7);
        let a = pb.he("a.w", &[2, 3], 3);
        pb.zeros("a.b", &[2]);
        let ps = pb.finish();
        let recs = ps.to_records();
        let mut other = ParamBuilder::new(8);
        other.he("a.w", &[2, 3], 3);
        other.zeros("a.b", &[2]);
        let mut other = other.finish();
        other.load_records(&recs).unwrap();
        assert_eq!(other.get(a).data(), ps.get(a).data());
        assert!(other.load_records(&recs[..1]).is_err());
    }

    #[test]
    fn tracked_respects_trainable_flags() {
        let mut pb = ParamBuilder::new(1);
        let a = pb.zeros("enc.w", &[1]);
        let b = pb.zeros("dec.w", &[1]);
        let mut ps = pb.finish();
        assert_eq!(ps.set_trainable_prefix("enc", false), 1);
        let t = ps.tracked();
        assert!(!t.get(a).requires_grad());
        assert!(t.get(b).requires_grad());
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut pb = ParamBuilder::new(1);
        pb.zeros("x", &[1]);
        pb.zeros("x", &[1]);
    }
}
