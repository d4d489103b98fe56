//! Named parameter storage and the per-forward binding of parameters onto a
//! tape. One `Graph` per forward/backward pass; the store owns the weights.

use crate::autodiff::{DiffError, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn register(&mut self, name: &str, t: Tensor) -> ParamId {
        assert!(
            self.entries.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), t));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries.iter().enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Flattened copy of all values, in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_values());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrite all values from a flat buffer (registration order).
    pub fn load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.total_values());
        let mut offset = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }
}

/// A tape plus the lazy binding of store parameters onto it.
pub struct Graph<'m> {
    pub tape: Tape,
    store: &'m ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'m> Graph<'m> {
    pub fn new(store: &'m ParamStore) -> Self {
        Graph { tape: Tape::new(), store, bound: vec![None; store.len()] }
    }

    /// Bind (or fetch) a parameter as a tape leaf.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.tape.leaf(t)
    }

    /// Reverse sweep; returns per-parameter gradients (zero tensors for
    /// parameters that never entered this graph).
    pub fn backward(&mut self, objective: Var) -> Result<GradSet, DiffError> {
        let grads = self.tape.backward(objective)?;
        Ok(GradSet::from_bound(self.store, &self.bound, &grads))
    }
}

/// Per-parameter gradient tensors, aligned with the store.
#[derive(Debug, Clone)]
pub struct GradSet {
    grads: Vec<Tensor>,
}

impl GradSet {
    pub fn zeros(store: &ParamStore) -> Self {
        GradSet { grads: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect() }
    }

    fn from_bound(store: &ParamStore, bound: &[Option<Var>], grads: &Gradients) -> Self {
        let mut out = Self::zeros(store);
        for (i, b) in bound.iter().enumerate() {
            if let Some(v) = b {
                out.grads[i] = grads.get(*v);
            }
        }
        out
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn add(&mut self, other: &GradSet) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_roundtrip() {
        let mut store = ParamStore::new();
        store.register("a", Tensor::vector(vec![1.0, 2.0]));
        store.register("b", Tensor::matrix(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let flat = store.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut store2 = store.clone();
        store2.load_flat(&[6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
        assert_eq!(store2.flatten(), vec![6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn unbound_parameters_get_zero_gradients() {
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::scalar(2.0));
        let b = store.register("b", Tensor::scalar(3.0));
        let mut g = Graph::new(&store);
        let va = g.p(a);
        let sq = g.tape.mul(va, va);
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(a).item(), 4.0);
        assert_eq!(grads.get(b).item(), 0.0);
    }
}
