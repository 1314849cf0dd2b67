//! Named parameter storage and the Adam optimizer.
//!
//! [`ParamStore`] keeps tensors in insertion order — iteration order never
//! depends on hashing, so optimizer sweeps and checkpoints are reproducible.
//! Each entry is either trainable (bound into graphs as a differentiable
//! leaf) or frozen (bound as a constant leaf that backward cannot reach).

use std::collections::BTreeMap;

use crate::graph::{Gradients, Graph, GraphError, Result, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(GraphError::DuplicateLeaf(name.to_string()));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry { name: name.to_string(), value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    pub fn is_trainable(&self, name: &str) -> Option<bool> {
        self.index.get(name).map(|&i| self.entries[i].trainable)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// (name, tensor, trainable) in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value, e.trainable))
    }

    /// Names of trainable entries in insertion order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.name.clone()).collect()
    }

    /// Total element count over trainable entries.
    pub fn trainable_numel(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    /// Bind every entry into `graph` — trainable entries as differentiable
    /// leaves, frozen entries as constants. Returns name -> handle.
    pub fn bind_all(&self, graph: &mut Graph) -> Result<BTreeMap<String, Var>> {
        let mut vars = BTreeMap::new();
        for e in &self.entries {
            let v = if e.trainable {
                graph.param(&e.name, e.value.clone())?
            } else {
                graph.frozen(&e.name, e.value.clone())?
            };
            vars.insert(e.name.clone(), v);
        }
        Ok(vars)
    }

    /// Bind one entry, respecting its trainable flag.
    pub fn bind(&self, graph: &mut Graph, name: &str) -> Result<Var> {
        let &i = self.index.get(name).ok_or_else(|| GraphError::UnknownParam(name.to_string()))?;
        let e = &self.entries[i];
        if e.trainable {
            graph.param(&e.name, e.value.clone())
        } else {
            graph.frozen(&e.name, e.value.clone())
        }
    }

    /// Merge all entries of `other` into `self` under `prefix`.
    pub fn absorb(&mut self, prefix: &str, other: &ParamStore) -> Result<()> {
        for (name, tensor, trainable) in other.iter() {
            self.insert(&format!("{prefix}{name}"), tensor.clone(), trainable)?;
        }
        Ok(())
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name and
/// created lazily on the first step that provides a gradient for that name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight-decay coefficient; each step first scales the
    /// parameter by `1 − lr·decay` and then applies the moment update.
    /// Zero (the default) leaves the update rule untouched.
    pub decay: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.0,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn with_decay(lr: f64, decay: f64) -> Self {
        Self { decay, ..Self::new(lr) }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update. Only trainable entries with a gradient present are
    /// touched; everything else is left exactly as it was.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names = store.trainable_names();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let p = store.get_mut(&name).expect("name came from the store");
            if g.numel() != p.numel() {
                return Err(GraphError::InvalidShape {
                    detail: format!(
                        "gradient for `{name}` has {} elements, parameter has {}",
                        g.numel(),
                        p.numel()
                    ),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let shrink = 1.0 - self.lr * self.decay;
            for ((pv, &gv), (mv, vv)) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                if self.decay != 0.0 {
                    *pv *= shrink;
                }
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn store_preserves_insertion_order() {
        let mut s = ParamStore::new();
        s.insert("zebra", Tensor::scalar(1.0), true).unwrap();
        s.insert("apple", Tensor::scalar(2.0), false).unwrap();
        s.insert("mango", Tensor::scalar(3.0), true).unwrap();
        let names: Vec<&str> = s.iter().map(|(n, _, _)| n).collect();
        assert_eq!(names, ["zebra", "apple", "mango"]);
        assert_eq!(s.trainable_names(), ["zebra", "mango"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(0.0), true).unwrap();
        assert!(s.insert("w", Tensor::scalar(1.0), false).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With a constant unit gradient, the bias-corrected first step is
        // exactly lr (up to eps): m̂ = g, v̂ = g², step = lr·g/|g|.
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(10.0), true).unwrap();
        let mut opt = Adam::new(0.5);
        let mut grads = Gradients::default();
        grads.insert("x".into(), Tensor::scalar(4.0));
        opt.step(&mut s, &grads).unwrap();
        let got = s.get("x").unwrap().item();
        assert!((got - 9.5).abs() < 1e-7, "got {got}");
    }

    #[test]
    fn adam_descends_quadratic() {
        // Minimize (x-3)²; gradient 2(x-3).
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(-2.0), true).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let x = s.get("x").unwrap().item();
            let mut grads = Gradients::default();
            grads.insert("x".into(), Tensor::scalar(2.0 * (x - 3.0)));
            opt.step(&mut s, &grads).unwrap();
        }
        let x = s.get("x").unwrap().item();
        assert!((x - 3.0).abs() < 1e-2, "converged to {x}");
    }

    #[test]
    fn frozen_entries_never_move() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(7.0), false).unwrap();
        let mut opt = Adam::new(1.0);
        let mut grads = Gradients::default();
        grads.insert("w".into(), Tensor::scalar(100.0));
        opt.step(&mut s, &grads).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 7.0);
    }

    #[test]
    fn frozen_binding_blocks_gradients_through_training_step() {
        // End-to-end: loss = w_frozen · x_train; only x receives a gradient,
        // only x moves under Adam.
        let mut s = ParamStore::new();
        s.insert("wf", Tensor::scalar(3.0), false).unwrap();
        s.insert("x", Tensor::scalar(2.0), true).unwrap();
        let mut g = Graph::new();
        let vars = s.bind_all(&mut g).unwrap();
        let y = g.mul(vars["wf"], vars["x"]).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get("wf").is_none());
        let mut opt = Adam::new(0.01);
        opt.step(&mut s, &grads).unwrap();
        assert_eq!(s.get("wf").unwrap().item(), 3.0);
        assert!(s.get("x").unwrap().item() < 2.0);
    }
}
