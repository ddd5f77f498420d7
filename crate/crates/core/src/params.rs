//! Named trainable parameters and their tape bindings.
//!
//! Parameters live in a sorted map so every iteration order (initialization,
//! gradient collection, optimizer updates, serialization) is deterministic.
//! All weight matrices are stored `[in, out]` and applied as `x @ W`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    map: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.map.insert(name.into(), tensor.with_grad());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn num_coords(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Register every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundVars {
        self.bind_inner(tape, true)
    }

    /// Register every parameter as a constant: forward passes only, no
    /// gradient buffers. Used for replay and evaluation.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundVars {
        self.bind_inner(tape, false)
    }

    fn bind_inner(&self, tape: &mut Tape, trainable: bool) -> BoundVars {
        let mut vars = BTreeMap::new();
        for (name, tensor) in &self.map {
            let var = if trainable {
                tape.leaf(tensor.clone())
            } else {
                tape.constant(tensor.clone())
            };
            vars.insert(name.clone(), var);
        }
        BoundVars { vars }
    }

    /// Gradients for every parameter after a backward pass, keyed like the
    /// parameter map. Parameters that did not participate in the loss get
    /// explicit zero tensors.
    pub fn collect_grads(&self, tape: &Tape, bound: &BoundVars) -> BTreeMap<String, Tensor> {
        let mut grads = BTreeMap::new();
        for (name, tensor) in &self.map {
            let var = bound.get(name);
            let grad = match tape.grad(var) {
                Some(g) => Tensor::new(tensor.shape().to_vec(), g.to_vec()),
                None => Tensor::zeros(tensor.shape().to_vec()),
            };
            grads.insert(name.clone(), grad);
        }
        grads
    }
}

/// Tape handles for one binding of a parameter set.
#[derive(Debug, Clone)]
pub struct BoundVars {
    vars: BTreeMap<String, Var>,
}

impl BoundVars {
    /// Panics on an unknown name: parameter wiring is fixed at model
    /// construction, so a miss is a programming error.
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name:?}"))
    }
}

/// Glorot-uniform matrix `[rows, cols]`: U(-sqrt(6/(rows+cols)), +).
pub fn glorot_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::matrix(rows, cols, data)
}

/// L2 norm over a full gradient map.
pub fn grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn insert_marks_trainable_and_orders_names() {
        let mut p = ModelParams::new();
        p.insert("b.weight", Tensor::zeros(vec![2]));
        p.insert("a.weight", Tensor::zeros(vec![3]));
        let names: Vec<_> = p.names().cloned().collect();
        assert_eq!(names, ["a.weight", "b.weight"]);
        assert!(p.get("a.weight").unwrap().requires_grad());
        assert_eq!(p.num_coords(), 5);
    }

    #[test]
    fn glorot_respects_limit_and_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = glorot_matrix(20, 30, &mut rng);
        let limit = (6.0 / 50.0f64).sqrt();
        assert!(m.data().iter().all(|&v| v.abs() < limit));
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let m2 = glorot_matrix(20, 30, &mut rng2);
        assert_eq!(m, m2);
    }

    #[test]
    fn collect_grads_returns_zeros_for_unused_params() {
        let mut p = ModelParams::new();
        p.insert("used", Tensor::vector(vec![1.0, 2.0]));
        p.insert("unused", Tensor::vector(vec![3.0]));
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let loss = tape.sum(bound.get("used")).unwrap();
        tape.backward(loss).unwrap();
        let grads = p.collect_grads(&tape, &bound);
        assert_eq!(grads["used"].data(), &[1.0, 1.0]);
        assert_eq!(grads["unused"].data(), &[0.0]);
        assert!((grad_norm(&grads) - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn frozen_binding_takes_no_gradients() {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::vector(vec![2.0]));
        let mut tape = Tape::new();
        let bound = p.bind_frozen(&mut tape);
        let loss = tape.sum(bound.get("w")).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(bound.get("w")).is_none());
    }
}
