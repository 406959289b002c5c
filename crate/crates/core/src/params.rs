//! Named parameter storage and the forward-pass context.
//!
//! `ParamSet` owns the master weights (f32 in training; cast to f64 for
//! gradient checks). Model structure types hold `ParamId`s into it, so the
//! same structure drives both precisions. `ModelCtx` registers parameters
//! as graph leaves on demand, one leaf per parameter per graph.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone)]
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, t: Tensor<T>) {
        assert_eq!(t.shape(), self.tensors[id.0].shape(), "set shape mismatch");
        self.tensors[id.0] = t;
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Iterate in registration order (stable, deterministic).
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// Forward-pass context: a graph plus lazily registered parameter leaves.
pub struct ModelCtx<'a, 'g, T: Scalar> {
    pub g: &'g mut Graph<T>,
    params: &'a ParamSet<T>,
    vars: Vec<Option<Var>>,
    overrides: HashMap<ParamId, Var>,
}

impl<'a, 'g, T: Scalar> ModelCtx<'a, 'g, T> {
    pub fn new(g: &'g mut Graph<T>, params: &'a ParamSet<T>) -> Self {
        let n = params.len();
        Self {
            g,
            params,
            vars: vec![None; n],
            overrides: HashMap::new(),
        }
    }

    /// Substitute an externally created leaf for a parameter; gradient checks
    /// use this to differentiate with respect to chosen parameters.
    pub fn override_param(&mut self, id: ParamId, var: Var) {
        self.overrides.insert(id, var);
    }

    /// Graph leaf for a parameter, registering it on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.overrides.get(&id) {
            return v;
        }
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = self.g.leaf(self.params.get(id).clone());
        self.vars[id.0] = Some(v);
        v
    }

    /// Parameters registered in this graph, with their leaves.
    pub fn registered(&self) -> Vec<(ParamId, Var)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }
}

/// Deterministic N(0, std) sample via Box-Muller; rand_distr is avoided so
/// the stream stays pinned to ChaCha alone.
pub fn randn(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
}

/// Gaussian-filled tensor, std `std`.
pub fn randn_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(randn(rng, std)))
}

/// Uniform(-a, a) tensor.
pub fn uniform_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64((rng.random::<f64>() * 2.0 - 1.0) * a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn registration_and_lookup() {
        let mut ps = ParamSet::<f32>::new();
        let id = ps.register("a.w", Tensor::ones(&[2, 2]));
        assert_eq!(ps.name(id), "a.w");
        assert_eq!(ps.lookup("a.w"), Some(id));
        assert_eq!(ps.lookup("missing"), None);
    }

    #[test]
    fn ctx_registers_once() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.register("w", Tensor::ones(&[2]));
        let mut g = Graph::new();
        let mut cx = ModelCtx::new(&mut g, &ps);
        let v1 = cx.param(id);
        let v2 = cx.param(id);
        assert_eq!(v1, v2);
        assert_eq!(cx.registered().len(), 1);
    }

    #[test]
    fn randn_is_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            assert_eq!(randn(&mut a, 1.0), randn(&mut b, 1.0));
        }
    }
}
