//! Parameters and the basic learnable layers.
//!
//! Parameters live in a [`ParamStore`] under stable hierarchical names such
//! as `stage1.enc1.spatial.conv1.weight`. Each one is initialised from an RNG
//! seeded by `(seed, name)`, so two models that share a name share the value
//! no matter which optional modules were built around it.

use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)`.
    FanInUniform { fan_in: usize },
    Zeros,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    /// Used only while training (the MI embedding heads).
    pub training_only: bool,
}

#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
    training_only: bool,
}

pub(crate) fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: Vec::new(),
            by_name: BTreeMap::new(),
            training_only: false,
        }
    }

    /// Parameters added while this is set are flagged training-only.
    pub fn set_training_only(&mut self, on: bool) {
        self.training_only = on;
    }

    pub fn add(&mut self, name: &str, shape: Shape, init: Init) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
                Tensor::uniform(shape, -bound, bound, &mut rng)
            }
        };
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value: Arc::new(value),
            training_only: self.training_only,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Arc<Tensor> {
        &self.params[id.0].value
    }

    /// Mutable access; copies the tensor first if a graph still shares it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Scalar count of inference parameters (training-only excluded).
    pub fn count_inference(&self) -> usize {
        self.params.iter().filter(|p| !p.training_only).map(|p| p.value.len()).sum()
    }

    pub fn count_training_only(&self) -> usize {
        self.params.iter().filter(|p| p.training_only).map(|p| p.value.len()).sum()
    }

    /// Copy every parameter whose name and shape also exist in `other`.
    /// Returns how many tensors were copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for p in self.params.iter_mut() {
            if let Some(&id) = other.by_name.get(&p.name) {
                let src = &other.params[id.0].value;
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("no parameter named {name}")))?;
        let current = self.params[id.0].value.shape();
        if current != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: stored shape {} does not match model shape {current}",
                value.shape()
            )));
        }
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }
}

/// One forward pass: a graph plus lazily bound parameters.
pub struct Scope<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'s> Scope<'s> {
    pub fn new(store: &'s ParamStore, graph: Graph) -> Self {
        Scope {
            graph,
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn training(store: &'s ParamStore) -> Self {
        Scope::new(store, Graph::new())
    }

    pub fn inference(store: &'s ParamStore) -> Self {
        Scope::new(store, Graph::inference())
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.param(self.store.value(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every parameter touched by this pass.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let g = self.graph.grad((*v)?)?;
                Some((ParamId(i), g.clone()))
            })
            .collect()
    }

    pub fn bound_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_some())
            .map(|(i, _)| ParamId(i))
    }
}

impl Deref for Scope<'_> {
    type Target = Graph;

    fn deref(&self) -> &Graph {
        &self.graph
    }
}

impl DerefMut for Scope<'_> {
    fn deref_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv2d {
    /// Same-padded convolution (`pad = k / 2`) with bias.
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let weight = store.add(
            &format!("{name}.weight"),
            Shape::new(cout, cin, k, k),
            Init::FanInUniform { fan_in: cin * k * k },
        );
        let bias = Some(store.add(&format!("{name}.bias"), Shape::new(1, cout, 1, 1), Init::Zeros));
        Conv2d {
            weight,
            bias,
            cin,
            cout,
            k,
            stride,
        }
    }

    pub fn forward(&self, s: &mut Scope, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.conv2d(x, w, b, self.stride, self.k / 2)
    }

    pub fn num_params(&self) -> usize {
        self.cout * self.cin * self.k * self.k + if self.bias.is_some() { self.cout } else { 0 }
    }
}

/// 2×2 stride-2 transposed convolution: doubles resolution.
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2x2 {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        ConvTranspose2x2 {
            weight: store.add(
                &format!("{name}.weight"),
                Shape::new(cin, cout, 2, 2),
                Init::FanInUniform { fan_in: cin * 4 },
            ),
            bias: store.add(&format!("{name}.bias"), Shape::new(1, cout, 1, 1), Init::Zeros),
        }
    }

    pub fn forward(&self, s: &mut Scope, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.conv_transpose2x2(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct Depthwise3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Depthwise3x3 {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Depthwise3x3 {
            weight: store.add(&format!("{name}.weight"), Shape::new(c, 1, 3, 3), Init::FanInUniform { fan_in: 9 }),
            bias: store.add(&format!("{name}.bias"), Shape::new(1, c, 1, 1), Init::Zeros),
        }
    }

    pub fn forward(&self, s: &mut Scope, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.depthwise3x3(x, w, Some(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_name_not_order() {
        let mut a = ParamStore::new(3);
        a.add("x", Shape::new(2, 2, 1, 1), Init::FanInUniform { fan_in: 2 });
        let ya = a.add("y", Shape::new(4, 1, 1, 1), Init::FanInUniform { fan_in: 4 });
        let mut b = ParamStore::new(3);
        let yb = b.add("y", Shape::new(4, 1, 1, 1), Init::FanInUniform { fan_in: 4 });
        assert_eq!(a.value(ya), b.value(yb));
    }

    #[test]
    fn training_only_params_are_counted_apart() {
        let mut s = ParamStore::new(0);
        Conv2d::new(&mut s, "a", 3, 4, 3, 1);
        s.set_training_only(true);
        Conv2d::new(&mut s, "b", 4, 4, 1, 1);
        assert_eq!(s.count_inference(), 3 * 4 * 9 + 4);
        assert_eq!(s.count_training_only(), 16 + 4);
    }

    #[test]
    fn set_checks_shape() {
        let mut s = ParamStore::new(0);
        s.add("w", Shape::new(1, 1, 2, 2), Init::Zeros);
        assert!(s.set("w", Tensor::zeros(Shape::new(1, 1, 3, 3))).is_err());
        assert!(s.set("v", Tensor::zeros(Shape::new(1, 1, 2, 2))).is_err());
        s.set("w", Tensor::full(Shape::new(1, 1, 2, 2), 1.0)).unwrap();
    }
}
