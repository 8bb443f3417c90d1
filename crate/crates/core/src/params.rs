//! Named parameter storage and initialisation.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::rng::Xoshiro;
use crate::tensor::{Real, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Graph leaves for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Leaves created elsewhere, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total scalar parameter count.
    pub fn census(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Put every parameter on `graph` as a gradient-receiving leaf.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| graph.param(t.clone())).collect())
    }

    /// Put every parameter on `graph` as a constant (inference only).
    pub fn bind_frozen(&self, graph: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| graph.constant(t.clone())).collect())
    }
}

/// Uniform `(-b, b)` with `b = gain * sqrt(6 / fan_in)` (He/Kaiming uniform).
pub fn kaiming_uniform(shape: Vec<usize>, fan_in: usize, gain: f64, rng: &mut Xoshiro) -> Tensor {
    let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| rng.gen_range(-bound..bound) as f32)
        .collect();
    Tensor::new(shape, data).expect("shape matches length")
}

pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut Xoshiro) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| rng.gen_range(-bound..bound) as f32)
        .collect();
    Tensor::new(shape, data).expect("shape matches length")
}
