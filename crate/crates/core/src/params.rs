//! Named parameter storage shared by the models, the optimizer and the
//! checkpoint format.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Order is insertion order, which makes
/// iteration (and therefore optimizer updates and serialization) deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    trainable: Vec<bool>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), trainable: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.insert(name.into(), value, true)
    }

    /// Stored alongside the parameters but never updated.
    pub fn add_fixed(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor<S>, trainable: bool) -> ParamId {
        assert!(!self.names.contains(&name), "duplicate parameter name `{name}`");
        self.names.push(name);
        self.tensors.push(value);
        self.trainable.push(trainable);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    /// Total number of scalar entries in trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().zip(&self.trainable).filter(|(_, t)| **t).map(|(x, _)| x.len()).sum()
    }

    /// Places every tensor on the graph: trainable ones as parameters, the
    /// rest as constants.
    pub fn bind(&self, g: &mut Graph<S>) -> Bound {
        let vars =
            self.tensors.iter().zip(&self.trainable).map(|(t, tr)| if *tr { g.param(t.clone()) } else { g.constant(t.clone()) }).collect();
        Bound { vars }
    }

    /// Zero-filled tensors with the same shapes, for gradient accumulation.
    pub fn zeros_like(&self) -> Vec<Tensor<S>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    /// Adds `scale * grad` for every bound parameter into `acc`.
    pub fn accumulate(&self, bound: &Bound, grads: &Gradients<S>, scale: S, acc: &mut [Tensor<S>]) {
        for (i, v) in bound.vars.iter().enumerate() {
            if let Some(gt) = grads.get(*v) {
                acc[i].scaled_add_assign(scale, gt);
            }
        }
    }

    /// Replaces all values, checking names and shapes.
    pub fn load(&mut self, named: &[(String, Tensor<S>)]) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", self.tensors.len(), named.len())));
        }
        for (i, (name, t)) in named.iter().enumerate() {
            if name != &self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(Error::Format(format!(
                    "tensor {i}: expected `{}` {:?}, found `{name}` {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
        }
        for (i, (_, t)) in named.iter().enumerate() {
            self.tensors[i] = t.clone();
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            trainable: self.trainable.clone(),
        }
    }
}

/// Graph handles for every entry of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// He-style uniform initialization, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform<S: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let a = (6.0 / fan_in as f64).sqrt();
    let u = Uniform::new_inclusive(-a, a);
    Tensor::from_fn(shape, |_| S::lit(u.sample(rng)))
}

/// Fan-in uniform initialization for linear (non-ReLU) outputs, `U(-sqrt(3 / fan_in), ..)`.
pub fn lecun_uniform<S: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let a = (3.0 / fan_in as f64).sqrt();
    let u = Uniform::new_inclusive(-a, a);
    Tensor::from_fn(shape, |_| S::lit(u.sample(rng)))
}

pub fn normal<S: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<S> {
    let n = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| S::lit(n.sample(rng)))
}
