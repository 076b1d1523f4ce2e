//! Named parameter storage and the small layer descriptors built on it.
//!
//! Layers hold [`ParamId`]s, not tensors, so one model description drives a
//! store of any precision. [`ParamStore::bind`] records every tensor as a
//! tape leaf in id order.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }

    /// Moves leaf gradients from `tape` into the stored tensors, adding to any
    /// gradient already present.
    pub fn absorb_grads(&mut self, tape: &mut Tape<T>, bound: &Bound) {
        for (t, &v) in self.tensors.iter_mut().zip(bound.vars()) {
            if let Some(g) = tape.take_grad(v) {
                t.accumulate_grad(&g);
            }
        }
    }

    /// Builds a store with the same names from explicit tensors (same order).
    pub fn with_tensors(&self, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Invalid("tensor count differs from store".into()));
        }
        for (a, b) in tensors.iter().zip(&self.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Invalid(format!(
                    "shape {:?} differs from {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(ParamStore {
            names: self.names.clone(),
            tensors,
            by_name: self.by_name.clone(),
        })
    }
}

/// Tape handles for every parameter of a store, indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He normal, `std = sqrt(2 / fan_in)`, for layers followed by ReLU.
    He,
    /// Plain normal with the given standard deviation.
    Normal(f64),
    Zeros,
}

pub(crate) fn init_tensor<R: Rng>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor<f32> {
    let std = match init {
        Init::He => (2.0 / fan_in.max(1) as f64).sqrt(),
        Init::Normal(s) => s,
        Init::Zeros => return Tensor::zeros(shape.to_vec()),
    };
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng) as f32)
}

/// Convolution layer: weight C'×C×k×k plus bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore<f32>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.weight"),
            init_tensor(&[c_out, c_in, k, k], c_in * k * k, init, rng),
        )?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out]))?;
        Ok(Conv {
            w,
            b,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.w], p[self.b], self.stride, self.pad)
    }

    pub fn forward_relu<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.forward(tape, p, x)?;
        tape.relu(y)
    }
}

/// Fully connected layer: weight C'×C plus bias.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore<f32>,
        name: &str,
        c_in: usize,
        c_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.weight"), init_tensor(&[c_out, c_in], c_in, init, rng))?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out]))?;
        Ok(Linear { w, b })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.fully_connected(x, p[self.w], p[self.b])
    }
}

/// 2×2 stride-2 transposed convolution: weight C×C'×2×2 plus bias.
#[derive(Clone, Copy, Debug)]
pub struct Deconv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Deconv {
    pub fn new<R: Rng>(
        store: &mut ParamStore<f32>,
        name: &str,
        c_in: usize,
        c_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.weight"),
            init_tensor(&[c_in, c_out, 2, 2], c_in, init, rng),
        )?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out]))?;
        Ok(Deconv { w, b })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.deconv2d_2x2(x, p[self.w], p[self.b])
    }
}
