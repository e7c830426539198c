//! Parameterized layers on top of the tape.
//!
//! A layer only knows its parameter names and shapes. `init` writes fresh
//! values into a [`ParamStore`]; `forward` looks the bound variables up by name.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::Result;

fn normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::lit(d.sample(rng)))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self { name: name.into(), din, dout }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        store.insert(format!("{}.w", self.name), normal(rng, &[self.din, self.dout], (1.0 / self.din as f64).sqrt()));
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.dout]));
    }

    /// `x: N x din -> N x dout`.
    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let y = t.matmul(x, b.get(&format!("{}.w", self.name)))?;
        t.add(y, b.get(&format!("{}.b", self.name)))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self { name: name.into(), cin, cout, k, stride, pad }
    }

    /// Same-size 3x3 convolution.
    pub fn same3(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, 3, 1, 1)
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let fan_in = (self.cin * self.k * self.k) as f64;
        store.insert(format!("{}.w", self.name), normal(rng, &[self.cout, self.cin, self.k, self.k], (2.0 / fan_in).sqrt()));
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.cout]));
    }

    pub fn init_zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert(format!("{}.w", self.name), Tensor::zeros(&[self.cout, self.cin, self.k, self.k]));
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.cout]));
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let w = b.get(&format!("{}.w", self.name));
        let bias = b.get(&format!("{}.b", self.name));
        t.conv2d(x, w, Some(bias), self.stride, self.pad)
    }
}

/// Transposed convolution with kernel = stride (exact `stride`x upsampling).
#[derive(Clone, Debug)]
pub struct Upsample {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub factor: usize,
}

impl Upsample {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, factor: usize) -> Self {
        Self { name: name.into(), cin, cout, factor }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let fan_in = self.cin as f64;
        store.insert(format!("{}.w", self.name), normal(rng, &[self.cin, self.cout, self.factor, self.factor], (2.0 / fan_in).sqrt()));
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.cout]));
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let w = b.get(&format!("{}.w", self.name));
        let bias = b.get(&format!("{}.b", self.name));
        t.conv_transpose2d(x, w, Some(bias), self.factor)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert(format!("{}.g", self.name), Tensor::ones(&[self.dim]));
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.dim]));
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        t.layer_norm(x, b.get(&format!("{}.g", self.name)), b.get(&format!("{}.b", self.name)), 1e-5)
    }
}

/// Two linear layers with a SiLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(name: &str, dim: usize, hidden: usize) -> Self {
        Self { fc1: Linear::new(format!("{name}.fc1"), dim, hidden), fc2: Linear::new(format!("{name}.fc2"), hidden, dim) }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(t, b, x)?;
        let h = t.silu(h)?;
        self.fc2.forward(t, b, h)
    }
}
