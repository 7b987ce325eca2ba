//! Differentiable building blocks.
//!
//! Every operation follows the same contract: `forward` returns the output
//! together with a cache of whatever the backward pass needs, and `backward`
//! consumes that cache plus the upstream gradient, accumulates parameter
//! gradients into the owning [`Param`]s, and returns the input gradient.
//! Composite layers call their children's backward passes in reverse
//! evaluation order; there is no general graph engine.

use alloc::format;
use alloc::string::String;

use crate::error::Result;
use crate::tensor::Tensor;

pub mod activation;
pub mod conv;
pub mod linear;
pub mod norm;

pub use activation::{relu, sigmoid, silu, silu_grad, softplus, Activation};
pub use conv::{Conv, ConvTranspose};
pub use linear::Linear;
pub use norm::{layer_norm, GroupNorm, LayerNorm};

/// A trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// A differentiable single-input operation.
pub trait DiffOp {
    type Cache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Self::Cache)>;

    /// Vector-Jacobian product. Parameter gradients are *added* to the
    /// owned [`Param::grad`] buffers.
    fn backward(&mut self, cache: &Self::Cache, grad_out: &Tensor) -> Result<Tensor>;
}

/// Anything owning named parameters.
pub trait Module {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

impl<M: Module> Module for alloc::vec::Vec<M> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, m) in self.iter().enumerate() {
            m.visit_params(&join(prefix, &format!("{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_params_mut(&join(prefix, &format!("{i}")), f);
        }
    }
}

/// Sequential composition of same-typed operations.
#[derive(Clone, Debug)]
pub struct Chain<T>(pub alloc::vec::Vec<T>);

impl<T: DiffOp> DiffOp for Chain<T> {
    type Cache = alloc::vec::Vec<T::Cache>;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Self::Cache)> {
        let mut caches = alloc::vec::Vec::with_capacity(self.0.len());
        let mut h = x.clone();
        for op in &self.0 {
            let (y, c) = op.forward(&h)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    fn backward(&mut self, caches: &Self::Cache, grad_out: &Tensor) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for (op, c) in self.0.iter_mut().zip(caches).rev() {
            g = op.backward(c, &g)?;
        }
        Ok(g)
    }
}

impl<T: Module> Module for Chain<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.0.visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.0.visit_params_mut(prefix, f);
    }
}
