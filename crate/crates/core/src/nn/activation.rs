//! Elementwise nonlinearities.

use crate::error::Result;
use crate::nn::{DiffOp, Module, Param};
use crate::tensor::Tensor;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))`, evaluated as `max(x, 0) + log1p(exp(-|x|))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-x.abs()))
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Softplus,
    Silu,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => libm::tanh(x),
            Activation::Softplus => softplus(x),
            Activation::Silu => silu(x),
            Activation::Relu => relu(x),
        }
    }

    /// Derivative at `x` (ReLU uses 0 at the kink).
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = libm::tanh(x);
                1.0 - t * t
            }
            Activation::Softplus => sigmoid(x),
            Activation::Silu => silu_grad(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn apply_in_place(self, data: &mut [f64]) {
        for v in data {
            *v = self.apply(*v);
        }
    }

    /// `grad[i] *= f'(pre[i])`.
    pub fn backprop_in_place(self, pre: &[f64], grad: &mut [f64]) {
        for (g, &x) in grad.iter_mut().zip(pre) {
            *g *= self.derivative(x);
        }
    }
}

impl DiffOp for Activation {
    /// Pre-activation input.
    type Cache = Tensor;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((x.map(|v| self.apply(v)), x.clone()))
    }

    fn backward(&mut self, cache: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        cache.zip_map(grad_out, |x, g| g * self.derivative(x))
    }
}

impl Module for Activation {
    fn visit_params(&self, _: &str, _: &mut dyn FnMut(&str, &Param)) {}
    fn visit_params_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param)) {}
}
