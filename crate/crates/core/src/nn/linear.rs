//! Token-wise affine maps `y = x Wᵀ + b` over the last axis.

use alloc::vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, DiffOp, Module, Param};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[out_dim, in_dim]`
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: Param::new(Tensor::zeros(&[out_dim, in_dim])),
            bias: bias.then(|| Param::new(Tensor::zeros(&[out_dim]))),
        }
    }

    /// Uniform `±bound` weights, zero bias.
    pub fn uniform<R: Rng>(in_dim: usize, out_dim: usize, bias: bool, bound: f64, rng: &mut R) -> Self {
        let mut l = Self::zeros(in_dim, out_dim, bias);
        for w in l.weight.value.data_mut() {
            *w = rng.random_range(-bound..=bound);
        }
        l
    }

    /// Default init with bound `1/sqrt(in_dim)`.
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        Self::uniform(in_dim, out_dim, bias, 1.0 / libm::sqrt(in_dim as f64), rng)
    }

    fn tokens(&self, x: &Tensor) -> Result<usize> {
        match x.shape().last() {
            Some(&d) if d == self.in_dim => Ok(x.len() / d.max(1)),
            _ => Err(Error::mismatch("linear input", &[self.in_dim], x.shape())),
        }
    }
}

/// `out[t, o] = Σ_i x[t, i] w[o, i]` on raw row-major buffers.
pub(crate) fn matmul_t(x: &[f64], w: &[f64], tokens: usize, in_dim: usize, out_dim: usize) -> alloc::vec::Vec<f64> {
    let mut out = vec![0.0; tokens * out_dim];
    for (xr, yr) in x.chunks(in_dim).zip(out.chunks_mut(out_dim)).take(tokens) {
        for (y, wr) in yr.iter_mut().zip(w.chunks(in_dim)) {
            *y = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// Backward of [`matmul_t`]: accumulates `dw += dyᵀ x` and returns `dx = dy w`.
pub(crate) fn matmul_t_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    in_dim: usize,
    out_dim: usize,
) -> alloc::vec::Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for ((xr, dyr), dxr) in x.chunks(in_dim).zip(dy.chunks(out_dim)).zip(dx.chunks_mut(in_dim)) {
        for (o, &g) in dyr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            let dwr = &mut dw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                dwr[i] += g * xr[i];
                dxr[i] += g * wr[i];
            }
        }
    }
    dx
}

impl DiffOp for Linear {
    type Cache = Tensor;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let t = self.tokens(x)?;
        let mut y = matmul_t(x.data(), self.weight.value.data(), t, self.in_dim, self.out_dim);
        if let Some(b) = &self.bias {
            for row in y.chunks_mut(self.out_dim) {
                for (v, bb) in row.iter_mut().zip(b.value.data()) {
                    *v += bb;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = self.out_dim;
        Ok((Tensor::new(&shape, y)?, x.clone()))
    }

    fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let t = self.tokens(x)?;
        if grad_out.len() != t * self.out_dim {
            return Err(Error::mismatch("linear backward", &[t, self.out_dim], grad_out.shape()));
        }
        if let Some(b) = &mut self.bias {
            let db = b.grad.data_mut();
            for row in grad_out.data().chunks(self.out_dim) {
                for (d, g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
        }
        let dx = matmul_t_backward(
            x.data(),
            self.weight.value.data(),
            grad_out.data(),
            self.weight.grad.data_mut(),
            self.in_dim,
            self.out_dim,
        );
        Tensor::new(x.shape(), dx)
    }
}

impl Module for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}
