//! Layer, group and instance normalization.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{join, DiffOp, Module, Param};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Normalized values and inverse standard deviations for a set of
/// equally sized groups laid out contiguously.
fn normalize_groups(x: &[f64], group_len: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / group_len.max(1));
    for (src, dst) in x.chunks(group_len).zip(xhat.chunks_mut(group_len)) {
        let n = src.len() as f64;
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let denom = libm::sqrt(var + eps);
        // zero variance with eps = 0 leaves the centred values (all zero)
        let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * inv;
        }
        inv_std.push(inv);
    }
    (xhat, inv_std)
}

/// Backward of `normalize_groups` given the gradient w.r.t. the normalized values.
fn normalize_groups_backward(
    xhat: &[f64],
    inv_std: &[f64],
    dxhat: &[f64],
    group_len: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; xhat.len()];
    for (((xh, dxh), out), &inv) in xhat
        .chunks(group_len)
        .zip(dxhat.chunks(group_len))
        .zip(dx.chunks_mut(group_len))
        .zip(inv_std)
    {
        let n = xh.len() as f64;
        let mean_d = dxh.iter().sum::<f64>() / n;
        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((o, &d), &h) in out.iter_mut().zip(dxh).zip(xh) {
            *o = inv * (d - mean_d - h * mean_dx);
        }
    }
    dx
}

/// Stateless layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor> {
    let n = *x.shape().last().ok_or(Error::InvalidShape("scalar input to layer_norm".into()))?;
    if n == 0 {
        return Err(Error::InvalidShape("layer_norm over an empty axis".into()));
    }
    if gamma.len() != n || beta.len() != n {
        return Err(Error::mismatch("layer_norm affine", &[n], &[gamma.len()]));
    }
    let (mut y, _) = normalize_groups(x.data(), n, eps);
    for row in y.chunks_mut(n) {
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = *v * g + b;
        }
    }
    Tensor::new(x.shape(), y)
}

/// Layer normalization over the last axis with learned affine parameters.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

pub struct LayerNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[dim], 1.0)),
            beta: Param::new(Tensor::zeros(&[dim])),
            eps: DEFAULT_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

impl DiffOp for LayerNorm {
    type Cache = LayerNormCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        let n = *x.shape().last().ok_or(Error::InvalidShape("scalar input to layer_norm".into()))?;
        if n == 0 {
            return Err(Error::InvalidShape("layer_norm over an empty axis".into()));
        }
        if n != self.dim() {
            return Err(Error::mismatch("layer_norm", &[self.dim()], &[n]));
        }
        let (xhat, inv_std) = normalize_groups(x.data(), n, self.eps);
        let g = self.gamma.value.data();
        let b = self.beta.value.data();
        let mut y = xhat.clone();
        for row in y.chunks_mut(n) {
            for ((v, g), b) in row.iter_mut().zip(g).zip(b) {
                *v = *v * g + b;
            }
        }
        Ok((Tensor::new(x.shape(), y)?, LayerNormCache { xhat, inv_std }))
    }

    fn backward(&mut self, cache: &LayerNormCache, grad_out: &Tensor) -> Result<Tensor> {
        let n = self.dim();
        if grad_out.len() != cache.xhat.len() {
            return Err(Error::mismatch("layer_norm backward", &[cache.xhat.len()], &[grad_out.len()]));
        }
        let gamma = self.gamma.value.data().to_vec();
        let mut dxhat = grad_out.data().to_vec();
        {
            let dg = self.gamma.grad.data_mut();
            for (row, xh) in grad_out.data().chunks(n).zip(cache.xhat.chunks(n)) {
                for ((d, &g), &h) in dg.iter_mut().zip(row).zip(xh) {
                    *d += g * h;
                }
            }
            let db = self.beta.grad.data_mut();
            for row in grad_out.data().chunks(n) {
                for (d, &g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
        }
        for row in dxhat.chunks_mut(n) {
            for (d, g) in row.iter_mut().zip(&gamma) {
                *d *= g;
            }
        }
        let dx = normalize_groups_backward(&cache.xhat, &cache.inv_std, &dxhat, n);
        Tensor::new(grad_out.shape(), dx)
    }
}

impl Module for LayerNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Group normalization over a channel-first tensor `[C, spatial..]`.
///
/// With `groups == C` and no affine this is instance normalization.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub affine: Option<(Param, Param)>,
    pub eps: f64,
}

pub struct GroupNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize, affine: bool) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "{channels} channels cannot be split into {groups} groups"
            )));
        }
        let affine = affine.then(|| {
            (
                Param::new(Tensor::full(&[channels], 1.0)),
                Param::new(Tensor::zeros(&[channels])),
            )
        });
        Ok(Self {
            channels,
            groups,
            affine,
            eps: DEFAULT_EPS,
        })
    }

    pub fn instance(channels: usize) -> Self {
        Self {
            channels,
            groups: channels,
            affine: None,
            eps: DEFAULT_EPS,
        }
    }

    fn spatial(&self, x: &Tensor) -> Result<usize> {
        if x.rank() < 2 || x.dim(0) != self.channels {
            return Err(Error::InvalidShape(format!(
                "group norm over {} channels got shape {:?}",
                self.channels,
                x.shape()
            )));
        }
        Ok(x.len() / self.channels)
    }
}

impl DiffOp for GroupNorm {
    type Cache = GroupNormCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, GroupNormCache)> {
        let s = self.spatial(x)?;
        let group_len = s * self.channels / self.groups;
        let (xhat, inv_std) = normalize_groups(x.data(), group_len, self.eps);
        let mut y = xhat.clone();
        if let Some((g, b)) = &self.affine {
            for (c, chunk) in y.chunks_mut(s).enumerate() {
                let (gc, bc) = (g.value.data()[c], b.value.data()[c]);
                chunk.iter_mut().for_each(|v| *v = *v * gc + bc);
            }
        }
        Ok((Tensor::new(x.shape(), y)?, GroupNormCache { xhat, inv_std }))
    }

    fn backward(&mut self, cache: &GroupNormCache, grad_out: &Tensor) -> Result<Tensor> {
        let s = self.spatial(grad_out)?;
        let group_len = s * self.channels / self.groups;
        let mut dxhat = grad_out.data().to_vec();
        if let Some((g, b)) = &mut self.affine {
            for (c, (gchunk, xchunk)) in grad_out
                .data()
                .chunks(s)
                .zip(cache.xhat.chunks(s))
                .enumerate()
            {
                g.grad.data_mut()[c] += gchunk.iter().zip(xchunk).map(|(a, b)| a * b).sum::<f64>();
                b.grad.data_mut()[c] += gchunk.iter().sum::<f64>();
            }
            for (c, chunk) in dxhat.chunks_mut(s).enumerate() {
                let gc = g.value.data()[c];
                chunk.iter_mut().for_each(|v| *v *= gc);
            }
        }
        let dx = normalize_groups_backward(&cache.xhat, &cache.inv_std, &dxhat, group_len);
        Tensor::new(grad_out.shape(), dx)
    }
}

impl Module for GroupNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        if let Some((g, b)) = &self.affine {
            f(&join(prefix, "gamma"), g);
            f(&join(prefix, "beta"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some((g, b)) = &mut self.affine {
            f(&join(prefix, "gamma"), g);
            f(&join(prefix, "beta"), b);
        }
    }
}
