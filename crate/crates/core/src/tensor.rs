//! Dense row-major tensors of `f64`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape(alloc::format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of `axis`; panics when the axis does not exist.
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::InvalidShape(alloc::format!(
                "cannot reshape {:?} into {:?}",
                self.shape,
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn ensure_shape(&self, expected: &[usize], context: &'static str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::mismatch(context, expected, &self.shape));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Tensor, context: &'static str) -> Result<()> {
        other.ensure_shape(&self.shape, context)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Splits the leading axis off: `[n, rest..]` viewed as `n` contiguous chunks.
    pub fn leading_chunks(&self) -> core::slice::Chunks<'_, f64> {
        let n = self.shape.first().copied().unwrap_or(1).max(1);
        self.data.chunks((self.data.len() / n).max(1))
    }

    /// Concatenates tensors along axis 0. Trailing extents must agree.
    pub fn concat0(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("concat0"))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() != first.rank() || &p.shape[1..] != tail {
                return Err(Error::mismatch("concat0", &first.shape, &p.shape));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Tensor::new(&shape, data)
    }

    /// Inverse of [`Tensor::concat0`]: splits along axis 0 into the given leading extents.
    pub fn split0(&self, sizes: &[usize]) -> Result<alloc::vec::Vec<Tensor>> {
        if sizes.iter().sum::<usize>() != self.shape[0] {
            return Err(Error::InvalidShape(alloc::format!(
                "cannot split leading extent {} into {:?}",
                self.shape[0],
                sizes
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for &s in sizes {
            let mut shape = self.shape.clone();
            shape[0] = s;
            out.push(Tensor::new(
                &shape,
                self.data[offset * inner..(offset + s) * inner].to_vec(),
            )?);
            offset += s;
        }
        Ok(out)
    }
}
