//! Grid containers shared by the physics, geometry and model code.
//!
//! Axis conventions: a [`Volume3D`] is `(H, W, D)` in row-major order, where
//! `H` is the vertical axis (panoramic image rows) and `(W, D)` span the
//! axial plane, with `W` carrying the trough `x` coordinate and `D` the
//! trough `y` coordinate.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    extents: [usize; 3],
    data: Vec<f64>,
}

impl Volume3D {
    pub fn new(extents: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if extents.iter().product::<usize>() != data.len() {
            return Err(Error::mismatch("volume data", &extents, &[data.len()]));
        }
        Ok(Self { extents, data })
    }

    pub fn zeros(extents: [usize; 3]) -> Self {
        Self::filled(extents, 0.0)
    }

    pub fn filled(extents: [usize; 3], value: f64) -> Self {
        Self {
            extents,
            data: vec![value; extents.iter().product()],
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
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

    #[inline]
    pub fn index(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.extents[1] + w) * self.extents[2] + d
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, d: usize) -> f64 {
        self.data[self.index(h, w, d)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, d: usize, v: f64) {
        let i = self.index(h, w, d);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            extents: self.extents,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Single-channel tensor `[1, H, W, D]`.
    pub fn to_tensor(&self) -> Tensor {
        let [h, w, d] = self.extents;
        Tensor::new(&[1, h, w, d], self.data.clone()).expect("extents match data")
    }

    /// Accepts `[H, W, D]` or `[1, H, W, D]`.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let extents = match t.shape() {
            [h, w, d] | [1, h, w, d] => [*h, *w, *d],
            s => return Err(Error::InvalidShape(alloc::format!("not a volume: {s:?}"))),
        };
        Self::new(extents, t.into_data())
    }
}

/// A 2D grid `(rows, cols)`; used for panoramic images and projections.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Image2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::mismatch("image data", &[rows, cols], &[data.len()]));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Single-channel tensor `[1, rows, cols]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.rows, self.cols], self.data.clone()).expect("extents match data")
    }
}

/// Depth-binned field `F[k, j, i]` with `K` bins over an `H × W` image.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthField {
    bins: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DepthField {
    pub fn new(bins: usize, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if bins * rows * cols != data.len() {
            return Err(Error::mismatch("depth field data", &[bins, rows, cols], &[data.len()]));
        }
        Ok(Self { bins, rows, cols, data })
    }

    pub fn zeros(bins: usize, rows: usize, cols: usize) -> Self {
        Self {
            bins,
            rows,
            cols,
            data: vec![0.0; bins * rows * cols],
        }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, k: usize, j: usize, i: usize) -> usize {
        (k * self.rows + j) * self.cols + i
    }

    #[inline]
    pub fn get(&self, k: usize, j: usize, i: usize) -> f64 {
        self.data[self.index(k, j, i)]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.bins, self.rows, self.cols], self.data.clone()).expect("extents match data")
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        match t.shape() {
            &[k, h, w] => Self::new(k, h, w, t.into_data()),
            s => Err(Error::InvalidShape(alloc::format!("not a depth field: {s:?}"))),
        }
    }
}
