//! Kolmogorov–Arnold layers: every edge carries its own B-spline plus a
//! SiLU pass-through, and each output sums its incoming edges.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, silu, silu_grad, DiffOp, Module, Param};
use crate::tensor::Tensor;

/// Highest spline degree supported by the fixed-size span buffers.
pub const MAX_ORDER: usize = 7;

/// Uniform knot vector over `[min, max]`, extended by `order` knots on
/// each side so that every interior point sees `order + 1` basis functions.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineGrid {
    pub min: f64,
    pub max: f64,
    pub size: usize,
    pub order: usize,
    knots: Vec<f64>,
}

impl Default for SplineGrid {
    fn default() -> Self {
        Self::new(-3.0, 3.0, 5, 3).expect("valid default grid")
    }
}

impl SplineGrid {
    pub fn new(min: f64, max: f64, size: usize, order: usize) -> Result<Self> {
        if !(max > min) || size == 0 {
            return Err(Error::InvalidArgument(format!(
                "spline grid needs max > min and at least one interval, got [{min}, {max}] / {size}"
            )));
        }
        if order > MAX_ORDER {
            return Err(Error::InvalidArgument(format!("spline order {order} exceeds {MAX_ORDER}")));
        }
        let h = (max - min) / size as f64;
        let knots = (0..=size + 2 * order)
            .map(|m| min + (m as f64 - order as f64) * h)
            .collect();
        Ok(Self { min, max, size, order, knots })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn n_basis(&self) -> usize {
        self.size + self.order
    }

    /// Nonzero basis values and derivatives at `x` (after clamping):
    /// returns the index of the first nonzero basis function.
    #[inline]
    pub fn eval_span(&self, x: f64, vals: &mut [f64], ders: &mut [f64]) -> usize {
        span_eval(x, &self.knots, self.order, vals, ders)
    }

    pub fn basis(&self, x: f64) -> Vec<f64> {
        bspline_basis(x, &self.knots, self.order).expect("grid knots are valid")
    }
}

fn check_knots(knots: &[f64], order: usize) -> Result<()> {
    if order > MAX_ORDER {
        return Err(Error::InvalidArgument(format!("spline order {order} exceeds {MAX_ORDER}")));
    }
    if knots.len() < 2 * order + 2 {
        return Err(Error::InvalidArgument(format!(
            "{} knots cannot carry a degree-{order} spline",
            knots.len()
        )));
    }
    if knots.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("knot vector must be strictly increasing".into()));
    }
    Ok(())
}

/// Index `m` with `t[m] ≤ x < t[m + 1]` inside the valid range, `x` clamped.
fn find_span(x: f64, knots: &[f64], order: usize) -> (usize, f64) {
    let n_basis = knots.len() - order - 1;
    let (lo, hi) = (knots[order], knots[n_basis]);
    let x = if x.is_nan() { lo } else { x.clamp(lo, hi) };
    let mut span = order;
    while span + 1 < n_basis && x >= knots[span + 1] {
        span += 1;
    }
    (span, x)
}

/// Basis values of degree `p` on `span` (indices `span − p ..= span`).
fn span_values(x: f64, knots: &[f64], span: usize, p: usize, out: &mut [f64]) {
    let mut left = [0.0; MAX_ORDER + 1];
    let mut right = [0.0; MAX_ORDER + 1];
    out[0] = 1.0;
    for j in 1..=p {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let tmp = out[r] / (right[r + 1] + left[j - r]);
            out[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        out[j] = saved;
    }
}

fn span_eval(x: f64, knots: &[f64], p: usize, vals: &mut [f64], ders: &mut [f64]) -> usize {
    let n_basis = knots.len() - p - 1;
    let (lo, hi) = (knots[p], knots[n_basis]);
    let inside = x >= lo && x <= hi;
    let (span, xc) = find_span(x, knots, p);
    span_values(xc, knots, span, p, vals);
    if p == 0 || !inside {
        ders[..=p].iter_mut().for_each(|d| *d = 0.0);
    } else {
        let mut low = [0.0; MAX_ORDER + 1];
        span_values(xc, knots, span, p - 1, &mut low);
        let pf = p as f64;
        for r in 0..=p {
            let i = span - p + r;
            let a = if r >= 1 { low[r - 1] / (knots[i + p] - knots[i]) } else { 0.0 };
            let b = if r < p { low[r] / (knots[i + p + 1] - knots[i + 1]) } else { 0.0 };
            ders[r] = pf * (a - b);
        }
    }
    span - p
}

/// All `knots.len() − order − 1` B-spline basis values at `x` by the
/// Cox–de Boor recursion, with `x` clamped to the interior range.
pub fn bspline_basis(x: f64, knots: &[f64], order: usize) -> Result<Vec<f64>> {
    check_knots(knots, order)?;
    let mut vals = [0.0; MAX_ORDER + 1];
    let mut ders = [0.0; MAX_ORDER + 1];
    let first = span_eval(x, knots, order, &mut vals, &mut ders);
    let mut out = vec![0.0; knots.len() - order - 1];
    out[first..=first + order].copy_from_slice(&vals[..=order]);
    Ok(out)
}

/// Derivatives of all basis functions at `x`; zero where `x` is clamped.
pub fn bspline_basis_derivative(x: f64, knots: &[f64], order: usize) -> Result<Vec<f64>> {
    check_knots(knots, order)?;
    let mut vals = [0.0; MAX_ORDER + 1];
    let mut ders = [0.0; MAX_ORDER + 1];
    let first = span_eval(x, knots, order, &mut vals, &mut ders);
    let mut out = vec![0.0; knots.len() - order - 1];
    out[first..=first + order].copy_from_slice(&ders[..=order]);
    Ok(out)
}

/// `y_j = Σ_i (Σ_b c[j,i,b] B_b(x_i) + w[j,i] SiLU(x_i)) + bias_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct KanLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub grid: SplineGrid,
    /// `[out, in, n_basis]`.
    pub coeff: Param,
    /// `[out, in]`.
    pub base: Param,
    /// `[out]`.
    pub bias: Param,
}

impl KanLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, grid: SplineGrid) -> Self {
        let nb = grid.n_basis();
        Self {
            in_dim,
            out_dim,
            grid,
            coeff: Param::new(Tensor::zeros(&[out_dim, in_dim, nb])),
            base: Param::new(Tensor::zeros(&[out_dim, in_dim])),
            bias: Param::new(Tensor::zeros(&[out_dim])),
        }
    }

    /// Spline coefficients uniform in `±0.1/√in`, base weights `1/√in`, zero bias.
    pub fn new(in_dim: usize, out_dim: usize, grid: SplineGrid, rng: &mut impl Rng) -> Self {
        let mut layer = Self::zeros(in_dim, out_dim, grid);
        let s = 1.0 / libm::sqrt(in_dim.max(1) as f64);
        layer
            .coeff
            .value
            .data_mut()
            .iter_mut()
            .for_each(|c| *c = rng.random_range(-0.1 * s..=0.1 * s));
        layer.base.value.fill(s);
        layer
    }

    fn tokens(&self, x: &Tensor) -> Result<usize> {
        match x.shape() {
            [t, d] if *d == self.in_dim => Ok(*t),
            [d] if *d == self.in_dim => Ok(1),
            s => Err(Error::mismatch("kan layer input", &[0, self.in_dim], s)),
        }
    }
}

/// Single-sample forward pass.
pub fn kan_layer_forward(x: &[f64], layer: &KanLayer) -> Result<Vec<f64>> {
    let t = Tensor::new(&[1, x.len()], x.to_vec())?;
    Ok(layer.forward(&t)?.0.into_data())
}

impl DiffOp for KanLayer {
    type Cache = Tensor;

    /// `[T, in] → [T, out]` (a bare `[in]` vector counts as one token).
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let tokens = self.tokens(x)?;
        let (din, dout, nb, p) = (self.in_dim, self.out_dim, self.grid.n_basis(), self.grid.order);
        let coeff = self.coeff.value.data();
        let base = self.base.value.data();
        let mut y = Tensor::zeros(&[tokens, dout]);
        let mut vals = [0.0; MAX_ORDER + 1];
        let mut ders = [0.0; MAX_ORDER + 1];
        for (xt, yt) in x.data().chunks_exact(din).zip(y.data_mut().chunks_exact_mut(dout)) {
            yt.copy_from_slice(self.bias.value.data());
            for (i, &xi) in xt.iter().enumerate() {
                let first = self.grid.eval_span(xi, &mut vals, &mut ders);
                let s = silu(xi);
                for (j, yj) in yt.iter_mut().enumerate() {
                    let c = &coeff[(j * din + i) * nb + first..][..=p];
                    let mut acc = base[j * din + i] * s;
                    for r in 0..=p {
                        acc += c[r] * vals[r];
                    }
                    *yj += acc;
                }
            }
        }
        Ok((y, x.clone()))
    }

    fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let tokens = self.tokens(x)?;
        let (din, dout, nb, p) = (self.in_dim, self.out_dim, self.grid.n_basis(), self.grid.order);
        dy.ensure_shape(&[tokens, dout], "kan layer gradient")
            .or_else(|_| dy.ensure_shape(&[dout], "kan layer gradient"))?;
        let mut dx = Tensor::zeros(x.shape());
        let coeff = self.coeff.value.data();
        let base = self.base.value.data();
        let dcoeff = self.coeff.grad.data_mut();
        let dbase = self.base.grad.data_mut();
        let dbias = self.bias.grad.data_mut();
        let mut vals = [0.0; MAX_ORDER + 1];
        let mut ders = [0.0; MAX_ORDER + 1];
        for ((xt, dyt), dxt) in x
            .data()
            .chunks_exact(din)
            .zip(dy.data().chunks_exact(dout))
            .zip(dx.data_mut().chunks_exact_mut(din))
        {
            for (j, &g) in dyt.iter().enumerate() {
                dbias[j] += g;
            }
            for (i, &xi) in xt.iter().enumerate() {
                let first = self.grid.eval_span(xi, &mut vals, &mut ders);
                let (s, ds) = (silu(xi), silu_grad(xi));
                let mut acc = 0.0;
                for (j, &g) in dyt.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let e = j * din + i;
                    let off = e * nb + first;
                    let mut slope = base[e] * ds;
                    for r in 0..=p {
                        dcoeff[off + r] += g * vals[r];
                        slope += coeff[off + r] * ders[r];
                    }
                    dbase[e] += g * s;
                    acc += g * slope;
                }
                dxt[i] = acc;
            }
        }
        Ok(dx)
    }
}

impl Module for KanLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "coeff"), &self.coeff);
        f(&join(prefix, "base"), &self.base);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "coeff"), &mut self.coeff);
        f(&join(prefix, "base"), &mut self.base);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Composition of KAN layers.
#[derive(Clone, Debug, PartialEq)]
pub struct KanStack {
    pub layers: Vec<KanLayer>,
}

impl KanStack {
    pub fn from_layers(layers: Vec<KanLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("kan stack"));
        }
        for w in layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::mismatch("kan stack layers", &[w[0].out_dim], &[w[1].in_dim]));
            }
        }
        Ok(Self { layers })
    }

    /// Layers mapping `dims[0] → dims[1] → …`.
    pub fn new(dims: &[usize], grid: &SplineGrid, rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument("kan stack needs at least two widths".into()));
        }
        Self::from_layers(
            dims.windows(2)
                .map(|w| KanLayer::new(w[0], w[1], grid.clone(), rng))
                .collect(),
        )
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }
}

/// Forward through every layer in order.
pub fn kan_stack(x: &Tensor, stack: &KanStack) -> Result<Tensor> {
    Ok(stack.forward(x)?.0)
}

impl DiffOp for KanStack {
    type Cache = Vec<Tensor>;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (y, c) = layer.forward(&h)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    fn backward(&mut self, caches: &Vec<Tensor>, dy: &Tensor) -> Result<Tensor> {
        let mut g = dy.clone();
        for (layer, c) in self.layers.iter_mut().zip(caches).rev() {
            g = layer.backward(c, &g)?;
        }
        Ok(g)
    }
}

impl Module for KanStack {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.layers.visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.layers.visit_params_mut(prefix, f);
    }
}
