//! Koopman token block: a diagonal, strictly contractive complex spectrum
//! nudged by a bounded content-dependent gate, realized with real arithmetic.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt::Write;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::norm::LayerNormCache;
use crate::nn::{join, sigmoid, softplus, DiffOp, LayerNorm, Module, Param};
use crate::tensor::Tensor;

pub const DEFAULT_RHO: f64 = 0.1;
pub const NU_INIT: f64 = 0.5;

/// `m = log(1 + |φ|)`, elementwise.
pub fn damped_magnitude(phi: &[f64]) -> Vec<f64> {
    phi.iter().map(|p| libm::log1p(p.abs())).collect()
}

#[derive(Clone, Debug)]
pub struct KoopmanBlock {
    pub dim: usize,
    /// Gate amplitude in `(0, 1)`; held fixed during training.
    pub rho: f64,
    /// Number of times the block is applied per call.
    pub steps: usize,
    pub nu: Param,
    pub theta: Param,
    pub a_r: Param,
    pub b_r: Param,
    pub a_i: Param,
    pub b_i: Param,
    /// `[D, 2D]` projection of `[u; v]`.
    pub w: Param,
    pub norm: LayerNorm,
}

/// Per-channel eigenvalue in polar and Cartesian form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eigenvalue {
    pub modulus: f64,
    pub phase: f64,
    pub re: f64,
    pub im: f64,
}

impl KoopmanBlock {
    /// All weights zero except `ν = 0.5`, unit layer-norm gain.
    pub fn zeros(dim: usize, rho: f64) -> Result<Self> {
        if !(rho >= 0.0 && rho < 1.0) {
            return Err(Error::InvalidArgument(format!("gate amplitude must lie in [0, 1), got {rho}")));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("koopman width must be positive".into()));
        }
        Ok(Self {
            dim,
            rho,
            steps: 1,
            nu: Param::new(Tensor::full(&[dim], NU_INIT)),
            theta: Param::new(Tensor::zeros(&[dim])),
            a_r: Param::new(Tensor::zeros(&[dim, dim])),
            b_r: Param::new(Tensor::zeros(&[dim])),
            a_i: Param::new(Tensor::zeros(&[dim, dim])),
            b_i: Param::new(Tensor::zeros(&[dim])),
            w: Param::new(Tensor::zeros(&[dim, 2 * dim])),
            norm: LayerNorm::new(dim),
        })
    }

    /// Phases uniform in `±π/8`, projection uniform in `±0.1/√(2D)`, gate
    /// weights zero so the gate starts at exactly `1 + 0i`.
    pub fn new(dim: usize, rho: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut b = Self::zeros(dim, rho)?;
        for t in b.theta.value.data_mut() {
            *t = rng.random_range(-PI / 8.0..=PI / 8.0);
        }
        let bound = 0.1 / libm::sqrt((2 * dim) as f64);
        for w in b.w.value.data_mut() {
            *w = rng.random_range(-bound..=bound);
        }
        Ok(b)
    }

    pub fn spectrum(&self) -> Vec<Eigenvalue> {
        self.nu
            .value
            .data()
            .iter()
            .zip(self.theta.value.data())
            .map(|(&nu, &th)| {
                let modulus = libm::exp(-softplus(nu));
                Eigenvalue {
                    modulus,
                    phase: th,
                    re: modulus * libm::cos(th),
                    im: modulus * libm::sin(th),
                }
            })
            .collect()
    }

    /// CSV with header `channel,abs_lambda,theta`.
    pub fn spectrum_csv(&self) -> String {
        let mut s = String::from("channel,abs_lambda,theta\n");
        for (d, e) in self.spectrum().iter().enumerate() {
            let _ = writeln!(s, "{d},{},{}", e.modulus, e.phase);
        }
        s
    }

    fn tokens(&self, x: &Tensor) -> Result<usize> {
        match x.shape() {
            [t, d] if *d == self.dim => Ok(*t),
            [d] if *d == self.dim => Ok(1),
            s => Err(Error::mismatch("koopman input", &[0, self.dim], s)),
        }
    }
}

/// Complex multiplier `α = λ·g` for a damped magnitude vector `m`.
pub fn multiplier(block: &KoopmanBlock, m: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if m.len() != block.dim {
        return Err(Error::mismatch("koopman multiplier", &[block.dim], &[m.len()]));
    }
    let spec = block.spectrum();
    let mut st = StepTrace::default();
    gate(block, m, &mut st);
    Ok(spec
        .iter()
        .enumerate()
        .map(|(d, e)| {
            let (gr, gi) = (1.0 + block.rho * st.tr[d], block.rho * st.ti[d]);
            (e.re * gr - e.im * gi, e.re * gi + e.im * gr)
        })
        .unzip())
}

/// Per-token intermediate values.
#[derive(Clone, Debug, Default)]
struct StepTrace {
    tr: Vec<f64>,
    ti: Vec<f64>,
}

fn gate(block: &KoopmanBlock, m: &[f64], st: &mut StepTrace) {
    let d = block.dim;
    let (ar, ai) = (block.a_r.value.data(), block.a_i.value.data());
    let (br, bi) = (block.b_r.value.data(), block.b_i.value.data());
    st.tr.clear();
    st.ti.clear();
    for o in 0..d {
        let (rr, ri) = (&ar[o * d..(o + 1) * d], &ai[o * d..(o + 1) * d]);
        let sr: f64 = rr.iter().zip(m).map(|(a, b)| a * b).sum::<f64>() + br[o];
        let si: f64 = ri.iter().zip(m).map(|(a, b)| a * b).sum::<f64>() + bi[o];
        st.tr.push(libm::tanh(sr));
        st.ti.push(libm::tanh(si));
    }
}

pub struct KoopmanStepCache {
    phi: Tensor,
    /// `tanh` of the gate pre-activations, `[T, D]` each.
    tr: Vec<f64>,
    ti: Vec<f64>,
    /// `[T, 2D]` rows `[u; v]`.
    uv: Vec<f64>,
    norm: LayerNormCache,
}

impl KoopmanBlock {
    fn step_forward(&self, phi: &Tensor) -> Result<(Tensor, KoopmanStepCache)> {
        let tokens = self.tokens(phi)?;
        let d = self.dim;
        let spec = self.spectrum();
        let w = self.w.value.data();
        let mut st = StepTrace::default();
        let mut tr = Vec::with_capacity(tokens * d);
        let mut ti = Vec::with_capacity(tokens * d);
        let mut uv = vec![0.0; tokens * 2 * d];
        let mut z = phi.data().to_vec();
        let mut m = vec![0.0; d];
        for t in 0..tokens {
            let p = &phi.data()[t * d..(t + 1) * d];
            for (mi, &pi) in m.iter_mut().zip(p) {
                *mi = libm::log1p(pi.abs());
            }
            gate(self, &m, &mut st);
            let row = &mut uv[t * 2 * d..(t + 1) * 2 * d];
            for c in 0..d {
                let (gr, gi) = (1.0 + self.rho * st.tr[c], self.rho * st.ti[c]);
                let e = &spec[c];
                row[c] = (e.re * gr - e.im * gi) * p[c];
                row[d + c] = (e.re * gi + e.im * gr) * p[c];
            }
            let zt = &mut z[t * d..(t + 1) * d];
            for (o, zo) in zt.iter_mut().enumerate() {
                *zo += w[o * 2 * d..(o + 1) * 2 * d].iter().zip(row.iter()).map(|(a, b)| a * b).sum::<f64>();
            }
            tr.extend_from_slice(&st.tr);
            ti.extend_from_slice(&st.ti);
        }
        let (y, norm) = self.norm.forward(&Tensor::new(phi.shape(), z)?)?;
        Ok((y, KoopmanStepCache { phi: phi.clone(), tr, ti, uv, norm }))
    }

    fn step_backward(&mut self, c: &KoopmanStepCache, dy: &Tensor) -> Result<Tensor> {
        let d = self.dim;
        let tokens = self.tokens(&c.phi)?;
        let dz = self.norm.backward(&c.norm, dy)?;
        let spec = self.spectrum();
        let rho = self.rho;
        let mut dphi = dz.data().to_vec();
        let mut dlam_r = vec![0.0; d];
        let mut dlam_i = vec![0.0; d];
        let mut duv = vec![0.0; 2 * d];
        let mut ds_r = vec![0.0; d];
        let mut ds_i = vec![0.0; d];
        let w = self.w.value.data().to_vec();
        let (ar, ai) = (self.a_r.value.data().to_vec(), self.a_i.value.data().to_vec());
        for t in 0..tokens {
            let p = &c.phi.data()[t * d..(t + 1) * d];
            let dzt = &dz.data()[t * d..(t + 1) * d];
            let uv = &c.uv[t * 2 * d..(t + 1) * 2 * d];
            // projection
            duv.iter_mut().for_each(|v| *v = 0.0);
            let dw = self.w.grad.data_mut();
            for (o, &g) in dzt.iter().enumerate() {
                let wr = &w[o * 2 * d..(o + 1) * 2 * d];
                let dwr = &mut dw[o * 2 * d..(o + 1) * 2 * d];
                for k in 0..2 * d {
                    dwr[k] += g * uv[k];
                    duv[k] += g * wr[k];
                }
            }
            let (tr, ti) = (&c.tr[t * d..(t + 1) * d], &c.ti[t * d..(t + 1) * d]);
            let dpt = &mut dphi[t * d..(t + 1) * d];
            for k in 0..d {
                let e = &spec[k];
                let (gr, gi) = (1.0 + rho * tr[k], rho * ti[k]);
                let (alr, ali) = (e.re * gr - e.im * gi, e.re * gi + e.im * gr);
                let (du, dv) = (duv[k], duv[d + k]);
                dpt[k] += alr * du + ali * dv;
                let (dar, dai) = (du * p[k], dv * p[k]);
                dlam_r[k] += dar * gr + dai * gi;
                dlam_i[k] += -dar * gi + dai * gr;
                let dgr = dar * e.re + dai * e.im;
                let dgi = -dar * e.im + dai * e.re;
                ds_r[k] = dgr * rho * (1.0 - tr[k] * tr[k]);
                ds_i[k] = dgi * rho * (1.0 - ti[k] * ti[k]);
            }
            if rho != 0.0 {
                let (dar_g, dbr_g) = (self.a_r.grad.data_mut(), self.b_r.grad.data_mut());
                for o in 0..d {
                    dbr_g[o] += ds_r[o];
                    for k in 0..d {
                        dar_g[o * d + k] += ds_r[o] * libm::log1p(p[k].abs());
                    }
                }
                let (dai_g, dbi_g) = (self.a_i.grad.data_mut(), self.b_i.grad.data_mut());
                for o in 0..d {
                    dbi_g[o] += ds_i[o];
                    for k in 0..d {
                        dai_g[o * d + k] += ds_i[o] * libm::log1p(p[k].abs());
                    }
                }
                for k in 0..d {
                    let mut dm = 0.0;
                    for o in 0..d {
                        dm += ar[o * d + k] * ds_r[o] + ai[o * d + k] * ds_i[o];
                    }
                    // d|φ|/dφ taken as 0 at the kink
                    let sign = if p[k] > 0.0 { 1.0 } else if p[k] < 0.0 { -1.0 } else { 0.0 };
                    dpt[k] += dm * sign / (1.0 + p[k].abs());
                }
            }
        }
        let nu = self.nu.value.data().to_vec();
        let (dnu, dth) = (self.nu.grad.data_mut(), self.theta.grad.data_mut());
        for k in 0..d {
            let e = &spec[k];
            let (cs, sn) = (libm::cos(e.phase), libm::sin(e.phase));
            let dmag = dlam_r[k] * cs + dlam_i[k] * sn;
            dth[k] += e.modulus * (-dlam_r[k] * sn + dlam_i[k] * cs);
            dnu[k] += -dmag * e.modulus * sigmoid(nu[k]);
        }
        Tensor::new(c.phi.shape(), dphi)
    }
}

/// `φ⁺ = LayerNorm(φ + W[Re(α)⊙φ; Im(α)⊙φ])` applied `steps` times per token.
pub fn koopman_block(phi: &Tensor, block: &KoopmanBlock) -> Result<Tensor> {
    Ok(block.forward(phi)?.0)
}

impl DiffOp for KoopmanBlock {
    type Cache = Vec<KoopmanStepCache>;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Self::Cache)> {
        let mut caches = Vec::with_capacity(self.steps);
        let mut h = x.clone();
        for _ in 0..self.steps {
            let (y, c) = self.step_forward(&h)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    fn backward(&mut self, caches: &Self::Cache, dy: &Tensor) -> Result<Tensor> {
        let mut g = dy.clone();
        for c in caches.iter().rev() {
            g = self.step_backward(c, &g)?;
        }
        Ok(g)
    }
}

impl Module for KoopmanBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "nu"), &self.nu);
        f(&join(prefix, "theta"), &self.theta);
        f(&join(prefix, "a_r"), &self.a_r);
        f(&join(prefix, "b_r"), &self.b_r);
        f(&join(prefix, "a_i"), &self.a_i);
        f(&join(prefix, "b_i"), &self.b_i);
        f(&join(prefix, "w"), &self.w);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "nu"), &mut self.nu);
        f(&join(prefix, "theta"), &mut self.theta);
        f(&join(prefix, "a_r"), &mut self.a_r);
        f(&join(prefix, "b_r"), &mut self.b_r);
        f(&join(prefix, "a_i"), &mut self.a_i);
        f(&join(prefix, "b_i"), &mut self.b_i);
        f(&join(prefix, "w"), &mut self.w);
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
    }
}
