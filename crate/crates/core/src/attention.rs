//! Multi-head self-attention along one axis, axial attention over 2D maps,
//! and additive attention gates for skip connections.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::norm::LayerNormCache;
use crate::nn::{join, sigmoid, DiffOp, LayerNorm, Linear, Module, Param};
use crate::tensor::Tensor;

pub const DEFAULT_HEADS: usize = 4;

/// Scaled dot-product self-attention with `heads` heads and no positional
/// encoding. Input is `[L, C]` or a batch of sequences `[N, L, C]`.
#[derive(Clone, Debug)]
pub struct Mha {
    pub dim: usize,
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

pub struct MhaCache {
    shape: Vec<usize>,
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    ctx: Tensor,
    /// Softmax weights `[N, heads, L, L]`.
    probs: Vec<f64>,
    /// Multiply-accumulates spent in scores and weighted sums.
    pub core_macs: u64,
}

impl MhaCache {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

impl Mha {
    pub fn new(dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!("{dim} channels do not split into {heads} heads")));
        }
        Ok(Self {
            dim,
            heads,
            wq: Linear::init(dim, dim, false, rng),
            wk: Linear::init(dim, dim, false, rng),
            wv: Linear::init(dim, dim, false, rng),
            wo: Linear::init(dim, dim, false, rng),
        })
    }

    fn dims(&self, x: &Tensor) -> Result<(usize, usize)> {
        match x.shape() {
            [l, c] if *c == self.dim => Ok((1, *l)),
            [n, l, c] if *c == self.dim => Ok((*n, *l)),
            s => Err(Error::mismatch("attention input", &[0, self.dim], s)),
        }
    }

    /// Projection multiply-accumulates for `n` sequences of length `l`.
    pub fn projection_macs(&self, n: usize, l: usize) -> u64 {
        (4 * n * l * self.dim * self.dim) as u64
    }
}

impl DiffOp for Mha {
    type Cache = MhaCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, MhaCache)> {
        let (n, l) = self.dims(x)?;
        let (c, heads) = (self.dim, self.heads);
        let dh = c / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let q = self.wq.forward(x)?.0;
        let k = self.wk.forward(x)?.0;
        let v = self.wv.forward(x)?.0;
        let mut ctx = vec![0.0; n * l * c];
        let mut probs = vec![0.0; n * heads * l * l];
        let mut macs = 0u64;
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        for s in 0..n {
            let base = s * l * c;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..l {
                    let qi = &qd[base + i * c + off..][..dh];
                    let row = &mut probs[((s * heads + h) * l + i) * l..][..l];
                    let mut max = f64::NEG_INFINITY;
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &kd[base + j * c + off..][..dh];
                        *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        max = max.max(*r);
                    }
                    let mut z = 0.0;
                    for r in row.iter_mut() {
                        *r = libm::exp(*r - max);
                        z += *r;
                    }
                    let ci = &mut ctx[base + i * c + off..][..dh];
                    for (j, r) in row.iter_mut().enumerate() {
                        *r /= z;
                        let vj = &vd[base + j * c + off..][..dh];
                        for (o, &vv) in ci.iter_mut().zip(vj) {
                            *o += *r * vv;
                        }
                    }
                    macs += 2 * (l * dh) as u64;
                }
            }
        }
        let ctx = Tensor::new(x.shape(), ctx)?;
        let out = self.wo.forward(&ctx)?.0;
        Ok((
            out,
            MhaCache {
                shape: x.shape().to_vec(),
                x: x.clone(),
                q,
                k,
                v,
                ctx,
                probs,
                core_macs: macs,
            },
        ))
    }

    fn backward(&mut self, cache: &MhaCache, dy: &Tensor) -> Result<Tensor> {
        let (n, l) = self.dims(&cache.x)?;
        let (c, heads) = (self.dim, self.heads);
        let dh = c / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let dctx = self.wo.backward(&cache.ctx, dy)?;
        let (qd, kd, vd) = (cache.q.data(), cache.k.data(), cache.v.data());
        let mut dq = vec![0.0; n * l * c];
        let mut dk = vec![0.0; n * l * c];
        let mut dv = vec![0.0; n * l * c];
        let mut dp = vec![0.0; l];
        for s in 0..n {
            let base = s * l * c;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..l {
                    let p = &cache.probs[((s * heads + h) * l + i) * l..][..l];
                    let dci = &dctx.data()[base + i * c + off..][..dh];
                    let mut dot = 0.0;
                    for j in 0..l {
                        let vj = &vd[base + j * c + off..][..dh];
                        dp[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                        dot += p[j] * dp[j];
                        let dvj = &mut dv[base + j * c + off..][..dh];
                        for (o, &g) in dvj.iter_mut().zip(dci) {
                            *o += p[j] * g;
                        }
                    }
                    let qi = &qd[base + i * c + off..][..dh];
                    for j in 0..l {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kd[base + j * c + off..][..dh];
                        let dqi = &mut dq[base + i * c + off..][..dh];
                        for (o, &kk) in dqi.iter_mut().zip(kj) {
                            *o += ds * kk;
                        }
                        let dkj = &mut dk[base + j * c + off..][..dh];
                        for (o, &qq) in dkj.iter_mut().zip(qi) {
                            *o += ds * qq;
                        }
                    }
                }
            }
        }
        let shape = &cache.shape;
        let mut dx = self.wq.backward(&cache.x, &Tensor::new(shape, dq)?)?;
        dx.add_assign(&self.wk.backward(&cache.x, &Tensor::new(shape, dk)?)?)?;
        dx.add_assign(&self.wv.backward(&cache.x, &Tensor::new(shape, dv)?)?)?;
        Ok(dx)
    }
}

impl Module for Mha {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.wq.visit_params(&join(prefix, "wq"), f);
        self.wk.visit_params(&join(prefix, "wk"), f);
        self.wv.visit_params(&join(prefix, "wv"), f);
        self.wo.visit_params(&join(prefix, "wo"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.wq.visit_params_mut(&join(prefix, "wq"), f);
        self.wk.visit_params_mut(&join(prefix, "wk"), f);
        self.wv.visit_params_mut(&join(prefix, "wv"), f);
        self.wo.visit_params_mut(&join(prefix, "wo"), f);
    }
}

/// Attention over the last axis of `[L, C]`.
pub fn mha_1d(x: &Tensor, mha: &Mha) -> Result<Tensor> {
    Ok(mha.forward(x)?.0)
}

/// `[C, H, W]` → `[H, W, C]` (rows as sequences along width).
fn to_rows(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                out[(r * w + col) * c + ch] = x[(ch * h + r) * w + col];
            }
        }
    }
    out
}

fn from_rows(t: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                out[(ch * h + r) * w + col] += t[(r * w + col) * c + ch];
            }
        }
    }
}

/// `[C, H, W]` → `[W, H, C]` (columns as sequences along height).
fn to_cols(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                out[(col * h + r) * c + ch] = x[(ch * h + r) * w + col];
            }
        }
    }
    out
}

fn from_cols(t: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                out[(ch * h + r) * w + col] += t[(col * h + r) * c + ch];
            }
        }
    }
}

/// `X + MHA_w(LN_w(X)) + MHA_h(LN_h(X))` over a `[C, H, W]` map.
#[derive(Clone, Debug)]
pub struct AxialAttention {
    pub channels: usize,
    pub norm_w: LayerNorm,
    pub norm_h: LayerNorm,
    pub mha_w: Mha,
    pub mha_h: Mha,
}

pub struct AxialCache {
    dims: [usize; 3],
    norm_w: LayerNormCache,
    norm_h: LayerNormCache,
    mha_w: MhaCache,
    mha_h: MhaCache,
}

impl AxialCache {
    /// Core attention multiply-accumulates of the width and height branches.
    pub fn core_macs(&self) -> (u64, u64) {
        (self.mha_w.core_macs, self.mha_h.core_macs)
    }
}

impl AxialAttention {
    pub fn new(channels: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            channels,
            norm_w: LayerNorm::new(channels),
            norm_h: LayerNorm::new(channels),
            mha_w: Mha::new(channels, heads, rng)?,
            mha_h: Mha::new(channels, heads, rng)?,
        })
    }

    fn dims(&self, x: &Tensor) -> Result<[usize; 3]> {
        match x.shape() {
            [c, h, w] if *c == self.channels => Ok([*c, *h, *w]),
            s => Err(Error::mismatch("axial attention input", &[self.channels, 0, 0], s)),
        }
    }
}

impl DiffOp for AxialAttention {
    type Cache = AxialCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, AxialCache)> {
        let [c, h, w] = self.dims(x)?;
        let rows = Tensor::new(&[h, w, c], to_rows(x.data(), c, h, w))?;
        let cols = Tensor::new(&[w, h, c], to_cols(x.data(), c, h, w))?;
        let (nw, norm_w) = self.norm_w.forward(&rows)?;
        let (nh, norm_h) = self.norm_h.forward(&cols)?;
        let (yw, mha_w) = self.mha_w.forward(&nw)?;
        let (yh, mha_h) = self.mha_h.forward(&nh)?;
        let mut out = x.data().to_vec();
        from_rows(yw.data(), c, h, w, &mut out);
        from_cols(yh.data(), c, h, w, &mut out);
        Ok((
            Tensor::new(x.shape(), out)?,
            AxialCache { dims: [c, h, w], norm_w, norm_h, mha_w, mha_h },
        ))
    }

    fn backward(&mut self, cache: &AxialCache, dy: &Tensor) -> Result<Tensor> {
        let [c, h, w] = cache.dims;
        dy.ensure_shape(&[c, h, w], "axial attention gradient")?;
        let gw = Tensor::new(&[h, w, c], to_rows(dy.data(), c, h, w))?;
        let gh = Tensor::new(&[w, h, c], to_cols(dy.data(), c, h, w))?;
        let gw = self.norm_w.backward(&cache.norm_w, &self.mha_w.backward(&cache.mha_w, &gw)?)?;
        let gh = self.norm_h.backward(&cache.norm_h, &self.mha_h.backward(&cache.mha_h, &gh)?)?;
        let mut dx = dy.data().to_vec();
        from_rows(gw.data(), c, h, w, &mut dx);
        from_cols(gh.data(), c, h, w, &mut dx);
        Tensor::new(dy.shape(), dx)
    }
}

impl Module for AxialAttention {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.norm_w.visit_params(&join(prefix, "norm_w"), f);
        self.norm_h.visit_params(&join(prefix, "norm_h"), f);
        self.mha_w.visit_params(&join(prefix, "mha_w"), f);
        self.mha_h.visit_params(&join(prefix, "mha_h"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.norm_w.visit_params_mut(&join(prefix, "norm_w"), f);
        self.norm_h.visit_params_mut(&join(prefix, "norm_h"), f);
        self.mha_w.visit_params_mut(&join(prefix, "mha_w"), f);
        self.mha_h.visit_params_mut(&join(prefix, "mha_h"), f);
    }
}

pub fn axial_attention(x: &Tensor, attn: &AxialAttention) -> Result<Tensor> {
    Ok(attn.forward(x)?.0)
}

/// Additive gate `σ(ψ·ReLU(W_s·skip + W_c·ctx + b) + ψ_0) ⊙ skip`, applied
/// per position of `[C, …]` maps of any spatial rank.
#[derive(Clone, Debug)]
pub struct AttentionGate {
    pub skip_ch: usize,
    pub ctx_ch: usize,
    pub inter: usize,
    /// `[inter, skip_ch]`.
    pub w_skip: Param,
    /// `[inter, ctx_ch]`.
    pub w_ctx: Param,
    pub bias: Param,
    /// `[inter]`.
    pub psi: Param,
    /// `[1]`.
    pub psi_bias: Param,
}

pub struct GateCache {
    skip: Tensor,
    ctx: Tensor,
    /// Pre-activation `[inter, S]`.
    pre: Vec<f64>,
    gate: Vec<f64>,
}

impl GateCache {
    pub fn gate(&self) -> &[f64] {
        &self.gate
    }
}

fn channel_split(x: &Tensor, channels: usize, what: &'static str) -> Result<usize> {
    match x.shape().first() {
        Some(&c) if c == channels && x.rank() >= 2 => Ok(x.len() / c.max(1)),
        _ => Err(Error::mismatch(what, &[channels], x.shape())),
    }
}

impl AttentionGate {
    pub fn new(skip_ch: usize, ctx_ch: usize, inter: usize, rng: &mut impl Rng) -> Self {
        let mut uni = |shape: &[usize], fan: usize| {
            let b = 1.0 / libm::sqrt(fan.max(1) as f64);
            let mut t = Tensor::zeros(shape);
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-b..=b));
            Param::new(t)
        };
        let w_skip = uni(&[inter, skip_ch], skip_ch + ctx_ch);
        let w_ctx = uni(&[inter, ctx_ch], skip_ch + ctx_ch);
        let psi = uni(&[inter], inter);
        Self {
            skip_ch,
            ctx_ch,
            inter,
            w_skip,
            w_ctx,
            bias: Param::new(Tensor::zeros(&[inter])),
            psi,
            psi_bias: Param::new(Tensor::zeros(&[1])),
        }
    }

    pub fn forward(&self, skip: &Tensor, ctx: &Tensor) -> Result<(Tensor, GateCache)> {
        let s = channel_split(skip, self.skip_ch, "gate skip channels")?;
        let sc = channel_split(ctx, self.ctx_ch, "gate context channels")?;
        if s != sc || skip.shape()[1..] != ctx.shape()[1..] {
            return Err(Error::mismatch("gate spatial extents", &skip.shape()[1..], &ctx.shape()[1..]));
        }
        let f = self.inter;
        let mut pre = vec![0.0; f * s];
        let (ws, wc) = (self.w_skip.value.data(), self.w_ctx.value.data());
        for o in 0..f {
            let row = &mut pre[o * s..(o + 1) * s];
            row.fill(self.bias.value.data()[o]);
            for c in 0..self.skip_ch {
                let wv = ws[o * self.skip_ch + c];
                for (r, &x) in row.iter_mut().zip(&skip.data()[c * s..(c + 1) * s]) {
                    *r += wv * x;
                }
            }
            for c in 0..self.ctx_ch {
                let wv = wc[o * self.ctx_ch + c];
                for (r, &x) in row.iter_mut().zip(&ctx.data()[c * s..(c + 1) * s]) {
                    *r += wv * x;
                }
            }
        }
        let mut gate = vec![self.psi_bias.value.data()[0]; s];
        for o in 0..f {
            let pv = self.psi.value.data()[o];
            for (g, &a) in gate.iter_mut().zip(&pre[o * s..(o + 1) * s]) {
                if a > 0.0 {
                    *g += pv * a;
                }
            }
        }
        gate.iter_mut().for_each(|g| *g = sigmoid(*g));
        let mut out = skip.data().to_vec();
        for row in out.chunks_mut(s) {
            for (v, &g) in row.iter_mut().zip(&gate) {
                *v *= g;
            }
        }
        Ok((
            Tensor::new(skip.shape(), out)?,
            GateCache { skip: skip.clone(), ctx: ctx.clone(), pre, gate },
        ))
    }

    /// Returns gradients with respect to `(skip, context)`.
    pub fn backward(&mut self, cache: &GateCache, dy: &Tensor) -> Result<(Tensor, Tensor)> {
        dy.same_shape(&cache.skip, "gate gradient")?;
        let s = cache.gate.len();
        let f = self.inter;
        let mut dskip = vec![0.0; cache.skip.len()];
        let mut dq = vec![0.0; s];
        for (c, (drow, xrow)) in dy.data().chunks(s).zip(cache.skip.data().chunks(s)).enumerate() {
            let out = &mut dskip[c * s..(c + 1) * s];
            for p in 0..s {
                out[p] = drow[p] * cache.gate[p];
                dq[p] += drow[p] * xrow[p];
            }
        }
        for (d, &g) in dq.iter_mut().zip(&cache.gate) {
            *d *= g * (1.0 - g);
        }
        self.psi_bias.grad.data_mut()[0] += dq.iter().sum::<f64>();
        let psi = self.psi.value.data().to_vec();
        let mut da = vec![0.0; f * s];
        for o in 0..f {
            let pre = &cache.pre[o * s..(o + 1) * s];
            let mut dpsi = 0.0;
            let mut db = 0.0;
            let row = &mut da[o * s..(o + 1) * s];
            for p in 0..s {
                if pre[p] > 0.0 {
                    dpsi += dq[p] * pre[p];
                    row[p] = psi[o] * dq[p];
                    db += row[p];
                }
            }
            self.psi.grad.data_mut()[o] += dpsi;
            self.bias.grad.data_mut()[o] += db;
        }
        let mut dctx = vec![0.0; cache.ctx.len()];
        let ws = self.w_skip.value.data().to_vec();
        let wc = self.w_ctx.value.data().to_vec();
        for o in 0..f {
            let row = &da[o * s..(o + 1) * s];
            for c in 0..self.skip_ch {
                let x = &cache.skip.data()[c * s..(c + 1) * s];
                self.w_skip.grad.data_mut()[o * self.skip_ch + c] += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                let wv = ws[o * self.skip_ch + c];
                for (d, &a) in dskip[c * s..(c + 1) * s].iter_mut().zip(row) {
                    *d += wv * a;
                }
            }
            for c in 0..self.ctx_ch {
                let x = &cache.ctx.data()[c * s..(c + 1) * s];
                self.w_ctx.grad.data_mut()[o * self.ctx_ch + c] += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                let wv = wc[o * self.ctx_ch + c];
                for (d, &a) in dctx[c * s..(c + 1) * s].iter_mut().zip(row) {
                    *d += wv * a;
                }
            }
        }
        Ok((
            Tensor::new(cache.skip.shape(), dskip)?,
            Tensor::new(cache.ctx.shape(), dctx)?,
        ))
    }
}

pub fn attention_gate(skip: &Tensor, ctx: &Tensor, gate: &AttentionGate) -> Result<Tensor> {
    Ok(gate.forward(skip, ctx)?.0)
}

impl Module for AttentionGate {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "w_skip"), &self.w_skip);
        f(&join(prefix, "w_ctx"), &self.w_ctx);
        f(&join(prefix, "bias"), &self.bias);
        f(&join(prefix, "psi"), &self.psi);
        f(&join(prefix, "psi_bias"), &self.psi_bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "w_skip"), &mut self.w_skip);
        f(&join(prefix, "w_ctx"), &mut self.w_ctx);
        f(&join(prefix, "bias"), &mut self.bias);
        f(&join(prefix, "psi"), &mut self.psi);
        f(&join(prefix, "psi_bias"), &mut self.psi_bias);
    }
}
