//! Convolutional building blocks shared by the lifting network and the
//! volumetric refiner.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::attention::{AttentionGate, GateCache};
use crate::error::{Error, Result};
use crate::nn::conv::ConvGeom;
use crate::nn::norm::GroupNormCache;
use crate::nn::{join, Activation, Chain, Conv, ConvTranspose, DiffOp, GroupNorm, Module, Param};
use crate::tensor::Tensor;

/// `[C, s…]` → `[S, C]`.
pub fn channels_last(x: &Tensor) -> Tensor {
    let c = x.dim(0);
    let s = x.len() / c.max(1);
    let mut out = vec![0.0; x.len()];
    for (ch, row) in x.data().chunks(s).enumerate() {
        for (p, &v) in row.iter().enumerate() {
            out[p * c + ch] = v;
        }
    }
    Tensor::new(&[s, c], out).expect("sizes agree")
}

/// `[S, C]` → `[C, s…]` with the given spatial extents.
pub fn channels_first(t: &Tensor, spatial: &[usize]) -> Result<Tensor> {
    let c = t.dim(t.rank() - 1);
    let s = t.len() / c.max(1);
    if spatial.iter().product::<usize>() != s {
        return Err(Error::mismatch("token grid", spatial, t.shape()));
    }
    let mut out = vec![0.0; t.len()];
    for (p, row) in t.data().chunks(c).enumerate() {
        for (ch, &v) in row.iter().enumerate() {
            out[ch * s + p] = v;
        }
    }
    let mut shape = vec![c];
    shape.extend_from_slice(spatial);
    Tensor::new(&shape, out)
}

/// Convolution → instance normalization → activation.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv,
    pub norm: GroupNorm,
    pub act: Activation,
}

pub struct ConvNormActCache {
    x: Tensor,
    norm: GroupNormCache,
    pre: Tensor,
}

impl ConvNormAct {
    pub fn new(conv: Conv, act: Activation) -> Self {
        let norm = GroupNorm::instance(conv.out_ch);
        Self { conv, norm, act }
    }

    pub fn same(rank: usize, cin: usize, cout: usize, act: Activation, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self::new(Conv::same(rank, cin, cout, 3, rng)?, act))
    }

    pub fn down(rank: usize, cin: usize, cout: usize, act: Activation, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self::new(Conv::down(rank, cin, cout, rng)?, act))
    }
}

impl DiffOp for ConvNormAct {
    type Cache = ConvNormActCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, ConvNormActCache)> {
        let (h, _) = self.conv.forward(x)?;
        let (pre, norm) = self.norm.forward(&h)?;
        let mut y = pre.clone();
        self.act.apply_in_place(y.data_mut());
        Ok((y, ConvNormActCache { x: x.clone(), norm, pre }))
    }

    fn backward(&mut self, cache: &ConvNormActCache, dy: &Tensor) -> Result<Tensor> {
        let mut g = dy.clone();
        self.act.backprop_in_place(cache.pre.data(), g.data_mut());
        let g = self.norm.backward(&cache.norm, &g)?;
        self.conv.backward(&cache.x, &g)
    }
}

impl Module for ConvNormAct {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_params_mut(&join(prefix, "conv"), f);
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
    }
}

/// `n` same-padding conv blocks, the first one changing the width.
pub fn conv_stage(
    rank: usize,
    cin: usize,
    cout: usize,
    n: usize,
    act: Activation,
    rng: &mut impl Rng,
) -> Result<Chain<ConvNormAct>> {
    (0..n.max(1))
        .map(|i| ConvNormAct::same(rank, if i == 0 { cin } else { cout }, cout, act, rng))
        .collect::<Result<Vec<_>>>()
        .map(Chain)
}

/// Decoder level: transposed-conv upsampling, gated skip, concatenation and
/// a conv stage.
#[derive(Clone, Debug)]
pub struct UpLevel {
    pub up: ConvTranspose,
    pub gate: AttentionGate,
    pub convs: Chain<ConvNormAct>,
}

pub struct UpLevelCache {
    up_in: Tensor,
    gate: GateCache,
    convs: Vec<ConvNormActCache>,
    up_ch: usize,
}

impl UpLevel {
    pub fn new(
        rank: usize,
        cin: usize,
        skip_ch: usize,
        cout: usize,
        n_convs: usize,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let up = ConvTranspose::up(rank, cin, cout, rng)?;
        let gate = AttentionGate::new(skip_ch, cout, (skip_ch / 2).max(1), rng);
        let convs = conv_stage(rank, cout + skip_ch, cout, n_convs, act, rng)?;
        Ok(Self { up, gate, convs })
    }

    pub fn forward(&self, x: &Tensor, skip: &Tensor) -> Result<(Tensor, UpLevelCache)> {
        let (u, _) = self.up.forward(x)?;
        let (g, gate) = self.gate.forward(skip, &u)?;
        let cat = Tensor::concat0(&[&u, &g])?;
        let (y, convs) = self.convs.forward(&cat)?;
        Ok((y, UpLevelCache { up_in: x.clone(), gate, convs, up_ch: u.dim(0) }))
    }

    /// Returns `(d input, d skip)`.
    pub fn backward(&mut self, cache: &UpLevelCache, dy: &Tensor) -> Result<(Tensor, Tensor)> {
        let dcat = self.convs.backward(&cache.convs, dy)?;
        let skip_ch = dcat.dim(0) - cache.up_ch;
        let mut parts = dcat.split0(&[cache.up_ch, skip_ch])?.into_iter();
        let (mut du, dg) = (parts.next().expect("two parts"), parts.next().expect("two parts"));
        let (dskip, dctx) = self.gate.backward(&cache.gate, &dg)?;
        du.add_assign(&dctx)?;
        let dx = self.up.backward(&cache.up_in, &du)?;
        Ok((dx, dskip))
    }
}

impl Module for UpLevel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.up.visit_params(&join(prefix, "up"), f);
        self.gate.visit_params(&join(prefix, "gate"), f);
        self.convs.visit_params(&join(prefix, "convs"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.up.visit_params_mut(&join(prefix, "up"), f);
        self.gate.visit_params_mut(&join(prefix, "gate"), f);
        self.convs.visit_params_mut(&join(prefix, "convs"), f);
    }
}

/// Encoder/decoder with gated skips around an arbitrary bottleneck, ending
/// in a `255·σ(slope·x)` head.
#[derive(Clone, Debug)]
pub struct UNet<B> {
    pub rank: usize,
    /// Multiplies the raw input before the first convolution.
    pub input_scale: f64,
    pub head_slope: f64,
    pub enc: Vec<Chain<ConvNormAct>>,
    pub down: Vec<ConvNormAct>,
    pub bottleneck: B,
    /// Ordered shallow to deep, like `enc`.
    pub dec: Vec<UpLevel>,
    pub head: Conv,
}

pub struct UNetCache<C> {
    enc: Vec<Vec<ConvNormActCache>>,
    down: Vec<ConvNormActCache>,
    bottleneck: C,
    skips_shape: Vec<Vec<usize>>,
    dec: Vec<UpLevelCache>,
    head_in: Tensor,
    out: Tensor,
}

/// Widths of the scaffold.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetShape {
    pub rank: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub widths: Vec<usize>,
    pub bottleneck: usize,
    pub convs_per_stage: usize,
    pub head_kernel: usize,
    pub act: Activation,
}

impl<B> UNet<B> {
    pub fn new(shape: &UNetShape, bottleneck: B, input_scale: f64, head_slope: f64, rng: &mut impl Rng) -> Result<Self> {
        let w = &shape.widths;
        if w.is_empty() {
            return Err(Error::InvalidArgument("encoder needs at least one stage".into()));
        }
        let (r, n, act) = (shape.rank, shape.convs_per_stage, shape.act);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        let mut dec = Vec::new();
        for (s, &ws) in w.iter().enumerate() {
            let cin = if s == 0 { shape.in_ch } else { ws };
            enc.push(conv_stage(r, cin, ws, n, act, rng)?);
            let next = w.get(s + 1).copied().unwrap_or(shape.bottleneck);
            down.push(ConvNormAct::down(r, ws, next, act, rng)?);
        }
        for (s, &ws) in w.iter().enumerate() {
            let deeper = w.get(s + 1).copied().unwrap_or(shape.bottleneck);
            dec.push(UpLevel::new(r, deeper, ws, ws, n, act, rng)?);
        }
        let head = Conv::new(
            r,
            w[0],
            shape.out_ch,
            ConvGeom::square(r, shape.head_kernel, 1),
            1,
            true,
            rng,
        )?;
        Ok(Self { rank: r, input_scale, head_slope, enc, down, bottleneck, dec, head })
    }

    pub fn stages(&self) -> usize {
        self.enc.len()
    }
}

impl<B: DiffOp> DiffOp for UNet<B> {
    type Cache = UNetCache<B::Cache>;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Self::Cache)> {
        let factor = 1usize << self.stages();
        if x.shape()[1..].iter().rev().take(self.rank).any(|&e| e % factor != 0) {
            return Err(Error::InvalidShape(alloc::format!(
                "spatial extents {:?} must be divisible by {factor}",
                &x.shape()[1..]
            )));
        }
        let mut h = x.scale(self.input_scale);
        let mut skips = Vec::new();
        let mut enc_c = Vec::new();
        let mut down_c = Vec::new();
        for (stage, down) in self.enc.iter().zip(&self.down) {
            let (y, c) = stage.forward(&h)?;
            enc_c.push(c);
            let (d, dc) = down.forward(&y)?;
            down_c.push(dc);
            skips.push(y);
            h = d;
        }
        let (mut h, bottleneck) = self.bottleneck.forward(&h)?;
        let mut dec_c = Vec::with_capacity(self.dec.len());
        for (level, skip) in self.dec.iter().zip(&skips).rev() {
            let (y, c) = level.forward(&h, skip)?;
            dec_c.push(c);
            h = y;
        }
        dec_c.reverse();
        let (logits, _) = self.head.forward(&h)?;
        let slope = self.head_slope;
        let out = logits.map(|v| 255.0 * crate::nn::sigmoid(slope * v));
        Ok((
            out.clone(),
            UNetCache {
                enc: enc_c,
                down: down_c,
                bottleneck,
                skips_shape: skips.iter().map(|s| s.shape().to_vec()).collect(),
                dec: dec_c,
                head_in: h,
                out,
            },
        ))
    }

    fn backward(&mut self, cache: &Self::Cache, dy: &Tensor) -> Result<Tensor> {
        dy.same_shape(&cache.out, "network output gradient")?;
        let slope = self.head_slope;
        let dlogits = dy.zip_map(&cache.out, |g, o| {
            let s = o / 255.0;
            g * 255.0 * slope * s * (1.0 - s)
        })?;
        let mut g = self.head.backward(&cache.head_in, &dlogits)?;
        let mut dskips: Vec<Tensor> = cache.skips_shape.iter().map(|s| Tensor::zeros(s)).collect();
        for s in 0..self.dec.len() {
            let (dx, dskip) = self.dec[s].backward(&cache.dec[s], &g)?;
            dskips[s] = dskip;
            g = dx;
        }
        let mut g = self.bottleneck.backward(&cache.bottleneck, &g)?;
        for s in (0..self.enc.len()).rev() {
            let mut dy = self.down[s].backward(&cache.down[s], &g)?;
            dy.add_assign(&dskips[s])?;
            g = self.enc[s].backward(&cache.enc[s], &dy)?;
        }
        Ok(g.scale(self.input_scale))
    }
}

impl<B: Module> Module for UNet<B> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (s, (e, d)) in self.enc.iter().zip(&self.down).enumerate() {
            e.visit_params(&join(prefix, &alloc::format!("enc{s}")), f);
            d.visit_params(&join(prefix, &alloc::format!("down{s}")), f);
        }
        self.bottleneck.visit_params(&join(prefix, "bottleneck"), f);
        for (s, level) in self.dec.iter().enumerate() {
            level.visit_params(&join(prefix, &alloc::format!("dec{s}")), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (s, (e, d)) in self.enc.iter_mut().zip(&mut self.down).enumerate() {
            e.visit_params_mut(&join(prefix, &alloc::format!("enc{s}")), f);
            d.visit_params_mut(&join(prefix, &alloc::format!("down{s}")), f);
        }
        self.bottleneck.visit_params_mut(&join(prefix, "bottleneck"), f);
        for (s, level) in self.dec.iter_mut().enumerate() {
            level.visit_params_mut(&join(prefix, &alloc::format!("dec{s}")), f);
        }
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}
