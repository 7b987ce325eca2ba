//! Bottleneck blocks: the 2D Koopman–KAN token block of the lifting network
//! and the 3D tokenized-KAN block of the refiner.

use alloc::vec::Vec;

use rand::Rng;

use crate::attention::{AxialAttention, AxialCache};
use crate::error::{Error, Result};
use crate::kan::{KanStack, SplineGrid};
use crate::koopman::{KoopmanBlock, KoopmanStepCache};
use crate::model::blocks::{channels_first, channels_last};
use crate::nn::conv::ConvGeom;
use crate::nn::norm::{GroupNormCache, LayerNormCache};
use crate::nn::{join, Conv, DiffOp, GroupNorm, LayerNorm, Module, Param};
use crate::tensor::Tensor;

/// Largest group count `≤ 8` dividing `channels`.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Projection → depthwise conv → tokens → KAN → Koopman → axial attention
/// → depthwise conv + group norm, plus the block input.
#[derive(Clone, Debug)]
pub struct TokenBlock2d {
    pub channels: usize,
    pub proj: Conv,
    pub dw_in: Conv,
    pub kan: KanStack,
    pub koopman: KoopmanBlock,
    pub attn: AxialAttention,
    pub dw_out: Conv,
    pub norm: GroupNorm,
}

pub struct TokenBlockCache {
    x: Tensor,
    a: Tensor,
    kan: Vec<Tensor>,
    koopman: Vec<KoopmanStepCache>,
    attn: AxialCache,
    r: Tensor,
    norm: GroupNormCache,
    spatial: [usize; 2],
}

impl TokenBlockCache {
    pub fn attention(&self) -> &AxialCache {
        &self.attn
    }
}

impl TokenBlock2d {
    pub fn new(channels: usize, heads: usize, rho: f64, rng: &mut impl Rng) -> Result<Self> {
        let c = channels;
        Ok(Self {
            channels: c,
            proj: Conv::new(2, c, c, ConvGeom::square(2, 1, 1), 1, true, rng)?,
            dw_in: Conv::depthwise(2, c, rng)?,
            kan: KanStack::new(&[c, c, c], &SplineGrid::default(), rng)?,
            koopman: KoopmanBlock::new(c, rho, rng)?,
            attn: AxialAttention::new(c, heads, rng)?,
            dw_out: Conv::depthwise(2, c, rng)?,
            norm: GroupNorm::new(c, group_count(c), true)?,
        })
    }
}

impl DiffOp for TokenBlock2d {
    type Cache = TokenBlockCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, TokenBlockCache)> {
        let spatial = match x.shape() {
            [c, h, w] if *c == self.channels => [*h, *w],
            s => return Err(Error::mismatch("token block input", &[self.channels, 0, 0], s)),
        };
        let (a, _) = self.proj.forward(x)?;
        let (b, _) = self.dw_in.forward(&a)?;
        let (k, kan) = self.kan.forward(&channels_last(&b))?;
        let (p, koopman) = self.koopman.forward(&k)?;
        let (r, attn) = self.attn.forward(&channels_first(&p, &spatial)?)?;
        let (s, _) = self.dw_out.forward(&r)?;
        let (n, norm) = self.norm.forward(&s)?;
        let y = x.add(&n)?;
        Ok((y, TokenBlockCache { x: x.clone(), a, kan, koopman, attn, r, norm, spatial }))
    }

    fn backward(&mut self, c: &TokenBlockCache, dy: &Tensor) -> Result<Tensor> {
        let ds = self.norm.backward(&c.norm, dy)?;
        let dr = self.dw_out.backward(&c.r, &ds)?;
        let dq = self.attn.backward(&c.attn, &dr)?;
        let dp = self.koopman.backward(&c.koopman, &channels_last(&dq))?;
        let dk = self.kan.backward(&c.kan, &dp)?;
        let db = channels_first(&dk, &c.spatial)?;
        let da = self.dw_in.backward(&c.a, &db)?;
        let mut dx = self.proj.backward(&c.x, &da)?;
        dx.add_assign(dy)?;
        Ok(dx)
    }
}

impl Module for TokenBlock2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.proj.visit_params(&join(prefix, "proj"), f);
        self.dw_in.visit_params(&join(prefix, "dw_in"), f);
        self.kan.visit_params(&join(prefix, "kan"), f);
        self.koopman.visit_params(&join(prefix, "koopman"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.dw_out.visit_params(&join(prefix, "dw_out"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.proj.visit_params_mut(&join(prefix, "proj"), f);
        self.dw_in.visit_params_mut(&join(prefix, "dw_in"), f);
        self.kan.visit_params_mut(&join(prefix, "kan"), f);
        self.koopman.visit_params_mut(&join(prefix, "koopman"), f);
        self.attn.visit_params_mut(&join(prefix, "attn"), f);
        self.dw_out.visit_params_mut(&join(prefix, "dw_out"), f);
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
    }
}

/// `y = LayerNorm(x + DWConv3D(KAN(x)))` with the KAN and the norm applied
/// per voxel token.
#[derive(Clone, Debug)]
pub struct TokKan3d {
    pub channels: usize,
    pub kan: KanStack,
    pub dw: Conv,
    pub norm: LayerNorm,
}

pub struct TokKanCache {
    kan: Vec<Tensor>,
    k: Tensor,
    norm: LayerNormCache,
    spatial: Vec<usize>,
}

impl TokKan3d {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let c = channels;
        Ok(Self {
            channels: c,
            kan: KanStack::new(&[c, c, c], &SplineGrid::default(), rng)?,
            dw: Conv::depthwise(3, c, rng)?,
            norm: LayerNorm::new(c),
        })
    }
}

impl DiffOp for TokKan3d {
    type Cache = TokKanCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, TokKanCache)> {
        if x.rank() != 4 || x.dim(0) != self.channels {
            return Err(Error::mismatch("tok-kan input", &[self.channels, 0, 0, 0], x.shape()));
        }
        let spatial = x.shape()[1..].to_vec();
        let (kt, kan) = self.kan.forward(&channels_last(x))?;
        let k = channels_first(&kt, &spatial)?;
        let (c, _) = self.dw.forward(&k)?;
        let z = x.add(&c)?;
        let (yt, norm) = self.norm.forward(&channels_last(&z))?;
        Ok((channels_first(&yt, &spatial)?, TokKanCache { kan, k, norm, spatial }))
    }

    fn backward(&mut self, c: &TokKanCache, dy: &Tensor) -> Result<Tensor> {
        let dzt = self.norm.backward(&c.norm, &channels_last(dy))?;
        let dz = channels_first(&dzt, &c.spatial)?;
        let dk = self.dw.backward(&c.k, &dz)?;
        let dxt = self.kan.backward(&c.kan, &channels_last(&dk))?;
        let mut dx = channels_first(&dxt, &c.spatial)?;
        dx.add_assign(&dz)?;
        Ok(dx)
    }
}

impl Module for TokKan3d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.kan.visit_params(&join(prefix, "kan"), f);
        self.dw.visit_params(&join(prefix, "dw"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.kan.visit_params_mut(&join(prefix, "kan"), f);
        self.dw.visit_params_mut(&join(prefix, "dw"), f);
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
    }
}
