//! The lifting network, the volumetric refiner and the end-to-end pipeline
//! `image → depth field → seed volume → refined volume`.

pub mod blocks;
pub mod token;

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::attention::DEFAULT_HEADS;
use crate::error::{Error, Result};
use crate::geometry::{build_mask, scatter, scatter_backward, Mask, WarpTable};
use crate::koopman::DEFAULT_RHO;
use crate::nn::{join, Activation, Chain, DiffOp, Module, Param};
use crate::volume::{DepthField, Image2D, Volume3D};

use blocks::{UNet, UNetCache, UNetShape};
use token::{TokKan3d, TokKanCache, TokenBlock2d, TokenBlockCache};

#[derive(Clone, Debug, PartialEq)]
pub struct LiftConfig {
    pub height: usize,
    pub width: usize,
    pub bins: usize,
    pub widths: Vec<usize>,
    pub token_dim: usize,
    pub token_blocks: usize,
    pub heads: usize,
    pub rho: f64,
    pub convs_per_stage: usize,
}

impl LiftConfig {
    pub fn toy() -> Self {
        Self {
            height: 32,
            width: 64,
            bins: 12,
            widths: vec![8, 16],
            token_dim: 32,
            token_blocks: 2,
            heads: DEFAULT_HEADS,
            rho: DEFAULT_RHO,
            convs_per_stage: 2,
        }
    }

    pub fn paper() -> Self {
        Self {
            height: 128,
            width: 256,
            bins: 96,
            widths: vec![32, 64, 128],
            token_dim: 256,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = 1usize << self.widths.len();
        if self.widths.is_empty() || self.height % f != 0 || self.width % f != 0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "image {}x{} must be divisible by {f} for {} stages",
                self.height,
                self.width,
                self.widths.len()
            )));
        }
        if self.bins == 0 || !(1..=4).contains(&self.token_blocks) {
            return Err(Error::InvalidArgument("need K >= 1 and 1-4 token blocks".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinerConfig {
    pub extents: [usize; 3],
    pub widths: Vec<usize>,
    pub bottleneck: usize,
    pub tok_blocks: usize,
    pub convs_per_stage: usize,
}

impl RefinerConfig {
    pub fn toy() -> Self {
        Self {
            extents: [32, 64, 64],
            widths: vec![2, 4],
            bottleneck: 8,
            tok_blocks: 1,
            convs_per_stage: 1,
        }
    }

    pub fn paper() -> Self {
        Self {
            extents: [128, 256, 256],
            widths: vec![32, 64, 128, 256],
            bottleneck: 512,
            tok_blocks: 1,
            convs_per_stage: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = 1usize << self.widths.len();
        if self.widths.is_empty() || self.extents.iter().any(|&e| e == 0 || e % f != 0) {
            return Err(Error::InvalidArgument(alloc::format!(
                "volume {:?} must be divisible by {f} for {} stages",
                self.extents,
                self.widths.len()
            )));
        }
        if !(1..=2).contains(&self.tok_blocks) {
            return Err(Error::InvalidArgument("refiner takes 1 or 2 tok-kan blocks".into()));
        }
        Ok(())
    }
}

/// 2D encoder/decoder predicting `K` depth bins per pixel in `(0, 255)`.
#[derive(Clone, Debug)]
pub struct Lift {
    pub config: LiftConfig,
    pub net: UNet<Chain<TokenBlock2d>>,
}

impl Lift {
    pub fn new(config: LiftConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.token_blocks)
            .map(|_| TokenBlock2d::new(config.token_dim, config.heads, config.rho, rng))
            .collect::<Result<Vec<_>>>()?;
        let shape = UNetShape {
            rank: 2,
            in_ch: 1,
            out_ch: config.bins,
            widths: config.widths.clone(),
            bottleneck: config.token_dim,
            convs_per_stage: config.convs_per_stage,
            head_kernel: 1,
            act: Activation::Relu,
        };
        let net = UNet::new(&shape, Chain(blocks), 1.0 / 255.0, 1.0, rng)?;
        Ok(Self { config, net })
    }

    pub fn forward(&self, img: &Image2D) -> Result<(DepthField, UNetCache<Vec<TokenBlockCache>>)> {
        if (img.rows(), img.cols()) != (self.config.height, self.config.width) {
            return Err(Error::mismatch(
                "panoramic image",
                &[self.config.height, self.config.width],
                &[img.rows(), img.cols()],
            ));
        }
        let (y, cache) = self.net.forward(&img.to_tensor())?;
        Ok((DepthField::from_tensor(y)?, cache))
    }

    pub fn backward(&mut self, cache: &UNetCache<Vec<TokenBlockCache>>, grad: &DepthField) -> Result<()> {
        self.net.backward(cache, &grad.to_tensor())?;
        Ok(())
    }
}

pub fn lift_forward(img: &Image2D, lift: &Lift) -> Result<DepthField> {
    Ok(lift.forward(img)?.0)
}

impl Module for Lift {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.net.visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.net.visit_params_mut(prefix, f);
    }
}

/// 3D encoder/decoder with a tokenized-KAN bottleneck; output in `(0, 255)`.
#[derive(Clone, Debug)]
pub struct Refiner {
    pub config: RefinerConfig,
    pub net: UNet<Chain<TokKan3d>>,
}

pub type RefinerCache = UNetCache<Vec<TokKanCache>>;

impl Refiner {
    pub fn new(config: RefinerConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.tok_blocks)
            .map(|_| TokKan3d::new(config.bottleneck, rng))
            .collect::<Result<Vec<_>>>()?;
        let shape = UNetShape {
            rank: 3,
            in_ch: 1,
            out_ch: 1,
            widths: config.widths.clone(),
            bottleneck: config.bottleneck,
            convs_per_stage: config.convs_per_stage,
            head_kernel: 3,
            act: Activation::Silu,
        };
        let net = UNet::new(&shape, Chain(blocks), 1.0 / 255.0, 0.5, rng)?;
        Ok(Self { config, net })
    }

    pub fn forward(&self, v: &Volume3D) -> Result<(Volume3D, RefinerCache)> {
        if v.extents() != self.config.extents {
            return Err(Error::mismatch("refiner input", &self.config.extents, &v.extents()));
        }
        let (y, cache) = self.net.forward(&v.to_tensor())?;
        Ok((Volume3D::from_tensor(y)?, cache))
    }

    pub fn backward(&mut self, cache: &RefinerCache, grad: &Volume3D) -> Result<Volume3D> {
        Volume3D::from_tensor(self.net.backward(cache, &grad.to_tensor())?)
    }
}

pub fn refine_forward(v: &Volume3D, refiner: &Refiner) -> Result<Volume3D> {
    Ok(refiner.forward(v)?.0)
}

impl Module for Refiner {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.net.visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.net.visit_params_mut(prefix, f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub depth: DepthField,
    pub seed: Volume3D,
    pub seed_masked: Volume3D,
    pub volume: Volume3D,
}

pub struct PipelineCache {
    lift: UNetCache<Vec<TokenBlockCache>>,
    refine: RefinerCache,
}

/// Lifting network, inverse warp, trough mask and refiner.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub lift: Lift,
    pub refiner: Refiner,
    pub table: WarpTable,
    pub mask: Mask,
}

impl Pipeline {
    pub fn new(lift: Lift, refiner: Refiner, table: WarpTable) -> Result<Self> {
        let (lc, rc) = (&lift.config, &refiner.config);
        if table.columns() != lc.width || table.bins() != lc.bins {
            return Err(Error::mismatch(
                "warp table vs lifting network",
                &[lc.width, lc.bins],
                &[table.columns(), table.bins()],
            ));
        }
        if table.extents() != rc.extents || rc.extents[0] != lc.height {
            return Err(Error::mismatch("warp table vs refiner", &rc.extents, &table.extents()));
        }
        let mask = build_mask(&table);
        Ok(Self { lift, refiner, table, mask })
    }

    pub fn forward(&self, img: &Image2D) -> Result<(PipelineOutput, PipelineCache)> {
        let (depth, lift) = self.lift.forward(img).map_err(|e| e.in_stage("lift"))?;
        let seed = scatter(&depth, &self.table).map_err(|e| e.in_stage("scatter"))?;
        let seed_masked = self.mask.apply(&seed).map_err(|e| e.in_stage("mask"))?;
        let (volume, refine) = self.refiner.forward(&seed_masked).map_err(|e| e.in_stage("refine"))?;
        Ok((PipelineOutput { depth, seed, seed_masked, volume }, PipelineCache { lift, refine }))
    }

    /// Accumulates parameter gradients for an upstream gradient on the
    /// refined volume.
    pub fn backward(&mut self, cache: &PipelineCache, grad: &Volume3D) -> Result<()> {
        let g = self.refiner.backward(&cache.refine, grad).map_err(|e| e.in_stage("refine"))?;
        let g = self.mask.apply(&g).map_err(|e| e.in_stage("mask"))?;
        let gf = scatter_backward(&g, &self.table).map_err(|e| e.in_stage("scatter"))?;
        self.lift.backward(&cache.lift, &gf).map_err(|e| e.in_stage("lift"))
    }
}

pub fn pipeline(img: &Image2D, p: &Pipeline) -> Result<PipelineOutput> {
    Ok(p.forward(img)?.0)
}

impl Module for Pipeline {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.lift.visit_params(&join(prefix, "lift"), f);
        self.refiner.visit_params(&join(prefix, "refiner"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.lift.visit_params_mut(&join(prefix, "lift"), f);
        self.refiner.visit_params_mut(&join(prefix, "refiner"), f);
    }
}
