//! Training objective and image-quality metrics.
//!
//! All losses act on volumes in the native `[0, 255]` intensity domain. Each
//! loss comes with a `*_grad` variant returning the value together with its
//! gradient with respect to the prediction.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{mip_with_argmax, View};
use crate::nn::conv::ConvGeom;
use crate::nn::{Activation, Conv, DiffOp};
use crate::tensor::Tensor;
use crate::volume::{Image2D, Volume3D};

/// Default weight on the projection term. The term is a sum over about
/// 8k projection pixels, so at toy scale this puts it near 15% of the total
/// at initialization.
pub const DEFAULT_LAMBDA_PROJ: f64 = 2e-5;
/// Default weight on the perceptual term (near 7% at initialization).
pub const DEFAULT_LAMBDA_PERC: f64 = 1.0;
/// Seed of the frozen perceptual feature extractor.
pub const EXTRACTOR_SEED: u64 = 0x5eed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight on the MIP projection loss.
    pub proj: f64,
    /// Weight on the perceptual loss.
    pub perc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            proj: DEFAULT_LAMBDA_PROJ,
            perc: DEFAULT_LAMBDA_PERC,
        }
    }
}

impl LossWeights {
    pub fn new(proj: f64, perc: f64) -> Result<Self> {
        if !(proj >= 0.0 && perc >= 0.0) {
            return Err(Error::InvalidArgument(alloc::format!(
                "loss weights must be non-negative, got ({proj}, {perc})"
            )));
        }
        Ok(Self { proj, perc })
    }
}

fn check_pair(pred: &Volume3D, gt: &Volume3D) -> Result<()> {
    if pred.extents() != gt.extents() {
        return Err(Error::mismatch("prediction vs ground truth", &gt.extents(), &pred.extents()));
    }
    Ok(())
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::mismatch("metric inputs", &[b.len()], &[a.len()]));
    }
    if a.is_empty() {
        return Err(Error::Empty("metric input"));
    }
    Ok(())
}

/// Mean squared difference of two equally sized buffers.
pub fn mean_squared_error(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub fn mse_loss(pred: &Volume3D, gt: &Volume3D) -> Result<f64> {
    check_pair(pred, gt)?;
    mean_squared_error(pred.data(), gt.data())
}

pub fn mse_loss_grad(pred: &Volume3D, gt: &Volume3D) -> Result<(f64, Volume3D)> {
    let loss = mse_loss(pred, gt)?;
    let n = pred.len() as f64;
    let data = pred.data().iter().zip(gt.data()).map(|(p, g)| 2.0 * (p - g) / n).collect();
    Ok((loss, Volume3D::new(pred.extents(), data)?))
}

/// Sum over the three views of the summed squared MIP differences.
pub fn proj_loss(pred: &Volume3D, gt: &Volume3D) -> Result<f64> {
    Ok(proj_loss_grad(pred, gt)?.0)
}

/// The MIP backward routes each pixel's gradient to the voxel that attains
/// the maximum, lowest index first on ties.
pub fn proj_loss_grad(pred: &Volume3D, gt: &Volume3D) -> Result<(f64, Volume3D)> {
    check_pair(pred, gt)?;
    let mut loss = 0.0;
    let mut grad = Volume3D::zeros(pred.extents());
    for view in View::ALL {
        let (p, arg) = mip_with_argmax(pred, view);
        let (g, _) = mip_with_argmax(gt, view);
        for ((pv, gv), &at) in p.data().iter().zip(g.data()).zip(&arg) {
            let d = pv - gv;
            loss += d * d;
            grad.data_mut()[at] += 2.0 * d;
        }
    }
    Ok((loss, grad))
}

/// Frozen convolutional feature extractor standing in for a pretrained
/// backbone: four 3×3 layers `1→8→16→32→64`, stride 2 from the second layer
/// on, tanh activations, features taken after layers 2 and 4.
#[derive(Clone, Debug)]
pub struct PercExtractor {
    layers: Vec<Conv>,
    taps: Vec<usize>,
    input_scale: f64,
}

/// Per-layer pre-activations and inputs of one extractor pass.
pub struct ExtractorCache {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
}

impl PercExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [1, 8, 16, 32, 64];
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let stride = if i == 0 { 1 } else { 2 };
                let mut conv = Conv::new(2, w[0], w[1], ConvGeom::square(2, 3, stride), 1, true, &mut rng)
                    .expect("fixed layer shapes are valid");
                // unit-variance weights keep tanh out of its linear regime
                let gain = libm::sqrt(3.0);
                conv.weight.value.data_mut().iter_mut().for_each(|v| *v *= gain);
                conv
            })
            .collect();
        Self {
            layers,
            taps: vec![1, 3],
            input_scale: 1.0 / 255.0,
        }
    }

    /// Indices (0-based) of the layers whose activations are compared.
    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    /// Feature maps at the selected layers.
    pub fn features(&self, img: &Image2D) -> Result<Vec<Tensor>> {
        Ok(self.forward(img)?.0)
    }

    pub fn forward(&self, img: &Image2D) -> Result<(Vec<Tensor>, ExtractorCache)> {
        let mut x = img.to_tensor().map(|v| v * self.input_scale);
        let mut cache = ExtractorCache { inputs: Vec::new(), pre: Vec::new() };
        let mut feats = Vec::new();
        for (i, conv) in self.layers.iter().enumerate() {
            let (z, _) = conv.forward(&x)?;
            let y = z.map(libm::tanh);
            cache.inputs.push(x);
            cache.pre.push(z);
            if self.taps.contains(&i) {
                feats.push(y.clone());
            }
            x = y;
        }
        Ok((feats, cache))
    }

    /// Gradient with respect to the image for upstream gradients on the
    /// selected features; the extractor's own weights never accumulate.
    pub fn backward(&self, cache: &ExtractorCache, grads: &[Tensor]) -> Result<Image2D> {
        if grads.len() != self.taps.len() {
            return Err(Error::mismatch("feature gradients", &[self.taps.len()], &[grads.len()]));
        }
        let mut g: Option<Tensor> = None;
        for i in (0..self.layers.len()).rev() {
            if let Some(t) = self.taps.iter().position(|&l| l == i) {
                g = Some(match g {
                    Some(acc) => acc.add(&grads[t])?,
                    None => grads[t].clone(),
                });
            }
            let Some(dy) = g.take() else { continue };
            let dz = cache.pre[i].zip_map(&dy, |z, d| Activation::Tanh.derivative(z) * d)?;
            g = Some(self.layers[i].input_grad(&cache.inputs[i], &dz)?);
        }
        let dx = g.expect("at least one tap");
        let shape = dx.shape().to_vec();
        Image2D::new(shape[1], shape[2], dx.map(|v| v * self.input_scale).into_data())
    }
}

impl Default for PercExtractor {
    fn default() -> Self {
        Self::new(EXTRACTOR_SEED)
    }
}

/// Squared feature distance between two images, summed over selected layers.
pub fn feature_distance(a: &Image2D, b: &Image2D, ext: &PercExtractor) -> Result<f64> {
    let (fa, fb) = (ext.features(a)?, ext.features(b)?);
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let d = x.sub(y)?;
        total += d.dot(&d)?;
    }
    Ok(total)
}

/// Feature-space distance between the MIP views of prediction and truth.
pub fn perc_loss(pred: &Volume3D, gt: &Volume3D, ext: &PercExtractor) -> Result<f64> {
    check_pair(pred, gt)?;
    View::ALL.iter().try_fold(0.0, |acc, &view| {
        Ok(acc + feature_distance(&mip_with_argmax(pred, view).0, &mip_with_argmax(gt, view).0, ext)?)
    })
}

pub fn perc_loss_grad(pred: &Volume3D, gt: &Volume3D, ext: &PercExtractor) -> Result<(f64, Volume3D)> {
    check_pair(pred, gt)?;
    let mut loss = 0.0;
    let mut grad = Volume3D::zeros(pred.extents());
    for view in View::ALL {
        let (p, arg) = mip_with_argmax(pred, view);
        let g = mip_with_argmax(gt, view).0;
        let (fp, cache) = ext.forward(&p)?;
        let fg = ext.features(&g)?;
        let mut dfeat = Vec::with_capacity(fp.len());
        for (x, y) in fp.iter().zip(&fg) {
            let d = x.sub(y)?;
            loss += d.dot(&d)?;
            dfeat.push(d.scale(2.0));
        }
        let dimg = ext.backward(&cache, &dfeat)?;
        for (&d, &at) in dimg.data().iter().zip(&arg) {
            grad.data_mut()[at] += d;
        }
    }
    Ok((loss, grad))
}

/// Individual terms of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub mse: f64,
    pub proj: f64,
    pub perc: f64,
    pub total: f64,
}

impl LossTerms {
    fn combine(mse: f64, proj: f64, perc: f64, w: &LossWeights) -> Self {
        Self {
            mse,
            proj,
            perc,
            total: mse + w.proj * proj + w.perc * perc,
        }
    }
}

pub fn total_loss(pred: &Volume3D, gt: &Volume3D, w: &LossWeights, ext: &PercExtractor) -> Result<LossTerms> {
    let mse = mse_loss(pred, gt)?;
    let proj = proj_loss(pred, gt)?;
    let perc = if w.perc == 0.0 { 0.0 } else { perc_loss(pred, gt, ext)? };
    Ok(LossTerms::combine(mse, proj, perc, w))
}

pub fn total_loss_grad(
    pred: &Volume3D,
    gt: &Volume3D,
    w: &LossWeights,
    ext: &PercExtractor,
) -> Result<(LossTerms, Volume3D)> {
    let (mse, mut grad) = mse_loss_grad(pred, gt)?;
    let (proj, gp) = proj_loss_grad(pred, gt)?;
    for (g, d) in grad.data_mut().iter_mut().zip(gp.data()) {
        *g += w.proj * d;
    }
    let perc = if w.perc == 0.0 {
        0.0
    } else {
        let (perc, gq) = perc_loss_grad(pred, gt, ext)?;
        for (g, d) in grad.data_mut().iter_mut().zip(gq.data()) {
            *g += w.perc * d;
        }
        perc
    };
    Ok((LossTerms::combine(mse, proj, perc, w), grad))
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical inputs.
pub fn psnr(pred: &[f64], gt: &[f64], peak: f64) -> Result<f64> {
    let mse = mean_squared_error(pred, gt)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * libm::log10(peak * peak / mse))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 8,
            c1: (0.01 * 255.0) * (0.01 * 255.0),
            c2: (0.03 * 255.0) * (0.03 * 255.0),
        }
    }
}

/// Mean SSIM over non-overlapping `window × window` tiles; trailing rows and
/// columns that do not fill a whole tile are ignored.
pub fn ssim(pred: &Image2D, gt: &Image2D, p: &SsimParams) -> Result<f64> {
    if (pred.rows(), pred.cols()) != (gt.rows(), gt.cols()) {
        return Err(Error::mismatch("ssim inputs", &[gt.rows(), gt.cols()], &[pred.rows(), pred.cols()]));
    }
    let w = p.window;
    if w == 0 || pred.rows() < w || pred.cols() < w {
        return Err(Error::InvalidShape(alloc::format!(
            "image {}x{} smaller than the {w}x{w} window",
            pred.rows(),
            pred.cols()
        )));
    }
    let n = (w * w) as f64;
    let (tr, tc) = (pred.rows() / w, pred.cols() / w);
    let mut total = 0.0;
    for br in 0..tr {
        for bc in 0..tc {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in br * w..(br + 1) * w {
                for c in bc * w..(bc + 1) * w {
                    let (x, y) = (pred.get(r, c), gt.get(r, c));
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    syy += y * y;
                    sxy += x * y;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cov = sxy / n - mx * my;
            total += ((2.0 * mx * my + p.c1) * (2.0 * cov + p.c2))
                / ((mx * mx + my * my + p.c1) * (vx + vy + p.c2));
        }
    }
    Ok(total / (tr * tc) as f64)
}

/// Horizontal slice `h` of a volume as a `W × D` image.
pub fn axial_slice(v: &Volume3D, h: usize) -> Image2D {
    let [_, nw, nd] = v.extents();
    let start = h * nw * nd;
    Image2D::new(nw, nd, v.data()[start..start + nw * nd].to_vec()).expect("slice extents")
}

/// Mean of [`ssim`] over the horizontal slices of two volumes.
pub fn volume_ssim(pred: &Volume3D, gt: &Volume3D, p: &SsimParams) -> Result<f64> {
    check_pair(pred, gt)?;
    let nh = pred.extents()[0];
    if nh == 0 {
        return Err(Error::Empty("volume"));
    }
    let mut total = 0.0;
    for h in 0..nh {
        total += ssim(&axial_slice(pred, h), &axial_slice(gt, h), p)?;
    }
    Ok(total / nh as f64)
}
