//! Intensity normalization: percentile clipping, z-scoring and linear
//! rescaling onto `[0, 255]`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::volume::{Image2D, Volume3D};

pub const CLIP_LOW: f64 = 1.0;
pub const CLIP_HIGH: f64 = 99.9;
const DEGENERATE_STD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntensityStats {
    pub p_low: f64,
    pub p_high: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl IntensityStats {
    pub fn compute(values: &[f64], low: f64, high: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("intensity statistics"));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let (mean, std) = mean_std(values);
        Ok(Self {
            p_low: percentile_sorted(&sorted, low),
            p_high: percentile_sorted(&sorted, high),
            mean,
            std,
        })
    }
}

/// Percentile `p ∈ [0, 100]` of ascending `sorted` by linear interpolation
/// between closest ranks (rank `p/100 · (n − 1)`).
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = libm::floor(rank) as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

pub fn clip_values(values: &[f64], low: f64, high: f64) -> Result<Vec<f64>> {
    let stats = IntensityStats::compute(values, low, high)?;
    Ok(values.iter().map(|v| v.clamp(stats.p_low, stats.p_high)).collect())
}

pub fn zscore_values(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("zscore"));
    }
    let (mean, std) = mean_std(values);
    if std < DEGENERATE_STD {
        return Ok(alloc::vec![0.0; values.len()]);
    }
    Ok(values.iter().map(|v| (v - mean) / std).collect())
}

pub fn rescale_values(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("rescale"));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo <= 0.0 {
        return Ok(alloc::vec![0.0; values.len()]);
    }
    let scale = 255.0 / (hi - lo);
    Ok(values
        .iter()
        .map(|v| ((v - lo) * scale).clamp(0.0, 255.0))
        .collect())
}

/// Clip → z-score → rescale.
pub fn normalize_values(values: &[f64]) -> Result<Vec<f64>> {
    let clipped = clip_values(values, CLIP_LOW, CLIP_HIGH)?;
    rescale_values(&zscore_values(&clipped)?)
}

pub fn percentile_clip(v: &Volume3D, low: f64, high: f64) -> Result<Volume3D> {
    Volume3D::new(v.extents(), clip_values(v.data(), low, high)?)
}

pub fn zscore(v: &Volume3D) -> Result<Volume3D> {
    Volume3D::new(v.extents(), zscore_values(v.data())?)
}

pub fn rescale_255(v: &Volume3D) -> Result<Volume3D> {
    Volume3D::new(v.extents(), rescale_values(v.data())?)
}

pub fn normalize_volume(v: &Volume3D) -> Result<Volume3D> {
    Volume3D::new(v.extents(), normalize_values(v.data())?)
}

pub fn normalize_image(img: &Image2D) -> Result<Image2D> {
    Image2D::new(img.rows(), img.cols(), normalize_values(img.data())?)
}
