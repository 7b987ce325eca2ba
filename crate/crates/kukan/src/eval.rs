//! Per-sample PSNR, SSIM and perceptual distance, plus MIP exports.

use std::path::Path;

use kukan_core::geometry::{mip, View};
use kukan_core::loss::{perc_loss, psnr, volume_ssim, PercExtractor, SsimParams};
use kukan_core::model::Pipeline;
use kukan_core::volume::Volume3D;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::container::{save_image, Dtype};
use crate::dataset::{Dataset, Sample, Split};
use crate::error::{self, HarnessError, Result};

pub const PEAK: f64 = 255.0;
pub const METRICS_HEADER: &str = "sample_id,psnr_db,ssim,perc_dist";

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub perc_dist: f64,
}

impl SampleMetrics {
    pub fn values(&self) -> [f64; 3] {
        [self.psnr_db, self.ssim, self.perc_dist]
    }
}

/// Column means and population standard deviations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub fn score(id: &str, pred: &Volume3D, gt: &Volume3D, ext: &PercExtractor) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        id: id.to_string(),
        psnr_db: psnr(pred.data(), gt.data(), PEAK)?,
        ssim: volume_ssim(pred, gt, &SsimParams::default())?,
        perc_dist: perc_loss(pred, gt, ext)?,
    })
}

pub fn aggregate(rows: &[SampleMetrics]) -> Aggregate {
    let n = rows.len() as f64;
    let mut mean = [0.0; 3];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.values()) {
            *m += v / n;
        }
    }
    let mut std = [0.0; 3];
    for (j, s) in std.iter_mut().enumerate() {
        // an infinite column has no spread to report
        *s = if mean[j].is_infinite() {
            f64::NAN
        } else {
            (rows.iter().map(|r| (r.values()[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt()
        };
    }
    Aggregate { mean, std }
}

/// Per-sample rows followed by `mean` and `std` rows. Infinite PSNR is
/// written as `inf`.
pub fn metrics_csv(rows: &[SampleMetrics], agg: &Aggregate) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.id, r.psnr_db, r.ssim, r.perc_dist));
    }
    for (label, v) in [("mean", agg.mean), ("std", agg.std)] {
        s.push_str(&format!("{label},{},{},{}\n", v[0], v[1], v[2]));
    }
    s
}

/// Parses the per-sample rows of a metrics file, skipping the aggregates.
pub fn read_metrics(path: &Path) -> Result<(Vec<SampleMetrics>, Aggregate)> {
    let text = error::read_text(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(HarnessError::format(path, "unexpected metrics header"));
    }
    let mut rows = Vec::new();
    let mut agg = Aggregate { mean: [f64::NAN; 3], std: [f64::NAN; 3] };
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(HarnessError::format(path, format!("bad metrics row {line:?}")));
        }
        let mut v = [0.0; 3];
        for (slot, text) in v.iter_mut().zip(&f[1..]) {
            *slot = text.parse().map_err(|_| HarnessError::format(path, format!("bad value {text:?}")))?;
        }
        match f[0] {
            "mean" => agg.mean = v,
            "std" => agg.std = v,
            id => rows.push(SampleMetrics { id: id.to_string(), psnr_db: v[0], ssim: v[1], perc_dist: v[2] }),
        }
    }
    Ok((rows, agg))
}

fn export_mips(dir: &Path, id: &str, pred: &Volume3D, gt: &Volume3D) -> Result<()> {
    for view in View::ALL {
        for (tag, v) in [("pred", pred), ("gt", gt)] {
            save_image(&dir.join(format!("{id}_{}_{tag}.kvol", view.name())), &mip(v, view), Dtype::F32)?;
        }
    }
    Ok(())
}

/// Scores `predict` on every sample of `split` in parallel. With `out`,
/// writes `metrics.csv` and the MIP containers under `out/mips`.
pub fn evaluate_with<F>(data: &Dataset, split: Split, out: Option<&Path>, predict: F) -> Result<(Vec<SampleMetrics>, Aggregate)>
where
    F: Fn(&Sample) -> Result<Volume3D> + Sync,
{
    let entries = data.split(split);
    if entries.is_empty() {
        return Err(HarnessError::Config(format!("split {} is empty", split.name())));
    }
    let mips = out.map(|o| o.join("mips"));
    if let Some(m) = &mips {
        error::create_dir(m)?;
    }
    let ext = PercExtractor::default();
    let rows = entries
        .par_iter()
        .map(|e| {
            let s = data.load(e)?;
            let pred = predict(&s)?;
            if let Some(m) = &mips {
                export_mips(m, &s.id, &pred, &s.volume)?;
            }
            score(&s.id, &pred, &s.volume, &ext)
        })
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate(&rows);
    if let Some(o) = out {
        error::write(&o.join("metrics.csv"), metrics_csv(&rows, &agg))?;
    }
    Ok((rows, agg))
}

pub fn evaluate_pipeline(p: &Pipeline, data: &Dataset, split: Split, out: Option<&Path>) -> Result<(Vec<SampleMetrics>, Aggregate)> {
    evaluate_with(data, split, out, |s| Ok(p.forward(&s.px)?.0.volume))
}

pub fn evaluate_checkpoint(ckpt: &Path, data: &Dataset, split: Split, out: Option<&Path>) -> Result<(Vec<SampleMetrics>, Aggregate)> {
    let c = Checkpoint::load(ckpt)?;
    if c.geometry != data.geometry || c.scale != data.scale {
        return Err(HarnessError::Config(format!(
            "{} was trained on a different geometry or scale than {}",
            ckpt.display(),
            data.dir.display()
        )));
    }
    evaluate_pipeline(&c.restore()?, data, split, out)
}
