//! Checkpoint diagnostics: Koopman spectra, the finite-difference gradient
//! suite and axial-attention operation counts.

use std::path::Path;

use kukan_core::attention::AxialAttention;
use kukan_core::gradcheck::suite::{run_suite, SuiteConfig};
use kukan_core::gradcheck::GradCheckReport;
use kukan_core::model::Pipeline;
use kukan_core::nn::DiffOp;
use kukan_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{self, HarnessError, Result};

/// `block,channel,abs_lambda,theta` for every token block of the lifting
/// network.
pub fn spectrum_csv(p: &Pipeline) -> String {
    let mut s = String::from("block,channel,abs_lambda,theta\n");
    for (b, block) in p.lift.net.bottleneck.0.iter().enumerate() {
        for (c, e) in block.koopman.spectrum().iter().enumerate() {
            s.push_str(&format!("{b},{c},{},{}\n", e.modulus, e.phase));
        }
    }
    s
}

pub fn spectrum_moduli(p: &Pipeline) -> Vec<f64> {
    p.lift
        .net
        .bottleneck
        .0
        .iter()
        .flat_map(|b| b.koopman.spectrum().into_iter().map(|e| e.modulus))
        .collect()
}

pub fn grad_check_csv(reports: &[GradCheckReport]) -> String {
    let mut s = String::from("operation,trials,discarded,max_rel_error,tolerance,passed\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.name,
            r.trials,
            r.discarded,
            r.max_rel_error,
            r.tolerance,
            r.passed()
        ));
    }
    s
}

/// Core attention work for one input size. Every multiply-accumulate is
/// one multiply and one add.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpCount {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub multiplies: u64,
    pub adds: u64,
}

impl OpCount {
    /// `H·W·C·(H + W)`.
    pub fn predicted(&self) -> u64 {
        (self.height * self.width * self.channels * (self.height + self.width)) as u64
    }
}

pub fn attention_op_counts(attn: &AxialAttention, sizes: &[(usize, usize)], seed: u64) -> Result<Vec<OpCount>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = attn.mha_w.dim;
    sizes
        .iter()
        .map(|&(h, w)| {
            let x = Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0));
            let (_, cache) = attn.forward(&x)?;
            let (mw, mh) = cache.core_macs();
            Ok(OpCount { height: h, width: w, channels: c, multiplies: mw + mh, adds: mw + mh })
        })
        .collect()
}

/// Least-squares slope of `log(multiplies)` against `log(predicted)`.
pub fn loglog_slope(counts: &[OpCount]) -> f64 {
    let pts: Vec<(f64, f64)> = counts
        .iter()
        .map(|c| ((c.predicted() as f64).ln(), (c.multiplies as f64).ln()))
        .collect();
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn op_counts_csv(counts: &[OpCount]) -> String {
    let mut s = String::from("module,height,width,channels,hwc_h_plus_w,multiplies,adds\n");
    for c in counts {
        s.push_str(&format!(
            "axial_attention,{},{},{},{},{},{}\n",
            c.height,
            c.width,
            c.channels,
            c.predicted(),
            c.multiplies,
            c.adds
        ));
    }
    s
}

pub const OP_COUNT_SIZES: [(usize, usize); 3] = [(8, 16), (16, 32), (32, 64)];

#[derive(Clone, Debug)]
pub struct DiagReport {
    pub moduli: Vec<f64>,
    pub grad_checks: Vec<GradCheckReport>,
    pub op_counts: Vec<OpCount>,
    pub slope: f64,
}

impl DiagReport {
    pub fn spectrum_in_unit_interval(&self) -> bool {
        self.moduli.iter().all(|&m| m > 0.0 && m < 1.0)
    }

    pub fn max_grad_error(&self) -> f64 {
        self.grad_checks.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn grads_pass(&self) -> bool {
        self.grad_checks.iter().all(|r| r.passed())
    }

    pub fn summary_text(&self) -> String {
        let (lo, hi) = self
            .moduli
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &m| (lo.min(m), hi.max(m)));
        format!(
            "min_abs_lambda = {lo}\nmax_abs_lambda = {hi}\ngrad_max_rel_error = {}\ngrad_all_passed = {}\nattention_loglog_slope = {}\n",
            self.max_grad_error(),
            self.grads_pass(),
            self.slope
        )
    }
}

/// Runs every diagnostic for the checkpoint at `ckpt`, writing
/// `spectrum.csv`, `grad_check.csv`, `op_counts.csv` and `diag.txt`.
pub fn run(ckpt: &Path, out: &Path, suite: &SuiteConfig) -> Result<DiagReport> {
    let p = Checkpoint::load(ckpt)?.restore()?;
    error::create_dir(out)?;
    let attn = &p
        .lift
        .net
        .bottleneck
        .0
        .first()
        .ok_or_else(|| HarnessError::Config("lifting network has no token blocks".into()))?
        .attn;
    let op_counts = attention_op_counts(attn, &OP_COUNT_SIZES, suite.seed)?;
    let report = DiagReport {
        moduli: spectrum_moduli(&p),
        grad_checks: run_suite(suite, None)?,
        slope: loglog_slope(&op_counts),
        op_counts,
    };
    error::write(&out.join("spectrum.csv"), spectrum_csv(&p))?;
    error::write(&out.join("grad_check.csv"), grad_check_csv(&report.grad_checks))?;
    error::write(&out.join("op_counts.csv"), op_counts_csv(&report.op_counts))?;
    error::write(&out.join("diag.txt"), report.summary_text())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_proportionality_has_unit_slope() {
        let counts: Vec<OpCount> = [(2, 3), (4, 6), (9, 5)]
            .iter()
            .map(|&(h, w)| {
                let m = 2 * (h * w * 4 * (h + w)) as u64;
                OpCount { height: h, width: w, channels: 4, multiplies: m, adds: m }
            })
            .collect();
        assert!((loglog_slope(&counts) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_counts_match_the_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attn = AxialAttention::new(8, 4, &mut rng).unwrap();
        for c in attention_op_counts(&attn, &[(3, 5), (4, 4)], 2).unwrap() {
            assert_eq!(c.multiplies, 2 * c.predicted());
        }
    }
}
