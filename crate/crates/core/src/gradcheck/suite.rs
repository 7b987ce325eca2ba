//! Randomized finite-difference checks of every differentiable operation.
//!
//! Each trial draws fresh parameters and inputs, contracts the output with a
//! random cotangent `r`, and compares the backward pass for `<r, op(x)>`
//! against central differences on a random subset of input and parameter
//! coordinates.

use alloc::boxed::Box;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{flat_grads, flat_params, numeric_gradient, relative_error, set_flat_params, GradCheckReport};
use crate::attention::{AttentionGate, AxialAttention, Mha};
use crate::error::Result;
use crate::geometry::{build_warp_table, scatter, scatter_backward, TroughGeometry, WarpTable};
use crate::kan::{KanLayer, KanStack, SplineGrid};
use crate::koopman::KoopmanBlock;
use crate::loss::{mse_loss_grad, perc_loss_grad, proj_loss_grad, total_loss_grad, LossWeights, PercExtractor};
use crate::model::blocks::{ConvNormAct, UpLevel, UpLevelCache};
use crate::model::token::{TokKan3d, TokenBlock2d};
use crate::model::{Refiner, RefinerConfig};
use crate::nn::{Activation, Conv, ConvTranspose, DiffOp, GroupNorm, LayerNorm, Linear, Module, Param};
use crate::tensor::Tensor;
use crate::volume::{DepthField, Volume3D};

/// Settings shared by every check in the suite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteConfig {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Input and parameter coordinates probed per trial (each).
    pub coords: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            step: super::DEFAULT_STEP,
            tolerance: super::DEFAULT_TOLERANCE,
            coords: 6,
        }
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Adds `U(-s, s)` noise to every parameter so that zero-initialized gates
/// and unit affines are exercised away from their special values.
pub fn perturb_params(module: &mut dyn Module, s: f64, rng: &mut ChaCha8Rng) {
    module.visit_params_mut("", &mut |_, p| {
        p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-s..s));
    });
}

fn pick(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    rand::seq::index::sample(rng, n, k).into_vec()
}

/// Analytic and numeric values at the probed coordinates of one trial.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialDetail {
    pub input_coords: Vec<usize>,
    pub input_analytic: Vec<f64>,
    pub input_numeric: Vec<f64>,
    pub param_coords: Vec<usize>,
    pub param_analytic: Vec<f64>,
    pub param_numeric: Vec<f64>,
    /// False when differences at `h` and `h/2` disagree, i.e. the stencil
    /// crossed a non-differentiable point such as a ReLU kink.
    pub smooth: bool,
}

impl TrialDetail {
    /// The worse of the input-gradient and parameter-gradient comparisons.
    pub fn rel_error(&self) -> f64 {
        let a = relative_error(&self.input_analytic, &self.input_numeric);
        let b = relative_error(&self.param_analytic, &self.param_numeric);
        if a.is_nan() || b.is_nan() {
            f64::NAN
        } else {
            a.max(b)
        }
    }
}

pub fn check_op_detail<T>(op: &T, x: &Tensor, cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<TrialDetail>
where
    T: DiffOp + Module + Clone,
{
    let mut work = op.clone();
    work.zero_grad();
    let (y, cache) = work.forward(x)?;
    let r = uniform(y.shape(), -1.0, 1.0, rng);
    let dx = work.backward(&cache, &r)?;
    let dp = flat_grads(&work);

    let mut out = TrialDetail::default();
    let shape = x.shape().to_vec();
    out.input_coords = pick(x.len(), cfg.coords, rng);
    let mut fx = |v: &[f64]| -> f64 {
        let t = Tensor::new(&shape, v.to_vec()).expect("probe shape");
        op.forward(&t).map(|(y, _)| y.dot(&r).unwrap_or(f64::NAN)).unwrap_or(f64::NAN)
    };
    out.input_numeric = numeric_gradient(&mut fx, x.data(), &out.input_coords, cfg.step);
    out.input_analytic = out.input_coords.iter().map(|&i| dx.data()[i]).collect();
    let half = numeric_gradient(&mut fx, x.data(), &out.input_coords, cfg.step / 2.0);
    out.smooth = consistent(&out.input_numeric, &half, &out.input_analytic, cfg.tolerance);

    let p0 = flat_params(op);
    if !p0.is_empty() {
        out.param_coords = pick(p0.len(), cfg.coords, rng);
        let mut probe = op.clone();
        let mut fp = |v: &[f64]| -> f64 {
            set_flat_params(&mut probe, v);
            probe.forward(x).map(|(y, _)| y.dot(&r).unwrap_or(f64::NAN)).unwrap_or(f64::NAN)
        };
        out.param_numeric = numeric_gradient(&mut fp, &p0, &out.param_coords, cfg.step);
        out.param_analytic = out.param_coords.iter().map(|&i| dp[i]).collect();
        let half = numeric_gradient(&mut fp, &p0, &out.param_coords, cfg.step / 2.0);
        out.smooth &= consistent(&out.param_numeric, &half, &out.param_analytic, cfg.tolerance);
    }
    Ok(out)
}

/// Whether two difference estimates agree to a quarter of the tolerance,
/// relative to the larger of the numeric and analytic magnitudes.
fn consistent(full: &[f64], half: &[f64], analytic: &[f64], tolerance: f64) -> bool {
    let scale = full.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs()));
    full.iter().zip(half).all(|(a, b)| (a - b).abs() <= 0.25 * tolerance * scale.max(1e-12))
}

/// Relative error of one trial, see [`TrialDetail::rel_error`];
/// `f64::INFINITY` marks a trial whose stencil was not smooth.
pub fn check_op<T>(op: &T, x: &Tensor, cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<f64>
where
    T: DiffOp + Module + Clone,
{
    let d = check_op_detail(op, x, cfg, rng)?;
    Ok(if d.smooth { d.rel_error() } else { f64::INFINITY })
}

/// Attention gate seen as a single-input op on `concat(skip, context)`.
#[derive(Clone)]
struct GateProbe {
    gate: AttentionGate,
    split: [usize; 2],
}

impl DiffOp for GateProbe {
    type Cache = crate::attention::GateCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Self::Cache)> {
        let parts = x.split0(&self.split)?;
        self.gate.forward(&parts[0], &parts[1])
    }

    fn backward(&mut self, cache: &Self::Cache, dy: &Tensor) -> Result<Tensor> {
        let (ds, dc) = self.gate.backward(cache, dy)?;
        Tensor::concat0(&[&ds, &dc])
    }
}

impl Module for GateProbe {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.gate.visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.gate.visit_params_mut(prefix, f);
    }
}

/// Decoder level seen as a single-input op on the flattened pair
/// `(deep features, skip)`.
#[derive(Clone)]
struct UpProbe {
    level: UpLevel,
    deep: Vec<usize>,
    skip: Vec<usize>,
}

impl UpProbe {
    fn parts(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let n: usize = self.deep.iter().product();
        let (a, b) = x.data().split_at(n);
        Ok((Tensor::new(&self.deep, a.to_vec())?, Tensor::new(&self.skip, b.to_vec())?))
    }
}

impl DiffOp for UpProbe {
    type Cache = UpLevelCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Self::Cache)> {
        let (deep, skip) = self.parts(x)?;
        self.level.forward(&deep, &skip)
    }

    fn backward(&mut self, cache: &Self::Cache, dy: &Tensor) -> Result<Tensor> {
        let (dd, ds) = self.level.backward(cache, dy)?;
        let mut flat = dd.into_data();
        flat.extend_from_slice(ds.data());
        let n = flat.len();
        Tensor::new(&[n], flat)
    }
}

impl Module for UpProbe {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.level.visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.level.visit_params_mut(prefix, f);
    }
}

#[derive(Clone, Copy)]
enum LossKind {
    Mse,
    Proj,
    Perc,
    Total,
}

/// A loss as a map from the predicted volume to a one-element tensor.
#[derive(Clone)]
struct LossProbe {
    kind: LossKind,
    gt: Volume3D,
    ext: PercExtractor,
}

impl LossProbe {
    fn eval(&self, pred: &Volume3D) -> Result<(f64, Volume3D)> {
        match self.kind {
            LossKind::Mse => mse_loss_grad(pred, &self.gt),
            LossKind::Proj => proj_loss_grad(pred, &self.gt),
            LossKind::Perc => perc_loss_grad(pred, &self.gt, &self.ext),
            LossKind::Total => {
                let w = LossWeights::new(0.3, 0.7)?;
                total_loss_grad(pred, &self.gt, &w, &self.ext).map(|(t, g)| (t.total, g))
            }
        }
    }
}

impl DiffOp for LossProbe {
    type Cache = Volume3D;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Volume3D)> {
        let pred = Volume3D::from_tensor(x.clone())?;
        let (l, g) = self.eval(&pred)?;
        Ok((Tensor::new(&[1], alloc::vec![l])?, g))
    }

    fn backward(&mut self, grad: &Volume3D, dy: &Tensor) -> Result<Tensor> {
        Ok(grad.to_tensor().scale(dy.data()[0]))
    }
}

impl Module for LossProbe {
    fn visit_params(&self, _: &str, _: &mut dyn FnMut(&str, &Param)) {}
    fn visit_params_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param)) {}
}

/// The inverse warp as a map from depth field to seed volume.
#[derive(Clone)]
struct ScatterProbe {
    table: WarpTable,
}

impl DiffOp for ScatterProbe {
    type Cache = ();

    fn forward(&self, x: &Tensor) -> Result<(Tensor, ())> {
        Ok((scatter(&DepthField::from_tensor(x.clone())?, &self.table)?.to_tensor(), ()))
    }

    fn backward(&mut self, _: &(), dy: &Tensor) -> Result<Tensor> {
        Ok(scatter_backward(&Volume3D::from_tensor(dy.clone())?, &self.table)?.to_tensor())
    }
}

impl Module for ScatterProbe {
    fn visit_params(&self, _: &str, _: &mut dyn FnMut(&str, &Param)) {}
    fn visit_params_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param)) {}
}

/// A small trough on a `4 × 16 × 16` grid.
pub fn small_geometry() -> TroughGeometry {
    TroughGeometry {
        h: 8.0,
        k: 9.0,
        a1: 6.5,
        b1: 5.5,
        a2: 3.5,
        b2: 2.5,
        columns: 8,
        bins: 3,
        dt: 0.5,
        extents: [4, 16, 16],
    }
}

/// Refiner configuration used for the volumetric check.
pub fn small_refiner() -> RefinerConfig {
    RefinerConfig {
        extents: [8, 16, 16],
        widths: alloc::vec![2, 4],
        bottleneck: 4,
        tok_blocks: 1,
        convs_per_stage: 1,
    }
}

type Trial = Box<dyn Fn(&SuiteConfig, &mut ChaCha8Rng) -> Result<f64>>;

fn entry<T, F>(build: F) -> Trial
where
    T: DiffOp + Module + Clone + 'static,
    F: Fn(&mut ChaCha8Rng) -> Result<(T, Tensor)> + 'static,
{
    Box::new(move |cfg, rng| {
        let (op, x) = build(rng)?;
        check_op(&op, &x, cfg, rng)
    })
}

fn perturbed<T: Module>(mut m: T, s: f64, rng: &mut ChaCha8Rng) -> T {
    perturb_params(&mut m, s, rng);
    m
}

/// Names and trial functions of every checked operation.
pub fn catalog() -> Vec<(&'static str, Trial)> {
    let mut out: Vec<(&'static str, Trial)> = Vec::new();
    let acts = [
        ("sigmoid", Activation::Sigmoid),
        ("tanh", Activation::Tanh),
        ("softplus", Activation::Softplus),
        ("silu", Activation::Silu),
        ("relu", Activation::Relu),
    ];
    for (name, act) in acts {
        out.push((name, entry(move |rng| Ok((act, uniform(&[16], -4.0, 4.0, rng))))));
    }
    out.push((
        "layer_norm",
        entry(|rng| Ok((perturbed(LayerNorm::new(6), 0.5, rng), uniform(&[4, 6], -2.0, 2.0, rng)))),
    ));
    out.push((
        "group_norm",
        entry(|rng| {
            let gn = perturbed(GroupNorm::new(6, 3, true)?, 0.5, rng);
            Ok((gn, uniform(&[6, 3, 4], -2.0, 2.0, rng)))
        }),
    ));
    out.push((
        "linear",
        entry(|rng| Ok((Linear::init(4, 5, true, rng), uniform(&[3, 4], -2.0, 2.0, rng)))),
    ));
    out.push((
        "kan_layer",
        entry(|rng| {
            let layer = perturbed(KanLayer::new(3, 4, SplineGrid::default(), rng), 0.3, rng);
            Ok((layer, uniform(&[5, 3], -3.5, 3.5, rng)))
        }),
    ));
    out.push((
        "kan_stack",
        entry(|rng| {
            let stack = perturbed(KanStack::new(&[3, 4, 2], &SplineGrid::default(), rng)?, 0.3, rng);
            Ok((stack, uniform(&[5, 3], -3.0, 3.0, rng)))
        }),
    ));
    out.push((
        "koopman_block",
        entry(|rng| {
            let block = perturbed(KoopmanBlock::new(6, 0.5, rng)?, 0.5, rng);
            Ok((block, uniform(&[5, 6], -2.0, 2.0, rng)))
        }),
    ));
    out.push((
        "mha_1d",
        entry(|rng| Ok((Mha::new(8, 2, rng)?, uniform(&[5, 8], -1.5, 1.5, rng)))),
    ));
    out.push((
        "axial_attention",
        entry(|rng| {
            let attn = perturbed(AxialAttention::new(8, 2, rng)?, 0.2, rng);
            Ok((attn, uniform(&[8, 3, 4], -1.5, 1.5, rng)))
        }),
    ));
    out.push((
        "attention_gate",
        entry(|rng| {
            let gate = perturbed(AttentionGate::new(3, 4, 2, rng), 0.3, rng);
            Ok((GateProbe { gate, split: [3, 4] }, uniform(&[7, 3, 4], -2.0, 2.0, rng)))
        }),
    ));
    out.push((
        "conv2d",
        entry(|rng| Ok((Conv::same(2, 3, 4, 3, rng)?, uniform(&[3, 5, 6], -1.0, 1.0, rng)))),
    ));
    out.push((
        "conv3d_strided",
        entry(|rng| Ok((Conv::down(3, 2, 3, rng)?, uniform(&[2, 4, 5, 6], -1.0, 1.0, rng)))),
    ));
    out.push((
        "conv3d_depthwise",
        entry(|rng| Ok((Conv::depthwise(3, 3, rng)?, uniform(&[3, 3, 4, 5], -1.0, 1.0, rng)))),
    ));
    out.push((
        "conv_transpose2d",
        entry(|rng| Ok((ConvTranspose::up(2, 3, 2, rng)?, uniform(&[3, 3, 4], -1.0, 1.0, rng)))),
    ));
    out.push((
        "conv_transpose3d",
        entry(|rng| Ok((ConvTranspose::up(3, 2, 3, rng)?, uniform(&[2, 2, 3, 3], -1.0, 1.0, rng)))),
    ));
    out.push((
        "conv_norm_act",
        entry(|rng| {
            let block = ConvNormAct::same(3, 2, 3, Activation::Silu, rng)?;
            Ok((block, uniform(&[2, 3, 4, 4], -1.0, 1.0, rng)))
        }),
    ));
    out.push((
        "decoder_level",
        entry(|rng| {
            let level = perturbed(UpLevel::new(3, 4, 2, 2, 1, Activation::Silu, rng)?, 0.1, rng);
            let probe = UpProbe { level, deep: alloc::vec![4, 2, 2, 3], skip: alloc::vec![2, 4, 4, 6] };
            Ok((probe, uniform(&[4 * 12 + 2 * 96], -1.0, 1.0, rng)))
        }),
    ));
    let losses = [
        ("mse_loss", LossKind::Mse),
        ("proj_loss", LossKind::Proj),
        ("perc_loss", LossKind::Perc),
        ("total_loss", LossKind::Total),
    ];
    for (name, kind) in losses {
        out.push((
            name,
            entry(move |rng| {
                let ext = [6, 8, 10];
                let gt = Volume3D::from_tensor(uniform(&ext, 0.0, 255.0, rng))?;
                let pred = uniform(&ext, 0.0, 255.0, rng);
                Ok((LossProbe { kind, gt, ext: PercExtractor::default() }, pred))
            }),
        ));
    }
    out.push((
        "scatter",
        entry(|rng| {
            let table = build_warp_table(&small_geometry())?;
            let x = uniform(&[3, 4, 8], -1.0, 1.0, rng);
            Ok((ScatterProbe { table }, x))
        }),
    ));
    out.push((
        "token_block_2d",
        entry(|rng| {
            let block = perturbed(TokenBlock2d::new(8, 4, 0.1, rng)?, 0.1, rng);
            Ok((block, uniform(&[8, 4, 4], -1.0, 1.0, rng)))
        }),
    ));
    out.push((
        "tok_kan_3d",
        entry(|rng| {
            let block = perturbed(TokKan3d::new(4, rng)?, 0.1, rng);
            Ok((block, uniform(&[4, 2, 3, 3], -1.0, 1.0, rng)))
        }),
    ));
    out.push((
        "refiner",
        entry(|rng| {
            let refiner = Refiner::new(small_refiner(), rng)?;
            let mut net = perturbed(refiner.net, 0.05, rng);
            // probe in normalized intensity units; raw-unit steps of 1e-5
            // would sit at the round-off floor after the 1/255 input scale
            net.input_scale = 1.0;
            Ok((net, uniform(&[1, 8, 16, 16], 0.0, 1.0, rng)))
        }),
    ));
    out
}

/// Runs the catalog (optionally only names containing `filter`).
pub fn run_suite(cfg: &SuiteConfig, filter: Option<&str>) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for (idx, (name, trial)) in catalog().into_iter().enumerate() {
        if filter.is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((idx as u64 + 1) << 32));
        let mut report = GradCheckReport::new(name, cfg.tolerance);
        while report.trials < cfg.trials {
            let err = trial(cfg, &mut rng)?;
            if err == f64::INFINITY {
                report.discarded += 1;
                if report.discarded > cfg.trials {
                    // kinks everywhere: surface it as a failure
                    report.record(f64::NAN);
                    break;
                }
                continue;
            }
            report.record(err);
        }
        reports.push(report);
    }
    Ok(reports)
}
