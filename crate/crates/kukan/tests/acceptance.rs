//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p kukan --test acceptance` runs everything; numeric
//! arguments after `--` select criteria, e.g. `-- 2 7`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use kukan::config::{RunConfig, Scale};
use kukan::dataset::{self, Split};
use kukan::eval::evaluate_checkpoint;
use kukan::train;
use kukan_core::attention::{axial_attention, AxialAttention, Mha};
use kukan_core::geometry::{build_warp_table, flatten, scatter, TroughGeometry, WarpTable};
use kukan_core::gradcheck::suite::{run_suite, SuiteConfig};
use kukan_core::kan::SplineGrid;
use kukan_core::koopman::{damped_magnitude, multiplier, KoopmanBlock};
use kukan_core::loss::{psnr, ssim, SsimParams};
use kukan_core::nn::DiffOp;
use kukan_core::physics::{integrate_ray, synthesize_px, Ray3, DATASET_STEP, I0};
use kukan_core::tensor::Tensor;
use kukan_core::volume::{DepthField, Image2D, Volume3D};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

const GRAD_TRIALS: usize = 100;
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(300);
const KOOPMAN_DRAWS: usize = 10_000;
const GATE_SLACK: f64 = 1e-12;
const LINEARITY_TOL: f64 = 1e-12;
const SLAB_REL_TOL: f64 = 0.02;
const STEP_HALVING_MIN_RATIO: f64 = 1.8;
const UNITY_TOL: f64 = 1e-12;
const KNOT_JUMP_TOL: f64 = 1e-9;
const IDENTITY_FIT_TOL: f64 = 1e-6;
const PSNR_UNIT_OFFSET: f64 = 48.1308;
const PSNR_UNIT_TOL: f64 = 1e-3;
const ORACLE_TOL: f64 = 1e-10;
const SOFTMAX_TOL: f64 = 1e-12;
const EQUIVARIANCE_TOL: f64 = 1e-12;
const SLOPE_REL_TOL: f64 = 0.1;
const EXPERIMENT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const LOSS_RATIO_MAX: f64 = 0.5;
const PSNR_GAIN_MIN: f64 = 3.0;
const EXPERIMENT_BUDGET: Duration = Duration::from_secs(600);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(n: usize, lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cfg = SuiteConfig { trials: GRAD_TRIALS, tolerance: GRAD_TOL, ..SuiteConfig::default() };
    let reports = run_suite(&cfg, None).expect("suite");
    let elapsed = start.elapsed();
    let worst = reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed() || r.trials < GRAD_TRIALS)
        .map(|r| r.name.as_str())
        .collect();
    outcome(
        failed.is_empty() && elapsed < GRAD_BUDGET,
        format!(
            "{} operations x {GRAD_TRIALS} trials, worst {} at {:.2e}, {:.1}s{}",
            reports.len(),
            worst.name,
            worst.max_rel_error,
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!(", failing: {failed:?}") }
        ),
    )
}

fn random_koopman(dim: usize, rho: f64, r: &mut ChaCha8Rng) -> KoopmanBlock {
    let mut b = KoopmanBlock::zeros(dim, rho).unwrap();
    for (p, lo, hi) in [
        (&mut b.nu, -10.0, 10.0),
        (&mut b.theta, -4.0, 4.0),
        (&mut b.a_r, -20.0, 20.0),
        (&mut b.b_r, -20.0, 20.0),
        (&mut b.a_i, -20.0, 20.0),
        (&mut b.b_i, -20.0, 20.0),
    ] {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&uniform(n, lo, hi, r));
    }
    b
}

fn koopman_spectrum() -> Outcome {
    let mut r = rng(21);
    let (mut worst_mod, mut worst_gate, mut bounds_ok, mut bitwise_ok, mut monotone_ok) = (0.0f64, 0.0f64, true, true, true);
    for _ in 0..KOOPMAN_DRAWS {
        let dim = r.random_range(1..6);
        let rho = r.random_range(0.0..0.99);
        let block = random_koopman(dim, rho, &mut r);
        let m = damped_magnitude(&uniform(dim, -50.0, 50.0, &mut r));
        let (ar, ai) = multiplier(&block, &m).unwrap();
        for (d, e) in block.spectrum().iter().enumerate() {
            bounds_ok &= e.modulus > 0.0 && e.modulus < 1.0;
            worst_mod = worst_mod.max(e.modulus);
            // g = α / λ
            let den = e.re * e.re + e.im * e.im;
            let gr = (ar[d] * e.re + ai[d] * e.im) / den;
            let gi = (ai[d] * e.re - ar[d] * e.im) / den;
            let excess = ((gr - 1.0).abs() - rho).max(gi.abs() - rho);
            worst_gate = worst_gate.max(excess);
            bounds_ok &= excess <= GATE_SLACK;
        }
        let zero = KoopmanBlock { rho: 0.0, ..block.clone() };
        let (zr, zi) = multiplier(&zero, &m).unwrap();
        for (d, e) in zero.spectrum().iter().enumerate() {
            bitwise_ok &= zr[d].to_bits() == e.re.to_bits() && zi[d].to_bits() == e.im.to_bits();
        }
        let mut prev = f64::INFINITY;
        for rho in [1e-2, 1e-4, 1e-6] {
            let b = KoopmanBlock { rho, ..block.clone() };
            let (ar, ai) = multiplier(&b, &m).unwrap();
            let gap = b
                .spectrum()
                .iter()
                .enumerate()
                .map(|(d, e)| (ar[d] - e.re).hypot(ai[d] - e.im))
                .fold(0.0, f64::max);
            monotone_ok &= gap < prev;
            prev = gap;
        }
    }
    outcome(
        bounds_ok && bitwise_ok && monotone_ok,
        format!(
            "{KOOPMAN_DRAWS} draws: max |lambda| {worst_mod:.6}, max gate excess over rho {worst_gate:.1e}, rho=0 bitwise {bitwise_ok}, continuity monotone {monotone_ok}"
        ),
    )
}

fn ellipse_level(x: f64, y: f64, h: f64, k: f64, a: f64, b: f64) -> f64 {
    ((x - h) / b).powi(2) + ((y - k) / a).powi(2)
}

fn collision_free(table: &WarpTable) -> WarpTable {
    let [_, nw, nd] = table.extents();
    let mut taken = vec![false; nw * nd];
    let mut samples = table.samples().to_vec();
    for i in 0..table.columns() {
        for k in 0..table.bins() {
            if let Some((w, d)) = table.voxel(i, k) {
                if std::mem::replace(&mut taken[w * nd + d], true) {
                    samples[i * table.bins() + k].valid = false;
                }
            }
        }
    }
    WarpTable::from_samples(table.columns(), table.bins(), table.extents(), samples).unwrap()
}

fn geometry_round_trip() -> Outcome {
    let g = TroughGeometry::toy();
    let full = build_warp_table(&g).unwrap();
    let membership = full.samples().iter().filter(|s| s.valid).all(|s| {
        ellipse_level(s.x, s.y, g.h, g.k, g.a1, g.b1) <= 1.0 && ellipse_level(s.x, s.y, g.h, g.k, g.a2, g.b2) > 1.0
    });
    let table = collision_free(&full);
    let (k, h, w) = (g.bins, g.extents[0], g.columns);
    let mut r = rng(31);
    let field = |r: &mut ChaCha8Rng| DepthField::new(k, h, w, uniform(k * h * w, -1.0, 1.0, r)).unwrap();
    let f = field(&mut r);
    let back = flatten(&scatter(&f, &table).unwrap(), &table).unwrap();
    let mut exact = true;
    for i in 0..w {
        for b in 0..k {
            let valid = table.sample(i, b).valid;
            for j in 0..h {
                exact &= back.get(b, j, i) == if valid { f.get(b, j, i) } else { 0.0 };
            }
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (f1, f2) = (field(&mut r), field(&mut r));
        let (s, t) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
        let mix = DepthField::new(k, h, w, f1.data().iter().zip(f2.data()).map(|(a, b)| s * a + t * b).collect()).unwrap();
        let (v1, v2, vm) = (scatter(&f1, &full).unwrap(), scatter(&f2, &full).unwrap(), scatter(&mix, &full).unwrap());
        for ((a, b), m) in v1.data().iter().zip(v2.data()).zip(vm.data()) {
            worst = worst.max((s * a + t * b - m).abs());
        }
        let (g1, g2, gm) = (flatten(&v1, &full).unwrap(), flatten(&v2, &full).unwrap(), flatten(&vm, &full).unwrap());
        for ((a, b), m) in g1.data().iter().zip(g2.data()).zip(gm.data()) {
            worst = worst.max((s * a + t * b - m).abs());
        }
    }
    outcome(
        membership && exact && worst <= LINEARITY_TOL,
        format!(
            "{} valid samples inside the trough: {membership}; flatten(scatter) exact: {exact}; superposition error {worst:.1e}",
            full.valid_count()
        ),
    )
}

fn physics_checks() -> Outcome {
    let g = TroughGeometry::toy();
    let empty = synthesize_px(&Volume3D::zeros(g.extents), &g, I0, DATASET_STEP).unwrap();
    let empty_ok = empty.data().iter().all(|&p| p == I0);

    let c = 0.05;
    let [nh, nw, nd] = [8, 40, 40];
    let mut slab = Volume3D::zeros([nh, nw, nd]);
    for hh in 0..nh {
        for ww in 0..nw {
            for d in 10..30 {
                slab.set(hh, ww, d, c);
            }
        }
    }
    let ray = Ray3::new([20.0, -5.0, 4.0], [0.0, 1.0, 0.0], 50.0).unwrap();
    let got = I0 * (-integrate_ray(&slab, &ray, DATASET_STEP).unwrap()).exp();
    let expect = I0 * (-c * 20.0f64).exp();
    let slab_err = ((got - expect) / expect).abs();

    let mut r = rng(41);
    let small = TroughGeometry { h: 12.0, k: 13.0, a1: 10.0, b1: 8.5, a2: 5.5, b2: 4.0, columns: 16, bins: 5, dt: 0.5, extents: [3, 24, 24] };
    let n: usize = small.extents.iter().product();
    let mut monotone = true;
    for _ in 0..20 {
        let base = Volume3D::new(small.extents, uniform(n, 0.0, 0.1, &mut r)).unwrap();
        let more = Volume3D::new(small.extents, base.data().iter().map(|&x| x + 0.3 * r.random::<f64>()).collect()).unwrap();
        let (a, b) = (synthesize_px(&base, &small, I0, 0.5).unwrap(), synthesize_px(&more, &small, I0, 0.5).unwrap());
        monotone &= a.data().iter().zip(b.data()).all(|(x, y)| y <= x);
    }

    let ext = [10, 24, 24];
    let v = Volume3D::new(ext, uniform(ext.iter().product(), 0.0, 0.2, &mut r)).unwrap();
    let mut errs = [0.0f64; 3];
    for _ in 0..20 {
        let origin = [r.random_range(2.0..6.0), r.random_range(2.0..6.0), r.random_range(1.0..8.0)];
        let dir = [r.random_range(0.5..1.0), r.random_range(0.5..1.0), r.random_range(-0.1..0.1)];
        let ray = Ray3::new(origin, dir, r.random_range(10.0..15.0)).unwrap();
        let reference = integrate_ray(&v, &ray, 1.0 / 1024.0).unwrap();
        for (e, ds) in errs.iter_mut().zip([0.5, 0.25, 0.125]) {
            *e += (integrate_ray(&v, &ray, ds).unwrap() - reference).abs();
        }
    }
    let ratios = [errs[0] / errs[1], errs[1] / errs[2]];
    let converging = ratios.iter().all(|&q| q >= STEP_HALVING_MIN_RATIO);
    outcome(
        empty_ok && slab_err <= SLAB_REL_TOL && monotone && converging,
        format!(
            "empty -> I0: {empty_ok}; slab rel err {slab_err:.2e}; monotone: {monotone}; step-halving ratios {:.2}, {:.2}",
            ratios[0], ratios[1]
        ),
    )
}

fn kan_checks() -> Outcome {
    let mut r = rng(51);
    let mut unity = 0.0f64;
    for order in 0..=5 {
        for size in [1, 3, 8] {
            let grid = SplineGrid::new(-2.0, 3.0, size, order).unwrap();
            for _ in 0..200 {
                let x = r.random_range(grid.min..grid.max);
                unity = unity.max((grid.basis(x).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    let mut jump = 0.0f64;
    for order in 1..=5 {
        let grid = SplineGrid::new(-3.0, 3.0, 5, order).unwrap();
        let knots = grid.knots();
        for &t in &knots[order + 1..knots.len() - order - 1] {
            let (lo, hi) = (grid.basis(t - 1e-12), grid.basis(t + 1e-12));
            jump = jump.max(lo.iter().zip(&hi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    let grid = SplineGrid::new(-3.0, 3.0, 5, 3).unwrap();
    let xs: Vec<f64> = (0..120).map(|i| -3.0 + 6.0 * (i as f64 + 0.5) / 120.0).collect();
    let design = DMatrix::from_fn(xs.len(), grid.n_basis(), |row, col| grid.basis(xs[row])[col]);
    let coeffs = design.svd(true, true).solve(&DVector::from_column_slice(&xs), 1e-14).unwrap();
    let fit = (0..500)
        .map(|_| {
            let x = r.random_range(grid.min..grid.max);
            (grid.basis(x).iter().zip(coeffs.iter()).map(|(b, c)| b * c).sum::<f64>() - x).abs()
        })
        .fold(0.0, f64::max);
    outcome(
        unity <= UNITY_TOL && jump <= KNOT_JUMP_TOL && fit <= IDENTITY_FIT_TOL,
        format!("partition of unity {unity:.1e}; knot jump {jump:.1e}; identity fit {fit:.1e}"),
    )
}

fn loop_psnr(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += (a[i] - b[i]) * (a[i] - b[i]);
    }
    10.0 * (255.0 * 255.0 / (acc / a.len() as f64)).log10()
}

fn loop_ssim(x: &Image2D, y: &Image2D, p: &SsimParams) -> f64 {
    let w = p.window;
    let n = (w * w) as f64;
    let (mut total, mut tiles) = (0.0, 0);
    for tr in 0..x.rows() / w {
        for tc in 0..x.cols() / w {
            let cell = |img: &Image2D, i: usize| img.get(tr * w + i / w, tc * w + i % w);
            let mx = (0..w * w).map(|i| cell(x, i)).sum::<f64>() / n;
            let my = (0..w * w).map(|i| cell(y, i)).sum::<f64>() / n;
            let vx = (0..w * w).map(|i| (cell(x, i) - mx).powi(2)).sum::<f64>() / n;
            let vy = (0..w * w).map(|i| (cell(y, i) - my).powi(2)).sum::<f64>() / n;
            let cov = (0..w * w).map(|i| (cell(x, i) - mx) * (cell(y, i) - my)).sum::<f64>() / n;
            total += (2.0 * mx * my + p.c1) * (2.0 * cov + p.c2) / ((mx * mx + my * my + p.c1) * (vx + vy + p.c2));
            tiles += 1;
        }
    }
    total / tiles as f64
}

fn metric_oracles() -> Outcome {
    let unit = psnr(&vec![101.0; 2048], &vec![100.0; 2048], 255.0).unwrap();
    let mut r = rng(61);
    let p = SsimParams::default();
    let (mut psnr_err, mut ssim_err, mut self_err) = (0.0f64, 0.0f64, 0.0f64);
    for (rows, cols) in [(8, 8), (16, 24), (19, 33), (64, 64)] {
        let x = Image2D::new(rows, cols, uniform(rows * cols, 0.0, 255.0, &mut r)).unwrap();
        let noisy = Image2D::new(rows, cols, x.data().iter().map(|v| v + r.random_range(-30.0..30.0)).collect()).unwrap();
        let y = Image2D::new(rows, cols, uniform(rows * cols, 0.0, 255.0, &mut r)).unwrap();
        for other in [&noisy, &y] {
            psnr_err = psnr_err.max((psnr(x.data(), other.data(), 255.0).unwrap() - loop_psnr(x.data(), other.data())).abs());
            ssim_err = ssim_err.max((ssim(&x, other, &p).unwrap() - loop_ssim(&x, other, &p)).abs());
        }
        self_err = self_err.max((ssim(&x, &x, &p).unwrap() - 1.0).abs());
    }
    outcome(
        (unit - PSNR_UNIT_OFFSET).abs() <= PSNR_UNIT_TOL && self_err == 0.0 && psnr_err <= ORACLE_TOL && ssim_err <= ORACLE_TOL,
        format!("unit offset {unit:.4} dB; SSIM(x,x)-1 = {self_err:.1e}; PSNR oracle {psnr_err:.1e}; SSIM oracle {ssim_err:.1e}"),
    )
}

fn permute(x: &Tensor, axis: usize, perm: &[usize]) -> Tensor {
    let [c, h, w] = [x.dim(0), x.dim(1), x.dim(2)];
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, row, col) = (i / (h * w), (i / w) % h, i % w);
        let (row, col) = if axis == 1 { (perm[row], col) } else { (row, perm[col]) };
        x.data()[(ch * h + row) * w + col]
    })
}

fn attention_invariants() -> Outcome {
    let mut r = rng(71);
    let m = Mha::new(8, 4, &mut r).unwrap();
    let x = Tensor::new(&[3, 11, 8], uniform(3 * 11 * 8, -40.0, 40.0, &mut r)).unwrap();
    let (_, cache) = m.forward(&x).unwrap();
    let softmax = cache.probs().chunks(11).map(|row| (row.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);

    let a = AxialAttention::new(8, 4, &mut r).unwrap();
    let mut equiv = 0.0f64;
    for (h, w) in [(5, 7), (6, 4), (9, 9)] {
        let x = Tensor::new(&[8, h, w], uniform(8 * h * w, -2.0, 2.0, &mut r)).unwrap();
        let y = axial_attention(&x, &a).unwrap();
        for (axis, n) in [(1, h), (2, w)] {
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, r.random_range(0..=i));
            }
            let lhs = axial_attention(&permute(&x, axis, &perm), &a).unwrap();
            let rhs = permute(&y, axis, &perm);
            equiv = equiv.max(lhs.data().iter().zip(rhs.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max));
        }
    }

    let mut pts = Vec::new();
    for (h, w) in [(4, 6), (8, 12), (16, 24)] {
        let (_, cache) = a.forward(&Tensor::new(&[8, h, w], uniform(8 * h * w, -1.0, 1.0, &mut r)).unwrap()).unwrap();
        let (mw, mh) = cache.core_macs();
        pts.push((((h * w * 8 * (h + w)) as f64).ln(), ((mw + mh) as f64).ln()));
    }
    let slope = (pts[2].1 - pts[0].1) / (pts[2].0 - pts[0].0);
    outcome(
        softmax <= SOFTMAX_TOL && equiv <= EQUIVARIANCE_TOL && (slope - 1.0).abs() <= SLOPE_REL_TOL,
        format!("softmax row error {softmax:.1e}; permutation error {equiv:.1e}; op-count log-log slope {slope:.4}"),
    )
}

fn scaled_experiment() -> Outcome {
    let start = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in EXPERIMENT_SEEDS {
        let mut cfg = RunConfig::for_scale(Scale::Toy);
        cfg.seed = seed;
        assert_eq!((cfg.phantoms, cfg.epochs, cfg.adam.lr), (10, 50, 1e-3));
        let dir = root.path().join(format!("seed{seed}"));
        let data = dataset::generate(&cfg, &dir.join("data")).unwrap();
        assert_eq!(Split::ALL.map(|s| data.split(s).len()), [8, 1, 1]);
        let run = dir.join("run");
        let summary = train::train(&cfg, &data, &run, &mut |_| {}).unwrap();
        let (_, untrained) = evaluate_checkpoint(&run.join("initial.ckpt"), &data, Split::Test, None).unwrap();
        let (_, trained) = evaluate_checkpoint(&run.join("best.ckpt"), &data, Split::Test, None).unwrap();
        let ratio = summary.final_train_loss / summary.initial_train_loss;
        let gain = trained.mean[0] - untrained.mean[0];
        pass &= ratio <= LOSS_RATIO_MAX && gain >= PSNR_GAIN_MIN;
        let line = format!(
            "seed {seed}: loss x{ratio:.3} over {} epochs, test PSNR {:.2} -> {:.2} dB ({gain:+.2})",
            summary.epochs_run, untrained.mean[0], trained.mean[0]
        );
        eprintln!("    {line} [{:.0}s]", start.elapsed().as_secs_f64());
        lines.push(line);
    }
    let elapsed = start.elapsed();
    outcome(
        pass && elapsed <= EXPERIMENT_BUDGET,
        format!("{}; total {:.0}s", lines.join("; "), elapsed.as_secs_f64()),
    )
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::for_scale(Scale::Toy);
    cfg.seed = 2024;
    cfg.epochs = 3;
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let dir = root.path().join(name);
            let data = dataset::generate(&cfg, &dir.join("data")).unwrap();
            train::train(&cfg, &data, &dir.join("run"), &mut |_| {}).unwrap();
            let (rows, _) = evaluate_checkpoint(&dir.join("run/last.ckpt"), &data, Split::Test, None).unwrap();
            (files_under(&dir.join("data")), std::fs::read(dir.join("run/train_log.csv")).unwrap(), rows)
        })
        .collect();
    let same_data = runs[0].0 == runs[1].0;
    let same_log = runs[0].1 == runs[1].1;
    let same_metrics = runs[0].2 == runs[1].2;
    outcome(
        same_data && same_log && same_metrics,
        format!(
            "{} dataset files identical: {same_data}; loss logs identical: {same_log}; test metrics identical: {same_metrics}",
            runs[0].0.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "gradient suite", gradient_suite),
        (2, "koopman spectral invariants", koopman_spectrum),
        (3, "geometry round trip", geometry_round_trip),
        (4, "physics analytic checks", physics_checks),
        (5, "spline checks", kan_checks),
        (6, "metric oracles", metric_oracles),
        (7, "attention invariants", attention_invariants),
        (8, "scaled end-to-end experiment", scaled_experiment),
        (9, "determinism", determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (id, name, check) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failures += usize::from(!result.pass);
        println!(
            "[{}] criterion {id} {name} ({:.1}s): {}",
            if result.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            result.detail
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criterion(s) failed");
        ExitCode::FAILURE
    }
}
