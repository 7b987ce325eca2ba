use kukan_core::geometry::{mip, View};
use kukan_core::loss::{
    feature_distance, mse_loss, perc_loss, proj_loss, psnr, ssim, total_loss, volume_ssim, LossWeights, PercExtractor,
    SsimParams,
};
use kukan_core::volume::{Image2D, Volume3D};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Image2D {
    Image2D::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap()
}

fn random_volume(ext: [usize; 3], rng: &mut ChaCha8Rng) -> Volume3D {
    let n = ext.iter().product();
    Volume3D::new(ext, (0..n).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap()
}

fn brute_psnr(a: &[f64], b: &[f64], peak: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += (a[i] - b[i]).powi(2);
    }
    20.0 * peak.log10() - 10.0 * (acc / a.len() as f64).log10()
}

/// Per-tile SSIM with two-pass (centered) moments.
fn brute_ssim(x: &Image2D, y: &Image2D, p: &SsimParams) -> f64 {
    let w = p.window;
    let n = (w * w) as f64;
    let mut scores = Vec::new();
    for tr in 0..x.rows() / w {
        for tc in 0..x.cols() / w {
            let cells: Vec<(usize, usize)> =
                (0..w).flat_map(|r| (0..w).map(move |c| (tr * w + r, tc * w + c))).collect();
            let mx = cells.iter().map(|&(r, c)| x.get(r, c)).sum::<f64>() / n;
            let my = cells.iter().map(|&(r, c)| y.get(r, c)).sum::<f64>() / n;
            let vx = cells.iter().map(|&(r, c)| (x.get(r, c) - mx).powi(2)).sum::<f64>() / n;
            let vy = cells.iter().map(|&(r, c)| (y.get(r, c) - my).powi(2)).sum::<f64>() / n;
            let cov = cells.iter().map(|&(r, c)| (x.get(r, c) - mx) * (y.get(r, c) - my)).sum::<f64>() / n;
            scores.push(
                (2.0 * mx * my + p.c1) * (2.0 * cov + p.c2) / ((mx * mx + my * my + p.c1) * (vx + vy + p.c2)),
            );
        }
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[test]
fn psnr_of_a_unit_offset_at_peak_255() {
    let a = vec![100.0; 32 * 64];
    let b = vec![101.0; 32 * 64];
    assert!((psnr(&a, &b, 255.0).unwrap() - 48.1308).abs() <= 1e-3);
    assert!(psnr(&a, &a, 255.0).unwrap().is_infinite());
}

#[test]
fn psnr_matches_the_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let n = rng.random_range(1..500);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..255.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..255.0)).collect();
        assert!((psnr(&a, &b, 255.0).unwrap() - brute_psnr(&a, &b, 255.0)).abs() <= 1e-10);
    }
}

#[test]
fn ssim_matches_the_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = SsimParams::default();
    for (rows, cols) in [(8, 8), (16, 24), (19, 33), (64, 64)] {
        let x = random_image(rows, cols, &mut rng);
        let noisy = Image2D::new(rows, cols, x.data().iter().map(|v| v + rng.random_range(-30.0..30.0)).collect()).unwrap();
        let y = random_image(rows, cols, &mut rng);
        for other in [&noisy, &y] {
            assert!((ssim(&x, other, &p).unwrap() - brute_ssim(&x, other, &p)).abs() <= 1e-10);
        }
        assert!((ssim(&x, &x, &p).unwrap() - 1.0).abs() <= 1e-15);
    }
}

#[test]
fn volume_ssim_of_identical_volumes_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = random_volume([4, 16, 16], &mut rng);
    assert!((volume_ssim(&v, &v, &SsimParams::default()).unwrap() - 1.0).abs() <= 1e-15);
}

#[test]
fn mse_matches_a_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, b) = (random_volume([3, 4, 5], &mut rng), random_volume([3, 4, 5], &mut rng));
    let mut acc = 0.0;
    for h in 0..3 {
        for w in 0..4 {
            for d in 0..5 {
                acc += (a.get(h, w, d) - b.get(h, w, d)).powi(2);
            }
        }
    }
    assert!((mse_loss(&a, &b).unwrap() - acc / 60.0).abs() <= 1e-9);
}

#[test]
fn projection_loss_sums_squared_mip_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = (random_volume([3, 5, 7], &mut rng), random_volume([3, 5, 7], &mut rng));
    let mut expect = 0.0;
    for view in View::ALL {
        let (ma, mb) = (mip(&a, view), mip(&b, view));
        for r in 0..ma.rows() {
            for c in 0..ma.cols() {
                expect += (ma.get(r, c) - mb.get(r, c)).powi(2);
            }
        }
    }
    assert!((proj_loss(&a, &b).unwrap() - expect).abs() <= 1e-9 * expect);
}

#[test]
fn perceptual_loss_compares_the_three_projections() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ext = PercExtractor::default();
    let (a, b) = (random_volume([6, 8, 10], &mut rng), random_volume([6, 8, 10], &mut rng));
    let expect: f64 = View::ALL
        .iter()
        .map(|&v| feature_distance(&mip(&a, v), &mip(&b, v), &ext).unwrap())
        .sum();
    let got = perc_loss(&a, &b, &ext).unwrap();
    assert!(got > 0.0);
    assert!((got - expect).abs() <= 1e-12 * expect);
    assert!((perc_loss(&b, &a, &ext).unwrap() - got).abs() <= 1e-12 * got);
    assert_eq!(perc_loss(&a, &a, &ext).unwrap(), 0.0);
}

#[test]
fn total_loss_is_linear_in_the_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ext = PercExtractor::default();
    let (a, b) = (random_volume([6, 8, 10], &mut rng), random_volume([6, 8, 10], &mut rng));
    let (mse, proj, perc) = (mse_loss(&a, &b).unwrap(), proj_loss(&a, &b).unwrap(), perc_loss(&a, &b, &ext).unwrap());
    for (lp, lq) in [(0.0, 0.0), (1e-3, 1e-2), (0.5, 2.0)] {
        let t = total_loss(&a, &b, &LossWeights::new(lp, lq).unwrap(), &ext).unwrap();
        let expect = mse + lp * proj + lq * perc;
        assert!((t.total - expect).abs() <= 1e-12 * expect);
    }
    assert!(LossWeights::new(-1.0, 0.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ssim_is_symmetric_and_at_most_one(seed in any::<u64>(), rows in 8usize..24, cols in 8usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (random_image(rows, cols, &mut rng), random_image(rows, cols, &mut rng));
        let p = SsimParams::default();
        let (s, t) = (ssim(&x, &y, &p).unwrap(), ssim(&y, &x, &p).unwrap());
        prop_assert!((s - t).abs() <= 1e-12);
        prop_assert!(s <= 1.0 + 1e-12);
    }

    #[test]
    fn psnr_falls_as_the_error_grows(seed in any::<u64>(), k in 1.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..255.0)).collect();
        let e: Vec<f64> = (0..64).map(|_| rng.random_range(-5.0..5.0)).collect();
        let near: Vec<f64> = a.iter().zip(&e).map(|(x, d)| x + d).collect();
        let far: Vec<f64> = a.iter().zip(&e).map(|(x, d)| x + k * d).collect();
        let (pn, pf) = (psnr(&near, &a, 255.0).unwrap(), psnr(&far, &a, 255.0).unwrap());
        prop_assert!((pn - pf - 20.0 * k.log10()).abs() <= 1e-9);
    }
}
