use kukan_core::koopman::{damped_magnitude, koopman_block, multiplier, KoopmanBlock};
use kukan_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fill(t: &mut Tensor, lo: f64, hi: f64, rng: &mut ChaCha8Rng) {
    for v in t.data_mut() {
        *v = rng.random_range(lo..hi);
    }
}

/// Block with every parameter drawn at random; gate weights are large
/// enough to push `tanh` into saturation.
fn random_block(dim: usize, rho: f64, rng: &mut ChaCha8Rng) -> KoopmanBlock {
    let mut b = KoopmanBlock::zeros(dim, rho).unwrap();
    fill(&mut b.nu.value, -10.0, 10.0, rng);
    fill(&mut b.theta.value, -4.0, 4.0, rng);
    fill(&mut b.a_r.value, -20.0, 20.0, rng);
    fill(&mut b.b_r.value, -20.0, 20.0, rng);
    fill(&mut b.a_i.value, -20.0, 20.0, rng);
    fill(&mut b.b_i.value, -20.0, 20.0, rng);
    fill(&mut b.w.value, -1.0, 1.0, rng);
    fill(&mut b.norm.gamma.value, 0.5, 1.5, rng);
    fill(&mut b.norm.beta.value, -0.5, 0.5, rng);
    b
}

fn random_input(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-50.0..50.0)).collect()
}

/// Gate `g = α / λ` recovered in complex arithmetic.
fn gate_of(alpha: (f64, f64), lam: (f64, f64)) -> (f64, f64) {
    let den = lam.0 * lam.0 + lam.1 * lam.1;
    ((alpha.0 * lam.0 + alpha.1 * lam.1) / den, (alpha.1 * lam.0 - alpha.0 * lam.1) / den)
}

#[test]
fn spectrum_and_gate_stay_in_bounds_over_many_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut saturated = 0usize;
    for _ in 0..10_000 {
        let dim = rng.random_range(1..6);
        let rho = rng.random_range(0.0..0.99);
        let block = random_block(dim, rho, &mut rng);
        let m = damped_magnitude(&random_input(dim, &mut rng));
        let (ar, ai) = multiplier(&block, &m).unwrap();
        for (d, e) in block.spectrum().iter().enumerate() {
            assert!(e.modulus > 0.0 && e.modulus < 1.0, "|λ| = {}", e.modulus);
            let (gr, gi) = gate_of((ar[d], ai[d]), (e.re, e.im));
            let slack = 1e-12;
            assert!((gr - 1.0).abs() <= rho + slack, "g_r = {gr}, rho = {rho}");
            assert!(gi.abs() <= rho + slack, "g_i = {gi}, rho = {rho}");
            if (gr - 1.0).abs() > rho * (1.0 - 1e-9) {
                saturated += 1;
            }
        }
    }
    assert!(saturated > 0, "draws never reached the gate bound");
}

#[test]
fn zero_amplitude_returns_the_eigenvalue_bit_for_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let dim = rng.random_range(1..6);
        let block = random_block(dim, 0.0, &mut rng);
        let m = damped_magnitude(&random_input(dim, &mut rng));
        let (ar, ai) = multiplier(&block, &m).unwrap();
        for (d, e) in block.spectrum().iter().enumerate() {
            assert_eq!(ar[d].to_bits(), e.re.to_bits());
            assert_eq!(ai[d].to_bits(), e.im.to_bits());
        }
    }
}

#[test]
fn multiplier_approaches_the_eigenvalue_as_amplitude_shrinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let dim = rng.random_range(1..6);
        let mut block = random_block(dim, 0.5, &mut rng);
        let m = damped_magnitude(&random_input(dim, &mut rng));
        let spec = block.spectrum();
        let mut prev = f64::INFINITY;
        for rho in [1e-2, 1e-4, 1e-6] {
            block.rho = rho;
            let (ar, ai) = multiplier(&block, &m).unwrap();
            let gap = spec
                .iter()
                .enumerate()
                .map(|(d, e)| (ar[d] - e.re).hypot(ai[d] - e.im))
                .fold(0.0, f64::max);
            assert!(gap <= rho * 2f64.sqrt() * (1.0 + 1e-9));
            assert!(gap < prev, "gap {gap} did not shrink below {prev}");
            prev = gap;
        }
    }
}

/// Forward pass computed in polar form with an explicit layer norm.
fn polar_forward(phi: &[f64], b: &KoopmanBlock) -> Vec<f64> {
    let d = b.dim;
    let (nu, th) = (b.nu.value.data(), b.theta.value.data());
    let (ar, br, ai, bi) = (b.a_r.value.data(), b.b_r.value.data(), b.a_i.value.data(), b.b_i.value.data());
    let (w, gamma, beta) = (b.w.value.data(), b.norm.gamma.value.data(), b.norm.beta.value.data());
    let mut out = Vec::with_capacity(phi.len());
    for p in phi.chunks(d) {
        let m: Vec<f64> = p.iter().map(|x| (1.0 + x.abs()).ln()).collect();
        let mut uv = vec![0.0; 2 * d];
        for c in 0..d {
            let modulus = (-(1.0 + nu[c].exp()).ln()).exp();
            let sr: f64 = (0..d).map(|k| ar[c * d + k] * m[k]).sum::<f64>() + br[c];
            let si: f64 = (0..d).map(|k| ai[c * d + k] * m[k]).sum::<f64>() + bi[c];
            let (gr, gi) = (1.0 + b.rho * sr.tanh(), b.rho * si.tanh());
            let (gmod, garg) = (gr.hypot(gi), gi.atan2(gr));
            let (amod, aarg) = (modulus * gmod, th[c] + garg);
            uv[c] = amod * aarg.cos() * p[c];
            uv[d + c] = amod * aarg.sin() * p[c];
        }
        let z: Vec<f64> = (0..d)
            .map(|o| p[o] + (0..2 * d).map(|k| w[o * 2 * d + k] * uv[k]).sum::<f64>())
            .collect();
        let mean = z.iter().sum::<f64>() / d as f64;
        let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + b.norm.eps).sqrt();
        out.extend((0..d).map(|o| gamma[o] * (z[o] - mean) * inv + beta[o]));
    }
    out
}

#[test]
fn real_arithmetic_matches_polar_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..50 {
        let dim = rng.random_range(2..7);
        let tokens = rng.random_range(1..5);
        let mut block = random_block(dim, rng.random_range(0.0..0.9), &mut rng);
        fill(&mut block.a_r.value, -1.0, 1.0, &mut rng);
        fill(&mut block.a_i.value, -1.0, 1.0, &mut rng);
        let phi: Vec<f64> = (0..tokens * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let got = koopman_block(&Tensor::new(&[tokens, dim], phi.clone()).unwrap(), &block).unwrap();
        for (g, w) in got.data().iter().zip(polar_forward(&phi, &block)) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tokens_are_transformed_independently(seed in any::<u64>(), dim in 2usize..6, tokens in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = random_block(dim, 0.3, &mut rng);
        let phi: Vec<f64> = (0..tokens * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut order: Vec<usize> = (0..tokens).collect();
        order.reverse();
        order.rotate_left(seed as usize % tokens);
        let permuted: Vec<f64> = order.iter().flat_map(|&t| phi[t * dim..(t + 1) * dim].to_vec()).collect();
        let y = koopman_block(&Tensor::new(&[tokens, dim], phi).unwrap(), &block).unwrap();
        let yp = koopman_block(&Tensor::new(&[tokens, dim], permuted).unwrap(), &block).unwrap();
        for (slot, &t) in order.iter().enumerate() {
            prop_assert_eq!(&yp.data()[slot * dim..(slot + 1) * dim], &y.data()[t * dim..(t + 1) * dim]);
        }
    }
}
