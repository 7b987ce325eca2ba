use kukan_core::attention::{attention_gate, axial_attention, mha_1d, AttentionGate, AxialAttention, Mha};
use kukan_core::nn::{layer_norm, DiffOp};
use kukan_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

/// `x Wᵀ` for `x: [L, in]`, `w: [out, in]`.
fn project(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (out, inp) = (w.dim(0), w.dim(1));
    x.chunks(inp)
        .flat_map(|row| (0..out).map(move |o| (0..inp).map(|i| row[i] * w.data()[o * inp + i]).sum::<f64>()))
        .collect()
}

/// Direct multi-head attention over one `[L, C]` sequence.
fn naive_mha(x: &[f64], l: usize, m: &Mha) -> Vec<f64> {
    let (c, dh) = (m.dim, m.dim / m.heads);
    let (q, k, v) = (project(x, &m.wq.weight.value), project(x, &m.wk.weight.value), project(x, &m.wv.weight.value));
    let mut ctx = vec![0.0; l * c];
    for h in 0..m.heads {
        let ch = h * dh..(h + 1) * dh;
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| ch.clone().map(|e| q[i * c + e] * k[j * c + e]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = weights.iter().sum();
            for e in ch.clone() {
                ctx[i * c + e] = (0..l).map(|j| weights[j] / z * v[j * c + e]).sum();
            }
        }
    }
    project(&ctx, &m.wo.weight.value)
}

#[test]
fn mha_matches_the_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (l, c, heads) in [(1, 4, 1), (5, 8, 2), (7, 12, 4), (9, 8, 8)] {
        let m = Mha::new(c, heads, &mut rng).unwrap();
        let x = random_tensor(&[l, c], &mut rng);
        let got = mha_1d(&x, &m).unwrap();
        for (g, w) in got.data().iter().zip(naive_mha(x.data(), l, &m)) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}

#[test]
fn every_softmax_row_sums_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = Mha::new(8, 4, &mut rng).unwrap();
    let x = random_tensor(&[3, 11, 8], &mut rng).map(|v| 20.0 * v);
    let (_, cache) = m.forward(&x).unwrap();
    let probs = cache.probs();
    assert_eq!(probs.len(), 3 * 4 * 11 * 11);
    for row in probs.chunks(11) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}

fn transpose_chw(x: &Tensor, to: impl Fn(usize, usize, usize) -> usize) -> Vec<f64> {
    let [c, h, w] = [x.dim(0), x.dim(1), x.dim(2)];
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                out[to(ch, r, col)] = x.data()[(ch * h + r) * w + col];
            }
        }
    }
    out
}

/// Axial attention rebuilt from per-row and per-column sequence calls.
fn composed_axial(x: &Tensor, a: &AxialAttention) -> Vec<f64> {
    let [c, h, w] = [x.dim(0), x.dim(1), x.dim(2)];
    let rows = Tensor::new(&[h * w, c], transpose_chw(x, |ch, r, col| (r * w + col) * c + ch)).unwrap();
    let cols = Tensor::new(&[w * h, c], transpose_chw(x, |ch, r, col| (col * h + r) * c + ch)).unwrap();
    let nw = layer_norm(&rows, a.norm_w.gamma.value.data(), a.norm_w.beta.value.data(), a.norm_w.eps).unwrap();
    let nh = layer_norm(&cols, a.norm_h.gamma.value.data(), a.norm_h.beta.value.data(), a.norm_h.eps).unwrap();
    let mut out = x.data().to_vec();
    for r in 0..h {
        let seq = Tensor::new(&[w, c], nw.data()[r * w * c..(r + 1) * w * c].to_vec()).unwrap();
        let y = mha_1d(&seq, &a.mha_w).unwrap();
        for col in 0..w {
            for ch in 0..c {
                out[(ch * h + r) * w + col] += y.data()[col * c + ch];
            }
        }
    }
    for col in 0..w {
        let seq = Tensor::new(&[h, c], nh.data()[col * h * c..(col + 1) * h * c].to_vec()).unwrap();
        let y = mha_1d(&seq, &a.mha_h).unwrap();
        for r in 0..h {
            for ch in 0..c {
                out[(ch * h + r) * w + col] += y.data()[r * c + ch];
            }
        }
    }
    out
}

#[test]
fn axial_attention_is_two_sequence_passes_plus_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = AxialAttention::new(8, 4, &mut rng).unwrap();
    let x = random_tensor(&[8, 5, 6], &mut rng);
    let got = axial_attention(&x, &a).unwrap();
    for (g, w) in got.data().iter().zip(composed_axial(&x, &a)) {
        assert!((g - w).abs() < 1e-12);
    }
}

fn permute_axis(x: &Tensor, axis: usize, perm: &[usize]) -> Tensor {
    let [c, h, w] = [x.dim(0), x.dim(1), x.dim(2)];
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, r, col) = (i / (h * w), (i / w) % h, i % w);
        let (r, col) = if axis == 1 { (perm[r], col) } else { (r, perm[col]) };
        x.data()[(ch * h + r) * w + col]
    })
}

#[test]
fn core_work_scales_with_hwc_times_h_plus_w() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = 8;
    let a = AxialAttention::new(c, 4, &mut rng).unwrap();
    let mut points = Vec::new();
    for (h, w) in [(4, 6), (8, 12), (16, 24)] {
        let (_, cache) = a.forward(&random_tensor(&[c, h, w], &mut rng)).unwrap();
        let (mw, mh) = cache.core_macs();
        let predicted = (h * w * c * (h + w)) as f64;
        assert_eq!(mw + mh, 2 * (h * w * c * (h + w)) as u64);
        points.push((predicted.ln(), ((mw + mh) as f64).ln()));
    }
    let slope = (points[2].1 - points[0].1) / (points[2].0 - points[0].0);
    assert!((slope - 1.0).abs() <= 0.1, "slope {slope}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn axial_attention_commutes_with_row_and_column_permutations(
        seed in any::<u64>(),
        h in 2usize..7,
        w in 2usize..7,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = AxialAttention::new(4, 2, &mut rng).unwrap();
        let x = random_tensor(&[4, h, w], &mut rng);
        let y = axial_attention(&x, &a).unwrap();
        for (axis, n) in [(1, h), (2, w)] {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.rotate_left(1 + seed as usize % n);
            perm.swap(0, n - 1);
            let lhs = axial_attention(&permute_axis(&x, axis, &perm), &a).unwrap();
            let rhs = permute_axis(&y, axis, &perm);
            for (p, q) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gate_coefficients_are_probabilities(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = AttentionGate::new(3, 5, 4, &mut rng);
        let skip = random_tensor(&[3, 4, 5], &mut rng).map(|v| scale * v);
        let ctx = random_tensor(&[5, 4, 5], &mut rng).map(|v| scale * v);
        let (y, cache) = g.forward(&skip, &ctx).unwrap();
        prop_assert!(cache.gate().iter().all(|&a| (0.0..=1.0).contains(&a)));
        prop_assert!(y.data().iter().zip(skip.data()).all(|(o, s)| o.abs() <= s.abs()));
        let again = attention_gate(&skip, &ctx, &g).unwrap();
        prop_assert_eq!(y.data(), again.data());
    }
}
