use codenet::csc::{
    build_dense_oracle, factored_threshold, ista_step, run_csc_with, weighted_objective, CscProblem,
};
use codenet::density::{lwb_forward, rde, LwbParams, Matrix, WeightVector};
use codenet::metrics::{psnr, ssim};
use codenet::synth::{compose, generate_rain, make_corpus, preset, spike_map, Level, RainSpec};
use codenet::tensor::{conv2d, conv2d_adjoint, soft, soft_threshold};
use codenet::{KernelBank, Tensor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn bank(rng: &mut ChaCha8Rng, out: usize, inp: usize, s: usize) -> KernelBank {
    KernelBank::new(out, inp, s, (0..out * inp * s * s).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Zero-padded "same" cross-correlation by direct summation.
fn naive_conv(x: &Tensor, k: &KernelBank) -> Tensor {
    let (_, h, w) = x.shape();
    let s = k.size() as isize;
    let r = s / 2;
    let mut out = Tensor::zeros(k.out_channels(), h, w);
    for o in 0..k.out_channels() {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = 0.0;
                for i in 0..k.in_channels() {
                    for a in 0..s {
                        for b in 0..s {
                            let (yy, xs) = (y + a - r, xx + b - r);
                            if yy >= 0 && xs >= 0 && yy < h as isize && xs < w as isize {
                                acc += k.at(o, i, a as usize, b as usize)
                                    * x.at(i, yy as usize, xs as usize);
                            }
                        }
                    }
                }
                out.set(o, y as usize, xx as usize, acc);
            }
        }
    }
    out
}

/// The matrix of `x -> conv2d(x, k)` built column by column from unit impulses.
fn conv_matrix(k: &KernelBank, h: usize, w: usize) -> DMatrix<f64> {
    let n_in = k.in_channels() * h * w;
    let n_out = k.out_channels() * h * w;
    let mut m = DMatrix::zeros(n_out, n_in);
    for j in 0..n_in {
        let mut e = vec![0.0; n_in];
        e[j] = 1.0;
        let x = Tensor::from_vec(k.in_channels(), h, w, e).unwrap();
        let col = naive_conv(&x, k);
        for (i, v) in col.data().iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear(seed in any::<u64>(), s in prop::sample::select(vec![3usize, 5, 7]),
                      cin in 1usize..4, cout in 1usize..4, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = bank(&mut rng, cout, cin, s);
        let a = tensor(&mut rng, cin, 8, 7);
        let b = tensor(&mut rng, cin, 8, 7);
        let lhs = conv2d(&a.scale(alpha).add(&b.scale(beta)).unwrap(), &k).unwrap();
        let rhs = conv2d(&a, &k).unwrap().scale(alpha).add(&conv2d(&b, &k).unwrap().scale(beta)).unwrap();
        let scale = lhs.max_abs().max(rhs.max_abs()).max(1e-300);
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() / scale < 1e-10);
        }
    }

    #[test]
    fn conv_adjointness(seed in any::<u64>(), s in prop::sample::select(vec![3usize, 5, 7]),
                        cin in 1usize..=4, cout in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = bank(&mut rng, cout, cin, s);
        let a = tensor(&mut rng, cin, 8, 8);
        let b = tensor(&mut rng, cout, 8, 8);
        let lhs = conv2d(&a, &k).unwrap().dot(&b).unwrap();
        let rhs = a.dot(&conv2d_adjoint(&b, &k).unwrap()).unwrap();
        prop_assert!(rel(lhs, rhs) < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_matches_dense_matrix(seed in any::<u64>(), s in prop::sample::select(vec![3usize, 5, 7]),
                                 cin in 1usize..=2, cout in 1usize..=2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = bank(&mut rng, cout, cin, s);
        let x = tensor(&mut rng, cin, 8, 8);
        let m = conv_matrix(&k, 8, 8);
        let dense = &m * DVector::from_column_slice(x.data());
        let fast = conv2d(&x, &k).unwrap();
        for (a, b) in fast.data().iter().zip(dense.iter()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        let y = tensor(&mut rng, cout, 8, 8);
        let dense_t = m.transpose() * DVector::from_column_slice(y.data());
        let adj = conv2d_adjoint(&y, &k).unwrap();
        for (a, b) in adj.data().iter().zip(dense_t.iter()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn soft_threshold_is_odd_and_non_expansive(u in -5.0f64..5.0, v in -5.0f64..5.0, t in 0.0f64..3.0) {
        prop_assert_eq!(soft(-u, t), -soft(u, t));
        prop_assert!((soft(u, t) - soft(v, t)).abs() <= (u - v).abs() + 1e-15);
        let x = Tensor::from_vec(1, 1, 2, vec![u, -u]).unwrap();
        let y = soft_threshold(&x, &[t]).unwrap();
        prop_assert_eq!(y.data()[1], -y.data()[0]);
    }

    #[test]
    fn factored_threshold_identity(seed in any::<u64>(), c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = tensor(&mut rng, c, 5, 5).scale(3.0);
        let w: Vec<f64> = (0..c).map(|_| rng.gen_range(1e-3..=1.0)).collect();
        let theta: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..2.0)).collect();
        let f = factored_threshold(&v, &w, &theta).unwrap();
        let wt: Vec<f64> = w.iter().zip(&theta).map(|(a, b)| a * b).collect();
        let direct = soft_threshold(&v, &wt).unwrap();
        for (a, b) in f.data().iter().zip(direct.data()) {
            prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn lwb_weights_strictly_inside_unit_interval(seed in any::<u64>(), scale in prop::sample::select(vec![1e-3, 1.0, 1e3, 1e8])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 8;
        let fc1 = Matrix::from_vec(2, c, (0..2 * c).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()).unwrap();
        let fc2 = Matrix::from_vec(c, 2, (0..2 * c).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()).unwrap();
        let p = LwbParams::new(fc1, fc2).unwrap();
        let alpha = tensor(&mut rng, c, 4, 4).scale(scale);
        let (_, w) = lwb_forward(&alpha, &p).unwrap();
        prop_assert!(w.values().iter().all(|v| *v > 0.0 && *v < 1.0), "{:?}", w);
    }

    #[test]
    fn rde_is_symmetric_and_monotone(seed in any::<u64>(), i in 0usize..6, bump in 1e-6f64..0.2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..0.79)).collect();
        let base = rde(&WeightVector(w.clone()));
        let mut rev = w.clone();
        rev.reverse();
        prop_assert!((rde(&WeightVector(rev)) - base).abs() < 1e-15);
        w[i] += bump;
        prop_assert!(rde(&WeightVector(w)) > base);
    }

    #[test]
    fn psnr_and_ssim_are_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tensor(&mut rng, 3, 16, 16).map(|v| 0.5 + 0.4 * v);
        let b = tensor(&mut rng, 3, 16, 16).map(|v| 0.5 + 0.4 * v);
        prop_assert_eq!(psnr(&a, &b, true).unwrap(), psnr(&b, &a, true).unwrap());
        prop_assert_eq!(psnr(&a, &b, false).unwrap(), psnr(&b, &a, false).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn composition_is_exact_without_clipping(seed in any::<u64>(), level in prop::sample::select(Level::RAINY.to_vec())) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = preset(level, rng.gen_range(0.0..180.0), seed);
        let r = generate_rain(16, 16, &spec).unwrap();
        let headroom = 1.0 - r.max_abs();
        prop_assume!(headroom > 0.0);
        // 8-bit background below the rain headroom
        let x = Tensor::from_vec(3, 16, 16, (0..768)
            .map(|_| codenet::synth::level_value((rng.gen_range(0.0..headroom) * 255.0) as u8))
            .collect()).unwrap();
        let y = compose(&x, &r).unwrap();
        prop_assert_eq!(y.sub(&r).unwrap(), x);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ista_never_increases_the_objective(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dict = bank(&mut rng, 3, 1, 3);
        let signal = tensor(&mut rng, 1, 6, 6);
        let mut prob = CscProblem::with_estimated_lipschitz(signal, dict, rng.gen_range(0.01..0.5)).unwrap();
        prob.weights = (0..3).map(|_| rng.gen_range(0.05..=1.0)).collect();
        let mut prev = weighted_objective(&prob.zero_code(), &prob).unwrap();
        let mut ok = true;
        run_csc_with(&prob, 30, |_, z| {
            let f = weighted_objective(z, &prob).unwrap();
            ok &= f <= prev + 1e-10;
            prev = f;
        }).unwrap();
        prop_assert!(ok);
    }
}

#[test]
fn ista_trajectory_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dict = bank(&mut rng, 2, 2, 3);
    let signal = tensor(&mut rng, 2, 6, 6);
    let prob = CscProblem::with_estimated_lipschitz(signal.clone(), dict.clone(), 0.1).unwrap();
    let f = build_dense_oracle(&dict, 6, 6).unwrap();
    let r = signal.data().to_vec();
    let mut z = vec![0.0; f.cols()];
    let mut zc = prob.zero_code();
    for _ in 0..20 {
        let fz = f.apply(&z);
        let resid: Vec<f64> = r.iter().zip(&fz).map(|(a, b)| a - b).collect();
        let g = f.apply_transpose(&resid);
        let t = prob.lambda / prob.lipschitz;
        z = z.iter().zip(&g).map(|(a, b)| soft(a + b / prob.lipschitz, t)).collect();
        zc = ista_step(&zc, &prob).unwrap();
        for (a, b) in zc.data().iter().zip(&z) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}

#[test]
fn corpus_psnr_decreases_with_level() {
    let corpus = make_corpus(60, 48, 5).unwrap();
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 4];
    for it in &corpus {
        sums[it.level.rank()] += psnr(&it.rainy, &it.clean, true).unwrap();
        counts[it.level.rank()] += 1;
    }
    let means: Vec<f64> = (1..4).map(|i| sums[i] / counts[i] as f64).collect();
    assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
    assert!(means[0] - means[2] > 10.0, "{means:?}");
}

#[test]
fn spike_counts_are_binomial() {
    let (h, w) = (32, 32);
    let n = (h * w) as f64;
    for density in [0.002, 0.01, 0.05, 0.3] {
        let sigma = (n * density * (1.0 - density)).sqrt();
        let mut total = 0.0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let count = spike_map(h, w, density, &mut rng).count_nonzero() as f64;
            total += count;
        }
        // mean of 100 draws has standard deviation sigma / 10
        let mean = total / 100.0;
        assert!((mean - n * density).abs() <= 3.0 * sigma / 10.0, "density {density}: {mean}");
    }
}

#[test]
fn zero_density_gives_no_rain() {
    let spec = RainSpec {
        density: 0.0,
        ..preset(Level::Heavy, 90.0, 1)
    };
    assert_eq!(generate_rain(12, 12, &spec).unwrap().max_abs(), 0.0);
}
