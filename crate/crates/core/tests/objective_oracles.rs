//! Loss and metric implementations against the scalar-loop references.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use usfnet_autograd::{Graph, Tensor};
use usfnet_core::objectives::{metric_suite, ms_ssim, msssim_loss, weighted_ce_loss, SsimParams};
use usfnet_core::oracle;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 0.0, 1.0, rng)
}

#[test]
fn msssim_matches_scalar_reference_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for mode in 0..2 {
        let mut p = SsimParams::flat(2, 1.0);
        if mode == 1 {
            p = SsimParams::standard(2, 1.0);
            p.per_level_luminance = true;
        }
        for _ in 0..25 {
            let x = uniform(&[44, 44], &mut rng);
            // correlated pair so every term is well away from the floor
            let n = uniform(&[44, 44], &mut rng);
            let y = Tensor::from_fn(&[44, 44], |i| 0.7 * x.data()[i] + 0.3 * n.data()[i]);
            let a = ms_ssim(&x, &y, &p).unwrap();
            let b = oracle::scalar_msssim(&x, &y, &p);
            assert!((a - b).abs() < 1e-6, "production {a} vs oracle {b}");
        }
    }
}

#[test]
fn checkerboard_against_its_inverse() {
    let x = Tensor::from_fn(&[48, 48], |i| ((i / 48 + i % 48) % 2) as f64);
    let y = x.map(|v| 1.0 - v);
    let p = SsimParams::flat(3, 1.0);
    let a = ms_ssim(&x, &y, &p).unwrap();
    let b = oracle::scalar_msssim(&x, &y, &p);
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    assert!(a < 0.6);
}

#[test]
fn msssim_symmetry_identity_and_noise_monotonicity() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p = SsimParams::flat(3, 1.0);
    let x = Tensor::from_fn(&[64, 64], |i| 0.5 + 0.3 * ((i / 64) as f64 * 0.2).sin() * ((i % 64) as f64 * 0.15).cos());
    let noise = Tensor::randn(&[64, 64], &mut rng);
    assert_eq!(ms_ssim(&x, &x, &p).unwrap(), 1.0);
    let mut last = 1.0;
    for level in [0.02, 0.05, 0.1, 0.2, 0.4] {
        let y = Tensor::from_fn(&[64, 64], |i| (x.data()[i] + level * noise.data()[i]).clamp(0.0, 1.0));
        let v = ms_ssim(&x, &y, &p).unwrap();
        let w = ms_ssim(&y, &x, &p).unwrap();
        assert!((v - w).abs() < 1e-9);
        let o = oracle::scalar_msssim(&x, &y, &p);
        assert!(o < last, "noise {level}: {o} !< {last}");
        last = o;
    }
}

#[test]
fn msssim_loss_bounds_on_random_pairs() {
    // 10^4 random pairs, evaluated as one batch of image planes.
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p = SsimParams::flat(1, 1.0);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let g = Graph::new();
        let shape = [10, 100, 1, 11, 11];
        let scale = Tensor::uniform(&[10, 100, 1, 1, 1], 0.0, 1.0, &mut rng);
        let a = Tensor::from_fn(&shape, |i| rng_like(i, 1) * scale.data()[i / 121]);
        let b = uniform(&shape, &mut rng);
        let x = g.constant(a.reshape(&[1000, 1, 1, 11, 11]).unwrap());
        let y = g.constant(b.reshape(&[1000, 1, 1, 11, 11]).unwrap());
        let img = usfnet_core::objectives::ms_ssim_images(
            x.reshape(&[1000, 1, 11, 11]).unwrap(),
            y.reshape(&[1000, 1, 11, 11]).unwrap(),
            &p,
        )
        .unwrap();
        for v in img.value().data() {
            let loss = 1.0 - v;
            assert!((0.0..=2.0).contains(&loss), "loss {loss}");
            worst = worst.max(loss);
        }
        let l = msssim_loss(x, y, &p).unwrap().value().item();
        assert!((0.0..=2.0).contains(&l));
    }
    assert!(worst > 0.5);
}

fn rng_like(i: usize, salt: u64) -> f64 {
    let v = ((i as u64).wrapping_mul(6364136223846793005).wrapping_add(salt * 1442695040888963407) >> 11) as f64;
    v / (1u64 << 53) as f64
}

#[test]
fn decorrelated_noise_pair_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = uniform(&[176, 176], &mut rng);
    let b = uniform(&[176, 176], &mut rng);
    let standard = 1.0 - ms_ssim(&a, &b, &SsimParams::standard(5, 1.0)).unwrap();
    assert!(standard > 0.5, "standard exponents: {standard}");
    // with the flat 0.0448 exponent the coarse levels, whose variance falls
    // below c2, pull the value back towards one
    let p = SsimParams::flat(5, 1.0);
    let flat = 1.0 - ms_ssim(&a, &b, &p).unwrap();
    let reference = 1.0 - oracle::scalar_msssim(&a, &b, &p);
    assert!((flat - reference).abs() < 1e-6);
    assert!(flat > 0.3 && flat < standard, "flat exponents: {flat}");
}

#[test]
fn weighted_ce_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let shape = [2, 3, 1, 5, 4];
    let a = uniform(&shape, &mut rng);
    let b = uniform(&shape, &mut rng);
    let g = Graph::new();
    let got = weighted_ce_loss(g.constant(a.clone()), g.constant(b.clone()), 0.9, 1e-7).unwrap().value().item();
    let eps = 1e-7;
    let per = 2 * 5 * 4;
    let mut expected = 0.0;
    for t in 0..3 {
        let mut acc = 0.0;
        for bi in 0..2 {
            for j in 0..20 {
                let idx = (bi * 3 + t) * 20 + j;
                let p = a.data()[idx].clamp(eps, 1.0 - eps);
                let y = b.data()[idx].clamp(eps, 1.0 - eps);
                acc += y * (y / p).ln() + (1.0 - y) * ((1.0 - y) / (1.0 - p)).ln();
            }
        }
        expected += 0.9f64.powi(t as i32 + 1) * acc / per as f64;
    }
    assert!((got - expected).abs() < 1e-8, "{got} vs {expected}");
}

#[test]
fn ce_on_exact_binary_targets_is_within_eps_bound() {
    let x = Tensor::from_fn(&[1, 2, 1, 4, 4], |i| (i % 2) as f64);
    let g = Graph::new();
    let v = weighted_ce_loss(g.constant(x.clone()), g.constant(x), 0.9, 1e-7).unwrap().value().item();
    assert!(v.abs() <= 10.0 * 1e-7);
}

#[test]
fn metrics_match_scalar_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let shape = [2, 3, 1, 24, 24];
    let a = uniform(&shape, &mut rng);
    let b = Tensor::from_fn(&shape, |i| (a.data()[i] * 0.8 + 0.1 * rng_like(i, 3)).clamp(0.0, 1.0));
    let table = metric_suite(&a, &b, 1.0).unwrap();
    let p = SsimParams::flat(1, 1.0);
    for f in &table.frames {
        let bi: usize = f.sequence.parse().unwrap();
        let pf = a.narrow(0, bi, 1).unwrap().narrow(1, f.step - 1, 1).unwrap().into_reshape(&[24, 24]).unwrap();
        let tf = b.narrow(0, bi, 1).unwrap().narrow(1, f.step - 1, 1).unwrap().into_reshape(&[24, 24]).unwrap();
        let mse = oracle::scalar_mse(&pf, &tf);
        assert!((f.mse - mse).abs() < 1e-12);
        assert!((f.ssim - oracle::scalar_ssim(&pf, &tf, &p)).abs() < 1e-6);
        assert!((f.psnr - 10.0 * (1.0 / mse).log10()).abs() < 1e-6);
    }
    assert_eq!(table.steps.len(), 3);
}
