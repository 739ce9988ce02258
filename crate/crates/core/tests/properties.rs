use candle_core::{Device, Tensor};
use ldpm_core::data::generate_mask;
use ldpm_core::generator::{add_noise, NoiseSchedule};
use ldpm_core::kspace::{
    data_consistency, forward_fft, inverse_fft, rss_combine, undersample, ComplexImage, KSpaceData, SamplingMask,
};
use ldpm_core::metrics::{psnr, ssim};
use ldpm_core::nn::scalar;
use ldpm_core::vae::{kl_divergence, GaussianPosterior};
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn complex_grid(h: usize, w: usize) -> impl Strategy<Value = Array2<Complex64>> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), h * w).prop_map(move |v| {
        Array2::from_shape_vec((h, w), v.into_iter().map(|(a, b)| Complex64::new(a, b)).collect()).unwrap()
    })
}

fn real_grid(h: usize, w: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(0.0f64..1.0, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
}

fn mask(w: usize) -> impl Strategy<Value = SamplingMask> {
    (any::<u64>(), prop_oneof![Just(4.0), Just(8.0)]).prop_map(move |(seed, af)| {
        let cf = if af >= 8.0 { 0.04 } else { 0.08 };
        generate_mask(w, af, cf, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    })
}

fn max_abs_diff(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fft_is_unitary(x in complex_grid(16, 12)) {
        let img = ComplexImage::new(x).unwrap();
        let k = forward_fft(&img);
        prop_assert!((k.norm() - img.norm()).abs() <= 1e-10 * img.norm());
        prop_assert!(max_abs_diff(inverse_fft(&k).data(), img.data()) <= 1e-12);
    }

    #[test]
    fn dc_invariants(x in complex_grid(32, 32), y in complex_grid(32, 32), m in mask(32)) {
        let x = ComplexImage::new(x).unwrap();
        let k_u = undersample(&forward_fft(&ComplexImage::new(y).unwrap()), &m).unwrap();
        let once = data_consistency(&x, &k_u, &m).unwrap();
        let twice = data_consistency(&once, &k_u, &m).unwrap();
        prop_assert!(max_abs_diff(once.data(), twice.data()) <= 1e-12);

        let k = forward_fft(&once);
        for j in (0..32).filter(|&j| m.is_sampled(j)) {
            for i in 0..32 {
                prop_assert!((k.data()[(i, j)] - k_u.data()[(i, j)]).norm() <= 1e-10);
            }
        }

        // a consistent image is a fixed point
        let consistent_k = undersample(&forward_fft(&x), &m).unwrap();
        let fixed = data_consistency(&x, &consistent_k, &m).unwrap();
        prop_assert!(max_abs_diff(fixed.data(), x.data()) <= 1e-12);

        let full = SamplingMask::full(32);
        let k_full = forward_fft(&once);
        let replaced = data_consistency(&x, &k_full, &full).unwrap();
        prop_assert!(max_abs_diff(replaced.data(), once.data()) <= 1e-12);
    }

    #[test]
    fn rss_ignores_per_coil_phase(
        coils in prop::collection::vec(complex_grid(8, 8), 1..4),
        phases in prop::collection::vec(0.0f64..std::f64::consts::TAU, 4),
    ) {
        let n = coils.len();
        let stack = |rot: bool| Array3::from_shape_fn((n, 8, 8), |(c, i, j)| {
            let v = coils[c][(i, j)];
            if rot { v * Complex64::from_polar(1.0, phases[c]) } else { v }
        });
        let a = rss_combine(&stack(false)).unwrap();
        let b = rss_combine(&stack(true)).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn masks_respect_budget(seed in any::<u64>(), w in 32usize..400, af8 in any::<bool>()) {
        let af = if af8 { 8.0 } else { 4.0 };
        let cf = if af8 { 0.04 } else { 0.08 };
        let m = generate_mask(w, af, cf, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let f = m.sampled_fraction();
        prop_assert!(f >= 0.8 / af && f <= 1.5 / af);
        let n = (cf * w as f64).round() as usize;
        let start = (w - n + 1) / 2;
        prop_assert!((start..start + n).all(|j| m.is_sampled(j)));
    }

    #[test]
    fn psnr_shift_invariant(a in real_grid(16, 16), b in real_grid(16, 16), s in -5.0f64..5.0) {
        prop_assume!(a != b);
        let p = psnr(&a, &b, 1.0).unwrap();
        let q = psnr(&a.mapv(|v| v + s), &b.mapv(|v| v + s), 1.0).unwrap();
        prop_assert!((p - q).abs() <= 1e-8);
    }

    #[test]
    fn ssim_symmetric_and_reflexive(a in real_grid(16, 16), b in real_grid(16, 16)) {
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn kl_is_nonnegative(u in prop::collection::vec(-3.0f64..3.0, 18), s in prop::collection::vec(0.05f64..4.0, 18)) {
        let dev = Device::Cpu;
        let mean = Tensor::from_vec(u.clone(), (1, 2, 3, 3), &dev).unwrap();
        let std = Tensor::from_vec(s.clone(), (1, 2, 3, 3), &dev).unwrap();
        let kl = scalar(&kl_divergence(&GaussianPosterior::new(mean, std).unwrap()).unwrap()).unwrap();
        prop_assert!(kl >= 0.0);
        let trivial = u.iter().all(|&v| v == 0.0) && s.iter().all(|&v| v == 1.0);
        prop_assert!(trivial || kl > 0.0);
    }

    #[test]
    fn add_noise_is_linear(
        z1 in prop::collection::vec(-2.0f64..2.0, 32),
        z2 in prop::collection::vec(-2.0f64..2.0, 32),
        e1 in prop::collection::vec(-2.0f64..2.0, 32),
        e2 in prop::collection::vec(-2.0f64..2.0, 32),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        t in 1usize..=1000,
    ) {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let dev = Device::Cpu;
        let v = |x: &Vec<f64>| Tensor::from_vec(x.clone(), (1, 2, 4, 4), &dev).unwrap();
        let (z1, z2, e1, e2) = (v(&z1), v(&z2), v(&e1), v(&e2));
        let comb = |p: &Tensor, q: &Tensor| (p.affine(a, 0.0).unwrap() + q.affine(b, 0.0).unwrap()).unwrap();
        let lhs = add_noise(&comb(&z1, &z2), t, &comb(&e1, &e2), &s).unwrap();
        let rhs = comb(&add_noise(&z1, t, &e1, &s).unwrap(), &add_noise(&z2, t, &e2, &s).unwrap());
        prop_assert_eq!(lhs.dims(), z1.dims());
        let err = scalar(&(lhs - rhs).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        prop_assert!(err <= 1e-12);
    }
}

#[test]
fn snr_strictly_decreases() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let snr: Vec<f64> = (1..=1000).map(|t| s.snr(t).unwrap()).collect();
    assert!(snr.windows(2).all(|w| w[1] < w[0]));
    assert!((1..=1000).all(|t| {
        let a = s.alpha(t).unwrap();
        a > 0.0 && a <= 1.0
    }));
}

#[test]
fn rejects_mismatched_measurements() {
    let x = ComplexImage::zeros(8, 8);
    let k = KSpaceData::zeros(8, 6);
    assert!(data_consistency(&x, &k, &SamplingMask::full(8)).is_err());
    assert!(undersample(&KSpaceData::zeros(8, 8), &SamplingMask::full(6)).is_err());
}
