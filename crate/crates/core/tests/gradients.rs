//! Autograd gradients against central finite differences, in double precision.

use candle_core::{DType, Device, Tensor, Var};
use ldpm_core::data::{generate_dataset, DatasetSpec, Sample};
use ldpm_core::generator::{mrcn_loss, ControlDenoiser, GeneratorConfig, ScheduleConfig};
use ldpm_core::nn::{scalar, seeded_randn, vars_sorted};
use ldpm_core::sampler::{delta_gradient, guidance_refine, masked_kspace_loss, Measurement};
use ldpm_core::vae::{vae_loss, GaussianPosterior, LossWeights, VaeConfig, VaeModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    seeded_randn(shape, &mut ChaCha8Rng::seed_from_u64(seed), DType::F64, &Device::Cpu).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

fn tiny_vae() -> VaeModel {
    VaeModel::new(VaeConfig { base_width: 4, ..Default::default() }, DType::F64).unwrap()
}

fn test_sample() -> Sample {
    let spec = DatasetSpec { n_train: 1, n_val: 0, n_test: 1, image_size: (32, 32), seed: 11, ..Default::default() };
    generate_dataset(&spec).unwrap().test.remove(0)
}

#[test]
fn vae_loss_gradient_in_reconstruction() {
    let vae = tiny_vae();
    let x = (randn(&[1, 1, 8, 8], 1) * 0.2).unwrap().affine(1.0, 0.5).unwrap();
    let x_hat = (&x + (randn(&[1, 1, 8, 8], 2) * 0.1).unwrap()).unwrap();
    let post = GaussianPosterior::new(randn(&[1, 4, 2, 2], 3), randn(&[1, 4, 2, 2], 4).exp().unwrap()).unwrap();
    let w = LossWeights { mu: 1.0, nu: 0.5, omega: 0.1 };
    let loss = |t: &Tensor| scalar(&vae_loss(vae.extractor(), t, &x, &post, &w).unwrap().total).unwrap();

    let var = Var::from_tensor(&x_hat).unwrap();
    let total = vae_loss(vae.extractor(), var.as_tensor(), &x, &post, &w).unwrap().total;
    let grad = total.backward().unwrap().get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();

    let base = x_hat.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let h = 1e-6;
    let fd: Vec<f64> = (0..base.len())
        .map(|i| {
            let bump = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                loss(&Tensor::from_vec(v, (1, 1, 8, 8), &Device::Cpu).unwrap())
            };
            (bump(h) - bump(-h)) / (2.0 * h)
        })
        .collect();
    let err = rel_err(&grad, &fd);
    assert!(err <= 1e-3, "relative error {err}");
}

#[test]
fn mrcn_loss_gradient_in_control_parameters() {
    let cfg = GeneratorConfig {
        width: 8,
        time_features: 8,
        null_dim: 4,
        schedule: ScheduleConfig { steps: 50, ..Default::default() },
        ..Default::default()
    };
    let model = ControlDenoiser::new(cfg, DType::F64).unwrap();
    let z = randn(&[2, 4, 4, 4], 5);
    let eps = randn(&[2, 4, 4, 4], 6);
    let c = randn(&[2, 4, 4, 4], 7);
    let ts = [3, 41];
    // move the connectors off zero so every control parameter receives gradient
    for v in vars_sorted(model.control_vars()) {
        v.set(&(v.as_tensor() + randn(v.dims(), 8).affine(0.05, 0.0).unwrap()).unwrap()).unwrap();
    }
    let loss = mrcn_loss(&model, &z, &ts, &eps, Some(&c)).unwrap();
    let grads = loss.backward().unwrap();
    let h = 1e-5;
    let mut checked = 0;
    for var in vars_sorted(model.control_vars()).into_iter().step_by(5) {
        let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let orig = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let idx = orig.len() / 2;
        let eval = |d: f64| {
            let mut v = orig.clone();
            v[idx] += d;
            var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap()).unwrap();
            scalar(&mrcn_loss(&model, &z, &ts, &eps, Some(&c)).unwrap()).unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        var.set(&Tensor::from_vec(orig, var.shape(), &Device::Cpu).unwrap()).unwrap();
        let scale = fd.abs().max(g[idx].abs()).max(1e-6);
        assert!((fd - g[idx]).abs() / scale <= 1e-3, "fd {fd} vs autograd {}", g[idx]);
        checked += 1;
    }
    assert!(checked > 5);
}

#[test]
fn guidance_gradient_through_decoder() {
    let vae = tiny_vae();
    let s = test_sample();
    let meas = Measurement { k_u: &s.k_u, mask: &s.mask };
    let z = randn(&[1, 4, 8, 8], 9);
    let (grad, _) = delta_gradient(&z, meas, &vae).unwrap();
    let grad = grad.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let delta = |v: &[f64]| {
        let t = Tensor::from_vec(v.to_vec(), (1, 4, 8, 8), &Device::Cpu).unwrap();
        let x = ldpm_core::nn::tensor_to_image(&vae.decode_latent(&t).unwrap()).unwrap();
        masked_kspace_loss(&x, meas).unwrap().0
    };
    let base = z.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let h = 1e-6;
    let fd: Vec<f64> = (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] += h;
            let mut m = base.clone();
            m[i] -= h;
            (delta(&p) - delta(&m)) / (2.0 * h)
        })
        .collect();
    let err = rel_err(&grad, &fd);
    assert!(err <= 1e-3, "relative error {err}");
}

#[test]
fn small_guidance_steps_do_not_increase_delta() {
    let vae = tiny_vae();
    let s = test_sample();
    let meas = Measurement { k_u: &s.k_u, mask: &s.mask };
    let z = randn(&[1, 4, 8, 8], 10);
    let before = delta_gradient(&z, meas, &vae).unwrap().1;
    for g in [1e-4, 1e-3] {
        let (z1, d0) = guidance_refine(&z, meas, &vae, g).unwrap();
        assert_eq!(d0, before);
        let after = delta_gradient(&z1, meas, &vae).unwrap().1;
        assert!(after <= before * (1.0 + 1e-8), "g={g}: {after} > {before}");
    }
}
