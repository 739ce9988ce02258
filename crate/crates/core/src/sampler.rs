//! Dual-stage sampler: deterministic DDIM updates in latent space, with the
//! clean-latent estimate refined by k-space data consistency at high noise
//! levels (`t > p`) and by a gradient step on the masked k-space loss below.

use candle_core::{Tensor, Var};
use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{ControlDenoiser, NoiseSchedule};
use crate::kspace::{
    data_consistency, forward_fft, inverse_fft, ComplexImage, KSpaceData, MagnitudeImage, SamplingMask,
};
use crate::nn::{image_to_tensor, scalar, seeded_randn, tensor_to_image};
use crate::vae::VaeModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Stage threshold: data consistency while `t > p`, guidance otherwise.
    pub p: usize,
    /// Guidance scale.
    pub g: f64,
    /// Number of inference steps, evenly strided over `[1, T]`.
    pub steps: usize,
    pub record_trace: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { p: 200, g: 0.1, steps: 50, record_trace: false }
    }
}

impl SamplerConfig {
    /// Sampler without refinement: every step is a guidance step with zero scale.
    pub fn plain_ddim(schedule_len: usize, steps: usize) -> Self {
        Self { p: schedule_len, g: 0.0, steps, record_trace: false }
    }

    pub fn validate(&self, schedule_len: usize) -> Result<()> {
        if self.p > schedule_len {
            return Err(Error::InvalidInput(format!("stage threshold p = {} exceeds T = {schedule_len}", self.p)));
        }
        if !(self.g >= 0.0 && self.g.is_finite()) {
            return Err(Error::InvalidInput(format!("guidance scale must be >= 0, got {}", self.g)));
        }
        if self.steps == 0 || self.steps > schedule_len {
            return Err(Error::InvalidInput(format!("steps must lie in [1, {schedule_len}], got {}", self.steps)));
        }
        Ok(())
    }

    /// Descending timesteps `t_k = (S − k)·T / S` for `k = 0..S`.
    pub fn timesteps(&self, schedule_len: usize) -> Result<Vec<usize>> {
        self.validate(schedule_len)?;
        let s = self.steps;
        Ok((0..s).map(|k| (s - k) * schedule_len / s).collect())
    }

    pub fn stage(&self, t: usize) -> Stage {
        if t > self.p {
            Stage::Dc
        } else {
            Stage::Guidance
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Dc,
    Guidance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub stage: Stage,
    /// Masked k-space loss before the guidance update; absent in the DC stage.
    pub delta: Option<f64>,
    /// `‖(F(𝒟(ẑ₀)) − k_u)·M‖₂` of the unrefined clean-latent estimate.
    pub residual_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub records: Vec<StepRecord>,
}

impl SampleTrace {
    /// `(DC steps, guidance steps)`.
    pub fn stage_counts(&self) -> (usize, usize) {
        let dc = self.records.iter().filter(|r| r.stage == Stage::Dc).count();
        (dc, self.records.len() - dc)
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Anything that predicts the noise in `z_t` at timestep `t` given a condition latent.
pub trait NoisePredictor {
    fn schedule(&self) -> &NoiseSchedule;
    fn predict(&self, z_t: &Tensor, t: usize, c_latent: &Tensor) -> Result<Tensor>;
}

impl NoisePredictor for ControlDenoiser {
    fn schedule(&self) -> &NoiseSchedule {
        ControlDenoiser::schedule(self)
    }

    fn predict(&self, z_t: &Tensor, t: usize, c_latent: &Tensor) -> Result<Tensor> {
        self.predict_noise(z_t, &[t], c_latent)
    }
}

/// Undersampled measurement and its mask.
#[derive(Debug, Clone, Copy)]
pub struct Measurement<'a> {
    pub k_u: &'a KSpaceData,
    pub mask: &'a SamplingMask,
}

/// `(z_t − √(1 − α_t)·ε̂) / √α_t`.
pub fn predict_clean_latent(z_t: &Tensor, eps_hat: &Tensor, schedule: &NoiseSchedule, t: usize) -> Result<Tensor> {
    let a = schedule.step_alpha(t)?;
    Ok((z_t - eps_hat.affine((1.0 - a).sqrt(), 0.0)?)?.affine(1.0 / a.sqrt(), 0.0)?)
}

/// `δ = ‖(F(x) − k_u)·M‖₂²` and its gradient `2·Re F⁻¹[(F(x) − k_u)·M]` for a real image `x`.
pub fn masked_kspace_loss(x: &Array2<f64>, meas: Measurement) -> Result<(f64, Array2<f64>)> {
    let k = forward_fft(&ComplexImage::new(x.mapv(|v| Complex64::new(v, 0.0)))?);
    let mut r = k.into_inner() - meas.k_u.data();
    for (j, mut col) in r.axis_iter_mut(Axis(1)).enumerate() {
        if !meas.mask.is_sampled(j) {
            col.fill(Complex64::new(0.0, 0.0));
        }
    }
    let delta = r.iter().map(|v| v.norm_sqr()).sum();
    let grad = inverse_fft(&KSpaceData::new(r)?).real_part().mapv(|v| 2.0 * v);
    Ok((delta, grad))
}

/// Decoded image of the first latent, unclamped.
fn decode_raw_image(vae: &VaeModel, z: &Tensor) -> Result<Array2<f64>> {
    tensor_to_image(&vae.decode_latent(z)?)
}

/// `ℰ[DC(𝒟(ẑ₀), k_u, M)]` with the decoder output clamped to `[0, 1]` and a
/// deterministic (mean) encoding of the magnitude.
pub fn dc_refine(z0_hat: &Tensor, meas: Measurement, vae: &VaeModel) -> Result<Tensor> {
    let x = decode_raw_image(vae, z0_hat)?;
    dc_refine_decoded(&x, meas, vae)
}

fn dc_refine_decoded(x: &Array2<f64>, meas: Measurement, vae: &VaeModel) -> Result<Tensor> {
    let x = MagnitudeImage::clamped(x.clone(), 0.0, 1.0)?;
    let dc = data_consistency(&ComplexImage::from_real(&x), meas.k_u, meas.mask)?.magnitude();
    vae.encode_latent(&image_to_tensor(dc.data(), vae.dtype(), vae.device())?)
}

/// `ẑ₀ − g·∇_{ẑ₀} δ` with `δ` the masked k-space loss of `𝒟(ẑ₀)`. Returns the
/// refined latent and `δ`.
pub fn guidance_refine(z0_hat: &Tensor, meas: Measurement, vae: &VaeModel, g: f64) -> Result<(Tensor, f64)> {
    let (grad, delta) = delta_gradient(z0_hat, meas, vae)?;
    if g == 0.0 {
        return Ok((z0_hat.clone(), delta));
    }
    Ok(((z0_hat - grad.affine(g, 0.0)?)?, delta))
}

/// `(∇_z δ, δ)` by back-propagating `⟨𝒟(z), ∂δ/∂x⟩` through the decoder.
pub fn delta_gradient(z: &Tensor, meas: Measurement, vae: &VaeModel) -> Result<(Tensor, f64)> {
    let var = Var::from_tensor(&z.detach())?;
    let x = vae.decode_latent(var.as_tensor())?;
    let (delta, g) = masked_kspace_loss(&tensor_to_image(&x)?, meas)?;
    let g = image_to_tensor(&g, x.dtype(), x.device())?;
    let surrogate = (x * g)?.sum_all()?;
    let grads = surrogate.backward()?;
    let grad = grads
        .get(var.as_tensor())
        .ok_or_else(|| Error::NonFinite("decoder produced no gradient for the latent".into()))?
        .clone();
    let norm = scalar(&grad.sqr()?.sum_all()?)?;
    if !norm.is_finite() || !delta.is_finite() {
        return Err(Error::NonFinite(format!("guidance gradient (|grad|² = {norm}, delta = {delta})")));
    }
    Ok((grad, delta))
}

/// `√α_prev·ẑ₀′ + √(1 − α_prev)·ε̂`; `α_0 = 1` returns `ẑ₀′`.
fn ddim_update(z0: &Tensor, eps_hat: &Tensor, schedule: &NoiseSchedule, t_prev: usize) -> Result<Tensor> {
    if t_prev == 0 {
        return Ok(z0.clone());
    }
    let a = schedule.alpha(t_prev)?;
    Ok((z0.affine(a.sqrt(), 0.0)? + eps_hat.affine((1.0 - a).sqrt(), 0.0)?)?)
}

/// One sampler step from `t` to `t_prev`.
#[allow(clippy::too_many_arguments)]
pub fn dss_step(
    z_t: &Tensor,
    t: usize,
    t_prev: usize,
    denoiser: &dyn NoisePredictor,
    vae: &VaeModel,
    c_latent: &Tensor,
    meas: Measurement,
    cfg: &SamplerConfig,
) -> Result<(Tensor, StepRecord)> {
    if t_prev >= t {
        return Err(Error::InvalidInput(format!("sampler steps must decrease, got {t} -> {t_prev}")));
    }
    let schedule = denoiser.schedule();
    let eps_hat = denoiser.predict(z_t, t, c_latent)?;
    let z0 = predict_clean_latent(z_t, &eps_hat, schedule, t)?;
    let stage = cfg.stage(t);
    let (refined, delta, residual_norm) = match stage {
        Stage::Dc => {
            let x = decode_raw_image(vae, &z0)?;
            let residual = masked_kspace_loss(&x, meas)?.0.sqrt();
            (dc_refine_decoded(&x, meas, vae)?, None, residual)
        }
        Stage::Guidance if cfg.g == 0.0 && !cfg.record_trace => (z0, None, f64::NAN),
        Stage::Guidance => {
            let (z, delta) = guidance_refine(&z0, meas, vae, cfg.g)?;
            (z, Some(delta), delta.sqrt())
        }
    };
    let z_prev = ddim_update(&refined, &eps_hat, schedule, t_prev)?.detach();
    Ok((z_prev, StepRecord { t, stage, delta, residual_norm }))
}

/// Reconstruction and, when requested, its per-step trace.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub image: MagnitudeImage,
    pub trace: Option<SampleTrace>,
}

fn initial_latent(vae: &VaeModel, shape: (usize, usize), seed: u64) -> Result<Tensor> {
    let (c, h, w) = vae.latent_shape(shape)?;
    seeded_randn(&[1, c, h, w], &mut ChaCha8Rng::seed_from_u64(seed), vae.dtype(), vae.device())
}

/// Runs the dual-stage sampler from seeded noise `z_T` and decodes the result.
pub fn dss_sample(
    meas: Measurement,
    condition: &MagnitudeImage,
    denoiser: &dyn NoisePredictor,
    vae: &VaeModel,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<SampleOutput> {
    let steps = cfg.timesteps(denoiser.schedule().len())?;
    let c_latent = vae.encode_latent(&image_to_tensor(condition.data(), vae.dtype(), vae.device())?)?.detach();
    let mut z = initial_latent(vae, condition.shape(), seed)?;
    let mut trace = SampleTrace::default();
    for (k, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(k + 1).copied().unwrap_or(0);
        let (next, record) = dss_step(&z, t, t_prev, denoiser, vae, &c_latent, meas, cfg)?;
        z = next;
        if cfg.record_trace {
            trace.records.push(record);
        }
    }
    let image = MagnitudeImage::clamped(decode_raw_image(vae, &z)?, 0.0, 1.0)?;
    Ok(SampleOutput { image, trace: cfg.record_trace.then_some(trace) })
}

/// Deterministic DDIM without any measurement refinement.
pub fn ddim_sample(
    condition: &MagnitudeImage,
    denoiser: &dyn NoisePredictor,
    vae: &VaeModel,
    steps: usize,
    seed: u64,
) -> Result<MagnitudeImage> {
    let schedule = denoiser.schedule();
    let ts = SamplerConfig::plain_ddim(schedule.len(), steps).timesteps(schedule.len())?;
    let c_latent = vae.encode_latent(&image_to_tensor(condition.data(), vae.dtype(), vae.device())?)?.detach();
    let mut z = initial_latent(vae, condition.shape(), seed)?;
    for (k, &t) in ts.iter().enumerate() {
        let eps_hat = denoiser.predict(&z, t, &c_latent)?;
        let z0 = predict_clean_latent(&z, &eps_hat, schedule, t)?;
        z = ddim_update(&z0, &eps_hat, schedule, ts.get(k + 1).copied().unwrap_or(0))?.detach();
    }
    MagnitudeImage::clamped(decode_raw_image(vae, &z)?, 0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};
    use crate::generator::ScheduleConfig;
    use crate::vae::VaeConfig;
    use candle_core::{DType, Device};

    /// `ε̂ = a·z_t`.
    struct Linear {
        schedule: NoiseSchedule,
        a: f64,
    }

    impl NoisePredictor for Linear {
        fn schedule(&self) -> &NoiseSchedule {
            &self.schedule
        }

        fn predict(&self, z_t: &Tensor, _t: usize, _c: &Tensor) -> Result<Tensor> {
            Ok(z_t.affine(self.a, 0.0)?)
        }
    }

    fn tiny_vae() -> VaeModel {
        VaeModel::new(VaeConfig { base_width: 4, ..Default::default() }, DType::F64).unwrap()
    }

    fn sample() -> crate::data::Sample {
        let spec = DatasetSpec { n_train: 1, n_val: 0, n_test: 1, image_size: (32, 32), ..Default::default() };
        generate_dataset(&spec).unwrap().test.remove(0)
    }

    #[test]
    fn timesteps_and_stages() {
        let cfg = SamplerConfig::default();
        let ts = cfg.timesteps(1000).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (1000, 20));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        let full = SamplerConfig { steps: 1000, ..cfg.clone() }.timesteps(1000).unwrap();
        assert_eq!(full, (1..=1000).rev().collect::<Vec<_>>());
        assert_eq!(full.iter().filter(|&&t| cfg.stage(t) == Stage::Dc).count(), 800);
        assert!(SamplerConfig { p: 1001, ..cfg.clone() }.validate(1000).is_err());
        assert!(SamplerConfig { g: -1.0, ..cfg }.validate(1000).is_err());
    }

    #[test]
    fn clean_latent_inverts_noising() {
        let s = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = seeded_randn(&[1, 4, 8, 8], &mut rng, DType::F64, &Device::Cpu).unwrap();
        let eps = seeded_randn(&[1, 4, 8, 8], &mut rng, DType::F64, &Device::Cpu).unwrap();
        for t in [1, 200, 999] {
            let z_t = crate::generator::add_noise(&z, t, &eps, &s).unwrap();
            let back = predict_clean_latent(&z_t, &eps, &s, t).unwrap();
            let err = scalar(&(back - &z).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
            assert!(err <= 1e-10, "t={t}: {err}");
        }
    }

    #[test]
    fn kspace_loss_gradient_matches_differences() {
        let s = sample();
        let meas = Measurement { k_u: &s.k_u, mask: &s.mask };
        let x = s.zero_filled().data().mapv(|v| 0.8 * v + 0.05);
        let (_, g) = masked_kspace_loss(&x, meas).unwrap();
        let h = 1e-6;
        for (i, j) in [(3, 4), (16, 16), (30, 1)] {
            let mut p = x.clone();
            p[(i, j)] += h;
            let mut m = x.clone();
            m[(i, j)] -= h;
            let fd = (masked_kspace_loss(&p, meas).unwrap().0 - masked_kspace_loss(&m, meas).unwrap().0) / (2.0 * h);
            assert!((fd - g[(i, j)]).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[(i, j)]);
        }
        let (d0, g0) = masked_kspace_loss(s.ground_truth.data(), meas).unwrap();
        assert!(d0 < 1e-20);
        assert!(g0.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn zero_scale_guidance_is_identity() {
        let vae = tiny_vae();
        let s = sample();
        let meas = Measurement { k_u: &s.k_u, mask: &s.mask };
        let z = seeded_randn(&[1, 4, 8, 8], &mut ChaCha8Rng::seed_from_u64(1), DType::F64, &Device::Cpu).unwrap();
        let (out, delta) = guidance_refine(&z, meas, &vae, 0.0).unwrap();
        assert!(delta > 0.0);
        assert_eq!(scalar(&(out - &z).unwrap().abs().unwrap().sum_all().unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn dc_with_empty_mask_is_reencoding() {
        let vae = tiny_vae();
        let s = sample();
        let empty = SamplingMask::empty(32);
        let meas = Measurement { k_u: &s.k_u, mask: &empty };
        let z = seeded_randn(&[1, 4, 8, 8], &mut ChaCha8Rng::seed_from_u64(2), DType::F64, &Device::Cpu).unwrap();
        let refined = dc_refine(&z, meas, &vae).unwrap();
        let x = MagnitudeImage::clamped(decode_raw_image(&vae, &z).unwrap(), 0.0, 1.0).unwrap();
        let direct = vae.encode_latent(&image_to_tensor(x.data(), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let err = scalar(&(&refined - direct).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(err < 1e-10, "{err}");
        let again = dc_refine(&z, meas, &vae).unwrap();
        assert_eq!(scalar(&(refined - again).unwrap().abs().unwrap().sum_all().unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn two_step_linear_oracle() {
        let schedule = NoiseSchedule::new(ScheduleConfig { steps: 10, ..Default::default() }).unwrap();
        let den = Linear { schedule: schedule.clone(), a: 0.3 };
        let vae = tiny_vae();
        let s = sample();
        let meas = Measurement { k_u: &s.k_u, mask: &s.mask };
        let cfg = SamplerConfig { steps: 2, ..SamplerConfig::plain_ddim(10, 2) };
        let z = seeded_randn(&[1, 4, 8, 8], &mut ChaCha8Rng::seed_from_u64(3), DType::F64, &Device::Cpu).unwrap();
        let c = z.zeros_like().unwrap();
        let (z5, r1) = dss_step(&z, 10, 5, &den, &vae, &c, meas, &cfg).unwrap();
        let (z0, r2) = dss_step(&z5, 5, 0, &den, &vae, &c, meas, &cfg).unwrap();
        assert_eq!((r1.stage, r2.stage), (Stage::Guidance, Stage::Guidance));
        // each step scales z linearly: z_prev = [√a_p (1 − a√(1−a_t))/√a_t + a√(1−a_p)]·z_t
        let factor = |t: usize, tp: usize| {
            let at = schedule.alpha(t).unwrap();
            let ap = schedule.alpha(tp).unwrap();
            ap.sqrt() * (1.0 - 0.3 * (1.0 - at).sqrt()) / at.sqrt() + 0.3 * (1.0 - ap).sqrt()
        };
        let expected = z.affine(factor(10, 5) * factor(5, 0), 0.0).unwrap();
        let err = scalar(&(z0 - expected).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(err < 1e-12, "{err}");
    }
}
