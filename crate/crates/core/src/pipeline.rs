//! End-to-end reconstruction `k_u, M → x̂` with switches that remove one
//! component at a time.

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, Sample};
use crate::error::Result;
use crate::generator::{condition_image, ControlDenoiser};
use crate::kspace::{zero_filled_recon, KSpaceData, MagnitudeImage, SamplingMask};
use crate::metrics::{evaluate, MetricReport};
use crate::sampler::{dss_sample, Measurement, SampleOutput, SamplerConfig};
use crate::sketcher::RepairModel;
use crate::vae::VaeModel;

/// Components to disable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Condition on the zero-filled image instead of the sketch.
    pub no_skm: bool,
    /// Replace the trained autoencoder by an untrained one of the same shape.
    pub no_mrvae: bool,
    /// Plain deterministic DDIM: no data consistency and no guidance.
    pub no_dss: bool,
}

impl Ablation {
    pub const FULL: Self = Self { no_skm: false, no_mrvae: false, no_dss: false };

    /// The full method followed by the three single-component ablations.
    pub fn study() -> [Self; 4] {
        [
            Self::FULL,
            Self { no_skm: true, ..Self::FULL },
            Self { no_mrvae: true, ..Self::FULL },
            Self { no_dss: true, ..Self::FULL },
        ]
    }

    pub fn name(&self) -> String {
        let parts: Vec<&str> = [(self.no_skm, "no_skm"), (self.no_mrvae, "no_mrvae"), (self.no_dss, "no_dss")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

/// Trained sketcher, autoencoder and generator.
pub struct Models {
    pub sketcher: RepairModel,
    pub vae: VaeModel,
    pub generator: ControlDenoiser,
    untrained_vae: VaeModel,
}

impl Models {
    pub fn new(sketcher: RepairModel, vae: VaeModel, generator: ControlDenoiser) -> Result<Self> {
        let untrained_vae = VaeModel::new(vae.config().clone(), DType::F32)?;
        Ok(Self { sketcher, vae, generator, untrained_vae })
    }

    fn vae_for(&self, ablation: Ablation) -> &VaeModel {
        if ablation.no_mrvae {
            &self.untrained_vae
        } else {
            &self.vae
        }
    }
}

/// Reconstructs one slice from its measurement.
pub fn reconstruct(
    models: &Models,
    k_u: &KSpaceData,
    mask: &SamplingMask,
    ablation: Ablation,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<SampleOutput> {
    let x_u = zero_filled_recon(k_u);
    let condition = if ablation.no_skm { x_u } else { condition_image(&models.sketcher, &x_u, k_u, mask)? };
    let cfg = if ablation.no_dss {
        SamplerConfig { record_trace: sampler.record_trace, ..SamplerConfig::plain_ddim(models.generator.schedule().len(), sampler.steps) }
    } else {
        sampler.clone()
    };
    let meas = Measurement { k_u, mask };
    dss_sample(meas, &condition, &models.generator, models.vae_for(ablation), &cfg, seed)
}

/// Per-sample sampling seed.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// Scores `ablation` on `samples`; sample `i` is drawn with [`sample_seed`]`(seed, i)`.
pub fn evaluate_method(
    models: &Models,
    samples: &[Sample],
    ablation: Ablation,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<MetricReport> {
    let mut index = 0;
    evaluate(&ablation.name(), samples, |s| {
        let out = reconstruct(models, &s.k_u, &s.mask, ablation, sampler, sample_seed(seed, index))?;
        index += 1;
        Ok(out.image)
    })
}

/// Zero-filled baseline.
pub fn evaluate_zero_filled(samples: &[Sample]) -> Result<MetricReport> {
    evaluate("zero_filled", samples, |s| Ok(s.zero_filled()))
}

/// Sketch-only baseline `|DC[R(x_u), k_u, M]|`.
pub fn evaluate_sketch(sketcher: &RepairModel, samples: &[Sample]) -> Result<MetricReport> {
    evaluate("sketch", samples, |s| -> Result<MagnitudeImage> {
        let c = condition_image(sketcher, &s.zero_filled(), &s.k_u, &s.mask)?;
        MagnitudeImage::clamped(c.into_inner(), 0.0, 1.0)
    })
}
