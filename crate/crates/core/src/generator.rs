//! Conditioned latent denoiser: a small time-conditioned U-Net that is first
//! trained unconditionally and then frozen, plus a trainable control branch
//! that reads the condition latent and feeds the U-Net through zero-initialized
//! 1×1 connectors.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, GroupNorm, Linear, Module, Optimizer, ParamsAdamW, VarBuilder, VarMap};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{default_center_fraction, derive_seed, generate_mask, Sample};
use crate::error::{Error, Result};
use crate::kspace::{undersample, zero_filled_recon, MagnitudeImage, SamplingMask};
use crate::nn::{self, conv3x3, Conv, conv3x3_stride2, group_norm, images_to_tensor, scalar, seeded_builder, seeded_randn, zero_conv, ResBlock};
use crate::sketcher::{make_condition, RepairModel};
use crate::train::{EpochRecord, Snapshot, TrainingLog};
use crate::vae::VaeModel;

pub const CHECKPOINT_KIND: &str = "generator";

/// Linear-β schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Cumulative signal levels `α_t = ∏_{s≤t} (1 − β_s)` for `t = 1..=T`, with `α_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig { steps, beta_start, beta_end } = config;
        if steps < 2 {
            return Err(Error::InvalidInput(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidInput(format!("invalid beta range [{beta_start}, {beta_end}]")));
        }
        let mut alphas = Vec::with_capacity(steps + 1);
        alphas.push(1.0);
        let mut acc = 1.0;
        for i in 0..steps {
            let beta = beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64;
            acc *= 1.0 - beta;
            alphas.push(acc);
        }
        Ok(Self { config, alphas })
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::new(ScheduleConfig { steps, beta_start, beta_end })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    /// `T`.
    pub fn len(&self) -> usize {
        self.config.steps
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `α_t` for `0 ≤ t ≤ T`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.alphas
            .get(t)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("timestep {t} outside [0, {}]", self.len())))
    }

    /// Signal-to-noise ratio `α_t / (1 − α_t)` for `1 ≤ t ≤ T`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        let a = self.step_alpha(t)?;
        Ok(a / (1.0 - a))
    }

    /// `α_t` for a noising step, `1 ≤ t ≤ T`.
    pub fn step_alpha(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.len() {
            return Err(Error::InvalidInput(format!("timestep {t} outside [1, {}]", self.len())));
        }
        self.alpha(t)
    }
}

/// `√α_t·z + √(1 − α_t)·ε`.
pub fn add_noise(z: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if z.dims() != eps.dims() {
        return Err(Error::ShapeMismatch { expected: z.dims().to_vec(), got: eps.dims().to_vec() });
    }
    let a = schedule.step_alpha(t)?;
    Ok((z.affine(a.sqrt(), 0.0)? + eps.affine((1.0 - a).sqrt(), 0.0)?)?)
}

/// Per-item noising for a batch with one timestep per item.
fn add_noise_batch(z: &Tensor, ts: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let (sa, sb): (Vec<f64>, Vec<f64>) = ts
        .iter()
        .map(|&t| schedule.step_alpha(t).map(|a| (a.sqrt(), (1.0 - a).sqrt())))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let shape = (ts.len(), 1, 1, 1);
    let sa = Tensor::from_vec(sa, shape, z.device())?.to_dtype(z.dtype())?;
    let sb = Tensor::from_vec(sb, shape, z.device())?.to_dtype(z.dtype())?;
    Ok((z.broadcast_mul(&sa)? + eps.broadcast_mul(&sb)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub latent_channels: usize,
    /// U-Net channels at latent resolution; doubled at the lower level.
    pub width: usize,
    /// Width of the sinusoidal timestep features.
    pub time_features: usize,
    /// Length of the constant null conditioning vector.
    pub null_dim: usize,
    pub schedule: ScheduleConfig,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { latent_channels: 4, width: 32, time_features: 32, null_dim: 16, schedule: ScheduleConfig::default(), seed: 3 }
    }
}

impl GeneratorConfig {
    fn time_dim(&self) -> usize {
        4 * self.width
    }
}

fn timestep_features(ts: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(ts.len() * 2 * half);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            v.push((t as f64 * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            v.push((t as f64 * freq).sin());
        }
    }
    Ok(Tensor::from_vec(v, (ts.len(), 2 * half), device)?.to_dtype(dtype)?)
}

/// Time MLP plus a projection of the null conditioning vector.
struct Embedding {
    l1: Linear,
    l2: Linear,
    null_proj: Linear,
    null_dim: usize,
    features: usize,
}

impl Embedding {
    fn new(cfg: &GeneratorConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        let d = cfg.time_dim();
        let features = cfg.time_features / 2 * 2;
        Ok(Self {
            l1: candle_nn::linear(features, d, vb.pp("time.l1"))?,
            l2: candle_nn::linear(d, d, vb.pp("time.l2"))?,
            null_proj: candle_nn::linear(cfg.null_dim, d, vb.pp("null_proj"))?,
            null_dim: cfg.null_dim,
            features,
        })
    }

    fn forward(&self, ts: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let f = timestep_features(ts, self.features, dtype, device)?;
        let temb = self.l2.forward(&self.l1.forward(&f)?.silu()?)?;
        let null = Tensor::zeros((ts.len(), self.null_dim), dtype, device)?;
        Ok((temb + self.null_proj.forward(&null)?)?)
    }
}

/// Encoder half shared in layout by the base U-Net and the control branch.
struct EncoderHalf {
    conv_in: Conv,
    res0: ResBlock,
    down: Conv,
    res1: ResBlock,
    mid: ResBlock,
}

impl EncoderHalf {
    fn new(cfg: &GeneratorConfig, in_channels: usize, vb: &VarBuilder) -> candle_core::Result<Self> {
        let (w, td) = (cfg.width, Some(cfg.time_dim()));
        Ok(Self {
            conv_in: conv3x3(in_channels, w, vb.pp("conv_in"))?,
            res0: ResBlock::new(w, w, td, vb.pp("down0.res0"))?,
            down: conv3x3_stride2(w, 2 * w, vb.pp("down0.down"))?,
            res1: ResBlock::new(2 * w, 2 * w, td, vb.pp("down1.res0"))?,
            mid: ResBlock::new(2 * w, 2 * w, td, vb.pp("mid"))?,
        })
    }

    /// Returns the full-resolution skip, the half-resolution skip and the middle output.
    fn forward(&self, x: &Tensor, temb: &Tensor) -> candle_core::Result<[Tensor; 3]> {
        let h0 = self.res0.forward(&self.conv_in.forward(x)?, Some(temb))?;
        let h1 = self.res1.forward(&self.down.forward(&h0)?, Some(temb))?;
        let mid = self.mid.forward(&h1, Some(temb))?;
        Ok([h0, h1, mid])
    }
}

struct BaseUnet {
    embed: Embedding,
    enc: EncoderHalf,
    up1: ResBlock,
    up_conv: Conv,
    up0: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl BaseUnet {
    fn new(cfg: &GeneratorConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        let (w, td) = (cfg.width, Some(cfg.time_dim()));
        Ok(Self {
            embed: Embedding::new(cfg, vb.clone())?,
            enc: EncoderHalf::new(cfg, cfg.latent_channels, &vb)?,
            up1: ResBlock::new(4 * w, 2 * w, td, vb.pp("up1.res0"))?,
            up_conv: conv3x3(2 * w, w, vb.pp("up1.up"))?,
            up0: ResBlock::new(2 * w, w, td, vb.pp("up0.res0"))?,
            norm_out: group_norm(w, vb.pp("norm_out"))?,
            conv_out: conv3x3(w, cfg.latent_channels, vb.pp("conv_out"))?,
        })
    }

    fn decode(&self, [h0, h1, mid]: [Tensor; 3], temb: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.up1.forward(&Tensor::cat(&[&mid, &h1], 1)?, Some(temb))?;
        let h = self.up_conv.forward(&nn::upsample2(&h)?)?;
        let h = self.up0.forward(&Tensor::cat(&[&h, &h0], 1)?, Some(temb))?;
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }
}

struct ControlBranch {
    embed: Embedding,
    enc: EncoderHalf,
    connectors: [Conv; 3],
}

impl ControlBranch {
    fn new(cfg: &GeneratorConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        let w = cfg.width;
        Ok(Self {
            embed: Embedding::new(cfg, vb.clone())?,
            enc: EncoderHalf::new(cfg, 2 * cfg.latent_channels, &vb)?,
            connectors: [
                zero_conv(w, w, 1, vb.pp("zero0"))?,
                zero_conv(2 * w, 2 * w, 1, vb.pp("zero1"))?,
                zero_conv(2 * w, 2 * w, 1, vb.pp("zero_mid"))?,
            ],
        })
    }

    fn forward(&self, z_t: &Tensor, c_latent: &Tensor, temb: &Tensor) -> candle_core::Result<[Tensor; 3]> {
        let hs = self.enc.forward(&Tensor::cat(&[z_t, c_latent], 1)?, temb)?;
        let [a, b, c] = &self.connectors;
        Ok([a.forward(&hs[0])?, b.forward(&hs[1])?, c.forward(&hs[2])?])
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: GeneratorConfig,
    base_frozen: bool,
}

/// Base denoiser and control branch, each with its own parameter store.
pub struct ControlDenoiser {
    config: GeneratorConfig,
    schedule: NoiseSchedule,
    base_vars: VarMap,
    control_vars: VarMap,
    base: BaseUnet,
    control: ControlBranch,
    base_frozen: bool,
    device: Device,
    dtype: DType,
}

impl ControlDenoiser {
    /// Builds a fresh base denoiser and a control branch initialized from it.
    pub fn new(config: GeneratorConfig, dtype: DType) -> Result<Self> {
        if config.latent_channels == 0 || config.width == 0 || config.time_features < 2 {
            return Err(Error::InvalidInput("generator widths must be positive".into()));
        }
        let schedule = NoiseSchedule::new(config.schedule)?;
        let device = Device::Cpu;
        let base_vars = VarMap::new();
        let control_vars = VarMap::new();
        let base = BaseUnet::new(&config, seeded_builder(&base_vars, config.seed, dtype, &device))?;
        let control = ControlBranch::new(&config, seeded_builder(&control_vars, derive_seed(config.seed, 1), dtype, &device))?;
        let model = Self { config, schedule, base_vars, control_vars, base, control, base_frozen: false, device, dtype };
        model.reset_control()?;
        Ok(model)
    }

    /// Copies the base encoder half into the control branch. The extra
    /// condition input channels and all connectors are set to zero.
    pub fn reset_control(&self) -> Result<()> {
        nn::copy_params(&self.base_vars, &self.control_vars, "")?;
        let base_w = self.base.enc.conv_in.weight();
        let zeros = base_w.zeros_like()?;
        let data = self.control_vars.data().lock().expect("varmap lock poisoned");
        let var = data
            .get("conv_in.weight")
            .ok_or_else(|| Error::Corrupt("control branch lacks conv_in.weight".into()))?;
        var.set(&Tensor::cat(&[base_w, &zeros], 1)?)?;
        for (name, v) in data.iter().filter(|(n, _)| n.starts_with("zero")) {
            debug_assert!(name.ends_with("weight") || name.ends_with("bias"));
            v.set(&v.as_tensor().zeros_like()?)?;
        }
        Ok(())
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn base_vars(&self) -> &VarMap {
        &self.base_vars
    }

    pub fn control_vars(&self) -> &VarMap {
        &self.control_vars
    }

    pub fn is_base_frozen(&self) -> bool {
        self.base_frozen
    }

    pub fn freeze_base(&mut self) {
        self.base_frozen = true;
    }

    pub fn base_hash(&self) -> Result<String> {
        nn::param_hash(&self.base_vars)
    }

    pub fn control_hash(&self) -> Result<String> {
        nn::param_hash(&self.control_vars)
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        let (_, c, h, w) = z.dims4()?;
        if c != self.config.latent_channels || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "latent of shape {:?} does not fit a {}-channel two-level denoiser",
                z.dims(),
                self.config.latent_channels
            )));
        }
        Ok(())
    }

    /// Noise estimate of the base denoiser alone.
    pub fn predict_noise_base(&self, z_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.forward(z_t, ts, None)
    }

    /// Noise estimate for `z_t` at per-item timesteps `ts`, steered by `c_latent`.
    pub fn predict_noise(&self, z_t: &Tensor, ts: &[usize], c_latent: &Tensor) -> Result<Tensor> {
        self.forward(z_t, ts, Some(c_latent))
    }

    fn forward(&self, z_t: &Tensor, ts: &[usize], c_latent: Option<&Tensor>) -> Result<Tensor> {
        self.check_latent(z_t)?;
        if ts.len() != z_t.dim(0)? {
            return Err(Error::ShapeMismatch { expected: vec![z_t.dim(0)?], got: vec![ts.len()] });
        }
        for &t in ts {
            self.schedule.step_alpha(t)?;
        }
        let temb = self.base.embed.forward(ts, self.dtype, &self.device)?;
        let mut hs = self.base.enc.forward(z_t, &temb)?;
        if let Some(c) = c_latent {
            if c.dims() != z_t.dims() {
                return Err(Error::ShapeMismatch { expected: z_t.dims().to_vec(), got: c.dims().to_vec() });
            }
            let ctemb = self.control.embed.forward(ts, self.dtype, &self.device)?;
            let extra = self.control.forward(z_t, c, &ctemb)?;
            for (h, e) in hs.iter_mut().zip(extra) {
                *h = (&*h + e)?;
            }
        }
        Ok(self.base.decode(hs, &temb)?)
    }

    fn merged_vars(&self) -> VarMap {
        let merged = VarMap::new();
        {
            let mut data = merged.data().lock().expect("varmap lock poisoned");
            for (prefix, vm) in [("base", &self.base_vars), ("control", &self.control_vars)] {
                for (name, var) in vm.data().lock().expect("varmap lock poisoned").iter() {
                    data.insert(format!("{prefix}.{name}"), var.clone());
                }
            }
        }
        merged
    }

    pub fn save(&self, dir: &Path, epoch: usize, metrics: serde_json::Value) -> Result<nn::CheckpointManifest> {
        let meta = CheckpointMeta { config: self.config.clone(), base_frozen: self.base_frozen };
        nn::save_checkpoint(dir, CHECKPOINT_KIND, &self.merged_vars(), serde_json::to_value(meta)?, epoch, metrics)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = nn::read_manifest(dir, CHECKPOINT_KIND)?;
        let meta: CheckpointMeta = serde_json::from_value(manifest.config.clone())?;
        let mut model = Self::new(meta.config, DType::F32)?;
        nn::load_params(dir, &manifest, &model.merged_vars())?;
        model.base_frozen = meta.base_frozen;
        Ok(model)
    }
}

/// `mean((ε − ε_θ(add_noise(z, t, ε), t, c))²)` with one timestep per item.
pub fn mrcn_loss(
    model: &ControlDenoiser,
    z: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    c_latent: Option<&Tensor>,
) -> Result<Tensor> {
    let z_t = add_noise_batch(z, ts, eps, &model.schedule)?;
    let pred = model.forward(&z_t, ts, c_latent)?;
    Ok(pred.sub(eps)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Unconditional epochs for the base denoiser before it is frozen.
    pub base_epochs: usize,
    /// Epochs for the control branch.
    pub epochs: usize,
    /// Acceleration factors of the extra training masks drawn per sample.
    pub afs: Vec<f64>,
    pub seed: u64,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        Self { lr: 1e-4, batch_size: 16, base_epochs: 50, epochs: 50, afs: vec![4.0, 8.0], seed: 0 }
    }
}

/// Loss curves of both phases and the hashes that witness the freeze.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorLog {
    pub base: TrainingLog,
    pub control: TrainingLog,
    pub base_hash: String,
    pub vae_hash: String,
}

/// Condition image magnitude `|DC[R(x_u), k_u, M]|`.
pub fn condition_image(sketcher: &RepairModel, x_u: &MagnitudeImage, k_u: &crate::kspace::KSpaceData, m: &SamplingMask) -> Result<MagnitudeImage> {
    Ok(make_condition(sketcher, x_u, k_u, m)?.magnitude())
}

struct LatentPairs {
    z: Tensor,
    c: Tensor,
}

impl LatentPairs {
    fn len(&self) -> usize {
        self.z.dim(0).expect("rank-4 latents")
    }

    fn select(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), self.z.device())?;
        Ok((self.z.index_select(&ids, 0)?, self.c.index_select(&ids, 0)?))
    }
}

fn encode_in_chunks(vae: &VaeModel, images: &[MagnitudeImage]) -> Result<Tensor> {
    let mut parts = Vec::new();
    for chunk in images.chunks(32) {
        let x = images_to_tensor(&chunk.iter().map(|m| m.data()).collect::<Vec<_>>(), vae.dtype(), vae.device())?;
        parts.push(vae.encode_latent(&x)?.detach());
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Latent pairs for every sample: its own mask plus one fresh mask per `afs` entry.
fn build_pairs(
    vae: &VaeModel,
    sketcher: &RepairModel,
    samples: &[Sample],
    afs: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<LatentPairs> {
    let mut targets = Vec::new();
    let mut conds = Vec::new();
    for s in samples {
        conds.push(condition_image(sketcher, &s.zero_filled(), &s.k_u, &s.mask)?);
        targets.push(s.ground_truth.clone());
        for &af in afs {
            let m = generate_mask(s.shape().1, af, default_center_fraction(af), rng)?;
            let k_u = undersample(&s.k_full, &m)?;
            conds.push(condition_image(sketcher, &zero_filled_recon(&k_u), &k_u, &m)?);
            targets.push(s.ground_truth.clone());
        }
    }
    Ok(LatentPairs { z: encode_in_chunks(vae, &targets)?, c: encode_in_chunks(vae, &conds)? })
}

/// Fixed timesteps and noise for a reproducible validation loss.
struct ValidationDraw {
    ts: Vec<usize>,
    eps: Tensor,
}

impl ValidationDraw {
    fn new(pairs: &LatentPairs, t_max: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ts = (0..pairs.len()).map(|_| rng.random_range(1..=t_max)).collect();
        let eps = seeded_randn(pairs.z.dims(), &mut rng, pairs.z.dtype(), pairs.z.device())?;
        Ok(Self { ts, eps })
    }

    fn loss(&self, model: &ControlDenoiser, pairs: &LatentPairs, conditioned: bool) -> Result<f64> {
        let c = conditioned.then_some(&pairs.c);
        scalar(&mrcn_loss(model, &pairs.z, &self.ts, &self.eps, c)?)
    }
}

fn run_phase(
    model: &ControlDenoiser,
    vars: &VarMap,
    pairs: &LatentPairs,
    val: &LatentPairs,
    epochs: usize,
    conditioned: bool,
    cfg: &GeneratorTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingLog> {
    let t_max = model.schedule.len();
    let draw = ValidationDraw::new(val, t_max, derive_seed(cfg.seed, 7))?;
    let mut log = TrainingLog::default();
    let initial = draw.loss(model, val, conditioned)?;
    log.push(EpochRecord { epoch: 0, train_loss: f64::NAN, val_loss: initial });
    let mut best = Snapshot::capture(vars, initial)?;
    let mut opt = AdamW::new(nn::vars_sorted(vars), ParamsAdamW { lr: cfg.lr, weight_decay: 0.0, ..Default::default() })?;
    let phase = if conditioned { "control" } else { "base" };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut step = 0;
    for epoch in 1..=epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (z, c) = pairs.select(chunk)?;
            let ts: Vec<usize> = chunk.iter().map(|_| rng.random_range(1..=t_max)).collect();
            let eps = seeded_randn(z.dims(), rng, z.dtype(), z.device())?;
            let loss = mrcn_loss(model, &z, &ts, &eps, conditioned.then_some(&c))?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: value });
            }
            opt.backward_step(&loss)?;
            total += value;
            batches += 1;
            step += 1;
        }
        let val_loss = draw.loss(model, val, conditioned)?;
        log::info!("generator {phase} epoch {epoch}: train {:.5}, val {val_loss:.5}", total / batches as f64);
        log.push(EpochRecord { epoch, train_loss: total / batches as f64, val_loss });
        if val_loss < best.loss {
            best = Snapshot::capture(vars, val_loss)?;
            log.best_epoch = epoch;
        }
    }
    best.restore(vars)?;
    Ok(log)
}

/// Trains the base denoiser unconditionally on VAE latents, freezes it, copies
/// its encoder half into the control branch and trains the branch on
/// `(z, c_latent)` pairs. VAE and sketcher are only read.
pub fn train_generator(
    vae: &VaeModel,
    sketcher: &RepairModel,
    train: &[Sample],
    val: &[Sample],
    model_config: GeneratorConfig,
    cfg: &GeneratorTrainConfig,
) -> Result<(ControlDenoiser, GeneratorLog)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("generator training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    if model_config.latent_channels != vae.config().latent_channels {
        return Err(Error::InvalidInput(format!(
            "generator expects {} latent channels, VAE produces {}",
            model_config.latent_channels,
            vae.config().latent_channels
        )));
    }
    let vae_hash = vae.param_hash()?;
    let mut model = ControlDenoiser::new(model_config, DType::F32)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pairs = build_pairs(vae, sketcher, train, &cfg.afs, &mut rng)?;
    let val = if val.is_empty() { &train[..train.len().min(16)] } else { val };
    let val_pairs = build_pairs(vae, sketcher, val, &[], &mut rng)?;

    let base_log = run_phase(&model, &model.base_vars, &pairs, &val_pairs, cfg.base_epochs, false, cfg, &mut rng)?;
    model.freeze_base();
    model.reset_control()?;
    let base_hash = model.base_hash()?;
    let control_log = run_phase(&model, &model.control_vars, &pairs, &val_pairs, cfg.epochs, true, cfg, &mut rng)?;
    if model.base_hash()? != base_hash {
        return Err(Error::Corrupt("frozen base denoiser changed during control training".into()));
    }
    if vae.param_hash()? != vae_hash {
        return Err(Error::Corrupt("VAE parameters changed during generator training".into()));
    }
    Ok((model, GeneratorLog { base: base_log, control: control_log, base_hash, vae_hash }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dtype: DType) -> ControlDenoiser {
        let cfg = GeneratorConfig { width: 8, time_features: 8, null_dim: 4, ..Default::default() };
        ControlDenoiser::new(cfg, dtype).unwrap()
    }

    fn randn(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
        seeded_randn(shape, &mut ChaCha8Rng::seed_from_u64(seed), dtype, &Device::Cpu).unwrap()
    }

    #[test]
    fn schedule_defaults() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha(0).unwrap(), 1.0);
        assert!((s.alpha(1).unwrap() - 0.9999).abs() < 1e-15);
        assert!(s.alpha(1000).unwrap() > 0.0);
        assert!(s.step_alpha(0).is_err());
        assert!(s.step_alpha(1001).is_err());
        assert!(NoiseSchedule::linear(1, 1e-4, 0.02).is_err());
    }

    #[test]
    fn add_noise_closed_forms() {
        let s = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        let z = randn(&[1, 4, 4, 4], 1, DType::F64);
        let zero = z.zeros_like().unwrap();
        let a = s.alpha(300).unwrap();
        let got = add_noise(&z, 300, &zero, &s).unwrap();
        let diff = scalar(&(got - z.affine(a.sqrt(), 0.0).unwrap()).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(diff < 1e-15);
        let near = add_noise(&z, 1, &randn(&[1, 4, 4, 4], 2, DType::F64), &s).unwrap();
        let rel = scalar(&(&near - &z).unwrap().sqr().unwrap().sum_all().unwrap()).unwrap().sqrt()
            / scalar(&z.sqr().unwrap().sum_all().unwrap()).unwrap().sqrt();
        assert!(rel < 0.02, "{rel}");
        assert!(add_noise(&z, 0, &zero, &s).is_err());
    }

    #[test]
    fn zero_connectors_make_condition_irrelevant() {
        let m = tiny(DType::F32);
        let z = randn(&[2, 4, 8, 8], 3, DType::F32);
        let base = m.predict_noise_base(&z, &[10, 900]).unwrap();
        for seed in [4, 5] {
            let c = randn(&[2, 4, 8, 8], seed, DType::F32);
            let out = m.predict_noise(&z, &[10, 900], &c).unwrap();
            let d = scalar(&(out - &base).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
            assert!(d <= 1e-6, "{d}");
        }
        assert!(m.predict_noise(&z, &[10], &z).is_err());
        assert!(m.predict_noise(&z, &[0, 1], &z).is_err());
    }

    #[test]
    fn control_starts_as_copy_of_base() {
        let m = tiny(DType::F32);
        let base = m.base_vars.data().lock().unwrap();
        let ctrl = m.control_vars.data().lock().unwrap();
        let b = base["down0.res0.conv1.weight"].as_tensor();
        let c = ctrl["down0.res0.conv1.weight"].as_tensor();
        assert_eq!(scalar(&(b - c).unwrap().abs().unwrap().sum_all().unwrap()).unwrap(), 0.0);
        let cw = ctrl["conv_in.weight"].as_tensor();
        assert_eq!(cw.dims(), &[8, 8, 3, 3]);
        assert_eq!(scalar(&cw.narrow(1, 4, 4).unwrap().abs().unwrap().sum_all().unwrap()).unwrap(), 0.0);
        for (name, v) in ctrl.iter().filter(|(n, _)| n.starts_with("zero")) {
            assert_eq!(scalar(&v.as_tensor().abs().unwrap().sum_all().unwrap()).unwrap(), 0.0, "{name}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = tiny(DType::F32);
        m.freeze_base();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), 0, serde_json::Value::Null).unwrap();
        let back = ControlDenoiser::load(dir.path()).unwrap();
        assert!(back.is_base_frozen());
        assert_eq!(back.base_hash().unwrap(), m.base_hash().unwrap());
        assert_eq!(back.control_hash().unwrap(), m.control_hash().unwrap());
        assert!(matches!(ControlDenoiser::load(&dir.path().join("none")), Err(Error::MissingCheckpoint { .. })));
    }
}
