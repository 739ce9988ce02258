//! MR-VAE: a convolutional encoder/decoder between magnitude images and a
//! lower-resolution latent grid, trained with pixel L1, a feature-space L1 and
//! a KL term.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, GroupNorm, Module, Optimizer, ParamsAdamW, VarMap};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{random_flip, Sample};
use crate::error::{Error, Result};
use crate::kspace::MagnitudeImage;
use crate::nn::{
    self, conv3x3, Conv, conv3x3_stride2, group_norm, image_to_tensor, images_to_tensor, scalar, seeded_builder,
    seeded_randn, ResBlock,
};
use crate::train::{EpochRecord, Snapshot, TrainingLog};

pub const CHECKPOINT_KIND: &str = "vae";

const LOGVAR_RANGE: (f64, f64) = (-30.0, 20.0);

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Pixel L1.
    pub mu: f64,
    /// Feature-space L1.
    pub nu: f64,
    /// KL divergence.
    pub omega: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mu: 1.0, nu: 0.01, omega: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_channels: usize,
    /// Spatial downsampling factor, a power of two.
    pub downsample: usize,
    /// Channels at full resolution; doubled at every level.
    pub base_width: usize,
    pub blocks: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Seed of the frozen feature extractor used by the perceptual term.
    pub feature_seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            downsample: 4,
            base_width: 32,
            blocks: 1,
            weights: LossWeights::default(),
            seed: 2,
            feature_seed: 7,
        }
    }
}

impl VaeConfig {
    fn levels(&self) -> Result<usize> {
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return Err(Error::InvalidInput(format!(
                "VAE downsample factor must be a power of two >= 2, got {}",
                self.downsample
            )));
        }
        if self.latent_channels == 0 || self.base_width == 0 {
            return Err(Error::InvalidInput("VAE widths must be positive".into()));
        }
        Ok(self.downsample.trailing_zeros() as usize)
    }
}

/// Diagonal Gaussian `N(u, σ²)` over the latent grid, batched as `(N, ch, h, w)`.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    mean: Tensor,
    std: Tensor,
}

impl GaussianPosterior {
    pub fn new(mean: Tensor, std: Tensor) -> Result<Self> {
        if mean.dims() != std.dims() {
            return Err(Error::ShapeMismatch { expected: mean.dims().to_vec(), got: std.dims().to_vec() });
        }
        let min = scalar(&std.flatten_all()?.min(0)?)?;
        if !(min > 0.0) {
            return Err(Error::InvalidInput(format!("posterior std must be positive, min is {min}")));
        }
        Ok(Self { mean, std })
    }

    fn from_logvar(mean: Tensor, logvar: &Tensor) -> Result<Self> {
        let std = (logvar.clamp(LOGVAR_RANGE.0, LOGVAR_RANGE.1)? * 0.5)?.exp()?;
        Self::new(mean, std)
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn std(&self) -> &Tensor {
        &self.std
    }

    /// `u + σ·ε` with `ε` drawn from `rng`.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let eps = seeded_randn(self.mean.dims(), rng, self.mean.dtype(), self.mean.device())?;
        Ok((&self.mean + (&self.std * eps)?)?)
    }
}

/// Latent grid `(N, ch, H/f, W/f)` together with its downsampling factor.
#[derive(Debug, Clone)]
pub struct LatentCode {
    data: Tensor,
    factor: usize,
}

impl LatentCode {
    pub fn new(data: Tensor, factor: usize) -> Result<Self> {
        data.dims4()?;
        if !scalar(&data.sqr()?.sum_all()?)?.is_finite() {
            return Err(Error::NonFinite("latent code".into()));
        }
        Ok(Self { data, factor })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// `(ch, h, w)` of one code.
    pub fn shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.data.dims4().expect("checked at construction");
        (c, h, w)
    }
}

pub enum EncodeMode<'a> {
    /// Returns the posterior mean.
    Mean,
    /// Draws `u + σ·ε`.
    Sample(&'a mut ChaCha8Rng),
}

struct Encoder {
    conv_in: Conv,
    levels: Vec<(Vec<ResBlock>, Conv)>,
    mid: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl Encoder {
    fn new(cfg: &VaeConfig, levels: usize, vb: candle_nn::VarBuilder) -> candle_core::Result<Self> {
        let ch = |l: usize| cfg.base_width << l;
        let conv_in = conv3x3(1, ch(0), vb.pp("conv_in"))?;
        let levels = (0..levels)
            .map(|l| {
                let vbl = vb.pp(format!("down{l}"));
                let blocks = (0..cfg.blocks)
                    .map(|b| ResBlock::new(ch(l), ch(l), None, vbl.pp(format!("res{b}"))))
                    .collect::<candle_core::Result<Vec<_>>>()?;
                Ok((blocks, conv3x3_stride2(ch(l), ch(l + 1), vbl.pp("down"))?))
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        let top = ch(levels.len());
        Ok(Self {
            conv_in,
            levels,
            mid: ResBlock::new(top, top, None, vb.pp("mid"))?,
            norm_out: group_norm(top, vb.pp("norm_out"))?,
            conv_out: conv3x3(top, 2 * cfg.latent_channels, vb.pp("conv_out"))?,
        })
    }

    /// Returns `(mean, logvar)`.
    fn forward(&self, x: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
        let mut h = self.conv_in.forward(x)?;
        for (blocks, down) in &self.levels {
            for b in blocks {
                h = b.forward(&h, None)?;
            }
            h = down.forward(&h)?;
        }
        h = self.mid.forward(&h, None)?;
        let out = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?;
        let chunks = out.chunk(2, 1)?;
        Ok((chunks[0].clone(), chunks[1].clone()))
    }
}

struct Decoder {
    conv_in: Conv,
    mid: ResBlock,
    levels: Vec<(Conv, Vec<ResBlock>)>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl Decoder {
    fn new(cfg: &VaeConfig, levels: usize, vb: candle_nn::VarBuilder) -> candle_core::Result<Self> {
        let ch = |l: usize| cfg.base_width << l;
        let top = ch(levels);
        let ups = (0..levels)
            .rev()
            .map(|l| {
                let vbl = vb.pp(format!("up{l}"));
                let up = conv3x3(ch(l + 1), ch(l), vbl.pp("up"))?;
                let blocks = (0..cfg.blocks)
                    .map(|b| ResBlock::new(ch(l), ch(l), None, vbl.pp(format!("res{b}"))))
                    .collect::<candle_core::Result<Vec<_>>>()?;
                Ok((up, blocks))
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            conv_in: conv3x3(cfg.latent_channels, top, vb.pp("conv_in"))?,
            mid: ResBlock::new(top, top, None, vb.pp("mid"))?,
            levels: ups,
            norm_out: group_norm(ch(0), vb.pp("norm_out"))?,
            conv_out: conv3x3(ch(0), 1, vb.pp("conv_out"))?,
        })
    }

    fn forward(&self, z: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = self.mid.forward(&self.conv_in.forward(z)?, None)?;
        for (up, blocks) in &self.levels {
            h = up.forward(&nn::upsample2(&h)?)?;
            for b in blocks {
                h = b.forward(&h, None)?;
            }
        }
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }
}

/// Frozen random convolutional features at three scales, standing in for a
/// pretrained perceptual network.
pub struct FeatureExtractor {
    _varmap: VarMap,
    stages: Vec<Conv>,
}

impl FeatureExtractor {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let varmap = VarMap::new();
        let vb = seeded_builder(&varmap, seed, dtype, device);
        let stages = vec![
            conv3x3(1, 8, vb.pp("f0"))?,
            conv3x3_stride2(8, 16, vb.pp("f1"))?,
            conv3x3_stride2(16, 32, vb.pp("f2"))?,
        ];
        Ok(Self { _varmap: varmap, stages })
    }

    /// Feature maps after every stage.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.stages.len());
        for conv in &self.stages {
            h = conv.forward(&h)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Mean over scales of the mean absolute feature difference.
pub fn perceptual_loss(extractor: &FeatureExtractor, estimate: &Tensor, target: &Tensor) -> Result<Tensor> {
    if estimate.dims() != target.dims() {
        return Err(Error::ShapeMismatch { expected: target.dims().to_vec(), got: estimate.dims().to_vec() });
    }
    let fa = extractor.features(estimate)?;
    let fb = extractor.features(target)?;
    let n = fa.len() as f64;
    let mut total = (fa[0].sub(&fb[0])?.abs()?.mean_all()? / n)?;
    for (a, b) in fa.iter().zip(&fb).skip(1) {
        total = (total + (a.sub(b)?.abs()?.mean_all()? / n)?)?;
    }
    Ok(total)
}

/// Mean over elements of `½(u² + σ² − 1 − ln σ²)`.
pub fn kl_divergence(p: &GaussianPosterior) -> Result<Tensor> {
    let var = p.std.sqr()?;
    let per = ((p.mean.sqr()? + &var)? - 1.0)?.sub(&var.log()?)?;
    Ok((per.mean_all()? * 0.5)?)
}

/// Loss terms, each a scalar tensor.
pub struct VaeLoss {
    pub total: Tensor,
    pub l1: Tensor,
    pub perceptual: Tensor,
    pub kl: Tensor,
}

/// `μ·L1 + ν·perceptual + ω·KL`.
pub fn vae_loss(
    extractor: &FeatureExtractor,
    estimate: &Tensor,
    target: &Tensor,
    posterior: &GaussianPosterior,
    weights: &LossWeights,
) -> Result<VaeLoss> {
    if estimate.dims() != target.dims() {
        return Err(Error::ShapeMismatch { expected: target.dims().to_vec(), got: estimate.dims().to_vec() });
    }
    let l1 = estimate.sub(target)?.abs()?.mean_all()?;
    let perceptual = perceptual_loss(extractor, estimate, target)?;
    let kl = kl_divergence(posterior)?;
    let total = ((l1.affine(weights.mu, 0.0)? + perceptual.affine(weights.nu, 0.0)?)? + kl.affine(weights.omega, 0.0)?)?;
    Ok(VaeLoss { total, l1, perceptual, kl })
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: VaeConfig,
    latent_scale: f64,
}

/// Encoder `ℰ` and decoder `𝒟` with their parameters.
pub struct VaeModel {
    config: VaeConfig,
    varmap: VarMap,
    encoder: Encoder,
    decoder: Decoder,
    extractor: FeatureExtractor,
    latent_scale: f64,
    device: Device,
    dtype: DType,
}

impl VaeModel {
    pub fn new(config: VaeConfig, dtype: DType) -> Result<Self> {
        let levels = config.levels()?;
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let vb = seeded_builder(&varmap, config.seed, dtype, &device);
        let encoder = Encoder::new(&config, levels, vb.pp("encoder"))?;
        let decoder = Decoder::new(&config, levels, vb.pp("decoder"))?;
        let extractor = FeatureExtractor::new(config.feature_seed, dtype, &device)?;
        Ok(Self { config, varmap, encoder, decoder, extractor, latent_scale: 1.0, device, dtype })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    /// Factor applied to posterior means before they reach the diffusion model.
    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn set_latent_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidInput(format!("latent scale must be positive, got {scale}")));
        }
        self.latent_scale = scale;
        Ok(())
    }

    pub fn param_hash(&self) -> Result<String> {
        nn::param_hash(&self.varmap)
    }

    pub fn param_count(&self) -> usize {
        nn::param_count(&self.varmap)
    }

    /// `(ch, H/f, W/f)` for an `H×W` image.
    pub fn latent_shape(&self, (h, w): (usize, usize)) -> Result<(usize, usize, usize)> {
        let f = self.config.downsample;
        if h % f != 0 || w % f != 0 {
            return Err(Error::InvalidInput(format!("image {h}x{w} is not divisible by the VAE factor {f}")));
        }
        Ok((self.config.latent_channels, h / f, w / f))
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::ShapeMismatch { expected: vec![self.config.latent_channels], got: vec![c] });
        }
        Ok(())
    }

    /// Posterior for an `(N, 1, H, W)` batch.
    pub fn posterior(&self, x: &Tensor) -> Result<GaussianPosterior> {
        let (_, _, h, w) = x.dims4()?;
        self.latent_shape((h, w))?;
        let (mean, logvar) = self.encoder.forward(x)?;
        GaussianPosterior::from_logvar(mean, &logvar)
    }

    pub fn encode(&self, x: &MagnitudeImage, mode: EncodeMode) -> Result<(GaussianPosterior, LatentCode)> {
        let post = self.posterior(&image_to_tensor(x.data(), self.dtype, &self.device)?)?;
        let code = match mode {
            EncodeMode::Mean => post.mean.clone(),
            EncodeMode::Sample(rng) => post.sample(rng)?,
        };
        Ok((post, LatentCode::new(code, self.config.downsample)?))
    }

    /// Unclamped decoder output `(N, 1, H, W)`.
    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        self.check_latent(z)?;
        Ok(self.decoder.forward(z)?)
    }

    /// Decodes the first code of `z` into an image clamped to `[0, 1]`.
    pub fn decode(&self, z: &LatentCode) -> Result<MagnitudeImage> {
        nn::tensor_to_unit_image(&self.decode_raw(&z.data)?)
    }

    /// Scaled posterior mean used as the diffusion latent.
    pub fn encode_latent(&self, x: &Tensor) -> Result<Tensor> {
        Ok((self.posterior(x)?.mean * self.latent_scale)?)
    }

    /// Inverse of [`encode_latent`](Self::encode_latent), unclamped.
    pub fn decode_latent(&self, z: &Tensor) -> Result<Tensor> {
        self.decode_raw(&(z / self.latent_scale)?)
    }

    pub fn save(&self, dir: &Path, epoch: usize, metrics: serde_json::Value) -> Result<nn::CheckpointManifest> {
        let meta = CheckpointMeta { config: self.config.clone(), latent_scale: self.latent_scale };
        nn::save_checkpoint(dir, CHECKPOINT_KIND, &self.varmap, serde_json::to_value(meta)?, epoch, metrics)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = nn::read_manifest(dir, CHECKPOINT_KIND)?;
        let meta: CheckpointMeta = serde_json::from_value(manifest.config.clone())?;
        let mut model = Self::new(meta.config, DType::F32)?;
        nn::load_params(dir, &manifest, &model.varmap)?;
        model.set_latent_scale(meta.latent_scale)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self { lr: 1e-5, batch_size: 8, epochs: 50, seed: 0 }
    }
}

fn stack(samples: &[&Sample], dtype: DType, dev: &Device) -> Result<Tensor> {
    images_to_tensor(&samples.iter().map(|s| s.ground_truth.data()).collect::<Vec<_>>(), dtype, dev)
}

/// Mean reconstruction L1 through the posterior mean.
pub fn reconstruction_l1(model: &VaeModel, images: &Tensor) -> Result<f64> {
    let mean = model.posterior(images)?.mean;
    let rec = model.decode_raw(&mean)?.clamp(0.0, 1.0)?;
    scalar(&rec.sub(images)?.abs()?.mean_all()?)
}

/// `1 / std` of the posterior means over `images`.
fn fit_latent_scale(model: &VaeModel, images: &Tensor) -> Result<f64> {
    let mean = model.posterior(images)?.mean.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let n = mean.len() as f64;
    let m = mean.iter().sum::<f64>() / n;
    let std = (mean.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    Ok(if std > 1e-8 { 1.0 / std } else { 1.0 })
}

/// Trains the VAE from scratch on ground-truth images and fits the latent
/// scale on the training set. Returns the best validation epoch.
pub fn train_vae(
    model_config: VaeConfig,
    train: &[Sample],
    val: &[Sample],
    cfg: &VaeTrainConfig,
) -> Result<(VaeModel, TrainingLog)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("VAE training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let mut model = VaeModel::new(model_config, DType::F32)?;
    model.latent_shape(train[0].shape())?;
    let dev = model.device.clone();
    let val: Vec<&Sample> = if val.is_empty() { train.iter().take(16).collect() } else { val.iter().collect() };
    let val_x = stack(&val, DType::F32, &dev)?;

    let mut log = TrainingLog::default();
    let initial = reconstruction_l1(&model, &val_x)?;
    log.push(EpochRecord { epoch: 0, train_loss: f64::NAN, val_loss: initial });
    let mut best = Snapshot::capture(&model.varmap, initial)?;

    let mut opt = AdamW::new(
        nn::vars_sorted(&model.varmap),
        ParamsAdamW { lr: cfg.lr, weight_decay: 0.0, ..Default::default() },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let imgs: Vec<_> = chunk.iter().map(|&i| random_flip(train[i].ground_truth.data(), &mut rng)).collect();
            let x = images_to_tensor(&imgs.iter().collect::<Vec<_>>(), DType::F32, &dev)?;
            let post = model.posterior(&x)?;
            let z = post.sample(&mut rng)?;
            let rec = model.decode_raw(&z)?;
            let loss = vae_loss(&model.extractor, &rec, &x, &post, &model.config.weights)?;
            let value = scalar(&loss.total)?;
            let kl = scalar(&loss.kl)?;
            if !value.is_finite() || !kl.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: value });
            }
            log::debug!(
                "vae step {step}: l1 {:.5} perceptual {:.5} kl {kl:.3}",
                scalar(&loss.l1)?,
                scalar(&loss.perceptual)?
            );
            opt.backward_step(&loss.total)?;
            total += value;
            batches += 1;
            step += 1;
        }
        let val_loss = reconstruction_l1(&model, &val_x)?;
        log::info!("vae epoch {epoch}: train loss {:.5}, val L1 {val_loss:.5}", total / batches as f64);
        log.push(EpochRecord { epoch, train_loss: total / batches as f64, val_loss });
        if val_loss < best.loss {
            best = Snapshot::capture(&model.varmap, val_loss)?;
            log.best_epoch = epoch;
        }
    }
    best.restore(&model.varmap)?;
    let fit: Vec<&Sample> = train.iter().take(64).collect();
    let scale = fit_latent_scale(&model, &stack(&fit, DType::F32, &dev)?)?;
    model.set_latent_scale(scale)?;
    Ok((model, log))
}
