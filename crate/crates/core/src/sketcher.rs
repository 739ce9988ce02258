//! Sketcher: a residual repair network followed by data consistency, producing
//! the condition image that steers the latent generator.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, GroupNorm, Module, Optimizer, ParamsAdamW, VarMap};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{default_center_fraction, generate_mask, random_crop, random_flip, Sample};
use crate::error::{Error, Result};
use crate::kspace::{
    data_consistency, forward_fft, undersample, zero_filled_recon, ComplexImage, KSpaceData, MagnitudeImage,
    SamplingMask,
};
use crate::nn::{
    self, conv3x3, Conv, conv3x3_stride2, group_norm, image_to_tensor, images_to_tensor, scalar, seeded_builder,
    tensor_to_image, zero_conv, ResBlock,
};
use crate::train::{EpochRecord, Snapshot, TrainingLog};

pub const CHECKPOINT_KIND: &str = "sketcher";

/// Architecture of the repair network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepairConfig {
    /// Channels at full resolution; doubled at every downsampling level.
    pub width: usize,
    /// Number of 2× downsampling levels.
    pub levels: usize,
    /// Residual blocks per level.
    pub blocks: usize,
    pub seed: u64,
}

impl Default for RepairConfig {
    fn default() -> Self {
        Self { width: 16, levels: 2, blocks: 1, seed: 1 }
    }
}

impl RepairConfig {
    pub fn downsample_factor(&self) -> usize {
        1 << self.levels
    }
}

#[derive(Debug)]
struct RepairNet {
    head: Conv,
    down_blocks: Vec<Vec<ResBlock>>,
    downs: Vec<Conv>,
    mid: Vec<ResBlock>,
    ups: Vec<Conv>,
    up_blocks: Vec<Vec<ResBlock>>,
    tail_norm: GroupNorm,
    tail: Conv,
}

impl RepairNet {
    fn new(cfg: &RepairConfig, vb: candle_nn::VarBuilder) -> candle_core::Result<Self> {
        let ch = |l: usize| cfg.width << l;
        let head = conv3x3(1, ch(0), vb.pp("head"))?;
        let mut down_blocks = Vec::new();
        let mut downs = Vec::new();
        let mut ups = Vec::new();
        let mut up_blocks = Vec::new();
        for l in 0..cfg.levels {
            let vbl = vb.pp(format!("down{l}"));
            down_blocks.push(
                (0..cfg.blocks)
                    .map(|b| ResBlock::new(ch(l), ch(l), None, vbl.pp(format!("res{b}"))))
                    .collect::<candle_core::Result<Vec<_>>>()?,
            );
            downs.push(conv3x3_stride2(ch(l), ch(l + 1), vbl.pp("down"))?);
            let vbu = vb.pp(format!("up{l}"));
            ups.push(conv3x3(ch(l + 1), ch(l), vbu.pp("up"))?);
            up_blocks.push(
                (0..cfg.blocks)
                    .map(|b| ResBlock::new(ch(l), ch(l), None, vbu.pp(format!("res{b}"))))
                    .collect::<candle_core::Result<Vec<_>>>()?,
            );
        }
        let mid = (0..cfg.blocks)
            .map(|b| ResBlock::new(ch(cfg.levels), ch(cfg.levels), None, vb.pp(format!("mid{b}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            head,
            down_blocks,
            downs,
            mid,
            ups,
            up_blocks,
            tail_norm: group_norm(ch(0), vb.pp("tail_norm"))?,
            // zero tail: the untrained network is the identity map
            tail: zero_conv(ch(0), 1, 3, vb.pp("tail"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = self.head.forward(x)?;
        let mut skips = Vec::new();
        for (blocks, down) in self.down_blocks.iter().zip(&self.downs) {
            for b in blocks {
                h = b.forward(&h, None)?;
            }
            skips.push(h.clone());
            h = down.forward(&h)?;
        }
        for b in &self.mid {
            h = b.forward(&h, None)?;
        }
        for ((up, blocks), skip) in self.ups.iter().zip(&self.up_blocks).zip(skips.iter()).rev() {
            h = (up.forward(&nn::upsample2(&h)?)? + skip)?;
            for b in blocks {
                h = b.forward(&h, None)?;
            }
        }
        let r = self.tail.forward(&self.tail_norm.forward(&h)?.silu()?)?;
        x + r
    }
}

/// Repair network `R` with its parameters.
pub struct RepairModel {
    config: RepairConfig,
    varmap: VarMap,
    net: RepairNet,
    device: Device,
    dtype: DType,
}

impl RepairModel {
    pub fn new(config: RepairConfig, dtype: DType) -> Result<Self> {
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let net = RepairNet::new(&config, seeded_builder(&varmap, config.seed, dtype, &device))?;
        Ok(Self { config, varmap, net, device, dtype })
    }

    pub fn config(&self) -> &RepairConfig {
        &self.config
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn param_count(&self) -> usize {
        nn::param_count(&self.varmap)
    }

    pub fn param_hash(&self) -> Result<String> {
        nn::param_hash(&self.varmap)
    }

    fn check_shape(&self, (h, w): (usize, usize)) -> Result<()> {
        let f = self.config.downsample_factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::InvalidInput(format!(
                "image {h}x{w} is not divisible by the repair network's downsampling factor {f}"
            )));
        }
        Ok(())
    }

    /// Raw network output for an `(N, 1, H, W)` batch.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = batch.dims4()?;
        self.check_shape((h, w))?;
        Ok(self.net.forward(batch)?)
    }

    /// Removes aliasing from `x_u`. Output is clipped below at zero.
    pub fn repair(&self, x_u: &MagnitudeImage) -> Result<MagnitudeImage> {
        self.check_shape(x_u.shape())?;
        let out = self.net.forward(&image_to_tensor(x_u.data(), self.dtype, &self.device)?)?;
        MagnitudeImage::clamped(tensor_to_image(&out)?, 0.0, f64::INFINITY)
    }

    pub fn save(&self, dir: &Path, epoch: usize, metrics: serde_json::Value) -> Result<nn::CheckpointManifest> {
        nn::save_checkpoint(dir, CHECKPOINT_KIND, &self.varmap, serde_json::to_value(&self.config)?, epoch, metrics)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = nn::read_manifest(dir, CHECKPOINT_KIND)?;
        let config: RepairConfig = serde_json::from_value(manifest.config.clone())?;
        let model = Self::new(config, DType::F32)?;
        nn::load_params(dir, &manifest, &model.varmap)?;
        Ok(model)
    }
}

/// Condition image `c = DC[R(x_u), k_u, M]`. The result is complex so that its
/// sampled k-space equals `k_u` exactly; consumers take its magnitude.
pub fn make_condition(
    model: &RepairModel,
    x_u: &MagnitudeImage,
    k_u: &KSpaceData,
    m: &SamplingMask,
) -> Result<ComplexImage> {
    let repaired = model.repair(x_u)?;
    data_consistency(&ComplexImage::from_real(&repaired), k_u, m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SketcherTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub crop_size: usize,
    /// Acceleration factors drawn when regenerating per-sample training masks.
    pub afs: Vec<f64>,
    pub seed: u64,
}

impl Default for SketcherTrainConfig {
    fn default() -> Self {
        Self { lr: 1e-4, batch_size: 8, epochs: 30, crop_size: 96, afs: vec![4.0, 8.0], seed: 0 }
    }
}

/// Undersamples a ground-truth patch with a freshly drawn mask; returns `(x_u, x)`.
fn training_pair<R: Rng>(gt: &ndarray::Array2<f64>, crop: usize, afs: &[f64], rng: &mut R) -> Result<(ndarray::Array2<f64>, ndarray::Array2<f64>)> {
    let x = random_flip(&random_crop(gt, crop, rng), rng);
    let af = afs[rng.random_range(0..afs.len())];
    let mask = generate_mask(x.dim().1, af, default_center_fraction(af), rng)?;
    let k = undersample(&forward_fft(&ComplexImage::from_real(&MagnitudeImage::new(x.clone())?)), &mask)?;
    Ok((zero_filled_recon(&k).into_inner(), x))
}

fn validation_l1(model: &RepairModel, inputs: &Tensor, targets: &Tensor) -> Result<f64> {
    let out = model.forward(inputs)?;
    scalar(&(out - targets)?.abs()?.mean_all()?)
}

/// Trains the repair network with a pixel L1 loss on freshly undersampled
/// ground-truth crops. Returns the parameters of the best validation epoch.
pub fn train_sketcher(
    model_config: RepairConfig,
    train: &[Sample],
    val: &[Sample],
    cfg: &SketcherTrainConfig,
) -> Result<(RepairModel, TrainingLog)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("sketcher training set is empty".into()));
    }
    if cfg.afs.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidInput("sketcher training needs at least one AF and a positive batch size".into()));
    }
    let model = RepairModel::new(model_config, DType::F32)?;
    let val = if val.is_empty() { &train[..train.len().min(16)] } else { val };
    let f = model.config.downsample_factor();
    let (h, w) = train[0].shape();
    let crop = cfg.crop_size.min(h).min(w) / f * f;
    if crop < 8 {
        return Err(Error::InvalidInput(format!("crop size {crop} too small for the network")));
    }

    let dev = model.device.clone();
    let val_x: Vec<MagnitudeImage> = val.iter().map(Sample::zero_filled).collect();
    let val_in = images_to_tensor(&val_x.iter().map(|m| m.data()).collect::<Vec<_>>(), DType::F32, &dev)?;
    let val_gt = images_to_tensor(&val.iter().map(|s| s.ground_truth.data()).collect::<Vec<_>>(), DType::F32, &dev)?;

    let mut log = TrainingLog::default();
    let initial = validation_l1(&model, &val_in, &val_gt)?;
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
            let mut xs = Vec::with_capacity(chunk.len());
            let mut ys = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (x_u, x) = training_pair(train[i].ground_truth.data(), crop, &cfg.afs, &mut rng)?;
                xs.push(x_u);
                ys.push(x);
            }
            let input = images_to_tensor(&xs.iter().collect::<Vec<_>>(), DType::F32, &dev)?;
            let target = images_to_tensor(&ys.iter().collect::<Vec<_>>(), DType::F32, &dev)?;
            let loss = (model.forward(&input)? - target)?.abs()?.mean_all()?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: value });
            }
            opt.backward_step(&loss)?;
            total += value;
            batches += 1;
            step += 1;
        }
        let val_loss = validation_l1(&model, &val_in, &val_gt)?;
        log::info!("sketcher epoch {epoch}: train L1 {:.5}, val L1 {val_loss:.5}", total / batches as f64);
        log.push(EpochRecord { epoch, train_loss: total / batches as f64, val_loss });
        if val_loss < best.loss {
            best = Snapshot::capture(&model.varmap, val_loss)?;
            log.best_epoch = epoch;
        }
    }
    best.restore(&model.varmap)?;
    Ok((model, log))
}
