//! Shared network plumbing: seeded parameter initialization, raw-array
//! checkpoints, image/tensor conversion and the residual block used by every
//! model.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Shape, Tensor, Var, D};
use candle_nn::init::NormalOrUniform;
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{GroupNorm, Init, Linear, Module, VarBuilder, VarMap};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::kspace::MagnitudeImage;
use crate::rawio::{read_f32, write_f32};

fn name_stream(name: &str) -> u64 {
    // FNV-1a, stable across platforms and runs
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn draw_init(init: Init, shape: &Shape, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = shape.elem_count();
    let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| mean + std * rng.sample::<f64, _>(StandardNormal);
    match init {
        Init::Const(c) => vec![c; n],
        Init::Randn { mean, stdev } => (0..n).map(|_| normal(rng, mean, stdev)).collect(),
        Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up)).collect(),
        Init::Kaiming { dist, fan, non_linearity } => {
            let fan = fan.for_shape(shape);
            let std = non_linearity.gain() / (fan as f64).sqrt();
            match dist {
                NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                NormalOrUniform::Normal => (0..n).map(|_| normal(rng, 0.0, std)).collect(),
            }
        }
    }
}

/// Variable store whose fresh parameters are drawn from a generator seeded by
/// `(seed, parameter name)`, so initialization is reproducible and independent
/// of construction order.
#[derive(Clone)]
struct SeededBackend {
    varmap: VarMap,
    seed: u64,
}

impl SimpleBackend for SeededBackend {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let mut data = self.varmap.data().lock().expect("varmap lock poisoned");
        if let Some(existing) = data.get(name) {
            let t = existing.as_tensor();
            if t.shape() != &s {
                candle_core::bail!("shape mismatch for {name}: {:?} vs {:?}", t.shape(), s);
            }
            return Ok(t.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, name_stream(name)));
        let values = draw_init(h, &s, &mut rng);
        let var = Var::from_tensor(&Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?)?;
        let tensor = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(tensor)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        self.varmap.get_unchecked(name, dtype, dev)
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.varmap.data().lock().expect("varmap lock poisoned").contains_key(name)
    }
}

/// A [`VarBuilder`] over `varmap` with seeded initialization.
pub fn seeded_builder(varmap: &VarMap, seed: u64, dtype: DType, device: &Device) -> VarBuilder<'static> {
    VarBuilder::from_backend(Box::new(SeededBackend { varmap: varmap.clone(), seed }), dtype, device.clone())
}

fn sorted_vars(varmap: &VarMap) -> BTreeMap<String, Var> {
    varmap
        .data()
        .lock()
        .expect("varmap lock poisoned")
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

/// Variables in name order.
pub fn vars_sorted(varmap: &VarMap) -> Vec<Var> {
    sorted_vars(varmap).into_values().collect()
}

/// SHA-256 over parameter names, shapes and f32 values, in name order.
pub fn param_hash(varmap: &VarMap) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, var) in sorted_vars(varmap) {
        hasher.update(name.as_bytes());
        for d in var.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        let values = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        for v in values {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn param_count(varmap: &VarMap) -> usize {
    sorted_vars(varmap).values().map(|v| v.elem_count()).sum()
}

/// Copies parameter values from `src` into `dst` for every name in `dst`
/// prefixed by `prefix` that exists in `src` with the same shape.
pub fn copy_params(src: &VarMap, dst: &VarMap, prefix: &str) -> Result<usize> {
    let src = sorted_vars(src);
    let mut copied = 0;
    for (name, var) in sorted_vars(dst) {
        if let Some(from) = name.strip_prefix(prefix).and_then(|rest| src.get(rest)) {
            if from.shape() == var.shape() {
                var.set(from.as_tensor())?;
                copied += 1;
            }
        }
    }
    Ok(copied)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

/// JSON manifest stored next to the raw parameter arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub config: serde_json::Value,
    pub epoch: usize,
    pub metrics: serde_json::Value,
    pub param_hash: String,
    pub tensors: Vec<TensorEntry>,
}

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";

/// Writes every variable of `varmap` as `<name>.f32` plus a manifest.
pub fn save_checkpoint(
    dir: &Path,
    kind: &str,
    varmap: &VarMap,
    config: serde_json::Value,
    epoch: usize,
    metrics: serde_json::Value,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (name, var) in sorted_vars(varmap) {
        let file = format!("{name}.f32");
        let values = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        write_f32(&dir.join(&file), values)?;
        tensors.push(TensorEntry { name, shape: var.dims().to_vec(), file });
    }
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        config,
        epoch,
        metrics,
        param_hash: param_hash(varmap)?,
        tensors,
    };
    fs::write(dir.join(CHECKPOINT_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path, stage: &str) -> Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    if !path.exists() {
        return Err(Error::MissingCheckpoint { stage: stage.to_string(), path: dir.to_path_buf() });
    }
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if manifest.kind != stage {
        return Err(Error::Corrupt(format!("{} holds a `{}` checkpoint, expected `{stage}`", dir.display(), manifest.kind)));
    }
    Ok(manifest)
}

/// Overwrites every variable of `varmap` from a checkpoint directory.
pub fn load_params(dir: &Path, manifest: &CheckpointManifest, varmap: &VarMap) -> Result<()> {
    let entries: BTreeMap<&str, &TensorEntry> = manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    for (name, var) in sorted_vars(varmap) {
        let entry = entries
            .get(name.as_str())
            .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks parameter `{name}`")))?;
        if entry.shape != var.dims() {
            return Err(Error::Corrupt(format!(
                "parameter `{name}` has shape {:?} in checkpoint, model expects {:?}",
                entry.shape,
                var.dims()
            )));
        }
        let values = read_f32(&dir.join(&entry.file), var.elem_count())?;
        let t = Tensor::from_vec(values, var.shape(), var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

/// Stacks images into an `(N, 1, H, W)` tensor.
pub fn images_to_tensor(images: &[&Array2<f64>], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = images
        .first()
        .map(|i| i.dim())
        .ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
    let mut flat = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dim() != (h, w) {
            return Err(Error::ShapeMismatch { expected: vec![h, w], got: img.shape().to_vec() });
        }
        flat.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(flat, (images.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

pub fn image_to_tensor(img: &Array2<f64>, dtype: DType, device: &Device) -> Result<Tensor> {
    images_to_tensor(&[img], dtype, device)
}

/// Splits an `(N, 1, H, W)` tensor into images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Array2<f64>>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::InvalidInput(format!("expected one channel, got {c}")));
    }
    let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(flat
        .chunks_exact(h * w)
        .take(n)
        .map(|c| Array2::from_shape_vec((h, w), c.to_vec()).expect("chunk length is h*w"))
        .collect())
}

pub fn tensor_to_image(t: &Tensor) -> Result<Array2<f64>> {
    Ok(tensor_to_images(t)?.remove(0))
}

/// First image of a batch, clamped into `[0, 1]`.
pub fn tensor_to_unit_image(t: &Tensor) -> Result<MagnitudeImage> {
    MagnitudeImage::clamped(tensor_to_image(t)?, 0.0, 1.0)
}

/// Standard-normal tensor drawn from a seeded generator.
pub fn seeded_randn(shape: &[usize], rng: &mut ChaCha8Rng, dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// Scalar value of a 0-d tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// 2-D convolution with square kernel, zero padding `kernel / 2` and a bias.
///
/// Stride-1 3×3 kernels run as nine shifted views followed by one matrix
/// product, whose backward pass is much cheaper on CPU than a direct transposed
/// convolution.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

impl Conv {
    fn new(cin: usize, cout: usize, kernel: usize, stride: usize, init: Option<Init>, vb: VarBuilder) -> candle_core::Result<Self> {
        let fan_in = (cin * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let (w_init, b_init) = match init {
            Some(i) => (i, i),
            None => (candle_nn::init::DEFAULT_KAIMING_NORMAL, Init::Uniform { lo: -bound, up: bound }),
        };
        let weight = vb.get_with_hints((cout, cin, kernel, kernel), "weight", w_init)?;
        let bias = vb.get_with_hints(cout, "bias", b_init)?;
        Ok(Self { weight, bias, stride })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    fn shifted_matmul(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = xs.dims4()?;
        let cout = self.weight.dim(0)?;
        let padded = xs.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut taps = Vec::with_capacity(9);
        for dy in 0..3 {
            for dx in 0..3 {
                taps.push(padded.narrow(2, dy, h)?.narrow(3, dx, w)?);
            }
        }
        let cols = Tensor::stack(&taps, 2)?.reshape((b, c * 9, h * w))?;
        self.weight.reshape((cout, c * 9))?.broadcast_matmul(&cols)?.reshape((b, cout, h, w))
    }
}

impl Module for Conv {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let k = self.weight.dim(2)?;
        let out = if k == 3 && self.stride == 1 {
            self.shifted_matmul(xs)?
        } else {
            xs.conv2d(&self.weight, k / 2, self.stride, 1, 1)?
        };
        out.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

pub fn conv3x3(cin: usize, cout: usize, vb: VarBuilder) -> candle_core::Result<Conv> {
    Conv::new(cin, cout, 3, 1, None, vb)
}

pub fn conv3x3_stride2(cin: usize, cout: usize, vb: VarBuilder) -> candle_core::Result<Conv> {
    Conv::new(cin, cout, 3, 2, None, vb)
}

pub fn conv1x1(cin: usize, cout: usize, vb: VarBuilder) -> candle_core::Result<Conv> {
    Conv::new(cin, cout, 1, 1, None, vb)
}

/// Convolution whose weights and bias start at zero.
pub fn zero_conv(cin: usize, cout: usize, kernel: usize, vb: VarBuilder) -> candle_core::Result<Conv> {
    Conv::new(cin, cout, kernel, 1, Some(Init::Const(0.0)), vb)
}

fn groups_for(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

pub fn group_norm(channels: usize, vb: VarBuilder) -> candle_core::Result<GroupNorm> {
    candle_nn::group_norm(groups_for(channels), channels, 1e-5, vb)
}

/// `GroupNorm → SiLU → conv → (+ time embedding) → GroupNorm → SiLU → conv`, with a
/// 1×1 projection on the skip path when the channel count changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    time_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new(cin: usize, cout: usize, time_dim: Option<usize>, vb: VarBuilder) -> candle_core::Result<Self> {
        let skip = if cin != cout {
            Some(conv1x1(cin, cout, vb.pp("skip"))?)
        } else {
            None
        };
        Ok(Self {
            norm1: group_norm(cin, vb.pp("norm1"))?,
            conv1: conv3x3(cin, cout, vb.pp("conv1"))?,
            time_proj: time_dim.map(|d| candle_nn::linear(d, cout, vb.pp("time_proj"))).transpose()?,
            norm2: group_norm(cout, vb.pp("norm2"))?,
            conv2: conv3x3(cout, cout, vb.pp("conv2"))?,
            skip,
        })
    }

    pub fn forward(&self, xs: &Tensor, temb: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(xs)?.silu()?)?;
        if let (Some(proj), Some(temb)) = (&self.time_proj, temb) {
            let t = proj.forward(&temb.silu()?)?.unsqueeze(D::Minus1)?.unsqueeze(D::Minus1)?;
            h = h.broadcast_add(&t)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(xs)?,
            None => xs.clone(),
        };
        skip + h
    }
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(xs: &Tensor) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = xs.dims4()?;
    xs.upsample_nearest2d(2 * h, 2 * w)
}
