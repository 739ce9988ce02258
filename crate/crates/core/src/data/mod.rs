//! Training and evaluation data: Cartesian masks, randomized ellipse
//! phantoms, normalization and seed-partitioned datasets.

mod cache;
mod phantom;
mod volume;

use std::path::PathBuf;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::{forward_fft, undersample, zero_filled_recon, ComplexImage, KSpaceData, MagnitudeImage, SamplingMask};

pub use cache::{load_dataset, save_dataset};
pub use phantom::make_phantom;
pub use volume::{load_volume, write_volume, DISCARDED_TRAILING_SLICES};

/// Center fraction used when a configuration does not specify one.
pub fn default_center_fraction(af: f64) -> f64 {
    if af >= 8.0 {
        0.04
    } else {
        0.08
    }
}

/// Random Cartesian column mask.
///
/// The central `round(center_fraction · width)` columns are always sampled;
/// the rest are drawn i.i.d. so the expected sampled fraction is `1 / af`.
/// Draws whose realized fraction falls outside `[0.8 / af, 1.5 / af]` are
/// rejected and redrawn from the same generator.
pub fn generate_mask<R: Rng + ?Sized>(width: usize, af: f64, center_fraction: f64, rng: &mut R) -> Result<SamplingMask> {
    if width < 8 {
        return Err(Error::InvalidInput(format!("mask width must be >= 8, got {width}")));
    }
    if !(af >= 1.0) || !af.is_finite() {
        return Err(Error::InvalidInput(format!("acceleration factor must be >= 1, got {af}")));
    }
    if !(center_fraction > 0.0 && center_fraction < 1.0) {
        return Err(Error::InvalidInput(format!("center fraction must lie in (0, 1), got {center_fraction}")));
    }
    if center_fraction > 1.0 / af {
        return Err(Error::Infeasible(format!(
            "center fraction {center_fraction} exceeds the sampling budget 1/{af}"
        )));
    }
    let n_center = (center_fraction * width as f64).round() as usize;
    let start = (width - n_center + 1) / 2;
    let remaining = (width - n_center) as f64;
    let prob = if remaining > 0.0 {
        ((width as f64 / af - n_center as f64) / remaining).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (lo, hi) = (0.8 / af, 1.5 / af);
    for _ in 0..10_000 {
        let columns: Vec<bool> = (0..width)
            .map(|j| (start..start + n_center).contains(&j) || rng.random_bool(prob))
            .collect();
        let frac = columns.iter().filter(|&&c| c).count() as f64 / width as f64;
        if frac >= lo && frac <= hi {
            return SamplingMask::from_columns(columns, af, center_fraction);
        }
    }
    Err(Error::Infeasible(format!(
        "could not draw a mask of width {width} with sampled fraction in [{lo}, {hi}]"
    )))
}

/// Scales an image by its maximum so that `max(output) = 1`.
/// Returns the normalized image and the scale factor (the original maximum).
pub fn normalize(img: &MagnitudeImage) -> Result<(MagnitudeImage, f64)> {
    let peak = img.max();
    if !(peak > 0.0) {
        return Err(Error::InvalidInput("cannot normalize an all-zero image".into()));
    }
    Ok((MagnitudeImage::new(img.data().mapv(|v| v / peak))?, peak))
}

/// One reconstruction problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Normalized ground truth in `[0, 1]`.
    pub ground_truth: MagnitudeImage,
    /// Normalization factor: original-scale image = `ground_truth · scale`.
    pub scale: f64,
    pub k_full: KSpaceData,
    pub k_u: KSpaceData,
    pub mask: SamplingMask,
}

impl Sample {
    /// Normalizes `image`, simulates its k-space and undersamples it with `mask`.
    pub fn simulate(id: impl Into<String>, image: &MagnitudeImage, mask: SamplingMask) -> Result<Self> {
        let (ground_truth, scale) = normalize(image)?;
        let k_full = forward_fft(&ComplexImage::from_real(&ground_truth));
        let k_u = undersample(&k_full, &mask)?;
        Ok(Self { id: id.into(), ground_truth, scale, k_full, k_u, mask })
    }

    pub fn zero_filled(&self) -> MagnitudeImage {
        zero_filled_recon(&self.k_u)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.ground_truth.shape()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DataSource {
    Phantom,
    /// fastMRI-layout HDF5 files; slices are pooled and seed-partitioned.
    VolumeFiles { paths: Vec<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub image_size: (usize, usize),
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub af: f64,
    /// `None` selects [`default_center_fraction`].
    pub center_fraction: Option<f64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Phantom,
            image_size: (64, 64),
            n_train: 200,
            n_val: 20,
            n_test: 50,
            seed: 0,
            af: 4.0,
            center_fraction: None,
        }
    }
}

impl DatasetSpec {
    pub fn center_fraction(&self) -> f64 {
        self.center_fraction.unwrap_or_else(|| default_center_fraction(self.af))
    }

    fn validate(&self) -> Result<()> {
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::InvalidInput("image size must be positive".into()));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::InvalidInput("train and test splits must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// `split` undersampled at `af`. The stored masks are kept when `af`
    /// equals the dataset's own factor; otherwise masks are redrawn.
    pub fn split_at(&self, split: Split, af: f64) -> Result<Vec<Sample>> {
        let samples = self.split(split);
        if af == self.spec.af {
            return Ok(samples.to_vec());
        }
        let base = derive_seed(self.spec.seed, af.to_bits());
        resample_masks(samples, af, if split == Split::Test { base } else { derive_seed(base, split as u64 + 1) })
    }

    /// Shorthand for [`Dataset::split_at`] on the test split.
    pub fn test_at(&self, af: f64) -> Result<Vec<Sample>> {
        self.split_at(Split::Test, af)
    }
}

/// Redraws every mask at acceleration `af` with the default center fraction;
/// sample `i` uses the generator seeded by `derive_seed(seed, i)`.
pub fn resample_masks(samples: &[Sample], af: f64, seed: u64) -> Result<Vec<Sample>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let mask = generate_mask(s.shape().1, af, default_center_fraction(af), &mut rng)?;
            let mut out = Sample::simulate(s.id.clone(), &s.ground_truth, mask)?;
            out.scale *= s.scale;
            Ok(out)
        })
        .collect()
}

/// SplitMix64 finalizer; derives independent per-item seeds from a base seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B3_E50C);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn center_crop(img: &MagnitudeImage, (h, w): (usize, usize)) -> Result<MagnitudeImage> {
    let (ih, iw) = img.shape();
    if ih < h || iw < w {
        return Err(Error::InvalidInput(format!("cannot crop {ih}x{iw} image to {h}x{w}")));
    }
    let (r0, c0) = ((ih - h) / 2, (iw - w) / 2);
    MagnitudeImage::new(img.data().slice(s![r0..r0 + h, c0..c0 + w]).to_owned())
}

/// Builds every split of a dataset. A pure function of `spec`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let total = spec.n_train + spec.n_val + spec.n_test;
    let (h, w) = spec.image_size;
    let cf = spec.center_fraction();

    let images: Vec<MagnitudeImage> = match &spec.source {
        DataSource::Phantom => {
            if h != w {
                return Err(Error::InvalidInput(format!("phantoms are square, got {h}x{w}")));
            }
            (0..total)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2 * i as u64));
                    make_phantom(&mut rng, h)
                })
                .collect::<Result<_>>()?
        }
        DataSource::VolumeFiles { paths } => {
            let mut slices = Vec::new();
            for path in paths {
                for slice in load_volume(path)? {
                    slices.push(center_crop(&slice.rss_image(), spec.image_size)?);
                }
            }
            if slices.len() < total {
                return Err(Error::InvalidInput(format!(
                    "volume files hold {} usable slices, {} requested",
                    slices.len(),
                    total
                )));
            }
            let mut order: Vec<usize> = (0..slices.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
            order.truncate(total);
            order.into_iter().map(|i| slices[i].clone()).collect()
        }
    };

    let mut splits: [Vec<Sample>; 3] = Default::default();
    let bounds = [
        (Split::Train, 0, spec.n_train),
        (Split::Val, spec.n_train, spec.n_train + spec.n_val),
        (Split::Test, spec.n_train + spec.n_val, total),
    ];
    for (slot, (split, lo, hi)) in splits.iter_mut().zip(bounds) {
        for (local, global) in (lo..hi).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2 * global as u64 + 1));
            let mask = generate_mask(w, spec.af, cf, &mut rng)?;
            let id = format!("{}_{local:04}", split.as_str());
            slot.push(Sample::simulate(id, &images[global], mask)?);
        }
    }
    let [train, val, test] = splits;
    Ok(Dataset { spec: spec.clone(), train, val, test })
}

/// Random flips applied jointly to a batch item.
pub fn random_flip<R: Rng + ?Sized>(img: &Array2<f64>, rng: &mut R) -> Array2<f64> {
    let mut out = img.clone();
    if rng.random_bool(0.5) {
        out = out.slice(s![.., ..;-1]).to_owned();
    }
    if rng.random_bool(0.5) {
        out = out.slice(s![..;-1, ..]).to_owned();
    }
    out
}

/// Random `size × size` crop; the whole image is returned when it is not larger than `size`.
pub fn random_crop<R: Rng + ?Sized>(img: &Array2<f64>, size: usize, rng: &mut R) -> Array2<f64> {
    let (h, w) = img.dim();
    let (ch, cw) = (size.min(h), size.min(w));
    let r0 = if h > ch { rng.random_range(0..=h - ch) } else { 0 };
    let c0 = if w > cw { rng.random_range(0..=w - cw) } else { 0 };
    img.slice(s![r0..r0 + ch, c0..c0 + cw]).to_owned()
}
