//! Image quality metrics and evaluation reports.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize, Serializer};

use crate::data::Sample;
use crate::error::{shape_check, Error, Result};
use crate::kspace::MagnitudeImage;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB. Identical images give `f64::INFINITY`.
pub fn psnr(estimate: &Array2<f64>, reference: &Array2<f64>, peak: f64) -> Result<f64> {
    shape_check(reference.shape(), estimate.shape())?;
    if !(peak > 0.0) {
        return Err(Error::InvalidInput(format!("PSNR peak must be positive, got {peak}")));
    }
    let mse = estimate
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / estimate.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// PSNR on the original intensity scale of a normalized sample.
pub fn psnr_original_scale(estimate: &Array2<f64>, reference: &Array2<f64>, scale: f64) -> Result<f64> {
    psnr(&estimate.mapv(|v| v * scale), &reference.mapv(|v| v * scale), scale)
}

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" Gaussian filtering.
fn filter_valid(img: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = kernel.len();
    let rows = Array2::from_shape_fn((h, w - k + 1), |(i, j)| {
        kernel.iter().enumerate().map(|(t, g)| g * img[(i, j + t)]).sum::<f64>()
    });
    Array2::from_shape_fn((h - k + 1, w - k + 1), |(i, j)| {
        kernel.iter().enumerate().map(|(t, g)| g * rows[(i + t, j)]).sum::<f64>()
    })
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// K1 = 0.01, K2 = 0.03 and unit dynamic range, over the valid region.
pub fn ssim(estimate: &Array2<f64>, reference: &Array2<f64>) -> Result<f64> {
    shape_check(reference.shape(), estimate.shape())?;
    let (h, w) = estimate.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let g = gaussian_kernel();
    let (x, y) = (estimate, reference);
    let mu_x = filter_valid(x, &g);
    let mu_y = filter_valid(y, &g);
    let xx = filter_valid(&(x * x), &g);
    let yy = filter_valid(&(y * y), &g);
    let xy = filter_valid(&(x * y), &g);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for (((mx, my), (sxx, syy)), sxy) in mu_x
        .iter()
        .zip(mu_y.iter())
        .zip(xx.iter().zip(yy.iter()))
        .zip(xy.iter())
    {
        let var_x = sxx - mx * mx;
        let var_y = syy - my * my;
        let cov = sxy - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
    }
    Ok(total / mu_x.len() as f64)
}

fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&v.to_string())
    }
}

fn deserialize_db<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) => t.parse().map_err(serde::de::Error::custom),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetric {
    pub id: String,
    #[serde(serialize_with = "serialize_db", deserialize_with = "deserialize_db")]
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-sample and aggregate metrics of one reconstruction method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub dataset: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(serialize_with = "serialize_db", deserialize_with = "deserialize_db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub samples: Vec<SampleMetric>,
}

impl MetricReport {
    pub fn from_samples(method: &str, samples: Vec<SampleMetric>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset(format!("no samples evaluated for `{method}`")));
        }
        let n = samples.len() as f64;
        let mean_psnr = samples.iter().map(|s| s.psnr).sum::<f64>() / n;
        let mean_ssim = samples.iter().map(|s| s.ssim).sum::<f64>() / n;
        Ok(Self {
            method: method.to_string(),
            dataset: String::new(),
            config_hash: String::new(),
            seed: 0,
            mean_psnr,
            mean_ssim,
            samples,
        })
    }

    pub fn with_provenance(mut self, dataset: &str, config_hash: &str, seed: u64) -> Self {
        self.dataset = dataset.to_string();
        self.config_hash = config_hash.to_string();
        self.seed = seed;
        self
    }
}

/// Runs `reconstruct` on every sample and scores it against the normalized
/// ground truth with PSNR (peak 1) and SSIM.
pub fn evaluate<F>(method: &str, samples: &[Sample], mut reconstruct: F) -> Result<MetricReport>
where
    F: FnMut(&Sample) -> Result<MagnitudeImage>,
{
    if samples.is_empty() {
        return Err(Error::EmptyDataset(format!("cannot evaluate `{method}` on an empty dataset")));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for sample in samples {
        let rec = reconstruct(sample)?;
        let gt = sample.ground_truth.data();
        rows.push(SampleMetric {
            id: sample.id.clone(),
            psnr: psnr(rec.data(), gt, 1.0)?,
            ssim: ssim(rec.data(), gt)?,
        });
    }
    MetricReport::from_samples(method, rows)
}

/// Writes per-sample rows to `<stem>.csv` and aggregates to `<stem>.json`.
pub fn write_reports(reports: &[MetricReport], dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from("method,sample,psnr_db,ssim,config_hash,seed\n");
    for r in reports {
        for s in &r.samples {
            csv.push_str(&format!("{},{},{},{},{},{}\n", r.method, s.id, s.psnr, s.ssim, r.config_hash, r.seed));
        }
    }
    fs::write(dir.join(format!("{stem}.csv")), csv)?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(reports)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_phantom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn psnr_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, 16, 16);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        let shifted = x.mapv(|v| v + 0.1);
        assert!((psnr(&shifted, &x, 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert!(psnr(&x, &Array2::zeros((4, 4)), 1.0).is_err());
        assert!(psnr(&x, &x, 0.0).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let p = make_phantom(&mut ChaCha8Rng::seed_from_u64(4), 64).unwrap();
        assert_eq!(ssim(p.data(), p.data()).unwrap(), 1.0);
        let inv = p.data().mapv(|v| 1.0 - v);
        assert!(ssim(&inv, p.data()).unwrap() < 0.9);
        assert!(ssim(&Array2::zeros((8, 8)), &Array2::zeros((8, 8))).is_err());
    }

    #[test]
    fn evaluate_aggregates_means() {
        let spec = crate::data::DatasetSpec { n_train: 1, n_val: 0, n_test: 4, image_size: (32, 32), ..Default::default() };
        let ds = crate::data::generate_dataset(&spec).unwrap();
        let ident = evaluate("identity", &ds.test, |s| Ok(s.ground_truth.clone())).unwrap();
        assert_eq!(ident.mean_ssim, 1.0);
        let zf = evaluate("zero-filled", &ds.test, |s| Ok(s.zero_filled())).unwrap();
        let mean: f64 = zf.samples.iter().map(|s| s.psnr).sum::<f64>() / 4.0;
        assert!((zf.mean_psnr - mean).abs() <= 1e-12);
        assert!(zf.mean_psnr.is_finite());
        assert!(matches!(evaluate("x", &[], |s| Ok(s.zero_filled())), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn report_json_keeps_infinite_psnr() {
        let r = MetricReport::from_samples("identity", vec![SampleMetric { id: "a".into(), psnr: f64::INFINITY, ssim: 1.0 }]).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"inf\""));
        let back: MetricReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }
}
