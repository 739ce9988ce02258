//! On-disk dataset cache: one raw array file per field and a JSON manifest.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSpec, Sample, Split};
use crate::error::{Error, Result};
use crate::kspace::{KSpaceData, MagnitudeImage, SamplingMask};
use crate::rawio::{read_f32, write_f32};

const FORMAT: &str = "ldpm-dataset-v1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct SampleEntry {
    id: String,
    split: Split,
    height: usize,
    width: usize,
    scale: f64,
    af: f64,
    center_fraction: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    spec: DatasetSpec,
    samples: Vec<SampleEntry>,
}

fn complex_values(k: &KSpaceData) -> impl Iterator<Item = f32> + '_ {
    k.data().iter().flat_map(|v| [v.re as f32, v.im as f32])
}

fn read_complex(path: &Path, h: usize, w: usize) -> Result<KSpaceData> {
    let raw = read_f32(path, 2 * h * w)?;
    let values: Vec<Complex64> = raw.chunks_exact(2).map(|c| Complex64::new(c[0] as f64, c[1] as f64)).collect();
    KSpaceData::new(Array2::from_shape_vec((h, w), values).map_err(|e| Error::Corrupt(e.to_string()))?)
}

/// Writes `dataset` under `dir` (created if missing). Output bytes depend only on the dataset.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for s in dataset.split(split) {
            let (h, w) = s.shape();
            write_f32(&dir.join(format!("{}.gt.f32", s.id)), s.ground_truth.data().iter().map(|&v| v as f32))?;
            write_f32(&dir.join(format!("{}.kfull.c64", s.id)), complex_values(&s.k_full))?;
            write_f32(&dir.join(format!("{}.ku.c64", s.id)), complex_values(&s.k_u))?;
            write_f32(
                &dir.join(format!("{}.mask.f32", s.id)),
                s.mask.columns().iter().map(|&c| if c { 1.0 } else { 0.0 }),
            )?;
            entries.push(SampleEntry {
                id: s.id.clone(),
                split,
                height: h,
                width: w,
                scale: s.scale,
                af: s.mask.af(),
                center_fraction: s.mask.center_fraction(),
            });
        }
    }
    let manifest = Manifest { format: FORMAT.into(), spec: dataset.spec.clone(), samples: entries };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`].
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.exists() {
        return Err(Error::EmptyDataset(format!("no dataset manifest at {}", manifest_path.display())));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.format != FORMAT {
        return Err(Error::Corrupt(format!("unknown dataset format `{}`", manifest.format)));
    }
    let mut dataset = Dataset { spec: manifest.spec, train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for e in manifest.samples {
        let (h, w) = (e.height, e.width);
        let gt = read_f32(&dir.join(format!("{}.gt.f32", e.id)), h * w)?;
        let ground_truth = MagnitudeImage::new(
            Array2::from_shape_vec((h, w), gt.into_iter().map(f64::from).collect())
                .map_err(|err| Error::Corrupt(err.to_string()))?,
        )?;
        let cols = read_f32(&dir.join(format!("{}.mask.f32", e.id)), w)?;
        let mask = SamplingMask::from_columns(cols.iter().map(|&c| c != 0.0).collect(), e.af, e.center_fraction)?;
        let sample = Sample {
            ground_truth,
            scale: e.scale,
            k_full: read_complex(&dir.join(format!("{}.kfull.c64", e.id)), h, w)?,
            k_u: read_complex(&dir.join(format!("{}.ku.c64", e.id)), h, w)?,
            mask,
            id: e.id,
        };
        match e.split {
            Split::Train => dataset.train.push(sample),
            Split::Val => dataset.val.push(sample),
            Split::Test => dataset.test.push(sample),
        }
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;
    use crate::kspace::undersample;

    #[test]
    fn cache_round_trip_at_f32_precision() {
        let spec = DatasetSpec { n_train: 3, n_val: 1, n_test: 2, image_size: (32, 32), seed: 1, ..Default::default() };
        let ds = generate_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.spec, ds.spec);
        assert_eq!(back.test.len(), 2);
        for (a, b) in ds.train.iter().zip(&back.train) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.scale, b.scale);
            for (x, y) in a.ground_truth.data().iter().zip(b.ground_truth.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
            assert_eq!(undersample(&b.k_full, &b.mask).unwrap(), b.k_u);
        }
        // a second save of the loaded dataset is byte-identical
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(&back, dir2.path()).unwrap();
        for entry in fs::read_dir(dir.path()).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(fs::read(dir.path().join(&name)).unwrap(), fs::read(dir2.path().join(&name)).unwrap());
        }
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::EmptyDataset(_))));
    }
}
