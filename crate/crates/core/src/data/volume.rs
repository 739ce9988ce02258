use std::path::Path;

use hdf5_metno as hdf5;
use ndarray::{Array4, Axis};
use num_complex::{Complex32, Complex64};

use crate::error::{Error, Result};
use crate::kspace::MultiCoilKSpace;

/// Trailing slices dropped from every volume.
pub const DISCARDED_TRAILING_SLICES: usize = 3;

const DATASET: &str = "kspace";

/// Reads a fastMRI-layout volume: dataset `kspace`, complex64, shape
/// `[slices, coils, H, W]`. The last [`DISCARDED_TRAILING_SLICES`] slices are dropped.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Vec<MultiCoilKSpace>> {
    let path = path.as_ref();
    let err = |reason: String| Error::Volume { path: path.to_path_buf(), reason };
    if !path.exists() {
        return Err(err("file does not exist".into()));
    }
    let file = hdf5::File::open(path).map_err(|e| err(format!("cannot open as HDF5: {e}")))?;
    let ds = file
        .dataset(DATASET)
        .map_err(|_| err(format!("missing dataset `{DATASET}`")))?;
    let shape = ds.shape();
    if shape.len() != 4 {
        return Err(err(format!(
            "dataset `{DATASET}` must have rank 4 [slices, coils, H, W], found shape {shape:?}"
        )));
    }
    let raw: Array4<Complex32> = ds
        .read()
        .map_err(|e| err(format!("cannot read `{DATASET}` as complex64: {e}")))?;
    let slices = shape[0];
    if slices <= DISCARDED_TRAILING_SLICES {
        log::warn!(
            "{}: {slices} slices, all discarded (last {DISCARDED_TRAILING_SLICES} are dropped)",
            path.display()
        );
        return Ok(Vec::new());
    }
    raw.axis_iter(Axis(0))
        .take(slices - DISCARDED_TRAILING_SLICES)
        .map(|slice| MultiCoilKSpace::new(slice.mapv(|v| Complex64::new(v.re as f64, v.im as f64))))
        .collect()
}

/// Writes a `[slices, coils, H, W]` complex64 volume in the layout read by [`load_volume`].
pub fn write_volume(path: impl AsRef<Path>, kspace: &Array4<Complex32>) -> Result<()> {
    let file = hdf5::File::create(path.as_ref())?;
    file.new_dataset_builder().with_data(kspace).create(DATASET)?;
    Ok(())
}
