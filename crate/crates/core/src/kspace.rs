//! Cartesian k-space numerics.
//!
//! All transforms use the centered, orthonormal convention: the DC bin of a
//! `H × W` grid sits at `(H / 2, W / 2)` and the forward transform is scaled by
//! `1 / sqrt(H * W)`, so Parseval holds exactly and `inverse_fft` is the adjoint
//! of `forward_fft`.

use ndarray::{Array2, Array3, Axis, Zip};
use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{shape_check, Error, Result};

fn check_finite_complex(data: &Array2<Complex64>, what: &str) -> Result<()> {
    if data.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} contains non-finite entries")))
    }
}

fn check_nonempty(shape: &[usize], what: &str) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidInput(format!("{what} has an empty dimension: {shape:?}")));
    }
    Ok(())
}

macro_rules! complex_grid {
    ($(#[$meta:meta])* $name:ident, $what:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            data: Array2<Complex64>,
        }

        impl $name {
            /// Wraps a grid, rejecting empty shapes and non-finite entries.
            pub fn new(data: Array2<Complex64>) -> Result<Self> {
                check_nonempty(data.shape(), $what)?;
                check_finite_complex(&data, $what)?;
                Ok(Self { data })
            }

            pub fn zeros(height: usize, width: usize) -> Self {
                Self { data: Array2::zeros((height, width)) }
            }

            pub fn data(&self) -> &Array2<Complex64> {
                &self.data
            }

            pub fn into_inner(self) -> Array2<Complex64> {
                self.data
            }

            pub fn shape(&self) -> (usize, usize) {
                self.data.dim()
            }

            /// Frobenius norm.
            pub fn norm(&self) -> f64 {
                self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
            }

            pub fn magnitude(&self) -> MagnitudeImage {
                MagnitudeImage { data: self.data.mapv(|v| v.norm()) }
            }
        }
    };
}

complex_grid!(
    /// Complex image-domain grid.
    ComplexImage,
    "complex image"
);

complex_grid!(
    /// Centered k-space grid (DC component at the grid center).
    KSpaceData,
    "k-space"
);

impl ComplexImage {
    /// Lifts a magnitude image to the complex plane with zero imaginary part.
    pub fn from_real(img: &MagnitudeImage) -> Self {
        Self { data: img.data.mapv(|v| Complex64::new(v, 0.0)) }
    }

    pub fn real_part(&self) -> Array2<f64> {
        self.data.mapv(|v| v.re)
    }
}

/// Real, nonnegative image grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeImage {
    data: Array2<f64>,
}

impl MagnitudeImage {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        check_nonempty(data.shape(), "magnitude image")?;
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "magnitude image entries must be finite and >= 0, found {bad}"
            )));
        }
        Ok(Self { data })
    }

    /// Builds an image from arbitrary finite reals by clamping into `[lo, hi]`.
    pub fn clamped(data: Array2<f64>, lo: f64, hi: f64) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image contains non-finite entries".into()));
        }
        Self::new(data.mapv(|v| v.clamp(lo.max(0.0), hi)))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { data: Array2::zeros((height, width)) }
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}

/// Multi-coil k-space stack, `coils × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCoilKSpace {
    data: Array3<Complex64>,
}

impl MultiCoilKSpace {
    pub fn new(data: Array3<Complex64>) -> Result<Self> {
        check_nonempty(data.shape(), "multi-coil k-space")?;
        if !data.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
            return Err(Error::InvalidInput("multi-coil k-space contains non-finite entries".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<Complex64> {
        &self.data
    }

    pub fn coils(&self) -> usize {
        self.data.dim().0
    }

    /// Inverse transform of every coil.
    pub fn coil_images(&self) -> Array3<Complex64> {
        let mut out = self.data.clone();
        for mut coil in out.axis_iter_mut(Axis(0)) {
            let img = centered_fft2(&coil.to_owned(), FftDirection::Inverse);
            coil.assign(&img);
        }
        out
    }

    /// Coil-combined magnitude image.
    pub fn rss_image(&self) -> MagnitudeImage {
        // coil count is validated at construction
        rss_combine(&self.coil_images()).expect("coil count checked at construction")
    }
}

/// Binary Cartesian column mask, broadcast over rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    columns: Vec<bool>,
    af: f64,
    center_fraction: f64,
}

impl SamplingMask {
    /// Builds a mask from explicit columns. `af` and `center_fraction` are
    /// descriptive and not checked against the column pattern.
    pub fn from_columns(columns: Vec<bool>, af: f64, center_fraction: f64) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::InvalidInput("mask must have at least one column".into()));
        }
        Ok(Self { columns, af, center_fraction })
    }

    /// Every column sampled.
    pub fn full(width: usize) -> Self {
        Self { columns: vec![true; width], af: 1.0, center_fraction: 1.0 }
    }

    /// No column sampled.
    pub fn empty(width: usize) -> Self {
        Self { columns: vec![false; width], af: f64::INFINITY, center_fraction: 0.0 }
    }

    pub fn columns(&self) -> &[bool] {
        &self.columns
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn af(&self) -> f64 {
        self.af
    }

    pub fn center_fraction(&self) -> f64 {
        self.center_fraction
    }

    pub fn is_sampled(&self, col: usize) -> bool {
        self.columns[col]
    }

    pub fn sampled_fraction(&self) -> f64 {
        self.columns.iter().filter(|&&c| c).count() as f64 / self.columns.len() as f64
    }

    /// Mask expanded to an `H × W` grid of 0/1 weights.
    pub fn to_grid(&self, height: usize) -> Array2<f64> {
        Array2::from_shape_fn((height, self.width()), |(_, j)| if self.columns[j] { 1.0 } else { 0.0 })
    }

    fn check_width(&self, shape: (usize, usize)) -> Result<()> {
        if shape.1 != self.width() {
            return Err(Error::ShapeMismatch {
                expected: vec![shape.0, shape.1],
                got: vec![shape.0, self.width()],
            });
        }
        Ok(())
    }
}

/// Moves element `c = n / 2` of each axis to index 0 (`ifftshift`) or back (`fftshift`).
fn shift(data: &Array2<Complex64>, inverse: bool) -> Array2<Complex64> {
    let (h, w) = data.dim();
    let (sh, sw) = (h / 2, w / 2);
    Array2::from_shape_fn((h, w), |(i, j)| {
        if inverse {
            data[((i + sh) % h, (j + sw) % w)]
        } else {
            data[((i + h - sh) % h, (j + w - sw) % w)]
        }
    })
}

fn fft_axis(data: &mut Array2<Complex64>, axis: Axis, direction: FftDirection) {
    let len = data.len_of(axis);
    let fft = FftPlanner::new().plan_fft(len, direction);
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    for mut lane in data.lanes_mut(axis) {
        for (b, v) in buf.iter_mut().zip(lane.iter()) {
            *b = *v;
        }
        fft.process(&mut buf);
        for (v, b) in lane.iter_mut().zip(buf.iter()) {
            *v = *b;
        }
    }
}

fn centered_fft2(data: &Array2<Complex64>, direction: FftDirection) -> Array2<Complex64> {
    let (h, w) = data.dim();
    let mut out = shift(data, true);
    fft_axis(&mut out, Axis(1), direction);
    fft_axis(&mut out, Axis(0), direction);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let mut out = shift(&out, false);
    out.mapv_inplace(|v| v * scale);
    out
}

/// Centered orthonormal 2-D DFT.
pub fn forward_fft(x: &ComplexImage) -> KSpaceData {
    KSpaceData { data: centered_fft2(&x.data, FftDirection::Forward) }
}

/// Exact inverse of [`forward_fft`].
pub fn inverse_fft(k: &KSpaceData) -> ComplexImage {
    ComplexImage { data: centered_fft2(&k.data, FftDirection::Inverse) }
}

/// Zeroes every unsampled column.
pub fn undersample(k_full: &KSpaceData, m: &SamplingMask) -> Result<KSpaceData> {
    m.check_width(k_full.shape())?;
    let mut data = k_full.data.clone();
    for (j, mut col) in data.axis_iter_mut(Axis(1)).enumerate() {
        if !m.columns[j] {
            col.fill(Complex64::new(0.0, 0.0));
        }
    }
    Ok(KSpaceData { data })
}

/// Replaces the sampled k-space region of `x` with the measurement:
/// `F⁻¹{F(x)·(I − M) + k_u·M}`.
pub fn data_consistency(x: &ComplexImage, k_u: &KSpaceData, m: &SamplingMask) -> Result<ComplexImage> {
    shape_check(&[x.shape().0, x.shape().1], &[k_u.shape().0, k_u.shape().1])?;
    m.check_width(x.shape())?;
    let mut k = forward_fft(x).data;
    for (j, (mut col, meas)) in k
        .axis_iter_mut(Axis(1))
        .zip(k_u.data.axis_iter(Axis(1)))
        .enumerate()
    {
        if m.columns[j] {
            col.assign(&meas);
        }
    }
    Ok(inverse_fft(&KSpaceData { data: k }))
}

/// Root-sum-of-squares coil combination of `C × H × W` coil images.
pub fn rss_combine(coil_images: &Array3<Complex64>) -> Result<MagnitudeImage> {
    let (coils, h, w) = coil_images.dim();
    if coils == 0 {
        return Err(Error::InvalidInput("rss_combine needs at least one coil".into()));
    }
    let mut acc = Array2::<f64>::zeros((h, w));
    for coil in coil_images.axis_iter(Axis(0)) {
        Zip::from(&mut acc).and(&coil).for_each(|a, v| *a += v.norm_sqr());
    }
    acc.mapv_inplace(f64::sqrt);
    MagnitudeImage::new(acc)
}

/// Magnitude of the inverse transform of zero-filled k-space.
pub fn zero_filled_recon(k_u: &KSpaceData) -> MagnitudeImage {
    inverse_fft(k_u).magnitude()
}

/// `‖(F(x) − k_u)·M‖₂`.
pub fn masked_residual_norm(x: &ComplexImage, k_u: &KSpaceData, m: &SamplingMask) -> Result<f64> {
    shape_check(&[x.shape().0, x.shape().1], &[k_u.shape().0, k_u.shape().1])?;
    m.check_width(x.shape())?;
    let k = forward_fft(x);
    let mut acc = 0.0;
    for ((_, j), (a, b)) in k.data.indexed_iter().map(|(ij, a)| (ij, (a, k_u.data[ij]))) {
        if m.columns[j] {
            acc += (a - b).norm_sqr();
        }
    }
    Ok(acc.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_complex(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<Complex64> {
        Array2::from_shape_fn((h, w), |_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    /// Direct centered DFT sum, O(N⁴).
    fn brute_dft(x: &Array2<Complex64>, sign: f64) -> Array2<Complex64> {
        let (h, w) = x.dim();
        let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
        let scale = 1.0 / ((h * w) as f64).sqrt();
        Array2::from_shape_fn((h, w), |(u, v)| {
            let mut acc = Complex64::new(0.0, 0.0);
            for ((m, n), val) in x.indexed_iter() {
                let phase = sign
                    * 2.0
                    * PI
                    * ((u as f64 - ch) * (m as f64 - ch) / h as f64 + (v as f64 - cw) * (n as f64 - cw) / w as f64);
                acc += val * Complex64::from_polar(1.0, phase);
            }
            acc * scale
        })
    }

    fn max_abs_diff(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn constant_image_maps_to_center_bin() {
        for n in [8usize, 9, 16] {
            let x = ComplexImage::new(Array2::from_elem((n, n), Complex64::new(1.0, 0.0))).unwrap();
            let k = forward_fft(&x);
            for ((i, j), v) in k.data().indexed_iter() {
                let expected = if (i, j) == (n / 2, n / 2) { n as f64 } else { 0.0 };
                assert!((v - Complex64::new(expected, 0.0)).norm() <= 1e-10, "n={n} ({i},{j}) {v}");
            }
        }
    }

    #[test]
    fn center_bin_maps_to_constant_image() {
        let n = 8;
        let mut k = Array2::zeros((n, n));
        k[(n / 2, n / 2)] = Complex64::new(n as f64, 0.0);
        let x = inverse_fft(&KSpaceData::new(k).unwrap());
        for v in x.data() {
            assert!((v - Complex64::new(1.0, 0.0)).norm() <= 1e-10);
        }
    }

    #[test]
    fn fft_matches_brute_force_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (h, w) in [(8, 8), (7, 8), (8, 5)] {
            let x = random_complex(&mut rng, h, w);
            let k = forward_fft(&ComplexImage::new(x.clone()).unwrap());
            assert!(max_abs_diff(k.data(), &brute_dft(&x, -1.0)) <= 1e-8);
            let xi = inverse_fft(&KSpaceData::new(x.clone()).unwrap());
            assert!(max_abs_diff(xi.data(), &brute_dft(&x, 1.0)) <= 1e-8);
        }
    }

    #[test]
    fn fft_round_trips_and_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = ComplexImage::new(random_complex(&mut rng, 32, 24)).unwrap();
        let k = forward_fft(&x);
        assert!(((k.norm() - x.norm()) / x.norm()).abs() <= 1e-6);
        let back = inverse_fft(&k);
        assert!(max_abs_diff(back.data(), x.data()) / x.norm() <= 1e-6);
        let k2 = KSpaceData::new(random_complex(&mut rng, 16, 16)).unwrap();
        assert!(max_abs_diff(forward_fft(&inverse_fft(&k2)).data(), k2.data()) <= 1e-6 * k2.norm());
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let mut x = Array2::from_elem((4, 4), Complex64::new(0.0, 0.0));
        x[(1, 2)] = Complex64::new(f64::NAN, 0.0);
        assert!(matches!(ComplexImage::new(x.clone()), Err(Error::InvalidInput(_))));
        assert!(KSpaceData::new(x).is_err());
        assert!(MagnitudeImage::new(Array2::from_elem((2, 2), -1.0)).is_err());
        assert!(MagnitudeImage::new(Array2::zeros((0, 3))).is_err());
    }

    #[test]
    fn undersample_masks_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = KSpaceData::new(random_complex(&mut rng, 8, 16)).unwrap();
        assert_eq!(undersample(&k, &SamplingMask::full(16)).unwrap(), k);
        assert!(undersample(&k, &SamplingMask::empty(16)).unwrap().data().iter().all(|v| v.norm() == 0.0));

        let cols: Vec<bool> = (0..16).map(|_| rng.random_bool(0.5)).collect();
        let m = SamplingMask::from_columns(cols.clone(), 2.0, 0.0).unwrap();
        let ku = undersample(&k, &m).unwrap();
        for j in 0..16 {
            let nonzero = ku.data().column(j).iter().any(|v| v.norm() > 0.0);
            assert_eq!(nonzero, cols[j]);
        }
        assert!(undersample(&k, &SamplingMask::full(15)).is_err());
    }

    #[test]
    fn dc_extreme_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = ComplexImage::new(random_complex(&mut rng, 8, 8)).unwrap();
        let ku = KSpaceData::new(random_complex(&mut rng, 8, 8)).unwrap();
        let full = data_consistency(&x, &ku, &SamplingMask::full(8)).unwrap();
        assert!(max_abs_diff(full.data(), inverse_fft(&ku).data()) <= 1e-12);
        let none = data_consistency(&x, &ku, &SamplingMask::empty(8)).unwrap();
        assert!(max_abs_diff(none.data(), x.data()) <= 1e-12);
        assert!(data_consistency(&x, &KSpaceData::zeros(8, 4), &SamplingMask::full(8)).is_err());
    }

    #[test]
    fn rss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_complex(&mut rng, 6, 5);
        let single = x.clone().insert_axis(Axis(0));
        let r = rss_combine(&single).unwrap();
        for (a, b) in r.data().iter().zip(x.iter()) {
            assert!((a - b.norm()).abs() <= 1e-12);
        }
        let two = ndarray::stack(Axis(0), &[x.view(), x.view()]).unwrap();
        let r2 = rss_combine(&two).unwrap();
        for (a, b) in r2.data().iter().zip(x.iter()) {
            assert!((a - 2f64.sqrt() * b.norm()).abs() <= 1e-12);
        }
        assert!(rss_combine(&Array3::zeros((0, 4, 4))).is_err());

        let stack = Array3::from_shape_fn((4, 7, 9), |_| Complex64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)));
        let fast = rss_combine(&stack).unwrap();
        for i in 0..7 {
            for j in 0..9 {
                let mut s = 0.0;
                for c in 0..4 {
                    let v = stack[(c, i, j)];
                    s += v.re * v.re + v.im * v.im;
                }
                assert!((fast.data()[(i, j)] - s.sqrt()).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn zero_filled_fully_sampled_recovers_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let img = MagnitudeImage::new(Array2::from_shape_fn((16, 16), |_| rng.random_range(0.0..1.0))).unwrap();
        let k = forward_fft(&ComplexImage::from_real(&img));
        let rec = zero_filled_recon(&k);
        for (a, b) in rec.data().iter().zip(img.data().iter()) {
            assert!((a - b).abs() <= 1e-6);
        }
        assert!(zero_filled_recon(&KSpaceData::zeros(8, 8)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn multicoil_rss_uses_coil_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let imgs = Array3::from_shape_fn((3, 8, 8), |_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let mut k = imgs.clone();
        for (mut kc, ic) in k.axis_iter_mut(Axis(0)).zip(imgs.axis_iter(Axis(0))) {
            kc.assign(forward_fft(&ComplexImage::new(ic.to_owned()).unwrap()).data());
        }
        let mc = MultiCoilKSpace::new(k).unwrap();
        let expected = rss_combine(&imgs).unwrap();
        for (a, b) in mc.rss_image().data().iter().zip(expected.data()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
}
