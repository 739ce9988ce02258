use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::kspace::MagnitudeImage;

/// Modified Shepp-Logan ellipses: intensity, semi-axes (a, b), center (x0, y0), angle in degrees.
const SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    intensity: f64,
    a: f64,
    b: f64,
    x0: f64,
    y0: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.x0, y - self.y0);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Shepp-Logan-style phantom with randomized ellipse geometry and contrast,
/// extra random lesions and a smooth multiplicative bias field. Values are
/// clamped to `[0, 1]`.
pub fn make_phantom<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Result<MagnitudeImage> {
    if size < 32 {
        return Err(Error::InvalidInput(format!("phantom size must be >= 32, got {size}")));
    }
    let global_rot: f64 = rng.random_range(-0.2..0.2);
    let global_scale = rng.random_range(0.85..1.0);
    let shift = (rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04));

    let mut ellipses: Vec<Ellipse> = SHEPP_LOGAN
        .iter()
        .enumerate()
        .map(|(i, &(intensity, a, b, x0, y0, deg))| {
            if i < 2 {
                let stretch = rng.random_range(0.95..1.05);
                Ellipse { intensity, a: a * stretch, b: b * rng.random_range(0.95..1.05), x0, y0, theta: deg.to_radians() }
            } else {
                Ellipse {
                    intensity: intensity * rng.random_range(0.5..1.8),
                    a: a * rng.random_range(0.8..1.25),
                    b: b * rng.random_range(0.8..1.25),
                    x0: x0 + rng.random_range(-0.04..0.04),
                    y0: y0 + rng.random_range(-0.04..0.04),
                    theta: (deg + rng.random_range(-15.0..15.0)).to_radians(),
                }
            }
        })
        .collect();
    for _ in 0..rng.random_range(0..=4) {
        let r = rng.random_range(0.0..0.5);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        ellipses.push(Ellipse {
            intensity: rng.random_range(-0.15..0.3),
            a: rng.random_range(0.03..0.15),
            b: rng.random_range(0.03..0.15),
            x0: r * phi.cos(),
            y0: r * phi.sin(),
            theta: rng.random_range(0.0..std::f64::consts::PI),
        });
    }
    let bias = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));

    let (gs, gc) = global_rot.sin_cos();
    let img = Array2::from_shape_fn((size, size), |(i, j)| {
        let px = (2 * j + 1) as f64 / size as f64 - 1.0;
        let py = 1.0 - (2 * i + 1) as f64 / size as f64;
        // inverse global transform into phantom coordinates
        let (qx, qy) = ((px - shift.0) / global_scale, (py - shift.1) / global_scale);
        let x = qx * gc + qy * gs;
        let y = -qx * gs + qy * gc;
        let v: f64 = ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.intensity).sum();
        let field = 1.0 + bias.0 * px + bias.1 * py;
        (v * field).clamp(0.0, 1.0)
    });
    MagnitudeImage::new(img)
}
