//! Synthetic prostate-like phantoms for desk-scale validation.
//!
//! The gland is a rotated, jittered ellipsoid; the transition zone (TZ) is a
//! smaller ellipsoid sharing its orientation, shifted anteriorly; the
//! peripheral zone (PZ) is the posterior part of the gland outside the TZ.
//! The anterior remainder keeps the plain gland intensity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BinaryMask, Grid3, Volume3D};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionIntensities {
    pub background: f64,
    pub gland: f64,
    pub tz: f64,
    pub pz: f64,
}

impl Default for RegionIntensities {
    fn default() -> Self {
        Self {
            background: 0.2,
            gland: 0.5,
            tz: 0.35,
            pz: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub size: [usize; 3],
    pub spacing: [f64; 3],
    /// Gland semi-axes in voxels, in the rotated frame.
    pub gland_axes: [f64; 3],
    pub tz_axes: [f64; 3],
    /// Shift of the TZ centre along the first rotated axis (negative = anterior).
    pub tz_offset: f64,
    pub intensities: RegionIntensities,
    pub noise_sigma: f64,
    pub bias_amplitude: f64,
    /// Maximum centre displacement per axis, in voxels.
    pub center_jitter: [f64; 3],
    /// Maximum relative change of each semi-axis.
    pub axis_jitter: f64,
    /// Maximum in-plane rotation, in degrees.
    pub rotation_jitter_deg: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: [64, 64, 32],
            spacing: [1.0, 1.0, 1.0],
            gland_axes: [15.0, 13.0, 8.0],
            tz_axes: [8.0, 8.0, 5.0],
            tz_offset: -3.0,
            intensities: RegionIntensities::default(),
            noise_sigma: 0.05,
            bias_amplitude: 0.1,
            center_jitter: [4.0, 4.0, 2.0],
            axis_jitter: 0.1,
            rotation_jitter_deg: 15.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("phantom spec: {m}")));
        if self.size.iter().any(|&n| n == 0) {
            return bad(format!("grid size must be >= 1, got {:?}", self.size));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad(format!("spacing must be positive, got {:?}", self.spacing));
        }
        if !(0.0..1.0).contains(&self.axis_jitter) {
            return bad(format!("axis jitter must lie in [0, 1), got {}", self.axis_jitter));
        }
        let shrink = 1.0 - self.axis_jitter;
        for (name, axes) in [("gland", self.gland_axes), ("tz", self.tz_axes)] {
            if axes.iter().any(|&a| !(a * shrink >= 2.0)) {
                return bad(format!("{name} semi-axes must stay >= 2 voxels, got {axes:?}"));
            }
        }
        if !(self.noise_sigma >= 0.0) || !(self.bias_amplitude >= 0.0) {
            return bad("noise sigma and bias amplitude must be >= 0".into());
        }
        if self.center_jitter.iter().any(|&j| !(j >= 0.0)) {
            return bad("center jitter must be >= 0".into());
        }
        if !self.tz_inside_gland() {
            return bad("TZ ellipsoid must lie strictly inside the gland ellipsoid".into());
        }
        Ok(())
    }

    /// Checks strict containment on a dense sampling of the TZ surface. Axis
    /// jitter scales both ellipsoids by the same per-axis factor, so the
    /// nominal check covers every jittered instance.
    fn tz_inside_gland(&self) -> bool {
        let (g, t) = (self.gland_axes, self.tz_axes);
        let steps = 96;
        for i in 0..=steps {
            let theta = std::f64::consts::PI * i as f64 / steps as f64;
            for j in 0..2 * steps {
                let phi = std::f64::consts::PI * j as f64 / steps as f64;
                let p = [
                    self.tz_offset + t[0] * theta.sin() * phi.cos(),
                    t[1] * theta.sin() * phi.sin(),
                    t[2] * theta.cos(),
                ];
                let r: f64 = (0..3).map(|a| (p[a] / g[a]).powi(2)).sum();
                if r >= 1.0 {
                    return false;
                }
            }
        }
        true
    }
}

/// A generated case with its three label masks.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: Volume3D,
    pub gland: BinaryMask,
    pub tz: BinaryMask,
    pub pz: BinaryMask,
    /// Continuous gland centre in voxel coordinates.
    pub center: [f64; 3],
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };

    let center: [f64; 3] =
        std::array::from_fn(|a| (spec.size[a] as f64 - 1.0) / 2.0 + sym(spec.center_jitter[a]));
    let scale: [f64; 3] = std::array::from_fn(|_| 1.0 + sym(spec.axis_jitter));
    let angle = sym(spec.rotation_jitter_deg).to_radians();
    let phases: [f64; 3] = std::array::from_fn(|_| sym(std::f64::consts::PI));

    let g: [f64; 3] = std::array::from_fn(|a| spec.gland_axes[a] * scale[a]);
    let t: [f64; 3] = std::array::from_fn(|a| spec.tz_axes[a] * scale[a]);
    let tz_off = spec.tz_offset * scale[0];
    let (sin, cos) = angle.sin_cos();

    let local = |x: usize, y: usize, z: usize| {
        let (dx, dy, dz) = (x as f64 - center[0], y as f64 - center[1], z as f64 - center[2]);
        [cos * dx + sin * dy, -sin * dx + cos * dy, dz]
    };
    let inside = |p: [f64; 3], axes: [f64; 3], off: f64| {
        ((p[0] - off) / axes[0]).powi(2) + (p[1] / axes[1]).powi(2) + (p[2] / axes[2]).powi(2)
            <= 1.0
    };

    let gland = BinaryMask::from_fn(spec.size, |x, y, z| inside(local(x, y, z), g, 0.0));
    let tz = BinaryMask::from_fn(spec.size, |x, y, z| {
        gland.contains(x, y, z) && inside(local(x, y, z), t, tz_off)
    });
    let pz = BinaryMask::from_fn(spec.size, |x, y, z| {
        gland.contains(x, y, z) && !tz.contains(x, y, z) && local(x, y, z)[0] >= 0.0
    });

    let two_pi = 2.0 * std::f64::consts::PI;
    let size = spec.size.map(|n| n as f64);
    let bias = |x: usize, y: usize, z: usize| {
        let b = ((two_pi * x as f64 / size[0] + phases[0]).sin()
            * (two_pi * y as f64 / size[1] + phases[1]).cos()
            + (two_pi * z as f64 / size[2] + phases[2]).sin())
            / 2.0;
        1.0 + spec.bias_amplitude * b
    };
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Invalid(format!("noise distribution: {e}")))?;
    let it = &spec.intensities;
    let grid = Grid3::from_fn(spec.size, |x, y, z| {
        let mean = if tz.contains(x, y, z) {
            it.tz
        } else if pz.contains(x, y, z) {
            it.pz
        } else if gland.contains(x, y, z) {
            it.gland
        } else {
            it.background
        };
        let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        (mean * bias(x, y, z) + n) as f32
    });
    let volume = Volume3D::new(grid, spec.spacing, [0.0; 3])?;
    Ok(Phantom {
        volume,
        gland,
        tz,
        pz,
        center,
    })
}
