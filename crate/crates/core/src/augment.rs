//! Seeded training-time augmentation: 90° rotations, axis flips, intensity
//! scaling/shifting and additive Gaussian noise.
//!
//! `apply_policy` always composes rotate → flip → intensity/noise. Geometric
//! operations only move voxels, so they preserve the voxel multiset exactly.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Argument(format!("invalid axis index {i} (expected 0, 1 or 2)")))
    }

    fn index(self) -> usize {
        self as usize
    }

    /// The two axes spanning the rotation plane, in rotation order.
    fn plane(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (2, 0),
            Axis::Z => (0, 1),
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(Error::Argument(format!("invalid axis `{other}` (expected x, y or z)"))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    #[serde(default = "defaults::half")]
    pub p_rot90: f64,
    #[serde(default = "defaults::half")]
    pub p_flip_per_axis: f64,
    #[serde(default = "defaults::noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "defaults::scale_range")]
    pub scale_range: [f64; 2],
    #[serde(default = "defaults::shift_range")]
    pub shift_range: [f64; 2],
    pub rng_seed: u64,
    /// Allow rotations in planes with unequal extents (changes dims).
    #[serde(default)]
    pub allow_dim_permute: bool,
}

mod defaults {
    pub fn half() -> f64 {
        0.5
    }
    pub fn noise_sigma() -> f64 {
        0.01
    }
    pub fn scale_range() -> [f64; 2] {
        [0.9, 1.1]
    }
    pub fn shift_range() -> [f64; 2] {
        [-0.05, 0.05]
    }
}

impl AugmentPolicy {
    pub fn default_with_seed(rng_seed: u64) -> Self {
        AugmentPolicy {
            p_rot90: defaults::half(),
            p_flip_per_axis: defaults::half(),
            noise_sigma: defaults::noise_sigma(),
            scale_range: defaults::scale_range(),
            shift_range: defaults::shift_range(),
            rng_seed,
            allow_dim_permute: false,
        }
    }

    /// A policy that leaves every volume unchanged.
    pub fn identity(rng_seed: u64) -> Self {
        AugmentPolicy {
            p_rot90: 0.0,
            p_flip_per_axis: 0.0,
            noise_sigma: 0.0,
            scale_range: [1.0, 1.0],
            shift_range: [0.0, 0.0],
            rng_seed,
            allow_dim_permute: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64, name: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0, 1], got {p}")))
            }
        };
        prob(self.p_rot90, "p_rot90")?;
        prob(self.p_flip_per_axis, "p_flip_per_axis")?;
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        for (r, name) in [(self.scale_range, "scale_range"), (self.shift_range, "shift_range")] {
            if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return Err(Error::Config(format!("{name} needs finite lo <= hi, got {r:?}")));
            }
        }
        Ok(())
    }
}

fn rotate_once(v: &Volume, axis: Axis) -> Volume {
    let d = v.dims();
    let (a, b) = axis.plane();
    let mut od = d;
    od.swap(a, b);
    let mut out = vec![0.0f32; v.len()];
    // (.., p_a, p_b, ..) → (.., p_b, n_a - 1 - p_a, ..) in the rotated frame
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let p = [x, y, z];
                let mut q = p;
                q[a] = p[b];
                q[b] = d[a] - 1 - p[a];
                out[(q[2] * od[1] + q[1]) * od[0] + q[0]] = v.get(x, y, z);
            }
        }
    }
    let mut vox = v.voxel_mm();
    vox.swap(a, b);
    Volume::from_parts_unchecked(od, vox, out)
}

/// Rotate by `quarter_turns` × 90° about `axis`. Rotation about x sends
/// voxel `(x, y, z)` to `(x, z, ny − 1 − y)`; y and z rotate cyclically
/// in the (z, x) and (x, y) planes.
pub fn rot90(v: &Volume, axis: Axis, quarter_turns: u8) -> Result<Volume> {
    if quarter_turns > 3 {
        return Err(Error::Argument(format!("quarter_turns must be in 0..=3, got {quarter_turns}")));
    }
    let mut out = v.clone();
    for _ in 0..quarter_turns {
        out = rotate_once(&out, axis);
    }
    Ok(out)
}

/// Reverse the volume along `axis`.
pub fn flip(v: &Volume, axis: Axis) -> Volume {
    let d = v.dims();
    let ai = axis.index();
    let mut out = vec![0.0f32; v.len()];
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let mut q = [x, y, z];
                q[ai] = d[ai] - 1 - q[ai];
                out[(q[2] * d[1] + q[1]) * d[0] + q[0]] = v.get(x, y, z);
            }
        }
    }
    Volume::from_parts_unchecked(d, v.voxel_mm(), out)
}

fn draw_in(rng: &mut impl Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    }
}

/// `out = v·s + t + ε`, with `s` and `t` drawn once per volume and
/// `ε ~ N(0, noise_sigma²)` i.i.d. per voxel.
pub fn intensity_and_noise(v: &Volume, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<Volume> {
    policy.validate()?;
    let s = draw_in(rng, policy.scale_range);
    let t = draw_in(rng, policy.shift_range);
    Ok(affine_with_noise(v, s, t, policy.noise_sigma, rng))
}

fn affine_with_noise(v: &Volume, s: f64, t: f64, sigma: f64, rng: &mut impl Rng) -> Volume {
    let data: Vec<f32> = if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("sigma validated");
        v.data().iter().map(|&x| (x as f64 * s + t + normal.sample(rng)) as f32).collect()
    } else {
        v.data().iter().map(|&x| (x as f64 * s + t) as f32).collect()
    };
    Volume::from_parts_unchecked(v.dims(), v.voxel_mm(), data)
}

/// Axes whose rotation keeps the volume's dims, unless permutation is allowed.
fn rotatable_axes(dims: [usize; 3], allow_dim_permute: bool) -> Vec<Axis> {
    Axis::ALL
        .into_iter()
        .filter(|ax| {
            let (a, b) = ax.plane();
            allow_dim_permute || dims[a] == dims[b]
        })
        .collect()
}

/// Random rotation (one random axis, 1–3 quarter turns) with probability
/// `p_rot90`, then an independent flip per axis, then intensity and noise.
pub fn apply_policy(v: &Volume, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<Volume> {
    policy.validate()?;
    let mut out = v.clone();
    if rng.random_bool(policy.p_rot90) {
        let axes = rotatable_axes(out.dims(), policy.allow_dim_permute);
        if !axes.is_empty() {
            let axis = axes[rng.random_range(0..axes.len())];
            let turns = rng.random_range(1..=3u8);
            out = rot90(&out, axis, turns)?;
        }
    }
    for axis in Axis::ALL {
        if rng.random_bool(policy.p_flip_per_axis) {
            out = flip(&out, axis);
        }
    }
    intensity_and_noise(&out, policy, rng)
}
