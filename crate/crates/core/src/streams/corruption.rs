use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numnet::Matrix;
use crate::reliability::center_window;
use crate::rng;

pub const MAX_SEVERITY: u8 = 5;

/// Vector-space corruption families, one per corruption group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionFamily {
    /// Adds `N(0, (0.1·s)²)` per coordinate.
    AdditiveNoise,
    /// Moving average over `2⌈s/2⌉ + 1` neighbouring coordinates.
    Smooth,
    /// Multiplies by `1 − 0.15·s`.
    ContrastScale,
    /// Zeroes the central `0.1·s` fraction of coordinates.
    Occlusion,
    /// Rotates fixed random coordinate planes by `s·π/20`.
    Rotation,
}

impl CorruptionFamily {
    pub const ALL: [CorruptionFamily; 5] = [
        CorruptionFamily::AdditiveNoise,
        CorruptionFamily::Smooth,
        CorruptionFamily::ContrastScale,
        CorruptionFamily::Occlusion,
        CorruptionFamily::Rotation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionFamily::AdditiveNoise => "additive_noise",
            CorruptionFamily::Smooth => "smooth",
            CorruptionFamily::ContrastScale => "contrast_scale",
            CorruptionFamily::Occlusion => "occlusion",
            CorruptionFamily::Rotation => "rotation",
        }
    }
}

/// A corruption family at a severity. `seed` fixes the family's structural
/// randomness (rotation planes) and distinguishes variants within a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Corruption {
    pub family: CorruptionFamily,
    /// 1..=5; 0 is the identity.
    pub severity: u8,
    pub seed: u64,
}

impl Corruption {
    pub fn new(family: CorruptionFamily, severity: u8, seed: u64) -> Self {
        Corruption { family, severity, seed }
    }

    pub fn at(self, severity: u8) -> Self {
        Corruption { severity, ..self }
    }
}

/// Applies `c` to every row of `x`. Per-sample randomness comes from `rng`.
pub fn corrupt<R: Rng + ?Sized>(x: &Matrix, c: &Corruption, rng: &mut R) -> Result<Matrix> {
    if c.severity > MAX_SEVERITY {
        return Err(Error::InvalidConfig(format!("severity {} above {MAX_SEVERITY}", c.severity)));
    }
    if c.severity == 0 {
        return Ok(x.clone());
    }
    let s = c.severity as f64;
    let (n, d) = x.shape();
    let out = match c.family {
        CorruptionFamily::AdditiveNoise => {
            let normal = Normal::new(0.0, 0.1 * s).expect("positive std");
            let mut out = x.clone();
            out.as_mut_slice().iter_mut().for_each(|v| *v += normal.sample(rng));
            out
        }
        CorruptionFamily::Smooth => {
            let half = (c.severity as usize).div_ceil(2);
            Matrix::from_fn(n, d, |i, j| {
                let lo = j.saturating_sub(half);
                let hi = (j + half + 1).min(d);
                x.row(i)[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
            })
        }
        CorruptionFamily::ContrastScale => x.scale(1.0 - 0.15 * s),
        CorruptionFamily::Occlusion => {
            let (lo, hi) = center_window(d, 0.1 * s);
            let mut out = x.clone();
            for i in 0..n {
                out.row_mut(i)[lo..hi].iter_mut().for_each(|v| *v = 0.0);
            }
            out
        }
        CorruptionFamily::Rotation => {
            let planes = rotation_planes(d, c.seed);
            let theta = s * std::f64::consts::PI / 20.0;
            let (sin, cos) = theta.sin_cos();
            let mut out = x.clone();
            for i in 0..n {
                let row = out.row_mut(i);
                for &(a, b, sign) in &planes {
                    let (u, v) = (row[a], row[b]);
                    row[a] = cos * u - sign * sin * v;
                    row[b] = sign * sin * u + cos * v;
                }
            }
            out
        }
    };
    Ok(out)
}

/// Disjoint coordinate pairs with a rotation direction, fixed by `seed`.
fn rotation_planes(d: usize, seed: u64) -> Vec<(usize, usize, f64)> {
    let mut r = rng::stream(seed, &[rng::tag("rotation-planes")]);
    let mut coords: Vec<usize> = (0..d).collect();
    coords.shuffle(&mut r);
    coords
        .chunks_exact(2)
        .map(|p| (p[0], p[1], if r.random::<bool>() { 1.0 } else { -1.0 }))
        .collect()
}
