//! Hyperspherical angle coordinates and the distances computed in them.
//!
//! A vector `v` in `R^d` maps to `d - 1` angles. The first `d - 2` are polar
//! angles in `[0, π]`, measured from the highest coordinate axis downward:
//! `θ_i = atan2(‖v_1..v_{d-i}‖, v_{d+1-i})`. The last one is the azimuth
//! `atan2(v_2, v_1)` in `[0, 2π)`, which is the only periodic axis. The radius
//! is discarded, so every positive multiple of `v` has the same angles.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("need at least 2 dimensions, got {0}")]
    TooFewDimensions(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("variance component {0} is not strictly positive and finite")]
    BadVariance(usize),
}

/// Angles of a direction on the unit sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(transparent)]
pub struct AngleVector(pub Vec<f64>);

impl AngleVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Unit vector in `R^(len + 1)` pointing along these angles.
    pub fn to_cartesian(&self) -> Vec<f64> {
        from_nsphere(self)
    }
}

/// Gaussian with diagonal covariance over angle coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct DiagonalGaussian {
    pub mean: AngleVector,
    pub variance: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: AngleVector, variance: Vec<f64>) -> Result<Self, GeometryError> {
        if mean.len() != variance.len() {
            return Err(GeometryError::DimensionMismatch(mean.len(), variance.len()));
        }
        if let Some(i) = variance.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(GeometryError::BadVariance(i));
        }
        Ok(Self { mean, variance })
    }

    /// Same variance on every axis.
    pub fn isotropic(mean: AngleVector, variance: f64) -> Result<Self, GeometryError> {
        let n = mean.len();
        Self::new(mean, vec![variance; n])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Converts a Cartesian vector to hyperspherical angles.
pub fn to_nsphere(v: &[f64]) -> Result<AngleVector, GeometryError> {
    let d = v.len();
    if d < 2 {
        return Err(GeometryError::TooFewDimensions(d));
    }
    // prefix[k] = v_1^2 + ... + v_k^2
    let mut prefix = Vec::with_capacity(d + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for x in v {
        acc += x * x;
        prefix.push(acc);
    }
    if acc == 0.0 {
        return Err(GeometryError::ZeroVector);
    }
    let mut angles = Vec::with_capacity(d - 1);
    for i in 1..=d - 2 {
        let axis = d - i; // zero-based index of v_{d+1-i}
        angles.push(prefix[axis].sqrt().atan2(v[axis]));
    }
    angles.push(wrap_positive(v[1].atan2(v[0])));
    Ok(AngleVector(angles))
}

/// Unit vector with the given angles.
pub fn from_nsphere(a: &AngleVector) -> Vec<f64> {
    let d = a.len() + 1;
    let mut v = vec![0.0; d];
    let mut sin_prod = 1.0;
    for (i, theta) in a.0[..d - 2].iter().enumerate() {
        v[d - 1 - i] = sin_prod * theta.cos();
        sin_prod *= theta.sin();
    }
    let azimuth = a.0[d - 2];
    v[0] = sin_prod * azimuth.cos();
    v[1] = sin_prod * azimuth.sin();
    v
}

fn wrap_positive(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    // rem_euclid can round up to TAU for tiny negative inputs; -0.0 + 0.0 = 0.0
    if t >= TAU {
        0.0
    } else {
        t + 0.0
    }
}

/// Wraps an angle difference into `(-π, π]`.
pub fn wrap_difference(delta: f64) -> f64 {
    let mut t = delta.rem_euclid(TAU);
    if t > PI {
        t -= TAU;
    }
    t
}

/// Componentwise `a - b`; the azimuth difference is wrapped into `(-π, π]`.
pub fn angle_diff(a: &AngleVector, b: &AngleVector) -> Vec<f64> {
    let n = a.len();
    a.0.iter()
        .zip(&b.0)
        .enumerate()
        .map(|(i, (x, y))| {
            if i + 1 == n {
                wrap_difference(x - y)
            } else {
                x - y
            }
        })
        .collect()
}

/// Mahalanobis distance of `x` from `g` under its diagonal covariance.
pub fn mahalanobis(g: &DiagonalGaussian, x: &AngleVector) -> f64 {
    angle_diff(&g.mean, x)
        .iter()
        .zip(&g.variance)
        .map(|(d, var)| d * d / var)
        .sum::<f64>()
        .sqrt()
}

/// `KL(p ‖ q)` for diagonal Gaussians, using wrapped mean differences.
pub fn kl_divergence(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64, GeometryError> {
    if p.dim() != q.dim() {
        return Err(GeometryError::DimensionMismatch(p.dim(), q.dim()));
    }
    let diff = angle_diff(&p.mean, &q.mean);
    let sum: f64 = diff
        .iter()
        .zip(p.variance.iter().zip(&q.variance))
        .map(|(d, (vp, vq))| vp / vq + d * d / vq - 1.0 + (vq / vp).ln())
        .sum();
    // each term is >= 0 analytically; rounding can leave a tiny negative
    Ok((0.5 * sum).max(0.0))
}

/// Mean of a set of angle vectors: arithmetic on the polar axes, circular on
/// the azimuth.
pub fn angle_mean<'a, I>(points: I) -> Option<AngleVector>
where
    I: IntoIterator<Item = &'a AngleVector>,
{
    let mut iter = points.into_iter();
    let first = iter.next()?;
    let n_axes = first.len();
    let mut sums = first.0.clone();
    let (mut s, mut c) = first.0[n_axes - 1].sin_cos();
    let mut count = 1usize;
    for p in iter {
        for (acc, x) in sums.iter_mut().zip(&p.0) {
            *acc += x;
        }
        let (ps, pc) = p.0[n_axes - 1].sin_cos();
        s += ps;
        c += pc;
        count += 1;
    }
    let n = count as f64;
    let mut mean: Vec<f64> = sums.iter().map(|x| x / n).collect();
    mean[n_axes - 1] = if count == 1 {
        first.0[n_axes - 1]
    } else {
        wrap_positive(s.atan2(c))
    };
    Some(AngleVector(mean))
}

/// Great-circle angle between two directions, in radians.
pub fn angular_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos()
}

/// I.i.d. zero-mean normal vector with standard deviation `std`.
pub fn gaussian_noise<R: Rng + ?Sized>(std: f64, dim: usize, rng: &mut R) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; dim];
    }
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}
