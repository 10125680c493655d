//! Particles, per-landmark Kalman updates, and systematic resampling.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{angle_diff, AngleVector, DiagonalGaussian};

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("all particle weights are zero")]
    Degenerate,
    #[error("no particles")]
    Empty,
}

/// One landmark: the existence distribution of one sense of one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct SenseGaussian {
    pub sense_id: String,
    pub dist: DiagonalGaussian,
    /// Turn of the last Kalman update.
    pub last_update: u32,
    /// Turn the sense was last heard or chosen; drives the time window and
    /// the staleness attenuation. `None` until first use.
    pub last_used: Option<u32>,
    pub is_new: bool,
    /// Direction a dynamically created sense was estimated at; it stands in
    /// for the word vector when the sense is observed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<AngleVector>,
}

impl SenseGaussian {
    pub fn new(sense_id: impl Into<String>, dist: DiagonalGaussian, t: u32) -> Self {
        Self {
            sense_id: sense_id.into(),
            dist,
            last_update: t,
            last_used: Some(t),
            is_new: false,
            origin: None,
        }
    }

    /// True when the landmark was used within `[t - window, t]`.
    pub fn in_window(&self, t: u32, window: u32) -> bool {
        self.last_used.is_some_and(|u| u <= t && u + window >= t)
    }
}

/// Scalar-per-axis Kalman update with an identity observation model in angle
/// space. The azimuth innovation is wrapped and the posterior mean re-wrapped.
pub fn kalman_observe(
    land: &SenseGaussian,
    obs: &AngleVector,
    obs_var: &[f64],
    t: u32,
) -> SenseGaussian {
    let mut out = land.clone();
    observe_in_place(&mut out, obs, obs_var, t);
    out
}

/// Random-walk prediction: every axis's variance grows by `process_var`;
/// the mean is unchanged.
pub fn kalman_predict(land: &SenseGaussian, process_var: f64) -> SenseGaussian {
    let mut out = land.clone();
    predict_in_place(&mut out, process_var);
    out
}

pub(crate) fn predict_in_place(land: &mut SenseGaussian, process_var: f64) {
    if process_var > 0.0 {
        land.dist
            .variance
            .iter_mut()
            .for_each(|v| *v += process_var);
    }
}

pub(crate) fn observe_in_place(
    land: &mut SenseGaussian,
    obs: &AngleVector,
    obs_var: &[f64],
    t: u32,
) {
    let innovation = angle_diff(obs, &land.dist.mean);
    let n = innovation.len();
    let DiagonalGaussian { mean, variance } = &mut land.dist;
    for (i, ((m, var), r)) in mean
        .0
        .iter_mut()
        .zip(variance.iter_mut())
        .zip(obs_var)
        .enumerate()
    {
        let gain = *var / (*var + r);
        *m += gain * innovation[i];
        *var *= 1.0 - gain;
        if i + 1 == n {
            *m = m.rem_euclid(std::f64::consts::TAU);
        }
    }
    land.last_update = t;
}

/// Per-particle map: label → candidate sense landmarks. Each label's list is
/// shared copy-on-write, so cloning a domain is cheap and mutation never leaks
/// into siblings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InterpretationDomain {
    pub landmarks: BTreeMap<String, Arc<Vec<SenseGaussian>>>,
}

impl InterpretationDomain {
    pub fn senses(&self, label: &str) -> Option<&[SenseGaussian]> {
        self.landmarks.get(label).map(|v| v.as_slice())
    }

    pub fn sense(&self, label: &str, sense_id: &str) -> Option<&SenseGaussian> {
        self.senses(label)?.iter().find(|s| s.sense_id == sense_id)
    }

    pub fn sense_mut(&mut self, label: &str, sense_id: &str) -> Option<&mut SenseGaussian> {
        let list = Arc::make_mut(self.landmarks.get_mut(label)?);
        list.iter_mut().find(|s| s.sense_id == sense_id)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.landmarks.contains_key(label)
    }

    pub fn insert_label(&mut self, label: impl Into<String>, senses: Vec<SenseGaussian>) {
        self.landmarks.insert(label.into(), Arc::new(senses));
    }

    /// Appends a sense to a label. Returns false when the id already exists.
    pub fn push_sense(&mut self, label: &str, sense: SenseGaussian) -> bool {
        let list = Arc::make_mut(self.landmarks.entry(label.to_string()).or_default());
        if list.iter().any(|s| s.sense_id == sense.sense_id) {
            return false;
        }
        list.push(sense);
        true
    }

    /// Every `(label, landmark)` pair in label order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &SenseGaussian)> {
        self.landmarks
            .iter()
            .flat_map(|(label, list)| list.iter().map(move |s| (label.as_str(), s)))
    }

    pub fn landmark_count(&self) -> usize {
        self.landmarks.values().map(|l| l.len()).sum()
    }
}

/// One joint hypothesis of context, interpretation domain and sense choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub context: Vec<f64>,
    pub domain: InterpretationDomain,
    pub weight: f64,
    /// Sense this particle currently attributes to each heard ambiguous label.
    pub assignments: BTreeMap<String, String>,
    /// Labels for which this particle carries a dynamically created sense.
    pub spawned_new: BTreeSet<String>,
}

impl Particle {
    pub fn new(context: Vec<f64>, domain: InterpretationDomain, weight: f64) -> Self {
        Self {
            context,
            domain,
            weight,
            assignments: BTreeMap::new(),
            spawned_new: BTreeSet::new(),
        }
    }
}

/// Normalizes a weight vector in place so it sums to one.
pub fn normalize(weights: &mut [f64]) -> Result<(), FilterError> {
    if weights.is_empty() {
        return Err(FilterError::Empty);
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(FilterError::Degenerate);
    }
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(())
}

pub fn normalize_weights(particles: &mut [Particle]) -> Result<(), FilterError> {
    let mut w: Vec<f64> = particles.iter().map(|p| p.weight).collect();
    normalize(&mut w)?;
    for (p, w) in particles.iter_mut().zip(w) {
        p.weight = w;
    }
    Ok(())
}

/// Indices picked by the systematic (low-variance) sampler: `m` evenly spaced
/// pointers `(offset + i) / m` over the cumulative weights, `offset ∈ [0, 1)`.
/// Zero-weight entries are never selected.
pub fn systematic_indices(weights: &[f64], m: usize, offset: f64) -> Vec<usize> {
    let last_positive = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
    let mut out = Vec::with_capacity(m);
    let mut cumulative = weights.first().copied().unwrap_or(0.0);
    let mut j = 0usize;
    for i in 0..m {
        let pointer = (offset + i as f64) / m as f64;
        while cumulative <= pointer && j < last_positive {
            j += 1;
            cumulative += weights[j];
        }
        if weights[j] <= 0.0 {
            // rounding left the pointer past the final cumulative sum
            j = last_positive;
        }
        out.push(j);
    }
    out
}

/// Draws exactly `m` survivors proportional to normalized weight. Survivors
/// are deep copies with weight `1/m`.
pub fn systematic_resample<R: Rng + ?Sized>(
    particles: &[Particle],
    m: usize,
    rng: &mut R,
) -> Vec<Particle> {
    let weights: Vec<f64> = particles.iter().map(|p| p.weight).collect();
    let offset: f64 = rng.random::<f64>();
    let reset = 1.0 / m as f64;
    systematic_indices(&weights, m, offset)
        .into_iter()
        .map(|i| {
            let mut p = particles[i].clone();
            p.weight = reset;
            p
        })
        .collect()
}
