//! The turn-by-turn estimator: own utterances move every particle's context,
//! other utterances branch particles over candidate senses, update landmarks,
//! move the context again, and resample by agreement between context and
//! recently used landmarks.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{
    normalize, observe_in_place, predict_in_place, systematic_indices, FilterError,
    InterpretationDomain, Particle, SenseGaussian,
};
use crate::geometry::{
    angle_mean, from_nsphere, gaussian_noise, kl_divergence, mahalanobis, to_nsphere, AngleVector,
    DiagonalGaussian, GeometryError,
};
use crate::vecstore::{Sense, SenseInventory, VecStoreError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown target label {0:?}")]
    UnknownTarget(String),
    #[error("no target labels given")]
    NoTargets,
    #[error("config dimension {config} does not match inventory dimension {inventory}")]
    DimensionMismatch { config: usize, inventory: usize },
    #[error("utterance at t={got} arrived after t={last}")]
    OutOfOrder { got: u32, last: u32 },
    #[error("expected a {expected:?} utterance")]
    WrongRole { expected: Role },
    #[error("particle already carries a new sense for {0:?}")]
    AlreadySpawned(String),
    #[error("utterance has no tokens")]
    NoTokens,
    #[error(transparent)]
    Vectors(#[from] VecStoreError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("snapshot does not match session: {0}")]
    BadSnapshot(String),
}

/// Tunable constants of one session. Noise standard deviations are in units
/// of the store's mean vector norm; variances are in radians².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub dim: usize,
    /// Pull of an own utterance on the context.
    pub lambda_u: f64,
    /// Pull of an other utterance on the context.
    pub lambda_z: f64,
    /// Weight of the word's own vector in a landmark observation.
    pub lambda_w: f64,
    pub sigma_u: f64,
    pub sigma_z: f64,
    pub sigma_w: f64,
    /// Time window, in turns.
    pub t_alpha: u32,
    pub epsilon: f64,
    /// Weight of the novelty penalty on new-sense particles.
    pub lambda_w2: f64,
    /// Staleness time constant of the attenuation `exp(-Δt / eta_tau)`.
    pub eta_tau: f64,
    /// Ramp constant of `γ(t) = 1 - exp(-t / gamma_tau)`.
    pub gamma_tau: f64,
    /// Particles per interpretation candidate.
    pub particle_multiplier: usize,
    /// Initial per-axis landmark variance.
    pub obs_var0: f64,
    /// Per-axis Kalman observation noise variance.
    pub obs_var: f64,
    /// Per-axis variance added to a landmark before each observation: a
    /// random-walk model of word meaning drifting during the conversation.
    /// Zero gives the pure measurement update.
    pub process_var: f64,
    /// Bound on pre-resample population as a multiple of the particle count.
    pub max_branch_factor: usize,
    /// When false, landmark distributions are never updated.
    pub kalman: bool,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            lambda_u: 0.3,
            lambda_z: 0.3,
            lambda_w: 0.5,
            sigma_u: 0.05,
            sigma_z: 0.05,
            sigma_w: 0.05,
            t_alpha: 3,
            epsilon: 1e-6,
            lambda_w2: 0.5,
            eta_tau: 5.0,
            gamma_tau: 5.0,
            particle_multiplier: 20,
            obs_var0: 1.0,
            obs_var: 1.0,
            process_var: 0.0,
            max_branch_factor: 64,
            kalman: true,
            seed: 0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |msg: String| Err(EngineError::InvalidConfig(msg));
        if self.dim < 2 {
            return bad(format!("dim must be at least 2, got {}", self.dim));
        }
        for (name, v) in [
            ("lambda_u", self.lambda_u),
            ("lambda_z", self.lambda_z),
            ("lambda_w", self.lambda_w),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        for (name, v) in [
            ("sigma_u", self.sigma_u),
            ("sigma_z", self.sigma_z),
            ("sigma_w", self.sigma_w),
            ("lambda_w2", self.lambda_w2),
            ("process_var", self.process_var),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("eta_tau", self.eta_tau),
            ("gamma_tau", self.gamma_tau),
            ("obs_var0", self.obs_var0),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be finite and positive, got {v}"));
            }
        }
        if !(self.obs_var > 0.0) {
            return bad(format!("obs_var must be positive, got {}", self.obs_var));
        }
        if self.t_alpha == 0 {
            return bad("t_alpha must be at least 1".into());
        }
        if self.particle_multiplier == 0 {
            return bad("particle_multiplier must be at least 1".into());
        }
        if self.max_branch_factor < 2 {
            return bad("max_branch_factor must be at least 2".into());
        }
        Ok(())
    }

    /// Staleness attenuation of a landmark last used at `used`.
    pub fn eta(&self, t: u32, used: u32) -> f64 {
        (-(t.saturating_sub(used) as f64) / self.eta_tau).exp()
    }

    /// Ramp suppressing new interpretations early in a conversation.
    pub fn gamma(&self, t: u32) -> f64 {
        1.0 - (-(t as f64) / self.gamma_tau).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Own,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub role: Role,
    pub tokens: Vec<String>,
    pub t: u32,
}

impl Utterance {
    pub fn new<S: Into<String>>(role: Role, tokens: impl IntoIterator<Item = S>, t: u32) -> Self {
        Self {
            role,
            tokens: tokens.into_iter().map(Into::into).collect(),
            t,
        }
    }

    /// Splits text on whitespace.
    pub fn from_text(role: Role, text: &str, t: u32) -> Self {
        Self::new(role, text.split_whitespace(), t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ConfidenceReport {
    pub label: String,
    pub per_sense: BTreeMap<String, f64>,
    pub time: u32,
}

impl ConfidenceReport {
    pub fn get(&self, sense: &str) -> f64 {
        self.per_sense.get(sense).copied().unwrap_or(0.0)
    }

    /// Sense with the highest confidence; ties go to the smallest id.
    pub fn argmax(&self) -> Option<&str> {
        self.per_sense
            .iter()
            .fold(None::<(&String, f64)>, |best, (k, &v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((k, v)),
            })
            .map(|(k, _)| k.as_str())
    }
}

/// A particle's interpretation of one target label, as seen when weights were
/// last computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct Choice {
    pub sense_id: String,
    pub is_new: bool,
    pub mean: AngleVector,
}

/// One weighted member of the pre-resample population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct Evidence {
    pub weight: f64,
    pub choices: BTreeMap<String, Choice>,
}

/// Serializable session state. Together with the inventory it was built from,
/// a snapshot resumes a session exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct SessionSnapshot {
    pub config: SessionConfig,
    pub targets: Vec<String>,
    pub particle_count: usize,
    pub turn: u32,
    pub last_t: Option<u32>,
    pub draws: u64,
    pub particles: Vec<SnapshotParticle>,
    pub evidence: Vec<Evidence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct SnapshotParticle {
    pub weight: f64,
    pub score: f64,
    pub context: Vec<f64>,
    pub assignments: BTreeMap<String, String>,
    pub spawned_new: BTreeSet<String>,
    pub landmarks: BTreeMap<String, Vec<SenseGaussian>>,
}

/// Last normalized weight of each particle's lineage; used for the best
/// estimate after weights are reset by resampling.
#[derive(Debug, Clone, PartialEq)]
struct Member {
    particle: Particle,
    score: f64,
}

pub struct Session {
    cfg: SessionConfig,
    inventory: Arc<SenseInventory>,
    targets: Vec<String>,
    m: usize,
    members: Vec<Member>,
    evidence: Vec<Evidence>,
    turn: u32,
    last_t: Option<u32>,
    draws: u64,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("targets", &self.targets)
            .field("particles", &self.m)
            .field("turn", &self.turn)
            .finish()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one (phase, index...) coordinate of the seed.
fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let h = parts
        .iter()
        .fold(splitmix64(seed), |h, p| splitmix64(h ^ splitmix64(*p)));
    ChaCha8Rng::seed_from_u64(h)
}

fn seed_landmark(sense_id: &str, vector: &[f64], var0: f64) -> Result<SenseGaussian, EngineError> {
    let mean = to_nsphere(vector)?;
    let dist = DiagonalGaussian::isotropic(mean, var0)?;
    let mut land = SenseGaussian::new(sense_id, dist, 0);
    land.last_used = None;
    Ok(land)
}

fn blend(x: &[f64], v: &[f64], lambda: f64, noise: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(v)
        .zip(noise)
        .map(|((x, v), n)| (1.0 - lambda) * x + lambda * v + n)
        .collect()
}

/// Group under which senses created during the conversation are reported.
pub const NEW_SENSE_GROUP: &str = "new";

/// Inventory senses group by id; every created sense falls in
/// [`NEW_SENSE_GROUP`].
pub fn default_group(c: &Choice) -> String {
    if c.is_new {
        NEW_SENSE_GROUP.to_string()
    } else {
        c.sense_id.clone()
    }
}

/// Confidence per group of the choices made for `label` in a weighted
/// population: each group's largest weight over the sum of the groups'
/// largest weights. Inventory senses without particles get 0; with no weight
/// at all the result is uniform over the inventory senses.
pub fn group_confidence<F>(
    evidence: &[Evidence],
    label: &str,
    senses: &[Sense],
    classify: F,
) -> BTreeMap<String, f64>
where
    F: Fn(&Choice) -> String,
{
    let mut group_max: BTreeMap<String, f64> = BTreeMap::new();
    for e in evidence {
        if let Some(choice) = e.choices.get(label) {
            let slot = group_max.entry(classify(choice)).or_insert(0.0);
            *slot = slot.max(e.weight);
        }
    }
    let total: f64 = group_max.values().sum();
    let mut per_sense: BTreeMap<String, f64> = senses.iter().map(|s| (s.id.clone(), 0.0)).collect();
    if total > 0.0 {
        for (k, v) in group_max {
            per_sense.insert(k, v / total);
        }
    } else {
        let u = 1.0 / senses.len() as f64;
        per_sense.values_mut().for_each(|v| *v = u);
    }
    per_sense
}

impl Session {
    /// Builds a session with `multiplier × (senses over targets)` particles,
    /// each seeded with the targets' senses and a context at their barycenter.
    pub fn new(
        cfg: SessionConfig,
        inventory: Arc<SenseInventory>,
        targets: &[String],
    ) -> Result<Self, EngineError> {
        cfg.validate()?;
        if cfg.dim != inventory.dim() {
            return Err(EngineError::DimensionMismatch {
                config: cfg.dim,
                inventory: inventory.dim(),
            });
        }
        if targets.is_empty() {
            return Err(EngineError::NoTargets);
        }
        let mut domain = InterpretationDomain::default();
        let mut barycenter = vec![0.0; cfg.dim];
        let mut n_senses = 0usize;
        let mut uniq = Vec::new();
        for label in targets {
            if uniq.contains(label) {
                continue;
            }
            let senses = inventory
                .senses(label)
                .ok_or_else(|| EngineError::UnknownTarget(label.clone()))?;
            let lands = senses
                .iter()
                .map(|s| seed_landmark(&s.id, &s.vector, cfg.obs_var0))
                .collect::<Result<Vec<_>, _>>()?;
            for s in senses {
                for (b, v) in barycenter.iter_mut().zip(&s.vector) {
                    *b += v;
                }
            }
            n_senses += senses.len();
            domain.insert_label(label.clone(), lands);
            uniq.push(label.clone());
        }
        barycenter.iter_mut().for_each(|b| *b /= n_senses as f64);
        let m = cfg.particle_multiplier * n_senses;
        let w = 1.0 / m as f64;
        let members = (0..m)
            .map(|_| Member {
                particle: Particle::new(barycenter.clone(), domain.clone(), w),
                score: w,
            })
            .collect();
        Ok(Self {
            cfg,
            inventory,
            targets: uniq,
            m,
            members,
            evidence: Vec::new(),
            turn: 0,
            last_t: None,
            draws: 0,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn inventory(&self) -> &Arc<SenseInventory> {
        &self.inventory
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    /// Number of particles kept after every turn.
    pub fn particle_count(&self) -> usize {
        self.m
    }

    /// Number of turns processed so far.
    pub fn turn(&self) -> u32 {
        self.turn
    }

    /// Time stamp of the most recent utterance.
    pub fn last_t(&self) -> Option<u32> {
        self.last_t
    }

    pub fn particles(&self) -> impl ExactSizeIterator<Item = &Particle> {
        self.members.iter().map(|m| &m.particle)
    }

    /// Weighted population from the most recent weighting step.
    pub fn evidence(&self) -> &[Evidence] {
        &self.evidence
    }

    fn is_target(&self, label: &str) -> bool {
        self.targets.iter().any(|t| t == label)
    }

    fn next_phase(&mut self) -> u64 {
        self.draws += 1;
        self.draws
    }

    fn noise_scale(&self) -> f64 {
        self.inventory.scale()
    }

    /// Processes one utterance: an own utterance only moves the context; an
    /// other utterance runs landmark observation, the context update and
    /// resampling.
    pub fn process_turn(&mut self, utt: &Utterance) -> Result<(), EngineError> {
        if let Some(last) = self.last_t {
            if utt.t < last {
                return Err(EngineError::OutOfOrder { got: utt.t, last });
            }
        }
        if utt.tokens.is_empty() {
            return Err(EngineError::NoTokens);
        }
        match utt.role {
            Role::Own => self.step1_own(utt)?,
            Role::Other => {
                // resolve the utterance mean first so a bad utterance leaves no trace
                self.inventory.utterance_mean(&utt.tokens)?;
                self.step2_observe(utt)?;
                self.step3_other(utt)?;
                self.step4_resample(utt.t);
            }
        }
        self.last_t = Some(utt.t);
        self.turn += 1;
        Ok(())
    }

    /// Context update from an own utterance.
    pub fn step1_own(&mut self, u: &Utterance) -> Result<(), EngineError> {
        if u.role != Role::Own {
            return Err(EngineError::WrongRole {
                expected: Role::Own,
            });
        }
        let (lambda, sigma) = (self.cfg.lambda_u, self.cfg.sigma_u);
        self.move_contexts(&u.tokens, lambda, sigma)
    }

    /// Context update from an other utterance.
    pub fn step3_other(&mut self, z: &Utterance) -> Result<(), EngineError> {
        if z.role != Role::Other {
            return Err(EngineError::WrongRole {
                expected: Role::Other,
            });
        }
        let (lambda, sigma) = (self.cfg.lambda_z, self.cfg.sigma_z);
        self.move_contexts(&z.tokens, lambda, sigma)
    }

    fn move_contexts(
        &mut self,
        tokens: &[String],
        lambda: f64,
        sigma: f64,
    ) -> Result<(), EngineError> {
        let mean = self.inventory.utterance_mean(tokens)?;
        let phase = self.next_phase();
        let (seed, dim, std) = (self.cfg.seed, self.cfg.dim, sigma * self.noise_scale());
        self.members.par_iter_mut().enumerate().for_each(|(i, m)| {
            let mut rng = stream(seed, &[phase, i as u64]);
            let noise = gaussian_noise(std, dim, &mut rng);
            m.particle.context = blend(&m.particle.context, &mean, lambda, &noise);
        });
        Ok(())
    }

    /// Landmark observation for an other utterance. Every particle
    /// re-observes its in-window and newly heard unambiguous landmarks, then
    /// branches once per candidate sense of each heard ambiguous label, plus
    /// one new-sense branch per heard target label.
    pub fn step2_observe(&mut self, z: &Utterance) -> Result<(), EngineError> {
        if z.role != Role::Other {
            return Err(EngineError::WrongRole {
                expected: Role::Other,
            });
        }
        let t = z.t;
        let mut branch_labels: Vec<&str> = Vec::new();
        let mut heard: Vec<&str> = Vec::new();
        for tok in &z.tokens {
            let tok = tok.as_str();
            if self.inventory.senses(tok).is_none() {
                continue;
            }
            if self.is_target(tok) || self.inventory.is_ambiguous(tok) {
                if !branch_labels.contains(&tok) {
                    branch_labels.push(tok);
                }
            } else if !heard.contains(&tok) {
                heard.push(tok);
            }
        }

        let phase = self.next_phase();
        let cfg = self.cfg.clone();
        let inventory = Arc::clone(&self.inventory);
        let ctx = ObserveCtx {
            cfg: &cfg,
            inventory: &inventory,
            scale: self.noise_scale(),
            t,
        };
        let seed = self.cfg.seed;
        let branch_set: BTreeSet<&str> = branch_labels.iter().copied().collect();
        let mut population: Vec<Particle> = self
            .members
            .par_iter()
            .enumerate()
            .map(|(i, m)| {
                let mut p = m.particle.clone();
                let mut rng = stream(seed, &[phase, i as u64]);
                ctx.observe_unambiguous(&mut p, &heard, &branch_set, &mut rng)?;
                Ok(p)
            })
            .collect::<Result<_, EngineError>>()?;

        for (k, label) in branch_labels.iter().enumerate() {
            let phase = self.next_phase();
            let spawn = self.is_target(label);
            let branches: Vec<Vec<Particle>> = population
                .par_iter()
                .enumerate()
                .map(|(i, p)| {
                    ctx.branch(
                        p,
                        label,
                        spawn,
                        &mut stream(seed, &[phase, k as u64, i as u64]),
                    )
                })
                .collect::<Result<_, EngineError>>()?;
            population = branches.into_iter().flatten().collect();
            if population.len() > self.m * self.cfg.max_branch_factor {
                let phase = self.next_phase();
                population = self
                    .resample_population(population, t, phase)
                    .0
                    .into_iter()
                    .map(|(p, _)| p)
                    .collect();
            }
        }
        self.members = population
            .into_iter()
            .map(|p| Member {
                score: p.weight,
                particle: p,
            })
            .collect();
        Ok(())
    }

    /// Weights every particle, records the weighted population as evidence
    /// and resamples back to the configured count.
    pub fn step4_resample(&mut self, t: u32) {
        let population: Vec<Particle> = std::mem::take(&mut self.members)
            .into_iter()
            .map(|m| m.particle)
            .collect();
        let phase = self.next_phase();
        let (members, evidence) = self.resample_population(population, t, phase);
        self.members = members
            .into_iter()
            .map(|(particle, score)| Member { particle, score })
            .collect::<Vec<_>>();
        self.evidence = evidence;
    }

    /// Returns survivors paired with their lineage's normalized weight.
    fn resample_population(
        &self,
        population: Vec<Particle>,
        t: u32,
        phase: u64,
    ) -> (Vec<(Particle, f64)>, Vec<Evidence>) {
        let cfg = &self.cfg;
        let mut weights: Vec<f64> = population
            .par_iter()
            .map(|p| particle_weight(p, t, cfg))
            .collect();
        let degenerate = matches!(normalize(&mut weights), Err(FilterError::Degenerate));
        if degenerate {
            // No branch found support: fall back to uniform over the branches
            // that keep to the inventory, since nothing argues for novelty.
            let known: Vec<bool> = population.iter().map(|p| !uses_new_sense(p)).collect();
            let pool = if known.contains(&true) {
                known
            } else {
                vec![true; population.len()]
            };
            let u = 1.0 / pool.iter().filter(|&&k| k).count() as f64;
            weights
                .iter_mut()
                .zip(&pool)
                .for_each(|(w, &k)| *w = if k { u } else { 0.0 });
        }
        let evidence = population
            .iter()
            .zip(&weights)
            .map(|(p, &w)| Evidence {
                weight: w,
                choices: self.choices(p),
            })
            .collect();
        let reset = 1.0 / self.m as f64;
        let survivors =
            if degenerate && population.len() == self.m && weights.iter().all(|&w| w > 0.0) {
                population
                    .into_iter()
                    .zip(weights)
                    .map(|(mut p, w)| {
                        p.weight = reset;
                        (p, w)
                    })
                    .collect()
            } else {
                let offset: f64 = rand::Rng::random(&mut stream(cfg.seed, &[phase]));
                systematic_indices(&weights, self.m, offset)
                    .into_iter()
                    .map(|i| {
                        let mut p = population[i].clone();
                        p.weight = reset;
                        (p, weights[i])
                    })
                    .collect()
            };
        (survivors, evidence)
    }

    fn choices(&self, p: &Particle) -> BTreeMap<String, Choice> {
        self.targets
            .iter()
            .filter_map(|label| {
                let id = p.assignments.get(label)?;
                let land = p.domain.sense(label, id)?;
                Some((
                    label.clone(),
                    Choice {
                        sense_id: id.clone(),
                        is_new: land.is_new,
                        mean: land.dist.mean.clone(),
                    },
                ))
            })
            .collect()
    }

    /// Per-sense confidence for a target label: the largest weight among the
    /// particles choosing each sense, normalized over senses. Every sense
    /// created during the conversation is reported under [`NEW_SENSE_GROUP`].
    /// Before the label has been interpreted, the uniform prior over its
    /// inventory senses.
    pub fn confidence(&self, label: &str) -> Result<ConfidenceReport, EngineError> {
        self.confidence_by(label, default_group)
    }

    /// Like [`Session::confidence`], grouping particles by `classify` of their
    /// choice instead of by sense id.
    pub fn confidence_by<F>(
        &self,
        label: &str,
        classify: F,
    ) -> Result<ConfidenceReport, EngineError>
    where
        F: Fn(&Choice) -> String,
    {
        if !self.is_target(label) {
            return Err(EngineError::UnknownTarget(label.to_string()));
        }
        let senses = self
            .inventory
            .senses(label)
            .ok_or_else(|| EngineError::UnknownTarget(label.to_string()))?;
        let per_sense = group_confidence(&self.evidence, label, senses, classify);
        Ok(ConfidenceReport {
            label: label.to_string(),
            per_sense,
            time: self.last_t.unwrap_or(0),
        })
    }

    /// Context and domain of the particle whose lineage carries the largest
    /// weight; ties go to the lowest index.
    pub fn best_estimate(&self) -> (Vec<f64>, InterpretationDomain) {
        let best = self.members.iter().enumerate().fold(0usize, |bi, (i, m)| {
            if m.score > self.members[bi].score {
                i
            } else {
                bi
            }
        });
        let p = &self.members[best].particle;
        (p.context.clone(), p.domain.clone())
    }

    /// Sense assignments of the best-estimate particle.
    pub fn best_assignments(&self) -> BTreeMap<String, String> {
        let best = self.members.iter().enumerate().fold(0usize, |bi, (i, m)| {
            if m.score > self.members[bi].score {
                i
            } else {
                bi
            }
        });
        self.members[best].particle.assignments.clone()
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            config: self.cfg.clone(),
            targets: self.targets.clone(),
            particle_count: self.m,
            turn: self.turn,
            last_t: self.last_t,
            draws: self.draws,
            particles: self
                .members
                .iter()
                .map(|m| SnapshotParticle {
                    weight: m.particle.weight,
                    score: m.score,
                    context: m.particle.context.clone(),
                    assignments: m.particle.assignments.clone(),
                    spawned_new: m.particle.spawned_new.clone(),
                    landmarks: m
                        .particle
                        .domain
                        .landmarks
                        .iter()
                        .map(|(k, v)| (k.clone(), v.as_ref().clone()))
                        .collect(),
                })
                .collect(),
            evidence: self.evidence.clone(),
        }
    }

    pub fn from_snapshot(
        snap: SessionSnapshot,
        inventory: Arc<SenseInventory>,
    ) -> Result<Self, EngineError> {
        snap.config.validate()?;
        if snap.config.dim != inventory.dim() {
            return Err(EngineError::DimensionMismatch {
                config: snap.config.dim,
                inventory: inventory.dim(),
            });
        }
        for label in &snap.targets {
            if inventory.senses(label).is_none() {
                return Err(EngineError::UnknownTarget(label.clone()));
            }
        }
        if snap.particles.len() != snap.particle_count || snap.particle_count == 0 {
            return Err(EngineError::BadSnapshot(format!(
                "expected {} particles, found {}",
                snap.particle_count,
                snap.particles.len()
            )));
        }
        let members = snap
            .particles
            .into_iter()
            .map(|sp| {
                if sp.context.len() != snap.config.dim {
                    return Err(EngineError::BadSnapshot("context dimension".into()));
                }
                let domain = InterpretationDomain {
                    landmarks: sp
                        .landmarks
                        .into_iter()
                        .map(|(k, v)| (k, Arc::new(v)))
                        .collect(),
                };
                Ok(Member {
                    particle: Particle {
                        context: sp.context,
                        domain,
                        weight: sp.weight,
                        assignments: sp.assignments,
                        spawned_new: sp.spawned_new,
                    },
                    score: sp.score,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            cfg: snap.config,
            inventory,
            targets: snap.targets,
            m: snap.particle_count,
            members,
            evidence: snap.evidence,
            turn: snap.turn,
            last_t: snap.last_t,
            draws: snap.draws,
        })
    }
}

/// Shared read-only state for the per-particle work of an observation step.
struct ObserveCtx<'a> {
    cfg: &'a SessionConfig,
    inventory: &'a SenseInventory,
    scale: f64,
    t: u32,
}

impl ObserveCtx<'_> {
    /// Vector a landmark is pulled toward: the word's inventory vector, or for
    /// a dynamically created sense the direction it was estimated at.
    fn anchor(&self, label: &str, land: &SenseGaussian) -> Vec<f64> {
        if !land.is_new {
            if let Some(s) = self
                .inventory
                .senses(label)
                .and_then(|ss| ss.iter().find(|s| s.id == land.sense_id))
            {
                return s.vector.clone();
            }
        }
        from_nsphere(land.origin.as_ref().unwrap_or(&land.dist.mean))
            .into_iter()
            .map(|v| v * self.scale)
            .collect()
    }

    fn observation(
        &self,
        context: &[f64],
        anchor: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Option<AngleVector> {
        let noise = gaussian_noise(self.cfg.sigma_w * self.scale, self.cfg.dim, rng);
        to_nsphere(&blend(context, anchor, self.cfg.lambda_w, &noise)).ok()
    }

    fn observe(&self, p: &mut Particle, label: &str, sense_id: &str, rng: &mut ChaCha8Rng) {
        let Some(land) = p.domain.sense(label, sense_id) else {
            return;
        };
        let anchor = self.anchor(label, land);
        let obs = self.observation(&p.context, &anchor, rng);
        let land = p
            .domain
            .sense_mut(label, sense_id)
            .expect("landmark looked up above");
        match obs {
            Some(obs) if self.cfg.kalman => {
                predict_in_place(land, self.cfg.process_var);
                let r = vec![self.cfg.obs_var; obs.len()];
                observe_in_place(land, &obs, &r, self.t);
            }
            _ => land.last_update = self.t,
        }
    }

    fn ensure_label(&self, p: &mut Particle, label: &str) -> Result<(), EngineError> {
        if p.domain.contains(label) {
            return Ok(());
        }
        let senses = self
            .inventory
            .senses(label)
            .ok_or_else(|| EngineError::UnknownTarget(label.to_string()))?;
        let lands = senses
            .iter()
            .map(|s| seed_landmark(&s.id, &s.vector, self.cfg.obs_var0))
            .collect::<Result<Vec<_>, _>>()?;
        p.domain.insert_label(label, lands);
        Ok(())
    }

    fn observe_unambiguous(
        &self,
        p: &mut Particle,
        heard: &[&str],
        branching: &BTreeSet<&str>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), EngineError> {
        for label in heard {
            self.ensure_label(p, label)?;
        }
        let mut targets: Vec<(String, String)> = p
            .domain
            .iter()
            .filter(|(label, land)| {
                !branching.contains(label) && land.in_window(self.t, self.cfg.t_alpha)
            })
            .map(|(label, land)| (label.to_string(), land.sense_id.clone()))
            .collect();
        for label in heard {
            for s in p.domain.senses(label).into_iter().flatten() {
                let key = (label.to_string(), s.sense_id.clone());
                if !targets.contains(&key) {
                    targets.push(key);
                }
            }
        }
        for (label, sense) in &targets {
            self.observe(p, label, sense, rng);
        }
        for label in heard {
            for s in Arc::make_mut(p.domain.landmarks.get_mut(*label).expect("ensured")) {
                s.last_used = Some(self.t);
            }
        }
        Ok(())
    }

    fn branch(
        &self,
        p: &Particle,
        label: &str,
        spawn: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Particle>, EngineError> {
        let mut base = p.clone();
        self.ensure_label(&mut base, label)?;
        let ids: Vec<String> = base
            .domain
            .senses(label)
            .unwrap_or_default()
            .iter()
            .map(|s| s.sense_id.clone())
            .collect();
        let mut out = Vec::with_capacity(ids.len() + 1);
        for id in ids {
            let mut b = base.clone();
            self.observe(&mut b, label, &id, rng);
            if let Some(land) = b.domain.sense_mut(label, &id) {
                land.last_used = Some(self.t);
            }
            b.assignments.insert(label.to_string(), id);
            out.push(b);
        }
        if spawn && !base.spawned_new.contains(label) {
            out.push(spawn_new_sense(&base, label, self.t, self.cfg)?);
        }
        Ok(out)
    }
}

/// Agreement between a particle's context and its recently used landmarks:
/// `-ln(mean_i η_i D_M(landmark_i, context) + ε)`, floored at zero. A
/// particle with no landmark in the window carries no evidence and weighs 0.
pub fn compute_weight(p: &Particle, t: u32, cfg: &SessionConfig) -> f64 {
    log_agreement(p, t, cfg).map_or(0.0, |w| w.max(0.0))
}

/// `-ln(mean_i η_i D_M + ε)` before flooring; `None` without in-window
/// landmarks.
fn log_agreement(p: &Particle, t: u32, cfg: &SessionConfig) -> Option<f64> {
    let x = to_nsphere(&p.context).ok()?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (_, land) in p.domain.iter() {
        if land.in_window(t, cfg.t_alpha) {
            let used = land.last_used.unwrap_or(t);
            sum += cfg.eta(t, used) * mahalanobis(&land.dist, &x);
            n += 1;
        }
    }
    (n > 0).then(|| -(sum / n as f64 + cfg.epsilon).ln())
}

/// Novelty penalty of a particle's new sense for `label`:
/// `λ_w2 · ln(mean_j KL(existing_j ‖ new) + ε)`, or `None` when the label
/// has no pre-existing senses.
pub fn novelty_penalty(p: &Particle, label: &str, cfg: &SessionConfig) -> Option<f64> {
    let senses = p.domain.senses(label)?;
    let new = senses.iter().find(|s| s.is_new)?;
    let existing: Vec<&SenseGaussian> = senses.iter().filter(|s| !s.is_new).collect();
    if existing.is_empty() {
        return None;
    }
    let mean_kl = existing
        .iter()
        .map(|s| kl_divergence(&s.dist, &new.dist).unwrap_or(f64::INFINITY))
        .sum::<f64>()
        / existing.len() as f64;
    Some(cfg.lambda_w2 * (mean_kl + cfg.epsilon).ln())
}

/// Weight of a particle carrying a new sense for `label`:
/// `γ(t) · (w + penalty)`, floored at zero.
///
/// The floor applies to the final weight only: a poor fit (negative log
/// agreement) is not erased before the novelty term is added.
pub fn compute_weight_new(p: &Particle, label: &str, t: u32, cfg: &SessionConfig) -> f64 {
    let Some(w) = log_agreement(p, t, cfg) else {
        return 0.0;
    };
    let penalty = novelty_penalty(p, label, cfg).unwrap_or(0.0);
    (cfg.gamma(t) * (w + penalty)).max(0.0)
}

/// Weight used for resampling: the new-sense form when the particle currently
/// interprets some label with a dynamically created sense.
fn new_sense_labels(p: &Particle) -> Vec<&String> {
    p.assignments
        .iter()
        .filter(|(label, id)| p.domain.sense(label, id).is_some_and(|s| s.is_new))
        .map(|(label, _)| label)
        .collect()
}

fn uses_new_sense(p: &Particle) -> bool {
    !new_sense_labels(p).is_empty()
}

pub fn particle_weight(p: &Particle, t: u32, cfg: &SessionConfig) -> f64 {
    let new_labels = new_sense_labels(p);
    if new_labels.is_empty() {
        return compute_weight(p, t, cfg);
    }
    let Some(w) = log_agreement(p, t, cfg) else {
        return 0.0;
    };
    let penalty: f64 = new_labels
        .iter()
        .filter_map(|label| novelty_penalty(p, label, cfg))
        .sum();
    (cfg.gamma(t) * (w + penalty)).max(0.0)
}

/// Branch of `p` that interprets `label` with a freshly created sense placed
/// at the mean of the recently used landmarks and the context.
pub fn spawn_new_sense(
    p: &Particle,
    label: &str,
    t: u32,
    cfg: &SessionConfig,
) -> Result<Particle, EngineError> {
    if p.spawned_new.contains(label) {
        return Err(EngineError::AlreadySpawned(label.to_string()));
    }
    let x = to_nsphere(&p.context)?;
    let recent: Vec<&SenseGaussian> = p
        .domain
        .iter()
        .map(|(_, l)| l)
        .filter(|l| l.in_window(t, cfg.t_alpha))
        .collect();
    let mean = angle_mean(
        recent
            .iter()
            .map(|l| &l.dist.mean)
            .chain(std::iter::once(&x)),
    )
    .expect("at least the context");
    let variance = if recent.is_empty() {
        vec![cfg.obs_var0; x.len()]
    } else {
        let mut v = vec![0.0; x.len()];
        for l in &recent {
            for (a, b) in v.iter_mut().zip(&l.dist.variance) {
                *a += b;
            }
        }
        v.iter_mut().for_each(|a| *a /= recent.len() as f64);
        v
    };
    let id = format!("new@{t}");
    let mut land = SenseGaussian::new(
        id.clone(),
        DiagonalGaussian::new(mean.clone(), variance)?,
        t,
    );
    land.is_new = true;
    land.origin = Some(mean);
    let mut out = p.clone();
    out.domain.push_sense(label, land);
    out.assignments.insert(label.to_string(), id);
    out.spawned_new.insert(label.to_string());
    Ok(out)
}
