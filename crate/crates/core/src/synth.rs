//! Synthetic corpora: ambiguous labels whose senses are well-separated unit
//! vectors, topical words scattered in a cone around each sense, uniform noise
//! words, and conversations that talk about one sense of one label.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Role, Utterance};
use crate::geometry::angular_distance;
use crate::harness::{cases_to_jsonl, ReplayCase};
use crate::vecstore::{SenseInventory, VecStoreError, VectorStore, WordVector, SENSE_SEPARATOR};

const MAX_ATTEMPTS: usize = 20_000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("cannot place {senses} senses {separation_deg}° apart in {dim} dimensions")]
    Infeasible {
        senses: usize,
        separation_deg: f64,
        dim: usize,
    },
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Vectors(#[from] VecStoreError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub dim: usize,
    pub n_labels: usize,
    pub senses_per_label: usize,
    /// Topical words drawn around each sense.
    pub words_per_sense: usize,
    /// Size of the uniform noise vocabulary.
    pub vocab_size: usize,
    pub n_cases: usize,
    /// Turns per case.
    pub doc_length: usize,
    pub tokens_per_turn: usize,
    /// Probability that a content token is a noise word.
    pub noise: f64,
    /// Probability that a turn after the first mentions the target.
    pub target_rate: f64,
    pub min_separation_deg: f64,
    /// Half-angle of the cone topical words are drawn from.
    pub cone_deg: f64,
    /// Angle between a sense's stored vector and the center of the words
    /// used when talking about it: how far prior knowledge is from usage.
    pub drift_deg: f64,
    /// Angle the topic travels during a conversation: a sense's topical
    /// words are spread along an arc of this length starting at its usage
    /// center, and turn `t` of a case draws from the stretch of the arc
    /// matching `t / doc_length`. Zero keeps every word available all along.
    pub shift_deg: f64,
    /// Probability that a turn also mentions some other ambiguous label.
    pub distractor_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            n_labels: 10,
            senses_per_label: 3,
            words_per_sense: 12,
            vocab_size: 60,
            n_cases: 60,
            doc_length: 30,
            tokens_per_turn: 6,
            noise: 0.3,
            target_rate: 0.5,
            min_separation_deg: 60.0,
            cone_deg: 25.0,
            drift_deg: 0.0,
            shift_deg: 0.0,
            distractor_rate: 0.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub store: VectorStore,
    pub inventory: SenseInventory,
    pub cases: Vec<ReplayCase>,
}

impl SynthCorpus {
    /// Inventory listing in the text format read by the inventory loader.
    pub fn inventory_text(&self) -> String {
        let mut out = String::new();
        for label in self.inventory.labels() {
            if self.inventory.is_ambiguous(label) {
                for s in self.inventory.senses(label).unwrap_or_default() {
                    out.push_str(&format!("{label}{SENSE_SEPARATOR}{}\n", s.id));
                }
            }
        }
        out
    }

    /// Writes `embeddings.txt`, `inventory.txt` and `cases.jsonl` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), SynthError> {
        let dir = dir.as_ref();
        let io_err = |path: &Path, source| SynthError::Io {
            path: path.display().to_string(),
            source,
        };
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for (name, body) in [
            ("embeddings.txt", self.store.to_text()),
            ("inventory.txt", self.inventory_text()),
            ("cases.jsonl", cases_to_jsonl(&self.cases)),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| io_err(&path, e))?;
        }
        Ok(())
    }
}

fn unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit vector at a uniform angle in `[0, cone]` from `axis`.
fn in_cone<R: Rng + ?Sized>(axis: &[f64], cone: f64, rng: &mut R) -> Vec<f64> {
    let theta = rng.random_range(0.0..=cone);
    at_angle(axis, theta, rng)
}

/// Unit vector exactly `theta` away from the unit vector `axis`, in a
/// uniformly random direction.
fn at_angle<R: Rng + ?Sized>(axis: &[f64], theta: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let r = unit(axis.len(), rng);
        let dot: f64 = r.iter().zip(axis).map(|(a, b)| a * b).sum();
        let perp: Vec<f64> = r.iter().zip(axis).map(|(a, b)| a - dot * b).collect();
        let n = perp.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return axis
                .iter()
                .zip(&perp)
                .map(|(a, p)| theta.cos() * a + theta.sin() * p / n)
                .collect();
        }
    }
}

/// Fraction of the topic arc at which the `k`-th of `n` words sits.
fn arc_position(k: usize, n: usize) -> f64 {
    if n > 1 {
        k as f64 / (n - 1) as f64
    } else {
        0.0
    }
}

/// Indices of the words a turn may draw from when the topic shifts: the
/// third of the arc centered on the turn's relative position.
fn topic_band(t: usize, turns: usize, words: usize) -> std::ops::Range<usize> {
    let frac = if turns > 1 {
        t as f64 / (turns - 1) as f64
    } else {
        0.0
    };
    let center = (frac * (words - 1) as f64).round() as usize;
    let half = words / 6;
    center.saturating_sub(half)..(center + half + 1).min(words)
}

/// Label of the `i`-th ambiguous word.
pub fn label_name(i: usize) -> String {
    format!("amb{i:02}")
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthCorpus, SynthError> {
    generate_synthetic_with(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed))
}

pub fn generate_synthetic_with<R: Rng + ?Sized>(
    spec: &SynthSpec,
    rng: &mut R,
) -> Result<SynthCorpus, SynthError> {
    if spec.senses_per_label < 2 {
        return Err(SynthError::InvalidSpec(
            "senses_per_label must be at least 2".into(),
        ));
    }
    if spec.dim < 2
        || spec.words_per_sense == 0
        || spec.tokens_per_turn == 0
        || spec.doc_length == 0
    {
        return Err(SynthError::InvalidSpec(
            "dim >= 2 and non-zero words, tokens and turns required".into(),
        ));
    }
    if ![spec.noise, spec.target_rate, spec.distractor_rate]
        .iter()
        .all(|p| (0.0..=1.0).contains(p))
    {
        return Err(SynthError::InvalidSpec(
            "noise, target_rate and distractor_rate are probabilities".into(),
        ));
    }
    if spec.noise > 0.0 && spec.vocab_size == 0 {
        return Err(SynthError::InvalidSpec(
            "noise needs a noise vocabulary".into(),
        ));
    }
    let sep = spec.min_separation_deg.to_radians();
    let cone = spec.cone_deg.to_radians();
    let shift = spec.shift_deg.to_radians();

    let mut rows = Vec::new();
    let mut topical: Vec<Vec<Vec<String>>> = Vec::new();
    for li in 0..spec.n_labels {
        let label = label_name(li);
        let mut senses: Vec<Vec<f64>> = Vec::new();
        for _ in 0..spec.senses_per_label {
            let v = (0..MAX_ATTEMPTS)
                .map(|_| unit(spec.dim, rng))
                .find(|v| senses.iter().all(|s| angular_distance(s, v) >= sep))
                .ok_or(SynthError::Infeasible {
                    senses: spec.senses_per_label,
                    separation_deg: spec.min_separation_deg,
                    dim: spec.dim,
                })?;
            senses.push(v);
        }
        let mut words_by_sense = Vec::new();
        for (si, s) in senses.iter().enumerate() {
            rows.push(WordVector {
                label: format!("{label}{SENSE_SEPARATOR}s{si}"),
                vector: s.clone(),
            });
            let usage = at_angle(s, spec.drift_deg.to_radians(), rng);
            let heading =
                (spec.shift_deg > 0.0).then(|| at_angle(&usage, std::f64::consts::FRAC_PI_2, rng));
            let mut words = Vec::new();
            for k in 0..spec.words_per_sense {
                let name = format!("t{li:02}_{si}_{k:02}");
                let axis = match &heading {
                    Some(h) => {
                        let theta = shift * arc_position(k, spec.words_per_sense);
                        usage
                            .iter()
                            .zip(h)
                            .map(|(u, h)| theta.cos() * u + theta.sin() * h)
                            .collect()
                    }
                    None => usage.clone(),
                };
                rows.push(WordVector {
                    label: name.clone(),
                    vector: in_cone(&axis, cone, rng),
                });
                words.push(name);
            }
            words_by_sense.push(words);
        }
        topical.push(words_by_sense);
    }
    let noise_words: Vec<String> = (0..spec.vocab_size).map(|k| format!("n{k:03}")).collect();
    for name in &noise_words {
        rows.push(WordVector {
            label: name.clone(),
            vector: unit(spec.dim, rng),
        });
    }

    let mut cases = Vec::with_capacity(spec.n_cases);
    for c in 0..spec.n_cases {
        let li = c % spec.n_labels.max(1);
        let si = (c / spec.n_labels.max(1)) % spec.senses_per_label;
        let label = label_name(li);
        let words = &topical[li][si];
        let turns = (0..spec.doc_length)
            .map(|t| {
                let band = if shift > 0.0 {
                    topic_band(t, spec.doc_length, words.len())
                } else {
                    0..words.len()
                };
                let mut tokens: Vec<String> = (0..spec.tokens_per_turn)
                    .map(|_| {
                        if rng.random_bool(spec.noise) {
                            noise_words[rng.random_range(0..noise_words.len())].clone()
                        } else {
                            words[rng.random_range(band.clone())].clone()
                        }
                    })
                    .collect();
                if t == 0 || rng.random_bool(spec.target_rate) {
                    let at = rng.random_range(0..=tokens.len());
                    tokens.insert(at, label.clone());
                }
                if spec.n_labels > 1 && rng.random_bool(spec.distractor_rate) {
                    let other = (li + rng.random_range(1..spec.n_labels)) % spec.n_labels;
                    let at = rng.random_range(0..=tokens.len());
                    tokens.insert(at, label_name(other));
                }
                Utterance {
                    role: Role::Other,
                    tokens,
                    t: t as u32,
                }
            })
            .collect();
        cases.push(ReplayCase {
            id: Some(format!("synth{c:03}")),
            target_label: label,
            gold_sense: format!("s{si}"),
            turns,
            human_confidence: None,
        });
    }

    let store = VectorStore::from_rows(spec.dim, rows)?;
    let inventory = SenseInventory::from_store(&store);
    Ok(SynthCorpus {
        store,
        inventory,
        cases,
    })
}

/// Sense vectors per label, keyed by `label → sense id`.
pub fn sense_table(inv: &SenseInventory) -> BTreeMap<String, BTreeMap<String, Vec<f64>>> {
    inv.labels()
        .filter(|l| inv.is_ambiguous(l))
        .map(|l| {
            let senses = inv
                .senses(l)
                .unwrap_or_default()
                .iter()
                .map(|s| (s.id.clone(), s.vector.clone()))
                .collect();
            (l.to_string(), senses)
        })
        .collect()
}
