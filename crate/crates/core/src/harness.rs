//! Replay of recorded conversations, ablation modes, and aggregate metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    default_group, Choice, ConfidenceReport, EngineError, Role, Session, SessionConfig, Utterance,
};
use crate::geometry::{angular_distance, from_nsphere};
use crate::vecstore::{Sense, SenseInventory};

/// Default cap on turns per case.
pub const DEFAULT_MAX_TURNS: usize = 30;

/// Majority threshold on the final gold confidence.
pub const MAJORITY: f64 = 0.5;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("case {case}: {reason}")]
    InvalidCase { case: String, reason: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("unknown mode {0:?}")]
    UnknownMode(String),
    #[error("grid: {0}")]
    Grid(String),
    #[error("no results to aggregate")]
    NoResults,
}

/// One recorded conversation about a target label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayCase {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub target_label: String,
    pub gold_sense: String,
    pub turns: Vec<Utterance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_confidence: Option<Vec<(u32, f64)>>,
}

impl ReplayCase {
    pub fn name(&self, index: usize) -> String {
        self.id.clone().unwrap_or_else(|| format!("case{index}"))
    }

    pub fn validate(&self, max_turns: usize, index: usize) -> Result<(), HarnessError> {
        let bad = |reason: String| HarnessError::InvalidCase {
            case: self.name(index),
            reason,
        };
        let first = self.turns.first().ok_or_else(|| bad("no turns".into()))?;
        if !first.tokens.contains(&self.target_label) {
            return Err(bad(format!(
                "first turn does not mention {:?}",
                self.target_label
            )));
        }
        if self.turns.len() > max_turns {
            return Err(bad(format!(
                "{} turns exceeds the cap of {max_turns}",
                self.turns.len()
            )));
        }
        if self.turns.iter().any(|u| u.tokens.is_empty()) {
            return Err(bad("empty turn".into()));
        }
        if self.turns.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(bad("turn times decrease".into()));
        }
        if let Some(h) = &self.human_confidence {
            if h.iter().any(|(_, c)| !(0.0..=1.0).contains(c)) {
                return Err(bad("human confidence outside [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Model variant under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Full,
    /// Landmarks keep their initial distributions.
    NoKalman,
    /// Half the particles per candidate.
    FewerParticles,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// The gold sense is among the candidates.
    Interpretation,
    /// The gold sense is withheld and must be acquired as a new sense.
    NewInterpretation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mode {
    pub model: Model,
    pub task: Task,
}

impl Mode {
    pub const FULL: Mode = Mode {
        model: Model::Full,
        task: Task::Interpretation,
    };
    pub const NO_KALMAN: Mode = Mode {
        model: Model::NoKalman,
        task: Task::Interpretation,
    };
    pub const FEWER_PARTICLES: Mode = Mode {
        model: Model::FewerParticles,
        task: Task::Interpretation,
    };
    pub const NEW_INTERPRETATION: Mode = Mode {
        model: Model::Full,
        task: Task::NewInterpretation,
    };

    pub fn new(model: Model, task: Task) -> Self {
        Self { model, task }
    }

    /// Session config for this mode derived from a base config.
    pub fn configure(&self, base: &SessionConfig) -> SessionConfig {
        let mut cfg = base.clone();
        match self.model {
            Model::Full => {}
            Model::NoKalman => cfg.kalman = false,
            Model::FewerParticles => cfg.particle_multiplier = (cfg.particle_multiplier / 2).max(1),
        }
        cfg
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let model = match self.model {
            Model::Full => "full",
            Model::NoKalman => "no_kalman",
            Model::FewerParticles => "fewer_particles",
        };
        match (self.task, self.model) {
            (Task::Interpretation, _) => f.write_str(model),
            (Task::NewInterpretation, Model::Full) => f.write_str("new_interpretation"),
            (Task::NewInterpretation, _) => write!(f, "new_interpretation:{model}"),
        }
    }
}

impl FromStr for Mode {
    type Err = HarnessError;

    /// Accepts `full`, `no_kalman`, `fewer_particles`, `new_interpretation`
    /// and `new_interpretation:<model>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let model = |m: &str| match m {
            "full" => Ok(Model::Full),
            "no_kalman" => Ok(Model::NoKalman),
            "fewer_particles" => Ok(Model::FewerParticles),
            _ => Err(HarnessError::UnknownMode(s.to_string())),
        };
        match s.split_once(':') {
            Some(("new_interpretation", m)) => Ok(Mode::new(model(m)?, Task::NewInterpretation)),
            None if s == "new_interpretation" => Ok(Mode::NEW_INTERPRETATION),
            None => Ok(Mode::new(model(s)?, Task::Interpretation)),
            _ => Err(HarnessError::UnknownMode(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub case_id: String,
    pub mode: String,
    /// Report before any input.
    pub prior: ConfidenceReport,
    /// One report per other-speaker turn.
    pub trajectory: Vec<(u32, ConfidenceReport)>,
    /// Gold confidence before input followed by one value per other turn.
    pub gold_confidence: Vec<f64>,
    pub final_gold_confidence: f64,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_final: Option<f64>,
}

/// Index of the inventory sense whose vector is angularly closest to `v`.
fn nearest_sense<'a>(senses: &'a [Sense], v: &[f64]) -> Option<&'a str> {
    senses
        .iter()
        .map(|s| (s.id.as_str(), angular_distance(&s.vector, v)))
        .fold(None::<(&str, f64)>, |best, (id, d)| match best {
            Some((_, bd)) if bd <= d => best,
            _ => Some((id, d)),
        })
        .map(|(id, _)| id)
}

/// Group a particle's choice is scored under. In the new-interpretation task
/// a dynamically created sense counts as the held-out gold sense when, among
/// all inventory senses of the label, the gold one is nearest to it.
pub fn classify_choice(task: Task, all_senses: &[Sense], gold: &str, c: &Choice) -> String {
    match task {
        Task::Interpretation => default_group(c),
        Task::NewInterpretation => {
            if c.is_new && nearest_sense(all_senses, &from_nsphere(&c.mean)) == Some(gold) {
                gold.to_string()
            } else {
                default_group(c)
            }
        }
    }
}

/// Replays a case with the default turn cap.
pub fn run_case(
    case: &ReplayCase,
    inventory: &Arc<SenseInventory>,
    cfg: &SessionConfig,
    mode: Mode,
) -> Result<RunResult, HarnessError> {
    run_case_capped(case, inventory, cfg, mode, DEFAULT_MAX_TURNS, 0)
}

pub fn run_case_capped(
    case: &ReplayCase,
    inventory: &Arc<SenseInventory>,
    cfg: &SessionConfig,
    mode: Mode,
    max_turns: usize,
    index: usize,
) -> Result<RunResult, HarnessError> {
    case.validate(max_turns, index)?;
    let name = case.name(index);
    let label = case.target_label.as_str();
    let gold = case.gold_sense.as_str();
    let all_senses = inventory
        .senses(label)
        .ok_or_else(|| HarnessError::InvalidCase {
            case: name.clone(),
            reason: format!("target {label:?} not in inventory"),
        })?;
    if !all_senses.iter().any(|s| s.id == gold) {
        return Err(HarnessError::InvalidCase {
            case: name,
            reason: format!("gold sense {gold:?} not in inventory"),
        });
    }
    let session_inventory = match mode.task {
        Task::Interpretation => inventory.clone(),
        Task::NewInterpretation => Arc::new(
            inventory
                .without_sense(label, gold)
                .map_err(EngineError::from)?,
        ),
    };
    let cfg = mode.configure(cfg);
    let mut session = Session::new(cfg, session_inventory, &[label.to_string()])?;

    let classify = |c: &Choice| classify_choice(mode.task, all_senses, gold, c);

    let prior = session.confidence_by(label, classify)?;
    let mut gold_confidence = vec![prior.get(gold)];
    let mut trajectory = Vec::new();
    for utt in &case.turns {
        session.process_turn(utt)?;
        if utt.role == Role::Other {
            let report = session.confidence_by(label, classify)?;
            gold_confidence.push(report.get(gold));
            trajectory.push((utt.t, report));
        }
    }
    let final_gold_confidence = *gold_confidence.last().expect("prior is always present");
    Ok(RunResult {
        case_id: name,
        mode: mode.to_string(),
        prior,
        trajectory,
        gold_confidence,
        final_gold_confidence,
        correct: final_gold_confidence > MAJORITY,
        human_final: case
            .human_confidence
            .as_ref()
            .and_then(|h| h.last())
            .map(|(_, c)| *c),
    })
}

/// Replays every case in parallel; results keep case order.
pub fn run_all(
    cases: &[ReplayCase],
    inventory: &Arc<SenseInventory>,
    cfg: &SessionConfig,
    mode: Mode,
    max_turns: usize,
) -> Result<Vec<RunResult>, HarnessError> {
    cases
        .par_iter()
        .enumerate()
        .map(|(i, c)| run_case_capped(c, inventory, cfg, mode, max_turns, i))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnStat {
    /// Number of sentences input so far.
    pub turn: usize,
    pub mean: f64,
    pub variance: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub cases: usize,
    pub accuracy: f64,
    pub mean_final_confidence: f64,
    pub per_turn: Vec<TurnStat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_agreement: Option<Agreement>,
}

impl Metrics {
    /// `turn,mean,variance` rows for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("turn,mean,variance\n");
        for s in &self.per_turn {
            out.push_str(&format!("{},{},{}\n", s.turn, s.mean, s.variance));
        }
        out
    }
}

/// Precision, recall and F1 of model majorities against reference majorities.
pub fn agreement(model: &[bool], reference: &[bool]) -> Agreement {
    let tp = model
        .iter()
        .zip(reference)
        .filter(|(m, r)| **m && **r)
        .count() as f64;
    let predicted = model.iter().filter(|m| **m).count() as f64;
    let actual = reference.iter().filter(|r| **r).count() as f64;
    let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
    let recall = if actual > 0.0 { tp / actual } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Agreement {
        precision,
        recall,
        f1,
        cases: model.len(),
    }
}

/// Per-turn mean and variance of the gold confidence, accuracy at the
/// majority threshold, and agreement with human majorities when available.
pub fn aggregate(results: &[RunResult]) -> Result<Metrics, HarnessError> {
    if results.is_empty() {
        return Err(HarnessError::NoResults);
    }
    let longest = results
        .iter()
        .map(|r| r.gold_confidence.len())
        .max()
        .unwrap_or(0);
    let per_turn = (0..longest)
        .map(|k| {
            let vals: Vec<f64> = results
                .iter()
                .filter_map(|r| r.gold_confidence.get(k).copied())
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let variance = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            TurnStat {
                turn: k,
                mean,
                variance,
                count: vals.len(),
            }
        })
        .collect();
    let n = results.len() as f64;
    let accuracy = results.iter().filter(|r| r.correct).count() as f64 / n;
    let mean_final_confidence = results.iter().map(|r| r.final_gold_confidence).sum::<f64>() / n;
    let paired: Vec<(bool, bool)> = results
        .iter()
        .filter_map(|r| r.human_final.map(|h| (r.correct, h > MAJORITY)))
        .collect();
    let human_agreement = (!paired.is_empty()).then(|| {
        let (m, h): (Vec<bool>, Vec<bool>) = paired.into_iter().unzip();
        agreement(&m, &h)
    });
    Ok(Metrics {
        cases: results.len(),
        accuracy,
        mean_final_confidence,
        per_turn,
        human_agreement,
    })
}

fn io_err(path: &Path, source: io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parses one JSON case per non-empty line.
pub fn parse_cases(text: &str, origin: &str) -> Result<Vec<ReplayCase>, HarnessError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| HarnessError::Json {
                path: origin.to_string(),
                line: i + 1,
                source,
            })
        })
        .collect()
}

pub fn load_cases(path: impl AsRef<Path>) -> Result<Vec<ReplayCase>, HarnessError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_cases(&text, &path.display().to_string())
}

pub fn cases_to_jsonl(cases: &[ReplayCase]) -> String {
    let mut out = String::new();
    for c in cases {
        out.push_str(&serde_json::to_string(c).expect("cases serialize"));
        out.push('\n');
    }
    out
}

pub fn save_cases(path: impl AsRef<Path>, cases: &[ReplayCase]) -> Result<(), HarnessError> {
    let path = path.as_ref();
    fs::write(path, cases_to_jsonl(cases)).map_err(|e| io_err(path, e))
}

/// Field name → candidate values, applied on top of a base config.
pub type Grid = BTreeMap<String, Vec<serde_json::Value>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub overrides: BTreeMap<String, serde_json::Value>,
    pub accuracy: f64,
    pub mean_final_confidence: f64,
}

/// Every config in the Cartesian product of the grid.
pub fn expand_grid(
    base: &SessionConfig,
    grid: &Grid,
) -> Result<Vec<(BTreeMap<String, serde_json::Value>, SessionConfig)>, HarnessError> {
    let base_value = serde_json::to_value(base).expect("config serializes");
    let fields = base_value.as_object().expect("config is an object");
    for key in grid.keys() {
        if !fields.contains_key(key) {
            return Err(HarnessError::Grid(format!("unknown config field {key:?}")));
        }
    }
    let mut combos: Vec<BTreeMap<String, serde_json::Value>> = vec![BTreeMap::new()];
    for (key, values) in grid {
        if values.is_empty() {
            return Err(HarnessError::Grid(format!("no values for {key:?}")));
        }
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.insert(key.clone(), v.clone());
                    c
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .map(|overrides| {
            let mut value = base_value.clone();
            let obj = value.as_object_mut().expect("object");
            for (k, v) in &overrides {
                obj.insert(k.clone(), v.clone());
            }
            let cfg: SessionConfig =
                serde_json::from_value(value).map_err(|e| HarnessError::Grid(e.to_string()))?;
            cfg.validate()?;
            Ok((overrides, cfg))
        })
        .collect()
}

/// Evaluates every grid point on the cases; sorted best accuracy first.
pub fn sweep(
    cases: &[ReplayCase],
    inventory: &Arc<SenseInventory>,
    base: &SessionConfig,
    grid: &Grid,
    mode: Mode,
    max_turns: usize,
) -> Result<Vec<SweepPoint>, HarnessError> {
    let mut points = expand_grid(base, grid)?
        .into_iter()
        .map(|(overrides, cfg)| {
            let results = run_all(cases, inventory, &cfg, mode, max_turns)?;
            let m = aggregate(&results)?;
            Ok(SweepPoint {
                overrides,
                accuracy: m.accuracy,
                mean_final_confidence: m.mean_final_confidence,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    points.sort_by(|a, b| {
        b.accuracy
            .total_cmp(&a.accuracy)
            .then(b.mean_final_confidence.total_cmp(&a.mean_final_confidence))
    });
    Ok(points)
}
