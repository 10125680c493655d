#![allow(dead_code)]
//! Straight-line reference for a two-dimensional instance. In two dimensions
//! an embedding has a single angle (its azimuth), so every landmark is a
//! scalar Gaussian on the circle and each quantity below can be written out
//! by hand.
//!
//! Each turn the reference starts from the session's exported state, redoes
//! the observation, branching and weighting with plain scalar code, and must
//! agree with the weights and confidences the session reports.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use senseslam::vecstore::VectorStore;
use senseslam::{Role, SenseInventory, Session, SessionConfig, SnapshotParticle, Utterance};

pub const TOL: f64 = 1e-9;

const STORE: &str = "\
5 2
mac#macbook 1.0 0.2
mac#mcdonalds 0.1 1.0
ate 0.3 1.0
fries -0.2 0.9
laptop 1.0 -0.1
";

pub fn inventory() -> (SenseInventory, Vec<(String, Vec<f64>)>) {
    let store = VectorStore::parse(STORE).unwrap();
    let rows = STORE
        .lines()
        .skip(1)
        .map(|l| {
            let mut parts = l.split_whitespace();
            let label = parts.next().unwrap().to_string();
            (label, parts.map(|x| x.parse().unwrap()).collect())
        })
        .collect();
    (SenseInventory::from_store(&store), rows)
}

pub fn config() -> SessionConfig {
    SessionConfig {
        dim: 2,
        lambda_u: 0.3,
        lambda_z: 0.4,
        lambda_w: 0.5,
        sigma_u: 0.0,
        sigma_z: 0.0,
        sigma_w: 0.0,
        t_alpha: 3,
        epsilon: 1e-6,
        lambda_w2: 0.5,
        eta_tau: 5.0,
        gamma_tau: 2.0,
        particle_multiplier: 1,
        obs_var0: 0.5,
        obs_var: 0.8,
        process_var: 0.0,
        max_branch_factor: 64,
        kalman: true,
        seed: 3,
    }
}

pub fn azimuth(v: &[f64]) -> f64 {
    v[1].atan2(v[0]).rem_euclid(TAU)
}

pub fn wrap(d: f64) -> f64 {
    let t = d.rem_euclid(TAU);
    if t > PI {
        t - TAU
    } else {
        t
    }
}

#[derive(Debug, Clone)]
pub struct Land {
    pub label: String,
    pub id: String,
    pub mean: f64,
    pub var: f64,
    pub used: Option<u32>,
    pub is_new: bool,
    pub origin: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Hyp {
    pub x: Vec<f64>,
    pub lands: Vec<Land>,
    pub assign: BTreeMap<String, String>,
    pub spawned: BTreeSet<String>,
}

impl Hyp {
    pub fn from_snapshot(p: &SnapshotParticle) -> Self {
        let mut lands = Vec::new();
        for (label, list) in &p.landmarks {
            for s in list {
                assert_eq!(s.dist.mean.0.len(), 1);
                lands.push(Land {
                    label: label.clone(),
                    id: s.sense_id.clone(),
                    mean: s.dist.mean.0[0],
                    var: s.dist.variance[0],
                    used: s.last_used,
                    is_new: s.is_new,
                    origin: s.origin.as_ref().map(|o| o.0[0]),
                });
            }
        }
        Self {
            x: p.context.clone(),
            lands,
            assign: p.assignments.clone(),
            spawned: p.spawned_new.clone(),
        }
    }
}

pub struct Ref {
    pub cfg: SessionConfig,
    pub rows: Vec<(String, Vec<f64>)>,
    pub scale: f64,
}

impl Ref {
    pub fn new(cfg: SessionConfig, rows: Vec<(String, Vec<f64>)>) -> Self {
        let scale = rows
            .iter()
            .map(|(_, v)| (v[0] * v[0] + v[1] * v[1]).sqrt())
            .sum::<f64>()
            / rows.len() as f64;
        Self { cfg, rows, scale }
    }

    pub fn senses(&self, label: &str) -> Vec<(String, Vec<f64>)> {
        let prefix = format!("{label}#");
        self.rows
            .iter()
            .filter_map(|(l, v)| {
                l.strip_prefix(&prefix)
                    .map(|id| (id.to_string(), v.clone()))
            })
            .collect()
    }

    pub fn word(&self, label: &str) -> Option<Vec<f64>> {
        self.rows
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, v)| v.clone())
    }

    /// Token vector: the word itself, or the average of an ambiguous word's senses.
    pub fn token(&self, label: &str) -> Option<Vec<f64>> {
        if let Some(v) = self.word(label) {
            return Some(v);
        }
        let s = self.senses(label);
        if s.is_empty() {
            return None;
        }
        let n = s.len() as f64;
        Some(vec![
            s.iter().map(|(_, v)| v[0]).sum::<f64>() / n,
            s.iter().map(|(_, v)| v[1]).sum::<f64>() / n,
        ])
    }

    pub fn in_window(&self, l: &Land, t: u32) -> bool {
        matches!(l.used, Some(u) if u <= t && u + self.cfg.t_alpha >= t)
    }

    pub fn observe(&self, h: &mut Hyp, k: usize) {
        let c = &self.cfg;
        let l = &h.lands[k];
        let anchor = if l.is_new {
            let a = l.origin.unwrap();
            vec![a.cos() * self.scale, a.sin() * self.scale]
        } else {
            self.senses(&l.label)
                .into_iter()
                .find(|(id, _)| *id == l.id)
                .map(|(_, v)| v)
                .or_else(|| self.word(&l.label))
                .unwrap()
        };
        let obs = azimuth(&[
            (1.0 - c.lambda_w) * h.x[0] + c.lambda_w * anchor[0],
            (1.0 - c.lambda_w) * h.x[1] + c.lambda_w * anchor[1],
        ]);
        let l = &mut h.lands[k];
        let gain = l.var / (l.var + c.obs_var);
        l.mean = (l.mean + gain * wrap(obs - l.mean)).rem_euclid(TAU);
        l.var *= 1.0 - gain;
    }

    /// Unfloored log agreement; `None` without in-window landmarks.
    pub fn log_agreement(&self, h: &Hyp, t: u32) -> Option<f64> {
        let c = &self.cfg;
        let x = azimuth(&h.x);
        let mut sum = 0.0;
        let mut n = 0.0;
        for l in &h.lands {
            if self.in_window(l, t) {
                let eta = (-((t - l.used.unwrap()) as f64) / c.eta_tau).exp();
                sum += eta * wrap(l.mean - x).abs() / l.var.sqrt();
                n += 1.0;
            }
        }
        (n > 0.0).then(|| -(sum / n + c.epsilon).ln())
    }

    pub fn kl(mp: f64, vp: f64, mq: f64, vq: f64) -> f64 {
        let d = wrap(mp - mq);
        (0.5 * (vp / vq + d * d / vq - 1.0 + (vq / vp).ln())).max(0.0)
    }

    /// Weight before normalization.
    pub fn weight(&self, h: &Hyp, t: u32) -> f64 {
        let c = &self.cfg;
        let new_label = h.assign.iter().find(|(label, id)| {
            h.lands
                .iter()
                .any(|l| &l.label == *label && &l.id == *id && l.is_new)
        });
        let Some(w) = self.log_agreement(h, t) else {
            return 0.0;
        };
        match new_label {
            None => w.max(0.0),
            Some((label, _)) => {
                let new = h
                    .lands
                    .iter()
                    .find(|l| &l.label == label && l.is_new)
                    .unwrap();
                let old: Vec<&Land> = h
                    .lands
                    .iter()
                    .filter(|l| &l.label == label && !l.is_new)
                    .collect();
                let mean_kl = old
                    .iter()
                    .map(|o| Self::kl(o.mean, o.var, new.mean, new.var))
                    .sum::<f64>()
                    / old.len() as f64;
                let gamma = 1.0 - (-(t as f64) / c.gamma_tau).exp();
                (gamma * (w + c.lambda_w2 * (mean_kl + c.epsilon).ln())).max(0.0)
            }
        }
    }

    /// One other-speaker turn about `target` from the exported population;
    /// returns each branch's sense choice and unnormalized weight.
    pub fn turn(&self, pre: &[Hyp], tokens: &[&str], t: u32, target: &str) -> Vec<(String, f64)> {
        let c = &self.cfg;
        let heard: Vec<&str> = tokens
            .iter()
            .copied()
            .filter(|w| self.word(w).is_some())
            .collect();
        let mentioned = tokens.contains(&target);
        let known: Vec<Vec<f64>> = tokens.iter().filter_map(|w| self.token(w)).collect();
        let u = [
            known.iter().map(|v| v[0]).sum::<f64>() / known.len() as f64,
            known.iter().map(|v| v[1]).sum::<f64>() / known.len() as f64,
        ];
        let mut out = Vec::new();
        for p in pre {
            let mut h = p.clone();
            // heard plain words join the domain with their inventory prior
            for w in &heard {
                if !h.lands.iter().any(|l| l.label == *w) {
                    let v = self.word(w).unwrap();
                    h.lands.push(Land {
                        label: w.to_string(),
                        id: String::new(),
                        mean: azimuth(&v),
                        var: c.obs_var0,
                        used: None,
                        is_new: false,
                        origin: None,
                    });
                }
            }
            // refresh recent landmarks of labels that are not being branched on
            for k in 0..h.lands.len() {
                let l = &h.lands[k];
                let branched = mentioned && l.label == target;
                if !branched && (self.in_window(l, t) || heard.contains(&l.label.as_str())) {
                    self.observe(&mut h, k);
                }
            }
            for l in h.lands.iter_mut() {
                if heard.contains(&l.label.as_str()) {
                    l.used = Some(t);
                }
            }
            let mut branches = Vec::new();
            if mentioned {
                let ids: Vec<usize> = (0..h.lands.len())
                    .filter(|&k| h.lands[k].label == target)
                    .collect();
                for k in ids {
                    let mut b = h.clone();
                    self.observe(&mut b, k);
                    b.lands[k].used = Some(t);
                    b.assign.insert(target.to_string(), b.lands[k].id.clone());
                    branches.push(b);
                }
                if !h.spawned.contains(target) {
                    let x = azimuth(&h.x);
                    let recent: Vec<&Land> =
                        h.lands.iter().filter(|l| self.in_window(l, t)).collect();
                    let (s, co) = recent
                        .iter()
                        .map(|l| l.mean)
                        .chain([x])
                        .fold((0.0, 0.0), |(s, co), a| (s + a.sin(), co + a.cos()));
                    let mean = if recent.is_empty() {
                        x
                    } else {
                        s.atan2(co).rem_euclid(TAU)
                    };
                    let var = if recent.is_empty() {
                        c.obs_var0
                    } else {
                        recent.iter().map(|l| l.var).sum::<f64>() / recent.len() as f64
                    };
                    let mut b = h.clone();
                    b.lands.push(Land {
                        label: target.to_string(),
                        id: format!("new@{t}"),
                        mean,
                        var,
                        used: Some(t),
                        is_new: true,
                        origin: Some(mean),
                    });
                    b.assign.insert(target.to_string(), format!("new@{t}"));
                    b.spawned.insert(target.to_string());
                    branches.push(b);
                }
            } else {
                branches.push(h);
            }
            for mut b in branches {
                // the context moves toward the utterance before weighting
                b.x = vec![
                    (1.0 - c.lambda_z) * b.x[0] + c.lambda_z * u[0],
                    (1.0 - c.lambda_z) * b.x[1] + c.lambda_z * u[1],
                ];
                let choice = b.assign.get(target).cloned().unwrap_or_default();
                out.push((choice, self.weight(&b, t)));
            }
        }
        out
    }
}

pub fn normalized(raw: &[(String, f64)]) -> Vec<f64> {
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    if total > 0.0 {
        return raw.iter().map(|(_, w)| w / total).collect();
    }
    let known = raw.iter().filter(|(id, _)| !id.starts_with("new@")).count();
    if known == 0 {
        return vec![1.0 / raw.len() as f64; raw.len()];
    }
    raw.iter()
        .map(|(id, _)| {
            if id.starts_with("new@") {
                0.0
            } else {
                1.0 / known as f64
            }
        })
        .collect()
}

pub fn confidence(raw: &[(String, f64)], norm: &[f64], senses: &[&str]) -> BTreeMap<String, f64> {
    let mut best: BTreeMap<String, f64> = senses.iter().map(|s| (s.to_string(), 0.0)).collect();
    for ((id, _), w) in raw.iter().zip(norm) {
        // every sense created mid-conversation is one group
        let group = if id.starts_with("new@") {
            "new"
        } else {
            id.as_str()
        };
        let slot = best.entry(group.to_string()).or_insert(0.0);
        *slot = slot.max(*w);
    }
    let total: f64 = best.values().sum();
    best.into_iter().map(|(k, v)| (k, v / total)).collect()
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Runs the three-turn instance and compares every weight and confidence.
pub fn check_three_turn_instance() -> Result<(), String> {
    let (inv, rows) = inventory();
    let cfg = config();
    let reference = Ref::new(cfg.clone(), rows);
    let mut session =
        Session::new(cfg, Arc::new(inv), &["mac".to_string()]).map_err(|e| e.to_string())?;
    ensure!(session.particle_count() == 2, "expected 2 particles");

    let script: [&[&str]; 3] = [&["ate", "mac"], &["fries", "mac"], &["mac", "laptop"]];
    let mut saw_new_weight = false;
    for (t, tokens) in script.iter().enumerate() {
        let t = t as u32;
        let pre: Vec<Hyp> = session
            .snapshot()
            .particles
            .iter()
            .map(Hyp::from_snapshot)
            .collect();
        let raw = reference.turn(&pre, tokens, t, "mac");
        session
            .process_turn(&Utterance::new(Role::Other, tokens.iter().copied(), t))
            .map_err(|e| e.to_string())?;

        let evidence = session.evidence();
        ensure!(
            evidence.len() == raw.len(),
            "turn {t}: {} branches, reference {}",
            evidence.len(),
            raw.len()
        );
        let norm = normalized(&raw);
        for (k, ((id, w), e)) in raw.iter().zip(evidence).enumerate() {
            ensure!(
                &e.choices["mac"].sense_id == id,
                "turn {t} branch {k}: chose {}",
                e.choices["mac"].sense_id
            );
            ensure!(
                (e.weight - norm[k]).abs() < TOL,
                "turn {t} branch {k}: weight {} vs {}",
                e.weight,
                norm[k]
            );
            if id.starts_with("new@") {
                if t == 0 {
                    ensure!(*w == 0.0, "new-sense weight {w} at t=0");
                } else if *w > 0.0 {
                    saw_new_weight = true;
                }
            }
        }
        let expected = confidence(&raw, &norm, &["macbook", "mcdonalds"]);
        let got = session.confidence("mac").map_err(|e| e.to_string())?;
        ensure!(
            got.per_sense.keys().eq(expected.keys()),
            "turn {t}: groups {:?}",
            got.per_sense.keys().collect::<Vec<_>>()
        );
        for (k, v) in &expected {
            ensure!(
                (got.per_sense[k] - v).abs() < TOL,
                "turn {t} {k}: confidence {} vs {v}",
                got.per_sense[k]
            );
        }
    }
    ensure!(
        saw_new_weight,
        "the instance never produced a positive new-sense weight"
    );
    Ok(())
}
