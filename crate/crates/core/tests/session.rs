use std::sync::Arc;

use senseslam::harness::{run_case_capped, DEFAULT_MAX_TURNS};
use senseslam::{
    generate_synthetic, run_case, ConfidenceReport, Mode, Role, SenseInventory, Session,
    SessionConfig, SessionSnapshot, SynthCorpus, SynthSpec, Utterance,
};

fn corpus() -> SynthCorpus {
    generate_synthetic(&SynthSpec {
        dim: 8,
        n_labels: 4,
        senses_per_label: 3,
        words_per_sense: 6,
        vocab_size: 20,
        n_cases: 6,
        doc_length: 8,
        tokens_per_turn: 4,
        noise: 0.2,
        distractor_rate: 0.3,
        drift_deg: 10.0,
        seed: 21,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn config(dim: usize) -> SessionConfig {
    SessionConfig {
        dim,
        particle_multiplier: 6,
        seed: 99,
        ..SessionConfig::default()
    }
}

/// Confidence after every turn of a transcript.
fn trajectory(session: &mut Session, turns: &[Utterance], label: &str) -> Vec<ConfidenceReport> {
    turns
        .iter()
        .map(|u| {
            session.process_turn(u).unwrap();
            session.confidence(label).unwrap()
        })
        .collect()
}

fn bits(reports: &[ConfidenceReport]) -> Vec<Vec<(String, u64)>> {
    reports
        .iter()
        .map(|r| {
            r.per_sense
                .iter()
                .map(|(k, v)| (k.clone(), v.to_bits()))
                .collect()
        })
        .collect()
}

#[test]
fn fixed_seed_reproduces_trajectories_bitwise() {
    let c = corpus();
    let inv = Arc::new(c.inventory.clone());
    for case in &c.cases {
        let label = case.target_label.clone();
        let run = || {
            let mut s = Session::new(config(8), inv.clone(), &[label.clone()]).unwrap();
            bits(&trajectory(&mut s, &case.turns, &label))
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn different_seeds_differ() {
    let c = corpus();
    let inv = Arc::new(c.inventory.clone());
    let case = &c.cases[0];
    let label = case.target_label.clone();
    let run = |seed| {
        let cfg = SessionConfig { seed, ..config(8) };
        let mut s = Session::new(cfg, inv.clone(), &[label.clone()]).unwrap();
        trajectory(&mut s, &case.turns, &label);
        s.snapshot()
    };
    assert_ne!(run(1).particles, run(2).particles);
}

#[test]
fn snapshot_resume_is_bitwise_identical() {
    let c = corpus();
    let inv = Arc::new(c.inventory.clone());
    for case in &c.cases {
        let label = case.target_label.clone();
        let split = case.turns.len() / 2;
        let mut whole = Session::new(config(8), inv.clone(), &[label.clone()]).unwrap();
        let expected = bits(&trajectory(&mut whole, &case.turns, &label));

        let mut first = Session::new(config(8), inv.clone(), &[label.clone()]).unwrap();
        let mut got = bits(&trajectory(&mut first, &case.turns[..split], &label));
        let text = serde_json::to_string(&first.snapshot()).unwrap();
        drop(first);
        let snap: SessionSnapshot = serde_json::from_str(&text).unwrap();
        let mut resumed = Session::from_snapshot(snap, inv.clone()).unwrap();
        got.extend(bits(&trajectory(
            &mut resumed,
            &case.turns[split..],
            &label,
        )));
        assert_eq!(got, expected);
        assert_eq!(resumed.snapshot(), whole.snapshot());
    }
}

#[test]
fn snapshot_rejects_mismatched_inventory() {
    let c = corpus();
    let inv = Arc::new(c.inventory.clone());
    let label = c.cases[0].target_label.clone();
    let s = Session::new(config(8), inv, &[label]).unwrap();
    let other = generate_synthetic(&SynthSpec {
        dim: 6,
        n_cases: 1,
        ..SynthSpec::default()
    })
    .unwrap();
    assert!(Session::from_snapshot(s.snapshot(), Arc::new(other.inventory)).is_err());
}

#[test]
fn power_of_two_rescaling_is_bitwise_invisible() {
    let c = corpus();
    for k in [-3i32, 1, 5] {
        let factor = 2f64.powi(k);
        let base = Arc::new(c.inventory.clone());
        let scaled = Arc::new(c.inventory.scaled(factor));
        for case in &c.cases {
            let label = case.target_label.clone();
            let run = |inv: &Arc<SenseInventory>| {
                let mut s = Session::new(config(8), inv.clone(), &[label.clone()]).unwrap();
                bits(&trajectory(&mut s, &case.turns, &label))
            };
            assert_eq!(run(&base), run(&scaled), "factor {factor}");
        }
    }
}

#[test]
fn arbitrary_rescaling_changes_nothing_beyond_rounding() {
    let c = corpus();
    let base = Arc::new(c.inventory.clone());
    let scaled = Arc::new(c.inventory.scaled(3.7));
    let cfg = SessionConfig {
        sigma_u: 0.0,
        sigma_z: 0.0,
        sigma_w: 0.0,
        ..config(8)
    };
    let case = &c.cases[0];
    let label = case.target_label.clone();
    let run = |inv: &Arc<SenseInventory>| {
        let mut s = Session::new(cfg.clone(), inv.clone(), &[label.clone()]).unwrap();
        trajectory(&mut s, &case.turns, &label)
    };
    for (a, b) in run(&base).iter().zip(run(&scaled)) {
        for (k, v) in &a.per_sense {
            assert!((v - b.get(k)).abs() < 1e-6, "{k}: {v} vs {}", b.get(k));
        }
    }
}

#[test]
fn invariants_hold_on_every_turn() {
    let c = corpus();
    let inv = Arc::new(c.inventory.clone());
    for case in &c.cases {
        let label = case.target_label.clone();
        let senses = inv.senses(&label).unwrap().len();
        let mut s = Session::new(config(8), inv.clone(), &[label.clone()]).unwrap();
        let m = s.particle_count();
        assert_eq!(m, 6 * senses);
        let prior = s.confidence(&label).unwrap();
        for v in prior.per_sense.values() {
            assert_eq!(*v, 1.0 / senses as f64);
        }
        for u in &case.turns {
            s.process_turn(u).unwrap();
            assert_eq!(s.particles().len(), m);
            let report = s.confidence(&label).unwrap();
            let total: f64 = report.per_sense.values().sum();
            assert!((total - 1.0).abs() < 1e-9, "{report:?}");
            assert!(report.per_sense.values().all(|v| (0.0..=1.0).contains(v)));
            let weight: f64 = s.particles().map(|p| p.weight).sum();
            assert!((weight - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn own_utterances_leave_interpretations_alone() {
    let c = corpus();
    let inv = Arc::new(c.inventory.clone());
    let case = &c.cases[0];
    let label = case.target_label.clone();
    let mut s = Session::new(config(8), inv, &[label.clone()]).unwrap();
    s.process_turn(&case.turns[0]).unwrap();
    let before = s.snapshot();
    let tokens = case.turns[1].tokens.clone();
    s.process_turn(&Utterance::new(Role::Own, tokens, 1))
        .unwrap();
    let after = s.snapshot();
    assert_eq!(before.evidence, after.evidence);
    for (a, b) in before.particles.iter().zip(&after.particles) {
        assert_eq!(a.landmarks, b.landmarks);
        assert_eq!(a.assignments, b.assignments);
        assert_ne!(a.context, b.context);
    }
}

#[test]
fn frozen_landmarks_match_vanishing_kalman_gain() {
    // With no observation noise and an enormous observation variance the
    // Kalman gain is ~0, which must agree with the frozen-landmark ablation.
    let c = corpus();
    let inv = Arc::new(c.inventory.clone());
    for case in &c.cases {
        let base = SessionConfig {
            sigma_w: 0.0,
            obs_var: 1e14,
            ..config(8)
        };
        let frozen = SessionConfig {
            kalman: false,
            ..base.clone()
        };
        let a = run_case(case, &inv, &base, Mode::FULL).unwrap();
        let b = run_case(case, &inv, &frozen, Mode::FULL).unwrap();
        for (x, y) in a.gold_confidence.iter().zip(&b.gold_confidence) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
        let nk = run_case(case, &inv, &base, Mode::NO_KALMAN).unwrap();
        assert_eq!(nk.gold_confidence, b.gold_confidence);
    }
}

#[test]
fn new_interpretation_starts_at_zero() {
    let c = corpus();
    let inv = Arc::new(c.inventory.clone());
    for (i, case) in c.cases.iter().enumerate() {
        let r = run_case_capped(
            case,
            &inv,
            &config(8),
            Mode::NEW_INTERPRETATION,
            DEFAULT_MAX_TURNS,
            i,
        )
        .unwrap();
        assert_eq!(r.gold_confidence[0], 0.0);
        assert!(
            !r.prior.per_sense.contains_key(&case.gold_sense)
                || r.prior.get(&case.gold_sense) == 0.0
        );
        for (_, report) in &r.trajectory {
            let total: f64 = report.per_sense.values().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn out_of_order_and_empty_turns_are_rejected_without_effect() {
    let c = corpus();
    let inv = Arc::new(c.inventory.clone());
    let case = &c.cases[0];
    let label = case.target_label.clone();
    let mut s = Session::new(config(8), inv, &[label]).unwrap();
    s.process_turn(&Utterance::new(
        Role::Other,
        case.turns[0].tokens.clone(),
        4,
    ))
    .unwrap();
    let before = s.snapshot();
    assert!(s
        .process_turn(&Utterance::new(
            Role::Other,
            case.turns[1].tokens.clone(),
            3
        ))
        .is_err());
    assert!(s
        .process_turn(&Utterance::new(Role::Other, Vec::<String>::new(), 5))
        .is_err());
    assert!(s
        .process_turn(&Utterance::new(Role::Other, ["nonword"], 5))
        .is_err());
    assert_eq!(s.snapshot(), before);
}
