//! Online estimation of conversation context and word senses.
//!
//! Each particle carries a context vector in embedding space and its own map
//! of sense landmarks (diagonal Gaussians over hyperspherical angles). Other
//! speakers' utterances branch particles over candidate senses, refine the
//! chosen landmarks with a Kalman update, and resample by how well the recent
//! landmarks agree with the context.

pub mod engine;
pub mod filter;
pub mod geometry;
pub mod harness;
pub mod synth;
pub mod vecstore;

pub use engine::{
    compute_weight, compute_weight_new, default_group, group_confidence, particle_weight,
    spawn_new_sense, Choice, ConfidenceReport, EngineError, Evidence, Role, Session, SessionConfig,
    SessionSnapshot, SnapshotParticle, Utterance, NEW_SENSE_GROUP,
};
pub use filter::{
    kalman_observe, kalman_predict, normalize_weights, systematic_resample, InterpretationDomain,
    Particle, SenseGaussian,
};
pub use geometry::{
    angle_diff, gaussian_noise, kl_divergence, mahalanobis, to_nsphere, AngleVector,
    DiagonalGaussian,
};
pub use harness::{
    aggregate, classify_choice, run_all, run_case, Metrics, Mode, ReplayCase, RunResult, Task,
};
pub use synth::{generate_synthetic, SynthCorpus, SynthSpec};
pub use vecstore::{load_sense_inventory, load_vectors, Sense, SenseInventory, VectorStore};
