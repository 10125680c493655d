//! File-based subcommands: replay, sweep and synth.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use senseslam::harness::{load_cases, sweep, Grid, SweepPoint, DEFAULT_MAX_TURNS};
use senseslam::{
    aggregate, generate_synthetic, load_sense_inventory, load_vectors, run_all, Metrics, Mode,
    RunResult, SenseInventory, SessionConfig, SynthSpec,
};
use serde::de::DeserializeOwned;

/// Reads a JSON document.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Loads a session config whose fields mirror `SessionConfig`; omitted
/// fields take their defaults.
pub fn load_config(path: Option<&Path>) -> Result<Option<SessionConfig>> {
    let Some(path) = path else { return Ok(None) };
    let cfg: SessionConfig = read_json(path)?;
    cfg.validate()
        .with_context(|| format!("invalid config {}", path.display()))?;
    Ok(Some(cfg))
}

/// Loads embeddings and, if given, an inventory listing; without one every
/// `base#sense` row of the embeddings file becomes a sense.
pub fn load_inventory(embeddings: &Path, inventory: Option<&Path>) -> Result<SenseInventory> {
    let store =
        load_vectors(embeddings).with_context(|| format!("loading {}", embeddings.display()))?;
    match inventory {
        Some(path) => load_sense_inventory(path, &store)
            .with_context(|| format!("loading {}", path.display())),
        None => Ok(SenseInventory::from_store(&store)),
    }
}

/// Config for a run: the file's if given, else defaults sized to the
/// inventory.
fn resolve_config(cfg: Option<SessionConfig>, inventory: &SenseInventory) -> SessionConfig {
    cfg.unwrap_or_else(|| SessionConfig {
        dim: inventory.dim(),
        ..SessionConfig::default()
    })
}

pub struct ReplayArgs {
    pub cases: PathBuf,
    pub embeddings: PathBuf,
    pub inventory: Option<PathBuf>,
    pub mode: Mode,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub max_turns: usize,
}

/// Replays every case and writes `metrics.json`, `confidence.csv` and
/// `results.jsonl` into the output directory.
pub fn replay(args: &ReplayArgs) -> Result<Metrics> {
    let inventory = Arc::new(load_inventory(&args.embeddings, args.inventory.as_deref())?);
    let cfg = resolve_config(load_config(args.config.as_deref())?, &inventory);
    let cases = load_cases(&args.cases)?;
    let results = run_all(&cases, &inventory, &cfg, args.mode, args.max_turns)?;
    let metrics = aggregate(&results)?;
    write_replay(&args.out, &metrics, &results)?;
    Ok(metrics)
}

fn write_replay(out: &Path, metrics: &Metrics, results: &[RunResult]) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut lines = String::new();
    for r in results {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    for (name, body) in [
        (
            "metrics.json",
            serde_json::to_string_pretty(metrics)? + "\n",
        ),
        ("confidence.csv", metrics.to_csv()),
        ("results.jsonl", lines),
    ] {
        let path = out.join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub struct SweepArgs {
    pub cases: PathBuf,
    pub embeddings: PathBuf,
    pub inventory: Option<PathBuf>,
    pub grid: PathBuf,
    pub mode: Mode,
    pub config: Option<PathBuf>,
    pub max_turns: usize,
}

/// Grid search; best point first.
pub fn run_sweep(args: &SweepArgs) -> Result<Vec<SweepPoint>> {
    let inventory = Arc::new(load_inventory(&args.embeddings, args.inventory.as_deref())?);
    let base = resolve_config(load_config(args.config.as_deref())?, &inventory);
    let grid: Grid = read_json(&args.grid)?;
    let cases = load_cases(&args.cases)?;
    Ok(sweep(
        &cases,
        &inventory,
        &base,
        &grid,
        args.mode,
        args.max_turns,
    )?)
}

/// Writes a synthetic corpus (`embeddings.txt`, `inventory.txt`,
/// `cases.jsonl`) into `out`.
pub fn synth(spec: Option<&Path>, out: &Path) -> Result<SynthSpec> {
    let spec: SynthSpec = match spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    let corpus = generate_synthetic(&spec)?;
    corpus.write(out)?;
    Ok(spec)
}

/// Default turn cap used by the file commands.
pub const MAX_TURNS: usize = DEFAULT_MAX_TURNS;
