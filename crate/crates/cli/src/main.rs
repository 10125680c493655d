use std::fs;
use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use senseslam::{Mode, Session, SessionConfig};
use senseslam_cli::commands::{self, ReplayArgs, SweepArgs, MAX_TURNS};
use senseslam_cli::{interactive, schemas, service};

#[derive(Parser)]
#[command(version, about = "Online word-sense and context tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay recorded cases and write metrics, a per-turn CSV and per-case results.
    Replay {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long, default_value = "full")]
        mode: Mode,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        inventory: Option<PathBuf>,
        #[arg(long, default_value_t = MAX_TURNS)]
        max_turns: usize,
    },
    /// Grid search over config fields; prints points best first as JSON.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        inventory: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        mode: Mode,
        #[arg(long, default_value_t = MAX_TURNS)]
        max_turns: usize,
    },
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        inventory: Option<PathBuf>,
        /// Base config for new sessions.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Chat in the terminal; prefix lines with `me:` or `them:`.
    Session {
        #[arg(long, required = true)]
        interactive: bool,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        inventory: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Labels to track.
        #[arg(long = "target", required = true)]
        targets: Vec<String>,
    },
    /// Write the published request and response schemas.
    Schema {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Replay {
            cases,
            mode,
            config,
            out,
            embeddings,
            inventory,
            max_turns,
        } => {
            let metrics = commands::replay(&ReplayArgs {
                cases,
                embeddings,
                inventory,
                mode,
                config,
                out: out.clone(),
                max_turns,
            })?;
            println!(
                "{mode}: {} cases, accuracy {:.3}, mean final confidence {:.3} → {}",
                metrics.cases,
                metrics.accuracy,
                metrics.mean_final_confidence,
                out.display()
            );
        }
        Command::Sweep {
            grid,
            cases,
            embeddings,
            inventory,
            config,
            mode,
            max_turns,
        } => {
            let points = commands::run_sweep(&SweepArgs {
                cases,
                embeddings,
                inventory,
                grid,
                mode,
                config,
                max_turns,
            })?;
            println!("{}", serde_json::to_string_pretty(&points)?);
        }
        Command::Synth { spec, out } => {
            let spec = commands::synth(spec.as_deref(), &out)?;
            println!(
                "{} cases (seed {}) → {}",
                spec.n_cases,
                spec.seed,
                out.display()
            );
        }
        Command::Serve {
            embeddings,
            inventory,
            config,
            host,
            port,
        } => {
            let inv = commands::load_inventory(&embeddings, inventory.as_deref())?;
            let cfg = commands::load_config(config.as_deref())?;
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad host/port")?;
            let app = Arc::new(service::AppState::single(inv, cfg));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                service::serve(listener, app).await
            })?;
        }
        Command::Session {
            interactive: _,
            embeddings,
            inventory,
            config,
            targets,
        } => {
            let inv = Arc::new(commands::load_inventory(&embeddings, inventory.as_deref())?);
            let cfg = commands::load_config(config.as_deref())?.unwrap_or_else(|| SessionConfig {
                dim: inv.dim(),
                ..SessionConfig::default()
            });
            let mut session = Session::new(cfg, inv, &targets)?;
            eprintln!(
                "tracking {}; prefix lines with `me:` or `them:`",
                targets.join(", ")
            );
            interactive::run(&mut session, io::stdin().lock(), io::stdout().lock())?;
        }
        Command::Schema { out } => {
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let all = schemas();
            for (name, schema) in &all {
                let path = out.join(name);
                fs::write(&path, serde_json::to_string_pretty(schema)? + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            println!("{} schemas → {}", all.len(), out.display());
        }
    }
    Ok(())
}
