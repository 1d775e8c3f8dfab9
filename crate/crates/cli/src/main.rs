use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use loadcast::config::RunConfig;
use loadcast::engine::{bench_update, run_rolling, run_synthetic_eval, EvalManifest};

#[derive(Parser)]
#[command(name = "loadcast", about = "Online multi-entity probabilistic load forecasting", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rolling-origin run over a CSV series
    Run {
        /// key=value config file
        #[arg(long)]
        config: PathBuf,
        /// load availability delay in hours (overrides config)
        #[arg(long)]
        delay: Option<usize>,
        /// covariance sparsification threshold (overrides config)
        #[arg(long)]
        tau: Option<f64>,
        /// comma-separated 1-based entity columns, e.g. 1,3
        #[arg(long)]
        entities_subset: Option<String>,
        /// model snapshot destination (overrides config)
        #[arg(long)]
        snapshot_out: Option<PathBuf>,
    },
    /// Self-evaluation on data generated from known parameters
    SynthEval {
        /// JSON manifest with dims, seed and generator settings
        #[arg(long)]
        manifest: PathBuf,
        /// write the report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Wall-time of learning and prediction steps across entity counts
    Bench {
        /// comma-separated entity counts, e.g. 2,4,8,16
        #[arg(long, default_value = "2,4,8,16")]
        dims: String,
        #[arg(long, default_value_t = 24)]
        horizon: usize,
        #[arg(long, default_value_t = 3)]
        r: usize,
        #[arg(long, default_value_t = 25)]
        reps: usize,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Prints to stdout, ignoring a closed pipe (e.g. `loadcast ... | head`).
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn run(cli: Cli) -> loadcast::Result<()> {
    match cli.command {
        Command::Run { config, delay, tau, entities_subset, snapshot_out } => {
            let mut overrides = BTreeMap::new();
            if let Some(d) = delay {
                overrides.insert("delay".to_string(), d.to_string());
            }
            if let Some(t) = tau {
                overrides.insert("tau".to_string(), t.to_string());
            }
            if let Some(s) = entities_subset {
                overrides.insert("entities_subset".to_string(), s);
            }
            if let Some(p) = snapshot_out {
                overrides.insert("snapshot_out".to_string(), p.display().to_string());
            }
            let cfg = RunConfig::load(&config, &overrides)?;
            let report = run_rolling(&cfg)?;
            emit(&serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::SynthEval { manifest, out } => {
            let m = EvalManifest::from_file(&manifest)?;
            let report = run_synthetic_eval(&m)?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => emit(&text),
            }
            Ok(())
        }
        Command::Bench { dims, horizon, r, reps } => {
            let ks = dims
                .split(',')
                .map(|tok| {
                    tok.trim().parse::<usize>().map_err(|_| {
                        loadcast::Error::InvalidParameter(format!("bad dim '{tok}'"))
                    })
                })
                .collect::<loadcast::Result<Vec<_>>>()?;
            let report = bench_update(&ks, horizon, r, reps)?;
            emit(&serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}
