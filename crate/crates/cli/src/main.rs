use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use compression::scene::Scene;
use compression_cli::{replay, run, Mode, RunOptions, EXIT_INPUT};

#[derive(Parser)]
#[command(name = "compress", version, about = "Straighten normal fields of sampled manifolds by flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a scene and write trace, manifest, report and frames.
    Run {
        /// Scene file, or the name of a builtin scene.
        scene: String,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        epsilon_budget: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        record_every: Option<usize>,
    },
    /// Re-verify a stored trace.
    Replay {
        trace: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List builtin scenes.
    Scenes,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            scene,
            mode,
            mu,
            epsilon_budget,
            seed,
            out,
            record_every,
        } => {
            let opts = RunOptions {
                scene,
                mode,
                mu,
                epsilon_budget,
                seed,
                record_every,
                out,
            };
            match run(&opts) {
                Ok(outcome) => {
                    let m = &outcome.manifest;
                    println!("{} ({:?}): {}", m.scene, m.mode, m.status);
                    if let Some(e) = &m.error {
                        eprintln!("{e}");
                    }
                    if let Some(r) = &m.report {
                        print!("{}", r.to_table());
                    }
                    if let Some(n) = m.double_points {
                        println!("double points of the projection: {n}");
                    }
                    outcome.exit_code
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
            }
        }
        Command::Replay { trace, out } => match replay(&trace, out.as_deref()) {
            Ok(outcome) => {
                print!("{}", outcome.report.to_table());
                outcome.exit_code
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_INPUT
            }
        },
        Command::Scenes => {
            for name in Scene::builtin_names() {
                println!("{name}");
            }
            0
        }
    };
    ExitCode::from(code as u8)
}
