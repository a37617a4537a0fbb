//! `xpdnet`: dataset generation, training, evaluation, gradient checks and
//! visualisation from one binary.
//!
//! Exit status: 0 on success, 2 on invalid input, 3 when a check fails,
//! 1 for anything else (I/O, non-finite loss).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xpdnet_core::gradcheck::standard_suite;
use xpdnet_core::harness::config::RunConfig;
use xpdnet_core::harness::dataset::cmd_generate;
use xpdnet_core::harness::eval::cmd_eval;
use xpdnet_core::harness::train::cmd_train;
use xpdnet_core::harness::viz::cmd_visualize;
use xpdnet_core::scene_io::write_json;
use xpdnet_core::Error;

const EXIT_VALIDATION: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "xpdnet", version, about = "Plane segmentation and depth with cross-task distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// `dotted.path=value` overrides applied after the file, e.g.
    /// `net.variant=pad_net` or `epochs=2`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset to `dataset`.
    Generate(Common),
    /// Train on the dataset and evaluate the final model.
    Train(Common),
    /// Evaluate a checkpoint on the held-out scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Score the ground truth against itself instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Run the finite-difference gradient checks.
    Gradcheck(Common),
    /// Render overlays, depth, normals and boundary weights into `output_dir/viz`.
    Visualize {
        #[command(flatten)]
        common: Common,
        /// Scene indices to render.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        scenes: Vec<usize>,
        /// Also render this checkpoint's predictions.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn config(c: &Common) -> Result<RunConfig, Error> {
    RunConfig::load(c.config.as_deref(), &c.overrides)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = config(&c)?;
            let m = cmd_generate(&cfg)?;
            println!("{} scenes in {} (hash {})", m.scene_seeds.len(), cfg.dataset.display(), m.hash());
        }
        Command::Train(c) => {
            let cfg = config(&c)?;
            let out = cmd_train(&cfg)?;
            println!("{} steps; checkpoints in {}", out.steps, cfg.output_dir.display());
            print!("{}", out.report.table());
        }
        Command::Eval {
            common,
            checkpoint,
            oracle,
        } => {
            let cfg = config(&common)?;
            let report = cmd_eval(&cfg, checkpoint.as_deref(), oracle)?;
            print!("{}", report.table());
        }
        Command::Gradcheck(c) => {
            let cfg = config(&c)?;
            let reports = standard_suite()?;
            for r in &reports {
                println!(
                    "{:<28} {:>10.3e} < {:.0e}  {:>4} entries  {}",
                    r.name,
                    r.max_rel_err,
                    r.tolerance,
                    r.entries,
                    if r.passed { "PASS" } else { "FAIL" }
                );
            }
            std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::Io {
                path: cfg.output_dir.clone(),
                source: e,
            })?;
            write_json(&reports, &cfg.output_dir.join("gradcheck.json"))?;
            if reports.iter().any(|r| !r.passed) {
                return Ok(ExitCode::from(EXIT_CHECK));
            }
        }
        Command::Visualize {
            common,
            scenes,
            checkpoint,
        } => {
            let cfg = config(&common)?;
            for p in cmd_visualize(&cfg, &scenes, checkpoint.as_deref())? {
                println!("{}", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { 1 })
        }
    }
}
