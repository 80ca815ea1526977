//! `dualarm`: train, evaluate, track, demo pose estimation and build report tables.

mod commands;
mod config;
mod error;
mod run_dir;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::Mode;

#[derive(Debug, Parser)]
#[command(name = "dualarm", version, about = "Free-floating dual-arm manipulator planning toolkit")]
struct Cli {
    /// Directory holding per-run output folders.
    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a goal-conditioned constrained policy.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run name; defaults to `<config stem>-<mode>-s<seed>`.
        #[arg(long)]
        name: Option<String>,
    },
    /// Evaluate a policy checkpoint on random goals.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: usize,
        /// Environment preset, when the checkpoint is outside a run directory.
        #[arg(long)]
        env: Option<String>,
        /// Also evaluate with the base mass scaled to 50 %, 75 %, 125 % and 150 %.
        #[arg(long)]
        mass_sweep: bool,
        /// Start from random joint angles around home.
        #[arg(long)]
        randomize_initial: bool,
        #[arg(long)]
        name: Option<String>,
    },
    /// Track the target points of a spinning object.
    Track {
        #[arg(long, allow_negative_numbers = true)]
        omega: f64,
        #[arg(long, allow_negative_numbers = true)]
        radius: f64,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scenario file; flags override its omega and radius.
        #[arg(long)]
        config: Option<PathBuf>,
        /// End-effector speed cap (m/s).
        #[arg(long)]
        speed_cap: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Encoder checkpoint; switches rotation estimates to the learned encoder.
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Estimate the rotation between two views of a noisy point cloud.
    PoseDemo {
        #[arg(long, default_value = "box")]
        shape: String,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        #[arg(long, default_value_t = 128)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative rotation angle of the pair (rad); random when absent.
        #[arg(long)]
        angle: Option<f64>,
        /// Encoder checkpoint to compare against registration.
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Train an encoder for this many steps first and save it with the run.
        #[arg(long)]
        train_steps: Option<usize>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Aggregate run summaries into a comparison table.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { error::exit::USAGE } else { error::exit::OK };
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Train { config, mode, seed, name } => commands::train(&cli.runs_dir, &config, mode, seed, name),
        Command::Eval {
            checkpoint,
            episodes,
            env,
            mass_sweep,
            randomize_initial,
            name,
        } => commands::eval(
            &cli.runs_dir,
            &checkpoint,
            episodes,
            env.as_deref(),
            mass_sweep,
            randomize_initial,
            name,
        ),
        Command::Track {
            omega,
            radius,
            checkpoint,
            config,
            speed_cap,
            steps,
            seed,
            encoder,
            name,
        } => commands::track(
            &cli.runs_dir,
            commands::TrackArgs {
                omega,
                radius,
                checkpoint,
                config,
                speed_cap,
                steps,
                seed,
                encoder,
                name,
            },
        ),
        Command::PoseDemo {
            shape,
            noise,
            points,
            seed,
            angle,
            encoder,
            train_steps,
            name,
        } => commands::pose_demo(
            &cli.runs_dir,
            commands::PoseArgs {
                shape,
                noise,
                points,
                seed,
                angle,
                encoder,
                train_steps,
                name,
            },
        ),
        Command::Report { input, out } => commands::report(&input, &out),
    };
    match result {
        Ok(()) => std::process::exit(error::exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
