//! Command-line entry point: training, sampling, reconstruction,
//! evaluation, analysis, and the ablation matrix.

mod ablate;
mod commands;

use clap::{Parser, Subcommand};

use unite::UniteError;

#[derive(Parser)]
#[command(name = "unite", version, about = "Joint tokenization and latent flow-matching generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model until total_steps, writing metrics, checkpoints, and
    /// periodic sample grids into the run directory.
    Train(commands::TrainArgs),
    /// Generate latents and decoded images from a checkpoint (EMA weights).
    Sample(commands::SampleArgs),
    /// Tokenize and decode held-out or provided images; report per-image PSNR.
    Reconstruct(commands::ReconstructArgs),
    /// Alignment, trajectory, and entropy reports from a checkpoint.
    Analyze(commands::AnalyzeArgs),
    /// Reconstruction or generation metrics on probe features.
    Eval(commands::EvalArgs),
    /// Train the probe classifier used by the evaluator.
    TrainProbe(commands::TrainProbeArgs),
    /// Run an ablation matrix; one run directory per cell plus a comparison CSV.
    Ablate(ablate::AblateArgs),
    /// Internal: run a single ablation cell (spawned by `ablate --parallel`).
    #[command(hide = true)]
    AblateCell(ablate::AblateCellArgs),
}

fn exit_code(err: &UniteError) -> i32 {
    match err {
        UniteError::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::cmd_train(a),
        Command::Sample(a) => commands::cmd_sample(a),
        Command::Reconstruct(a) => commands::cmd_reconstruct(a),
        Command::Analyze(a) => commands::cmd_analyze(a),
        Command::Eval(a) => commands::cmd_eval(a),
        Command::TrainProbe(a) => commands::cmd_train_probe(a),
        Command::Ablate(a) => ablate::cmd_ablate(a),
        Command::AblateCell(a) => ablate::cmd_ablate_cell(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
