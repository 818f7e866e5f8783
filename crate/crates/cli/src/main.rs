//! `ssplab` — one executable for the whole lab bench: training, attacks,
//! growth-ratio and variance measurements, shock-wave integration, and a
//! gradient audit. Every run logs its resolved settings and writes CSV.

mod commands;
mod config;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "ssplab",
    about = "Residual networks with stability-preserving stage arithmetic",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a network from a config file; writes metrics.csv and model.ckpt.
    Train(commands::TrainArgs),
    /// Run the one-shot or iterated sign attack against a checkpoint.
    Attack(commands::AttackArgs),
    /// Measure per-group perturbation growth ratios of a checkpoint.
    Pgr(commands::PgrArgs),
    /// Estimate block variance inflation on white noise.
    Variance(commands::VarianceArgs),
    /// Integrate the periodic inviscid shock test problem.
    Burgers(commands::BurgersArgs),
    /// Audit reverse-mode gradients against finite differences.
    Gradcheck(commands::GradcheckArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Train(a) => commands::run_train(a),
        Cmd::Attack(a) => commands::run_attack(a),
        Cmd::Pgr(a) => commands::run_pgr(a),
        Cmd::Variance(a) => commands::run_variance(a),
        Cmd::Burgers(a) => commands::run_burgers(a),
        Cmd::Gradcheck(a) => commands::run_gradcheck(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
