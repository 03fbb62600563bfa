mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{
    DatasetGenArgs, GeometryEvalArgs, GeometryShowArgs, McEvalArgs, ShellOptimizeArgs, SolveArgs,
};

/// Observability analysis, sensor placement and pose estimation for
/// magnetometer arrays tracking a permanent magnet.
///
/// Lengths are in meters, fields in µT, the magnet constant B_T in µT·m³.
/// Reported bounds and errors are in mm and degrees.
#[derive(Debug, Parser)]
#[command(name = "magfim", version)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores). Results do
    /// not depend on it.
    #[arg(long, global = true, env = "MAGFIM_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Benchmark layouts.
    #[command(subcommand)]
    Geometry(GeometryCommand),
    /// Sensor placement on a cubic shell.
    #[command(subcommand)]
    Shell(ShellCommand),
    /// Synthetic measurement datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Recover the pose of one dataset record with Levenberg–Marquardt.
    Solve(SolveArgs),
    /// Monte-Carlo evaluation of the solver.
    #[command(subcommand)]
    Mc(McCommand),
}

#[derive(Debug, Subcommand)]
enum GeometryCommand {
    /// CRLB sweep of one or more layouts over the workspace.
    Eval(GeometryEvalArgs),
    /// Print a layout and optionally write it as JSON.
    Show(GeometryShowArgs),
}

#[derive(Debug, Subcommand)]
enum ShellCommand {
    /// Greedy selection plus continuous refinement of sensor sites.
    Optimize(ShellOptimizeArgs),
}

#[derive(Debug, Subcommand)]
enum DatasetCommand {
    /// Generate a clipped, noisy dataset over the workspace.
    Gen(DatasetGenArgs),
}

#[derive(Debug, Subcommand)]
enum McCommand {
    /// Error statistics over random poses, or per height with --profile-z.
    Eval(McEvalArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot build thread pool: {e}");
            return ExitCode::from(4);
        }
    }
    let result = match cli.command {
        Command::Geometry(GeometryCommand::Eval(a)) => commands::geometry_eval(a),
        Command::Geometry(GeometryCommand::Show(a)) => commands::geometry_show(a),
        Command::Shell(ShellCommand::Optimize(a)) => commands::shell_optimize(a),
        Command::Dataset(DatasetCommand::Gen(a)) => commands::dataset_gen(a),
        Command::Solve(a) => commands::solve(a),
        Command::Mc(McCommand::Eval(a)) => commands::mc_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
