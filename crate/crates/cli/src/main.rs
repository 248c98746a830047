//! `popinv`: generate population data, run inference, run convergence
//! studies, self-check, and re-score finished runs.

mod commands;
mod plot;
mod summary;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use popinv::inference::GradientMode;

#[derive(Parser)]
#[command(name = "popinv", version, about = "Joint inference of parameter and noise distributions")]
struct Cli {
    /// Worker threads for forward-model batches and studies. `1` makes
    /// every run bitwise reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic population and write it as CSV plus metadata.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV (default: `<out_dir>/<experiment>.csv`, or `data/`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of rows, overriding `data.n`.
        #[arg(long)]
        n: Option<usize>,
        /// Experiment seed (falls back to the config, then `POPINV_SEED`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Learn (α, Γ) from a dataset.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Run directory (default: `<out_dir>/<experiment>-seed<seed>`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_mode)]
        gradient_mode: Option<GradientMode>,
        /// Also write SVG plots.
        #[arg(long)]
        plots: bool,
        /// Refused: finished runs are never modified.
        #[arg(long)]
        resume: bool,
    },
    /// Repeated runs over the configured (N, truth value) grid.
    Study {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV (default: `<out_dir>/<experiment>-study.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the fast invariant checks.
    Verify {
        /// Only checks whose name or category contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Recompute a run's relative errors from its trace and compare them
    /// with its summary.
    Score { run_dir: PathBuf },
}

fn parse_mode(s: &str) -> Result<GradientMode, String> {
    s.parse().map_err(|e: popinv::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(k) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k.max(1)).build_global() {
            eprintln!("error: cannot set up {k} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Generate { config, out, n, seed } => commands::generate(&config, out, n, seed),
        Command::Infer {
            config,
            data,
            out,
            seed,
            gradient_mode,
            plots,
            resume,
        } => commands::infer(&commands::InferArgs {
            config,
            data,
            out,
            seed,
            gradient_mode,
            plots,
            resume,
        }),
        Command::Study {
            config,
            out,
            repeats,
            seed,
        } => commands::study(&config, out, repeats, seed),
        Command::Verify { filter } => commands::verify(filter.as_deref()),
        Command::Score { run_dir } => commands::score(&run_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
