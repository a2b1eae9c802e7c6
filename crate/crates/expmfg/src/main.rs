use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use expmfg::assumptions::NormMode;
use expmfg::cli::{self, Command, MfgMode, RunOptions};

#[derive(Parser)]
#[command(name = "expmfg", version, about = "Exponential-utility investment games under relative performance concerns")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args)]
struct CommonFlags {
    /// Game config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for CSV/JSON reports and the manifest.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Common-noise blocks.
    #[arg(long, default_value_t = 256)]
    blocks: usize,
    /// Idiosyncratic copies per block.
    #[arg(long, default_value_t = 64)]
    copies: usize,
    /// Total path budget (overrides blocks x copies where applicable).
    #[arg(long)]
    paths: Option<usize>,
    /// Override the config's grid size.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Solver tolerance.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Norm proxies for smallness checks: analytic or empirical.
    #[arg(long, default_value = "analytic")]
    norm_mode: String,
    /// A-priori bound parameter R.
    #[arg(long, default_value_t = 1.0)]
    r_bound: f64,
}

#[derive(Subcommand)]
enum Sub {
    /// Exact equilibria for deterministic-in-(t, type) returns.
    ClosedForm(CommonFlags),
    /// Full constructive pipeline for the N-player game.
    SolveNplayer(CommonFlags),
    /// Mean-field solvers.
    SolveMfg {
        #[command(flatten)]
        flags: CommonFlags,
        /// common | independent | march
        #[arg(long, default_value = "common")]
        mode: String,
        /// Sub-interval length for marching.
        #[arg(long, default_value_t = 0.25)]
        delta: f64,
    },
    /// Monte-Carlo deviation test and value-process drift check.
    VerifyNash {
        #[command(flatten)]
        flags: CommonFlags,
        /// Player under test.
        #[arg(long, default_value_t = 0)]
        player: usize,
        /// Stderr multiple for the verdict thresholds.
        #[arg(long, default_value_t = 3.0)]
        sigma: f64,
    },
    /// Population-size convergence study.
    Converge {
        #[command(flatten)]
        flags: CommonFlags,
        /// Population sizes, e.g. --n-schedule 4,8,16,32.
        #[arg(long, value_delimiter = ',')]
        n_schedule: Option<Vec<usize>>,
        /// Type-draw replications per population size (overrides the config).
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Evaluate every sufficient smallness condition.
    CheckAssumptions(CommonFlags),
}

fn to_options(flags: &CommonFlags) -> Result<RunOptions, String> {
    let mut opts = RunOptions::new(flags.config.clone(), flags.out_dir.clone());
    opts.blocks = flags.blocks;
    opts.copies = flags.copies;
    opts.paths = flags.paths;
    opts.steps = flags.steps;
    opts.seed = flags.seed;
    opts.tol = flags.tol;
    opts.r_bound = flags.r_bound;
    opts.norm_mode = match flags.norm_mode.as_str() {
        "analytic" => NormMode::Analytic,
        "empirical" => NormMode::Empirical,
        other => return Err(format!("unknown norm mode {other:?}")),
    };
    Ok(opts)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::InvalidSubcommand | ErrorKind::UnknownArgument => 64,
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    return ExitCode::SUCCESS;
                }
                _ => 64,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let (command, opts) = match &cli.command {
        Sub::ClosedForm(flags) => (Command::ClosedForm, to_options(flags)),
        Sub::SolveNplayer(flags) => (Command::SolveNplayer, to_options(flags)),
        Sub::SolveMfg { flags, mode, delta } => {
            let opts = to_options(flags).and_then(|mut o| {
                o.delta = *delta;
                o.mfg_mode = match mode.as_str() {
                    "common" => MfgMode::Common,
                    "independent" => MfgMode::Independent,
                    "march" => MfgMode::March,
                    other => return Err(format!("unknown mfg mode {other:?}")),
                };
                Ok(o)
            });
            (Command::SolveMfg, opts)
        }
        Sub::VerifyNash { flags, player, sigma } => {
            let opts = to_options(flags).map(|mut o| {
                o.player = *player;
                o.sigma = *sigma;
                o
            });
            (Command::VerifyNash, opts)
        }
        Sub::Converge { flags, n_schedule, replications } => {
            let opts = to_options(flags).map(|mut o| {
                o.n_schedule = n_schedule.clone();
                o.replications = *replications;
                o
            });
            (Command::Converge, opts)
        }
        Sub::CheckAssumptions(flags) => (Command::CheckAssumptions, to_options(flags)),
    };

    let opts = match opts {
        Ok(o) => o,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(64);
        }
    };

    match cli::run(command, &opts) {
        Ok(summary) => {
            println!(
                "{}: wrote {} file(s) to {}",
                summary.manifest.command,
                summary.manifest.outputs.len() + 1,
                opts.out_dir.display()
            );
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(cli::exit_code_for(&err) as u8)
        }
    }
}
