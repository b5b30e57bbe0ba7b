use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ccdo::experiments::{
    load_config, run_single, run_study, write_atomic, ConfigError, ExperimentConfig, HarnessError,
};
use ccdo::graph::validate_weights;
use ccdo::problem::kkt_oracle;

#[derive(Parser)]
#[command(name = "ccdo", version, about = "Distributed resource allocation with compressed messages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one trace and write it as CSV plus a JSON sidecar.
    Run(Common),
    /// Run the study named in the config's sweep section.
    Sweep(Common),
    /// Print the step-size hypothesis report.
    Validate(Common),
    /// Print the exact optimum as CSV.
    Oracle(Common),
    /// Print the mixing matrix and its validation report.
    Weights(Common),
}

#[derive(Args)]
struct Common {
    config: PathBuf,
    /// Seed for `run`; replaces the seed list for `sweep`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    skip_validation: bool,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_IO: u8 = 3;

fn load(args: &Common) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(n) = args.iterations {
        cfg.algorithm.iterations = n;
    }
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = dir.clone();
    }
    if args.skip_validation {
        cfg.algorithm.skip_validation = true;
    }
    cfg.check()?;
    Ok(cfg)
}

fn harness_exit(err: &HarnessError) -> u8 {
    match err {
        HarnessError::Config(ConfigError::Io(_)) | HarnessError::Io(_) => EXIT_IO,
        HarnessError::Config(_) => EXIT_CONFIG,
        HarnessError::Engine(_) | HarnessError::Invariant(_) => EXIT_DIVERGED,
    }
}

fn fail(err: impl std::fmt::Display, code: u8) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args = match &cli.command {
        Command::Run(a)
        | Command::Sweep(a)
        | Command::Validate(a)
        | Command::Oracle(a)
        | Command::Weights(a) => a,
    };
    let mut cfg = match load(args) {
        Ok(c) => c,
        Err(e @ ConfigError::Io(_)) => return fail(e, EXIT_IO),
        Err(e) => return fail(e, EXIT_CONFIG),
    };

    match &cli.command {
        Command::Run(_) => {
            let seed = args.seed.unwrap_or(cfg.seeds[0]);
            match run_single(&cfg, seed) {
                Ok(run) => {
                    let last = run.trace.last().copied();
                    println!("wrote {} ({} rows)", run.csv_path.display(), run.trace.len());
                    if let Some(r) = last {
                        println!(
                            "final: residual {:e}  constraint violation {:e}  bits {}",
                            r.residual, r.constraint_violation, r.bits_cumulative
                        );
                    }
                    if let Some(k) = run.diverged_at {
                        return fail(format!("diverged at round {k}; partial trace written"), EXIT_DIVERGED);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e, harness_exit(&e)),
            }
        }
        Command::Sweep(_) => {
            if let Some(seed) = args.seed {
                cfg.seeds = vec![seed];
            }
            match run_study(&cfg) {
                Ok(result) => {
                    println!("wrote {}", result.index_path().display());
                    for row in &result.summary {
                        println!(
                            "{:<20} mean final residual {:e}  mean constraint violation {:e}",
                            row.label, row.mean_final_residual, row.mean_final_constraint_violation
                        );
                    }
                    let diverged = result.entries.iter().filter(|e| e.diverged_at.is_some()).count();
                    if diverged > 0 {
                        eprintln!("warning: {diverged} runs diverged; see diverged_at in the index");
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e, harness_exit(&e)),
            }
        }
        Command::Validate(_) => match cfg.build() {
            Ok(inst) => {
                println!("{}", inst.simulation().validate());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e, EXIT_CONFIG),
        },
        Command::Oracle(_) => {
            let inst = match cfg.build() {
                Ok(i) => i,
                Err(e) => return fail(e, EXIT_CONFIG),
            };
            let sol = match kkt_oracle(&inst.spec) {
                Ok(s) => s,
                Err(e) => return fail(e, EXIT_CONFIG),
            };
            let mut out = String::from("row,component,value\n");
            for (i, z) in sol.z_star.iter().enumerate() {
                for (c, v) in z.iter().enumerate() {
                    let _ = writeln!(out, "{i},{c},{v:?}");
                }
            }
            for (c, v) in sol.lambda_star.iter().enumerate() {
                let _ = writeln!(out, "lambda,{c},{v:?}");
            }
            print!("{out}");
            if args.output_dir.is_some() {
                if let Err(e) = write_atomic(&cfg.output_dir.join("oracle.csv"), out.as_bytes()) {
                    return fail(e, EXIT_IO);
                }
            }
            ExitCode::SUCCESS
        }
        Command::Weights(_) => match cfg.build() {
            Ok(inst) => {
                print!("{}", inst.weights.to_csv());
                println!("{}", validate_weights(inst.weights.entries()));
                ExitCode::SUCCESS
            }
            Err(e) => fail(e, EXIT_CONFIG),
        },
    }
}
