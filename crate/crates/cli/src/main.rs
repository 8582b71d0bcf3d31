use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use psilora::tasks::{ExperimentResult, RunStatus};
use psilora_cli::config::{emit, label, ConfigSource};
use psilora_cli::{out_dir, run_grid, run_to_dir};

/// Run PSI-LoRA experiments on the desk-scale tasks.
#[derive(Parser)]
#[command(name = "psilora", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of one config.
    Run(RunArgs),
    /// Run the Cartesian product of the grid axes.
    Grid(GridArgs),
    /// Check a config and print it with defaults filled in.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct Source {
    /// TOML config file; every key is optional.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set eta=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
    /// Output directory.
    #[arg(long, env = "PSILORA_OUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    source: Source,
    /// Grid axis, e.g. `--vary eta=0.1,0.3,1.0`. Adds to the `[grid]` table.
    #[arg(long = "vary", value_name = "KEY=V1,V2,..")]
    vary: Vec<String>,
    #[arg(long, env = "PSILORA_OUT_DIR")]
    out: Option<PathBuf>,
    /// Grid points run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long = "vary", value_name = "KEY=V1,V2,..")]
    vary: Vec<String>,
}

const EXIT_RUN_FAILED: u8 = 1;
const EXIT_BAD_CONFIG: u8 = 2;

fn load(source: &Source, vary: &[String]) -> anyhow::Result<ConfigSource> {
    let mut s = ConfigSource::load(source.config.as_deref())?;
    for a in &source.sets {
        s.set(a)?;
    }
    for a in vary {
        s.vary(a)?;
    }
    Ok(s)
}

fn report(result: &ExperimentResult) {
    for t in &result.traces {
        match &t.status {
            RunStatus::Ok => {}
            RunStatus::Diverged { step } => eprintln!("seed {}: diverged at step {step}", t.seed),
            RunStatus::Failed { step, message } => eprintln!("seed {}: failed at step {step}: {message}", t.seed),
        }
    }
    let a = &result.aggregate;
    println!(
        "seeds {}  final loss {:.6e} ± {:.2e}  final eval {:.6e} ± {:.2e}",
        a.seeds, a.final_loss.mean, a.final_loss.std, a.final_eval.mean, a.final_eval.std
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let bad_config = |e: anyhow::Error| {
        eprintln!("error: {e:#}");
        ExitCode::from(EXIT_BAD_CONFIG)
    };
    match cli.command {
        Command::Validate(args) => {
            let source = match load(&args.source, &args.vary) {
                Ok(s) => s,
                Err(e) => return bad_config(e),
            };
            if source.grid.is_empty() {
                match source.resolve() {
                    Ok(c) => print!("{}", emit(&c)),
                    Err(e) => return bad_config(e.into()),
                }
            } else {
                match source.expand() {
                    Ok(points) => {
                        for p in &points {
                            println!("{}", label(&p.params));
                        }
                        println!("{} grid points", points.len());
                    }
                    Err(e) => return bad_config(e.into()),
                }
            }
            ExitCode::SUCCESS
        }
        Command::Run(args) => {
            let config = match load(&args.source, &[]).and_then(|s| {
                if !s.grid.is_empty() {
                    anyhow::bail!("config has a [grid] table; use the grid command");
                }
                Ok(s.resolve()?)
            }) {
                Ok(c) => c,
                Err(e) => return bad_config(e),
            };
            let dir = out_dir(args.out.as_deref(), &config);
            match run_to_dir(&config, &dir) {
                Ok(result) => {
                    report(&result);
                    eprintln!("wrote {}", dir.display());
                    if result.all_ok() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(EXIT_RUN_FAILED)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(EXIT_RUN_FAILED)
                }
            }
        }
        Command::Grid(args) => {
            let (source, points) = match load(&args.source, &args.vary).and_then(|s| {
                let p = s.expand()?;
                Ok((s, p))
            }) {
                Ok(v) => v,
                Err(e) => return bad_config(e),
            };
            let base = match source.resolve() {
                Ok(c) => c,
                Err(_) => points[0].config.clone(),
            };
            let dir = out_dir(args.out.as_deref(), &base);
            let outcomes = match run_grid(&points, &dir, args.jobs) {
                Ok(o) => o,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    return ExitCode::from(EXIT_RUN_FAILED);
                }
            };
            let mut all_ok = true;
            for (p, o) in points.iter().zip(&outcomes) {
                let status = match &o.result {
                    Ok(r) if r.all_ok() => format!("ok  final loss {:.6e}", r.aggregate.final_loss.mean),
                    Ok(_) => "diverged or failed".to_string(),
                    Err(e) => format!("error: {e:#}"),
                };
                all_ok &= o.ok();
                println!("{}  {}  {status}", o.dir.display(), label(&p.params));
            }
            if all_ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_RUN_FAILED)
            }
        }
    }
}
