use clap::{Args, Parser, Subcommand};
use lsh_core::config::{apply_overrides, RunConfig, OUTPUT_ROOT_ENV};
use lsh_core::{pipeline, rundir, Error};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_INCOMPLETE: u8 = 3;

#[derive(Parser)]
#[command(name = "lsh", version, about = "Spectrum-guided search over sparse recurrent language models")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense reference model.
    DenseTrain(RunArgs),
    /// Compute the Lyapunov spectrum of a checkpoint.
    Ls {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Spectrum CSV to write (default: <output>/spectrum.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the candidate search.
    Search(RunArgs),
    /// Emit trajectory and budget tables for a finished run directory.
    Report {
        run_dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Built-in profile: desk, desk-rhn, paper, paper-rhn.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// JSON config file; replaces the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set search.final_k=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (default: $LSH_OUTPUT_ROOT/<command>-seed<seed>).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// ls_distance or val_loss.
    #[arg(long)]
    criterion: Option<String>,
    /// tpe, random or grid.
    #[arg(long)]
    sampler: Option<String>,
    /// Death rate for the grid sampler.
    #[arg(long)]
    death_rate: Option<f64>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> lsh_core::Result<RunConfig> {
        let mut value = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::profile(&self.profile)?.to_value(),
        };
        let mut sets = self.overrides.clone();
        let mut mirror = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                sets.push(format!("{key}={v}"));
            }
        };
        mirror("seed", self.seed.map(|v| v.to_string()));
        mirror("corpus.path", self.corpus.as_ref().map(|p| serde_json::to_string(p).expect("path")));
        mirror("search.criterion", self.criterion.clone());
        mirror("search.sampler", self.sampler.clone());
        mirror("search.grid_death_rate", self.death_rate.map(|v| v.to_string()));
        if let Some(n) = self.pool_size {
            mirror("search.pool_size", Some(n.to_string()));
            mirror("search.budget_tier", Some("null".into()));
        }
        mirror("search.workers", self.workers.map(|v| v.to_string()));
        apply_overrides(&mut value, &sets)?;
        RunConfig::from_value(value)
    }

    fn output_dir(&self, cfg: &RunConfig, command: &str) -> PathBuf {
        if let Some(p) = &self.output {
            return p.clone();
        }
        if let Some(p) = &cfg.output_dir {
            return p.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(format!("{command}-seed{}", cfg.seed))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::IncompleteArtifact { .. } => EXIT_INCOMPLETE,
        _ => EXIT_RUNTIME,
    }
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: Cli) -> lsh_core::Result<u8> {
    match cli.command {
        Command::DenseTrain(args) => {
            let cfg = args.resolve()?;
            let dir = args.output_dir(&cfg, "dense");
            let summary = pipeline::run_dense(&cfg, &dir)?;
            print_json(&summary);
            Ok(0)
        }
        Command::Ls { run, checkpoint, out } => {
            let cfg = run.resolve()?;
            let csv = match out {
                Some(p) => p,
                None => {
                    let dir = run.output_dir(&cfg, "ls");
                    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
                    dir.join("spectrum.csv")
                }
            };
            let s = pipeline::run_ls(&cfg, &checkpoint, &csv)?;
            print_json(&lsh_core::lyapunov::spectrum_stats(&s.exponents)?);
            Ok(0)
        }
        Command::Search(args) => {
            let cfg = args.resolve()?;
            let dir = args.output_dir(&cfg, "search");
            let outcome = pipeline::run_search(&cfg, &dir)?;
            match &outcome.report.best {
                Some(best) => {
                    print_json(best);
                    Ok(0)
                }
                None => {
                    eprintln!("error: every candidate failed; no best candidate in {}", dir.display());
                    Ok(EXIT_RUNTIME)
                }
            }
        }
        Command::Report { run_dir } => {
            print_json(&rundir::emit_report(Path::new(&run_dir))?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
