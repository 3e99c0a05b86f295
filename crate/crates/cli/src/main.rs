use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cfw::fairmetrics::{fairness_report, off_diagonal_cells, EoEmptyCellPolicy};
use cfw::matops::InvSqrtMethod;
use cfw::pipeline::{execute_run, load_predictions_csv, OneOrMany, PipelineError, RunConfig};
use cfw::synthdata::{generate, write_dataset, SynthSpec};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cfw", version, about = "Controllable feature whitening experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/test CSV plus a JSON sidecar).
    Generate {
        /// SynthSpec JSON; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the SynthSpec seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "data")]
        stem: String,
    },
    /// Run an experiment from a RunConfig JSON file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; falls back to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid given by shorthand flags on top of an optional base config.
    Sweep(SweepArgs),
    /// Compute a fairness report from a predictions CSV with columns y_hat,y,b.
    Metrics {
        #[arg(long)]
        predictions: PathBuf,
        /// Conflicting cells as `y:b` pairs; defaults to y ≠ b.
        #[arg(long, value_delimiter = ',', value_parser = parse_cell)]
        conflicting: Vec<(usize, usize)>,
        #[arg(long)]
        n_classes: Option<usize>,
        #[arg(long)]
        n_bias: Option<usize>,
        /// Skip classes with an empty (y, b) cell in ΔEO instead of failing.
        #[arg(long)]
        skip_empty_eo: bool,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    method: Vec<InvSqrtMethod>,
    #[arg(long = "T", value_delimiter = ',')]
    iterations: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    lw: Vec<bool>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_cell(s: &str) -> Result<(usize, usize), String> {
    let (y, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected y:b, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(y)?, num(b)?))
}

fn read_to_string(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    fs::write(path, contents).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn load_config(path: &Path) -> Result<RunConfig, PipelineError> {
    RunConfig::from_json(&read_to_string(path)?)
}

fn many<T>(v: Vec<T>) -> Option<OneOrMany<T>> {
    (!v.is_empty()).then_some(OneOrMany::Many(v))
}

fn sweep_config(args: SweepArgs) -> Result<(RunConfig, Option<PathBuf>), PipelineError> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = many(args.lambda) {
        cfg.lambda = v;
    }
    if let Some(v) = many(args.method) {
        cfg.method = v;
    }
    if let Some(v) = many(args.iterations) {
        cfg.iterations = v;
    }
    if let Some(v) = many(args.lw) {
        cfg.lw_enabled = v;
    }
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds;
    }
    if let Some(id) = args.run_id {
        cfg.run_id = id;
    }
    cfg.validate()?;
    Ok((cfg, args.out))
}

fn run_and_report(cfg: &RunConfig, out: Option<&Path>) -> Result<(), PipelineError> {
    let (_, files) = execute_run(cfg, out)?;
    eprintln!(
        "{} arms x {} seeds -> {}, {}",
        cfg.arms().len(),
        cfg.seeds.len(),
        files.report_json.display(),
        files.report_csv.display()
    );
    Ok(())
}

fn dispatch(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Generate {
            spec,
            seed,
            out,
            stem,
        } => {
            let mut spec: SynthSpec = match spec {
                Some(p) => serde_json::from_str(&read_to_string(&p)?)
                    .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?,
                None => SynthSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let ds = generate(&spec)?;
            let (train, test) = write_dataset(&ds, &out, &stem)?;
            eprintln!("wrote {} and {}", train.display(), test.display());
            Ok(())
        }
        Command::Run { config, out } => run_and_report(&load_config(&config)?, out.as_deref()),
        Command::Sweep(args) => {
            let (cfg, out) = sweep_config(args)?;
            run_and_report(&cfg, out.as_deref())
        }
        Command::Metrics {
            predictions,
            conflicting,
            n_classes,
            n_bias,
            skip_empty_eo,
            out,
        } => {
            let records = load_predictions_csv(&predictions, n_classes, n_bias)?;
            let set = if conflicting.is_empty() {
                if records.n_classes() != records.n_bias() {
                    return Err(PipelineError::Config(
                        "--conflicting is required when n_classes differs from n_bias".into(),
                    ));
                }
                off_diagonal_cells(records.n_classes(), records.n_bias())
            } else {
                conflicting
            };
            let policy = if skip_empty_eo {
                EoEmptyCellPolicy::SkipClass
            } else {
                EoEmptyCellPolicy::Error
            };
            let report = fairness_report(&records, &set, policy)?;
            let mut json = serde_json::to_string_pretty(&report).expect("plain data serializes");
            json.push('\n');
            match out {
                Some(p) => write_file(&p, &json),
                None => {
                    print!("{json}");
                    Ok(())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
