use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use mmlora_core::checkpoint;
use mmlora_core::harness::{self, emit_report, ExperimentConfig, Format, RunReport};
use mmlora_core::Error;

/// Seeded multi-modal LoRA experiments on synthetic data.
///
/// Any `--dotted.path value` flag (e.g. `--mmlora.rank 4`, `--seeds [0,1]`)
/// overrides the matching config field. Reports land in `$MMLORA_OUTPUT_ROOT/<name>/`.
#[derive(Debug, Parser)]
#[command(name = "mmlora", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the configured pipelines for every seed.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// MMLoRA at several adapter ranks on shared unimodal checkpoints.
    RankSweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,64")]
        ranks: Vec<usize>,
    },
    /// Modality-selection, unimodal-stage and placement ablations.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print a checkpoint's header and tensor table.
    Inspect { checkpoint: PathBuf },
    /// Fold an MMLoRA checkpoint's adapters into plain weights.
    ExportMerged { input: PathBuf, output: PathBuf },
}

/// Top-level config keys, which may be overridden without a dot.
fn config_fields() -> Vec<String> {
    match serde_json::to_value(ExperimentConfig::default()) {
        Ok(serde_json::Value::Object(map)) => map.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// Pulls `--a.b value` and `--a.b=value` pairs, plus top-level `--field value`
/// pairs, out of the raw arguments.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), Error> {
    let fields = config_fields();
    let is_override = |key: &str| key.contains('.') || fields.iter().any(|f| f == key);
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--").filter(|f| f.split('=').next().is_some_and(is_override)) else {
            rest.push(arg);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let value = it
                    .next()
                    .ok_or_else(|| Error::config(flag, "override flag needs a value"))?;
                overrides.push((flag.to_string(), value));
            }
        }
    }
    Ok((rest, overrides))
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig, Error> {
    let base = match path {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io { .. } => Error::config("--config", e.to_string()),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    let config = base.with_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    config.validate()?;
    Ok(config)
}

fn emit(report: &RunReport, stem: &str) -> Result<(), Error> {
    for path in emit_report(report, &report.run_dir, stem, &Format::ALL)? {
        println!("wrote {}", path.display());
    }
    print!("{}", report.to_markdown());
    Ok(())
}

fn execute(command: Command, overrides: &[(String, String)]) -> Result<(), Error> {
    let no_overrides = |name: &str| {
        if overrides.is_empty() {
            Ok(())
        } else {
            Err(Error::config(&overrides[0].0, format!("`{name}` takes no config overrides")))
        }
    };
    match command {
        Command::Run { config } => {
            let config = load_config(config.as_deref(), overrides)?;
            emit(&harness::run(&config)?, "results")
        }
        Command::RankSweep { config, ranks } => {
            let config = load_config(config.as_deref(), overrides)?;
            emit(&harness::rank_sweep(&config, &ranks)?, "rank_sweep")
        }
        Command::Ablate { config } => {
            let config = load_config(config.as_deref(), overrides)?;
            emit(&harness::ablation_suite(&config)?, "ablation")
        }
        Command::Inspect { checkpoint: path } => {
            no_overrides("inspect")?;
            print!("{}", checkpoint::inspect_file(&path)?);
            Ok(())
        }
        Command::ExportMerged { input, output } => {
            no_overrides("export-merged")?;
            let bundle = checkpoint::load(&input)?;
            checkpoint::export_merged(&bundle, &output)?;
            println!("wrote {}", output.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(split) => split,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_config() => {
            error!("{e}");
            ExitCode::from(1)
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(2)
        }
    }
}
