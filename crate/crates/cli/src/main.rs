use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssept::evaluation::EvalSplit;
use ssept_cli::commands::{self, Axis, Baseline, EvalOptions};
use ssept_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "ssept", version, about = "Personalized transformer for sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.d_u=25`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Sequence cache (`paths.cache`).
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Output directory (`paths.output`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed (`seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint (`paths.checkpoint`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse an interaction log, print corpus statistics and write the sequence cache.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Interaction log (`data.path`).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Field delimiter: tab, ::, comma, or a literal string (`data.delimiter`).
        #[arg(long)]
        delimiter: Option<String>,
        /// Abort on the first malformed line (`data.strict`).
        #[arg(long)]
        strict: bool,
    },
    /// Train on the cached corpus and write the best-validation checkpoint.
    Train {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Score held-out items against sampled negatives.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        /// valid or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Candidate counts, one report each (default `eval.negatives`).
        #[arg(long, value_delimiter = ',')]
        negatives: Vec<usize>,
        /// Cutoff K (`eval.k`).
        #[arg(long)]
        k: Option<usize>,
        /// Evaluate a baseline instead of the checkpoint.
        #[arg(long)]
        baseline: Option<String>,
        /// Also write a per-user CSV next to each report.
        #[arg(long)]
        per_user: bool,
    },
    /// Write per-block attention matrices and the input items for one user.
    ExportAttention {
        #[command(flatten)]
        model: ModelArgs,
        /// Raw user id as it appears in the interaction log.
        #[arg(long)]
        user: String,
        /// Destination directory (default `<output>/attention_<user>`).
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Train and evaluate once per value of one hyperparameter axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// blocks, dims, sse_pu, sampling_prob or negatives (`ablate.axis`).
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values (`ablate.values`).
        #[arg(long)]
        values: Option<String>,
    },
    /// Top-K items for one user, scored against every item.
    Recommend {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        user: String,
        #[arg(long)]
        k: Option<usize>,
        /// Keep items the user already interacted with.
        #[arg(long)]
        include_history: bool,
    },
}

fn base_config(common: &Common, extra: &[(&str, Option<String>)]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    let flags = [
        ("paths.cache", common.cache.as_ref().map(|p| p.display().to_string())),
        ("paths.output", common.out.as_ref().map(|p| p.display().to_string())),
        ("seed", common.seed.map(|s| s.to_string())),
    ];
    for (key, value) in flags.iter().chain(extra) {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn model_config(args: &ModelArgs, extra: &[(&str, Option<String>)]) -> Result<RunConfig, CliError> {
    let mut all = vec![("paths.checkpoint", args.checkpoint.as_ref().map(|p| p.display().to_string()))];
    all.extend(extra.iter().cloned());
    base_config(&args.common, &all)
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Prepare {
            common,
            input,
            delimiter,
            strict,
        } => {
            let cfg = base_config(
                &common,
                &[
                    ("data.path", input.map(|p| p.display().to_string())),
                    ("data.delimiter", delimiter),
                    ("data.strict", strict.then(|| "true".to_string())),
                ],
            )?;
            commands::prepare(&cfg, out)
        }
        Command::Train { model } => commands::train_cmd(&model_config(&model, &[])?, out),
        Command::Evaluate {
            model,
            split,
            negatives,
            k,
            baseline,
            per_user,
        } => {
            let cfg = model_config(&model, &[("eval.k", k.map(|k| k.to_string()))])?;
            let split: EvalSplit = split.parse().map_err(|e: ssept::Error| CliError::Config(e.to_string()))?;
            let baseline = baseline
                .map(|b| b.parse::<Baseline>())
                .transpose()
                .map_err(CliError::Config)?;
            let opts = EvalOptions {
                split,
                negatives,
                baseline,
                per_user,
            };
            commands::evaluate_cmd(&cfg, &opts, out).map(|_| ())
        }
        Command::ExportAttention { model, user, dest } => {
            let cfg = model_config(&model, &[])?;
            let dir = dest.unwrap_or_else(|| cfg.output.join(format!("attention_{user}")));
            commands::export_attention(&cfg, &user, &dir, out).map(|_| ())
        }
        Command::Ablate { common, axis, values } => {
            let cfg = base_config(&common, &[("ablate.axis", axis), ("ablate.values", values)])?;
            let axis: Axis = cfg
                .ablate_axis
                .as_deref()
                .ok_or_else(|| CliError::Config("no ablation axis given (`--axis` or `ablate.axis`)".into()))?
                .parse()?;
            commands::ablate(&cfg, axis, &cfg.ablate_values, out).map(|_| ())
        }
        Command::Recommend {
            model,
            user,
            k,
            include_history,
        } => {
            let cfg = model_config(&model, &[])?;
            let k = k.unwrap_or(cfg.k);
            commands::recommend(&cfg, &user, k, include_history, out).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
