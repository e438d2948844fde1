mod commands;
mod config;
mod error;
mod http;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use reclaim::corpus::{Language, SplitName};

use commands::{EvalArgs, RunFlags, StageArg};
use config::PipelineConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "reclaim",
    version,
    about = "Slur-reclamation detection with user-aware dual encoders"
)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override the split seed; for `train`, run only this seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_language)]
    language: Option<Language>,
    /// Use the offline keyword mock instead of the LLM endpoint.
    #[arg(long, global = true)]
    mock_llm: bool,
    /// Sequential annotation and seeds, so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Override any config value, e.g. `--set training.learning_rate=1e-5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a stratified train/validation/test manifest.
    Split,
    /// Collect LLM affiliation proxy labels.
    Annotate {
        /// Query again for instances whose cached reply was unusable.
        #[arg(long)]
        retry_unresolved: bool,
    },
    /// Train the baseline, user encoder and dual model for every seed.
    Train {
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Run seeds on parallel workers.
        #[arg(long)]
        parallel: bool,
    },
    /// Score stored predictions, optionally against another model or run.
    Eval {
        /// Run directory (defaults to paths.run_dir).
        #[arg(long)]
        run: Option<PathBuf>,
        /// `dual` or `baseline_text`.
        #[arg(long, default_value = "dual")]
        model: String,
        /// Run to compare against (defaults to the evaluated run).
        #[arg(long)]
        against: Option<PathBuf>,
        /// Model to compare against, e.g. `baseline_text`.
        #[arg(long)]
        against_model: Option<String>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: SplitName,
        /// Also write the misclassified instances per seed.
        #[arg(long)]
        errors: bool,
        /// Hash instance ids and drop text in error files.
        #[arg(long)]
        redact: bool,
    },
    /// Summarise a run directory into report.md and report.json.
    Report {
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Generate a planted-signal corpus and matching config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        instances: usize,
    },
}

fn parse_language(s: &str) -> Result<Language, String> {
    s.parse()
        .map_err(|_| format!("expected it or es, got {s:?}"))
}

fn parse_split(s: &str) -> Result<SplitName, String> {
    match s {
        "train" => Ok(SplitName::Train),
        "validation" | "val" => Ok(SplitName::Validation),
        "test" => Ok(SplitName::Test),
        _ => Err(format!("expected train, validation or test, got {s:?}")),
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    let mut config = PipelineConfig::load(path, &cli.overrides)?;
    if let Some(language) = cli.language {
        config.language = language;
    }
    if let Some(seed) = cli.seed {
        config.split.seed = seed;
        config.training.seeds = vec![seed];
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let flags = RunFlags {
        mock_llm: cli.mock_llm,
        deterministic: cli.deterministic,
    };
    match &cli.command {
        Command::Synth { out, instances } => {
            if *instances < 20 {
                return Err(CliError::Config("--instances must be at least 20".into()));
            }
            commands::synth(
                out,
                *instances,
                cli.language.unwrap_or(Language::It),
                cli.seed.unwrap_or(7),
            )
        }
        Command::Split => commands::split(&load_config(cli)?),
        Command::Annotate { retry_unresolved } => {
            commands::annotate(&load_config(cli)?, &flags, *retry_unresolved)
        }
        Command::Train { stage, parallel } => {
            commands::train(&load_config(cli)?, &flags, *stage, *parallel)
        }
        Command::Eval {
            run,
            model,
            against,
            against_model,
            split,
            errors,
            redact,
        } => commands::eval(
            &load_config(cli)?,
            &EvalArgs {
                run: run.clone(),
                model: model.clone(),
                against: against.clone(),
                against_model: against_model.clone(),
                split: *split,
                errors: *errors,
                redact: *redact,
            },
        ),
        Command::Report { run } => commands::report(&load_config(cli)?, run.clone()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
