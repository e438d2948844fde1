use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use reclaim::corpus::{
    class_distribution, format_distribution, load_corpus, stratified_split, write_corpus,
    CorpusSplit, Instance, Language, SplitManifest, SplitName,
};
use reclaim::evaluation::{error_report, read_predictions, EvalReport, PredictionTable, Redaction};
use reclaim::synthetic;
use reclaim::training::pipeline::{
    prediction_path, seed_dir, SeedSummary, BASELINE_MODEL, DUAL_MODEL,
};
use reclaim::training::{run_pipeline, StageReport, StageSelection};
use reclaim::weak_labeler::{
    annotate_corpus, read_proxy_file, write_proxy_file, AnnotateOptions, AnnotationCache,
    LlmClient, MockLlmClient, ProxyRecord,
};

use crate::config::PipelineConfig;
use crate::error::{ensure_dir, read_json, write_json, CliError};
use crate::http::ChatClient;

/// Flags shared by every pipeline command.
#[derive(Debug, Clone, Default)]
pub struct RunFlags {
    pub mock_llm: bool,
    pub deterministic: bool,
}

fn load_instances(config: &PipelineConfig) -> Result<Vec<Instance>, CliError> {
    let path = &config.paths.corpus;
    if !path.exists() {
        return Err(CliError::missing("corpus", path, "check paths.corpus"));
    }
    Ok(load_corpus(path, config.language)?)
}

fn load_split(config: &PipelineConfig, corpus: &[Instance]) -> Result<CorpusSplit, CliError> {
    let path = config.paths.manifest();
    if !path.exists() {
        return Err(CliError::missing(
            "split manifest",
            &path,
            "run `reclaim split` first",
        ));
    }
    let manifest = SplitManifest::load(&path)?;
    if manifest.language != config.language {
        return Err(CliError::Config(format!(
            "manifest {} is for {}, config language is {}",
            path.display(),
            manifest.language,
            config.language
        )));
    }
    Ok(manifest.apply(corpus)?)
}

pub fn split(config: &PipelineConfig) -> Result<String, CliError> {
    let corpus = load_instances(config)?;
    let split = stratified_split(&corpus, config.split.ratios(), config.split.seed)?;
    let path = config.paths.manifest();
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    split.manifest(config.language).save(&path)?;

    let mut out = format!(
        "{} corpus: {} instances, seed {}\nwrote {}\n\nall\n{}",
        config.language,
        corpus.len(),
        config.split.seed,
        path.display(),
        format_distribution(&class_distribution(&corpus))
    );
    for name in [SplitName::Train, SplitName::Validation, SplitName::Test] {
        let part = split.get(name);
        out.push_str(&format!(
            "\n{name} ({})\n{}",
            part.len(),
            format_distribution(&class_distribution(part))
        ));
    }
    Ok(out)
}

pub fn annotate(
    config: &PipelineConfig,
    flags: &RunFlags,
    retry_unresolved: bool,
) -> Result<String, CliError> {
    let corpus = load_instances(config)?;
    let client: Box<dyn LlmClient> = if flags.mock_llm {
        Box::new(MockLlmClient::keyword())
    } else {
        Box::new(ChatClient::from_env(&config.llm).map_err(CliError::Config)?)
    };
    let cache_path = config.paths.cache();
    if let Some(parent) = cache_path.parent() {
        ensure_dir(parent)?;
    }
    let mut cache = AnnotationCache::open(&cache_path)?;
    let options = AnnotateOptions {
        fan_out: if flags.deterministic {
            1
        } else {
            config.llm.fan_out
        },
        retry_unresolved,
        ..Default::default()
    };
    let outcome = annotate_corpus(&corpus, client.as_ref(), &mut cache, &options)?;

    let proxies = config.paths.proxies();
    write_proxy_file(&proxies, &outcome.signals)?;
    let unresolved_path = proxies.with_extension("unresolved.jsonl");
    let mut text = String::new();
    for u in &outcome.unresolved {
        text.push_str(&serde_json::to_string(u).expect("serialisable"));
        text.push('\n');
    }
    std::fs::write(&unresolved_path, text).map_err(|e| CliError::io(&unresolved_path, e))?;

    Ok(format!(
        "model: {}\nwrote {} ({} labels)\nwrote {} ({} unresolved)\n{}",
        client.model_identifier(),
        proxies.display(),
        outcome.signals.len(),
        unresolved_path.display(),
        outcome.unresolved.len(),
        outcome.summary()
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum StageArg {
    All,
    Baseline,
    User,
    Fusion,
}

impl StageArg {
    fn selection(self) -> StageSelection {
        match self {
            StageArg::All => StageSelection::all(),
            StageArg::Baseline => StageSelection {
                baseline: true,
                user: false,
                fusion: false,
            },
            StageArg::User => StageSelection {
                baseline: false,
                user: true,
                fusion: false,
            },
            StageArg::Fusion => StageSelection {
                baseline: false,
                user: false,
                fusion: true,
            },
        }
    }
}

pub fn train(
    config: &PipelineConfig,
    flags: &RunFlags,
    stage: StageArg,
    parallel: bool,
) -> Result<String, CliError> {
    let corpus = load_instances(config)?;
    let split = load_split(config, &corpus)?;
    let stages = stage.selection();
    let proxies: Vec<ProxyRecord> = if stages.user {
        let path = config.paths.proxies();
        if !path.exists() {
            return Err(CliError::missing(
                "proxy labels",
                &path,
                "run `reclaim annotate` first",
            ));
        }
        read_proxy_file(&path)?
    } else {
        Vec::new()
    };
    let run_dir = ensure_dir(&config.paths.run_dir)?;
    std::fs::write(run_dir.join("experiment.toml"), config.to_toml())
        .map_err(|e| CliError::io(&run_dir, e))?;

    let parallel = parallel && !flags.deterministic;
    let results = run_pipeline(
        &config.training,
        &split,
        &proxies,
        config.language,
        Some(&run_dir),
        stages,
        parallel,
    )?;
    let mut out = format!("run directory {}\n", run_dir.display());
    let mut failed = Vec::new();
    for (seed, result) in &results {
        match result {
            Ok(run) => {
                let f1 = |m: &Option<reclaim::evaluation::MetricRecord>| {
                    m.as_ref()
                        .map_or("-".to_string(), |m| format!("{:.4}", m.macro_f1))
                };
                out.push_str(&format!(
                    "seed {seed}: validation macro-F1 baseline {} dual {}\n",
                    f1(&run.baseline_validation),
                    f1(&run.dual_validation)
                ));
            }
            Err(e) => {
                out.push_str(&format!("seed {seed}: FAILED: {e}\n"));
                failed.push(format!("seed {seed}: {e}"));
            }
        }
    }
    if failed.is_empty() {
        Ok(out)
    } else {
        print!("{out}");
        Err(CliError::Training(format!(
            "{} of {} seeds failed: {}",
            failed.len(),
            results.len(),
            failed.join("; ")
        )))
    }
}

/// `seed-<n>` subdirectories of a run, by seed.
fn seed_dirs(run: &Path) -> Result<BTreeMap<u64, PathBuf>, CliError> {
    let entries = std::fs::read_dir(run).map_err(|e| CliError::io(run, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(run, e))?;
        let name = entry.file_name();
        if let Some(seed) = name
            .to_str()
            .and_then(|n| n.strip_prefix("seed-"))
            .and_then(|s| s.parse().ok())
        {
            out.insert(seed, entry.path());
        }
    }
    Ok(out)
}

fn load_report(
    run: &Path,
    model: &str,
    split: SplitName,
    language: Language,
) -> Result<EvalReport, CliError> {
    let mut per_seed = Vec::new();
    for (seed, dir) in seed_dirs(run)? {
        let path = prediction_path(&dir, model, split);
        if path.exists() {
            per_seed.push((seed, read_predictions(&path)?));
        }
    }
    if per_seed.is_empty() {
        return Err(CliError::Data(format!(
            "no {model} predictions for the {split} split under {}",
            run.display()
        )));
    }
    Ok(EvalReport::from_predictions(
        model, language, split, &per_seed,
    )?)
}

pub struct EvalArgs {
    pub run: Option<PathBuf>,
    pub model: String,
    pub against: Option<PathBuf>,
    pub against_model: Option<String>,
    pub split: SplitName,
    pub errors: bool,
    pub redact: bool,
}

pub fn eval(config: &PipelineConfig, args: &EvalArgs) -> Result<String, CliError> {
    let run = args
        .run
        .clone()
        .unwrap_or_else(|| config.paths.run_dir.clone());
    let mut report = load_report(&run, &args.model, args.split, config.language)?;
    if args.against.is_some() || args.against_model.is_some() {
        let other_run = args.against.clone().unwrap_or_else(|| run.clone());
        let other_model = args
            .against_model
            .clone()
            .unwrap_or_else(|| args.model.clone());
        let other = load_report(&other_run, &other_model, args.split, config.language)?;
        if other.per_seed.len() != report.per_seed.len() {
            eprintln!(
                "warning: {} has {} seeds, {} has {}",
                args.model,
                report.per_seed.len(),
                other_model,
                other.per_seed.len()
            );
        }
        if report.per_seed.len() < 2 || other.per_seed.len() < 2 {
            eprintln!("warning: significance test needs at least 2 seeds per model, skipped");
        } else {
            report.compare_with(&other)?;
        }
    }
    let path = run.join(format!("eval_{}_{}.json", args.model, args.split));
    write_json(&path, &report)?;
    let mut out = report.table();
    out.push_str(&format!("wrote {}\n", path.display()));

    if args.errors {
        let corpus = load_instances(config)?;
        let split = load_split(config, &corpus)?;
        let redaction = if args.redact {
            Redaction::HashIdsOnly
        } else {
            Redaction::None
        };
        for (seed, dir) in seed_dirs(&run)? {
            let preds_path = prediction_path(&dir, &args.model, args.split);
            if !preds_path.exists() {
                continue;
            }
            let table = PredictionTable::new(&read_predictions(&preds_path)?);
            let errors = error_report(&table, split.get(args.split), redaction);
            let path = dir.join(format!("errors_{}_{}.jsonl", args.model, args.split));
            errors
                .write_jsonl(&path)
                .map_err(|e| CliError::io(&path, e))?;
            out.push_str(&format!(
                "seed {seed}: {} -> {}\n",
                errors.summary(),
                path.display()
            ));
        }
    }
    Ok(out)
}

/// Collects a run directory into `report.md` and `report.json`.
pub fn report(config: &PipelineConfig, run: Option<PathBuf>) -> Result<String, CliError> {
    let run = run.unwrap_or_else(|| config.paths.run_dir.clone());
    let corpus = load_instances(config)?;
    let split = load_split(config, &corpus)?;
    let mut md = format!("# Run report: {}\n\n", run.display());

    md.push_str("## Data\n\n```\n");
    for name in [SplitName::Train, SplitName::Validation, SplitName::Test] {
        let part = split.get(name);
        md.push_str(&format!(
            "{name} ({})\n{}",
            part.len(),
            format_distribution(&class_distribution(part))
        ));
    }
    md.push_str("```\n\n");

    let proxies_path = config.paths.proxies();
    if proxies_path.exists() {
        let proxies = read_proxy_file(&proxies_path)?;
        let yes = proxies.iter().filter(|p| p.affiliated.index() == 1).count();
        let total = proxies.len().max(1) as f64;
        md.push_str(&format!(
            "## Proxy labels\n\naffiliated {yes} ({:.2}%), not affiliated {} ({:.2}%), of {} corpus instances\n\n",
            100.0 * yes as f64 / total,
            proxies.len() - yes,
            100.0 * (proxies.len() - yes) as f64 / total,
            corpus.len()
        ));
    }

    let summary_path = run.join("summary.json");
    let summary: Vec<SeedSummary> = if summary_path.exists() {
        read_json(&summary_path)?
    } else {
        Vec::new()
    };
    if !summary.is_empty() {
        md.push_str("## Training\n\n| seed | status | stage | epochs run | best epoch | best val macro-F1 |\n|---|---|---|---|---|---|\n");
        for s in &summary {
            let reports_path = seed_dir(&run, s.seed).join("reports.json");
            let reports: Vec<StageReport> = if reports_path.exists() {
                read_json(&reports_path)?
            } else {
                Vec::new()
            };
            let status = if s.ok {
                "ok".to_string()
            } else {
                format!("failed: {}", s.error.clone().unwrap_or_default())
            };
            if reports.is_empty() {
                md.push_str(&format!("| {} | {status} | - | - | - | - |\n", s.seed));
            }
            for r in &reports {
                md.push_str(&format!(
                    "| {} | {status} | {} | {} | {} | {} |\n",
                    s.seed,
                    r.stage,
                    r.epochs.len(),
                    r.best_epoch,
                    r.best_validation_macro_f1
                        .map_or("-".into(), |f| format!("{f:.4}"))
                ));
            }
        }
        md.push('\n');
    }

    let mut reports = Vec::new();
    for split_name in [SplitName::Validation, SplitName::Test] {
        let baseline = load_report(&run, BASELINE_MODEL, split_name, config.language).ok();
        let dual = load_report(&run, DUAL_MODEL, split_name, config.language).ok();
        if let Some(b) = &baseline {
            reports.push(b.clone());
        }
        if let Some(mut d) = dual {
            if let Some(b) = &baseline {
                if d.per_seed.len() >= 2 && b.per_seed.len() >= 2 {
                    d.compare_with(b)?;
                }
            }
            reports.push(d);
        }
    }
    if !reports.is_empty() {
        md.push_str("## Evaluation\n\n```\n");
        for r in &reports {
            md.push_str(&r.table());
            md.push('\n');
        }
        md.push_str("```\n");
    }

    let json_path = run.join("report.json");
    write_json(&json_path, &reports)?;
    let md_path = run.join("report.md");
    std::fs::write(&md_path, &md).map_err(|e| CliError::io(&md_path, e))?;
    Ok(format!(
        "{md}\nwrote {} and {}\n",
        md_path.display(),
        json_path.display()
    ))
}

/// Writes a planted-signal corpus and a ready-to-run experiment config.
pub fn synth(
    out: &Path,
    instances: usize,
    language: Language,
    seed: u64,
) -> Result<String, CliError> {
    ensure_dir(out)?;
    let corpus = synthetic::generate(instances, language, seed);
    let corpus_path = out.join("corpus.jsonl");
    write_corpus(&corpus_path, &corpus.instances)?;
    let config = PipelineConfig {
        language,
        paths: crate::config::Paths {
            corpus: "corpus.jsonl".into(),
            run_dir: "run".into(),
            cache: None,
            manifest: None,
            proxies: None,
        },
        split: crate::config::SplitSettings {
            seed,
            ..Default::default()
        },
        training: synthetic::tiny_run_config(vec![1, 2, 3]),
        llm: Default::default(),
    };
    let config_path = out.join("experiment.toml");
    std::fs::write(&config_path, config.to_toml()).map_err(|e| CliError::io(&config_path, e))?;
    Ok(format!(
        "wrote {} ({} instances)\n{}wrote {}\n",
        corpus_path.display(),
        corpus.instances.len(),
        format_distribution(&class_distribution(&corpus.instances)),
        config_path.display()
    ))
}
