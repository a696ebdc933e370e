//! Operator entry point. One config file drives every verb; flags only pick
//! the verb, the config path, and `--set key=value` overrides. Each run
//! writes a resolved-config snapshot plus its hash next to the outputs, so
//! any result can be reproduced from a single artifact.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{load_config, AppConfig};
use textalign::corruption::CorruptionError;
use textalign::data::{load_dataset, split_dataset, DataError, Dataset};
use textalign::eval::{persist_report, EvalError, RobustnessReport};
use textalign::gateway::GatewayError;
use textalign::harness::{run_ablation, Experiment, HarnessError};
use textalign::model::{Checkpoint, ModelError};
use textalign::perturb::{adversarial_perturb, build_instruction_pool, PerturbError};
use textalign::pipeline::{label_space_text, PipelineError, TemplateSet};
use textalign::rng;
use textalign::synth::{write_synthetic_manifest, SynthError};

#[derive(Parser)]
#[command(
    name = "textalign",
    version,
    about = "Text-centric multimodal alignment, LLM perturbation, and robustness evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Config file (TOML).
    #[arg(short, long, default_value = "textalign.toml")]
    config: PathBuf,
    /// Override a config key, e.g. --set training.epochs=4. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset manifest and print a summary.
    Ingest(CommonArgs),
    /// Generate the seeded synthetic dataset manifest.
    Synth(CommonArgs),
    /// Write aligned unified prompts for the first N samples.
    Align(CommonArgs),
    /// Write adversarial examples for the first N samples.
    Perturb(CommonArgs),
    /// Train the downstream model and write a checkpoint.
    Train(CommonArgs),
    /// Train, sweep the configured scenario grids, and write reports.
    Evaluate(CommonArgs),
    /// Run the four ablation cells over the first configured scenario.
    Ablate(CommonArgs),
    /// Convert a report JSON into its flat CSV.
    Report(CommonArgs),
}

impl Command {
    fn verb(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Synth(_) => "synth",
            Command::Align(_) => "align",
            Command::Perturb(_) => "perturb",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Ablate(_) => "ablate",
            Command::Report(_) => "report",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Ingest(a)
            | Command::Synth(a)
            | Command::Align(a)
            | Command::Perturb(a)
            | Command::Train(a)
            | Command::Evaluate(a)
            | Command::Ablate(a)
            | Command::Report(a) => a,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::from(exit_code_for(&error))
        }
    }
}

/// Distinct exit-code families per module: 2 config, 3 data, 4 gateway,
/// 5 pipeline/perturbation, 6 model/training, 7 evaluation/corruption,
/// 8 anything else (I/O).
fn exit_code_for(error: &anyhow::Error) -> u8 {
    for cause in error.chain() {
        if let Some(harness) = cause.downcast_ref::<HarnessError>() {
            return match harness {
                HarnessError::Config(_) => 2,
                HarnessError::Data(_) => 3,
                HarnessError::Gateway(_) => 4,
                HarnessError::Pipeline(_) | HarnessError::Perturb(_) => 5,
                HarnessError::Model(_) => 6,
                HarnessError::Eval(_) | HarnessError::Corruption(_) => 7,
            };
        }
        if cause.downcast_ref::<DataError>().is_some() {
            return 3;
        }
        if cause.downcast_ref::<GatewayError>().is_some() {
            return 4;
        }
        if cause.downcast_ref::<PipelineError>().is_some()
            || cause.downcast_ref::<PerturbError>().is_some()
        {
            return 5;
        }
        if cause.downcast_ref::<ModelError>().is_some() {
            return 6;
        }
        if cause.downcast_ref::<EvalError>().is_some()
            || cause.downcast_ref::<CorruptionError>().is_some()
        {
            return 7;
        }
        if cause.downcast_ref::<SynthError>().is_some() {
            return 3;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 8;
        }
    }
    2
}

fn run(command: &Command) -> Result<()> {
    let args = command.args();
    let config = load_config(&args.config, &args.overrides)?;
    let run_dir = prepare_run_dir(command.verb(), &config)?;
    match command {
        Command::Ingest(_) => ingest(&config, &run_dir),
        Command::Synth(_) => synth(&config, &run_dir),
        Command::Align(_) => align(&config, &run_dir),
        Command::Perturb(_) => perturb(&config, &run_dir),
        Command::Train(_) => train(&config, &run_dir),
        Command::Evaluate(_) => evaluate(&config, &run_dir),
        Command::Ablate(_) => ablate(&config, &run_dir),
        Command::Report(_) => report(&config, &run_dir),
    }
}

/// `<output.dir>/<verb>-<unix-seconds>-<hash8>` with the resolved-config
/// snapshot inside.
fn prepare_run_dir(verb: &str, config: &AppConfig) -> Result<PathBuf> {
    let hash = config.config_hash();
    let seconds = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let dir = Path::new(&config.output.dir).join(format!("{verb}-{seconds}-{}", &hash[..8]));
    fs::create_dir_all(&dir).with_context(|| format!("creating run dir {}", dir.display()))?;
    let snapshot = format!("# config_hash = {hash}\n{}", config.resolved_toml());
    fs::write(dir.join("resolved_config.toml"), snapshot)?;
    Ok(dir)
}

fn build_experiment(config: &AppConfig) -> Result<Experiment> {
    let mut experiment = Experiment::new(config.run_config()?).map_err(anyhow::Error::from)?;
    if !config.pipeline.template_dir.is_empty() {
        let dir = Path::new(&config.pipeline.template_dir);
        experiment.templates = TemplateSet::from_dir(dir)?;
        experiment.pool = build_instruction_pool(&dir.join("adversarial"))?;
    }
    experiment.perturbation = config.perturbation_config()?;
    experiment.train = config.train_config()?;
    experiment.featurizer_choice = config.featurizer_choice()?;
    experiment.feature_dim = config.training.feature_dim;
    experiment.ngram = config.training.ngram;
    experiment.metric = config.metric()?;
    experiment.noisy_mode = config.noisy_mode()?;
    experiment.config_hash = config.config_hash();
    Ok(experiment)
}

fn load_split(config: &AppConfig) -> Result<(Dataset, Dataset)> {
    let dataset = load_dataset(Path::new(&config.dataset.manifest))?;
    let (train, test) = split_dataset(
        &dataset,
        config.dataset.train_fraction,
        config.dataset.split_seed,
    )?;
    Ok((train, test))
}

#[derive(Serialize)]
struct DatasetSummary {
    name: String,
    task: String,
    samples: usize,
    with_tabular: usize,
    with_caption: usize,
    with_free_text: usize,
}

fn ingest(config: &AppConfig, run_dir: &Path) -> Result<()> {
    let dataset = load_dataset(Path::new(&config.dataset.manifest))?;
    let summary = DatasetSummary {
        name: dataset.name.clone(),
        task: match dataset.task {
            textalign::data::Task::Classification { num_classes } => {
                format!("classification({num_classes} classes)")
            }
            textalign::data::Task::Regression => "regression".into(),
        },
        samples: dataset.samples.len(),
        with_tabular: dataset.samples.iter().filter(|s| !s.tabular.is_empty()).count(),
        with_caption: dataset.samples.iter().filter(|s| !s.caption.is_empty()).count(),
        with_free_text: dataset.samples.iter().filter(|s| !s.free_text.is_empty()).count(),
    };
    fs::write(
        run_dir.join("dataset_summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    println!(
        "dataset {} [{}]: {} samples (tabular {}, caption {}, text {})",
        summary.name,
        summary.task,
        summary.samples,
        summary.with_tabular,
        summary.with_caption,
        summary.with_free_text
    );
    Ok(())
}

fn synth(config: &AppConfig, _run_dir: &Path) -> Result<()> {
    let spec = config.synth_spec();
    let out = PathBuf::from(&config.synthetic.out);
    let dataset = write_synthetic_manifest(&spec, &out)?;
    println!(
        "wrote {} samples ({} classes) to {}",
        dataset.samples.len(),
        config.synthetic.num_classes,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct AlignRow<'a> {
    id: &'a str,
    label: &'a textalign::data::Label,
    unified: textalign::pipeline::UnifiedText,
}

fn align(config: &AppConfig, run_dir: &Path) -> Result<()> {
    let experiment = build_experiment(config)?;
    let (train, _) = load_split(config)?;
    let demo = experiment.bootstrap(&train)?;
    let label_space = label_space_text(train.task);
    let count = effective_count(config.pipeline.align_dump_samples, train.samples.len());
    let mut lines = String::new();
    for sample in &train.samples[..count] {
        let unified = experiment.unified_for(sample, demo.as_ref(), &label_space, None)?;
        let row = AlignRow {
            id: &sample.id,
            label: &sample.label,
            unified,
        };
        lines.push_str(&serde_json::to_string(&row)?);
        lines.push('\n');
    }
    let path = run_dir.join("align.jsonl");
    fs::write(&path, lines)?;
    println!("wrote {count} aligned prompts to {}", path.display());
    Ok(())
}

fn perturb(config: &AppConfig, run_dir: &Path) -> Result<()> {
    let experiment = build_experiment(config)?;
    let (train, _) = load_split(config)?;
    let demo = experiment.bootstrap(&train)?;
    let label_space = label_space_text(train.task);
    let count = effective_count(config.perturbation.perturb_dump_samples, train.samples.len());
    let model_name = config.backend_config()?.model_name();
    let mut lines = String::new();
    for sample in &train.samples[..count] {
        let unified = experiment.unified_for(sample, demo.as_ref(), &label_space, None)?;
        let seed = rng::derive_seed(config.run.seed, "perturb_dump", &sample.id);
        let example = adversarial_perturb(
            &unified,
            &sample.label,
            &experiment.pool,
            &experiment.perturbation,
            seed,
            experiment.backend.as_ref(),
            &model_name,
        )?;
        lines.push_str(&serde_json::to_string(&example)?);
        lines.push('\n');
    }
    let path = run_dir.join("adversarial.jsonl");
    fs::write(&path, lines)?;
    println!("wrote {count} adversarial examples to {}", path.display());
    Ok(())
}

fn effective_count(requested: usize, available: usize) -> usize {
    if requested == 0 {
        available
    } else {
        requested.min(available)
    }
}

fn train(config: &AppConfig, run_dir: &Path) -> Result<()> {
    let experiment = build_experiment(config)?;
    let (train_set, _) = load_split(config)?;
    let demo = experiment.bootstrap(&train_set)?;
    let (model, stats) = experiment.train_model(&train_set, demo.as_ref())?;
    let checkpoint = Checkpoint::new(
        experiment.feature_dim,
        experiment.ngram,
        model,
        stats,
        experiment.config_hash.clone(),
    );
    let path = run_dir.join("checkpoint.json");
    fs::write(&path, checkpoint.to_json())?;
    println!(
        "trained on {} samples in {} steps (naive budget {}); checkpoint at {}",
        train_set.samples.len(),
        stats.steps,
        stats.naive_steps,
        path.display()
    );
    Ok(())
}

fn evaluate(config: &AppConfig, run_dir: &Path) -> Result<()> {
    let experiment = build_experiment(config)?;
    let (train_set, test_set) = load_split(config)?;
    for kind in config.scenario_kinds()? {
        let report = experiment.evaluate_scenario(&train_set, &test_set, kind)?;
        let (json_path, _) = persist_report(&report, run_dir)?;
        print_report_line(&report);
        println!("  -> {}", json_path.display());
    }
    Ok(())
}

fn ablate(config: &AppConfig, run_dir: &Path) -> Result<()> {
    let experiment = build_experiment(config)?;
    let (train_set, test_set) = load_split(config)?;
    let kind = config.scenario_kinds()?[0];
    let reports = run_ablation(&experiment, &train_set, &test_set, kind)?;
    for (label, report) in &reports {
        let slug = label.replace(['/', ' '], "_");
        let json_path = run_dir.join(format!("report-{}-{slug}.json", kind.as_str()));
        let csv_path = run_dir.join(format!("report-{}-{slug}.csv", kind.as_str()));
        fs::write(&json_path, report.to_json())?;
        fs::write(&csv_path, report.to_csv())?;
        println!("[{label}]");
        print_report_line(report);
    }
    Ok(())
}

fn report(config: &AppConfig, run_dir: &Path) -> Result<()> {
    if config.report.input.is_empty() {
        anyhow::bail!("report.input must point at a report JSON file");
    }
    let loaded = textalign::eval::load_report(Path::new(&config.report.input))?;
    let path = run_dir.join("report.csv");
    fs::write(&path, loaded.to_csv())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn print_report_line(report: &RobustnessReport) {
    let ratio = report
        .aggregate
        .mean_drop_ratio
        .map(|r| format!("{r:.4}"))
        .unwrap_or_else(|| "undefined".into());
    println!(
        "scenario {}: clean {} = {:.4}, mean under imperfection = {:.4}, mean drop ratio = {}",
        report.scenario,
        report.clean.kind.as_str(),
        report.clean.value,
        report.aggregate.mean_metric,
        ratio
    );
}
