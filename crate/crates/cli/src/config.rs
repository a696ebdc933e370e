//! Config file tree, dotted-path overrides, and the resolved snapshot.
//!
//! One TOML file drives every run; command-line flags only pick the verb,
//! the config path, and `--set key=value` overrides. Overrides must
//! reference existing keys and are applied before validation, so a bad
//! override fails fast naming the offending key. Every run writes the fully
//! resolved config (defaults materialized) plus its hash next to the
//! outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use textalign::corruption::NoisyMode;
use textalign::eval::MetricKind;
use textalign::gateway::HttpConfig;
use textalign::harness::{
    AblationFlags, BackendConfig, BackendKind, FeaturizerChoice, RunConfig,
};
use textalign::model::{TrainConfig, TrainMode};
use textalign::perturb::{EditOp, PerturbationConfig};
use textalign::rng::RNG_ALGORITHM;
use textalign::synth::SynthSpec;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub manifest: String,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            manifest: "synthetic.jsonl".into(),
            train_fraction: 0.8,
            split_seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub repeats: u32,
    /// Generator identity check; reruns on other implementations must match.
    pub rng_algorithm: String,
    pub adversarial_iteration_multiplier: u32,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 42,
            repeats: 3,
            rng_algorithm: RNG_ALGORITHM.into(),
            adversarial_iteration_multiplier: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    #[serde(default = "default_true")]
    pub use_alignment: bool,
    #[serde(default = "default_true")]
    pub use_perturbation: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            use_alignment: true,
            use_perturbation: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    /// "mock" or "http".
    pub kind: String,
    pub mock_seed: u64,
    /// Empty disables the response cache.
    pub cache_dir: String,
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
}

impl Default for BackendSection {
    fn default() -> Self {
        let http = HttpConfig::default();
        BackendSection {
            kind: "mock".into(),
            mock_seed: 7,
            cache_dir: ".cache/llm".into(),
            base_url: http.base_url,
            model: http.model,
            api_key_env: http.api_key_env,
            timeout_secs: 60,
            max_in_flight: http.max_in_flight,
            max_retries: http.max_retries,
            retry_backoff_ms: http.retry_backoff_ms,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    /// Empty means the builtin templates.
    pub template_dir: String,
    /// Samples dumped by the `align` verb; 0 means all.
    pub align_dump_samples: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            template_dir: String::new(),
            align_dump_samples: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationSection {
    pub k: u32,
    pub edit_ops: Vec<String>,
    pub temperature_lo: f64,
    pub temperature_hi: f64,
    pub max_edits: u32,
    pub compose: bool,
    pub adversarial_per_sample: u32,
    /// Samples dumped by the `perturb` verb; 0 means all.
    pub perturb_dump_samples: usize,
}

impl Default for PerturbationSection {
    fn default() -> Self {
        let base = PerturbationConfig::default();
        PerturbationSection {
            k: base.k,
            edit_ops: vec!["deletion".into(), "insertion".into(), "substitution".into()],
            temperature_lo: base.temperature_range.0,
            temperature_hi: base.temperature_range.1,
            max_edits: base.max_edits,
            compose: base.compose,
            adversarial_per_sample: base.adversarial_per_sample,
            perturb_dump_samples: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenariosSection {
    pub kinds: Vec<String>,
    /// "per_modality" or "joint".
    pub noisy_mode: String,
}

impl Default for ScenariosSection {
    fn default() -> Self {
        ScenariosSection {
            kinds: vec!["noisy".into(), "dynamic".into(), "missing".into()],
            noisy_mode: "per_modality".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: u32,
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    /// naive | noise | dropout | pgd | text_adversarial
    pub mode: String,
    pub noise_sigma: f64,
    pub dropout_rate: f64,
    pub pgd_epsilon: f64,
    pub pgd_alpha: f64,
    pub pgd_steps: u32,
    pub feature_dim: usize,
    pub ngram: usize,
    /// segment | embedding
    pub featurizer: String,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            epochs: 8,
            learning_rate: 0.5,
            l2: 1e-4,
            batch_size: 8,
            mode: "naive".into(),
            noise_sigma: 0.1,
            dropout_rate: 0.1,
            pgd_epsilon: 0.1,
            pgd_alpha: 0.025,
            pgd_steps: 10,
            feature_dim: 96,
            ngram: 2,
            featurizer: "segment".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    /// accuracy | mse | rmse
    pub metric: String,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            metric: "accuracy".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub size: usize,
    pub num_classes: u32,
    pub seed: u64,
    pub confuser_probability: f64,
    pub text_keyword_repeats: u32,
    pub name: String,
    /// Where the `synth` verb writes the manifest.
    pub out: String,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let spec = SynthSpec::default();
        SyntheticSection {
            size: spec.size,
            num_classes: spec.num_classes,
            seed: spec.seed,
            confuser_probability: spec.confuser_probability,
            text_keyword_repeats: spec.text_keyword_repeats,
            name: spec.name,
            out: "synthetic.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Report JSON consumed by the `report` verb.
    pub input: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "runs".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub dataset: DatasetSection,
    pub run: RunSection,
    pub ablation: AblationSection,
    pub backend: BackendSection,
    pub pipeline: PipelineSection,
    pub perturbation: PerturbationSection,
    pub scenarios: ScenariosSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
    pub synthetic: SyntheticSection,
    pub report: ReportSection,
    pub output: OutputSection,
}

/// Apply one `a.b.c=value` override onto the raw TOML tree. The full key
/// path must already exist.
fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw_value) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} must look like key.path=value"))?;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        bail!("override key {path:?} is malformed");
    }
    let mut table = root;
    for segment in &segments[..segments.len() - 1] {
        table = table
            .get_mut(*segment)
            .ok_or_else(|| anyhow!("override references unknown config key {path:?}"))?
            .as_table_mut()
            .ok_or_else(|| anyhow!("override key {path:?} does not address a table entry"))?;
    }
    let leaf = segments[segments.len() - 1];
    if !table.contains_key(leaf) {
        bail!("override references unknown config key {path:?}");
    }
    // Parse the value as TOML; fall back to a plain string.
    let parsed: toml::Value = match format!("v = {raw_value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just inserted"),
        Err(_) => toml::Value::String(raw_value.to_string()),
    };
    table.insert(leaf.to_string(), parsed);
    Ok(())
}

/// Recursively lay the user's values over the default tree; non-table
/// values replace wholesale.
fn merge_over(defaults: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (defaults.get_mut(&key), value) {
            (Some(toml::Value::Table(base)), toml::Value::Table(overlay)) => {
                merge_over(base, overlay);
            }
            (_, value) => {
                defaults.insert(key, value);
            }
        }
    }
}

/// Load the config file, resolve defaults, and apply overrides. Overrides
/// address the resolved tree, so any schema key works whether or not the
/// file spelled it out.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<AppConfig> {
    let raw = fs::read_to_string(path)
        .with_context(|| format!("failed to read config {}", path.display()))?;
    let user: toml::Table = raw
        .parse()
        .with_context(|| format!("config {} is not valid TOML", path.display()))?;
    let mut tree: toml::Table = toml::to_string(&AppConfig::default())
        .expect("defaults serialize")
        .parse()
        .expect("defaults re-parse");
    merge_over(&mut tree, user);
    for assignment in overrides {
        apply_override(&mut tree, assignment)?;
    }
    let merged = toml::to_string(&tree).expect("tree re-serializes");
    let config: AppConfig =
        toml::from_str(&merged).map_err(|e| anyhow!("config validation failed: {e}"))?;
    validate(&config)?;
    Ok(config)
}

fn validate(config: &AppConfig) -> Result<()> {
    if config.run.rng_algorithm != RNG_ALGORITHM {
        bail!(
            "run.rng_algorithm {:?} is not the implemented generator {:?}; reruns would not be comparable",
            config.run.rng_algorithm,
            RNG_ALGORITHM
        );
    }
    config.train_config()?;
    config.perturbation_config()?;
    config.metric()?;
    config.noisy_mode()?;
    config.scenario_kinds()?;
    config.featurizer_choice()?;
    if !(config.dataset.train_fraction > 0.0 && config.dataset.train_fraction < 1.0) {
        bail!("dataset.train_fraction must be in (0, 1)");
    }
    Ok(())
}

impl AppConfig {
    pub fn backend_config(&self) -> Result<BackendConfig> {
        let cache_dir =
            (!self.backend.cache_dir.is_empty()).then(|| PathBuf::from(&self.backend.cache_dir));
        let kind = match self.backend.kind.as_str() {
            "mock" => BackendKind::Mock {
                seed: self.backend.mock_seed,
            },
            "http" => BackendKind::Http(HttpConfig {
                base_url: self.backend.base_url.clone(),
                model: self.backend.model.clone(),
                api_key_env: self.backend.api_key_env.clone(),
                timeout: Duration::from_secs(self.backend.timeout_secs),
                max_in_flight: self.backend.max_in_flight,
                max_retries: self.backend.max_retries,
                retry_backoff_ms: self.backend.retry_backoff_ms,
            }),
            other => bail!("backend.kind {other:?} must be \"mock\" or \"http\""),
        };
        Ok(BackendConfig { kind, cache_dir })
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        Ok(RunConfig {
            seed: self.run.seed,
            repeats: self.run.repeats,
            backend: self.backend_config()?,
            ablation: AblationFlags {
                use_alignment: self.ablation.use_alignment,
                use_perturbation: self.ablation.use_perturbation,
            },
            adversarial_iteration_multiplier: self.run.adversarial_iteration_multiplier,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.training;
        let mode = match t.mode.as_str() {
            "naive" => TrainMode::Naive,
            "noise" => TrainMode::NoiseInjection { sigma: t.noise_sigma },
            "dropout" => TrainMode::Dropout { rate: t.dropout_rate },
            "pgd" => TrainMode::Pgd {
                epsilon: t.pgd_epsilon,
                alpha: t.pgd_alpha,
                steps: t.pgd_steps,
            },
            "text_adversarial" => TrainMode::TextAdversarial {
                multiplier: self.run.adversarial_iteration_multiplier,
            },
            other => bail!("training.mode {other:?} is not a known mode"),
        };
        let config = TrainConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            l2: t.l2,
            batch_size: t.batch_size,
            mode,
        };
        config
            .validate()
            .map_err(|e| anyhow!("training config: {e}"))?;
        Ok(config)
    }

    pub fn perturbation_config(&self) -> Result<PerturbationConfig> {
        let p = &self.perturbation;
        let mut edit_ops = Vec::new();
        for op in &p.edit_ops {
            edit_ops.push(match op.as_str() {
                "deletion" => EditOp::Deletion,
                "insertion" => EditOp::Insertion,
                "substitution" => EditOp::Substitution,
                other => bail!("perturbation.edit_ops entry {other:?} is unknown"),
            });
        }
        let config = PerturbationConfig {
            k: p.k,
            edit_ops,
            temperature_range: (p.temperature_lo, p.temperature_hi),
            max_edits: p.max_edits,
            compose: p.compose,
            adversarial_per_sample: p.adversarial_per_sample,
        };
        config.validate().map_err(|e| anyhow!("perturbation config: {e}"))?;
        Ok(config)
    }

    pub fn metric(&self) -> Result<MetricKind> {
        Ok(match self.evaluation.metric.as_str() {
            "accuracy" => MetricKind::Accuracy,
            "mse" => MetricKind::Mse,
            "rmse" => MetricKind::Rmse,
            other => bail!("evaluation.metric {other:?} must be accuracy, mse, or rmse"),
        })
    }

    pub fn noisy_mode(&self) -> Result<NoisyMode> {
        Ok(match self.scenarios.noisy_mode.as_str() {
            "per_modality" => NoisyMode::PerModality,
            "joint" => NoisyMode::Joint,
            other => bail!("scenarios.noisy_mode {other:?} must be per_modality or joint"),
        })
    }

    pub fn scenario_kinds(&self) -> Result<Vec<textalign::corruption::ScenarioKind>> {
        use textalign::corruption::ScenarioKind;
        if self.scenarios.kinds.is_empty() {
            bail!("scenarios.kinds must not be empty");
        }
        self.scenarios
            .kinds
            .iter()
            .map(|kind| match kind.as_str() {
                "noisy" => Ok(ScenarioKind::Noisy),
                "dynamic" => Ok(ScenarioKind::Dynamic),
                "missing" => Ok(ScenarioKind::Missing),
                other => bail!("scenarios.kinds entry {other:?} is unknown"),
            })
            .collect()
    }

    pub fn featurizer_choice(&self) -> Result<FeaturizerChoice> {
        Ok(match self.training.featurizer.as_str() {
            "segment" => FeaturizerChoice::Segment,
            "embedding" => FeaturizerChoice::Embedding,
            other => bail!("training.featurizer {other:?} must be segment or embedding"),
        })
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            size: self.synthetic.size,
            num_classes: self.synthetic.num_classes,
            seed: self.synthetic.seed,
            vocabulary: Vec::new(),
            confuser_probability: self.synthetic.confuser_probability,
            text_keyword_repeats: self.synthetic.text_keyword_repeats,
            name: self.synthetic.name.clone(),
        }
    }

    /// Canonical resolved snapshot (defaults materialized) and its hash.
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.resolved_toml().as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}
