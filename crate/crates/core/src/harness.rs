//! End-to-end experiment orchestration: build the gateway, bootstrap the
//! demonstration, train downstream models (naive, robust baselines, or
//! text-adversarial), sweep scenario grids, and emit robustness reports.
//!
//! Every random choice flows from `RunConfig.seed` through named streams, so
//! a rerun with a warm response cache is byte-identical and issues zero
//! backend calls.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corruption::{
    self, ConditionKind, CorruptionError, NoisyMode, ScenarioCondition, ScenarioGrid, ScenarioKind,
};
use crate::data::{DataError, Dataset, Label, Modality, MultimodalSample};
use crate::eval::{
    self, Aggregate, ConditionResult, EvalError, MetricKind, MetricValue, ReportMetadata,
    RobustnessReport, REPORT_SCHEMA_VERSION,
};
use crate::gateway::{
    CachedBackend, ChatBackend, GatewayError, HttpBackend, HttpConfig, MockBackend, DEFAULT_MODEL,
};
use crate::model::{
    EmbeddingFeaturizer, FeatureVector, Featurizer, LinearModel, ModelError, TrainConfig,
    TrainMode, TrainStats,
};
use crate::perturb::{
    adversarial_perturb, InstructionPool, PerturbationConfig, PerturbError,
};
use crate::pipeline::{
    modality_order, transform_modalities, AlignmentPipeline, Demonstration, PipelineError, Stage,
    TemplateSet, TextSegment, UnifiedText,
};
use crate::rng;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Corruption(#[from] CorruptionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("configuration: {0}")]
    Config(String),
}

/// Table-3-style ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_alignment: bool,
    pub use_perturbation: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_alignment: true,
            use_perturbation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendKind {
    Mock { seed: u64 },
    Http(HttpConfig),
}

/// Backend selection plus the response-cache location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(flatten)]
    pub kind: BackendKind,
    /// Cache directory; `None` disables the cache layer.
    pub cache_dir: Option<PathBuf>,
}

impl BackendConfig {
    pub fn mock(seed: u64, cache_dir: Option<PathBuf>) -> Self {
        BackendConfig {
            kind: BackendKind::Mock { seed },
            cache_dir,
        }
    }

    pub fn model_name(&self) -> String {
        match &self.kind {
            BackendKind::Mock { .. } => DEFAULT_MODEL.to_string(),
            BackendKind::Http(http) => http.model.clone(),
        }
    }
}

/// Instantiate the configured backend, wrapped in the cache layer when a
/// cache directory is set.
pub fn build_backend(config: &BackendConfig) -> Result<Arc<dyn ChatBackend>, GatewayError> {
    let inner: Arc<dyn ChatBackend> = match &config.kind {
        BackendKind::Mock { seed } => Arc::new(MockBackend::new(*seed)),
        BackendKind::Http(http) => Arc::new(HttpBackend::new(http.clone())?),
    };
    match &config.cache_dir {
        Some(dir) => Ok(Arc::new(CachedBackend::new(inner, dir.clone())?)),
        None => Ok(inner),
    }
}

/// Run-wide knobs shared by every module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Trials per evaluation; results are averaged.
    pub repeats: u32,
    pub backend: BackendConfig,
    pub ablation: AblationFlags,
    /// Cap on adversarial training intensity relative to naive training.
    pub adversarial_iteration_multiplier: u32,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.repeats == 0 {
            return Err(HarnessError::Config("repeats must be >= 1".into()));
        }
        if self.adversarial_iteration_multiplier == 0
            || self.adversarial_iteration_multiplier > crate::model::MAX_ADVERSARIAL_MULTIPLIER
        {
            return Err(HarnessError::Config(format!(
                "adversarial_iteration_multiplier must be in 1..={}",
                crate::model::MAX_ADVERSARIAL_MULTIPLIER
            )));
        }
        Ok(())
    }
}

/// Which featurization path evaluation runs through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeaturizerChoice {
    /// Segment-aware (order-invariant) hashed n-grams.
    Segment,
    /// Position-blocked baseline without boundary recovery (order-sensitive).
    Embedding,
}

impl FeaturizerChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            FeaturizerChoice::Segment => "segment",
            FeaturizerChoice::Embedding => "embedding",
        }
    }
}

/// A fully wired experiment. Construction is cheap; heavy work happens in
/// the train/evaluate calls.
pub struct Experiment {
    pub backend: Arc<dyn ChatBackend>,
    pub templates: TemplateSet,
    pub run: RunConfig,
    pub perturbation: PerturbationConfig,
    pub pool: InstructionPool,
    pub train: TrainConfig,
    pub featurizer_choice: FeaturizerChoice,
    pub feature_dim: usize,
    pub ngram: usize,
    pub metric: MetricKind,
    pub noisy_mode: NoisyMode,
    pub config_hash: String,
}

impl Experiment {
    pub fn new(run: RunConfig) -> Result<Self, HarnessError> {
        run.validate()?;
        let backend = build_backend(&run.backend)?;
        Ok(Experiment {
            backend,
            templates: TemplateSet::builtin(),
            run,
            perturbation: PerturbationConfig::default(),
            pool: InstructionPool::builtin(),
            train: TrainConfig {
                epochs: 8,
                learning_rate: 0.5,
                l2: 1e-4,
                batch_size: 8,
                mode: TrainMode::Naive,
            },
            featurizer_choice: FeaturizerChoice::Segment,
            feature_dim: 96,
            ngram: 2,
            metric: MetricKind::Accuracy,
            noisy_mode: NoisyMode::PerModality,
            config_hash: String::new(),
        })
    }

    fn model_name(&self) -> String {
        self.run.backend.model_name()
    }

    fn pipeline(&self) -> AlignmentPipeline<'_> {
        AlignmentPipeline::new(
            self.backend.as_ref(),
            &self.templates,
            self.model_name(),
            self.run.seed,
        )
    }

    fn featurizer(&self) -> Result<Featurizer, ModelError> {
        Featurizer::new(self.feature_dim, self.ngram)
    }

    fn embedding_featurizer(&self) -> Result<EmbeddingFeaturizer, ModelError> {
        EmbeddingFeaturizer::new(self.feature_dim, self.ngram)
    }

    /// Bootstrap the one-shot demonstration from the first training sample.
    /// Skipped (None) when alignment is ablated away.
    pub fn bootstrap(&self, train: &Dataset) -> Result<Option<Demonstration>, HarnessError> {
        if !self.run.ablation.use_alignment {
            return Ok(None);
        }
        Ok(Some(self.pipeline().bootstrap_demonstration(&train.samples)?))
    }

    /// Align one sample into a unified prompt, with an optional modality
    /// order for the transformed segments.
    pub fn unified_for(
        &self,
        sample: &MultimodalSample,
        demo: Option<&Demonstration>,
        label_space: &str,
        order: Option<&[Modality]>,
    ) -> Result<UnifiedText, HarnessError> {
        let transformed = transform_modalities(sample);
        let index_order = order.map(|modalities| modality_order(&transformed, modalities));
        Ok(self.pipeline().align_sample(
            sample,
            demo,
            label_space,
            self.run.ablation.use_alignment,
            index_order.as_deref(),
        )?)
    }

    /// Embedding-baseline slots: channel texts in presented order with
    /// `None` holes for empty or dropped channels. The baseline consumes
    /// transformed channels only (no LLM alignment, matching embedding
    /// methods).
    fn embedding_slots(sample: &MultimodalSample, order: &[Modality]) -> Vec<Option<String>> {
        order
            .iter()
            .map(|modality| {
                let text = match modality {
                    Modality::Tabular => {
                        if sample.tabular.is_empty() {
                            String::new()
                        } else {
                            crate::pipeline::serialize_tabular(&sample.tabular).text
                        }
                    }
                    Modality::Image => sample.caption.clone(),
                    Modality::Text => sample.free_text.clone(),
                };
                (!text.is_empty()).then_some(text)
            })
            .collect()
    }

    fn featurize_sample(
        &self,
        sample: &MultimodalSample,
        demo: Option<&Demonstration>,
        label_space: &str,
        order: Option<&[Modality]>,
        zero_slots: &[Modality],
    ) -> Result<FeatureVector, HarnessError> {
        match self.featurizer_choice {
            FeaturizerChoice::Segment => {
                let unified = self.unified_for(sample, demo, label_space, order)?;
                Ok(self.featurizer()?.featurize(&unified))
            }
            FeaturizerChoice::Embedding => {
                let presented: Vec<Modality> = order
                    .map(|o| o.to_vec())
                    .unwrap_or_else(|| Modality::ALL.to_vec());
                let mut slots = Self::embedding_slots(sample, &presented);
                for (position, modality) in presented.iter().enumerate() {
                    if zero_slots.contains(modality) {
                        slots[position] = None;
                    }
                }
                let slot_refs: Vec<Option<&str>> =
                    slots.iter().map(|s| s.as_deref()).collect();
                Ok(self.embedding_featurizer()?.featurize_slots(&slot_refs))
            }
        }
    }

    /// Featurize every sample through the clean pipeline.
    pub fn clean_features(
        &self,
        dataset: &Dataset,
        demo: Option<&Demonstration>,
    ) -> Result<Vec<(FeatureVector, Label)>, HarnessError> {
        let label_space = crate::pipeline::label_space_text(dataset.task);
        dataset
            .samples
            .iter()
            .map(|sample| {
                let features = self.featurize_sample(sample, demo, &label_space, None, &[])?;
                Ok((features, sample.label.clone()))
            })
            .collect()
    }

    /// Apply one scenario condition to a sample and featurize the result.
    fn condition_features_for_sample(
        &self,
        sample: &MultimodalSample,
        condition: &ScenarioCondition,
        repeat: u32,
        demo: Option<&Demonstration>,
        label_space: &str,
    ) -> Result<FeatureVector, HarnessError> {
        let corrupt_seed = |channel: &str| {
            rng::derive_seed(
                condition.seed,
                "corrupt",
                &format!("{channel}|{repeat}|{}", sample.id),
            )
        };
        match &condition.kind {
            ConditionKind::Noisy {
                target,
                level_index,
                level,
            } => {
                let mut corrupted = sample.clone();
                // Single-target conditions carry their resolved level; joint
                // sweeps look each modality's level up by grid position.
                let level_for = |modality: Modality| match target {
                    Some(t) if *t == modality => Some(*level),
                    Some(_) => None,
                    None => Some(corruption::level_grid(modality)[*level_index]),
                };
                if let Some(level) = level_for(Modality::Tabular) {
                    if !corrupted.tabular.is_empty() {
                        corrupted.tabular = corruption::corrupt_tabular(
                            &corrupted.tabular,
                            level,
                            corrupt_seed("tabular"),
                        )?;
                    }
                }
                if let Some(level) = level_for(Modality::Image) {
                    if !corrupted.caption.is_empty() {
                        let segment =
                            TextSegment::new(Modality::Image, Stage::Raw, corrupted.caption.clone());
                        corrupted.caption = corruption::corrupt_image(
                            &segment,
                            level,
                            corrupt_seed("image"),
                            sample.image_path.as_deref(),
                            None,
                        )?
                        .text;
                    }
                }
                if let Some(level) = level_for(Modality::Text) {
                    if !corrupted.free_text.is_empty() {
                        let segment =
                            TextSegment::new(Modality::Text, Stage::Raw, corrupted.free_text.clone());
                        corrupted.free_text =
                            corruption::corrupt_text(&segment, level, corrupt_seed("text"))?.text;
                    }
                }
                self.featurize_sample(&corrupted, demo, label_space, None, &[])
            }
            ConditionKind::Dynamic { order } => {
                self.featurize_sample(sample, demo, label_space, Some(order), &[])
            }
            ConditionKind::Missing { dropped } => {
                let present = sample.present_modalities();
                let effective: Vec<Modality> = dropped
                    .iter()
                    .copied()
                    .filter(|m| present.contains(m))
                    .collect();
                match self.featurizer_choice {
                    FeaturizerChoice::Segment => {
                        if effective.is_empty() || effective.len() >= present.len() {
                            // Nothing droppable without emptying the sample.
                            return self.featurize_sample(sample, demo, label_space, None, &[]);
                        }
                        let reduced = corruption::drop_modalities_sample(sample, &effective)?;
                        self.featurize_sample(&reduced, demo, label_space, None, &[])
                    }
                    FeaturizerChoice::Embedding => {
                        // Zero vectors fill the dropped slots.
                        self.featurize_sample(sample, demo, label_space, None, &effective)
                    }
                }
            }
        }
    }

    /// Pre-generate per-epoch adversarial feature sets for text-adversarial
    /// training. One example per sample per epoch (times the configured
    /// per-sample count), all LLM traffic through the backend (cached when
    /// the cache layer is on).
    fn adversarial_features(
        &self,
        train: &Dataset,
        demo: Option<&Demonstration>,
    ) -> Result<Vec<Vec<(FeatureVector, Label)>>, HarnessError> {
        let label_space = crate::pipeline::label_space_text(train.task);
        let featurizer = self.featurizer()?;
        let mut per_epoch = Vec::with_capacity(self.train.epochs as usize);
        for epoch in 0..self.train.epochs {
            let mut epoch_set = Vec::new();
            for sample in &train.samples {
                let unified = self.unified_for(sample, demo, &label_space, None)?;
                for copy in 0..self.perturbation.adversarial_per_sample {
                    let seed = rng::derive_seed(
                        self.run.seed,
                        "adv_gen",
                        &format!("{epoch}|{copy}|{}", sample.id),
                    );
                    let example = adversarial_perturb(
                        &unified,
                        &sample.label,
                        &self.pool,
                        &self.perturbation,
                        seed,
                        self.backend.as_ref(),
                        &self.model_name(),
                    )?;
                    epoch_set.push((featurizer.featurize(&example.adversarial), sample.label.clone()));
                }
            }
            per_epoch.push(epoch_set);
        }
        Ok(per_epoch)
    }

    /// Train the configured downstream model. Text-adversarial mode honors
    /// the ablation flag: with perturbation off it degrades to naive
    /// training on the clean pipeline outputs.
    pub fn train_model(
        &self,
        train: &Dataset,
        demo: Option<&Demonstration>,
    ) -> Result<(LinearModel, TrainStats), HarnessError> {
        let clean = self.clean_features(train, demo)?;
        let dim = self.feature_dim;
        let init = LinearModel::zeros(train.task, dim);
        let train_seed = rng::derive_seed(self.run.seed, "train", &train.name);
        match &self.train.mode {
            TrainMode::TextAdversarial { .. } if self.run.ablation.use_perturbation => {
                let adversarial = self.adversarial_features(train, demo)?;
                Ok(crate::model::train_adversarial_text(
                    init,
                    &clean,
                    &adversarial,
                    &self.train,
                    train_seed,
                )?)
            }
            TrainMode::TextAdversarial { .. } => {
                let naive = TrainConfig {
                    mode: TrainMode::Naive,
                    ..self.train.clone()
                };
                Ok(crate::model::train(init, &clean, &naive, train_seed)?)
            }
            _ => Ok(crate::model::train(init, &clean, &self.train, train_seed)?),
        }
    }

    /// Modalities present anywhere in the dataset, canonical order.
    pub fn dataset_modalities(dataset: &Dataset) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .filter(|m| {
                dataset
                    .samples
                    .iter()
                    .any(|s| s.present_modalities().contains(m))
            })
            .collect()
    }

    pub fn grid(&self, kind: ScenarioKind, dataset: &Dataset) -> Result<ScenarioGrid, HarnessError> {
        let modalities = Self::dataset_modalities(dataset);
        let base_seed = rng::derive_seed(self.run.seed, "scenario", kind.as_str());
        Ok(corruption::scenario_grid(kind, &modalities, self.noisy_mode, base_seed)?)
    }

    /// Sweep a scenario grid: clean metric, per-condition metrics averaged
    /// over repeats, drop ratios, and the documented aggregate.
    pub fn run_scenario(
        &self,
        model: &LinearModel,
        test: &Dataset,
        grid: &ScenarioGrid,
        demo: Option<&Demonstration>,
    ) -> Result<RobustnessReport, HarnessError> {
        if grid.conditions.is_empty() {
            return Err(HarnessError::Config("scenario grid is empty".into()));
        }
        if !self.metric.matches_task(test.task) {
            return Err(HarnessError::Eval(EvalError::MetricTaskMismatch {
                metric: self.metric,
            }));
        }
        let label_space = crate::pipeline::label_space_text(test.task);
        let clean_features = self.clean_features(test, demo)?;
        let clean = eval::evaluate(model, &clean_features, self.metric)?;

        // metric sums per condition, ratio sums and undefined counts.
        let mut metric_sums = vec![0.0f64; grid.conditions.len()];
        let mut ratio_sums = vec![0.0f64; grid.conditions.len()];
        let mut ratio_defined = vec![0u32; grid.conditions.len()];
        let mut per_repeat_aggregate_ratio = Vec::with_capacity(self.run.repeats as usize);

        for repeat in 0..self.run.repeats {
            let mut repeat_ratios = Vec::with_capacity(grid.conditions.len());
            for (slot, condition) in grid.conditions.iter().enumerate() {
                let features: Vec<(FeatureVector, Label)> = test
                    .samples
                    .iter()
                    .map(|sample| {
                        let f = self.condition_features_for_sample(
                            sample,
                            condition,
                            repeat,
                            demo,
                            &label_space,
                        )?;
                        Ok((f, sample.label.clone()))
                    })
                    .collect::<Result<_, HarnessError>>()?;
                let metric = eval::evaluate(model, &features, self.metric)?;
                metric_sums[slot] += metric.value;
                match eval::drop_ratio(&clean, &metric) {
                    Ok(ratio) => {
                        ratio_sums[slot] += ratio;
                        ratio_defined[slot] += 1;
                        repeat_ratios.push(ratio);
                    }
                    Err(EvalError::UndefinedDropRatio) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            if !repeat_ratios.is_empty() {
                per_repeat_aggregate_ratio
                    .push(repeat_ratios.iter().sum::<f64>() / repeat_ratios.len() as f64);
            }
        }

        let repeats = f64::from(self.run.repeats);
        let per_condition: Vec<ConditionResult> = grid
            .conditions
            .iter()
            .enumerate()
            .map(|(slot, condition)| ConditionResult {
                condition: condition.clone(),
                metric: MetricValue::new(self.metric, metric_sums[slot] / repeats),
                drop_ratio: (ratio_defined[slot] == self.run.repeats)
                    .then(|| ratio_sums[slot] / repeats),
            })
            .collect();
        let undefined = per_condition.iter().filter(|c| c.drop_ratio.is_none()).count() as u32;
        // Mean over conditions first (inside each repeat), then over repeats.
        let mean_drop_ratio = (!per_repeat_aggregate_ratio.is_empty() && undefined == 0).then(|| {
            per_repeat_aggregate_ratio.iter().sum::<f64>() / per_repeat_aggregate_ratio.len() as f64
        });
        let mean_metric =
            per_condition.iter().map(|c| c.metric.value).sum::<f64>() / per_condition.len() as f64;

        Ok(RobustnessReport {
            schema_version: REPORT_SCHEMA_VERSION,
            dataset: test.name.clone(),
            scenario: grid.kind.as_str().to_string(),
            repeats: self.run.repeats,
            clean,
            per_condition,
            aggregate: Aggregate {
                mean_metric,
                mean_drop_ratio,
                undefined_drop_ratios: undefined,
            },
            metadata: ReportMetadata {
                master_seed: self.run.seed,
                config_hash: self.config_hash.clone(),
                use_alignment: self.run.ablation.use_alignment,
                use_perturbation: self.run.ablation.use_perturbation,
                image_noise_proxy: true,
                noisy_mode: matches!(grid.kind, ScenarioKind::Noisy)
                    .then(|| match self.noisy_mode {
                        NoisyMode::PerModality => "per_modality".to_string(),
                        NoisyMode::Joint => "joint".to_string(),
                    }),
                featurizer: self.featurizer_choice.as_str().to_string(),
                train_mode: train_mode_label(&self.train.mode),
                aggregation: "conditions-then-repeats".into(),
            },
        })
    }

    /// Train and evaluate one scenario end to end.
    pub fn evaluate_scenario(
        &self,
        train: &Dataset,
        test: &Dataset,
        kind: ScenarioKind,
    ) -> Result<RobustnessReport, HarnessError> {
        let demo = self.bootstrap(train)?;
        let (model, _) = self.train_model(train, demo.as_ref())?;
        let grid = self.grid(kind, test)?;
        self.run_scenario(&model, test, &grid, demo.as_ref())
    }
}

/// Analysis hook: what the model predicts for an adversarial rewrite.
/// Recorded alongside dumps for inspection; generation is never gated on it.
pub fn adversarial_prediction(
    model: &LinearModel,
    featurizer: &Featurizer,
    example: &crate::perturb::AdversarialExample,
) -> Label {
    model.predict(&featurizer.featurize(&example.adversarial))
}

pub fn train_mode_label(mode: &TrainMode) -> String {
    match mode {
        TrainMode::Naive => "naive".into(),
        TrainMode::NoiseInjection { sigma } => format!("noise_injection(sigma={sigma})"),
        TrainMode::Dropout { rate } => format!("dropout(rate={rate})"),
        TrainMode::Pgd { epsilon, alpha, steps } => {
            format!("pgd(epsilon={epsilon},alpha={alpha},steps={steps})")
        }
        TrainMode::TextAdversarial { multiplier } => {
            format!("text_adversarial(multiplier={multiplier})")
        }
    }
}

/// The four Table-3 ablation cells, identical seeds, labeled reports.
pub fn run_ablation(
    base: &Experiment,
    train: &Dataset,
    test: &Dataset,
    kind: ScenarioKind,
) -> Result<Vec<(String, RobustnessReport)>, HarnessError> {
    let cells = [
        ("full", AblationFlags { use_alignment: true, use_perturbation: true }),
        ("w/o alignment", AblationFlags { use_alignment: false, use_perturbation: true }),
        ("w/o perturbation", AblationFlags { use_alignment: true, use_perturbation: false }),
        ("w/o both", AblationFlags { use_alignment: false, use_perturbation: false }),
    ];
    let mut reports = Vec::with_capacity(cells.len());
    for (label, ablation) in cells {
        let run = RunConfig {
            ablation,
            ..base.run.clone()
        };
        let experiment = Experiment {
            backend: base.backend.clone(),
            templates: base.templates.clone(),
            run,
            perturbation: base.perturbation.clone(),
            pool: base.pool.clone(),
            train: base.train.clone(),
            featurizer_choice: base.featurizer_choice,
            feature_dim: base.feature_dim,
            ngram: base.ngram,
            metric: base.metric,
            noisy_mode: base.noisy_mode,
            config_hash: base.config_hash.clone(),
        };
        let report = experiment.evaluate_scenario(train, test, kind)?;
        reports.push((label.to_string(), report));
    }
    Ok(reports)
}
