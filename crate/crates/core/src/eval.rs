//! Metrics, drop ratios, and robustness reports.
//!
//! Relative robustness is the raw metric value under an imperfection
//! condition; effective robustness is the drop ratio against the clean
//! metric: `perturbed / clean` for higher-is-better metrics and
//! `clean / perturbed` for lower-is-better ones, so 1.0 always means no
//! degradation and smaller means worse. Reports aggregate mean-over-
//! conditions first, then mean-over-repeats, and serialize byte-stably to
//! JSON plus a flat CSV for external plotting.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corruption::ScenarioCondition;
use crate::data::{Label, Task};
use crate::model::{FeatureVector, LinearModel};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Accuracy,
    Mse,
    Rmse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl MetricKind {
    pub fn direction(self) -> Direction {
        match self {
            MetricKind::Accuracy => Direction::HigherBetter,
            MetricKind::Mse | MetricKind::Rmse => Direction::LowerBetter,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Mse => "mse",
            MetricKind::Rmse => "rmse",
        }
    }

    pub fn matches_task(self, task: Task) -> bool {
        match self {
            MetricKind::Accuracy => matches!(task, Task::Classification { .. }),
            MetricKind::Mse | MetricKind::Rmse => matches!(task, Task::Regression),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub kind: MetricKind,
    pub value: f64,
    pub direction: Direction,
}

impl MetricValue {
    pub fn new(kind: MetricKind, value: f64) -> Self {
        MetricValue {
            kind,
            value,
            direction: kind.direction(),
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty dataset")]
    EmptyData,
    #[error("metric {metric:?} does not match task")]
    MetricTaskMismatch { metric: MetricKind },
    #[error("metric kinds differ: {clean:?} vs {perturbed:?}")]
    KindMismatch { clean: MetricKind, perturbed: MetricKind },
    #[error("drop ratio undefined: division by zero metric value")]
    UndefinedDropRatio,
    #[error("report I/O at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report parse: {0}")]
    Parse(String),
}

/// Evaluate a trained model over featurized samples.
pub fn evaluate(
    model: &LinearModel,
    data: &[(FeatureVector, Label)],
    metric: MetricKind,
) -> Result<MetricValue, EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptyData);
    }
    if !metric.matches_task(model.task) {
        return Err(EvalError::MetricTaskMismatch { metric });
    }
    let value = match metric {
        MetricKind::Accuracy => {
            let correct = data
                .iter()
                .filter(|(x, label)| &model.predict(x) == label)
                .count();
            correct as f64 / data.len() as f64
        }
        MetricKind::Mse | MetricKind::Rmse => {
            let mse = data
                .iter()
                .map(|(x, label)| {
                    let Label::Score(truth) = label else {
                        return f64::NAN;
                    };
                    let Label::Score(predicted) = model.predict(x) else {
                        return f64::NAN;
                    };
                    (predicted - truth) * (predicted - truth)
                })
                .sum::<f64>()
                / data.len() as f64;
            if metric == MetricKind::Rmse {
                mse.sqrt()
            } else {
                mse
            }
        }
    };
    Ok(MetricValue::new(metric, value))
}

/// Effective robustness: retained-performance ratio between the perturbed
/// and clean evaluations. 1.0 means no degradation.
pub fn drop_ratio(clean: &MetricValue, perturbed: &MetricValue) -> Result<f64, EvalError> {
    if clean.kind != perturbed.kind {
        return Err(EvalError::KindMismatch {
            clean: clean.kind,
            perturbed: perturbed.kind,
        });
    }
    let ratio = match clean.kind.direction() {
        Direction::HigherBetter => {
            if clean.value == 0.0 {
                return Err(EvalError::UndefinedDropRatio);
            }
            perturbed.value / clean.value
        }
        Direction::LowerBetter => {
            if perturbed.value == 0.0 {
                return Err(EvalError::UndefinedDropRatio);
            }
            clean.value / perturbed.value
        }
    };
    Ok(ratio)
}

/// Per-condition row of a robustness report, averaged across repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: ScenarioCondition,
    pub metric: MetricValue,
    /// `None` when the ratio was undefined for any repeat.
    pub drop_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_metric: f64,
    /// Mean over conditions with a defined ratio; `None` if none had one.
    pub mean_drop_ratio: Option<f64>,
    pub undefined_drop_ratios: u32,
}

/// Run-level metadata: flags that change how the numbers must be read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub master_seed: u64,
    pub config_hash: String,
    pub use_alignment: bool,
    pub use_perturbation: bool,
    /// True when image noise was proxied by caption word dropout.
    pub image_noise_proxy: bool,
    pub noisy_mode: Option<String>,
    /// "segment" or "embedding".
    pub featurizer: String,
    pub train_mode: String,
    /// Fixed aggregation order, recorded for the reader.
    pub aggregation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub schema_version: u32,
    pub dataset: String,
    pub scenario: String,
    pub repeats: u32,
    pub clean: MetricValue,
    pub per_condition: Vec<ConditionResult>,
    pub aggregate: Aggregate,
    pub metadata: ReportMetadata,
}

impl RobustnessReport {
    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("report serializes");
        out.push('\n');
        out
    }

    pub fn from_json(raw: &str) -> Result<Self, EvalError> {
        serde_json::from_str(raw).map_err(|e| EvalError::Parse(e.to_string()))
    }

    /// Flat CSV: one row per condition.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,level,metric,drop_ratio\n");
        for row in &self.per_condition {
            let level = row
                .condition
                .level()
                .map(|l| format!("{l}"))
                .unwrap_or_default();
            let ratio = row.drop_ratio.map(|r| format!("{r}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.condition.id, level, row.metric.value, ratio
            ));
        }
        out
    }
}

/// Write `report.json` and `report.csv` under `out_dir`, prefixed by the
/// report's scenario label. Byte-stable for identical reports.
pub fn persist_report(report: &RobustnessReport, out_dir: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
    fs::create_dir_all(out_dir).map_err(|source| EvalError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let json_path = out_dir.join(format!("report-{}.json", report.scenario));
    let csv_path = out_dir.join(format!("report-{}.csv", report.scenario));
    fs::write(&json_path, report.to_json()).map_err(|source| EvalError::Io {
        path: json_path.display().to_string(),
        source,
    })?;
    fs::write(&csv_path, report.to_csv()).map_err(|source| EvalError::Io {
        path: csv_path.display().to_string(),
        source,
    })?;
    Ok((json_path, csv_path))
}

pub fn load_report(path: &Path) -> Result<RobustnessReport, EvalError> {
    let raw = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    RobustnessReport::from_json(&raw)
}
