//! Domain types, dataset ingestion, and deterministic splitting.
//!
//! A dataset lives in a line-delimited JSON manifest (UTF-8). The first line
//! is a header record declaring the dataset name, task, and (for
//! classification) class count; every following line is one sample:
//!
//! ```text
//! {"name":"pets","task":"classification","num_classes":5}
//! {"id":"s0","tabular":[["type of pet","Dog"]],"caption":"A brown dog.",
//!  "free_text":"Gentle and calm.","label":{"class":2}}
//! ```
//!
//! Tabular values are ingested as strings, numbers kept verbatim; the image
//! modality is represented by a precomputed caption, with an optional
//! `image_path` field passed through untouched for callers that plug in
//! their own captioner. Ingestion is total: a manifest either yields a
//! fully validated [`Dataset`] or a structured error, never a partial one.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// One input channel of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Tabular,
    Image,
    Text,
}

impl Modality {
    /// All modalities in canonical order: tabular, image, text.
    pub const ALL: [Modality; 3] = [Modality::Tabular, Modality::Image, Modality::Text];

    /// Canonical block index used by featurizers and segment ordering.
    pub fn canonical_index(self) -> usize {
        match self {
            Modality::Tabular => 0,
            Modality::Image => 1,
            Modality::Text => 2,
        }
    }

    /// Upper-case tag used in segment boundary markers.
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Tabular => "TABULAR",
            Modality::Image => "IMAGE",
            Modality::Text => "TEXT",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Modality> {
        match tag {
            "TABULAR" => Some(Modality::Tabular),
            "IMAGE" => Some(Modality::Image),
            "TEXT" => Some(Modality::Text),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Tabular => "tabular",
            Modality::Image => "image",
            Modality::Text => "text",
        })
    }
}

/// Ground-truth target for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    /// Class index for classification tasks.
    Class(u32),
    /// Real-valued target for regression tasks.
    Score(f64),
}

/// One multimodal record: tabular fields, an image caption, free text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSample {
    pub id: String,
    /// Ordered `(column name, value)` pairs; names unique within a sample.
    pub tabular: Vec<(String, String)>,
    /// Textual surrogate for the image modality.
    pub caption: String,
    pub free_text: String,
    pub label: Label,
    /// Raw image path, passed through untouched for external captioners.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
}

impl MultimodalSample {
    /// Modalities with non-empty content, in canonical order.
    pub fn present_modalities(&self) -> Vec<Modality> {
        let mut present = Vec::new();
        if !self.tabular.is_empty() {
            present.push(Modality::Tabular);
        }
        if !self.caption.is_empty() {
            present.push(Modality::Image);
        }
        if !self.free_text.is_empty() {
            present.push(Modality::Text);
        }
        present
    }
}

/// Prediction task declared by the manifest header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification { num_classes: u32 },
    Regression,
}

/// A validated, immutable dataset. Safe to share read-only across workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub task: Task,
    pub samples: Vec<MultimodalSample>,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest is empty: {0}")]
    EmptyManifest(String),
    #[error("manifest header (line 1) is invalid: {0}")]
    Header(String),
    #[error("manifest line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("sample {id}: duplicate tabular column {column:?}")]
    DuplicateColumn { id: String, column: String },
    #[error("duplicate sample id {id:?}")]
    DuplicateId { id: String },
    #[error("sample {id}: all three modality channels are empty")]
    AllChannelsEmpty { id: String },
    #[error("sample {id}: label {label} does not match task {task}")]
    LabelTaskMismatch { id: String, label: String, task: String },
    #[error("sample {id}: class index {index} out of range for {num_classes} classes")]
    ClassOutOfRange { id: String, index: u32, num_classes: u32 },
    #[error("sample {id}: regression score is not finite")]
    NonFiniteScore { id: String },
    #[error("dataset has no samples")]
    EmptyDataset,
    #[error("train fraction {fraction} leaves an empty split for {len} samples")]
    DegenerateSplit { fraction: f64, len: usize },
}

#[derive(Debug, Deserialize, Serialize)]
struct ManifestHeader {
    name: String,
    task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_classes: Option<u32>,
}

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRecord {
    id: String,
    #[serde(default)]
    tabular: Vec<(String, String)>,
    #[serde(default)]
    caption: String,
    #[serde(default)]
    free_text: String,
    label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_path: Option<String>,
}

fn validate_sample(sample: &MultimodalSample, task: Task) -> Result<(), DataError> {
    let mut seen = BTreeSet::new();
    for (name, _) in &sample.tabular {
        if !seen.insert(name.clone()) {
            return Err(DataError::DuplicateColumn {
                id: sample.id.clone(),
                column: name.clone(),
            });
        }
    }
    if sample.tabular.is_empty() && sample.caption.is_empty() && sample.free_text.is_empty() {
        return Err(DataError::AllChannelsEmpty {
            id: sample.id.clone(),
        });
    }
    match (&sample.label, task) {
        (Label::Class(index), Task::Classification { num_classes }) => {
            if *index >= num_classes {
                return Err(DataError::ClassOutOfRange {
                    id: sample.id.clone(),
                    index: *index,
                    num_classes,
                });
            }
        }
        (Label::Score(score), Task::Regression) => {
            if !score.is_finite() {
                return Err(DataError::NonFiniteScore {
                    id: sample.id.clone(),
                });
            }
        }
        (Label::Score(_), Task::Classification { .. }) => {
            return Err(DataError::LabelTaskMismatch {
                id: sample.id.clone(),
                label: "score".into(),
                task: "classification".into(),
            });
        }
        (Label::Class(_), Task::Regression) => {
            return Err(DataError::LabelTaskMismatch {
                id: sample.id.clone(),
                label: "class".into(),
                task: "regression".into(),
            });
        }
    }
    Ok(())
}

/// Load and validate a dataset manifest. Load order equals manifest order.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, DataError> {
    let raw = fs::read_to_string(manifest_path).map_err(|source| DataError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    parse_manifest(&raw, &manifest_path.display().to_string())
}

/// Parse manifest text. Split out from [`load_dataset`] so in-memory
/// manifests can be validated without touching the filesystem.
pub fn parse_manifest(raw: &str, origin: &str) -> Result<Dataset, DataError> {
    let mut lines = raw
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| DataError::EmptyManifest(origin.to_string()))?;
    let header: ManifestHeader =
        serde_json::from_str(header_line).map_err(|e| DataError::Header(e.to_string()))?;
    let task = match header.task.as_str() {
        "classification" => {
            let num_classes = header
                .num_classes
                .ok_or_else(|| DataError::Header("classification requires num_classes".into()))?;
            if num_classes == 0 {
                return Err(DataError::Header("num_classes must be positive".into()));
            }
            Task::Classification { num_classes }
        }
        "regression" => Task::Regression,
        other => {
            return Err(DataError::Header(format!(
                "unknown task {other:?} (expected \"classification\" or \"regression\")"
            )));
        }
    };

    let mut samples = Vec::new();
    let mut ids = BTreeSet::new();
    for (idx, line) in lines {
        let record: ManifestRecord =
            serde_json::from_str(line).map_err(|e| DataError::Record {
                line: idx + 1,
                message: e.to_string(),
            })?;
        let sample = MultimodalSample {
            id: record.id,
            tabular: record.tabular,
            caption: record.caption,
            free_text: record.free_text,
            label: record.label,
            image_path: record.image_path,
        };
        if !ids.insert(sample.id.clone()) {
            return Err(DataError::DuplicateId { id: sample.id });
        }
        validate_sample(&sample, task)?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(Dataset {
        name: header.name,
        task,
        samples,
    })
}

/// Serialize a dataset back to manifest text (header line + one record per
/// sample). Byte-stable for identical datasets.
pub fn manifest_text(dataset: &Dataset) -> String {
    let (task, num_classes) = match dataset.task {
        Task::Classification { num_classes } => ("classification", Some(num_classes)),
        Task::Regression => ("regression", None),
    };
    let header = ManifestHeader {
        name: dataset.name.clone(),
        task: task.to_string(),
        num_classes,
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for sample in &dataset.samples {
        let record = ManifestRecord {
            id: sample.id.clone(),
            tabular: sample.tabular.clone(),
            caption: sample.caption.clone(),
            free_text: sample.free_text.clone(),
            label: sample.label.clone(),
            image_path: sample.image_path.clone(),
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Deterministic seeded train/test split. Disjoint and union-complete;
/// rerunning with the same seed yields byte-identical splits.
pub fn split_dataset(
    dataset: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if dataset.samples.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::DegenerateSplit {
            fraction: train_fraction,
            len: dataset.samples.len(),
        });
    }
    let n = dataset.samples.len();
    let train_len = (n as f64 * train_fraction).floor() as usize;
    if train_len == 0 || train_len == n {
        return Err(DataError::DegenerateSplit {
            fraction: train_fraction,
            len: n,
        });
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut stream = rng::stream(seed, "split", &dataset.name);
    indices.shuffle(&mut stream);
    let pick = |idx: &[usize]| Dataset {
        name: dataset.name.clone(),
        task: dataset.task,
        samples: idx.iter().map(|&i| dataset.samples[i].clone()).collect(),
    };
    Ok((pick(&indices[..train_len]), pick(&indices[train_len..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(lines: &[&str]) -> String {
        lines.join("\n")
    }

    fn sample_line(id: &str, class: u32) -> String {
        format!(
            r#"{{"id":"{id}","tabular":[["Age","3"],["Breed","Mixed"]],"caption":"A dog.","free_text":"Calm pet.","label":{{"class":{class}}}}}"#
        )
    }

    #[test]
    fn loads_minimal_classification_manifest() {
        let text = manifest(&[
            r#"{"name":"pets","task":"classification","num_classes":5}"#,
            &sample_line("a", 0),
            &sample_line("b", 4),
        ]);
        let ds = parse_manifest(&text, "test").unwrap();
        assert_eq!(ds.samples.len(), 2);
        assert_eq!(ds.task, Task::Classification { num_classes: 5 });
        assert_eq!(ds.samples[0].id, "a");
        assert_eq!(ds.samples[1].id, "b");
    }

    #[test]
    fn duplicate_column_names_sample_and_column() {
        let text = manifest(&[
            r#"{"name":"pets","task":"classification","num_classes":2}"#,
            r#"{"id":"s1","tabular":[["Age","3"],["Age","4"]],"caption":"c","free_text":"t","label":{"class":0}}"#,
        ]);
        let err = parse_manifest(&text, "test").unwrap_err();
        match err {
            DataError::DuplicateColumn { id, column } => {
                assert_eq!(id, "s1");
                assert_eq!(column, "Age");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn score_label_under_classification_is_rejected() {
        let text = manifest(&[
            r#"{"name":"pets","task":"classification","num_classes":2}"#,
            r#"{"id":"s1","tabular":[["Age","3"]],"caption":"c","free_text":"t","label":{"score":1.5}}"#,
        ]);
        let err = parse_manifest(&text, "test").unwrap_err();
        assert!(matches!(err, DataError::LabelTaskMismatch { .. }));
    }

    #[test]
    fn class_index_must_be_in_range() {
        let text = manifest(&[
            r#"{"name":"pets","task":"classification","num_classes":2}"#,
            &sample_line("s1", 2),
        ]);
        let err = parse_manifest(&text, "test").unwrap_err();
        assert!(matches!(err, DataError::ClassOutOfRange { index: 2, .. }));
    }

    #[test]
    fn all_empty_channels_rejected() {
        let text = manifest(&[
            r#"{"name":"pets","task":"classification","num_classes":2}"#,
            r#"{"id":"s1","tabular":[],"caption":"","free_text":"","label":{"class":0}}"#,
        ]);
        let err = parse_manifest(&text, "test").unwrap_err();
        assert!(matches!(err, DataError::AllChannelsEmpty { .. }));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_dataset(Path::new("/nonexistent/manifest.jsonl")).unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
    }

    fn ten_samples() -> Dataset {
        let mut lines = vec![r#"{"name":"ten","task":"classification","num_classes":3}"#.to_string()];
        for i in 0..10 {
            lines.push(sample_line(&format!("s{i}"), (i % 3) as u32));
        }
        parse_manifest(&lines.join("\n"), "test").unwrap()
    }

    #[test]
    fn split_is_deterministic_and_partitioning() {
        let ds = ten_samples();
        let (tr1, te1) = split_dataset(&ds, 0.8, 7).unwrap();
        let (tr2, te2) = split_dataset(&ds, 0.8, 7).unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(te1, te2);
        assert_eq!(tr1.samples.len(), 8);
        assert_eq!(te1.samples.len(), 2);
        let mut all: Vec<&str> = tr1
            .samples
            .iter()
            .chain(te1.samples.iter())
            .map(|s| s.id.as_str())
            .collect();
        all.sort_unstable();
        let mut expected: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        expected.sort();
        assert_eq!(all, expected.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn different_seeds_differ() {
        let ds = ten_samples();
        let (tr7, _) = split_dataset(&ds, 0.8, 7).unwrap();
        let (tr8, _) = split_dataset(&ds, 0.8, 8).unwrap();
        assert_ne!(tr7.samples, tr8.samples);
    }

    #[test]
    fn degenerate_split_errors() {
        let text = manifest(&[
            r#"{"name":"one","task":"classification","num_classes":2}"#,
            &sample_line("s0", 0),
        ]);
        let ds = parse_manifest(&text, "test").unwrap();
        assert!(matches!(
            split_dataset(&ds, 0.8, 1),
            Err(DataError::DegenerateSplit { .. })
        ));
    }

    #[test]
    fn manifest_round_trips() {
        let ds = ten_samples();
        let text = manifest_text(&ds);
        let back = parse_manifest(&text, "roundtrip").unwrap();
        assert_eq!(ds, back);
    }
}
