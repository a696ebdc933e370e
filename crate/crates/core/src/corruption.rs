//! Test-time corruption operators and scenario grids: graded noisy-modality
//! corruption, dynamic input-order permutation, and missing-modality
//! deletion.
//!
//! Insertion points are fixed: tabular column drop happens before
//! serialization, text word drop hits the raw text channel before alignment,
//! and the image proxy corrupts the caption before alignment, so the
//! alignment pipeline gets the chance to recover information downstream.
//! Every operator is deterministic given (input, condition, seed) and an
//! exact identity at level 0.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Modality, MultimodalSample};
use crate::pipeline::{Stage, TextSegment};
use crate::rng;

/// Word-dropout probability grid for the text channel.
pub const TEXT_LEVELS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
/// Noise-level grid for the image channel.
pub const IMAGE_LEVELS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
/// Column-drop probability grid for the tabular channel; mirrors the image
/// grid since only the 10%-90% range is fixed.
pub const TABULAR_LEVELS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// Caption-proxy scaling: image level L maps to word dropout at L/2, keeping
/// the proxy inside the text-dropout regime (level 0.9 -> rate 0.45).
pub const IMAGE_PROXY_SCALE: f64 = 0.5;

pub fn level_grid(modality: Modality) -> &'static [f64; 5] {
    match modality {
        Modality::Tabular => &TABULAR_LEVELS,
        Modality::Image => &IMAGE_LEVELS,
        Modality::Text => &TEXT_LEVELS,
    }
}

#[derive(Debug, Error)]
pub enum CorruptionError {
    #[error("probability {p} out of range [{lo}, {hi}]")]
    OutOfRange { p: f64, lo: f64, hi: f64 },
    #[error("segment is already corrupted")]
    AlreadyCorrupted,
    #[error("permutation size {n} outside guard range 1..=6")]
    PermutationGuard { n: usize },
    #[error("dropped set must be a non-empty proper subset of present modalities")]
    BadDropSet,
    #[error("image hook failed: {0}")]
    Hook(String),
}

fn check_range(p: f64, lo: f64, hi: f64) -> Result<(), CorruptionError> {
    if p.is_finite() && (lo..=hi).contains(&p) {
        Ok(())
    } else {
        Err(CorruptionError::OutOfRange { p, lo, hi })
    }
}

/// Drop each whitespace-delimited word independently with probability `p`,
/// joining survivors with single spaces.
fn drop_words_seeded(text: &str, p: f64, stream: &mut impl rand::Rng) -> String {
    text.split_whitespace()
        .filter(|_| !stream.random_bool(p))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Word dropout over a text segment; p in [0, 0.5]. p = 0 is the identity.
pub fn corrupt_text(segment: &TextSegment, p: f64, seed: u64) -> Result<TextSegment, CorruptionError> {
    check_range(p, 0.0, 0.5)?;
    if segment.stage == Stage::Corrupted {
        return Err(CorruptionError::AlreadyCorrupted);
    }
    if p == 0.0 {
        return Ok(segment.clone());
    }
    let mut stream = rng::stream(seed, "corrupt_text", &segment.modality.to_string());
    Ok(TextSegment::new(
        segment.modality,
        Stage::Corrupted,
        drop_words_seeded(&segment.text, p, &mut stream),
    ))
}

/// Column dropout over a tabular record; p in [0, 0.9]. Applied before
/// serialization.
pub fn corrupt_tabular(
    record: &[(String, String)],
    p: f64,
    seed: u64,
) -> Result<Vec<(String, String)>, CorruptionError> {
    check_range(p, 0.0, 0.9)?;
    if p == 0.0 {
        return Ok(record.to_vec());
    }
    let mut stream = rng::stream(seed, "corrupt_tabular", "");
    Ok(record
        .iter()
        .filter(|_| !stream.random_bool(p))
        .cloned()
        .collect())
}

/// Re-caption hook for callers with a raw-image pipeline: receives the
/// image reference (path when available, else the caption), the noise level,
/// and the seed, and returns the new caption.
pub type ImageHook<'a> = dyn Fn(&str, f64, u64) -> Result<String, CorruptionError> + 'a;

/// Image-channel corruption at a level in [0, 0.9]. With a hook, Gaussian
/// pixel noise and re-captioning are the hook's business and it is invoked
/// exactly once. Without one, the documented proxy corrupts the caption by
/// word dropout at `level * 0.5`; reports flag the proxy.
pub fn corrupt_image(
    caption_segment: &TextSegment,
    level: f64,
    seed: u64,
    image_ref: Option<&str>,
    hook: Option<&ImageHook<'_>>,
) -> Result<TextSegment, CorruptionError> {
    check_range(level, 0.0, 0.9)?;
    if segment_already_corrupted(caption_segment) {
        return Err(CorruptionError::AlreadyCorrupted);
    }
    if let Some(hook) = hook {
        let reference = image_ref.unwrap_or(&caption_segment.text);
        let caption = hook(reference, level, seed)?;
        return Ok(TextSegment::new(caption_segment.modality, Stage::Corrupted, caption));
    }
    if level == 0.0 {
        return Ok(caption_segment.clone());
    }
    let p = level * IMAGE_PROXY_SCALE;
    let mut stream = rng::stream(seed, "corrupt_image", "");
    Ok(TextSegment::new(
        caption_segment.modality,
        Stage::Corrupted,
        drop_words_seeded(&caption_segment.text, p, &mut stream),
    ))
}

fn segment_already_corrupted(segment: &TextSegment) -> bool {
    segment.stage == Stage::Corrupted
}

/// All n! orderings of 0..n in lexicographic order; n guarded to 1..=6.
pub fn enumerate_permutations(n: usize) -> Result<Vec<Vec<usize>>, CorruptionError> {
    if !(1..=6).contains(&n) {
        return Err(CorruptionError::PermutationGuard { n });
    }
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..n).collect();
    loop {
        out.push(current.clone());
        // Classic next-permutation step; returns to sorted order at the end.
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| current[i] < current[i + 1]) else {
            break;
        };
        let j = (i + 1..n).rev().find(|&j| current[j] > current[i]).expect("exists");
        current.swap(i, j);
        current[i + 1..].reverse();
    }
    Ok(out)
}

fn validate_drop_set(dropped: &[Modality], present: &[Modality]) -> Result<(), CorruptionError> {
    if dropped.is_empty() || dropped.len() >= present.len() {
        return Err(CorruptionError::BadDropSet);
    }
    let mut seen = std::collections::BTreeSet::new();
    for modality in dropped {
        if !present.contains(modality) || !seen.insert(*modality) {
            return Err(CorruptionError::BadDropSet);
        }
    }
    Ok(())
}

/// Remove the dropped modalities' segments entirely (the text-centric path:
/// no placeholder text is left behind).
pub fn drop_modalities_segments(
    segments: &[TextSegment],
    dropped: &[Modality],
) -> Result<Vec<TextSegment>, CorruptionError> {
    let mut present: Vec<Modality> = Vec::new();
    for segment in segments {
        if !present.contains(&segment.modality) {
            present.push(segment.modality);
        }
    }
    validate_drop_set(dropped, &present)?;
    Ok(segments
        .iter()
        .filter(|s| !dropped.contains(&s.modality))
        .cloned()
        .collect())
}

/// Clear the dropped channels of a sample before alignment.
pub fn drop_modalities_sample(
    sample: &MultimodalSample,
    dropped: &[Modality],
) -> Result<MultimodalSample, CorruptionError> {
    let present = sample.present_modalities();
    validate_drop_set(dropped, &present)?;
    let mut out = sample.clone();
    for modality in dropped {
        match modality {
            Modality::Tabular => out.tabular.clear(),
            Modality::Image => out.caption.clear(),
            Modality::Text => out.free_text.clear(),
        }
    }
    Ok(out)
}

/// One evaluation cell of a scenario grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ConditionKind {
    Noisy {
        /// Corrupted modality; `None` means all modalities jointly.
        target: Option<Modality>,
        /// Position in the per-modality level grid.
        level_index: usize,
        /// Resolved level for a single target, canonical image-grid value
        /// for joint conditions.
        level: f64,
    },
    Dynamic { order: Vec<Modality> },
    Missing { dropped: Vec<Modality> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioCondition {
    pub id: String,
    #[serde(flatten)]
    pub kind: ConditionKind,
    pub seed: u64,
}

impl ScenarioCondition {
    /// Numeric level for reports; permutation/missing conditions have none.
    pub fn level(&self) -> Option<f64> {
        match &self.kind {
            ConditionKind::Noisy { level, .. } => Some(*level),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Noisy,
    Dynamic,
    Missing,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Noisy => "noisy",
            ScenarioKind::Dynamic => "dynamic",
            ScenarioKind::Missing => "missing",
        }
    }
}

/// Whether noisy conditions corrupt one modality at a time or all jointly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisyMode {
    PerModality,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioGrid {
    pub kind: ScenarioKind,
    pub conditions: Vec<ScenarioCondition>,
}

/// Deterministic grid construction. Per-modality noisy mode yields one
/// condition per (modality, level); joint mode sweeps all modalities at each
/// grid position. Dynamic enumerates every permutation of the present
/// modalities; missing enumerates every proper non-empty dropped subset.
pub fn scenario_grid(
    kind: ScenarioKind,
    modalities: &[Modality],
    noisy_mode: NoisyMode,
    base_seed: u64,
) -> Result<ScenarioGrid, CorruptionError> {
    let mut conditions = Vec::new();
    let mut push = |id: String, kind: ConditionKind| {
        let seed = rng::derive_seed(base_seed, "condition", &id);
        conditions.push(ScenarioCondition { id, kind, seed });
    };
    match kind {
        ScenarioKind::Noisy => match noisy_mode {
            NoisyMode::PerModality => {
                for &modality in modalities {
                    let grid = level_grid(modality);
                    for (level_index, &level) in grid.iter().enumerate() {
                        push(
                            format!("noisy/{modality}/{level:.2}"),
                            ConditionKind::Noisy {
                                target: Some(modality),
                                level_index,
                                level,
                            },
                        );
                    }
                }
            }
            NoisyMode::Joint => {
                for (level_index, &level) in IMAGE_LEVELS.iter().enumerate() {
                    push(
                        format!("noisy/all/{level:.2}"),
                        ConditionKind::Noisy {
                            target: None,
                            level_index,
                            level,
                        },
                    );
                }
            }
        },
        ScenarioKind::Dynamic => {
            for order in enumerate_permutations(modalities.len())? {
                let modality_order: Vec<Modality> = order.iter().map(|&i| modalities[i]).collect();
                let label = modality_order
                    .iter()
                    .map(|m| m.to_string())
                    .collect::<Vec<_>>()
                    .join("-");
                push(
                    format!("dynamic/{label}"),
                    ConditionKind::Dynamic {
                        order: modality_order,
                    },
                );
            }
        }
        ScenarioKind::Missing => {
            let n = modalities.len();
            if n < 2 {
                return Err(CorruptionError::BadDropSet);
            }
            let mut subsets: Vec<Vec<Modality>> = Vec::new();
            for mask in 1u32..(1 << n) - 1 {
                let subset: Vec<Modality> = (0..n)
                    .filter(|&i| mask & (1 << i) != 0)
                    .map(|i| modalities[i])
                    .collect();
                subsets.push(subset);
            }
            subsets.sort_by_key(|s| (s.len(), s.iter().map(|m| m.canonical_index()).collect::<Vec<_>>()));
            for dropped in subsets {
                let label = dropped
                    .iter()
                    .map(|m| m.to_string())
                    .collect::<Vec<_>>()
                    .join("+");
                push(format!("missing/{label}"), ConditionKind::Missing { dropped });
            }
        }
    }
    let grid = ScenarioGrid { kind, conditions };
    debug_assert!(
        {
            let mut ids: Vec<&str> = grid.conditions.iter().map(|c| c.id.as_str()).collect();
            ids.sort_unstable();
            ids.windows(2).all(|w| w[0] != w[1])
        },
        "duplicate condition ids"
    );
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;

    fn text_segment(text: &str) -> TextSegment {
        TextSegment::new(Modality::Text, Stage::Transformed, text)
    }

    #[test]
    fn corrupt_text_identity_at_zero() {
        let segment = text_segment("alpha beta gamma");
        let out = corrupt_text(&segment, 0.0, 5).unwrap();
        assert_eq!(out, segment);
    }

    #[test]
    fn corrupt_text_is_deterministic() {
        let segment = text_segment("one two three four five six");
        let a = corrupt_text(&segment, 0.3, 5).unwrap();
        let b = corrupt_text(&segment, 0.3, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.stage, Stage::Corrupted);
    }

    #[test]
    fn corrupt_text_rejects_out_of_range_and_recorrupt() {
        let segment = text_segment("alpha");
        assert!(matches!(
            corrupt_text(&segment, 0.6, 5),
            Err(CorruptionError::OutOfRange { .. })
        ));
        let corrupted = corrupt_text(&segment, 0.1, 5).unwrap();
        assert!(matches!(
            corrupt_text(&corrupted, 0.1, 5),
            Err(CorruptionError::AlreadyCorrupted)
        ));
    }

    #[test]
    fn monte_carlo_text_drop_rate() {
        let words = vec!["w"; 100_000].join(" ");
        let segment = text_segment(&words);
        let out = corrupt_text(&segment, 0.3, 11).unwrap();
        let survivors = out.text.split_whitespace().count();
        let dropped = 1.0 - survivors as f64 / 100_000.0;
        assert!((dropped - 0.3).abs() < 0.01, "dropped fraction {dropped}");
    }

    #[test]
    fn corrupt_tabular_bounds_and_identity() {
        let record = vec![("a".to_string(), "1".to_string()); 10];
        assert_eq!(corrupt_tabular(&record, 0.0, 3).unwrap(), record);
        assert!(corrupt_tabular(&record, 0.95, 3).is_err());
        assert_eq!(corrupt_tabular(&[], 0.9, 3).unwrap(), vec![]);
    }

    #[test]
    fn tabular_high_drop_keeps_one_column_on_average() {
        let record: Vec<(String, String)> = (0..10)
            .map(|i| (format!("c{i}"), i.to_string()))
            .collect();
        let mut total = 0usize;
        for seed in 0..10_000 {
            total += corrupt_tabular(&record, 0.9, seed).unwrap().len();
        }
        let mean = total as f64 / 10_000.0;
        assert!((0.9..=1.1).contains(&mean), "mean survivors {mean}");
    }

    #[test]
    fn image_proxy_rate_is_half_level() {
        let words = vec!["w"; 100_000].join(" ");
        let segment = TextSegment::new(Modality::Image, Stage::Transformed, words);
        let out = corrupt_image(&segment, 0.9, 13, None, None).unwrap();
        let survivors = out.text.split_whitespace().count();
        let dropped = 1.0 - survivors as f64 / 100_000.0;
        assert!((dropped - 0.45).abs() < 0.01, "dropped fraction {dropped}");
        let same = corrupt_image(&segment, 0.0, 13, None, None).unwrap();
        assert_eq!(same, segment);
    }

    #[test]
    fn image_hook_called_exactly_once() {
        let segment = TextSegment::new(Modality::Image, Stage::Transformed, "a dog");
        let calls = std::cell::Cell::new(0u32);
        let hook = |reference: &str, level: f64, seed: u64| {
            calls.set(calls.get() + 1);
            Ok(format!("recaptioned {reference} at {level} with {seed}"))
        };
        let out = corrupt_image(&segment, 0.5, 7, Some("img/3.png"), Some(&hook)).unwrap();
        assert_eq!(calls.get(), 1);
        assert!(out.text.starts_with("recaptioned img/3.png"));
        assert_eq!(out.stage, Stage::Corrupted);
    }

    #[test]
    fn permutations_are_lexicographic() {
        assert_eq!(enumerate_permutations(1).unwrap(), vec![vec![0]]);
        assert_eq!(
            enumerate_permutations(2).unwrap(),
            vec![vec![0, 1], vec![1, 0]]
        );
        let three = enumerate_permutations(3).unwrap();
        assert_eq!(three.len(), 6);
        assert_eq!(three[0], vec![0, 1, 2]);
        assert_eq!(three[5], vec![2, 1, 0]);
        let mut sorted = three.clone();
        sorted.sort();
        assert_eq!(three, sorted);
        assert!(enumerate_permutations(0).is_err());
        assert!(enumerate_permutations(7).is_err());
    }

    fn full_sample() -> MultimodalSample {
        MultimodalSample {
            id: "s".into(),
            tabular: vec![("a".into(), "1".into())],
            caption: "cap".into(),
            free_text: "text".into(),
            label: Label::Class(0),
            image_path: None,
        }
    }

    #[test]
    fn drop_modalities_removes_segments() {
        let segments = vec![
            TextSegment::new(Modality::Tabular, Stage::Transformed, "t"),
            TextSegment::new(Modality::Image, Stage::Transformed, "i"),
            TextSegment::new(Modality::Text, Stage::Transformed, "x"),
        ];
        let out = drop_modalities_segments(&segments, &[Modality::Image]).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|s| s.modality != Modality::Image));
        assert!(drop_modalities_segments(&segments, &Modality::ALL).is_err());
        assert!(drop_modalities_segments(&segments, &[]).is_err());
    }

    #[test]
    fn drop_modalities_clears_channels() {
        let out = drop_modalities_sample(&full_sample(), &[Modality::Tabular, Modality::Image]).unwrap();
        assert!(out.tabular.is_empty());
        assert!(out.caption.is_empty());
        assert_eq!(out.free_text, "text");
        assert!(drop_modalities_sample(&full_sample(), &Modality::ALL).is_err());
    }

    #[test]
    fn grid_counts_match_protocol() {
        let noisy = scenario_grid(ScenarioKind::Noisy, &Modality::ALL, NoisyMode::PerModality, 1).unwrap();
        assert_eq!(noisy.conditions.len(), 15);
        let joint = scenario_grid(ScenarioKind::Noisy, &Modality::ALL, NoisyMode::Joint, 1).unwrap();
        assert_eq!(joint.conditions.len(), 5);
        let dynamic = scenario_grid(ScenarioKind::Dynamic, &Modality::ALL, NoisyMode::PerModality, 1).unwrap();
        assert_eq!(dynamic.conditions.len(), 6);
        let missing = scenario_grid(ScenarioKind::Missing, &Modality::ALL, NoisyMode::PerModality, 1).unwrap();
        assert_eq!(missing.conditions.len(), 6);
    }

    #[test]
    fn grid_is_deterministic() {
        let a = scenario_grid(ScenarioKind::Noisy, &Modality::ALL, NoisyMode::PerModality, 9).unwrap();
        let b = scenario_grid(ScenarioKind::Noisy, &Modality::ALL, NoisyMode::PerModality, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dynamic_conditions_preserve_text_multiset() {
        let grid = scenario_grid(ScenarioKind::Dynamic, &Modality::ALL, NoisyMode::PerModality, 2).unwrap();
        for condition in &grid.conditions {
            let ConditionKind::Dynamic { order } = &condition.kind else {
                panic!("non-dynamic condition in dynamic grid");
            };
            let mut sorted = order.clone();
            sorted.sort();
            assert_eq!(sorted, Modality::ALL.to_vec());
        }
    }
}
