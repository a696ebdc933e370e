//! Text-centric alignment pipeline: transform each modality to text,
//! summarize across modalities with a one-shot style demonstration, augment
//! with LLM reasoning, and assemble the final prompt by concatenation.
//!
//! Assembled prompts mark segment boundaries with a reserved marker line
//! `<<seg:MODALITY>>` before each segment, so featurizers and corruption
//! operators can recover per-segment spans. Segment texts must not
//! themselves contain marker-shaped lines; the bundled pipeline never
//! produces such texts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Modality, MultimodalSample, Task};
use crate::gateway::{ChatBackend, ChatRequest, GatewayError, DEFAULT_MAX_TOKENS};

/// Provenance stage of a text segment. Perturbed/Corrupted may wrap any
/// earlier stage; the others only move forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Raw,
    Transformed,
    Summarized,
    Reasoned,
    Perturbed,
    Corrupted,
}

/// A modality's textual representation at some pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextSegment {
    pub modality: Modality,
    pub stage: Stage,
    pub text: String,
}

impl TextSegment {
    pub fn new(modality: Modality, stage: Stage, text: impl Into<String>) -> Self {
        TextSegment {
            modality,
            stage,
            text: text.into(),
        }
    }
}

/// The one-shot in-context demonstration fixed after the bootstrap phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub example_input: String,
    pub example_output: String,
    pub style_prompt: String,
}

/// A named prompt template with `{placeholder}` slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Self {
        PromptTemplate {
            name: name.into(),
            body: body.into(),
        }
    }

    /// Every placeholder the pipeline will substitute must occur exactly once.
    pub fn validate(&self, required: &[&str]) -> Result<(), PipelineError> {
        for placeholder in required {
            let pattern = format!("{{{placeholder}}}");
            let count = self.body.matches(&pattern).count();
            if count != 1 {
                return Err(PipelineError::BadTemplate {
                    name: self.name.clone(),
                    message: format!("placeholder {pattern} occurs {count} times, expected exactly 1"),
                });
            }
        }
        Ok(())
    }

    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, PipelineError> {
        self.validate(&values.iter().map(|(k, _)| *k).collect::<Vec<_>>())?;
        let mut out = self.body.clone();
        for (key, value) in values {
            out = out.replace(&format!("{{{key}}}"), value);
        }
        Ok(out)
    }
}

/// Segments plus their concatenation with recoverable boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedText {
    pub segments: Vec<TextSegment>,
    pub assembled: String,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("template {name}: {message}")]
    BadTemplate { name: String, message: String },
    #[error("failed to read template {path}: {source}")]
    TemplateIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("order {order:?} is not a permutation of 0..{len}")]
    InvalidPermutation { order: Vec<usize>, len: usize },
    #[error("operation requires at least one sample")]
    NoSamples,
    #[error("operation requires at least one segment")]
    NoSegments,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

const MARKER_PREFIX: &str = "<<seg:";
const MARKER_SUFFIX: &str = ">>";

/// The reserved boundary marker line for a modality.
pub fn marker_line(modality: Modality) -> String {
    format!("{MARKER_PREFIX}{}{MARKER_SUFFIX}", modality.tag())
}

/// True when the line is exactly a well-formed boundary marker.
pub fn is_marker_line(line: &str) -> bool {
    parse_marker(line).is_some()
}

fn parse_marker(line: &str) -> Option<Modality> {
    let trimmed = line.trim();
    let tag = trimmed
        .strip_prefix(MARKER_PREFIX)?
        .strip_suffix(MARKER_SUFFIX)?;
    Modality::from_tag(tag)
}

/// Recover `(modality, text)` pairs from an assembled prompt. Returns `None`
/// when the text does not start with a marker line, i.e. boundaries were
/// destroyed.
pub fn parse_assembled(assembled: &str) -> Option<Vec<(Modality, String)>> {
    let lines: Vec<&str> = assembled.split('\n').collect();
    let first = parse_marker(lines.first()?)?;
    let mut out: Vec<(Modality, Vec<&str>)> = vec![(first, Vec::new())];
    for line in &lines[1..] {
        match parse_marker(line) {
            Some(modality) => out.push((modality, Vec::new())),
            None => out.last_mut().expect("seeded above").1.push(line),
        }
    }
    Some(
        out.into_iter()
            .map(|(modality, lines)| (modality, lines.join("\n")))
            .collect(),
    )
}

/// Join segments with their boundary markers. The inverse of
/// [`parse_assembled`] for marker-free segment texts.
pub fn render_segments(segments: &[TextSegment]) -> String {
    let mut out = String::new();
    for (i, segment) in segments.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&marker_line(segment.modality));
        out.push('\n');
        out.push_str(&segment.text);
    }
    out
}

/// Serialize a tabular record as one sentence per column:
/// `"The {name} is {value}."` joined by single spaces.
pub fn serialize_tabular(record: &[(String, String)]) -> TextSegment {
    let text = record
        .iter()
        .map(|(name, value)| format!("The {name} is {value}."))
        .collect::<Vec<_>>()
        .join(" ");
    TextSegment::new(Modality::Tabular, Stage::Transformed, text)
}

/// Transform each non-empty modality channel to a text segment, in canonical
/// order (tabular, image, text). Text and captions pass through verbatim.
pub fn transform_modalities(sample: &MultimodalSample) -> Vec<TextSegment> {
    let mut segments = Vec::new();
    if !sample.tabular.is_empty() {
        segments.push(serialize_tabular(&sample.tabular));
    }
    if !sample.caption.is_empty() {
        segments.push(TextSegment::new(
            Modality::Image,
            Stage::Transformed,
            sample.caption.clone(),
        ));
    }
    if !sample.free_text.is_empty() {
        segments.push(TextSegment::new(
            Modality::Text,
            Stage::Transformed,
            sample.free_text.clone(),
        ));
    }
    segments
}

/// Reorder segments by `order` and concatenate with boundary markers.
pub fn assemble_prompt(segments: &[TextSegment], order: &[usize]) -> Result<UnifiedText, PipelineError> {
    let len = segments.len();
    let valid = order.len() == len && {
        let mut seen = vec![false; len];
        order.iter().all(|&i| i < len && !std::mem::replace(&mut seen[i], true))
    };
    if !valid {
        return Err(PipelineError::InvalidPermutation {
            order: order.to_vec(),
            len,
        });
    }
    let reordered: Vec<TextSegment> = order.iter().map(|&i| segments[i].clone()).collect();
    let assembled = render_segments(&reordered);
    Ok(UnifiedText {
        segments: reordered,
        assembled,
    })
}

/// Identity-order assembly.
pub fn assemble_identity(segments: &[TextSegment]) -> UnifiedText {
    let order: Vec<usize> = (0..segments.len()).collect();
    assemble_prompt(segments, &order).expect("identity order is always valid")
}

/// The prompt templates the pipeline renders. Loadable from a template
/// directory (`summarize/style.txt`, `reason/task.txt`); `builtin()` ships
/// defaults so runs work with no template files on disk.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    /// Style instruction used both to bootstrap the demonstration and as the
    /// final instruction of every one-shot summarize prompt. No placeholders.
    pub summarize_style: PromptTemplate,
    /// Reasoning task instruction; must reference `{label_space}` once.
    pub reason_task: PromptTemplate,
}

pub const BUILTIN_SUMMARIZE_STYLE: &str =
    "Summarize the modality segments above into one concise paragraph, merging the information from every modality.";
pub const BUILTIN_REASON_TASK: &str = "The label space is: {label_space}.\nPredict the most likely label for the input above and explain your reasoning.";

impl TemplateSet {
    pub fn builtin() -> Self {
        TemplateSet {
            summarize_style: PromptTemplate::new("summarize/style", BUILTIN_SUMMARIZE_STYLE),
            reason_task: PromptTemplate::new("reason/task", BUILTIN_REASON_TASK),
        }
    }

    /// Load templates from `<dir>/summarize/style.txt` and
    /// `<dir>/reason/task.txt`.
    pub fn from_dir(dir: &Path) -> Result<Self, PipelineError> {
        let read = |relative: &str| -> Result<String, PipelineError> {
            let path = dir.join(relative);
            fs::read_to_string(&path).map_err(|source| PipelineError::TemplateIo {
                path: path.display().to_string(),
                source,
            })
        };
        let set = TemplateSet {
            summarize_style: PromptTemplate::new(
                "summarize/style",
                read("summarize/style.txt")?.trim_end().to_string(),
            ),
            reason_task: PromptTemplate::new(
                "reason/task",
                read("reason/task.txt")?.trim_end().to_string(),
            ),
        };
        set.reason_task.validate(&["label_space"])?;
        if set.summarize_style.body.trim().is_empty() {
            return Err(PipelineError::BadTemplate {
                name: "summarize/style".into(),
                message: "template is empty".into(),
            });
        }
        Ok(set)
    }

    /// Write the builtin templates into a directory, creating the documented
    /// layout (`transform/`, `summarize/`, `reason/`, `adversarial/`).
    pub fn write_builtin(dir: &Path) -> Result<(), std::io::Error> {
        for sub in ["transform", "summarize", "reason", "adversarial"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        fs::write(dir.join("summarize/style.txt"), BUILTIN_SUMMARIZE_STYLE)?;
        fs::write(dir.join("reason/task.txt"), BUILTIN_REASON_TASK)?;
        crate::perturb::write_builtin_instructions(&dir.join("adversarial"))?;
        Ok(())
    }
}

/// Human-readable label space for the reasoning instruction.
pub fn label_space_text(task: Task) -> String {
    match task {
        Task::Classification { num_classes } => {
            let names: Vec<String> = (0..num_classes).map(|c| format!("class {c}")).collect();
            format!("one of {}", names.join(", "))
        }
        Task::Regression => "a real-valued score".to_string(),
    }
}

/// Alignment pipeline operations bound to a backend and template set.
pub struct AlignmentPipeline<'a> {
    backend: &'a dyn ChatBackend,
    templates: &'a TemplateSet,
    model: String,
    /// Master seed; all requests carry it so cache keys line up across runs.
    seed: u64,
}

impl<'a> AlignmentPipeline<'a> {
    pub fn new(backend: &'a dyn ChatBackend, templates: &'a TemplateSet, model: impl Into<String>, seed: u64) -> Self {
        AlignmentPipeline {
            backend,
            templates,
            model: model.into(),
            seed,
        }
    }

    fn request(&self, content: String) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages: vec![crate::gateway::ChatMessage::user(content)],
            temperature: 0.0,
            seed: self.seed,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    /// Build the one-shot demonstration from the first sample: run the style
    /// prompt over its transformed segments and keep the (input, output,
    /// style) triple.
    pub fn bootstrap_demonstration(
        &self,
        samples: &[MultimodalSample],
    ) -> Result<Demonstration, PipelineError> {
        let first = samples.first().ok_or(PipelineError::NoSamples)?;
        let segments = transform_modalities(first);
        if segments.is_empty() {
            return Err(PipelineError::NoSegments);
        }
        let example_input = render_segments(&segments);
        let style = self.templates.summarize_style.body.clone();
        let prompt = format!("{example_input}\n\n{style}");
        let response = self.backend.complete(&self.request(prompt))?;
        Ok(Demonstration {
            example_input,
            example_output: response.content,
            style_prompt: style,
        })
    }

    /// Merge segments into one summary segment via one-shot in-context
    /// learning. The summary is cross-modal, so it is tagged as text.
    pub fn summarize(
        &self,
        segments: &[TextSegment],
        demo: &Demonstration,
    ) -> Result<TextSegment, PipelineError> {
        if segments.is_empty() {
            return Err(PipelineError::NoSegments);
        }
        let input = render_segments(segments);
        let prompt = format!(
            "Example input:\n{}\n\nExample output:\n{}\n\n{}\n\n{}",
            demo.example_input, demo.example_output, input, demo.style_prompt
        );
        let response = self.backend.complete(&self.request(prompt))?;
        Ok(TextSegment::new(Modality::Text, Stage::Summarized, response.content))
    }

    /// Ask the LLM for a prediction plus explanation over the segments.
    /// Returned as a new segment; the sources are never replaced.
    pub fn augment_reasoning(
        &self,
        segments: &[TextSegment],
        label_space: &str,
    ) -> Result<TextSegment, PipelineError> {
        if segments.is_empty() {
            return Err(PipelineError::NoSegments);
        }
        let instruction = self
            .templates
            .reason_task
            .render(&[("label_space", label_space)])?;
        let input = render_segments(segments);
        let prompt = format!("{input}\n\n{instruction}");
        let response = self.backend.complete(&self.request(prompt))?;
        Ok(TextSegment::new(Modality::Text, Stage::Reasoned, response.content))
    }

    /// Full per-sample alignment: transformed segments, plus summary and
    /// reasoning segments appended when alignment is enabled. `order`
    /// permutes only the transformed segments; appended segments keep their
    /// position at the tail.
    pub fn align_sample(
        &self,
        sample: &MultimodalSample,
        demo: Option<&Demonstration>,
        label_space: &str,
        use_alignment: bool,
        transformed_order: Option<&[usize]>,
    ) -> Result<UnifiedText, PipelineError> {
        let transformed = transform_modalities(sample);
        if transformed.is_empty() {
            return Err(PipelineError::NoSegments);
        }
        let mut segments = match transformed_order {
            Some(order) => assemble_prompt(&transformed, order)?.segments,
            None => transformed.clone(),
        };
        if use_alignment {
            let demo = demo.ok_or(PipelineError::NoSamples)?;
            // Summarization and reasoning both read the transformed segments
            // and are appended in parallel alongside them.
            segments.push(self.summarize(&transformed, demo)?);
            segments.push(self.augment_reasoning(&transformed, label_space)?);
        }
        Ok(assemble_identity(&segments))
    }
}

/// Order transformed segments by a modality permutation: segments whose
/// modality appears earlier in `modalities` come first. Returns an index
/// order for [`assemble_prompt`].
pub fn modality_order(segments: &[TextSegment], modalities: &[Modality]) -> Vec<usize> {
    let rank = |m: Modality| {
        modalities
            .iter()
            .position(|&x| x == m)
            .unwrap_or(modalities.len())
    };
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by_key(|&i| (rank(segments[i].modality), i));
    order
}

/// Per-modality segment map in canonical order; used by tests and reports.
pub fn segments_by_modality(segments: &[TextSegment]) -> BTreeMap<Modality, Vec<&TextSegment>> {
    let mut map: BTreeMap<Modality, Vec<&TextSegment>> = BTreeMap::new();
    for segment in segments {
        map.entry(segment.modality).or_default().push(segment);
    }
    map
}
