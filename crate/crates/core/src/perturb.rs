//! Random and adversarial text perturbation.
//!
//! Random perturbation asks the LLM for k paraphrases of an input and/or
//! applies dummy-token edit operations (deletion, insertion, substitution)
//! that never change the underlying word sequence. Adversarial perturbation
//! picks an instruction prompt from a pre-built pool (noise injection,
//! information dropout, order permutation), samples a temperature, and asks
//! the LLM to rewrite an already-randomly-perturbed input against its label.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Label, Modality};
use crate::gateway::{ChatBackend, ChatRequest, GatewayError, DEFAULT_MAX_TOKENS};
use crate::pipeline::{
    assemble_identity, is_marker_line, parse_assembled, PipelineError, PromptTemplate, Stage,
    TextSegment, UnifiedText,
};
use crate::rng;

/// Near-semantics-free tokens used by edit perturbations.
pub const DUMMY_TOKENS: [&str; 5] = ["\n", "\t", "...", "?", "??"];

/// Verbatim paraphrase instruction; `{k}` is the variant count.
pub const PARAPHRASE_INSTRUCTION: &str =
    "Suggest {k} ways to paraphrase the text above. Remain same semantic";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Deletion,
    Insertion,
    Substitution,
}

impl EditOp {
    fn label(self) -> &'static str {
        match self {
            EditOp::Deletion => "deletion",
            EditOp::Insertion => "insertion",
            EditOp::Substitution => "substitution",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Paraphrase variant count.
    pub k: u32,
    pub edit_ops: Vec<EditOp>,
    /// `[T_lo, T_hi]` for temperature sampling.
    pub temperature_range: (f64, f64),
    /// Edits composed per random perturbation; 0 makes the edit path the
    /// identity.
    pub max_edits: u32,
    /// Apply paraphrase and edits together instead of a seeded either/or.
    pub compose: bool,
    /// Adversarial examples generated per training sample per epoch.
    pub adversarial_per_sample: u32,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            k: 3,
            edit_ops: vec![EditOp::Deletion, EditOp::Insertion, EditOp::Substitution],
            temperature_range: (0.2, 1.0),
            max_edits: 2,
            compose: false,
            adversarial_per_sample: 1,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<(), PerturbError> {
        if self.k == 0 {
            return Err(PerturbError::BadConfig("k must be >= 1".into()));
        }
        let (lo, hi) = self.temperature_range;
        if !(lo >= 0.0 && lo <= hi) {
            return Err(PerturbError::BadConfig(format!(
                "temperature range [{lo}, {hi}] must satisfy 0 <= lo <= hi"
            )));
        }
        if self.adversarial_per_sample == 0 {
            return Err(PerturbError::BadConfig(
                "adversarial_per_sample must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionKind {
    NoiseInjection,
    InformationDropout,
    OrderPermutation,
}

impl InstructionKind {
    pub fn directory(self) -> &'static str {
        match self {
            InstructionKind::NoiseInjection => "noise",
            InstructionKind::InformationDropout => "dropout",
            InstructionKind::OrderPermutation => "permute",
        }
    }
}

/// One adversarial instruction template with `{input}` and `{label}` slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: String,
    pub kind: InstructionKind,
    pub prompt_text: String,
}

/// Pre-generated adversarial instruction prompts, sorted by id; every kind
/// is represented at least once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionPool {
    instructions: Vec<Instruction>,
}

const BUILTIN_NOISE: &str = "{input}\n\nInject distracting noise tokens into the text above so the rewrite leans toward {label}.";
const BUILTIN_DROPOUT: &str = "{input}\n\nDrop the words that most strongly indicate the true label from the text above so the rewrite leans toward {label}.";
const BUILTIN_PERMUTE: &str = "{input}\n\nPermute the order of words in the text above so the rewrite leans toward {label}.";

impl InstructionPool {
    pub fn builtin() -> Self {
        let mut instructions = vec![
            Instruction {
                id: "dropout/default".into(),
                kind: InstructionKind::InformationDropout,
                prompt_text: BUILTIN_DROPOUT.into(),
            },
            Instruction {
                id: "noise/default".into(),
                kind: InstructionKind::NoiseInjection,
                prompt_text: BUILTIN_NOISE.into(),
            },
            Instruction {
                id: "permute/default".into(),
                kind: InstructionKind::OrderPermutation,
                prompt_text: BUILTIN_PERMUTE.into(),
            },
        ];
        instructions.sort_by(|a, b| a.id.cmp(&b.id));
        InstructionPool { instructions }
    }

    pub fn from_instructions(mut instructions: Vec<Instruction>) -> Result<Self, PerturbError> {
        instructions.sort_by(|a, b| a.id.cmp(&b.id));
        for kind in [
            InstructionKind::NoiseInjection,
            InstructionKind::InformationDropout,
            InstructionKind::OrderPermutation,
        ] {
            if !instructions.iter().any(|i| i.kind == kind) {
                return Err(PerturbError::MissingKind(kind.directory().into()));
            }
        }
        Ok(InstructionPool { instructions })
    }

    pub fn instructions(&self) -> &[Instruction] {
        &self.instructions
    }

    /// Uniform seeded draw.
    pub fn select<R: Rng>(&self, rng: &mut R) -> &Instruction {
        &self.instructions[rng.random_range(0..self.instructions.len())]
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("invalid perturbation config: {0}")]
    BadConfig(String),
    #[error("input text must be non-empty")]
    EmptyInput,
    #[error("backend returned no parseable paraphrase variants")]
    NoParaphrases,
    #[error("instruction template directory missing kind {0:?}")]
    MissingKind(String),
    #[error("instruction template {0} is empty")]
    EmptyTemplate(String),
    #[error("failed to read instruction templates at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("adversarial rewrite came back empty")]
    EmptyAdversarialOutput,
    #[error(transparent)]
    Template(#[from] PipelineError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Paraphrase call outcome. `variants.len()` always equals the requested k;
/// when the backend yields fewer parseable variants the tail is padded with
/// the original input and `padded` records how many.
#[derive(Debug, Clone, PartialEq)]
pub struct Paraphrases {
    pub variants: Vec<String>,
    pub parsed: usize,
    pub padded: usize,
}

fn parse_numbered_line(line: &str) -> Option<&str> {
    let trimmed = line.trim_start();
    let digits = trimmed.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return None;
    }
    let rest = &trimmed[digits..];
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    let text = rest.trim();
    (!text.is_empty()).then_some(text)
}

/// One LLM call producing exactly `k` paraphrase variants of `x0`.
pub fn paraphrase(
    x0: &str,
    k: u32,
    temperature: f64,
    seed: u64,
    backend: &dyn ChatBackend,
    model: &str,
) -> Result<Paraphrases, PerturbError> {
    if x0.trim().is_empty() {
        return Err(PerturbError::EmptyInput);
    }
    if k == 0 {
        return Err(PerturbError::BadConfig("k must be >= 1".into()));
    }
    let instruction = PromptTemplate::new("paraphrase", PARAPHRASE_INSTRUCTION)
        .render(&[("k", &k.to_string())])?;
    let prompt = format!("{x0}\n\n{instruction}");
    let request = ChatRequest {
        model: model.to_string(),
        messages: vec![crate::gateway::ChatMessage::user(prompt)],
        temperature,
        seed,
        max_tokens: DEFAULT_MAX_TOKENS,
    };
    let response = backend.complete(&request)?;
    let mut variants: Vec<String> = response
        .content
        .lines()
        .filter_map(parse_numbered_line)
        .take(k as usize)
        .map(str::to_string)
        .collect();
    let parsed = variants.len();
    if parsed == 0 {
        return Err(PerturbError::NoParaphrases);
    }
    let padded = k as usize - parsed;
    while variants.len() < k as usize {
        variants.push(x0.to_string());
    }
    Ok(Paraphrases {
        variants,
        parsed,
        padded,
    })
}

/// Replace every dummy-token occurrence with a space and normalize
/// whitespace. `strip_dummy_tokens(edit(x))` has the same word sequence as
/// `strip_dummy_tokens(x)` for any edit sequence, provided `x` contains no
/// bare "." (a period abutting an inserted "..." would merge into a run the
/// literal stripper cannot split).
pub fn strip_dummy_tokens(text: &str) -> String {
    // Longest tokens first so "..." and "??" are not split by their prefixes.
    let mut out = text.to_string();
    for token in ["...", "??", "?", "\n", "\t"] {
        out = out.replace(token, " ");
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn dummy_occurrences(text: &str) -> Vec<(usize, usize)> {
    let mut found = Vec::new();
    for token in DUMMY_TOKENS {
        let mut from = 0;
        while let Some(pos) = text[from..].find(token) {
            let start = from + pos;
            found.push((start, token.len()));
            from = start + token.len();
        }
    }
    found.sort_unstable();
    found
}

fn whitespace_runs(text: &str) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start: Option<usize> = None;
    let mut end = 0;
    for (idx, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if start.is_none() {
                start = Some(idx);
            }
            end = idx + ch.len_utf8();
        } else if let Some(s) = start.take() {
            runs.push((s, end - s));
        }
    }
    if let Some(s) = start {
        runs.push((s, end - s));
    }
    runs
}

/// Apply one dummy-token edit. Total: when the operation does not apply
/// (no dummy token to delete, no whitespace run to substitute) the input is
/// returned unchanged.
///
/// Draw order per op, from the stream `(seed, "dummy_edit", op)`:
/// insertion draws token then prepend/append; deletion draws the occurrence;
/// substitution draws the run then the token. Deletion replaces the
/// occurrence with a single space so word boundaries survive stripping.
pub fn dummy_token_edit(x0: &str, op: EditOp, seed: u64) -> String {
    let mut stream = rng::stream(seed, "dummy_edit", op.label());
    match op {
        EditOp::Insertion => {
            let token = DUMMY_TOKENS[stream.random_range(0..DUMMY_TOKENS.len())];
            if stream.random_bool(0.5) {
                format!("{token}{x0}")
            } else {
                format!("{x0}{token}")
            }
        }
        EditOp::Deletion => {
            let occurrences = dummy_occurrences(x0);
            if occurrences.is_empty() {
                return x0.to_string();
            }
            let (start, len) = occurrences[stream.random_range(0..occurrences.len())];
            format!("{} {}", &x0[..start], &x0[start + len..])
                .trim_end()
                .to_string()
        }
        EditOp::Substitution => {
            let runs = whitespace_runs(x0);
            if runs.is_empty() {
                return x0.to_string();
            }
            let (start, len) = runs[stream.random_range(0..runs.len())];
            let token = DUMMY_TOKENS[stream.random_range(0..DUMMY_TOKENS.len())];
            format!("{}{}{}", &x0[..start], token, &x0[start + len..])
        }
    }
}

/// Seeded random perturbation: either one of k paraphrases (temperature
/// drawn from the config range) or up to `max_edits` dummy-token edits
/// composed left-to-right; `compose` applies both in sequence.
pub fn random_perturb(
    x0: &str,
    config: &PerturbationConfig,
    seed: u64,
    backend: &dyn ChatBackend,
    model: &str,
) -> Result<String, PerturbError> {
    config.validate()?;
    if x0.trim().is_empty() {
        return Err(PerturbError::EmptyInput);
    }
    let mut stream = rng::stream(seed, "random_perturb", "");
    // Short-circuit keeps the stream untouched when no edit op is available.
    let (paraphrase_branch, edit_branch) = if config.compose {
        (true, true)
    } else if config.edit_ops.is_empty() || stream.random_bool(0.5) {
        (true, false)
    } else {
        (false, true)
    };

    let mut current = x0.to_string();
    if paraphrase_branch {
        let (lo, hi) = config.temperature_range;
        let temperature = lo + (hi - lo) * stream.random::<f64>();
        let call_seed: u64 = stream.random();
        let choice = stream.random_range(0..config.k) as usize;
        let outcome = paraphrase(&current, config.k, temperature, call_seed, backend, model)?;
        current = outcome.variants[choice].clone();
    }
    if edit_branch && config.max_edits > 0 && !config.edit_ops.is_empty() {
        let edits = stream.random_range(1..=config.max_edits);
        for _ in 0..edits {
            let op = config.edit_ops[stream.random_range(0..config.edit_ops.len())];
            let edit_seed: u64 = stream.random();
            current = dummy_token_edit(&current, op, edit_seed);
        }
    }
    Ok(current)
}

/// Load the instruction pool from `<dir>/{noise,dropout,permute}/*.txt`.
/// Instruction ids are `subdirectory/file-stem`, sorted.
pub fn build_instruction_pool(dir: &Path) -> Result<InstructionPool, PerturbError> {
    let mut instructions = Vec::new();
    for kind in [
        InstructionKind::NoiseInjection,
        InstructionKind::InformationDropout,
        InstructionKind::OrderPermutation,
    ] {
        let sub = dir.join(kind.directory());
        let entries = match fs::read_dir(&sub) {
            Ok(entries) => entries,
            Err(_) => return Err(PerturbError::MissingKind(kind.directory().into())),
        };
        let mut files: Vec<_> = entries
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(PerturbError::MissingKind(kind.directory().into()));
        }
        for path in files {
            let body = fs::read_to_string(&path)
                .map_err(|source| PerturbError::Io {
                    path: path.display().to_string(),
                    source,
                })?
                .trim_end()
                .to_string();
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_default();
            let id = format!("{}/{}", kind.directory(), stem);
            if body.trim().is_empty() {
                return Err(PerturbError::EmptyTemplate(id));
            }
            PromptTemplate::new(id.clone(), body.clone()).validate(&["input", "label"])?;
            instructions.push(Instruction {
                id,
                kind,
                prompt_text: body,
            });
        }
    }
    InstructionPool::from_instructions(instructions)
}

/// Write the builtin instruction templates into
/// `<dir>/{noise,dropout,permute}/default.txt`.
pub fn write_builtin_instructions(dir: &Path) -> Result<(), std::io::Error> {
    for (sub, body) in [
        ("noise", BUILTIN_NOISE),
        ("dropout", BUILTIN_DROPOUT),
        ("permute", BUILTIN_PERMUTE),
    ] {
        let subdir = dir.join(sub);
        fs::create_dir_all(&subdir)?;
        fs::write(subdir.join("default.txt"), body)?;
    }
    Ok(())
}

/// A generated adversarial example with its full provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialExample {
    /// x: the clean unified input.
    pub original: UnifiedText,
    /// x': the randomly perturbed initialization.
    pub initialized: UnifiedText,
    /// inst: id of the selected instruction.
    pub instruction_id: String,
    /// T: sampled temperature for the generation call.
    pub temperature: f64,
    pub label: Label,
    /// x_adv: the adversarial rewrite.
    pub adversarial: UnifiedText,
    /// Recorded when the backend returned the input unchanged.
    pub unchanged: bool,
    /// Recorded when segment boundaries did not survive the rewrite and the
    /// whole output was wrapped as a single text segment.
    pub boundaries_lost: bool,
}

/// Render the push-away target for the instruction prompt. Classification
/// points at any other class; regression picks a seeded direction.
fn label_target(label: &Label, stream: &mut ChaCha12Rng) -> String {
    match label {
        Label::Class(index) => format!("any label other than class {index}"),
        Label::Score(value) => {
            let direction = if stream.random_bool(0.5) { "higher" } else { "lower" };
            format!("a much {direction} value than {value}")
        }
    }
}

/// Re-wrap raw model output as a [`UnifiedText`]. Boundaries survive when
/// the output still starts with a marker line; otherwise the whole output
/// becomes one text segment (with any stray marker lines dropped so the
/// wrap itself stays parseable).
fn rewrap(text: &str) -> (UnifiedText, bool) {
    if let Some(pairs) = parse_assembled(text) {
        let segments: Vec<TextSegment> = pairs
            .into_iter()
            .map(|(modality, text)| TextSegment::new(modality, Stage::Perturbed, text))
            .collect();
        return (assemble_identity(&segments), false);
    }
    let sanitized: String = text
        .split('\n')
        .filter(|line| !is_marker_line(line))
        .collect::<Vec<_>>()
        .join("\n");
    let segment = TextSegment::new(Modality::Text, Stage::Perturbed, sanitized);
    (assemble_identity(&[segment]), true)
}

/// Generate one adversarial example: random initialization, seeded
/// instruction + temperature selection, then a single label-aware LLM call.
pub fn adversarial_perturb(
    x: &UnifiedText,
    label: &Label,
    pool: &InstructionPool,
    config: &PerturbationConfig,
    seed: u64,
    backend: &dyn ChatBackend,
    model: &str,
) -> Result<AdversarialExample, PerturbError> {
    config.validate()?;
    if pool.is_empty() {
        return Err(PerturbError::MissingKind("any".into()));
    }
    let mut stream = rng::stream(seed, "adversarial", "");
    let init_seed: u64 = stream.random();
    let initialized_text = random_perturb(&x.assembled, config, init_seed, backend, model)?;

    let instruction = pool.select(&mut stream);
    let (lo, hi) = config.temperature_range;
    let temperature = lo + (hi - lo) * stream.random::<f64>();
    let target = label_target(label, &mut stream);
    let call_seed: u64 = stream.random();

    let prompt = PromptTemplate::new(instruction.id.clone(), instruction.prompt_text.clone())
        .render(&[("input", initialized_text.as_str()), ("label", target.as_str())])?;
    let request = ChatRequest {
        model: model.to_string(),
        messages: vec![crate::gateway::ChatMessage::user(prompt)],
        temperature,
        seed: call_seed,
        max_tokens: DEFAULT_MAX_TOKENS,
    };
    let response = backend.complete(&request)?;
    if response.content.trim().is_empty() {
        return Err(PerturbError::EmptyAdversarialOutput);
    }

    let (initialized, _) = rewrap(&initialized_text);
    let (adversarial, boundaries_lost) = rewrap(&response.content);
    if adversarial.assembled.trim().is_empty() {
        return Err(PerturbError::EmptyAdversarialOutput);
    }
    let unchanged = adversarial.assembled == x.assembled;
    Ok(AdversarialExample {
        original: x.clone(),
        initialized,
        instruction_id: instruction.id.clone(),
        temperature,
        label: label.clone(),
        adversarial,
        unchanged,
        boundaries_lost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{LlmResponse, MockBackend, DEFAULT_MODEL};
    use std::sync::atomic::{AtomicU64, Ordering};

    fn words(text: &str) -> Vec<String> {
        strip_dummy_tokens(text)
            .split_whitespace()
            .map(str::to_string)
            .collect()
    }

    #[test]
    fn paraphrase_returns_exactly_k() {
        let backend = MockBackend::new(5);
        for k in [1u32, 3, 6] {
            let out = paraphrase("the small brown dog sat", k, 0.4, 7, &backend, DEFAULT_MODEL).unwrap();
            assert_eq!(out.variants.len(), k as usize);
            assert_eq!(out.padded, 0);
        }
    }

    #[test]
    fn paraphrase_is_deterministic() {
        let backend = MockBackend::new(5);
        let a = paraphrase("the small brown dog sat", 3, 0.4, 7, &backend, DEFAULT_MODEL).unwrap();
        let b = paraphrase("the small brown dog sat", 3, 0.4, 7, &backend, DEFAULT_MODEL).unwrap();
        assert_eq!(a, b);
    }

    /// Backend that returns a fixed string regardless of the request.
    struct FixedBackend {
        content: &'static str,
        calls: AtomicU64,
    }

    impl FixedBackend {
        fn new(content: &'static str) -> Self {
            FixedBackend {
                content,
                calls: AtomicU64::new(0),
            }
        }
    }

    impl ChatBackend for FixedBackend {
        fn complete(&self, request: &ChatRequest) -> Result<LlmResponse, GatewayError> {
            request.validate()?;
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(LlmResponse {
                content: self.content.to_string(),
                backend_id: self.id(),
                cached: false,
            })
        }

        fn id(&self) -> String {
            "fixed".into()
        }

        fn calls(&self) -> u64 {
            self.calls.load(Ordering::SeqCst)
        }
    }

    #[test]
    fn paraphrase_pads_short_outputs() {
        let backend = FixedBackend::new("1. only variant here");
        let out = paraphrase("base text", 3, 0.4, 7, &backend, DEFAULT_MODEL).unwrap();
        assert_eq!(out.variants.len(), 3);
        assert_eq!(out.parsed, 1);
        assert_eq!(out.padded, 2);
        assert_eq!(out.variants[1], "base text");
        assert_eq!(out.variants[2], "base text");
    }

    #[test]
    fn paraphrase_with_no_variants_errors() {
        let backend = FixedBackend::new("no numbering at all");
        assert!(matches!(
            paraphrase("base text", 3, 0.4, 7, &backend, DEFAULT_MODEL),
            Err(PerturbError::NoParaphrases)
        ));
    }

    #[test]
    fn deletion_on_dummy_free_text_is_identity() {
        assert_eq!(dummy_token_edit("abc def", EditOp::Deletion, 3), "abc def");
    }

    #[test]
    fn substitution_replaces_whitespace_run() {
        // Seed 4 draws the ellipsis token for the single run.
        assert_eq!(dummy_token_edit("a b", EditOp::Substitution, 4), "a...b");
        // Any seed: output must strip back to the original words.
        for seed in 0..20 {
            let out = dummy_token_edit("a b", EditOp::Substitution, seed);
            assert_eq!(words(&out), vec!["a", "b"], "seed {seed} gave {out:?}");
            assert_ne!(out, "a b", "seed {seed} should replace the space");
        }
    }

    #[test]
    fn insertion_prepends_or_appends() {
        // Seed 0 draws the newline token and the prepend position.
        assert_eq!(dummy_token_edit("abc", EditOp::Insertion, 0), "\nabc");
        for seed in 0..20 {
            let out = dummy_token_edit("abc", EditOp::Insertion, seed);
            assert!(out.len() > 3);
            assert_eq!(words(&out), vec!["abc"], "seed {seed}");
        }
    }

    #[test]
    fn edit_closure_over_random_sequences() {
        let ops = [EditOp::Deletion, EditOp::Insertion, EditOp::Substitution];
        let mut stream = rng::stream(99, "test_closure", "");
        for case in 0..200 {
            let word_count = stream.random_range(1..8);
            let base: Vec<String> = (0..word_count)
                .map(|i| format!("w{}{}", case, i))
                .collect();
            let mut text = base.join(" ");
            let expected = words(&text);
            for _ in 0..stream.random_range(0..5) {
                let op = ops[stream.random_range(0..ops.len())];
                text = dummy_token_edit(&text, op, stream.random());
            }
            assert_eq!(words(&text), expected, "closure broke for {text:?}");
        }
    }

    #[test]
    fn random_perturb_edits_strip_back() {
        let backend = MockBackend::new(5);
        let config = PerturbationConfig {
            compose: false,
            ..PerturbationConfig::default()
        };
        // Find seeds exercising the edit branch; word sequence must survive.
        let mut edit_cases = 0;
        for seed in 0..40 {
            let out = random_perturb("alpha beta gamma delta", &config, seed, &backend, DEFAULT_MODEL).unwrap();
            if words(&out) == vec!["alpha", "beta", "gamma", "delta"] && out != "alpha beta gamma delta" {
                edit_cases += 1;
            }
        }
        assert!(edit_cases > 0, "no seed hit the edit branch");
    }

    #[test]
    fn random_perturb_is_deterministic() {
        let backend = MockBackend::new(5);
        let config = PerturbationConfig::default();
        let a = random_perturb("alpha beta gamma delta", &config, 11, &backend, DEFAULT_MODEL).unwrap();
        let b = random_perturb("alpha beta gamma delta", &config, 11, &backend, DEFAULT_MODEL).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn max_edits_zero_edit_branch_is_identity() {
        let backend = MockBackend::new(5);
        let config = PerturbationConfig {
            max_edits: 0,
            ..PerturbationConfig::default()
        };
        // Seeds that take the edit branch must return the input unchanged.
        let mut identity_cases = 0;
        for seed in 0..40 {
            let out = random_perturb("alpha beta gamma", &config, seed, &backend, DEFAULT_MODEL).unwrap();
            if out == "alpha beta gamma" {
                identity_cases += 1;
            }
        }
        assert!(identity_cases > 0);
    }

    #[test]
    fn pool_loads_from_directory_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        write_builtin_instructions(dir.path()).unwrap();
        fs::write(
            dir.path().join("noise/extra.txt"),
            "{input}\n\nInject confusing filler so the text drifts toward {label}.",
        )
        .unwrap();
        let pool = build_instruction_pool(dir.path()).unwrap();
        assert_eq!(pool.len(), 4);
        let ids: Vec<&str> = pool.instructions().iter().map(|i| i.id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        assert_eq!(ids, sorted, "pool must be sorted by id");
    }

    #[test]
    fn pool_missing_kind_names_it() {
        let dir = tempfile::tempdir().unwrap();
        write_builtin_instructions(dir.path()).unwrap();
        fs::remove_dir_all(dir.path().join("permute")).unwrap();
        match build_instruction_pool(dir.path()) {
            Err(PerturbError::MissingKind(kind)) => assert_eq!(kind, "permute"),
            other => panic!("expected MissingKind, got {other:?}"),
        }
    }

    fn unified() -> UnifiedText {
        assemble_identity(&[
            TextSegment::new(Modality::Tabular, Stage::Transformed, "The age is 3. The breed is mixed."),
            TextSegment::new(Modality::Text, Stage::Transformed, "a very calm gentle dog that loves long walks"),
        ])
    }

    #[test]
    fn adversarial_is_deterministic() {
        let backend = MockBackend::new(5);
        let pool = InstructionPool::builtin();
        let config = PerturbationConfig::default();
        let a = adversarial_perturb(&unified(), &Label::Class(1), &pool, &config, 21, &backend, DEFAULT_MODEL).unwrap();
        let b = adversarial_perturb(&unified(), &Label::Class(1), &pool, &config, 21, &backend, DEFAULT_MODEL).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adversarial_dropout_strictly_shrinks_words() {
        let backend = MockBackend::new(5);
        let pool = InstructionPool::from_instructions(vec![
            Instruction {
                id: "dropout/only".into(),
                kind: InstructionKind::InformationDropout,
                prompt_text: BUILTIN_DROPOUT.into(),
            },
            Instruction {
                id: "noise/x".into(),
                kind: InstructionKind::NoiseInjection,
                prompt_text: BUILTIN_NOISE.into(),
            },
            Instruction {
                id: "permute/x".into(),
                kind: InstructionKind::OrderPermutation,
                prompt_text: BUILTIN_PERMUTE.into(),
            },
        ])
        .unwrap();
        let config = PerturbationConfig {
            // Edits only, keeping the initialization close to the original
            // so word counting stays meaningful.
            k: 1,
            edit_ops: vec![EditOp::Insertion],
            max_edits: 1,
            compose: false,
            ..PerturbationConfig::default()
        };
        let mut dropout_seen = false;
        for seed in 0..60 {
            let example =
                adversarial_perturb(&unified(), &Label::Class(1), &pool, &config, seed, &backend, DEFAULT_MODEL)
                    .unwrap();
            if example.instruction_id == "dropout/only" && !example.boundaries_lost {
                let before = example.initialized.assembled.split_whitespace().count();
                let after = example.adversarial.assembled.split_whitespace().count();
                assert!(after < before, "seed {seed}: {after} !< {before}");
                dropout_seen = true;
            }
        }
        assert!(dropout_seen, "no seed selected the dropout instruction with intact boundaries");
    }

    #[test]
    fn single_instruction_pool_is_degenerate_choice() {
        // The kind-coverage invariant keeps public pools at three or more
        // entries, so the singleton is built in-module.
        let pool = InstructionPool {
            instructions: vec![Instruction {
                id: "dropout/only".into(),
                kind: InstructionKind::InformationDropout,
                prompt_text: BUILTIN_DROPOUT.into(),
            }],
        };
        let backend = MockBackend::new(5);
        let config = PerturbationConfig::default();
        for seed in 0..8 {
            let example =
                adversarial_perturb(&unified(), &Label::Class(0), &pool, &config, seed, &backend, DEFAULT_MODEL)
                    .unwrap();
            assert_eq!(example.instruction_id, "dropout/only");
        }
    }

    #[test]
    fn instruction_selection_is_uniform() {
        let pool = InstructionPool::builtin();
        let extra = {
            let mut instructions = pool.instructions().to_vec();
            instructions.push(Instruction {
                id: "noise/second".into(),
                kind: InstructionKind::NoiseInjection,
                prompt_text: BUILTIN_NOISE.into(),
            });
            InstructionPool::from_instructions(instructions).unwrap()
        };
        assert_eq!(extra.len(), 4);
        let mut counts = std::collections::BTreeMap::new();
        for seed in 0..10_000u64 {
            let mut stream = rng::stream(seed, "instruction_select", "");
            let id = extra.select(&mut stream).id.clone();
            *counts.entry(id).or_insert(0u32) += 1;
        }
        assert_eq!(counts.len(), 4);
        for (id, &count) in &counts {
            let frequency = f64::from(count) / 10_000.0;
            assert!(
                (0.23..=0.27).contains(&frequency),
                "instruction {id} frequency {frequency}"
            );
        }
    }

    #[test]
    fn regression_label_target_names_direction() {
        let mut stream = rng::stream(1, "t", "");
        let target = label_target(&Label::Score(2.5), &mut stream);
        assert!(target.contains("2.5"));
        assert!(target.contains("higher") || target.contains("lower"));
        assert_eq!(
            label_target(&Label::Class(3), &mut stream),
            "any label other than class 3"
        );
    }
}
