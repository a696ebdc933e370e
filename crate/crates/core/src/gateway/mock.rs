//! Deterministic mock backend.
//!
//! The mock inspects the instruction line of the prompt — the last non-empty
//! line of the final message — and applies a fixed textual transformation to
//! the payload above it. Output is a pure function of (messages, temperature,
//! request seed) plus the backend's own seed salt, so repeated invocation
//! across processes is byte-identical.
//!
//! Request kinds and their transformations:
//! - paraphrase (`"paraphrase"` in the instruction): k enumerated variants
//!   built by clause rotation plus one seeded adjacent word swap, preserving
//!   the word multiset; k is the first integer in the instruction line.
//! - summarize (`"summar"`): first sentence of each modality segment
//!   concatenated, prefixed `"Summary:"`.
//! - reasoning (`"predict"`): `"Prediction: class 0. Because: "` plus the
//!   first twelve payload words.
//! - adversarial dropout / permutation / noise (`"drop"` / `"permut"` /
//!   `"noise"` or `"inject"`): the named word-level operation applied per
//!   payload line with the seeded stream; segment marker lines pass through
//!   untouched so boundary survival is exercised.
//! - anything else echoes the payload.
//!
//! Temperature selects among deterministic variants: the variant index is a
//! hash of (seed, round(T*10)).

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use super::{ChatBackend, ChatRequest, GatewayError, LlmResponse};
use crate::pipeline::is_marker_line;
use crate::rng;

const NOISE_TOKENS: [&str; 4] = ["??", "...", "?!", "hmm"];

/// What the mock decided a request was asking for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RequestKind {
    Paraphrase,
    Summarize,
    Reason,
    AdversarialDropout,
    AdversarialPermute,
    AdversarialNoise,
    Echo,
}

pub struct MockBackend {
    seed: u64,
    calls: AtomicU64,
    kind_calls: Mutex<BTreeMap<RequestKind, u64>>,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        MockBackend {
            seed,
            calls: AtomicU64::new(0),
            kind_calls: Mutex::new(BTreeMap::new()),
        }
    }

    /// How many completed calls were classified as `kind`.
    pub fn calls_of_kind(&self, kind: RequestKind) -> u64 {
        *self.kind_calls.lock().unwrap().get(&kind).unwrap_or(&0)
    }

    fn stream_for(&self, request: &ChatRequest, variant_index: u64) -> ChaCha12Rng {
        let canonical = super::canonical_messages(&request.messages);
        let digest = Sha256::digest(canonical.as_bytes());
        let mut qualifier = String::with_capacity(80);
        for byte in digest {
            qualifier.push_str(&format!("{byte:02x}"));
        }
        qualifier.push('|');
        qualifier.push_str(&variant_index.to_string());
        rng::stream(self.seed ^ request.seed, "mock", &qualifier)
    }
}

/// variant index = hash(seed, round(T*10)); FNV-1a over the two integers.
fn variant_index(seed: u64, temperature: f64) -> u64 {
    let t10 = (temperature * 10.0).round() as i64;
    let mut hash: u64 = 0xcbf29ce484222325;
    for byte in seed.to_le_bytes().iter().chain(t10.to_le_bytes().iter()) {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Split the final message into (payload, instruction line).
fn split_instruction(content: &str) -> (String, String) {
    let lines: Vec<&str> = content.split('\n').collect();
    let Some(last_idx) = lines.iter().rposition(|l| !l.trim().is_empty()) else {
        return (String::new(), String::new());
    };
    let instruction = lines[last_idx].trim().to_string();
    let mut payload_lines = &lines[..last_idx];
    while let Some((tail, rest)) = payload_lines.split_last() {
        if tail.trim().is_empty() {
            payload_lines = rest;
        } else {
            break;
        }
    }
    (payload_lines.join("\n"), instruction)
}

fn classify(instruction: &str) -> RequestKind {
    let lower = instruction.to_lowercase();
    if lower.contains("paraphrase") {
        RequestKind::Paraphrase
    } else if lower.contains("summar") {
        RequestKind::Summarize
    } else if lower.contains("predict") {
        RequestKind::Reason
    } else if lower.contains("drop") {
        RequestKind::AdversarialDropout
    } else if lower.contains("permut") {
        RequestKind::AdversarialPermute
    } else if lower.contains("noise") || lower.contains("inject") {
        RequestKind::AdversarialNoise
    } else {
        RequestKind::Echo
    }
}

fn first_integer(text: &str) -> Option<u64> {
    let mut digits = String::new();
    for ch in text.chars() {
        if ch.is_ascii_digit() {
            digits.push(ch);
        } else if !digits.is_empty() {
            break;
        }
    }
    digits.parse().ok()
}

fn paraphrase(payload: &str, instruction: &str, variant: u64, rng: &mut ChaCha12Rng) -> String {
    let k = first_integer(instruction).unwrap_or(3).clamp(1, 64) as usize;
    let words: Vec<&str> = payload.split_whitespace().collect();
    let mut out = String::new();
    for j in 0..k {
        let text = if words.len() <= 1 {
            payload.trim().to_string()
        } else {
            let offset = (1 + j + (variant as usize % words.len())) % words.len();
            let mut rotated: Vec<&str> = words[offset..]
                .iter()
                .chain(words[..offset].iter())
                .copied()
                .collect();
            if rotated.len() >= 4 {
                let i = rng.random_range(0..rotated.len() - 1);
                rotated.swap(i, i + 1);
            }
            rotated.join(" ")
        };
        out.push_str(&format!("{}. {}\n", j + 1, text));
    }
    out.trim_end().to_string()
}

/// Segment texts in payload order: marker lines open a new segment, any text
/// before the first marker is its own segment, no markers means one segment.
fn payload_segments(payload: &str) -> Vec<String> {
    let mut segments: Vec<Vec<&str>> = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut saw_marker = false;
    for line in payload.split('\n') {
        if is_marker_line(line) {
            if !current.is_empty() || saw_marker {
                segments.push(std::mem::take(&mut current));
            }
            saw_marker = true;
        } else {
            current.push(line);
        }
    }
    segments.push(current);
    segments
        .into_iter()
        .map(|lines| lines.join(" ").trim().to_string())
        .filter(|text| !text.is_empty())
        .collect()
}

fn first_sentence(text: &str) -> &str {
    match text.find('.') {
        Some(idx) => &text[..=idx],
        None => text,
    }
}

fn summarize(payload: &str) -> String {
    let segments = payload_segments(payload);
    let mut out = String::from("Summary:");
    for segment in &segments {
        out.push(' ');
        out.push_str(first_sentence(segment).trim());
    }
    out
}

fn reason(payload: &str) -> String {
    let body: Vec<&str> = payload
        .split('\n')
        .filter(|line| !is_marker_line(line))
        .flat_map(str::split_whitespace)
        .take(12)
        .collect();
    format!("Prediction: class 0. Because: {}", body.join(" "))
}

fn drop_words(words: &[&str], rng: &mut ChaCha12Rng) -> Vec<String> {
    if words.len() < 2 {
        return words.iter().map(|w| w.to_string()).collect();
    }
    let mut keep: Vec<bool> = words.iter().map(|_| !rng.random_bool(0.3)).collect();
    if keep.iter().all(|&k| k) {
        let victim = rng.random_range(0..words.len());
        keep[victim] = false;
    }
    if keep.iter().all(|&k| !k) {
        let survivor = rng.random_range(0..words.len());
        keep[survivor] = true;
    }
    words
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(w, _)| w.to_string())
        .collect()
}

fn permute_words(words: &[&str], rng: &mut ChaCha12Rng) -> Vec<String> {
    let mut shuffled: Vec<&str> = words.to_vec();
    shuffled.shuffle(rng);
    if shuffled == words && words.len() >= 2 {
        shuffled.rotate_left(1);
    }
    shuffled.iter().map(|w| w.to_string()).collect()
}

fn noise_words(words: &[&str], rng: &mut ChaCha12Rng) -> Vec<String> {
    let mut out: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    let insertions = (words.len() / 6).max(1);
    for _ in 0..insertions {
        let pos = rng.random_range(0..=out.len());
        let token = NOISE_TOKENS[rng.random_range(0..NOISE_TOKENS.len())];
        out.insert(pos, token.to_string());
    }
    out
}

/// Apply a word-level operation line by line; marker lines pass through.
fn per_line(payload: &str, rng: &mut ChaCha12Rng, op: fn(&[&str], &mut ChaCha12Rng) -> Vec<String>) -> String {
    payload
        .split('\n')
        .map(|line| {
            if is_marker_line(line) {
                line.to_string()
            } else {
                let words: Vec<&str> = line.split_whitespace().collect();
                op(&words, rng).join(" ")
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

impl ChatBackend for MockBackend {
    fn complete(&self, request: &ChatRequest) -> Result<LlmResponse, GatewayError> {
        request.validate()?;
        let content = &request
            .messages
            .last()
            .expect("validated non-empty")
            .content;
        let (payload, instruction) = split_instruction(content);
        let kind = classify(&instruction);
        let variant = variant_index(self.seed ^ request.seed, request.temperature);
        let mut stream = self.stream_for(request, variant);
        let output = match kind {
            RequestKind::Paraphrase => paraphrase(&payload, &instruction, variant, &mut stream),
            RequestKind::Summarize => summarize(&payload),
            RequestKind::Reason => reason(&payload),
            RequestKind::AdversarialDropout => per_line(&payload, &mut stream, drop_words),
            RequestKind::AdversarialPermute => per_line(&payload, &mut stream, permute_words),
            RequestKind::AdversarialNoise => per_line(&payload, &mut stream, noise_words),
            RequestKind::Echo => payload.clone(),
        };
        if output.trim().is_empty() {
            return Err(GatewayError::EmptyOutput);
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        *self.kind_calls.lock().unwrap().entry(kind).or_insert(0) += 1;
        Ok(LlmResponse {
            content: output,
            backend_id: self.id(),
            cached: false,
        })
    }

    fn id(&self) -> String {
        format!("mock-{:016x}", self.seed)
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}
