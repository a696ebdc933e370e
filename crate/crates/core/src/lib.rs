//! Text-centric multimodal alignment with LLM-driven perturbation and a
//! corruption-scenario robustness harness.
//!
//! The crate turns each modality of a multimodal record (tabular fields, an
//! image caption, free text) into text, aligns the pieces through an LLM
//! (summarization plus reasoning augmentation), optionally hardens a
//! downstream predictor with LLM-generated adversarial examples, and then
//! measures robustness under three test-time corruption scenarios: noisy
//! modalities, dynamic input order, and missing modalities.
//!
//! Modules:
//! - [`data`] — domain types, manifest ingestion, deterministic splits
//! - [`rng`] — named, derivable random streams (single master seed)
//! - [`gateway`] — chat-completion backends (HTTP + deterministic mock) with
//!   a content-addressed response cache
//! - [`pipeline`] — modality-to-text transformation, summarization,
//!   reasoning augmentation, prompt assembly
//! - [`perturb`] — random paraphrase/dummy-token perturbation and
//!   instruction-guided adversarial perturbation
//! - [`corruption`] — noisy / dynamic / missing scenario operators and grids
//! - [`model`] — hashed n-gram featurization, linear models, SGD training,
//!   PGD and text-adversarial robust training
//! - [`eval`] — metrics, drop ratios, robustness reports
//! - [`harness`] — end-to-end scenario runs and ablations
//! - [`synth`] — seeded synthetic dataset generation for offline runs

pub mod corruption;
pub mod data;
pub mod eval;
pub mod gateway;
pub mod harness;
pub mod model;
pub mod perturb;
pub mod pipeline;
pub mod rng;
pub mod synth;
