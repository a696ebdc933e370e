//! Seeded synthetic dataset generation.
//!
//! Labels are a deterministic function of class keywords planted redundantly
//! across all three modality channels, so corrupting one channel leaves the
//! label recoverable from the others. Non-text channels carry the keyword
//! with a configurable confusion probability (a seeded wrong-class keyword
//! otherwise), which keeps the text channel the most reliable signal the way
//! real multimodal data skews, and makes corruption sweeps informative
//! rather than flat.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{manifest_text, Dataset, Label, MultimodalSample, Task};
use crate::rng;

/// Class keyword palette; `num_classes` may not exceed its size.
pub const PALETTE: [&str; 16] = [
    "crimson", "azure", "amber", "viridian", "cobalt", "sienna", "ochre", "indigo", "maroon",
    "teal", "coral", "slate", "umber", "jade", "plum", "rustic",
];

const NOUNS: [&str; 8] = [
    "terrier", "tabby", "parrot", "lizard", "pony", "rabbit", "finch", "beagle",
];

const DEFAULT_VOCABULARY: [&str; 24] = [
    "garden", "window", "meadow", "harbor", "attic", "bridge", "market", "stream", "hollow",
    "orchard", "cellar", "summit", "valley", "corner", "lantern", "pasture", "thicket", "plaza",
    "grove", "terrace", "quarry", "shore", "trail", "courtyard",
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
    #[error("failed to write manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub size: usize,
    pub num_classes: u32,
    pub seed: u64,
    /// Filler vocabulary; empty means the builtin list.
    pub vocabulary: Vec<String>,
    /// Probability that a non-text channel carries a wrong-class keyword.
    pub confuser_probability: f64,
    /// Keyword repetitions planted in the free-text channel.
    pub text_keyword_repeats: u32,
    pub name: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            size: 200,
            num_classes: 4,
            seed: 1,
            vocabulary: Vec::new(),
            confuser_probability: 0.3,
            text_keyword_repeats: 1,
            name: "synthetic".into(),
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<(), SynthError> {
        if self.size < 10 {
            return Err(SynthError::BadSpec(format!("size {} must be >= 10", self.size)));
        }
        if self.num_classes < 2 || self.num_classes as usize > PALETTE.len() {
            return Err(SynthError::BadSpec(format!(
                "num_classes {} must be in 2..={}",
                self.num_classes,
                PALETTE.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.confuser_probability) {
            return Err(SynthError::BadSpec("confuser_probability must be in [0, 1]".into()));
        }
        if self.text_keyword_repeats == 0 {
            return Err(SynthError::BadSpec("text_keyword_repeats must be >= 1".into()));
        }
        Ok(())
    }

    fn fillers(&self) -> Vec<&str> {
        if self.vocabulary.is_empty() {
            DEFAULT_VOCABULARY.to_vec()
        } else {
            self.vocabulary.iter().map(String::as_str).collect()
        }
    }
}

/// Generate the dataset in memory. Byte-identical for identical specs.
pub fn generate_synthetic_dataset(spec: &SynthSpec) -> Result<Dataset, SynthError> {
    spec.validate()?;
    let fillers = spec.fillers();
    let classes = spec.num_classes as usize;
    let filler = |stream: &mut rand_chacha::ChaCha12Rng| fillers[stream.random_range(0..fillers.len())];
    let other_class = |stream: &mut rand_chacha::ChaCha12Rng, class: usize| {
        let offset = stream.random_range(1..classes);
        PALETTE[(class + offset) % classes]
    };
    let mut samples = Vec::with_capacity(spec.size);
    for index in 0..spec.size {
        let mut stream = rng::stream_indexed(spec.seed, "synth_sample", index as u64);
        let class = index % classes;
        let keyword = PALETTE[class];
        let noun = NOUNS[stream.random_range(0..NOUNS.len())];

        let marker = if stream.random_bool(spec.confuser_probability) {
            other_class(&mut stream, class)
        } else {
            keyword
        };
        let caption_keyword = if stream.random_bool(spec.confuser_probability) {
            other_class(&mut stream, class)
        } else {
            keyword
        };

        let tabular = vec![
            ("subject".to_string(), noun.to_string()),
            ("marker".to_string(), marker.to_string()),
            ("grade".to_string(), stream.random_range(1..10u32).to_string()),
            ("note".to_string(), filler(&mut stream).to_string()),
        ];
        let caption = format!(
            "A photo of a {caption_keyword} {noun} beside the {}.",
            filler(&mut stream)
        );

        let mut words: Vec<String> = vec![
            "The".into(),
            noun.into(),
            "seems".into(),
            "very".into(),
            keyword.into(),
            "by".into(),
            "the".into(),
            filler(&mut stream).into(),
            filler(&mut stream).into(),
        ];
        for _ in 1..spec.text_keyword_repeats {
            let tail_filler = filler(&mut stream);
            words.extend(
                ["and", "stays", keyword, "near", "the", tail_filler]
                    .into_iter()
                    .map(String::from),
            );
        }
        let free_text = words.join(" ");

        samples.push(MultimodalSample {
            id: format!("syn-{index:05}"),
            tabular,
            caption,
            free_text,
            label: Label::Class(class as u32),
            image_path: None,
        });
    }

    // Shuffle presentation order; ids keep their generation identity.
    {
        use rand::seq::SliceRandom;
        let mut order_stream = rng::stream(spec.seed, "synth_order", &spec.name);
        samples.shuffle(&mut order_stream);
    }

    Ok(Dataset {
        name: spec.name.clone(),
        task: Task::Classification {
            num_classes: spec.num_classes,
        },
        samples,
    })
}

/// Generate and write the manifest file.
pub fn write_synthetic_manifest(spec: &SynthSpec, path: &Path) -> Result<Dataset, SynthError> {
    let dataset = generate_synthetic_dataset(spec)?;
    fs::write(path, manifest_text(&dataset)).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(dataset)
}
