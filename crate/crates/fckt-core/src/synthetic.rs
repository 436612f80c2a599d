//! Deterministic synthetic corpus for end-to-end checks.
//!
//! Aspects are marked by a cue token (`mk`) followed by one to three words
//! from a dedicated aspect vocabulary; the gold span covers exactly those
//! words. Polarity is carried by a cue token placed right after the span
//! (`good`/`fine` positive, `bad`/`poor` negative, nothing for neutral), and
//! a contrast marker `except` directly before a polarity cue flips it. The
//! surface vocabulary is exactly 200 forms.

use crate::corpus::{AnnotatedSentence, AspectAnnotation, Polarity};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FILLER_COUNT: usize = 154;
const ASPECT_WORDS: usize = 40;

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub sentences: usize,
    pub seed: u64,
    /// Probability that a sentence carries no aspect.
    pub zero_aspect_rate: f64,
    /// Probability that an aspect is emitted without its `mk` marker; such
    /// aspects always carry a polarity clause, so locating them requires
    /// the sentiment context rather than the marker.
    pub markerless_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            sentences: 300,
            seed: 7,
            zero_aspect_rate: 0.1,
            markerless_rate: 0.3,
        }
    }
}

/// The full 200-form surface vocabulary.
pub fn vocabulary() -> Vec<String> {
    let mut v: Vec<String> = (0..FILLER_COUNT).map(|i| format!("w{i:03}")).collect();
    v.extend((0..ASPECT_WORDS).map(|i| format!("item{i:02}")));
    v.extend(
        ["mk", "good", "fine", "bad", "poor", "except"]
            .iter()
            .map(|s| s.to_string()),
    );
    v
}

fn filler(rng: &mut ChaCha8Rng) -> String {
    format!("w{:03}", rng.random_range(0..FILLER_COUNT))
}

fn aspect_word(rng: &mut ChaCha8Rng) -> String {
    format!("item{:02}", rng.random_range(0..ASPECT_WORDS))
}

fn positive_cue(rng: &mut ChaCha8Rng) -> &'static str {
    if rng.random::<bool>() {
        "good"
    } else {
        "fine"
    }
}

fn negative_cue(rng: &mut ChaCha8Rng) -> &'static str {
    if rng.random::<bool>() {
        "bad"
    } else {
        "poor"
    }
}

pub fn generate(cfg: &SyntheticConfig) -> Vec<AnnotatedSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.sentences)
        .map(|i| generate_sentence(&mut rng, cfg, i))
        .collect()
}

fn generate_sentence(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
    index: usize,
) -> AnnotatedSentence {
    let n_aspects = if rng.random::<f64>() < cfg.zero_aspect_rate {
        0
    } else {
        // 1 aspect 50%, 2 aspects 35%, 3 aspects 15%
        match rng.random::<f64>() {
            x if x < 0.50 => 1,
            x if x < 0.85 => 2,
            _ => 3,
        }
    };

    let mut tokens: Vec<String> = Vec::new();
    let mut aspects = Vec::new();
    for _ in 0..rng.random_range(1..=2usize) {
        tokens.push(filler(rng));
    }
    for _ in 0..n_aspects {
        let markerless = rng.random::<f64>() < cfg.markerless_rate;
        if !markerless {
            tokens.push("mk".to_string());
        }
        let span_len = rng.random_range(1..=3usize);
        let start = tokens.len();
        for _ in 0..span_len {
            tokens.push(aspect_word(rng));
        }
        let end = tokens.len() - 1;
        // markerless aspects are only identifiable by their polarity clause
        let polarity = if markerless {
            if rng.random::<bool>() {
                Polarity::Positive
            } else {
                Polarity::Negative
            }
        } else {
            match rng.random_range(0..3u8) {
                0 => Polarity::Positive,
                1 => Polarity::Negative,
                _ => Polarity::Neutral,
            }
        };
        if polarity != Polarity::Neutral {
            if rng.random::<bool>() {
                // direct cue
                let cue = match polarity {
                    Polarity::Positive => positive_cue(rng),
                    _ => negative_cue(rng),
                };
                tokens.push(cue.to_string());
            } else {
                // contrast marker flips the cue's surface polarity
                tokens.push("except".to_string());
                let cue = match polarity.flipped() {
                    Polarity::Positive => positive_cue(rng),
                    _ => negative_cue(rng),
                };
                tokens.push(cue.to_string());
            }
        }
        aspects.push(AspectAnnotation {
            start,
            end,
            polarity,
        });
        for _ in 0..rng.random_range(1..=2usize) {
            tokens.push(filler(rng));
        }
    }
    for _ in 0..rng.random_range(0..=1usize) {
        tokens.push(filler(rng));
    }

    AnnotatedSentence {
        tokens,
        aspects,
        source_id: format!("syn-{index:06}"),
    }
}
