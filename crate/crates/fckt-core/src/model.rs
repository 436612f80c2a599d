//! The full model: shared encoder, boundary heads, and sentiment classifier,
//! plus the inference pipeline (decode spans, then classify each one).

use crate::boundary::{decode_spans, BoundaryDistributions, BoundaryHeads, BoundaryNodes, SpanPrediction};
use crate::config::RunConfig;
use crate::corpus::{AnnotatedSentence, Polarity};
use crate::encoder::{EncodedSequence, Encoder, Mode};
use crate::error::Result;
use crate::exec;
use crate::graph::{Graph, NodeId};
use crate::params::{derive_seed, ParamStore};
use crate::tokenizer::Vocab;
use crate::transfer::SentimentClassifier;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Everything the sentence-level forward pass produces.
pub struct SentenceForward {
    pub encoded: EncodedSequence,
    /// n x d word-level matrix (first sub-word row per word).
    pub h_word: NodeId,
    pub boundaries: BoundaryNodes,
}

/// One predicted aspect with its sentiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AspectPrediction {
    pub start: usize,
    pub end: usize,
    pub polarity: Polarity,
    pub span_score: f64,
    pub sentiment_probs: Vec<f64>,
}

impl AspectPrediction {
    pub fn item(&self) -> ((usize, usize), Polarity) {
        ((self.start, self.end), self.polarity)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TsaModel {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub boundary: BoundaryHeads,
    pub classifier: SentimentClassifier,
}

impl TsaModel {
    /// Builds a freshly initialized model; initialization randomness derives
    /// from the run seed.
    pub fn new(cfg: &RunConfig, vocab: Vocab) -> Result<TsaModel> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.trainer.seed, "init", &[]));
        let encoder = Encoder::new(cfg.encoder.clone(), vocab, &mut store, &mut rng)?;
        let boundary = BoundaryHeads::new(&mut store, cfg.encoder.dim, &mut rng);
        let classifier = SentimentClassifier::new(&mut store, cfg.encoder.dim, &mut rng);
        Ok(TsaModel {
            store,
            encoder,
            boundary,
            classifier,
        })
    }

    /// Restores lookup state after deserialization.
    pub fn rebuild(&mut self) {
        self.encoder.rebuild();
    }

    /// Encoder, word selection, and boundary prediction for one sentence.
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &[String],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<SentenceForward> {
        let encoded = self.encoder.encode(g, &self.store, tokens, mode, rng)?;
        let h_word = encoded.word_matrix(g);
        let boundaries = self.boundary.predict(g, &self.store, h_word);
        Ok(SentenceForward {
            encoded,
            h_word,
            boundaries,
        })
    }

    /// Inference-mode boundary distributions for one sentence.
    pub fn boundary_distributions(&self, tokens: &[String]) -> Result<BoundaryDistributions> {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward(&mut g, tokens, Mode::Inference, &mut rng)?;
        Ok(BoundaryHeads::distributions(&g, &fwd.boundaries))
    }

    /// Full inference for one sentence: decode spans from the predicted
    /// boundary distributions, then classify each decoded span on the real
    /// path.
    pub fn predict_sentence(
        &self,
        tokens: &[String],
        cfg: &RunConfig,
    ) -> Result<Vec<AspectPrediction>> {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward(&mut g, tokens, Mode::Inference, &mut rng)?;
        let dist = BoundaryHeads::distributions(&g, &fwd.boundaries);
        let spans = decode_spans(
            &dist,
            cfg.decode_h(),
            cfg.decode.max_spans,
            cfg.decode.threshold,
        );
        self.classify_spans(&mut g, fwd.h_word, &spans)
    }

    fn classify_spans(
        &self,
        g: &mut Graph,
        h_word: NodeId,
        spans: &[SpanPrediction],
    ) -> Result<Vec<AspectPrediction>> {
        spans
            .iter()
            .map(|span| {
                let probs = crate::transfer::classify_real(
                    g,
                    &self.store,
                    &self.classifier,
                    h_word,
                    span.start,
                    span.end,
                )?;
                let probs = g.value(probs).data().to_vec();
                let polarity = argmax_polarity(&probs);
                Ok(AspectPrediction {
                    start: span.start,
                    end: span.end,
                    polarity,
                    span_score: span.score,
                    sentiment_probs: probs,
                })
            })
            .collect()
    }

    /// Predictions for a whole corpus, parallel across sentences.
    pub fn predict_corpus(
        &self,
        sentences: &[AnnotatedSentence],
        cfg: &RunConfig,
    ) -> Result<Vec<Vec<AspectPrediction>>> {
        exec::ordered_map(sentences, |s| self.predict_sentence(&s.tokens, cfg))
            .into_iter()
            .collect()
    }

    /// Classifies the gold spans of a sentence (the isolated
    /// sentiment-prediction sub-task).
    pub fn classify_gold_spans(&self, sentence: &AnnotatedSentence) -> Result<Vec<Polarity>> {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward(&mut g, &sentence.tokens, Mode::Inference, &mut rng)?;
        sentence
            .aspects
            .iter()
            .map(|a| {
                let probs = crate::transfer::classify_real(
                    &mut g,
                    &self.store,
                    &self.classifier,
                    fwd.h_word,
                    a.start,
                    a.end,
                )?;
                Ok(argmax_polarity(g.value(probs).data()))
            })
            .collect()
    }
}

fn argmax_polarity(probs: &[f64]) -> Polarity {
    let idx = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    Polarity::from_index(idx).unwrap_or(Polarity::Neutral)
}
