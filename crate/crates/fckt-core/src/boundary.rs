//! Aspect boundary prediction: start/end distributions over word positions,
//! the extraction loss, and heuristic span decoding.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Probability of the log clamp used everywhere a predicted probability is
/// fed to a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Predicted start/end probability vectors over word positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryDistributions {
    pub start_probs: Vec<f64>,
    pub end_probs: Vec<f64>,
}

impl BoundaryDistributions {
    pub fn len(&self) -> usize {
        self.start_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start_probs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.start_probs.len() != self.end_probs.len() {
            return Err(Error::InvalidState(
                "start/end distribution length mismatch".into(),
            ));
        }
        for (name, probs) in [("start", &self.start_probs), ("end", &self.end_probs)] {
            if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(Error::InvalidState(format!(
                    "{name} distribution has invalid entries"
                )));
            }
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidState(format!(
                    "{name} distribution sums to {sum}"
                )));
            }
        }
        Ok(())
    }
}

/// A decoded aspect span with its log-probability score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    pub score: f64,
}

/// One position-wise scoring head: a two-layer MLP producing a logit per
/// word, normalized by softmax over the sentence.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct ScoringHead {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl ScoringHead {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        use rand::Rng;
        let mut mat = |rows: usize, cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            Tensor::from_vec(
                rows,
                cols,
                (0..rows * cols)
                    .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
                    .collect(),
            )
        };
        ScoringHead {
            w1: store.register(&format!("{prefix}.w1"), mat(dim, dim)),
            b1: store.register(&format!("{prefix}.b1"), Tensor::zeros(1, dim)),
            w2: store.register(&format!("{prefix}.w2"), mat(dim, 1)),
            b2: store.register(&format!("{prefix}.b2"), Tensor::zeros(1, 1)),
        }
    }

    /// 1 x n probability row over word positions.
    fn forward(&self, g: &mut Graph, store: &ParamStore, h_word: NodeId) -> NodeId {
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let a = g.matmul(h_word, w1);
        let a = g.add_bias(a, b1);
        let a = g.tanh(a);
        let logits = g.matmul(a, w2); // n x 1
        let logits = g.add_bias(logits, b2);
        let row = g.transpose(logits); // 1 x n
        g.softmax_rows(row)
    }

    fn param_ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// The two independent boundary heads (start and end).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundaryHeads {
    start: ScoringHead,
    end: ScoringHead,
}

/// Graph nodes of the predicted distributions, each 1 x n.
#[derive(Clone, Copy, Debug)]
pub struct BoundaryNodes {
    pub start: NodeId,
    pub end: NodeId,
}

impl BoundaryHeads {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        BoundaryHeads {
            start: ScoringHead::new(store, "bnd.start", dim, rng),
            end: ScoringHead::new(store, "bnd.end", dim, rng),
        }
    }

    /// Predicts both boundary distributions from the word-level matrix.
    pub fn predict(&self, g: &mut Graph, store: &ParamStore, h_word: NodeId) -> BoundaryNodes {
        BoundaryNodes {
            start: self.start.forward(g, store, h_word),
            end: self.end.forward(g, store, h_word),
        }
    }

    /// Plain-value distributions from already-built nodes.
    pub fn distributions(g: &Graph, nodes: &BoundaryNodes) -> BoundaryDistributions {
        BoundaryDistributions {
            start_probs: g.value(nodes.start).data().to_vec(),
            end_probs: g.value(nodes.end).data().to_vec(),
        }
    }

    /// All head parameters, start head first.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.start.param_ids().to_vec();
        ids.extend(self.end.param_ids());
        ids
    }
}

/// Value and clamp count of a probability-based loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Number of probabilities that hit the log clamp.
    pub clamped: usize,
}

/// Extraction loss for one example: cross-entropy of each one-hot boundary
/// target against the predicted distribution,
/// -log p̂_s[argmax(start_target)] - log p̂_e[argmax(end_target)].
/// Batch values are sums of per-example values.
pub fn boundary_loss(
    pred: &BoundaryDistributions,
    start_target: &[f64],
    end_target: &[f64],
) -> Result<LossValue> {
    if pred.start_probs.len() != start_target.len() || pred.end_probs.len() != end_target.len() {
        return Err(Error::InvalidState(
            "boundary target length mismatch".into(),
        ));
    }
    let s = argmax(start_target);
    let e = argmax(end_target);
    let mut clamped = 0;
    let mut term = |p: f64| {
        if p < LOG_CLAMP {
            clamped += 1;
        }
        -p.max(LOG_CLAMP).ln()
    };
    let value = term(pred.start_probs[s]) + term(pred.end_probs[e]);
    Ok(LossValue { value, clamped })
}

/// Graph version of [`boundary_loss`] for training; returns a scalar node.
pub fn boundary_loss_node(
    g: &mut Graph,
    nodes: &BoundaryNodes,
    start_index: usize,
    end_index: usize,
    clamped: &mut usize,
) -> NodeId {
    for (node, idx) in [(nodes.start, start_index), (nodes.end, end_index)] {
        if g.value(node).data()[idx] < LOG_CLAMP {
            *clamped += 1;
        }
    }
    let ps = g.pick(nodes.start, start_index);
    let pe = g.pick(nodes.end, end_index);
    let ls = g.ln_clamped(ps, LOG_CLAMP);
    let le = g.ln_clamped(pe, LOG_CLAMP);
    let sum = g.add(ls, le);
    g.scale(sum, -1.0)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Heuristic span extraction: enumerate candidates (i, j) with
/// j - i + 1 <= h, score them by log p̂_s[i] + log p̂_e[j], select greedily by
/// descending score skipping overlaps, stop at `max_spans` or when the score
/// falls below `threshold`. Result is sorted by start index.
pub fn decode_spans(
    pred: &BoundaryDistributions,
    h: usize,
    max_spans: usize,
    threshold: f64,
) -> Vec<SpanPrediction> {
    assert!(h >= 1, "max aspect length must be at least 1");
    let n = pred.len();
    let mut candidates = Vec::new();
    for i in 0..n {
        for j in i..n.min(i + h) {
            let score =
                pred.start_probs[i].max(LOG_CLAMP).ln() + pred.end_probs[j].max(LOG_CLAMP).ln();
            candidates.push(SpanPrediction {
                start: i,
                end: j,
                score,
            });
        }
    }
    // deterministic order: best score first, ties by position
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| (a.start, a.end).cmp(&(b.start, b.end)))
    });
    let mut selected: Vec<SpanPrediction> = Vec::new();
    for c in candidates {
        if selected.len() >= max_spans || c.score < threshold {
            break;
        }
        let overlaps = selected
            .iter()
            .any(|s| c.start <= s.end && s.start <= c.end);
        if !overlaps {
            selected.push(c);
        }
    }
    selected.sort_by_key(|s| s.start);
    selected
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Encoder, EncoderConfig, Mode};
    use crate::tokenizer::Vocab;
    use rand::SeedableRng;

    fn dist(start: &[f64], end: &[f64]) -> BoundaryDistributions {
        BoundaryDistributions {
            start_probs: start.to_vec(),
            end_probs: end.to_vec(),
        }
    }

    #[test]
    fn predictions_are_normalized_distributions() {
        let vocab = Vocab::build(["a", "b", "c"].into_iter(), 8, 8);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = Encoder::new(
            EncoderConfig {
                dim: 8,
                heads: 2,
                ..EncoderConfig::default()
            },
            vocab,
            &mut store,
            &mut rng,
        )
        .unwrap();
        let heads = BoundaryHeads::new(&mut store, 8, &mut rng);

        let tokens: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let run = || {
            let mut g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let seq = enc
                .encode(&mut g, &store, &tokens, Mode::Inference, &mut rng)
                .unwrap();
            let h_word = seq.word_matrix(&mut g);
            let nodes = heads.predict(&mut g, &store, h_word);
            BoundaryHeads::distributions(&g, &nodes)
        };
        let d = run();
        assert_eq!(d.len(), 3);
        d.validate().unwrap();
        // deterministic under fixed weights in inference mode
        assert_eq!(d, run());
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let pred = dist(&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]);
        let loss = boundary_loss(&pred, &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(loss.value, 0.0);
        assert_eq!(loss.clamped, 0);
    }

    #[test]
    fn uniform_prediction_loss_is_two_ln_three() {
        let u = [1.0 / 3.0; 3];
        let pred = dist(&u, &u);
        let loss = boundary_loss(&pred, &[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]).unwrap();
        assert!((loss.value - 2.0 * 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn degrading_start_probability_increases_loss() {
        let end = [0.0, 0.0, 1.0];
        let better = dist(&[0.1, 0.8, 0.1], &end);
        let worse = dist(&[0.45, 0.1, 0.45], &end);
        let t_s = [0.0, 1.0, 0.0];
        let t_e = [0.0, 0.0, 1.0];
        let lb = boundary_loss(&better, &t_s, &t_e).unwrap().value;
        let lw = boundary_loss(&worse, &t_s, &t_e).unwrap().value;
        assert!(lw > lb);
    }

    #[test]
    fn zero_probability_is_clamped_and_reported() {
        let pred = dist(&[1.0, 0.0], &[1.0, 0.0]);
        let loss = boundary_loss(&pred, &[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert_eq!(loss.clamped, 1);
        assert!(loss.value.is_finite());
        assert!(loss.value >= 0.0);
    }

    #[test]
    fn decode_picks_highest_scoring_span() {
        let pred = dist(&[0.7, 0.2, 0.1], &[0.1, 0.8, 0.1]);
        let spans = decode_spans(&pred, 2, 1, -6.0);
        assert_eq!(spans.len(), 1);
        assert_eq!((spans[0].start, spans[0].end), (0, 1));
    }

    #[test]
    fn decode_single_token_aspect() {
        let pred = dist(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]);
        let spans = decode_spans(&pred, 3, 5, -6.0);
        assert_eq!(spans.len(), 1);
        assert_eq!((spans[0].start, spans[0].end), (1, 1));
    }

    #[test]
    fn decode_two_disjoint_peaks() {
        let pred = dist(&[0.45, 0.02, 0.05, 0.45, 0.03], &[0.45, 0.02, 0.05, 0.45, 0.03]);
        let spans = decode_spans(&pred, 2, 2, -6.0);
        assert_eq!(spans.len(), 2);
        assert_eq!((spans[0].start, spans[0].end), (0, 0));
        assert_eq!((spans[1].start, spans[1].end), (3, 3));
        // enumeration oracle: both selected spans beat every remaining
        // non-overlapping candidate
        let rest_best = (0..5)
            .flat_map(|i| (i..5.min(i + 2)).map(move |j| (i, j)))
            .filter(|&(i, j)| !(i <= spans[1].end && spans[0].start <= j))
            .map(|(i, j)| pred.start_probs[i].ln() + pred.end_probs[j].ln())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(spans.iter().all(|s| s.score >= rest_best));
    }

    #[test]
    fn decode_respects_threshold_and_can_return_empty() {
        let pred = dist(&[0.5, 0.5], &[0.5, 0.5]);
        let spans = decode_spans(&pred, 2, 5, 0.0);
        assert!(spans.is_empty());
    }

    #[test]
    fn graph_loss_matches_value_loss() {
        let mut g = Graph::new();
        let ps = g.leaf(Tensor::row(&[0.2, 0.5, 0.3]));
        let pe = g.leaf(Tensor::row(&[0.1, 0.1, 0.8]));
        let nodes = BoundaryNodes { start: ps, end: pe };
        let mut clamped = 0;
        let node = boundary_loss_node(&mut g, &nodes, 1, 2, &mut clamped);
        let pred = dist(&[0.2, 0.5, 0.3], &[0.1, 0.1, 0.8]);
        let expect = boundary_loss(&pred, &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]).unwrap();
        assert!((g.value(node).item() - expect.value).abs() < 1e-15);
        assert_eq!(clamped, 0);
    }

    proptest::proptest! {
        /// Greedy decode never overlaps, never exceeds the length cap, and
        /// its top-1 equals exhaustive search.
        #[test]
        fn decode_invariants(
            raw_s in proptest::collection::vec(1e-4f64..1.0, 2..10),
            raw_e in proptest::collection::vec(1e-4f64..1.0, 2..10),
            h in 1usize..5,
            max_spans in 1usize..5,
        ) {
            let n = raw_s.len().min(raw_e.len());
            let norm = |v: &[f64]| {
                let s: f64 = v[..n].iter().sum();
                v[..n].iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let pred = dist(&norm(&raw_s), &norm(&raw_e));
            let spans = decode_spans(&pred, h, max_spans, f64::NEG_INFINITY);
            for s in &spans {
                proptest::prop_assert!(s.start <= s.end);
                proptest::prop_assert!(s.end - s.start + 1 <= h);
            }
            for pair in spans.windows(2) {
                proptest::prop_assert!(pair[0].end < pair[1].start);
            }
            // top-1 equals exhaustive argmax
            let best = (0..n)
                .flat_map(|i| (i..n.min(i + h)).map(move |j| (i, j)))
                .max_by(|&(i1, j1), &(i2, j2)| {
                    let s1 = pred.start_probs[i1].ln() + pred.end_probs[j1].ln();
                    let s2 = pred.start_probs[i2].ln() + pred.end_probs[j2].ln();
                    s1.partial_cmp(&s2)
                        .unwrap()
                        .then_with(|| (i2, j2).cmp(&(i1, j1)))
                })
                .unwrap();
            // prefer the earliest span on score ties, matching greedy's
            // deterministic tie-break
            let top = spans
                .iter()
                .max_by(|a, b| {
                    a.score
                        .partial_cmp(&b.score)
                        .unwrap()
                        .then_with(|| (b.start, b.end).cmp(&(a.start, a.end)))
                })
                .unwrap();
            proptest::prop_assert_eq!((top.start, top.end), best);
        }
    }
}
