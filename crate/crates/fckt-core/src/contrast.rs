//! Token-level semantic contrastive learning over aspect boundary
//! embeddings.
//!
//! The start and end token embeddings of the same aspect form a positive
//! pair. Negatives pair the start embedding with end embeddings of other
//! aspects in the mini-batch and vice versa; only the identical aspect
//! (same source sentence and same span) is excluded, so sibling aspects
//! from one sentence do serve as negatives.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    /// Positive term included in the denominator (standard InfoNCE; keeps
    /// the loss nonnegative). Default.
    WithPositive,
    /// Denominator holds only the negative terms.
    NegativesOnly,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastConfig {
    pub tau: f64,
    pub enabled: bool,
    pub denominator: DenominatorMode,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            tau: 0.07,
            enabled: true,
            denominator: DenominatorMode::WithPositive,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::Config(format!(
                "contrast.tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// One aspect's boundary embeddings within a batch, with enough provenance
/// to exclude it from its own negative pool.
#[derive(Clone, Debug)]
pub struct AspectEmbedding {
    pub source_id: String,
    pub span: (usize, usize),
    /// 1 x d start-token embedding node.
    pub start: NodeId,
    /// 1 x d end-token embedding node.
    pub end: NodeId,
}

/// One positive pair with its negative pools.
#[derive(Clone, Debug)]
pub struct ContrastPair {
    pub start: NodeId,
    pub end: NodeId,
    /// End embeddings of other aspects, paired against `start`.
    pub neg_ends: Vec<NodeId>,
    /// Start embeddings of other aspects, paired against `end`.
    pub neg_starts: Vec<NodeId>,
}

#[derive(Clone, Debug, Default)]
pub struct PairBatch {
    pub pairs: Vec<ContrastPair>,
}

impl PairBatch {
    /// Positives that actually have negatives; the rest contribute zero
    /// loss.
    pub fn active_pairs(&self) -> usize {
        self.pairs
            .iter()
            .filter(|p| !p.neg_ends.is_empty() || !p.neg_starts.is_empty())
            .count()
    }
}

/// Builds one positive pair per aspect in the batch; negatives are drawn
/// from every other aspect, excluding exact duplicates of the same aspect.
pub fn build_pairs(items: &[AspectEmbedding]) -> PairBatch {
    let pairs = items
        .iter()
        .map(|item| {
            let mut neg_ends = Vec::new();
            let mut neg_starts = Vec::new();
            for other in items {
                let same_aspect =
                    other.source_id == item.source_id && other.span == item.span;
                if same_aspect {
                    continue;
                }
                neg_ends.push(other.end);
                neg_starts.push(other.start);
            }
            ContrastPair {
                start: item.start,
                end: item.end,
                neg_ends,
                neg_starts,
            }
        })
        .collect();
    PairBatch { pairs }
}

/// InfoNCE loss summed over positive pairs:
///
///   -log[ exp(cos(h_s, h_e)/τ) / (D) ]
///   D = exp(cos(h_s, h_e)/τ)      (with_positive only)
///     + Σ_i exp(cos(h_s, h_i)/τ) + Σ_j exp(cos(h_e, h_j)/τ)
///
/// Pairs without negatives contribute zero. Zero-norm embeddings are an
/// invalid state, not silently clamped.
pub fn contrastive_loss(
    g: &mut Graph,
    batch: &PairBatch,
    tau: f64,
    mode: DenominatorMode,
) -> Result<NodeId> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive: {tau}")));
    }
    let mut terms: Vec<NodeId> = Vec::new();
    for pair in &batch.pairs {
        if pair.neg_ends.is_empty() && pair.neg_starts.is_empty() {
            continue;
        }
        for &node in [pair.start, pair.end]
            .iter()
            .chain(&pair.neg_ends)
            .chain(&pair.neg_starts)
        {
            if g.value(node).norm() == 0.0 {
                return Err(Error::InvalidState(
                    "zero-norm embedding in contrastive pair".into(),
                ));
            }
        }
        let pos_cos = g.cosine(pair.start, pair.end);
        let pos_scaled = g.scale(pos_cos, 1.0 / tau);
        let pos_exp = g.exp(pos_scaled);

        let mut denom: Option<NodeId> = match mode {
            DenominatorMode::WithPositive => Some(pos_exp),
            DenominatorMode::NegativesOnly => None,
        };
        let mut add_term = |g: &mut Graph, anchor: NodeId, other: NodeId| {
            let cos = g.cosine(anchor, other);
            let scaled = g.scale(cos, 1.0 / tau);
            let e = g.exp(scaled);
            denom = Some(match denom {
                Some(d) => g.add(d, e),
                None => e,
            });
        };
        for &neg in &pair.neg_ends {
            add_term(g, pair.start, neg);
        }
        for &neg in &pair.neg_starts {
            add_term(g, pair.end, neg);
        }
        let denom = denom.expect("at least one negative");

        // -log(pos/denom) = log(denom) - cos(pos)/tau
        let log_denom = g.ln_clamped(denom, f64::MIN_POSITIVE);
        let term = g.sub(log_denom, pos_scaled);
        terms.push(term);
    }
    let total = match terms.len() {
        0 => g.leaf(crate::tensor::Tensor::scalar(0.0)),
        _ => {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = g.add(acc, t);
            }
            acc
        }
    };
    Ok(total)
}
