//! Contextual token encoder: a bidirectional transformer producing one
//! d-dimensional embedding row per sub-word.
//!
//! Two backbones sit behind one interface. `toy` is a small randomly
//! initialized transformer with learned positional embeddings, sized to run
//! every test on a desktop CPU. `pretrained` is the same architecture
//! initialized from a weights file (`encoder.weights_path`) instead of
//! random init, for plugging in an externally trained backbone; it fails
//! loudly when the file is absent.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::tokenizer::{subword_ids, TokenMap, Vocab};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Pretrained,
    Toy,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub freeze: bool,
    /// Weight file for `kind = pretrained`.
    pub weights_path: Option<PathBuf>,
    pub max_vocab: usize,
    pub piece_slots: u32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Toy,
            dim: 32,
            layers: 2,
            heads: 2,
            max_len: 64,
            dropout: 0.1,
            freeze: false,
            weights_path: None,
            max_vocab: 30_000,
            piece_slots: 256,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.max_len == 0 {
            return Err(Error::Config(
                "encoder dim/layers/heads/max_len must be positive".into(),
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder.dim {} not divisible by encoder.heads {}",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "encoder.dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    fn ffn_dim(&self) -> usize {
        self.dim * 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

/// The encoder's view of one sentence: sub-word embedding rows plus the
/// word alignment.
pub struct EncodedSequence {
    /// n' x d matrix node, n' = sub-word count.
    pub node: NodeId,
    pub token_map: TokenMap,
}

impl EncodedSequence {
    /// Word-level matrix: the first sub-word row of each word, stacked in
    /// word order. Differentiable back into the sub-word rows.
    pub fn word_matrix(&self, graph: &mut Graph) -> NodeId {
        graph.gather_rows(self.node, &self.token_map.first_rows())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LayerParams {
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    wo: ParamId,
    wo_b: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ff1: ParamId,
    ff1_b: ParamId,
    ff2: ParamId,
    ff2_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    cfg: EncoderConfig,
    vocab: Vocab,
    embed: ParamId,
    pos: ParamId,
    layers: Vec<LayerParams>,
}

impl Encoder {
    /// Registers all encoder parameters in `store`. For the pretrained kind
    /// the freshly initialized values are replaced by the weights file.
    pub fn new(
        cfg: EncoderConfig,
        vocab: Vocab,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let head_dim = d / cfg.heads;
        let embed = store.register("enc.embed", init(rng, vocab.id_space(), d, 0.1));
        let pos = store.register("enc.pos", init(rng, cfg.max_len, d, 0.1));
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut wq = Vec::new();
            let mut wk = Vec::new();
            let mut wv = Vec::new();
            for h in 0..cfg.heads {
                wq.push(store.register(&format!("enc.l{l}.h{h}.wq"), xavier(rng, d, head_dim)));
                wk.push(store.register(&format!("enc.l{l}.h{h}.wk"), xavier(rng, d, head_dim)));
                wv.push(store.register(&format!("enc.l{l}.h{h}.wv"), xavier(rng, d, head_dim)));
            }
            layers.push(LayerParams {
                wq,
                wk,
                wv,
                wo: store.register(&format!("enc.l{l}.wo"), xavier(rng, d, d)),
                wo_b: store.register(&format!("enc.l{l}.wo_b"), Tensor::zeros(1, d)),
                ln1_g: store.register(&format!("enc.l{l}.ln1_g"), Tensor::filled(1, d, 1.0)),
                ln1_b: store.register(&format!("enc.l{l}.ln1_b"), Tensor::zeros(1, d)),
                ff1: store.register(&format!("enc.l{l}.ff1"), xavier(rng, d, cfg.ffn_dim())),
                ff1_b: store.register(&format!("enc.l{l}.ff1_b"), Tensor::zeros(1, cfg.ffn_dim())),
                ff2: store.register(&format!("enc.l{l}.ff2"), xavier(rng, cfg.ffn_dim(), d)),
                ff2_b: store.register(&format!("enc.l{l}.ff2_b"), Tensor::zeros(1, d)),
                ln2_g: store.register(&format!("enc.l{l}.ln2_g"), Tensor::filled(1, d, 1.0)),
                ln2_b: store.register(&format!("enc.l{l}.ln2_b"), Tensor::zeros(1, d)),
            });
        }
        let encoder = Encoder {
            cfg,
            vocab,
            embed,
            pos,
            layers,
        };
        if encoder.cfg.kind == EncoderKind::Pretrained {
            encoder.load_weights(store)?;
        }
        Ok(encoder)
    }

    fn load_weights(&self, store: &mut ParamStore) -> Result<()> {
        let path = self.cfg.weights_path.as_ref().ok_or_else(|| {
            Error::Config(
                "encoder.kind = pretrained requires encoder.weights_path; \
                 use encoder.kind = toy for a randomly initialized backbone"
                    .into(),
            )
        })?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let named: std::collections::HashMap<String, Tensor> =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            if !name.starts_with("enc.") {
                continue;
            }
            let value = named.get(&name).ok_or_else(|| {
                Error::Checkpoint(format!("weights file missing parameter {name}"))
            })?;
            if value.shape() != store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "weights file shape mismatch for {name}: {:?} vs {:?}",
                    value.shape(),
                    store.value(id).shape()
                )));
            }
            store.set_value(id, value.clone());
        }
        Ok(())
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    /// Restores non-serialized lookup state after deserialization.
    pub fn rebuild(&mut self) {
        self.vocab.rebuild_index();
    }

    /// Encodes one sentence. Training mode applies dropout from `rng`;
    /// inference mode is deterministic under fixed weights.
    pub fn encode(
        &self,
        graph: &mut Graph,
        store: &ParamStore,
        tokens: &[String],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<EncodedSequence> {
        if tokens.is_empty() {
            return Err(Error::Encode("empty token list".into()));
        }
        let (ids, token_map) = subword_ids(&self.vocab, tokens);
        if ids.len() > self.cfg.max_len {
            return Err(Error::Encode(format!(
                "sequence of {} sub-words exceeds max_len {}",
                ids.len(),
                self.cfg.max_len
            )));
        }
        let n = ids.len();
        let drop = match mode {
            Mode::Training => self.cfg.dropout,
            Mode::Inference => 0.0,
        };

        let embed = graph.param(store, self.embed);
        let pos = graph.param(store, self.pos);
        let row_ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tok = graph.gather_rows(embed, &row_ids);
        let pos_rows = graph.gather_rows(pos, &(0..n).collect::<Vec<_>>());
        let mut h = graph.add(tok, pos_rows);
        h = graph.dropout(h, drop, rng);

        let scale = 1.0 / ((self.cfg.dim / self.cfg.heads) as f64).sqrt();
        for layer in &self.layers {
            // multi-head self-attention
            let mut heads = Vec::with_capacity(layer.wq.len());
            for ((&wq, &wk), &wv) in layer.wq.iter().zip(&layer.wk).zip(&layer.wv) {
                let wq = graph.param(store, wq);
                let wk = graph.param(store, wk);
                let wv = graph.param(store, wv);
                let q = graph.matmul(h, wq);
                let k = graph.matmul(h, wk);
                let v = graph.matmul(h, wv);
                let kt = graph.transpose(k);
                let scores = graph.matmul(q, kt);
                let scaled = graph.scale(scores, scale);
                let attn = graph.softmax_rows(scaled);
                heads.push(graph.matmul(attn, v));
            }
            let ctx = if heads.len() == 1 {
                heads[0]
            } else {
                graph.concat_cols(&heads)
            };
            let wo = graph.param(store, layer.wo);
            let wo_b = graph.param(store, layer.wo_b);
            let proj = graph.matmul(ctx, wo);
            let proj = graph.add_bias(proj, wo_b);
            let proj = graph.dropout(proj, drop, rng);
            let res = graph.add(h, proj);
            let ln1_g = graph.param(store, layer.ln1_g);
            let ln1_b = graph.param(store, layer.ln1_b);
            h = graph.layer_norm(res, ln1_g, ln1_b, 1e-5);

            // position-wise feed-forward
            let ff1 = graph.param(store, layer.ff1);
            let ff1_b = graph.param(store, layer.ff1_b);
            let ff2 = graph.param(store, layer.ff2);
            let ff2_b = graph.param(store, layer.ff2_b);
            let a = graph.matmul(h, ff1);
            let a = graph.add_bias(a, ff1_b);
            let a = graph.tanh(a);
            let b = graph.matmul(a, ff2);
            let b = graph.add_bias(b, ff2_b);
            let b = graph.dropout(b, drop, rng);
            let res = graph.add(h, b);
            let ln2_g = graph.param(store, layer.ln2_g);
            let ln2_b = graph.param(store, layer.ln2_b);
            h = graph.layer_norm(res, ln2_g, ln2_b, 1e-5);
        }

        Ok(EncodedSequence {
            node: h,
            token_map,
        })
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
            .collect(),
    )
}

fn init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
            .collect(),
    )
}
