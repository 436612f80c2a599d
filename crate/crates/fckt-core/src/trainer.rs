//! Joint end-to-end optimization of L = L_ae + L_sp + λ·L_cl over
//! mini-batches.
//!
//! Each batch step runs in three phases. Per-example forward passes build
//! independent graphs (data-parallel); the contrastive loss, which couples
//! examples, is evaluated on a small graph over the collected boundary
//! embeddings; its gradients are then injected back into each example's
//! backward pass as extra seeds. Per-example gradient contributions are
//! reduced in example order, so results are bit-identical with or without
//! the parallel feature.

use crate::boundary::boundary_loss_node;
use crate::config::RunConfig;
use crate::contrast::{build_pairs, contrastive_loss, AspectEmbedding};
use crate::corpus::{split_sentences, AnnotatedSentence, TrainingExample};
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::exec;
use crate::graph::Graph;
use crate::metrics::{evaluate_model, EvalReport};
use crate::model::TsaModel;
use crate::params::{derive_seed, Adam, AdamConfig, GradAccum, ParamId};
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;
use crate::transfer::{mixed_sentiment_loss, GateGranularity, PathTaken, SentimentItem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Loss components and diagnostics of one training step. `total` is always
/// `ae + sp + lambda * cl`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossReport {
    pub ae: f64,
    pub sp: f64,
    pub cl: f64,
    pub lambda: f64,
    pub total: f64,
    pub clamped_boundary: usize,
    pub clamped_sentiment: usize,
    pub grad_norm: f64,
    pub clipped: bool,
    pub paths: Vec<PathTaken>,
}

/// Everything needed to resume or rerun: parameters, optimizer state,
/// config snapshot, and the seed bookkeeping that regenerates every random
/// stream.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: TsaModel,
    pub adam: Adam,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ckpt.model.rebuild();
        Ok(ckpt)
    }
}

/// One line of `metrics.jsonl`. Every field is a deterministic function of
/// (config, seed), so reruns produce byte-identical files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_ae: f64,
    pub loss_sp: f64,
    pub loss_cl: f64,
    pub loss_total: f64,
    pub clipped_steps: usize,
    pub val: EvalReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_epoch: Option<usize>,
    pub best_f1: f64,
    pub best_checkpoint: PathBuf,
    pub epochs_run: usize,
    pub history: Vec<EpochMetrics>,
}

pub struct Trainer {
    pub model: TsaModel,
    adam: Adam,
    cfg: RunConfig,
}

/// Seeded sentence-level train/validation split; evaluation always sees
/// unsplit sentences.
pub fn split_train_val(
    sentences: &[AnnotatedSentence],
    val_fraction: f64,
    seed: u64,
) -> (Vec<AnnotatedSentence>, Vec<AnnotatedSentence>) {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "val-split", &[]));
    order.shuffle(&mut rng);
    let n_val = ((sentences.len() as f64) * val_fraction).round() as usize;
    let val: Vec<_> = order[..n_val].iter().map(|&i| sentences[i].clone()).collect();
    let train: Vec<_> = order[n_val..].iter().map(|&i| sentences[i].clone()).collect();
    (val, train)
}

struct ExampleForward {
    graph: Graph,
    root: crate::graph::NodeId,
    start_emb: crate::graph::NodeId,
    end_emb: crate::graph::NodeId,
    start_val: Tensor,
    end_val: Tensor,
    ae: f64,
    sp: f64,
    clamped_boundary: usize,
    clamped_sentiment: usize,
    path: PathTaken,
}

impl Trainer {
    /// Builds a trainer with a vocabulary derived from the training
    /// sentences.
    pub fn new(cfg: RunConfig, train_sentences: &[AnnotatedSentence]) -> Result<Trainer> {
        cfg.validate()?;
        let vocab = Vocab::build(
            train_sentences
                .iter()
                .flat_map(|s| s.tokens.iter().map(String::as_str)),
            cfg.encoder.max_vocab,
            cfg.encoder.piece_slots,
        );
        let model = TsaModel::new(&cfg, vocab)?;
        let adam = Self::fresh_adam(&cfg, &model);
        Ok(Trainer { model, adam, cfg })
    }

    fn fresh_adam(cfg: &RunConfig, model: &TsaModel) -> Adam {
        let mut adam = Adam::new(
            &model.store,
            AdamConfig {
                learning_rate: cfg.learning_rate(),
                clip_norm: cfg.clip_norm(),
                ..AdamConfig::default()
            },
        );
        if cfg.encoder.freeze {
            adam.freeze_prefix("enc.");
        }
        adam
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Trainer {
        Trainer {
            model: ckpt.model,
            adam: ckpt.adam,
            cfg: ckpt.config,
        }
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn checkpoint(&self, epoch: usize) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            model: self.model.clone(),
            adam: self.adam.clone(),
            epoch,
        }
    }

    /// Uniform(0,1) gate draws for one batch, honoring the configured
    /// granularity. Derived from (seed, epoch, step), never from thread
    /// scheduling.
    fn gate_draws(&self, epoch: usize, step: usize, n: usize) -> Vec<f64> {
        let seed = self.cfg.trainer.seed;
        match self.cfg.transfer.gate_granularity {
            GateGranularity::Example => (0..n)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        seed,
                        "gate",
                        &[epoch as u64, step as u64, i as u64],
                    ));
                    rng.random()
                })
                .collect(),
            GateGranularity::Batch => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    seed,
                    "gate",
                    &[epoch as u64, step as u64],
                ));
                let u = rng.random();
                vec![u; n]
            }
        }
    }

    fn forward_example(
        &self,
        example: &TrainingExample,
        draw: f64,
        epoch: usize,
        step: usize,
        index: usize,
    ) -> Result<ExampleForward> {
        let mut graph = Graph::new();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.cfg.trainer.seed,
            "dropout",
            &[epoch as u64, step as u64, index as u64],
        ));
        let fwd = self
            .model
            .forward(&mut graph, &example.tokens, Mode::Training, &mut drop_rng)?;

        let mut clamped_boundary = 0;
        let ae_node = boundary_loss_node(
            &mut graph,
            &fwd.boundaries,
            example.start,
            example.end,
            &mut clamped_boundary,
        );

        let item = SentimentItem {
            h_word: fwd.h_word,
            boundaries: fwd.boundaries,
            gold_span: (example.start, example.end),
            gold_polarity: example.polarity,
        };
        let sp = mixed_sentiment_loss(
            &mut graph,
            &self.model.store,
            &self.model.classifier,
            &[item],
            &self.cfg.transfer,
            &[draw],
        )?;

        let root = graph.add(ae_node, sp.node);
        let start_emb = graph.gather_rows(fwd.h_word, &[example.start]);
        let end_emb = graph.gather_rows(fwd.h_word, &[example.end]);
        Ok(ExampleForward {
            ae: graph.value(ae_node).item(),
            sp: graph.value(sp.node).item(),
            start_val: graph.value(start_emb).clone(),
            end_val: graph.value(end_emb).clone(),
            graph,
            root,
            start_emb,
            end_emb,
            clamped_boundary,
            clamped_sentiment: sp.clamped,
            path: sp.paths[0],
        })
    }

    /// One optimizer step over a batch: forward, loss aggregation, backward,
    /// Adam update.
    pub fn train_step(
        &mut self,
        batch: &[TrainingExample],
        epoch: usize,
        step: usize,
    ) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::InvalidState("empty batch".into()));
        }
        let lambda = self.cfg.trainer.lambda;
        let draws = self.gate_draws(epoch, step, batch.len());

        // phase 1: independent per-example forwards
        let forwards = exec::ordered_map_indexed(batch, |i, example| {
            self.forward_example(example, draws[i], epoch, step, i)
        });
        let mut examples = Vec::with_capacity(batch.len());
        for fwd in forwards {
            examples.push(fwd?);
        }

        // phase 2: cross-example contrastive loss on the collected
        // boundary embeddings
        let use_contrast = self.cfg.contrast.enabled && lambda != 0.0 && batch.len() > 1;
        let (cl_value, emb_grads) = if use_contrast {
            let mut cg = Graph::new();
            let items: Vec<AspectEmbedding> = examples
                .iter()
                .zip(batch)
                .map(|(fwd, example)| AspectEmbedding {
                    source_id: example.origin.source_id.clone(),
                    span: (example.start, example.end),
                    start: cg.leaf(fwd.start_val.clone()),
                    end: cg.leaf(fwd.end_val.clone()),
                })
                .collect();
            let pair_batch = build_pairs(&items);
            let loss = contrastive_loss(
                &mut cg,
                &pair_batch,
                self.cfg.contrast.tau,
                self.cfg.contrast.denominator,
            )?;
            let grads = cg.backward(loss);
            let per_item: Vec<(Option<Tensor>, Option<Tensor>)> = items
                .iter()
                .map(|item| {
                    (
                        grads.get(item.start).cloned(),
                        grads.get(item.end).cloned(),
                    )
                })
                .collect();
            (cg.value(loss).item(), per_item)
        } else {
            (0.0, vec![(None, None); batch.len()])
        };

        let ae: f64 = examples.iter().map(|e| e.ae).sum();
        let sp: f64 = examples.iter().map(|e| e.sp).sum();
        let total = ae + sp + lambda * cl_value;
        for (name, value) in [("L_ae", ae), ("L_sp", sp), ("L_cl", cl_value)] {
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    component: name.to_string(),
                    step,
                });
            }
        }

        // phase 3: per-example backward with contrastive gradients injected
        // at the embedding nodes
        let contributions = exec::ordered_map_indexed(&examples, |i, fwd| {
            let mut seeds = vec![(fwd.root, Tensor::scalar(1.0))];
            let (ds, de) = &emb_grads[i];
            if let Some(ds) = ds {
                seeds.push((fwd.start_emb, ds.scale(lambda)));
            }
            if let Some(de) = de {
                seeds.push((fwd.end_emb, de.scale(lambda)));
            }
            let grads = fwd.graph.backward_seeded(seeds);
            fwd.graph.param_gradients(&grads)
        });

        let mut accum = GradAccum::new(&self.model.store);
        for contribution in &contributions {
            accum.extend(contribution);
        }
        let report = self.adam.step(&mut self.model.store, &accum)?;

        Ok(LossReport {
            ae,
            sp,
            cl: cl_value,
            lambda,
            total,
            clamped_boundary: examples.iter().map(|e| e.clamped_boundary).sum(),
            clamped_sentiment: examples.iter().map(|e| e.clamped_sentiment).sum(),
            grad_norm: report.grad_norm,
            clipped: report.clipped,
            paths: examples.iter().map(|e| e.path).collect(),
        })
    }

    /// Full training loop: epochs over shuffled split examples, per-epoch
    /// validation, checkpointing, early stopping on validation F1.
    pub fn train(
        &mut self,
        train: &[AnnotatedSentence],
        val: &[AnnotatedSentence],
        run_dir: &Path,
    ) -> Result<TrainOutcome> {
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        self.cfg.save(&run_dir.join("config.snapshot"))?;

        let split = split_sentences(train);
        if split.zero_aspect_sentences > 0 {
            eprintln!(
                "note: {} of {} training sentences carry no aspect and contribute no example",
                split.zero_aspect_sentences,
                train.len()
            );
        }
        let mut examples = split.examples;
        if examples.is_empty() {
            return Err(Error::Dataset("no training examples after split".into()));
        }

        let metrics_path = run_dir.join("metrics.jsonl");
        let mut metrics_file =
            std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;

        let initial = run_dir.join("epoch_0.ckpt");
        self.checkpoint(0).save(&initial)?;
        let mut best: Option<(usize, f64, PathBuf)> = None;
        let mut history = Vec::new();
        let mut epochs_run = 0;
        let mut stale = 0usize;

        for epoch in 0..self.cfg.trainer.epochs {
            use rand::seq::SliceRandom;
            let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                self.cfg.trainer.seed,
                "shuffle",
                &[epoch as u64],
            ));
            examples.shuffle(&mut order_rng);

            let mut sums = (0.0, 0.0, 0.0, 0.0);
            let mut clipped_steps = 0;
            let batches: Vec<&[TrainingExample]> =
                examples.chunks(self.cfg.trainer.batch_size).collect();
            for (step, batch) in batches.iter().enumerate() {
                let report = self.train_step(batch, epoch, step)?;
                sums.0 += report.ae;
                sums.1 += report.sp;
                sums.2 += report.cl;
                sums.3 += report.total;
                clipped_steps += usize::from(report.clipped);
            }
            epochs_run = epoch + 1;

            let val_report = evaluate_model(&self.model, val, &self.cfg)?;
            let n = examples.len() as f64;
            let row = EpochMetrics {
                epoch: epoch + 1,
                loss_ae: sums.0 / n,
                loss_sp: sums.1 / n,
                loss_cl: sums.2 / n,
                loss_total: sums.3 / n,
                clipped_steps,
                val: val_report.clone(),
            };
            let line =
                serde_json::to_string(&row).map_err(|e| Error::Checkpoint(e.to_string()))?;
            writeln!(metrics_file, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
            history.push(row);

            let ckpt_path = run_dir.join(format!("epoch_{}.ckpt", epoch + 1));
            self.checkpoint(epoch + 1).save(&ckpt_path)?;

            let improved = best
                .as_ref()
                .map_or(true, |(_, best_f1, _)| val_report.f1 > *best_f1);
            if improved {
                best = Some((epoch + 1, val_report.f1, ckpt_path));
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.cfg.trainer.patience {
                    break;
                }
            }
        }

        let (best_epoch, best_f1, best_checkpoint) = match best {
            Some((e, f1, path)) => (Some(e), f1, path),
            None => (None, 0.0, initial),
        };
        std::fs::copy(&best_checkpoint, run_dir.join("best.ckpt"))
            .map_err(|e| Error::io(run_dir, e))?;
        Ok(TrainOutcome {
            best_epoch,
            best_f1,
            best_checkpoint: run_dir.join("best.ckpt"),
            epochs_run,
            history,
        })
    }
}

/// The training objective evaluated (not optimized) over split examples in
/// inference mode with the deterministic convex mixture, so it can be
/// compared against the unsplit multi-aspect form.
pub fn split_objective(model: &TsaModel, examples: &[TrainingExample], cfg: &RunConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut transfer_cfg = cfg.transfer.clone();
    transfer_cfg.mix_mode = crate::transfer::MixMode::Convex;

    let mut ae_total = 0.0;
    let mut sp_total = 0.0;
    let mut embeddings = Vec::with_capacity(examples.len());
    for example in examples {
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &example.tokens, Mode::Inference, &mut rng)?;
        let mut clamps = 0;
        let ae = boundary_loss_node(&mut g, &fwd.boundaries, example.start, example.end, &mut clamps);
        ae_total += g.value(ae).item();
        let item = SentimentItem {
            h_word: fwd.h_word,
            boundaries: fwd.boundaries,
            gold_span: (example.start, example.end),
            gold_polarity: example.polarity,
        };
        let sp = mixed_sentiment_loss(
            &mut g,
            &model.store,
            &model.classifier,
            &[item],
            &transfer_cfg,
            &[0.0],
        )?;
        sp_total += g.value(sp.node).item();
        let s = g.gather_rows(fwd.h_word, &[example.start]);
        let e = g.gather_rows(fwd.h_word, &[example.end]);
        embeddings.push((
            example.origin.source_id.clone(),
            (example.start, example.end),
            g.value(s).clone(),
            g.value(e).clone(),
        ));
    }
    let cl = contrastive_value(&embeddings, cfg)?;
    Ok(ae_total + sp_total + cfg.trainer.lambda * cl)
}

/// The multi-aspect objective: each sentence encoded once, per-aspect terms
/// summed within it, same loss definitions and same batch-wide negative
/// pools as the split form.
pub fn multi_aspect_objective(
    model: &TsaModel,
    sentences: &[AnnotatedSentence],
    cfg: &RunConfig,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut transfer_cfg = cfg.transfer.clone();
    transfer_cfg.mix_mode = crate::transfer::MixMode::Convex;

    let mut ae_total = 0.0;
    let mut sp_total = 0.0;
    let mut embeddings = Vec::new();
    for sentence in sentences {
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &sentence.tokens, Mode::Inference, &mut rng)?;
        for aspect in &sentence.aspects {
            let mut clamps = 0;
            let ae =
                boundary_loss_node(&mut g, &fwd.boundaries, aspect.start, aspect.end, &mut clamps);
            ae_total += g.value(ae).item();
            let item = SentimentItem {
                h_word: fwd.h_word,
                boundaries: fwd.boundaries,
                gold_span: (aspect.start, aspect.end),
                gold_polarity: aspect.polarity,
            };
            let sp = mixed_sentiment_loss(
                &mut g,
                &model.store,
                &model.classifier,
                &[item],
                &transfer_cfg,
                &[0.0],
            )?;
            sp_total += g.value(sp.node).item();
            let s = g.gather_rows(fwd.h_word, &[aspect.start]);
            let e = g.gather_rows(fwd.h_word, &[aspect.end]);
            embeddings.push((
                sentence.source_id.clone(),
                (aspect.start, aspect.end),
                g.value(s).clone(),
                g.value(e).clone(),
            ));
        }
    }
    let cl = contrastive_value(&embeddings, cfg)?;
    Ok(ae_total + sp_total + cfg.trainer.lambda * cl)
}

fn contrastive_value(
    embeddings: &[(String, (usize, usize), Tensor, Tensor)],
    cfg: &RunConfig,
) -> Result<f64> {
    if !cfg.contrast.enabled || cfg.trainer.lambda == 0.0 || embeddings.len() < 2 {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let items: Vec<AspectEmbedding> = embeddings
        .iter()
        .map(|(source_id, span, s, e)| AspectEmbedding {
            source_id: source_id.clone(),
            span: *span,
            start: g.leaf(s.clone()),
            end: g.leaf(e.clone()),
        })
        .collect();
    let pair_batch = build_pairs(&items);
    let loss = contrastive_loss(&mut g, &pair_batch, cfg.contrast.tau, cfg.contrast.denominator)?;
    Ok(g.value(loss).item())
}

/// Gradient of L_sp alone with respect to the given parameters, summed over
/// a batch. Exercises the transfer channel: nonzero boundary-head gradients
/// require ξ < 1.
pub fn sentiment_gradient_wrt(
    model: &TsaModel,
    examples: &[TrainingExample],
    cfg: &RunConfig,
    params: &[ParamId],
    draws: &[f64],
) -> Result<Vec<f64>> {
    let mut norms = vec![0.0; params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (example, &draw) in examples.iter().zip(draws) {
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &example.tokens, Mode::Inference, &mut rng)?;
        let item = SentimentItem {
            h_word: fwd.h_word,
            boundaries: fwd.boundaries,
            gold_span: (example.start, example.end),
            gold_polarity: example.polarity,
        };
        let sp = mixed_sentiment_loss(
            &mut g,
            &model.store,
            &model.classifier,
            &[item],
            &cfg.transfer,
            &[draw],
        )?;
        let grads = g.backward(sp.node);
        for (pid, grad) in g.param_gradients(&grads) {
            if let Some(slot) = params.iter().position(|&p| p == pid) {
                norms[slot] += grad.norm();
            }
        }
    }
    Ok(norms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AspectAnnotation, Polarity};

    fn sentence(
        tokens: &[&str],
        aspects: &[(usize, usize, Polarity)],
        id: &str,
    ) -> AnnotatedSentence {
        AnnotatedSentence {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            aspects: aspects
                .iter()
                .map(|&(start, end, polarity)| AspectAnnotation {
                    start,
                    end,
                    polarity,
                })
                .collect(),
            source_id: id.to_string(),
        }
    }

    fn tiny_corpus() -> Vec<AnnotatedSentence> {
        vec![
            sentence(
                &["the", "screen", "is", "good", "but", "ram", "bad"],
                &[(1, 1, Polarity::Positive), (5, 5, Polarity::Negative)],
                "s1",
            ),
            sentence(
                &["fine", "camera", "overall"],
                &[(1, 1, Polarity::Positive)],
                "s2",
            ),
            sentence(
                &["battery", "died", "fast"],
                &[(0, 0, Polarity::Negative)],
                "s3",
            ),
        ]
    }

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.encoder.dim = 8;
        cfg.encoder.heads = 2;
        cfg.encoder.dropout = 0.1;
        cfg.trainer.batch_size = 4;
        cfg.trainer.epochs = 2;
        cfg.trainer.seed = 11;
        cfg
    }

    #[test]
    fn loss_decomposition_holds() {
        let corpus = tiny_corpus();
        let cfg = tiny_config();
        let mut trainer = Trainer::new(cfg, &corpus).unwrap();
        let examples = split_sentences(&corpus).examples;
        let report = trainer.train_step(&examples, 0, 0).unwrap();
        assert!(
            (report.total - (report.ae + report.sp + report.lambda * report.cl)).abs() < 1e-9
        );
        assert!(report.ae >= 0.0 && report.sp >= 0.0 && report.cl >= 0.0);
        assert_eq!(report.paths.len(), examples.len());
    }

    #[test]
    fn lambda_zero_drops_contrastive_term() {
        let corpus = tiny_corpus();
        let mut cfg = tiny_config();
        cfg.trainer.lambda = 0.0;
        let mut trainer = Trainer::new(cfg, &corpus).unwrap();
        let examples = split_sentences(&corpus).examples;
        let report = trainer.train_step(&examples, 0, 0).unwrap();
        assert_eq!(report.cl, 0.0);
        assert_eq!(report.total, report.ae + report.sp);
    }

    #[test]
    fn identical_step_from_cloned_state_is_bitwise_identical() {
        let corpus = tiny_corpus();
        let cfg = tiny_config();
        let trainer = Trainer::new(cfg, &corpus).unwrap();
        let examples = split_sentences(&corpus).examples;

        let mut a = Trainer {
            model: trainer.model.clone(),
            adam: trainer.adam.clone(),
            cfg: trainer.cfg.clone(),
        };
        let mut b = Trainer {
            model: trainer.model.clone(),
            adam: trainer.adam.clone(),
            cfg: trainer.cfg.clone(),
        };
        let ra = a.train_step(&examples, 0, 0).unwrap();
        let rb = b.train_step(&examples, 0, 0).unwrap();
        assert_eq!(ra.total.to_bits(), rb.total.to_bits());
        assert_eq!(ra.ae.to_bits(), rb.ae.to_bits());
        assert_eq!(ra.cl.to_bits(), rb.cl.to_bits());
        assert_eq!(ra.paths, rb.paths);
        // parameters after the step also agree bitwise
        for id in a.model.store.ids() {
            let va = a.model.store.value(id);
            let vb = b.model.store.value(id);
            assert!(va
                .data()
                .iter()
                .zip(vb.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn loss_decreases_over_steps() {
        let corpus = tiny_corpus();
        let mut cfg = tiny_config();
        cfg.trainer.seed = 5;
        let mut trainer = Trainer::new(cfg, &corpus).unwrap();
        let examples = split_sentences(&corpus).examples;
        let first = trainer.train_step(&examples, 0, 0).unwrap();
        let mut last = first.total;
        for step in 1..60 {
            last = trainer.train_step(&examples, 0, step).unwrap().total;
        }
        assert!(
            last < first.total,
            "loss did not decrease: {first:?} -> {last}"
        );
    }

    #[test]
    fn train_writes_run_artifacts_and_epochs_zero_is_vacuous() {
        let corpus = tiny_corpus();
        let mut cfg = tiny_config();
        cfg.trainer.epochs = 0;
        let dir = tempfile::tempdir().unwrap();
        let mut trainer = Trainer::new(cfg, &corpus).unwrap();
        let before = trainer.model.store.value(trainer.model.store.id("clf.w1").unwrap()).clone();
        let outcome = trainer
            .train(&corpus[..2], &corpus[2..], dir.path())
            .unwrap();
        assert_eq!(outcome.epochs_run, 0);
        assert!(outcome.best_epoch.is_none());
        let after = trainer.model.store.value(trainer.model.store.id("clf.w1").unwrap());
        assert_eq!(&before, after);
        assert!(dir.path().join("config.snapshot").exists());
        assert!(dir.path().join("epoch_0.ckpt").exists());
        assert!(dir.path().join("best.ckpt").exists());
        assert!(dir.path().join("metrics.jsonl").exists());
    }

    #[test]
    fn same_seed_reproduces_metrics_bytes() {
        let corpus = tiny_corpus();
        let cfg = tiny_config();
        let run = |dir: &Path| {
            let mut trainer = Trainer::new(cfg.clone(), &corpus).unwrap();
            trainer.train(&corpus[..2], &corpus[2..], dir).unwrap();
            std::fs::read(dir.join("metrics.jsonl")).unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        assert_eq!(run(d1.path()), run(d2.path()));
    }

    #[test]
    fn checkpoint_reload_gives_bitwise_identical_forward() {
        let corpus = tiny_corpus();
        let cfg = tiny_config();
        let mut trainer = Trainer::new(cfg, &corpus).unwrap();
        let examples = split_sentences(&corpus).examples;
        for step in 0..3 {
            trainer.train_step(&examples, 0, step).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        trainer.checkpoint(1).save(&path).unwrap();
        let restored = Checkpoint::load(&path).unwrap();
        let tokens: Vec<String> = ["the", "screen"].iter().map(|s| s.to_string()).collect();
        let a = trainer.model.boundary_distributions(&tokens).unwrap();
        let b = restored.model.boundary_distributions(&tokens).unwrap();
        for (x, y) in a.start_probs.iter().zip(&b.start_probs) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn split_and_multi_aspect_objectives_agree() {
        let corpus = vec![
            sentence(
                &["the", "screen", "is", "good", "but", "ram", "bad"],
                &[(1, 1, Polarity::Positive), (5, 5, Polarity::Negative)],
                "s1",
            ),
            sentence(
                &["fine", "camera", "overall"],
                &[(1, 1, Polarity::Positive)],
                "s2",
            ),
        ];
        let mut cfg = tiny_config();
        cfg.encoder.dropout = 0.0;
        let trainer = Trainer::new(cfg.clone(), &corpus).unwrap();
        let examples = split_sentences(&corpus).examples;
        assert_eq!(examples.len(), 3);
        let split_value = split_objective(&trainer.model, &examples, &cfg).unwrap();
        let multi_value = multi_aspect_objective(&trainer.model, &corpus, &cfg).unwrap();
        let rel = (split_value - multi_value).abs() / multi_value.abs().max(1e-12);
        assert!(rel < 1e-6, "split {split_value} vs multi {multi_value}");
    }

    #[test]
    fn sentiment_gradient_reaches_boundary_heads_only_with_transfer() {
        let corpus = tiny_corpus();
        let mut cfg = tiny_config();
        cfg.encoder.dropout = 0.0;
        let trainer = Trainer::new(cfg.clone(), &corpus).unwrap();
        let examples = split_sentences(&corpus).examples;
        let head_params = trainer.model.boundary.param_ids();

        // ξ = 1: every example on the real path; boundary heads receive
        // exactly zero gradient from L_sp
        let mut real_cfg = cfg.clone();
        real_cfg.transfer.xi = 1.0;
        let draws = vec![0.5; examples.len()];
        let norms =
            sentiment_gradient_wrt(&trainer.model, &examples, &real_cfg, &head_params, &draws)
                .unwrap();
        assert!(norms.iter().all(|&n| n == 0.0), "{norms:?}");

        // ξ < 1 with expected-path draws: gradient flows into the heads
        let mut mixed_cfg = cfg.clone();
        mixed_cfg.transfer.xi = 0.3;
        let draws = vec![0.9; examples.len()];
        let norms =
            sentiment_gradient_wrt(&trainer.model, &examples, &mixed_cfg, &head_params, &draws)
                .unwrap();
        assert!(norms.iter().any(|&n| n > 0.0), "{norms:?}");
    }
}
