//! Exact-match evaluation for the joint task plus the per-sub-task scores,
//! and seeded k-fold cross-validation.

use crate::config::{RunConfig, SpCondition};
use crate::corpus::{fold_assignments, save_folds, AnnotatedSentence, Polarity};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::TsaModel;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A span with its polarity, the unit of exact-match comparison.
pub type SpanPol = ((usize, usize), Polarity);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub num_gold: usize,
    pub num_pred: usize,
    pub num_correct: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ae_f1: f64,
    pub sp_accuracy: f64,
    pub counts: MatchCounts,
}

fn prf(counts: MatchCounts) -> (f64, f64, f64) {
    let precision = if counts.num_pred > 0 {
        counts.num_correct as f64 / counts.num_pred as f64
    } else {
        0.0
    };
    let recall = if counts.num_gold > 0 {
        counts.num_correct as f64 / counts.num_gold as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

/// Greedy exact matcher within one sentence: each prediction (in order)
/// claims at most one unclaimed identical gold item. Duplicate predictions
/// beyond the gold multiplicity count against precision only.
fn match_counts<T: PartialEq>(gold: &[T], pred: &[T]) -> usize {
    let mut claimed = vec![false; gold.len()];
    let mut correct = 0;
    for p in pred {
        if let Some(i) = gold
            .iter()
            .enumerate()
            .position(|(i, g)| !claimed[i] && g == p)
        {
            claimed[i] = true;
            correct += 1;
        }
    }
    correct
}

/// Exact-match scores for the joint task: a prediction is correct iff
/// (start, end, polarity) all match a gold item; each gold item matches at
/// most one prediction. `gold` and `pred` are per-sentence lists of equal
/// length. The report also carries the extraction-only F1 and the
/// sentiment accuracy over span-matched pairs.
pub fn tsa_scores(gold: &[Vec<SpanPol>], pred: &[Vec<SpanPol>]) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(Error::Eval(format!(
            "gold has {} sentences, predictions {}",
            gold.len(),
            pred.len()
        )));
    }
    let mut counts = MatchCounts::default();
    let mut sp_pairs: Vec<(Polarity, Polarity)> = Vec::new();
    let mut ae_gold = Vec::with_capacity(gold.len());
    let mut ae_pred = Vec::with_capacity(pred.len());
    for (g, p) in gold.iter().zip(pred) {
        counts.num_gold += g.len();
        counts.num_pred += p.len();
        counts.num_correct += match_counts(g, p);

        let g_spans: Vec<(usize, usize)> = g.iter().map(|(s, _)| *s).collect();
        let p_spans: Vec<(usize, usize)> = p.iter().map(|(s, _)| *s).collect();
        // sentiment pairs over span-exact matches
        let mut claimed = vec![false; g.len()];
        for (span, pol) in p {
            if let Some(i) = g
                .iter()
                .enumerate()
                .position(|(i, (gs, _))| !claimed[i] && gs == span)
            {
                claimed[i] = true;
                sp_pairs.push((g[i].1, *pol));
            }
        }
        ae_gold.push(g_spans);
        ae_pred.push(p_spans);
    }
    let (precision, recall, f1) = prf(counts);
    Ok(EvalReport {
        precision,
        recall,
        f1,
        ae_f1: ae_f1(&ae_gold, &ae_pred)?,
        sp_accuracy: sp_accuracy(&sp_pairs),
        counts,
    })
}

/// Extraction-only F1: exact span match, polarity ignored.
pub fn ae_f1(gold: &[Vec<(usize, usize)>], pred: &[Vec<(usize, usize)>]) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::Eval(format!(
            "gold has {} sentences, predictions {}",
            gold.len(),
            pred.len()
        )));
    }
    let mut counts = MatchCounts::default();
    for (g, p) in gold.iter().zip(pred) {
        counts.num_gold += g.len();
        counts.num_pred += p.len();
        counts.num_correct += match_counts(g, p);
    }
    Ok(prf(counts).2)
}

/// Fraction of matching polarities; an empty list scores 0 (the caller is
/// expected to surface the degenerate case).
pub fn sp_accuracy(pairs: &[(Polarity, Polarity)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().filter(|(g, p)| g == p).count() as f64 / pairs.len() as f64
}

/// Evaluates a model on unsplit sentences: decode, classify, score. With
/// `sp_condition = gold` the sentiment accuracy is recomputed over gold
/// spans instead of extracted ones.
pub fn evaluate_model(
    model: &TsaModel,
    sentences: &[AnnotatedSentence],
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let gold: Vec<Vec<SpanPol>> = sentences.iter().map(|s| s.gold_items()).collect();
    let predictions = model.predict_corpus(sentences, cfg)?;
    let pred: Vec<Vec<SpanPol>> = predictions
        .iter()
        .map(|sentence| sentence.iter().map(|p| p.item()).collect())
        .collect();
    let mut report = tsa_scores(&gold, &pred)?;
    if cfg.metrics.sp_condition == SpCondition::Gold {
        let pair_lists = exec::ordered_map(sentences, |s| -> Result<Vec<(Polarity, Polarity)>> {
            let predicted = model.classify_gold_spans(s)?;
            Ok(s.aspects
                .iter()
                .map(|a| a.polarity)
                .zip(predicted)
                .collect())
        });
        let mut pairs = Vec::new();
        for list in pair_lists {
            pairs.extend(list?);
        }
        report.sp_accuracy = sp_accuracy(&pairs);
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossValReport {
    pub per_fold: Vec<EvalReport>,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub mean_ae_f1: f64,
    pub mean_sp_accuracy: f64,
    /// Folds with zero gold aspects, excluded from the SP aggregate.
    pub zero_gold_folds: Vec<usize>,
}

/// Seeded k-fold cross-validation: persists the fold assignment, trains one
/// model per fold on the remaining sentences, and evaluates on the held-out
/// fold. The aggregate F1 is the mean of per-fold F1.
pub fn cross_validate(
    sentences: &[AnnotatedSentence],
    folds: usize,
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<CrossValReport> {
    let assignment = fold_assignments(sentences.len(), folds, cfg.trainer.seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    save_folds(&out_dir.join("folds.json"), &assignment)?;

    let mut per_fold = Vec::with_capacity(folds);
    let mut zero_gold_folds = Vec::new();
    for (k, fold) in assignment.folds.iter().enumerate() {
        let in_fold: std::collections::HashSet<usize> = fold.iter().copied().collect();
        let test: Vec<AnnotatedSentence> = fold.iter().map(|&i| sentences[i].clone()).collect();
        let train: Vec<AnnotatedSentence> = sentences
            .iter()
            .enumerate()
            .filter(|(i, _)| !in_fold.contains(i))
            .map(|(_, s)| s.clone())
            .collect();

        let mut fold_cfg = cfg.clone();
        fold_cfg.run_id = format!("{}-fold{k}", cfg.run_id);
        fold_cfg.output_dir = out_dir.to_path_buf();
        fold_cfg.trainer.seed = crate::params::derive_seed(cfg.trainer.seed, "fold", &[k as u64]);

        let mut trainer = crate::trainer::Trainer::new(fold_cfg.clone(), &train)?;
        let (val, train_only) = crate::trainer::split_train_val(
            &train,
            fold_cfg.trainer.val_fraction,
            fold_cfg.trainer.seed,
        );
        trainer.train(&train_only, &val, &fold_cfg.run_dir())?;
        let report = evaluate_model(&trainer.model, &test, &fold_cfg)?;
        if test.iter().all(|s| s.aspects.is_empty()) {
            zero_gold_folds.push(k);
        }
        per_fold.push(report);
    }

    let mean = |f: &dyn Fn(&EvalReport) -> f64, reports: &[&EvalReport]| -> f64 {
        if reports.is_empty() {
            0.0
        } else {
            reports.iter().map(|r| f(r)).sum::<f64>() / reports.len() as f64
        }
    };
    let all: Vec<&EvalReport> = per_fold.iter().collect();
    let sp_included: Vec<&EvalReport> = per_fold
        .iter()
        .enumerate()
        .filter(|(k, _)| !zero_gold_folds.contains(k))
        .map(|(_, r)| r)
        .collect();
    let mean_f1 = mean(&|r| r.f1, &all);
    let var = if per_fold.is_empty() {
        0.0
    } else {
        per_fold.iter().map(|r| (r.f1 - mean_f1).powi(2)).sum::<f64>() / per_fold.len() as f64
    };
    Ok(CrossValReport {
        mean_f1,
        std_f1: var.sqrt(),
        mean_ae_f1: mean(&|r| r.ae_f1, &all),
        mean_sp_accuracy: mean(&|r| r.sp_accuracy, &sp_included),
        per_fold,
        zero_gold_folds,
    })
}

/// Plain-text table of one or more named reports, one dataset per row.
pub fn text_table(rows: &[(String, &EvalReport)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "Dataset", "Prec.", "Rec.", "F1", "AE-F1", "SP-Acc"
    ));
    for (name, r) in rows {
        out.push_str(&format!(
            "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            name, r.precision, r.recall, r.f1, r.ae_f1, r.sp_accuracy
        ));
    }
    out
}
