//! Dataset ingestion, validation, and the training-time splitting strategy.
//!
//! The native wire format is UTF-8 JSON lines, one sentence per line:
//!
//! ```json
//! {"tokens": ["good", "camera"],
//!  "aspects": [{"start": 1, "end": 1, "polarity": "positive"}],
//!  "id": "rest-14-001"}
//! ```
//!
//! `end` is inclusive. Sentences with several aspects are replicated into one
//! single-aspect [`TrainingExample`] each before training; evaluation always
//! runs on the unsplit sentences.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub mod semeval;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

impl Polarity {
    pub const COUNT: usize = 3;
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];

    pub fn index(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
            Polarity::Neutral => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Polarity> {
        Polarity::ALL.get(i).copied()
    }

    pub fn parse(s: &str) -> Option<Polarity> {
        match s {
            "positive" => Some(Polarity::Positive),
            "negative" => Some(Polarity::Negative),
            "neutral" => Some(Polarity::Neutral),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
        }
    }

    /// Flips positive/negative, keeps neutral.
    pub fn flipped(self) -> Polarity {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
            Polarity::Neutral => Polarity::Neutral,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectAnnotation {
    pub start: usize,
    /// Inclusive end token index.
    pub end: usize,
    pub polarity: Polarity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub tokens: Vec<String>,
    #[serde(default)]
    pub aspects: Vec<AspectAnnotation>,
    #[serde(rename = "id", default)]
    pub source_id: String,
}

impl AnnotatedSentence {
    /// Checks span bounds and pairwise non-overlap.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.tokens.is_empty() {
            return Err("empty token list".to_string());
        }
        let n = self.tokens.len();
        for a in &self.aspects {
            if a.start > a.end {
                return Err(format!("aspect end {} before start {}", a.end, a.start));
            }
            if a.end >= n {
                return Err(format!(
                    "aspect span ({}, {}) out of range for length {n}",
                    a.start, a.end
                ));
            }
        }
        let mut sorted: Vec<&AspectAnnotation> = self.aspects.iter().collect();
        sorted.sort_by_key(|a| (a.start, a.end));
        for pair in sorted.windows(2) {
            if pair[1].start <= pair[0].end {
                return Err(format!(
                    "overlapping aspects ({}, {}) and ({}, {})",
                    pair[0].start, pair[0].end, pair[1].start, pair[1].end
                ));
            }
        }
        Ok(())
    }

    pub fn gold_spans(&self) -> Vec<(usize, usize)> {
        self.aspects.iter().map(|a| (a.start, a.end)).collect()
    }

    pub fn gold_items(&self) -> Vec<((usize, usize), Polarity)> {
        self.aspects
            .iter()
            .map(|a| ((a.start, a.end), a.polarity))
            .collect()
    }
}

/// Where a split example came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleOrigin {
    pub source_id: String,
    pub aspect_index: usize,
}

/// One (sentence, single aspect) supervision unit produced by splitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub tokens: Vec<String>,
    pub start: usize,
    pub end: usize,
    pub polarity: Polarity,
    pub origin: ExampleOrigin,
}

impl TrainingExample {
    pub fn start_target(&self) -> Vec<f64> {
        one_hot(self.start, self.tokens.len())
    }

    pub fn end_target(&self) -> Vec<f64> {
        one_hot(self.end, self.tokens.len())
    }
}

fn one_hot(index: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[index] = 1.0;
    v
}

/// One-hot boundary targets for an aspect at (start, end) in an n-token
/// sentence.
pub fn build_targets(start: usize, end: usize, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if start > end || end >= n {
        return Err(Error::SpanOutOfRange { start, end, len: n });
    }
    Ok((one_hot(start, n), one_hot(end, n)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    Jsonl,
    SemevalXml,
}

impl DatasetFormat {
    pub fn parse(s: &str) -> Option<DatasetFormat> {
        match s {
            "jsonl" => Some(DatasetFormat::Jsonl),
            "semeval-xml" => Some(DatasetFormat::SemevalXml),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecordError {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct LoadOutcome {
    pub sentences: Vec<AnnotatedSentence>,
    pub rejected: Vec<RecordError>,
}

impl LoadOutcome {
    pub fn aspect_count(&self) -> usize {
        self.sentences.iter().map(|s| s.aspects.len()).sum()
    }
}

/// Strict load: any malformed record fails the whole call, citing line
/// numbers.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<AnnotatedSentence>> {
    let outcome = load_records(path, format, true)?;
    Ok(outcome.sentences)
}

/// Loads a dataset, either failing on the first batch of malformed records
/// (`strict`) or collecting them in [`LoadOutcome::rejected`].
pub fn load_records(path: &Path, format: DatasetFormat, strict: bool) -> Result<LoadOutcome> {
    let mut outcome = match format {
        DatasetFormat::Jsonl => load_jsonl(path)?,
        DatasetFormat::SemevalXml => semeval::load(path)?,
    };
    if strict && !outcome.rejected.is_empty() {
        let first = &outcome.rejected[0];
        return Err(Error::Records {
            count: outcome.rejected.len(),
            first_line: first.line,
            first_reason: first.reason.clone(),
        });
    }
    // Deterministic order: file order, already guaranteed by both readers.
    outcome.sentences.shrink_to_fit();
    Ok(outcome)
}

fn load_jsonl(path: &Path) -> Result<LoadOutcome> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut outcome = LoadOutcome::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<AnnotatedSentence>(&line) {
            Ok(sentence) => match sentence.validate() {
                Ok(()) => outcome.sentences.push(sentence),
                Err(reason) => outcome.rejected.push(RecordError {
                    line: line_no,
                    reason,
                }),
            },
            Err(e) => outcome.rejected.push(RecordError {
                line: line_no,
                reason: e.to_string(),
            }),
        }
    }
    Ok(outcome)
}

pub fn write_jsonl(path: &Path, sentences: &[AnnotatedSentence]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in sentences {
        let line = serde_json::to_string(s).map_err(|e| Error::Dataset(e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct SplitOutcome {
    pub examples: Vec<TrainingExample>,
    /// Sentences that contributed no example (zero aspects); counted, not an
    /// error.
    pub zero_aspect_sentences: usize,
}

/// Replicates each sentence into one example per aspect. Token sequences are
/// unmodified copies; output length equals the corpus aspect count.
pub fn split_sentences(sentences: &[AnnotatedSentence]) -> SplitOutcome {
    let mut outcome = SplitOutcome::default();
    for sentence in sentences {
        if sentence.aspects.is_empty() {
            outcome.zero_aspect_sentences += 1;
            continue;
        }
        for (aspect_index, aspect) in sentence.aspects.iter().enumerate() {
            outcome.examples.push(TrainingExample {
                tokens: sentence.tokens.clone(),
                start: aspect.start,
                end: aspect.end,
                polarity: aspect.polarity,
                origin: ExampleOrigin {
                    source_id: sentence.source_id.clone(),
                    aspect_index,
                },
            });
        }
    }
    outcome
}

/// Seeded fold assignment: a shuffled permutation dealt round-robin into
/// `folds` disjoint groups covering every index.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct FoldAssignment {
    pub seed: u64,
    pub folds: Vec<Vec<usize>>,
}

pub fn fold_assignments(n: usize, folds: usize, seed: u64) -> Result<FoldAssignment> {
    if folds == 0 || n < folds {
        return Err(Error::Eval(format!(
            "cannot split {n} sentences into {folds} folds"
        )));
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::params::derive_seed(
        seed,
        "folds",
        &[n as u64, folds as u64],
    ));
    order.shuffle(&mut rng);
    let mut assignment = vec![Vec::new(); folds];
    for (i, idx) in order.into_iter().enumerate() {
        assignment[i % folds].push(idx);
    }
    for fold in &mut assignment {
        fold.sort_unstable();
    }
    Ok(FoldAssignment {
        seed,
        folds: assignment,
    })
}

pub fn save_folds(path: &Path, assignment: &FoldAssignment) -> Result<()> {
    let json = serde_json::to_string_pretty(assignment)
        .map_err(|e| Error::Dataset(e.to_string()))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_folds(path: &Path) -> Result<FoldAssignment> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentence(tokens: &[&str], aspects: &[(usize, usize, Polarity)], id: &str) -> AnnotatedSentence {
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

    #[test]
    fn jsonl_round_trip() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            file,
            r#"{{"tokens":["good","camera"],"aspects":[{{"start":1,"end":1,"polarity":"positive"}}],"id":"a"}}"#
        )
        .unwrap();
        let sentences = load_dataset(file.path(), DatasetFormat::Jsonl).unwrap();
        assert_eq!(sentences.len(), 1);
        assert_eq!(sentences[0].tokens, ["good", "camera"]);
        assert_eq!(sentences[0].aspects.len(), 1);
        assert_eq!(sentences[0].aspects[0].polarity, Polarity::Positive);
    }

    #[test]
    fn reversed_span_rejected_with_line() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            file,
            r#"{{"tokens":["a","b"],"aspects":[{{"start":1,"end":0,"polarity":"neutral"}}],"id":"x"}}"#
        )
        .unwrap();
        let err = load_dataset(file.path(), DatasetFormat::Jsonl).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn unknown_polarity_rejected() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            file,
            r#"{{"tokens":["a"],"aspects":[{{"start":0,"end":0,"polarity":"conflict"}}],"id":"x"}}"#
        )
        .unwrap();
        assert!(load_dataset(file.path(), DatasetFormat::Jsonl).is_err());
    }

    #[test]
    fn overlapping_spans_rejected() {
        let s = sentence(
            &["a", "b", "c"],
            &[(0, 1, Polarity::Positive), (1, 2, Polarity::Negative)],
            "x",
        );
        assert!(s.validate().is_err());
    }

    #[test]
    fn lenient_mode_collects_rejects() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, r#"{{"tokens":["ok"],"aspects":[],"id":"good"}}"#).unwrap();
        writeln!(file, "not json").unwrap();
        let outcome = load_records(file.path(), DatasetFormat::Jsonl, false).unwrap();
        assert_eq!(outcome.sentences.len(), 1);
        assert_eq!(outcome.rejected.len(), 1);
        assert_eq!(outcome.rejected[0].line, 2);
    }

    #[test]
    fn split_two_aspects_yields_two_examples() {
        let s = sentence(
            &["the", "lens", "and", "zoom", "rock"],
            &[(1, 1, Polarity::Positive), (3, 3, Polarity::Negative)],
            "s1",
        );
        let outcome = split_sentences(&[s.clone()]);
        assert_eq!(outcome.examples.len(), 2);
        assert_eq!(outcome.examples[0].tokens, s.tokens);
        assert_eq!(outcome.examples[1].tokens, s.tokens);
        assert_eq!(outcome.examples[0].start_target(), [0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(outcome.examples[1].start_target(), [0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(outcome.examples[0].polarity, Polarity::Positive);
        assert_eq!(outcome.examples[1].polarity, Polarity::Negative);
    }

    #[test]
    fn split_counts_match_aspect_totals() {
        let corpus = vec![
            sentence(
                &["a", "b"],
                &[(0, 0, Polarity::Positive), (1, 1, Polarity::Negative)],
                "s1",
            ),
            sentence(&["c", "d"], &[], "s2"),
            sentence(
                &["e", "f", "g"],
                &[
                    (0, 0, Polarity::Neutral),
                    (1, 1, Polarity::Neutral),
                    (2, 2, Polarity::Neutral),
                ],
                "s3",
            ),
        ];
        let outcome = split_sentences(&corpus);
        assert_eq!(outcome.examples.len(), 5);
        assert_eq!(outcome.zero_aspect_sentences, 1);
        let total: usize = corpus.iter().map(|s| s.aspects.len()).sum();
        assert_eq!(outcome.examples.len(), total);
    }

    #[test]
    fn build_targets_examples() {
        assert_eq!(
            build_targets(1, 2, 4).unwrap(),
            (vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0])
        );
        assert_eq!(
            build_targets(3, 3, 4).unwrap(),
            (vec![0.0, 0.0, 0.0, 1.0], vec![0.0, 0.0, 0.0, 1.0])
        );
        assert_eq!(
            build_targets(0, 1, 2).unwrap(),
            (vec![1.0, 0.0], vec![0.0, 1.0])
        );
        assert!(build_targets(1, 4, 4).is_err());
    }

    #[test]
    fn folds_partition_everything() {
        let assignment = fold_assignments(100, 10, 7).unwrap();
        assert_eq!(assignment.folds.len(), 10);
        let mut all: Vec<usize> = assignment.folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        for fold in &assignment.folds {
            assert_eq!(fold.len(), 10);
        }
        let again = fold_assignments(100, 10, 7).unwrap();
        assert_eq!(assignment, again);
        let different = fold_assignments(100, 10, 8).unwrap();
        assert_ne!(assignment, different);
    }

    #[test]
    fn fold_files_round_trip() {
        let assignment = fold_assignments(20, 4, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("folds.json");
        save_folds(&path, &assignment).unwrap();
        assert_eq!(load_folds(&path).unwrap(), assignment);
    }

    proptest::proptest! {
        /// Splitting preserves supervision mass for arbitrary corpora.
        #[test]
        fn split_mass_is_preserved(counts in proptest::collection::vec(0usize..5, 1..20)) {
            let corpus: Vec<AnnotatedSentence> = counts
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    // c single-token aspects at even positions
                    let tokens: Vec<String> = (0..(2 * c).max(1)).map(|t| format!("t{t}")).collect();
                    let aspects = (0..c)
                        .map(|a| AspectAnnotation {
                            start: 2 * a,
                            end: 2 * a,
                            polarity: Polarity::Neutral,
                        })
                        .collect();
                    AnnotatedSentence { tokens, aspects, source_id: format!("s{i}") }
                })
                .collect();
            let outcome = split_sentences(&corpus);
            let mass: usize = counts.iter().sum();
            proptest::prop_assert_eq!(outcome.examples.len(), mass);
            let zero = counts.iter().filter(|&&c| c == 0).count();
            proptest::prop_assert_eq!(outcome.zero_aspect_sentences, zero);
        }
    }
}
