//! Word-to-sub-word mapping for the trainable encoder.
//!
//! Known words map to a single vocabulary id. Out-of-vocabulary words are
//! broken into fixed-size character pieces, each hashed into a reserved
//! piece-id range, so every surface word still maps to at least one row of
//! the embedding matrix. Boundary targets always index the first sub-word of
//! a word; [`TokenMap`] records the full word-to-row alignment so spans can
//! be mapped back to whole words.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::ops::Range;

const PIECE_CHARS: usize = 4;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
    piece_slots: u32,
}

impl Vocab {
    /// Builds a vocabulary from token frequencies: most frequent first, ties
    /// broken lexicographically, capped at `max_words`.
    pub fn build<'a>(
        tokens: impl IntoIterator<Item = &'a str>,
        max_words: usize,
        piece_slots: u32,
    ) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_words);
        let words: Vec<String> = ranked.into_iter().map(|(w, _)| w.to_string()).collect();
        let mut vocab = Vocab {
            words,
            index: HashMap::new(),
            piece_slots,
        };
        vocab.rebuild_index();
        vocab
    }

    /// Restores the lookup index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    /// Size of the embedding id space: words plus reserved piece slots.
    pub fn id_space(&self) -> usize {
        self.words.len() + self.piece_slots as usize
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    fn piece_id(&self, piece: &str) -> u32 {
        self.words.len() as u32 + fnv1a(piece.as_bytes()) % self.piece_slots
    }

    /// Sub-word ids for one word: a single id when known, hashed character
    /// pieces otherwise.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        if let Some(&id) = self.index.get(word) {
            return vec![id];
        }
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() {
            return vec![self.piece_id("")];
        }
        chars
            .chunks(PIECE_CHARS)
            .map(|chunk| self.piece_id(&chunk.iter().collect::<String>()))
            .collect()
    }
}

fn fnv1a(bytes: &[u8]) -> u32 {
    let mut hash: u32 = 0x811c_9dc5;
    for &b in bytes {
        hash ^= u32::from(b);
        hash = hash.wrapping_mul(0x0100_0193);
    }
    hash
}

/// Alignment from source words to sub-word rows of an encoded sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMap {
    word_rows: Vec<Range<usize>>,
}

impl TokenMap {
    pub fn word_count(&self) -> usize {
        self.word_rows.len()
    }

    pub fn rows_for(&self, word: usize) -> Range<usize> {
        self.word_rows[word].clone()
    }

    /// Row of the first sub-word of each word, in word order.
    pub fn first_rows(&self) -> Vec<usize> {
        self.word_rows.iter().map(|r| r.start).collect()
    }

    pub fn subword_len(&self) -> usize {
        self.word_rows.last().map_or(0, |r| r.end)
    }
}

/// Encodes a token sequence into sub-word ids plus the word alignment.
pub fn subword_ids(vocab: &Vocab, tokens: &[String]) -> (Vec<u32>, TokenMap) {
    let mut ids = Vec::with_capacity(tokens.len());
    let mut word_rows = Vec::with_capacity(tokens.len());
    for token in tokens {
        let start = ids.len();
        ids.extend(vocab.encode_word(token));
        word_rows.push(start..ids.len());
    }
    (ids, TokenMap { word_rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(
            ["good", "camera", "good", "the"].into_iter(),
            10,
            16,
        )
    }

    #[test]
    fn known_words_get_single_ids() {
        let v = vocab();
        assert_eq!(v.encode_word("good").len(), 1);
        assert_eq!(v.encode_word("camera").len(), 1);
        // frequency rank: "good" twice -> id 0
        assert_eq!(v.encode_word("good"), vec![0]);
    }

    #[test]
    fn unknown_words_split_into_pieces() {
        let v = vocab();
        let ids = v.encode_word("unbelievable"); // 12 chars -> 3 pieces
        assert_eq!(ids.len(), 3);
        for &id in &ids {
            assert!(id >= v.word_count() as u32);
            assert!((id as usize) < v.id_space());
        }
        // deterministic
        assert_eq!(ids, v.encode_word("unbelievable"));
    }

    #[test]
    fn token_map_covers_every_word() {
        let v = vocab();
        let tokens: Vec<String> = ["the", "unbelievable", "camera"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (ids, map) = subword_ids(&v, &tokens);
        assert_eq!(map.word_count(), 3);
        assert_eq!(map.subword_len(), ids.len());
        assert_eq!(map.rows_for(0), 0..1);
        assert_eq!(map.rows_for(1), 1..4);
        assert_eq!(map.rows_for(2), 4..5);
        assert_eq!(map.first_rows(), vec![0, 1, 4]);
        for w in 0..3 {
            assert!(!map.rows_for(w).is_empty());
        }
    }

    #[test]
    fn index_survives_serde() {
        let v = vocab();
        let json = serde_json::to_string(&v).unwrap();
        let mut back: Vocab = serde_json::from_str(&json).unwrap();
        back.rebuild_index();
        assert_eq!(back.encode_word("camera"), v.encode_word("camera"));
    }
}
