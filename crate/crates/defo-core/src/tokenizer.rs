//! Word-level tokenizer over an explicit vocabulary.
//!
//! The vocabulary is a plain text asset, one word per line, line number =
//! embedding-table row. Rows 0 and 1 are reserved for the pad and unknown
//! markers. Unknown words are absorbed into the unknown row, never errors.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PAD_ROW: usize = 0;
pub const UNK_ROW: usize = 1;
pub const PAD_MARKER: &str = "<pad>";
pub const UNK_MARKER: &str = "<unk>";

/// Word list plus reverse index; row i of the embedding table holds the
/// embedding of `words[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Parses the one-word-per-line format; checks the reserved rows and
    /// uniqueness.
    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<String> = text
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        if words.len() < 2 || words[PAD_ROW] != PAD_MARKER || words[UNK_ROW] != UNK_MARKER {
            return Err(Error::Data(format!(
                "vocabulary must start with '{PAD_MARKER}' and '{UNK_MARKER}' rows"
            )));
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary word '{w}'")));
            }
        }
        Ok(Vocabulary { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, row: usize) -> &str {
        &self.words[row]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn row_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Rows holding real words (reserved rows excluded).
    pub fn word_rows_range(&self) -> std::ops::Range<usize> {
        2..self.words.len()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }
}

/// Lowercases and splits on any non-alphanumeric character.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_string())
        .collect()
}

/// Maps text to vocabulary rows; unknown words use the reserved unknown
/// row. Errors when no token survives splitting.
pub fn word_rows(vocab: &Vocabulary, text: &str) -> Result<Vec<usize>> {
    if text.is_empty() {
        return Err(Error::InvalidInput("cannot tokenize empty text".into()));
    }
    let words = split_words(text);
    if words.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no tokens survive splitting {text:?}"
        )));
    }
    Ok(words
        .iter()
        .map(|w| vocab.row_of(w).unwrap_or(UNK_ROW))
        .collect())
}

/// Where the embedding at a sequence position came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    /// Copied from the vocabulary row (word or unknown marker).
    Word(usize),
    /// A trainable slot supplied by a query bank.
    Trainable,
    /// Padding.
    Pad,
}

/// A fixed-length token sequence: `[m, d_e]` embeddings plus per-position
/// provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    pub embeddings: Tensor<T>,
    pub provenance: Vec<SlotKind>,
}

/// Pads or truncates `rows` to exactly `m` positions.
pub fn pad_rows(rows: &[usize], m: usize) -> Vec<usize> {
    let mut out: Vec<usize> = rows.iter().take(m).copied().collect();
    while out.len() < m {
        out.push(PAD_ROW);
    }
    out
}

/// Builds a [`TokenSequence`] by copying vocabulary-table rows.
pub fn sequence_from_rows<T: Scalar>(
    vocab_table: &Tensor<T>,
    rows: &[usize],
    m: usize,
) -> Result<TokenSequence<T>> {
    let d_e = vocab_table.shape()[1];
    let padded = pad_rows(rows, m);
    let mut values = Vec::with_capacity(m * d_e);
    let mut provenance = Vec::with_capacity(m);
    for &row in &padded {
        if row >= vocab_table.shape()[0] {
            return Err(Error::Data(format!(
                "vocabulary row {row} out of range for table with {} rows",
                vocab_table.shape()[0]
            )));
        }
        values.extend_from_slice(&vocab_table.values()[row * d_e..(row + 1) * d_e]);
        provenance.push(if row == PAD_ROW {
            SlotKind::Pad
        } else {
            SlotKind::Word(row)
        });
    }
    Ok(TokenSequence {
        embeddings: Tensor::new(vec![m, d_e], values)?,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::parse("<pad>\n<unk>\na\nphoto\nof\ncat\ndog\n").unwrap()
    }

    #[test]
    fn known_words_map_to_rows() {
        let v = vocab();
        let rows = word_rows(&v, "a photo of a cat").unwrap();
        assert_eq!(rows, vec![2, 3, 4, 2, 5]);
    }

    #[test]
    fn sequence_pads_to_length() {
        let v = vocab();
        let table = Tensor::<f64>::new(
            vec![7, 2],
            (0..14).map(|i| i as f64).collect(),
        )
        .unwrap();
        let rows = word_rows(&v, "a photo of a cat").unwrap();
        let seq = sequence_from_rows(&table, &rows, 8).unwrap();
        assert_eq!(seq.embeddings.shape(), &[8, 2]);
        let n_words = seq
            .provenance
            .iter()
            .filter(|p| matches!(p, SlotKind::Word(_)))
            .count();
        let n_pads = seq
            .provenance
            .iter()
            .filter(|p| matches!(p, SlotKind::Pad))
            .count();
        assert_eq!(n_words, 5);
        assert_eq!(n_pads, 3);
        // Pad positions carry the pad row embedding.
        assert_eq!(seq.embeddings.at(&[5, 0]), 0.0);
        assert_eq!(seq.embeddings.at(&[5, 1]), 1.0);
    }

    #[test]
    fn empty_text_is_rejected() {
        let v = vocab();
        assert!(word_rows(&v, "").is_err());
        assert!(word_rows(&v, "!!!").is_err());
    }

    #[test]
    fn unknown_words_fall_back_to_unk_row() {
        let v = vocab();
        let rows = word_rows(&v, "a zebra").unwrap();
        assert_eq!(rows, vec![2, UNK_ROW]);
        let table = Tensor::<f64>::zeros(vec![7, 2]);
        let seq = sequence_from_rows(&table, &rows, 4).unwrap();
        assert_eq!(seq.provenance[1], SlotKind::Word(UNK_ROW));
    }

    #[test]
    fn vocabulary_requires_reserved_rows_and_uniqueness() {
        assert!(Vocabulary::parse("a\nb\n").is_err());
        assert!(Vocabulary::parse("<pad>\n<unk>\na\na\n").is_err());
        assert!(Vocabulary::parse("<pad>\n<unk>\n").is_ok());
    }

    #[test]
    fn splitting_lowercases_and_strips_punctuation() {
        assert_eq!(split_words("A Photo, of: a CAT!"), vec![
            "a", "photo", "of", "a", "cat"
        ]);
    }
}
