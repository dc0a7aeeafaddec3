//! Fixed synthetic vocabulary and the word-level tokenizer used for both
//! expression encoding and dataset statistics.

use crate::encoders::{CLS_ID, PAD_ID, UNK_ID};

/// Every word the expression templates can emit, in id order starting at
/// [`FIRST_WORD_ID`]. Kept alphabetized within themes for stable ids.
pub const WORDS: &[&str] = &[
    // colors
    "red",
    "green",
    "blue",
    "yellow",
    "purple",
    "orange",
    // categories and shape adjectives
    "circle",
    "rectangle",
    "triangle",
    "round",
    "boxy",
    "pointed",
    // sizes
    "tiny",
    "small",
    "large",
    "huge",
    // absolute position words
    "top",
    "bottom",
    "left",
    "right",
    "center",
    "upper",
    "lower",
    "middle",
    "corner",
    "side",
    // relative position
    "above",
    "below",
    "beside",
    "near",
    "leftmost",
    "rightmost",
    // relative size
    "largest",
    "smallest",
    "bigger",
    "smaller",
    "than",
    // counts and context
    "one",
    "two",
    "three",
    "only",
    "among",
    "shapes",
    "shape",
    "object",
    "objects",
    "other",
    "others",
    "alone",
    // glue
    "the",
    "a",
    "of",
    "in",
    "at",
    "on",
    "and",
    "is",
    "it",
    "image",
    "area",
    "background",
];

pub const FIRST_WORD_ID: usize = UNK_ID + 1;

/// Smallest legal vocabulary: reserved ids plus every template word.
pub const MIN_VOCAB_SIZE: usize = FIRST_WORD_ID + WORDS.len();

/// Lowercase, strip ASCII punctuation, split on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(|c| c.to_lowercase())
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn word_id(word: &str) -> usize {
    WORDS
        .iter()
        .position(|w| *w == word)
        .map(|i| FIRST_WORD_ID + i)
        .unwrap_or(UNK_ID)
}

/// Tokenize an expression into vocabulary ids (unknown words map to UNK).
pub fn tokenize(text: &str) -> Vec<usize> {
    normalize_words(text).iter().map(|w| word_id(w)).collect()
}

pub fn id_to_word(id: usize) -> &'static str {
    match id {
        PAD_ID => "<pad>",
        CLS_ID => "<cls>",
        UNK_ID => "<unk>",
        _ => WORDS.get(id - FIRST_WORD_ID).copied().unwrap_or("<unk>"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_fits_default_size() {
        assert!(MIN_VOCAB_SIZE <= 64, "vocabulary outgrew the default size");
        // no duplicate words
        let mut sorted: Vec<&str> = WORDS.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), WORDS.len());
    }

    #[test]
    fn tokenize_normalizes() {
        assert_eq!(
            tokenize("The RED circle,"),
            vec![word_id("the"), word_id("red"), word_id("circle")]
        );
        assert_eq!(tokenize("zzz")[0], UNK_ID);
        assert!(word_id("red") >= FIRST_WORD_ID);
    }

    #[test]
    fn id_word_roundtrip() {
        for (i, w) in WORDS.iter().enumerate() {
            assert_eq!(id_to_word(FIRST_WORD_ID + i), *w);
            assert_eq!(word_id(w), FIRST_WORD_ID + i);
        }
    }
}
