//! Closed vocabulary and tokenizer for the synthetic prompt grammar.
//!
//! The word list is exactly the grammar's surface vocabulary plus the four
//! specials, so every generated sentence tokenizes without UNK.

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

/// Grammar surface words. Order is part of the vocabulary contract.
pub const WORDS: &[&str] = &[
    "no", "pulmonary", "infection", "both", "lungs", "are", "clear", "unilateral", "bilateral",
    "one", "two", "three", "infected", "area", "areas", "all", "left", "right", "lung", "upper",
    "lower", "and", "chest", "image", "shows", "opacities", "in", "zone", "fields", "without",
    "opacity",
];

#[derive(Clone, Debug)]
pub struct Tokenizer {
    context_length: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    /// True at non-PAD positions (BOS, words, EOS).
    pub mask: Vec<bool>,
}

impl Tokenized {
    pub fn effective_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

impl Tokenizer {
    pub fn new(context_length: usize) -> Self {
        Tokenizer { context_length }
    }

    pub fn vocab_size() -> usize {
        WORDS.len() + 4
    }

    pub fn context_length(&self) -> usize {
        self.context_length
    }

    fn word_id(word: &str) -> usize {
        WORDS
            .iter()
            .position(|&w| w == word)
            .map(|i| i + 4)
            .unwrap_or(UNK)
    }

    /// Lowercase, strip punctuation, whitespace-split.
    pub fn normalize(text: &str) -> Vec<String> {
        text.to_lowercase()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { ' ' })
            .collect::<String>()
            .split_whitespace()
            .map(str::to_string)
            .collect()
    }

    /// `BOS + word ids + EOS`, padded or truncated to the context length.
    pub fn encode(&self, text: &str) -> Tokenized {
        let mut ids = vec![BOS];
        for w in Self::normalize(text) {
            ids.push(Self::word_id(&w));
        }
        ids.push(EOS);
        ids.truncate(self.context_length);
        if ids.len() == self.context_length && *ids.last().unwrap() != EOS {
            ids[self.context_length - 1] = EOS;
        }
        let effective = ids.len();
        ids.resize(self.context_length, PAD);
        let mask = (0..self.context_length).map(|i| i < effective).collect();
        Tokenized { ids, mask }
    }
}
