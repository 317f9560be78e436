//! Toy word-level vocabulary for scene captions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_TOKENS: usize = 16;
pub const PAD: usize = 0;

/// Fixed vocabulary. Index 0 is the padding token.
pub const VOCAB: &[&str] = &[
    "<pad>", "<unk>", "a", "and", "on", "background",
    // shapes
    "circle", "square", "triangle",
    // object colors
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple",
    // background colors
    "white", "lightgray", "beige", "mint", "black", "darkgray", "navy", "maroon",
    // size classes
    "small", "medium", "large",
    // grid cells
    "topleft", "top", "topright", "left", "center", "right", "bottomleft", "bottom", "bottomright",
];

/// Token ids padded to [`MAX_TOKENS`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.len() > MAX_TOKENS {
            return Err(Error::Invalid(format!("{} tokens exceed the limit of {MAX_TOKENS}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= VOCAB.len()) {
            return Err(Error::Invalid(format!("token id {bad} outside vocabulary")));
        }
        let mut ids = ids;
        ids.resize(MAX_TOKENS, PAD);
        Ok(Self { ids })
    }

    /// Whitespace tokenization; unknown words map to `<unk>`.
    pub fn from_caption(caption: &str) -> Result<Self> {
        let ids = caption
            .split_whitespace()
            .map(|w| token_id(&w.to_ascii_lowercase()).unwrap_or(1))
            .collect();
        Self::new(ids)
    }

    pub fn empty() -> Self {
        Self { ids: vec![PAD; MAX_TOKENS] }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn to_caption(&self) -> String {
        self.ids
            .iter()
            .filter(|&&i| i != PAD)
            .map(|&i| VOCAB[i])
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn token_id(word: &str) -> Option<usize> {
    VOCAB.iter().position(|&v| v == word)
}

/// Concatenated ids of a batch, as the denoiser consumes them.
pub fn flatten(batch: &[TokenSequence]) -> Vec<usize> {
    batch.iter().flat_map(|t| t.ids.iter().copied()).collect()
}
