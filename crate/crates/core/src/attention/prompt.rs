//! Word-level prompts with deterministic embeddings, and the source/target token alignment.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TEXT_WIDTH: usize = 32;
pub const DEFAULT_VOCAB_SEED: u64 = 0x0a7e_5eed;

/// 64-bit FNV-1a.
pub fn word_id(word: &str) -> u64 {
    word.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    text: String,
    words: Vec<String>,
    tokens: Vec<u64>,
    /// One row per token.
    embeddings: Array2<f64>,
}

impl Prompt {
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn tokens(&self) -> &[u64] {
        &self.tokens
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub width: usize,
    pub vocab_seed: u64,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer {
            width: DEFAULT_TEXT_WIDTH,
            vocab_seed: DEFAULT_VOCAB_SEED,
        }
    }
}

impl Tokenizer {
    pub fn new(width: usize, vocab_seed: u64) -> Self {
        Tokenizer { width, vocab_seed }
    }

    /// Lowercases and splits on every non-alphanumeric character.
    pub fn tokenize(&self, text: &str) -> Result<Prompt> {
        if self.width == 0 {
            return Err(Error::Precondition("text width must be positive".into()));
        }
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.to_lowercase())
            .collect();
        if words.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let tokens: Vec<u64> = words.iter().map(|w| word_id(w)).collect();
        let mut embeddings = Array2::zeros((tokens.len(), self.width));
        for (mut row, &id) in embeddings.rows_mut().into_iter().zip(&tokens) {
            let mut rng = self.rng_for(id);
            row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        }
        Ok(Prompt {
            text: text.to_string(),
            words,
            tokens,
            embeddings,
        })
    }

    fn rng_for(&self, id: u64) -> ChaCha20Rng {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.vocab_seed.to_le_bytes());
        seed[8..16].copy_from_slice(&id.to_le_bytes());
        ChaCha20Rng::from_seed(seed)
    }
}

pub fn tokenize(text: &str) -> Result<Prompt> {
    Tokenizer::default().tokenize(text)
}

/// For each target token `j`, the source position `A(j)` it borrows attention from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentMap {
    mapping: Vec<Option<usize>>,
    source_len: usize,
}

impl AlignmentMap {
    pub fn new(mapping: Vec<Option<usize>>, source_len: usize) -> Result<Self> {
        for (target, m) in mapping.iter().enumerate() {
            if let Some(source_index) = *m {
                if source_index >= source_len {
                    return Err(Error::AlignmentOutOfRange {
                        target,
                        source_index,
                        source_len,
                    });
                }
            }
        }
        Ok(AlignmentMap { mapping, source_len })
    }

    pub fn identity(len: usize) -> Self {
        AlignmentMap {
            mapping: (0..len).map(Some).collect(),
            source_len: len,
        }
    }

    pub fn get(&self, target: usize) -> Option<usize> {
        self.mapping.get(target).copied().flatten()
    }

    pub fn mapping(&self) -> &[Option<usize>] {
        &self.mapping
    }

    pub fn target_len(&self) -> usize {
        self.mapping.len()
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    /// Every target token mapped, every source token used exactly once.
    pub fn is_bijection(&self) -> bool {
        if self.mapping.len() != self.source_len {
            return false;
        }
        let mut seen = vec![false; self.source_len];
        for m in &self.mapping {
            match m {
                Some(s) if !seen[*s] => seen[*s] = true,
                _ => return false,
            }
        }
        true
    }
}

/// Shared words map to the earliest unused source occurrence of the same word.
/// For equal-length prompts the remaining targets map positionally; otherwise
/// they stay unmapped.
pub fn compute_alignment(source: &Prompt, target: &Prompt) -> AlignmentMap {
    let mut used = vec![false; source.len()];
    let mut mapping: Vec<Option<usize>> = target
        .tokens()
        .iter()
        .map(|id| {
            let found = source
                .tokens()
                .iter()
                .enumerate()
                .position(|(i, s)| s == id && !used[i]);
            if let Some(i) = found {
                used[i] = true;
            }
            found
        })
        .collect();
    if source.len() == target.len() {
        for (j, m) in mapping.iter_mut().enumerate() {
            if m.is_none() {
                *m = Some(j);
            }
        }
    }
    AlignmentMap {
        mapping,
        source_len: source.len(),
    }
}
