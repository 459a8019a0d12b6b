// SPDX-License-Identifier: MIT OR Apache-2.0

//! Whitespace/punctuation tokenizer with hashed ids.

use std::ops::Range;

use crate::error::{invalid, Result};

/// Number of slots in the hashed embedding table.
pub const VOCAB_SIZE: usize = 65536;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Hashed vocabulary id of a (lowercased) token.
pub fn token_id(text: &str) -> u32 {
    (fnv1a64(text.as_bytes()) % VOCAB_SIZE as u64) as u32
}

/// A tokenized prompt. `offsets[i]` is the byte range of token `i` in the
/// source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub texts: Vec<String>,
    pub offsets: Vec<Range<usize>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Indices of the tokens overlapping the byte range `bytes`.
    pub fn tokens_in(&self, bytes: Range<usize>) -> Vec<usize> {
        self.offsets
            .iter()
            .enumerate()
            .filter(|(_, r)| r.start < bytes.end && r.end > bytes.start)
            .map(|(i, _)| i)
            .collect()
    }
}

pub(crate) fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercases, splits on whitespace and emits every punctuation character
/// as its own token.
pub fn tokenize(text: &str) -> Result<TokenSequence> {
    if text.trim().is_empty() {
        return Err(invalid("cannot tokenize empty text"));
    }
    let mut seq = TokenSequence {
        ids: Vec::new(),
        texts: Vec::new(),
        offsets: Vec::new(),
    };
    let mut push = |range: Range<usize>| {
        let t = text[range.clone()].to_lowercase();
        seq.ids.push(token_id(&t));
        seq.texts.push(t);
        seq.offsets.push(range);
    };
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() || is_punctuation(c) {
            if let Some(s) = word_start.take() {
                push(s..i);
            }
            if !c.is_whitespace() {
                push(i..i + c.len_utf8());
            }
        } else if word_start.is_none() {
            word_start = Some(i);
        }
    }
    if let Some(s) = word_start {
        push(s..text.len());
    }
    Ok(seq)
}
