// SPDX-License-Identifier: MIT OR Apache-2.0

//! Contrastive samples, prompt layout, highlight markers and span lookup.

mod io;
mod synthetic;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SekaError};
use crate::model::{tokenize, TokenSequence};

pub use io::{
    load_bank, load_expert_bank, load_expert_dataset, load_model_config, load_samples,
    load_selection, save_bank, save_expert_bank, save_expert_dataset, save_model_config,
    save_samples, save_selection, FORMAT_VERSION,
};
pub use synthetic::{generate_synthetic, WORD_BANK_MIN};

/// Highlight delimiter.
pub const MARKER: &str = "**";

const CONTEXT_PREFIX: &str = "Context: ";
const QUESTION_PREFIX: &str = "Question: ";

/// Two contexts with one question/answer pair each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveSample {
    pub context1: String,
    pub context2: String,
    pub question1: String,
    pub answer1: String,
    pub question2: String,
    pub answer2: String,
}

/// Neutral, positive and negative prompt variants sharing one answer span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTriplet {
    pub neutral_prompt: String,
    pub positive_prompt: String,
    pub negative_prompt: String,
    pub span_text: String,
}

/// A prompt with its `**` markers stripped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HighlightedPrompt {
    pub clean_text: String,
    /// Token indices of the highlighted regions in `clean_text`.
    pub highlight_spans: BTreeSet<usize>,
}

impl HighlightedPrompt {
    pub fn tokens(&self) -> Result<TokenSequence> {
        tokenize(&self.clean_text)
    }
}

/// Neutral/positive prompt pair for one expert.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertPair {
    pub neutral_prompt: String,
    pub positive_prompt: String,
    pub span_texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertDataset {
    pub name: String,
    pub pairs: Vec<ExpertPair>,
}

impl ExpertDataset {
    /// Positive halves of SEKA triplets, for learning an expert from the
    /// same data as a bank.
    pub fn from_triplets(name: impl Into<String>, triplets: &[PromptTriplet]) -> Self {
        Self {
            name: name.into(),
            pairs: triplets
                .iter()
                .map(|t| ExpertPair {
                    neutral_prompt: t.neutral_prompt.clone(),
                    positive_prompt: t.positive_prompt.clone(),
                    span_texts: vec![t.span_text.clone()],
                })
                .collect(),
        }
    }
}

/// Strips balanced `**...**` markers and records which tokens of the clean
/// text they covered.
pub fn parse_highlights(text: &str) -> Result<HighlightedPrompt> {
    let mut clean = String::with_capacity(text.len());
    let mut regions = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    let mut rest = 0;
    while let Some(found) = text[rest..].find(MARKER) {
        let at = rest + found;
        clean.push_str(&text[rest..at]);
        match open.take() {
            None => open = Some((at, clean.len())),
            Some((_, start)) => regions.push(start..clean.len()),
        }
        rest = at + MARKER.len();
    }
    clean.push_str(&text[rest..]);
    if let Some((offset, _)) = open {
        return Err(SekaError::Parse {
            offset,
            message: "unbalanced highlight marker".into(),
        });
    }
    let mut highlight_spans = BTreeSet::new();
    if !regions.is_empty() {
        let seq = tokenize(&clean)?;
        for r in regions {
            let idx = seq.tokens_in(r.clone());
            if idx.is_empty() {
                return Err(SekaError::Parse {
                    offset: r.start,
                    message: "highlighted region contains no tokens".into(),
                });
            }
            highlight_spans.extend(idx);
        }
    }
    Ok(HighlightedPrompt {
        clean_text: clean,
        highlight_spans,
    })
}

/// `Context: C`.
pub fn neutral_prompt(context: &str) -> String {
    format!("{CONTEXT_PREFIX}{context}")
}

/// `Question: Q\nContext: C`.
pub fn question_prompt(question: &str, context: &str) -> String {
    format!("{QUESTION_PREFIX}{question}\n{CONTEXT_PREFIX}{context}")
}

/// Two triplets per sample, one per context. Each negative prompt carries
/// the other context's question.
pub fn expand_triplets(sample: &ContrastiveSample) -> Result<[PromptTriplet; 2]> {
    for (ctx, ans, which) in [
        (&sample.context1, &sample.answer1, "answer1"),
        (&sample.context2, &sample.answer2, "answer2"),
    ] {
        if ans.is_empty() || !ctx.contains(ans.as_str()) {
            return Err(SekaError::InvalidSample(format!(
                "{which} {ans:?} is not a substring of its context"
            )));
        }
    }
    if sample.context1 == sample.context2 && sample.question1 == sample.question2 {
        log::warn!("sample has identical contexts and questions; positive and negative prompts coincide");
    }
    let make = |ctx: &str, q: &str, q_other: &str, ans: &str| PromptTriplet {
        neutral_prompt: neutral_prompt(ctx),
        positive_prompt: question_prompt(q, ctx),
        negative_prompt: question_prompt(q_other, ctx),
        span_text: ans.to_string(),
    };
    Ok([
        make(&sample.context1, &sample.question1, &sample.question2, &sample.answer1),
        make(&sample.context2, &sample.question2, &sample.question1, &sample.answer2),
    ])
}

/// Byte offset where the context region of a prompt begins.
pub fn context_start(prompt: &str) -> usize {
    if prompt.starts_with(CONTEXT_PREFIX) {
        CONTEXT_PREFIX.len()
    } else if let Some(i) = prompt.find(&format!("\n{CONTEXT_PREFIX}")) {
        i + 1 + CONTEXT_PREFIX.len()
    } else {
        0
    }
}

/// Leftmost byte range of `span` inside the context region of `prompt`.
pub fn locate_span(prompt: &str, span: &str, index: usize) -> Result<std::ops::Range<usize>> {
    if span.trim().is_empty() {
        return Err(SekaError::SpanResolution {
            index,
            reason: "span text is empty".into(),
        });
    }
    let start = context_start(prompt);
    let region = &prompt[start..];
    let Some(at) = region.find(span) else {
        return Err(SekaError::SpanResolution {
            index,
            reason: format!("span {span:?} not found in context"),
        });
    };
    if region[at + 1..].contains(span) {
        log::warn!("item {index}: span {span:?} occurs more than once; using the leftmost");
    }
    Ok(start + at..start + at + span.len())
}

/// Sorted token positions covered by any of `spans` in `seq`, the
/// tokenization of `prompt`.
pub fn resolve_span_positions(
    prompt: &str,
    seq: &TokenSequence,
    spans: &[String],
    index: usize,
) -> Result<Vec<usize>> {
    if spans.is_empty() {
        return Err(SekaError::SpanResolution {
            index,
            reason: "no span texts given".into(),
        });
    }
    let mut positions = BTreeSet::new();
    for span in spans {
        let range = locate_span(prompt, span, index)?;
        let idx = seq.tokens_in(range);
        if idx.is_empty() {
            return Err(SekaError::SpanResolution {
                index,
                reason: format!("span {span:?} covers no tokens"),
            });
        }
        positions.extend(idx);
    }
    Ok(positions.into_iter().collect())
}

/// Splits a prompt file into blank-line-separated blocks.
pub fn split_prompts(text: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                blocks.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        blocks.push(current.join("\n"));
    }
    blocks
}

pub(crate) fn check_finite(values: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(invalid(format!("{what} contains NaN or infinite values")))
    }
}
