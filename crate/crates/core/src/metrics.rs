// SPDX-License-Identifier: MIT OR Apache-2.0

//! Highlighted-attention mass, efficacy and pronoun scores, and CSV exports
//! for head-distance heatmaps and PCA key shifts.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{invalid, Result, SekaError};
use crate::linalg::{pca2, Matrix};
use crate::model::{is_punctuation, tokenize, CaptureFlags, ToyModel, TokenSequence};
use crate::steering::EditPlan;

/// Pronouns scored by the core pronoun metric.
pub const PRONOUNS_CORE: [&str; 2] = ["she", "he"];

/// The full gendered pronoun set.
pub const PRONOUNS_ALL: [&str; 8] = ["she", "he", "her", "him", "hers", "his", "herself", "himself"];

/// Softmax mass on a token set at the final query row.
#[derive(Debug, Clone, PartialEq)]
pub struct MassReport {
    /// Indexed `layer * n_query_heads + query_head`.
    pub per_head: Vec<f64>,
    pub mean: f64,
}

/// Mass on `highlight` at the last row of every attention head, with
/// `plan` applied if given.
pub fn attention_mass(
    model: &ToyModel,
    seq: &TokenSequence,
    highlight: &BTreeSet<usize>,
    plan: Option<&EditPlan>,
) -> Result<MassReport> {
    if highlight.is_empty() {
        return Err(invalid("highlight set is empty"));
    }
    if let Some(&j) = highlight.iter().next_back() {
        if j >= seq.len() {
            return Err(invalid(format!(
                "highlight position {j} is outside a sequence of {} tokens",
                seq.len()
            )));
        }
    }
    let flags = CaptureFlags {
        last_row_weights: true,
        ..CaptureFlags::default()
    };
    let out = model.forward_captures(seq, plan, flags)?;
    let rows = out.captures.last_row_weights.expect("last-row weights requested");
    let per_head: Vec<f64> = rows
        .iter()
        .map(|row| highlight.iter().map(|&j| row[j]).sum::<f64>().clamp(0.0, 1.0))
        .collect();
    let mean = per_head.iter().sum::<f64>() / per_head.len() as f64;
    Ok(MassReport { per_head, mean })
}

/// Fraction of pairs where the new fact's probability strictly exceeds the
/// old one's.
pub fn efficacy_score(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid("efficacy score needs at least one pair"));
    }
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(invalid("probabilities must be finite"));
    }
    let wins = pairs.iter().filter(|(new, old)| new > old).count();
    Ok(wins as f64 / pairs.len() as f64)
}

struct Split {
    content: HashSet<String>,
    pronouns: usize,
}

fn split_tokens(text: &str, pronouns: &HashSet<String>) -> Result<Split> {
    let seq = tokenize(text)?;
    let mut out = Split {
        content: HashSet::new(),
        pronouns: 0,
    };
    for t in seq.texts {
        if pronouns.contains(&t) {
            out.pronouns += 1;
        } else if !t.chars().all(is_punctuation) {
            out.content.insert(t);
        }
    }
    Ok(out)
}

/// Pronoun-conversion-weighted lexical overlap of `generated` against
/// `original`.
///
/// Content tokens are token types other than pronouns and punctuation.
/// The pronoun weight is the fraction of the original's pronouns absent
/// from the generation (1 if the original has none). An original with no
/// content tokens scores the pronoun weight alone.
pub fn pronoun_score(original: &str, generated: &str, pronoun_set: &[&str]) -> Result<f64> {
    if original.trim().is_empty() {
        return Err(invalid("original text is empty"));
    }
    if generated.trim().is_empty() {
        return Ok(0.0);
    }
    let set: HashSet<String> = pronoun_set.iter().map(|p| p.to_lowercase()).collect();
    let ori = split_tokens(original, &set)?;
    let gen = split_tokens(generated, &set)?;
    let w_pron = if ori.pronouns == 0 {
        1.0
    } else {
        (ori.pronouns - gen.pronouns.min(ori.pronouns)) as f64 / ori.pronouns as f64
    };
    if ori.content.is_empty() {
        return Ok(w_pron);
    }
    let overlap = ori.content.intersection(&gen.content).count();
    Ok(w_pron * overlap as f64 / ori.content.len() as f64)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| SekaError::io(path, e))
}

/// `layer,head,distance` rows for every cell of `distances`.
pub fn heatmap_csv(distances: &Matrix) -> String {
    let mut s = String::from("layer,head,distance\n");
    for l in 0..distances.rows() {
        for h in 0..distances.cols() {
            let _ = writeln!(s, "{l},{h},{:.16e}", distances.get(l, h));
        }
    }
    s
}

pub fn export_heatmap(distances: &Matrix, path: &Path) -> Result<()> {
    write_file(path, &heatmap_csv(distances))
}

/// Paired keys in the joint top-2 PCA plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaShift {
    /// `(neg_x, neg_y, pos_x, pos_y)` per pair.
    pub pairs: Vec<[f64; 4]>,
    pub mean_shift: [f64; 2],
}

/// Joint PCA over the stacked negative and positive keys.
pub fn pca_shift(pos_keys: &Matrix, neg_keys: &Matrix) -> Result<PcaShift> {
    if pos_keys.rows() != neg_keys.rows() || pos_keys.cols() != neg_keys.cols() {
        return Err(invalid(format!(
            "positive ({}x{}) and negative ({}x{}) keys are not paired",
            pos_keys.rows(),
            pos_keys.cols(),
            neg_keys.rows(),
            neg_keys.cols()
        )));
    }
    let n = pos_keys.rows();
    if n == 0 {
        return Err(invalid("no key pairs"));
    }
    let d = pos_keys.cols();
    let mut data = neg_keys.data().to_vec();
    data.extend_from_slice(pos_keys.data());
    let proj = pca2(&Matrix::new(2 * n, d, data)?)?.projected;
    let pairs: Vec<[f64; 4]> = (0..n)
        .map(|i| [proj.get(i, 0), proj.get(i, 1), proj.get(n + i, 0), proj.get(n + i, 1)])
        .collect();
    let mut mean_shift = [0.0; 2];
    for p in &pairs {
        mean_shift[0] += p[2] - p[0];
        mean_shift[1] += p[3] - p[1];
    }
    mean_shift[0] /= n as f64;
    mean_shift[1] /= n as f64;
    Ok(PcaShift { pairs, mean_shift })
}

pub fn pca_shift_csv(shift: &PcaShift) -> String {
    let mut s = String::from("pair,neg_x,neg_y,pos_x,pos_y\n");
    for (i, p) in shift.pairs.iter().enumerate() {
        let _ = writeln!(s, "{i},{:.16e},{:.16e},{:.16e},{:.16e}", p[0], p[1], p[2], p[3]);
    }
    let _ = writeln!(s, "MEAN_SHIFT,{:.16e},{:.16e}", shift.mean_shift[0], shift.mean_shift[1]);
    s
}

pub fn export_pca_shift(pos_keys: &Matrix, neg_keys: &Matrix, path: &Path) -> Result<PcaShift> {
    let shift = pca_shift(pos_keys, neg_keys)?;
    write_file(path, &pca_shift_csv(&shift))?;
    Ok(shift)
}
