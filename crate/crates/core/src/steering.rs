// SPDX-License-Identifier: MIT OR Apache-2.0

//! Projection-bank learning over contrastive prompt triplets, head-distance
//! scoring and selection, edit-plan construction, and the dual-path check
//! that a key edit equals an additive low-rank bias on attention logits.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::data::{resolve_span_positions, PromptTriplet};
use crate::error::{invalid, Result, SekaError};
use crate::linalg::{dot, norm, svd, Matrix, SvdResult};
use crate::model::{tokenize, CaptureFlags, KeyCapture, ToyModel, TokenSequence};
use crate::spectral::{
    cross_covariance, edit_matrix, projections_from_components, select_rank, ProjectionPair, Side,
    SteeringGains,
};

/// Spectral components learned for one (layer, kv-head).
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub layer: usize,
    pub kv_head: usize,
    pub k_pos: usize,
    pub k_neg: usize,
    pub head_distance: f64,
    pub u_pos: Matrix,
    pub s_pos: Vec<f64>,
    pub u_neg: Matrix,
    pub s_neg: Vec<f64>,
}

impl BankEntry {
    /// Rebuilds `P⁺` and `P⁻` from the stored components.
    pub fn projections(&self, gamma: f64) -> ProjectionPair {
        projections_from_components(&self.u_pos, &self.u_neg, self.k_pos, self.k_neg, gamma)
    }
}

/// Per-(layer, kv-head) spectral components for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBank {
    pub fingerprint: u64,
    pub gamma: f64,
    pub n_layers: usize,
    pub n_kv_heads: usize,
    /// Layer-major: `entries[layer * n_kv_heads + kv_head]`.
    pub entries: Vec<BankEntry>,
}

impl ProjectionBank {
    /// Checks the bank covers a full `n_layers x n_kv_heads` grid in order
    /// and that every entry is well formed.
    pub fn from_entries(fingerprint: u64, gamma: f64, mut entries: Vec<BankEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid("projection bank has no entries"));
        }
        entries.sort_by_key(|e| (e.layer, e.kv_head));
        let n_layers = entries.iter().map(|e| e.layer).max().unwrap_or(0) + 1;
        let n_kv_heads = entries.iter().map(|e| e.kv_head).max().unwrap_or(0) + 1;
        if entries.len() != n_layers * n_kv_heads {
            return Err(invalid(format!(
                "projection bank has {} entries, expected {n_layers} x {n_kv_heads}",
                entries.len()
            )));
        }
        for (i, e) in entries.iter().enumerate() {
            if (e.layer, e.kv_head) != (i / n_kv_heads, i % n_kv_heads) {
                return Err(invalid(format!(
                    "duplicate bank entry for layer {} kv-head {}",
                    e.layer, e.kv_head
                )));
            }
            let d = e.u_pos.rows();
            let ok = e.u_pos.cols() == d
                && e.u_neg.rows() == d
                && e.u_neg.cols() == d
                && e.s_pos.len() == d
                && e.s_neg.len() == d
                && (1..=d).contains(&e.k_pos)
                && (1..=d).contains(&e.k_neg)
                && e.head_distance >= 0.0
                && e.head_distance.is_finite();
            if !ok {
                return Err(invalid(format!(
                    "malformed bank entry for layer {} kv-head {}",
                    e.layer, e.kv_head
                )));
            }
        }
        Ok(Self {
            fingerprint,
            gamma,
            n_layers,
            n_kv_heads,
            entries,
        })
    }

    pub fn entry(&self, layer: usize, kv_head: usize) -> Option<&BankEntry> {
        if layer < self.n_layers && kv_head < self.n_kv_heads {
            self.entries.get(layer * self.n_kv_heads + kv_head)
        } else {
            None
        }
    }

    pub fn d_k(&self) -> usize {
        self.entries[0].u_pos.rows()
    }

    /// `n_layers x n_kv_heads` matrix of head distances.
    pub fn head_distances(&self) -> Matrix {
        Matrix::from_fn(self.n_layers, self.n_kv_heads, |l, h| {
            self.entries[l * self.n_kv_heads + h].head_distance
        })
    }

    /// Heads whose distance reaches `delta_min`, tagged with this bank's
    /// fingerprint.
    pub fn select_heads(&self, delta_min: f64) -> HeadSelection {
        let mut sel = select_heads(&self.head_distances(), delta_min);
        sel.fingerprint = Some(self.fingerprint);
        sel
    }
}

/// Heads chosen for steering.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSelection {
    /// Fingerprint of the bank the selection was derived from, if known.
    pub fingerprint: Option<u64>,
    pub delta_min: f64,
    /// `(layer, kv_head)` pairs.
    pub selected: BTreeSet<(usize, usize)>,
}

/// One key-edit hook: `k' = k + matrix · k` at masked positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub layer: usize,
    pub kv_head: usize,
    pub matrix: Matrix,
}

/// How a plan's matrices were produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlanKind {
    Seka(SteeringGains),
    Adaptive { g: f64 },
}

/// Resolved set of key edits for one model and prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct EditPlan {
    pub fingerprint: u64,
    pub entries: Vec<PlanEntry>,
    /// Highlighted token positions.
    pub mask: BTreeSet<usize>,
    pub kind: PlanKind,
}

impl EditPlan {
    /// Same edits targeted at other positions. An empty mask makes the plan
    /// a no-op.
    pub fn with_mask(mut self, mask: BTreeSet<usize>) -> Self {
        self.mask = mask;
        self
    }

    pub fn matrix(&self, layer: usize, kv_head: usize) -> Option<&Matrix> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.kv_head == kv_head)
            .map(|e| &e.matrix)
    }
}

/// Span keys of one prompt, plus the positions they came from.
pub(crate) struct SpanKeys {
    pub keys: KeyCapture,
}

/// Tokenizes `prompt`, resolves `spans` inside its context region and
/// captures the unedited keys at those positions.
pub(crate) fn capture_span_keys(
    model: &ToyModel,
    prompt: &str,
    spans: &[String],
    index: usize,
) -> Result<SpanKeys> {
    let seq = tokenize(prompt)?;
    let positions = resolve_span_positions(prompt, &seq, spans, index)?;
    let keys = model.capture_keys(&seq, &positions)?;
    Ok(SpanKeys { keys })
}

fn check_aligned(a: &SpanKeys, b: &SpanKeys, index: usize) -> Result<()> {
    let (na, nb) = (a.keys.cells[0].rows(), b.keys.cells[0].rows());
    if na != nb {
        return Err(SekaError::SpanResolution {
            index,
            reason: format!("span covers {na} tokens in one variant and {nb} in another"),
        });
    }
    Ok(())
}

/// Row-wise concatenation of cell `cell` across captures.
pub(crate) fn stack_cell(captures: &[&KeyCapture], cell: usize) -> Matrix {
    let d = captures[0].cells[cell].cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for c in captures {
        data.extend_from_slice(c.cells[cell].data());
        rows += c.cells[cell].rows();
    }
    Matrix::new(rows, d, data).expect("stacked rows share a width")
}

/// SVD of the neutral/signed cross-covariance, shared by bank and expert
/// learning so both see identical components.
pub(crate) fn signed_components(h_neutral: &Matrix, h_signed: &Matrix) -> Result<SvdResult> {
    svd(&cross_covariance(h_neutral, h_signed)?)
}

/// Mean per-token ℓ₂ distance between aligned positive and negative keys.
pub fn head_distance(h_pos: &Matrix, h_neg: &Matrix) -> Result<f64> {
    if h_pos.rows() != h_neg.rows() || h_pos.cols() != h_neg.cols() {
        return Err(invalid(format!(
            "positive ({}x{}) and negative ({}x{}) captures are not aligned",
            h_pos.rows(),
            h_pos.cols(),
            h_neg.rows(),
            h_neg.cols()
        )));
    }
    if h_pos.rows() == 0 {
        return Err(invalid("head distance needs at least one token"));
    }
    let total: f64 = (0..h_pos.rows())
        .map(|i| {
            let diff: Vec<f64> = h_pos.row(i).iter().zip(h_neg.row(i)).map(|(a, b)| a - b).collect();
            norm(&diff)
        })
        .sum();
    Ok(total / h_pos.rows() as f64)
}

/// `n_layers x n_kv_heads` head distances from raw aligned captures.
pub fn compute_head_distances(pos: &KeyCapture, neg: &KeyCapture) -> Result<Matrix> {
    if pos.n_layers != neg.n_layers || pos.n_kv_heads != neg.n_kv_heads {
        return Err(invalid("captures come from differently shaped models"));
    }
    let mut out = Matrix::zeros(pos.n_layers, pos.n_kv_heads);
    for l in 0..pos.n_layers {
        for h in 0..pos.n_kv_heads {
            out.set(l, h, head_distance(pos.cell(l, h), neg.cell(l, h))?);
        }
    }
    Ok(out)
}

/// Learns a projection bank from contrastive prompt triplets.
///
/// Span keys from every triplet are pooled per (layer, kv-head) before the
/// cross-covariances are formed, so `n` is the total token count.
pub fn learn_bank(model: &ToyModel, triplets: &[PromptTriplet], gamma: f64) -> Result<ProjectionBank> {
    if triplets.is_empty() {
        return Err(invalid("learn_bank needs at least one triplet"));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(invalid(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    let captured: Vec<[SpanKeys; 3]> = triplets
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let spans = std::slice::from_ref(&t.span_text);
            let neutral = capture_span_keys(model, &t.neutral_prompt, spans, i)?;
            let positive = capture_span_keys(model, &t.positive_prompt, spans, i)?;
            let negative = capture_span_keys(model, &t.negative_prompt, spans, i)?;
            check_aligned(&neutral, &positive, i)?;
            check_aligned(&neutral, &negative, i)?;
            Ok([neutral, positive, negative])
        })
        .collect::<Result<_>>()?;

    let cfg = model.config();
    let neutral: Vec<&KeyCapture> = captured.iter().map(|c| &c[0].keys).collect();
    let positive: Vec<&KeyCapture> = captured.iter().map(|c| &c[1].keys).collect();
    let negative: Vec<&KeyCapture> = captured.iter().map(|c| &c[2].keys).collect();
    if neutral.iter().map(|c| c.cells[0].rows()).sum::<usize>() == 0 {
        return Err(invalid("no span tokens were pooled"));
    }

    let entries = (0..cfg.n_layers * cfg.n_kv_heads)
        .into_par_iter()
        .map(|cell| {
            let h = stack_cell(&neutral, cell);
            let h_pos = stack_cell(&positive, cell);
            let h_neg = stack_cell(&negative, cell);
            let svd_pos = signed_components(&h, &h_pos)?;
            let svd_neg = signed_components(&h, &h_neg)?;
            let k_pos = select_rank(&svd_pos.s, gamma, Side::Positive)?;
            let k_neg = select_rank(&svd_neg.s, gamma, Side::Negative)?;
            Ok(BankEntry {
                layer: cell / cfg.n_kv_heads,
                kv_head: cell % cfg.n_kv_heads,
                k_pos,
                k_neg,
                head_distance: head_distance(&h_pos, &h_neg)?,
                u_pos: svd_pos.u,
                s_pos: svd_pos.s,
                u_neg: svd_neg.u,
                s_neg: svd_neg.s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ProjectionBank::from_entries(model.fingerprint(), gamma, entries)
}

/// Heads `(ℓ, h)` with `D[ℓ][h] >= delta_min`.
pub fn select_heads(distances: &Matrix, delta_min: f64) -> HeadSelection {
    let mut selected = BTreeSet::new();
    for l in 0..distances.rows() {
        for h in 0..distances.cols() {
            if distances.get(l, h) >= delta_min {
                selected.insert((l, h));
            }
        }
    }
    HeadSelection {
        fingerprint: None,
        delta_min,
        selected,
    }
}

pub(crate) fn check_selection(
    fingerprint: u64,
    n_layers: usize,
    n_kv_heads: usize,
    selection: &HeadSelection,
    mask: &BTreeSet<usize>,
) -> Result<()> {
    if let Some(fp) = selection.fingerprint {
        if fp != fingerprint {
            return Err(SekaError::InvalidPlan(format!(
                "selection fingerprint {fp:016x} does not match bank {fingerprint:016x}"
            )));
        }
    }
    if let Some(&(l, h)) = selection
        .selected
        .iter()
        .find(|(l, h)| *l >= n_layers || *h >= n_kv_heads)
    {
        return Err(SekaError::InvalidPlan(format!(
            "selected head (layer {l}, kv-head {h}) is not in the bank"
        )));
    }
    if mask.is_empty() {
        return Err(SekaError::InvalidPlan("highlight mask is empty".into()));
    }
    Ok(())
}

/// Builds the SEKA hook: `(g⁺ P⁺ + g⁻ P⁻) / 2` for every selected head.
pub fn make_edit_plan(
    bank: &ProjectionBank,
    selection: &HeadSelection,
    gains: SteeringGains,
    mask: BTreeSet<usize>,
) -> Result<EditPlan> {
    check_selection(bank.fingerprint, bank.n_layers, bank.n_kv_heads, selection, &mask)?;
    let entries = selection
        .selected
        .iter()
        .map(|&(layer, kv_head)| {
            let e = bank.entry(layer, kv_head).expect("checked above");
            PlanEntry {
                layer,
                kv_head,
                matrix: edit_matrix(&e.projections(bank.gamma), gains),
            }
        })
        .collect();
    Ok(EditPlan {
        fingerprint: bank.fingerprint,
        entries,
        mask,
        kind: PlanKind::Seka(gains),
    })
}

/// Runs the steered forward pass and compares its attention logits (path A)
/// against unedited logits plus the bias `qᵢᵀ M k_j / √d_k` on masked
/// columns (path B). Returns the largest absolute difference over every
/// layer, query head and causal `(i, j)`.
///
/// The comparison is layer-local: both paths use the queries and unedited
/// keys of the steered run, since edits at one layer legitimately change
/// the residual stream feeding the next.
pub fn verify_bias_equivalence(model: &ToyModel, seq: &TokenSequence, plan: &EditPlan) -> Result<f64> {
    let flags = CaptureFlags {
        keys: true,
        queries: true,
        attn_logits: true,
        ..CaptureFlags::default()
    };
    let out = model.forward_captures(seq, Some(plan), flags)?;
    let cfg = model.config();
    let keys = out.captures.keys.expect("keys captured");
    let queries = out.captures.queries.expect("queries captured");
    let logits = out.captures.attn_logits.expect("logits captured");
    let scale = 1.0 / (cfg.d_k as f64).sqrt();
    let group = cfg.group_size();
    let t_len = seq.len();

    let mut max_diff: f64 = 0.0;
    for l in 0..cfg.n_layers {
        for qh in 0..cfg.n_query_heads {
            let kvh = qh / group;
            let m = plan.matrix(l, kvh);
            let map = &logits[l * cfg.n_query_heads + qh];
            for i in 0..t_len {
                let q = queries.get(l, qh, i);
                for j in 0..=i {
                    let k = keys.get(l, kvh, j);
                    let mut expected = dot(q, k) * scale;
                    if let (Some(m), true) = (m, plan.mask.contains(&j)) {
                        expected += dot(q, &m.mul_vec(k)?) * scale;
                    }
                    max_diff = max_diff.max((map.get(i, j) - expected).abs());
                }
            }
        }
    }
    Ok(max_diff)
}

/// Realized bias block `B[i][c] = qᵢᵀ M k_{mask[c]} / √d_k` for one
/// (layer, query-head), over rows `i >= max(mask)` where every masked
/// column is causally visible.
pub fn bias_block(
    model: &ToyModel,
    seq: &TokenSequence,
    plan: &EditPlan,
    layer: usize,
    query_head: usize,
) -> Result<Matrix> {
    let cfg = model.config();
    if layer >= cfg.n_layers || query_head >= cfg.n_query_heads {
        return Err(invalid("bias block head is outside the model"));
    }
    let kvh = query_head / cfg.group_size();
    let d_k = cfg.d_k;
    let zero = Matrix::zeros(d_k, d_k);
    let m = plan.matrix(layer, kvh).unwrap_or(&zero);
    let flags = CaptureFlags {
        keys: true,
        queries: true,
        ..CaptureFlags::default()
    };
    let out = model.forward_captures(seq, Some(plan), flags)?;
    let keys = out.captures.keys.expect("keys captured");
    let queries = out.captures.queries.expect("queries captured");
    let cols: Vec<usize> = plan.mask.iter().copied().collect();
    let first_row = cols.last().copied().unwrap_or(0);
    let scale = 1.0 / (d_k as f64).sqrt();
    let mk: Vec<Vec<f64>> = cols
        .iter()
        .map(|&j| m.mul_vec(keys.get(layer, kvh, j)))
        .collect::<Result<_>>()?;
    Ok(Matrix::from_fn(seq.len() - first_row, cols.len(), |r, c| {
        dot(queries.get(layer, query_head, first_row + r), &mk[c]) * scale
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_distance_forced_arithmetic() {
        let pos = Matrix::from_rows(&[[3.0, 4.0], [1.0, 1.0]]).unwrap();
        let neg = Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        assert_eq!(head_distance(&pos, &neg).unwrap(), 2.5);
        assert_eq!(head_distance(&pos, &pos).unwrap(), 0.0);
        assert!(head_distance(&pos, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn selection_thresholds() {
        let d = Matrix::from_rows(&[[0.1, 0.5], [0.3, 0.0]]).unwrap();
        assert_eq!(select_heads(&d, 0.0).selected.len(), 4);
        assert!(select_heads(&d, 0.51).selected.is_empty());
        let mid = select_heads(&d, 0.3).selected;
        assert_eq!(mid, BTreeSet::from([(0, 1), (1, 0)]));
    }
}
