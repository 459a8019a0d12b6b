// SPDX-License-Identifier: MIT OR Apache-2.0

//! Query-adaptive multi-expert steering: per-expert positive spectral
//! components, routing coefficients from the last-token query, and the
//! dynamic projection they weight.

use std::collections::{BTreeSet, HashSet};

use rayon::prelude::*;

use crate::data::ExpertDataset;
use crate::error::{invalid, Result, SekaError};
use crate::linalg::{dot, Matrix};
use crate::model::{KeyCapture, ToyModel, TokenSequence};
use crate::steering::{
    capture_span_keys, check_selection, signed_components, stack_cell, EditPlan, HeadSelection,
    PlanEntry, PlanKind, ProjectionBank,
};

/// Leading positive components of one expert at one (layer, kv-head).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertEntry {
    pub layer: usize,
    pub kv_head: usize,
    /// `d_k x c` with orthonormal columns, `c <= K`.
    pub u: Matrix,
    /// `c` singular values, descending.
    pub s: Vec<f64>,
}

impl ExpertEntry {
    pub fn projector(&self) -> Matrix {
        self.u.column_projector(0..self.u.cols())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub name: String,
    /// Layer-major, one per (layer, kv-head).
    pub entries: Vec<ExpertEntry>,
}

/// Named experts over a common `n_layers x n_kv_heads` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    pub k: usize,
    pub fingerprint: u64,
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub experts: Vec<Expert>,
}

fn check_expert(expert: &mut Expert, k: usize, shape: Option<(usize, usize, usize)>) -> Result<(usize, usize, usize)> {
    if expert.entries.is_empty() {
        return Err(invalid(format!("expert {:?} has no entries", expert.name)));
    }
    expert.entries.sort_by_key(|e| (e.layer, e.kv_head));
    let n_layers = expert.entries.iter().map(|e| e.layer).max().unwrap_or(0) + 1;
    let n_kv = expert.entries.iter().map(|e| e.kv_head).max().unwrap_or(0) + 1;
    let d = expert.entries[0].u.rows();
    if let Some(expected) = shape {
        if expected != (n_layers, n_kv, d) {
            return Err(invalid(format!(
                "expert {:?} covers a different head grid or dimension",
                expert.name
            )));
        }
    }
    if expert.entries.len() != n_layers * n_kv {
        return Err(invalid(format!("expert {:?} does not cover every head", expert.name)));
    }
    for (i, e) in expert.entries.iter().enumerate() {
        let where_ = format!("expert {:?} layer {} kv-head {}", expert.name, e.layer, e.kv_head);
        if (e.layer, e.kv_head) != (i / n_kv, i % n_kv) {
            return Err(invalid(format!("duplicate entry in {where_}")));
        }
        let c = e.u.cols();
        if e.u.rows() != d || c == 0 || c > k || c > d || e.s.len() != c {
            return Err(invalid(format!("malformed components in {where_}")));
        }
        if e.s.iter().any(|&s| s < 0.0) || e.s.windows(2).any(|w| w[0] < w[1]) {
            return Err(invalid(format!("singular values not descending in {where_}")));
        }
        let gram = e.u.transpose().matmul(&e.u)?;
        if gram.sub(&Matrix::identity(c))?.frobenius_norm() > 1e-8 {
            return Err(invalid(format!("columns not orthonormal in {where_}")));
        }
    }
    Ok((n_layers, n_kv, d))
}

impl ExpertBank {
    pub fn new(k: usize, fingerprint: u64, mut experts: Vec<Expert>) -> Result<Self> {
        if experts.is_empty() {
            return Err(invalid("expert bank needs at least one expert"));
        }
        if k == 0 {
            return Err(invalid("K must be >= 1"));
        }
        let mut names = HashSet::new();
        let mut shape = None;
        for x in &mut experts {
            if !names.insert(x.name.clone()) {
                return Err(invalid(format!("duplicate expert name {:?}", x.name)));
            }
            shape = Some(check_expert(x, k, shape)?);
        }
        let (n_layers, n_kv_heads, _) = shape.expect("at least one expert");
        Ok(Self {
            k,
            fingerprint,
            n_layers,
            n_kv_heads,
            experts,
        })
    }

    /// One expert holding each head's leading `k⁺` positive components.
    /// `K` is the largest `k⁺`.
    pub fn from_projection_bank(bank: &ProjectionBank, name: impl Into<String>) -> Result<Self> {
        let entries: Vec<ExpertEntry> = bank
            .entries
            .iter()
            .map(|e| ExpertEntry {
                layer: e.layer,
                kv_head: e.kv_head,
                u: e.u_pos.columns(0..e.k_pos),
                s: e.s_pos[..e.k_pos].to_vec(),
            })
            .collect();
        let k = bank.entries.iter().map(|e| e.k_pos).max().unwrap_or(1);
        Self::new(
            k,
            bank.fingerprint,
            vec![Expert {
                name: name.into(),
                entries,
            }],
        )
    }

    pub fn d_k(&self) -> usize {
        self.experts[0].entries[0].u.rows()
    }

    pub fn entry(&self, expert: usize, layer: usize, kv_head: usize) -> &ExpertEntry {
        &self.experts[expert].entries[layer * self.n_kv_heads + kv_head]
    }

    /// Adds `expert`, replacing any existing expert of the same name.
    /// Other experts are left untouched.
    pub fn upsert(&mut self, mut expert: Expert) -> Result<()> {
        check_expert(
            &mut expert,
            self.k,
            Some((self.n_layers, self.n_kv_heads, self.d_k())),
        )?;
        match self.experts.iter_mut().find(|x| x.name == expert.name) {
            Some(slot) => *slot = expert,
            None => self.experts.push(expert),
        }
        Ok(())
    }
}

/// Positive-side learning over neutral/positive pairs, keeping the leading
/// `k` components per head.
pub fn learn_expert(model: &ToyModel, dataset: &ExpertDataset, k: usize) -> Result<Expert> {
    let cfg = model.config();
    if dataset.pairs.is_empty() {
        return Err(invalid("expert dataset has no pairs"));
    }
    if k == 0 || k > cfg.d_k {
        return Err(invalid(format!("K must lie in 1..={}, got {k}", cfg.d_k)));
    }
    let captured: Vec<[KeyCapture; 2]> = dataset
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let neutral = capture_span_keys(model, &p.neutral_prompt, &p.span_texts, i)?;
            let positive = capture_span_keys(model, &p.positive_prompt, &p.span_texts, i)?;
            let (a, b) = (neutral.keys.cells[0].rows(), positive.keys.cells[0].rows());
            if a != b {
                return Err(SekaError::SpanResolution {
                    index: i,
                    reason: format!("spans cover {a} tokens in the neutral prompt and {b} in the positive"),
                });
            }
            Ok([neutral.keys, positive.keys])
        })
        .collect::<Result<_>>()?;
    let neutral: Vec<&KeyCapture> = captured.iter().map(|c| &c[0]).collect();
    let positive: Vec<&KeyCapture> = captured.iter().map(|c| &c[1]).collect();
    let entries = (0..cfg.n_layers * cfg.n_kv_heads)
        .into_par_iter()
        .map(|cell| {
            let svd = signed_components(&stack_cell(&neutral, cell), &stack_cell(&positive, cell))?;
            Ok(ExpertEntry {
                layer: cell / cfg.n_kv_heads,
                kv_head: cell % cfg.n_kv_heads,
                u: svd.u.columns(0..k),
                s: svd.s[..k].to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Expert {
        name: dataset.name.clone(),
        entries,
    })
}

/// Per-(layer, kv-head) routing weights over the experts of a bank.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingCoefficients {
    pub n_experts: usize,
    pub n_layers: usize,
    pub n_kv_heads: usize,
    /// Unnormalized alignment scores, `[cell * n_experts + m]`.
    pub raw: Vec<f64>,
    /// `raw` divided by its largest magnitude at each cell.
    pub alpha: Vec<f64>,
}

impl RoutingCoefficients {
    pub fn alpha(&self, expert: usize, layer: usize, kv_head: usize) -> f64 {
        self.alpha[(layer * self.n_kv_heads + kv_head) * self.n_experts + expert]
    }

    /// Coefficients at one cell, one per expert.
    pub fn cell(&self, layer: usize, kv_head: usize) -> &[f64] {
        let c = layer * self.n_kv_heads + kv_head;
        &self.alpha[c * self.n_experts..(c + 1) * self.n_experts]
    }

    /// Every expert weighted 1 at every cell.
    pub fn uniform(bank: &ExpertBank) -> Self {
        let n = bank.experts.len() * bank.n_layers * bank.n_kv_heads;
        Self {
            n_experts: bank.experts.len(),
            n_layers: bank.n_layers,
            n_kv_heads: bank.n_kv_heads,
            raw: vec![1.0; n],
            alpha: vec![1.0; n],
        }
    }
}

/// `raw_m = Σ_k (qᵀu_k) σ_k`, `alpha_m = raw_m / max_m |raw_m|`.
///
/// `queries` is indexed `layer * n_kv_heads + kv_head`. Cells where every
/// raw score is zero get all-zero coefficients.
pub fn route_coefficients(queries: &[Vec<f64>], bank: &ExpertBank) -> Result<RoutingCoefficients> {
    let cells = bank.n_layers * bank.n_kv_heads;
    if queries.len() != cells {
        return Err(invalid(format!("{} queries for {cells} heads", queries.len())));
    }
    let d = bank.d_k();
    if let Some(q) = queries.iter().find(|q| q.len() != d) {
        return Err(invalid(format!("query of length {} does not match d_k {d}", q.len())));
    }
    let m_count = bank.experts.len();
    let mut raw = Vec::with_capacity(cells * m_count);
    let mut alpha = Vec::with_capacity(cells * m_count);
    let mut null_cells = 0;
    for (c, q) in queries.iter().enumerate() {
        let start = raw.len();
        for x in &bank.experts {
            let e = &x.entries[c];
            let score: f64 = (0..e.u.cols())
                .map(|k| {
                    let col = e.u.column(k);
                    dot(q, &col) * e.s[k]
                })
                .sum();
            raw.push(score);
        }
        let scores = &raw[start..];
        let max = scores.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        if max == 0.0 {
            null_cells += 1;
            alpha.extend(std::iter::repeat_n(0.0, m_count));
        } else {
            alpha.extend(scores.iter().map(|r| r / max));
        }
    }
    if null_cells > 0 {
        log::warn!("{null_cells} head(s) have zero alignment with every expert; routing to nothing");
    }
    Ok(RoutingCoefficients {
        n_experts: m_count,
        n_layers: bank.n_layers,
        n_kv_heads: bank.n_kv_heads,
        raw,
        alpha,
    })
}

/// `Σ_m alpha_m U_m U_mᵀ` at one head.
pub fn dynamic_projection(
    alpha: &RoutingCoefficients,
    bank: &ExpertBank,
    layer: usize,
    kv_head: usize,
) -> Result<Matrix> {
    if layer >= bank.n_layers || kv_head >= bank.n_kv_heads {
        return Err(invalid(format!("head (layer {layer}, kv-head {kv_head}) is not in the expert bank")));
    }
    if alpha.n_experts != bank.experts.len()
        || alpha.n_layers != bank.n_layers
        || alpha.n_kv_heads != bank.n_kv_heads
    {
        return Err(invalid("routing coefficients do not match the expert bank"));
    }
    let d = bank.d_k();
    let mut p = Matrix::zeros(d, d);
    for (m, &a) in alpha.cell(layer, kv_head).iter().enumerate() {
        if a != 0.0 {
            p = p.add(&bank.entry(m, layer, kv_head).projector().scale(a))?;
        }
    }
    Ok(p)
}

/// Plan with edit matrices `g · P_dyn` built from explicit coefficients.
pub fn adaseka_plan_with_coefficients(
    bank: &ExpertBank,
    selection: &HeadSelection,
    alpha: &RoutingCoefficients,
    g: f64,
    mask: BTreeSet<usize>,
) -> Result<EditPlan> {
    if !g.is_finite() {
        return Err(invalid(format!("gain must be finite, got {g}")));
    }
    check_selection(bank.fingerprint, bank.n_layers, bank.n_kv_heads, selection, &mask)?;
    let entries = selection
        .selected
        .iter()
        .map(|&(layer, kv_head)| {
            Ok(PlanEntry {
                layer,
                kv_head,
                matrix: dynamic_projection(alpha, bank, layer, kv_head)?.scale(g),
            })
        })
        .collect::<Result<_>>()?;
    Ok(EditPlan {
        fingerprint: bank.fingerprint,
        entries,
        mask,
        kind: PlanKind::Adaptive { g },
    })
}

/// Routes on the prompt's last-token group-mean queries and builds the
/// prompt-specific plan.
pub fn adaseka_plan(
    model: &ToyModel,
    seq: &TokenSequence,
    bank: &ExpertBank,
    selection: &HeadSelection,
    g: f64,
    mask: BTreeSet<usize>,
) -> Result<(EditPlan, RoutingCoefficients)> {
    if model.fingerprint() != bank.fingerprint {
        return Err(SekaError::InvalidPlan(format!(
            "expert bank fingerprint {:016x} does not match model {:016x}",
            bank.fingerprint,
            model.fingerprint()
        )));
    }
    let queries = model.capture_last_query(seq)?;
    let alpha = route_coefficients(&queries, bank)?;
    let plan = adaseka_plan_with_coefficients(bank, selection, &alpha, g, mask)?;
    Ok((plan, alpha))
}
