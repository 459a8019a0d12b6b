// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic toy decoder-only transformer with grouped-query attention.
//!
//! The model exists to produce key and query embeddings with realistic
//! structure (causal mixing, per-head projections, shared KV heads) and to
//! run steered forward passes through a key-edit hook. Weights are never
//! trained: they are regenerated bit-for-bit from `(config, seed)`.
//!
//! ## Attention path
//!
//! Attention is computed one query row at a time into a scratch buffer of
//! length `T`; the `T x T` score matrix only exists when a caller asks for
//! it through [`CaptureFlags::attn_logits`] or [`CaptureFlags::attn_weights`].
//! Key edits from an [`EditPlan`] are applied to the key vectors before any
//! score is formed.

mod tokenizer;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SekaError};
use crate::linalg::{dot, Matrix};
use crate::steering::EditPlan;

pub use tokenizer::{fnv1a64, token_id, tokenize, TokenSequence, VOCAB_SIZE};
pub(crate) use tokenizer::is_punctuation;

/// Feed-forward width as a multiple of `d_model`.
pub const FFN_MULTIPLIER: usize = 4;

const RMS_EPS: f64 = 1e-6;

/// Shape and seed of a [`ToyModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_query_heads", self.n_query_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(SekaError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !self.n_query_heads.is_multiple_of(self.n_kv_heads) {
            return Err(SekaError::InvalidConfig(format!(
                "n_query_heads {} is not divisible by n_kv_heads {}",
                self.n_query_heads, self.n_kv_heads
            )));
        }
        if self.d_model != self.n_query_heads * self.d_k {
            return Err(SekaError::InvalidConfig(format!(
                "d_model {} != n_query_heads {} x d_k {}",
                self.d_model, self.n_query_heads, self.d_k
            )));
        }
        Ok(())
    }

    /// Query heads sharing one KV head.
    pub fn group_size(&self) -> usize {
        self.n_query_heads / self.n_kv_heads
    }

    /// FNV-1a of the canonical JSON encoding (fields in declaration order).
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        fnv1a64(json.as_bytes())
    }
}

/// Which weight matrix a random stream feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum Role {
    Query = 1,
    Key = 2,
    Value = 3,
    Output = 4,
    FfnUp = 5,
    FfnDown = 6,
    Embedding = 7,
}

fn stream(seed: u64, layer: u64, role: Role) -> SplitMix64 {
    let mut bytes = [0u8; 17];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&layer.to_le_bytes());
    bytes[16] = role as u8;
    SplitMix64::seed_from_u64(fnv1a64(&bytes))
}

fn xavier(seed: u64, layer: usize, role: Role, fan_in: usize, fan_out: usize) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = stream(seed, layer as u64, role);
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-a..=a))
}

#[derive(Debug, Clone, PartialEq)]
struct LayerWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w_up: Matrix,
    w_down: Matrix,
    attn_norm: Vec<f64>,
    ffn_norm: Vec<f64>,
}

/// The toy backbone. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    fingerprint: u64,
    layers: Vec<LayerWeights>,
    final_norm: Vec<f64>,
    table: EmbeddingCache,
}

/// Lazily materialized embedding table. A pure function of the config, so
/// it takes no part in equality.
#[derive(Clone, Default)]
struct EmbeddingCache(Arc<OnceLock<Vec<f64>>>);

impl PartialEq for EmbeddingCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl std::fmt::Debug for EmbeddingCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("EmbeddingCache")
    }
}

/// What a forward pass should record besides the next-token scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CaptureFlags {
    /// Unedited keys for every (layer, kv-head, position).
    pub keys: bool,
    /// Group-mean query of the final position per (layer, kv-head).
    pub last_queries: bool,
    /// Queries for every (layer, query-head, position).
    pub queries: bool,
    /// Final-row softmax weights per (layer, query-head). `O(T)` per head.
    pub last_row_weights: bool,
    /// Full pre-softmax score maps. Debug only: allocates `T x T` per head.
    pub attn_logits: bool,
    /// Full softmax weight maps. Debug only: allocates `T x T` per head.
    pub attn_weights: bool,
}

impl CaptureFlags {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn keys() -> Self {
        Self {
            keys: true,
            ..Self::default()
        }
    }

    /// Everything, including the debug attention maps.
    pub fn debug() -> Self {
        Self {
            keys: true,
            last_queries: true,
            queries: true,
            last_row_weights: true,
            attn_logits: true,
            attn_weights: true,
        }
    }
}

/// Per-(layer, head, position) vectors stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensor {
    n_layers: usize,
    n_heads: usize,
    seq_len: usize,
    dim: usize,
    data: Vec<f64>,
}

impl HeadTensor {
    fn zeros(n_layers: usize, n_heads: usize, seq_len: usize, dim: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            seq_len,
            dim,
            data: vec![0.0; n_layers * n_heads * seq_len * dim],
        }
    }

    fn offset(&self, layer: usize, head: usize, pos: usize) -> usize {
        ((layer * self.n_heads + head) * self.seq_len + pos) * self.dim
    }

    pub fn get(&self, layer: usize, head: usize, pos: usize) -> &[f64] {
        let o = self.offset(layer, head, pos);
        &self.data[o..o + self.dim]
    }

    fn get_mut(&mut self, layer: usize, head: usize, pos: usize) -> &mut [f64] {
        let o = self.offset(layer, head, pos);
        &mut self.data[o..o + self.dim]
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Rows `positions` of one head as a matrix.
    pub fn rows(&self, layer: usize, head: usize, positions: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(positions.len() * self.dim);
        for &p in positions {
            data.extend_from_slice(self.get(layer, head, p));
        }
        Matrix::new(positions.len(), self.dim, data).expect("consistent shape")
    }
}

/// Causal `T x T` map for one (layer, query-head); entries above the
/// diagonal are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    seq_len: usize,
    data: Vec<f64>,
}

impl AttentionMap {
    fn zeros(seq_len: usize) -> Self {
        #[cfg(debug_assertions)]
        ATTENTION_MATRIX_ALLOCATIONS.fetch_add(1, Ordering::Relaxed);
        Self {
            seq_len,
            data: vec![0.0; seq_len * seq_len],
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.seq_len + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.seq_len..(i + 1) * self.seq_len]
    }
}

static ATTENTION_MATRIX_ALLOCATIONS: AtomicUsize = AtomicUsize::new(0);

/// Number of `T x T` attention maps allocated so far by this process.
/// Only counts in builds with debug assertions; always 0 otherwise.
pub fn attention_matrix_allocations() -> usize {
    ATTENTION_MATRIX_ALLOCATIONS.load(Ordering::Relaxed)
}

/// Everything a forward pass recorded. Head-indexed vectors are laid out
/// `layer * n_heads + head`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CaptureRecord {
    pub keys: Option<HeadTensor>,
    pub last_queries: Option<Vec<Vec<f64>>>,
    pub queries: Option<HeadTensor>,
    pub last_row_weights: Option<Vec<Vec<f64>>>,
    pub attn_logits: Option<Vec<AttentionMap>>,
    pub attn_weights: Option<Vec<AttentionMap>>,
}

/// Output of [`ToyModel::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Tied-embedding readout at the last position, one score per vocab slot.
    pub next_token_scores: Vec<f64>,
    pub captures: CaptureRecord,
}

/// Keys of a token span for every (layer, kv-head).
#[derive(Debug, Clone, PartialEq)]
pub struct KeyCapture {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    /// `n x d_k` per cell, indexed `layer * n_kv_heads + kv_head`.
    pub cells: Vec<Matrix>,
}

impl KeyCapture {
    pub fn cell(&self, layer: usize, kv_head: usize) -> &Matrix {
        &self.cells[layer * self.n_kv_heads + kv_head]
    }
}

impl ToyModel {
    /// Generates all weights from the config's seed.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let kv_width = config.n_kv_heads * config.d_k;
        let d_ff = FFN_MULTIPLIER * d;
        let layers = (0..config.n_layers)
            .map(|l| LayerWeights {
                wq: xavier(config.seed, l, Role::Query, d, d),
                wk: xavier(config.seed, l, Role::Key, d, kv_width),
                wv: xavier(config.seed, l, Role::Value, d, kv_width),
                wo: xavier(config.seed, l, Role::Output, d, d),
                w_up: xavier(config.seed, l, Role::FfnUp, d, d_ff),
                w_down: xavier(config.seed, l, Role::FfnDown, d_ff, d),
                attn_norm: vec![1.0; d],
                ffn_norm: vec![1.0; d],
            })
            .collect();
        Ok(Self {
            config,
            fingerprint: config.fingerprint(),
            layers,
            final_norm: vec![1.0; d],
            table: EmbeddingCache::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Row `id` of the hashed embedding table, entries uniform in `[-√3, √3]`.
    pub fn embedding(&self, id: u32) -> Vec<f64> {
        let mut rng = stream(self.config.seed, u64::from(id), Role::Embedding);
        let a = 3f64.sqrt();
        (0..self.config.d_model).map(|_| rng.gen_range(-a..=a)).collect()
    }

    fn embedding_table(&self) -> &[f64] {
        self.table.0.get_or_init(|| {
            (0..VOCAB_SIZE as u32)
                .into_par_iter()
                .flat_map_iter(|id| self.embedding(id))
                .collect()
        })
    }

    /// Overwrites the query projection of layer `layer`. Test hook for
    /// constructing models with hand-picked query weights.
    #[doc(hidden)]
    pub fn set_query_weights(&mut self, layer: usize, wq: Matrix) -> Result<()> {
        let d = self.config.d_model;
        if wq.rows() != d || wq.cols() != d || layer >= self.config.n_layers {
            return Err(invalid("query weights do not fit the model"));
        }
        self.layers[layer].wq = wq;
        Ok(())
    }

    /// Query projection of `layer`, `d_model x d_model`.
    pub fn query_weights(&self, layer: usize) -> &Matrix {
        &self.layers[layer].wq
    }

    fn validate_plan(&self, plan: &EditPlan, seq_len: usize) -> Result<()> {
        if plan.fingerprint != self.fingerprint {
            return Err(SekaError::InvalidPlan(format!(
                "plan fingerprint {:016x} does not match model {:016x}",
                plan.fingerprint, self.fingerprint
            )));
        }
        let d_k = self.config.d_k;
        for e in &plan.entries {
            if e.layer >= self.config.n_layers || e.kv_head >= self.config.n_kv_heads {
                return Err(SekaError::InvalidPlan(format!(
                    "plan entry (layer {}, kv-head {}) is outside the model",
                    e.layer, e.kv_head
                )));
            }
            if e.matrix.rows() != d_k || e.matrix.cols() != d_k || !e.matrix.is_finite() {
                return Err(SekaError::InvalidPlan(format!(
                    "plan entry (layer {}, kv-head {}) is not a finite {d_k}x{d_k} matrix",
                    e.layer, e.kv_head
                )));
            }
        }
        if let Some(&p) = plan.mask.iter().next_back() {
            if p >= seq_len {
                return Err(SekaError::InvalidPlan(format!(
                    "mask position {p} is beyond sequence length {seq_len}"
                )));
            }
        }
        Ok(())
    }

    /// Runs the model over `seq`, applying `plan`'s key edits if given.
    pub fn forward(
        &self,
        seq: &TokenSequence,
        plan: Option<&EditPlan>,
        flags: CaptureFlags,
    ) -> Result<ForwardOutput> {
        self.run(seq, plan, flags, true)
    }

    /// [`Self::forward`] without the vocabulary readout; `next_token_scores`
    /// is left empty.
    pub(crate) fn forward_captures(
        &self,
        seq: &TokenSequence,
        plan: Option<&EditPlan>,
        flags: CaptureFlags,
    ) -> Result<ForwardOutput> {
        self.run(seq, plan, flags, false)
    }

    fn run(
        &self,
        seq: &TokenSequence,
        plan: Option<&EditPlan>,
        flags: CaptureFlags,
        readout: bool,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let t_len = seq.len();
        if t_len == 0 {
            return Err(invalid("empty token sequence"));
        }
        if t_len > cfg.max_seq {
            return Err(invalid(format!(
                "sequence of {t_len} tokens exceeds max_seq {}",
                cfg.max_seq
            )));
        }
        if let Some(p) = plan {
            self.validate_plan(p, t_len)?;
        }

        let d = cfg.d_model;
        let d_k = cfg.d_k;
        let n_q = cfg.n_query_heads;
        let n_kv = cfg.n_kv_heads;
        let group = cfg.group_size();
        let kv_width = n_kv * d_k;
        let scale = 1.0 / (d_k as f64).sqrt();

        let mut captures = CaptureRecord::default();
        if flags.keys {
            captures.keys = Some(HeadTensor::zeros(cfg.n_layers, n_kv, t_len, d_k));
        }
        if flags.queries {
            captures.queries = Some(HeadTensor::zeros(cfg.n_layers, n_q, t_len, d_k));
        }
        if flags.last_queries {
            captures.last_queries = Some(Vec::with_capacity(cfg.n_layers * n_kv));
        }
        if flags.last_row_weights {
            captures.last_row_weights = Some(Vec::with_capacity(cfg.n_layers * n_q));
        }
        if flags.attn_logits {
            captures.attn_logits = Some(Vec::with_capacity(cfg.n_layers * n_q));
        }
        if flags.attn_weights {
            captures.attn_weights = Some(Vec::with_capacity(cfg.n_layers * n_q));
        }

        let mut x = vec![0.0; t_len * d];
        for (t, &id) in seq.ids.iter().enumerate() {
            let emb = self.embedding(id);
            let row = &mut x[t * d..(t + 1) * d];
            for (i, (o, e)) in row.iter_mut().zip(&emb).enumerate() {
                *o = e + positional(t, i, d);
            }
        }

        let mut normed = vec![0.0; t_len * d];
        let mut attn_out = vec![0.0; t_len * d];
        let mut scores_row = vec![0.0; t_len];

        for (l, w) in self.layers.iter().enumerate() {
            rms_norm_rows(&x, &w.attn_norm, &mut normed, d);
            let q = project(&normed, t_len, &w.wq);
            let mut k = project(&normed, t_len, &w.wk);
            let v = project(&normed, t_len, &w.wv);

            if let Some(keys) = captures.keys.as_mut() {
                for t in 0..t_len {
                    for h in 0..n_kv {
                        let src = &k[t * kv_width + h * d_k..t * kv_width + (h + 1) * d_k];
                        keys.get_mut(l, h, t).copy_from_slice(src);
                    }
                }
            }
            if let Some(qs) = captures.queries.as_mut() {
                for t in 0..t_len {
                    for h in 0..n_q {
                        let src = &q[t * d + h * d_k..t * d + (h + 1) * d_k];
                        qs.get_mut(l, h, t).copy_from_slice(src);
                    }
                }
            }
            if let Some(lq) = captures.last_queries.as_mut() {
                let last = &q[(t_len - 1) * d..t_len * d];
                for h in 0..n_kv {
                    let mut mean = vec![0.0; d_k];
                    for m in 0..group {
                        let qh = h * group + m;
                        for (o, v) in mean.iter_mut().zip(&last[qh * d_k..(qh + 1) * d_k]) {
                            *o += v;
                        }
                    }
                    for o in mean.iter_mut() {
                        *o /= group as f64;
                    }
                    lq.push(mean);
                }
            }

            if let Some(p) = plan {
                for e in p.entries.iter().filter(|e| e.layer == l) {
                    for &t in &p.mask {
                        let off = t * kv_width + e.kv_head * d_k;
                        let key = &mut k[off..off + d_k];
                        let delta = e.matrix.mul_vec(key)?;
                        for (kv, dv) in key.iter_mut().zip(&delta) {
                            *kv += dv;
                        }
                    }
                }
            }

            attn_out.iter_mut().for_each(|o| *o = 0.0);
            for qh in 0..n_q {
                let kvh = qh / group;
                let mut logit_map = flags.attn_logits.then(|| AttentionMap::zeros(t_len));
                let mut weight_map = flags.attn_weights.then(|| AttentionMap::zeros(t_len));
                for i in 0..t_len {
                    let qi = &q[i * d + qh * d_k..i * d + (qh + 1) * d_k];
                    let row = &mut scores_row[..=i];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &k[j * kv_width + kvh * d_k..j * kv_width + (kvh + 1) * d_k];
                        *s = dot(qi, kj) * scale;
                        max = max.max(*s);
                    }
                    if let Some(m) = logit_map.as_mut() {
                        m.data[i * t_len..i * t_len + i + 1].copy_from_slice(row);
                    }
                    let mut total = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    for s in row.iter_mut() {
                        *s /= total;
                    }
                    if let Some(m) = weight_map.as_mut() {
                        m.data[i * t_len..i * t_len + i + 1].copy_from_slice(row);
                    }
                    if i == t_len - 1 {
                        if let Some(lw) = captures.last_row_weights.as_mut() {
                            lw.push(row.to_vec());
                        }
                    }
                    let out = &mut attn_out[i * d + qh * d_k..i * d + (qh + 1) * d_k];
                    for (j, &wgt) in row.iter().enumerate() {
                        let vj = &v[j * kv_width + kvh * d_k..j * kv_width + (kvh + 1) * d_k];
                        for (o, vv) in out.iter_mut().zip(vj) {
                            *o += wgt * vv;
                        }
                    }
                }
                if let (Some(m), Some(all)) = (logit_map, captures.attn_logits.as_mut()) {
                    all.push(m);
                }
                if let (Some(m), Some(all)) = (weight_map, captures.attn_weights.as_mut()) {
                    all.push(m);
                }
            }

            let o = project(&attn_out, t_len, &w.wo);
            for (xv, ov) in x.iter_mut().zip(&o) {
                *xv += ov;
            }

            rms_norm_rows(&x, &w.ffn_norm, &mut normed, d);
            let mut hidden = project(&normed, t_len, &w.w_up);
            hidden.iter_mut().for_each(|h| *h = gelu(*h));
            let f = project(&hidden, t_len, &w.w_down);
            for (xv, fv) in x.iter_mut().zip(&f) {
                *xv += fv;
            }
        }

        let next_token_scores = if readout {
            let mut last = vec![0.0; d];
            rms_norm_rows(&x[(t_len - 1) * d..], &self.final_norm, &mut last, d);
            self.embedding_table()
                .par_chunks_exact(d)
                .map(|row| dot(row, &last))
                .collect()
        } else {
            Vec::new()
        };

        Ok(ForwardOutput {
            next_token_scores,
            captures,
        })
    }

    /// Unedited keys at `positions` for every (layer, kv-head).
    pub fn capture_keys(&self, seq: &TokenSequence, positions: &[usize]) -> Result<KeyCapture> {
        if let Some(&p) = positions.iter().find(|&&p| p >= seq.len()) {
            return Err(invalid(format!(
                "span position {p} is outside a sequence of {} tokens",
                seq.len()
            )));
        }
        let out = self.forward_captures(seq, None, CaptureFlags::keys())?;
        let keys = out.captures.keys.expect("keys were requested");
        let cfg = &self.config;
        let cells = (0..cfg.n_layers)
            .flat_map(|l| (0..cfg.n_kv_heads).map(move |h| (l, h)))
            .map(|(l, h)| keys.rows(l, h, positions))
            .collect();
        Ok(KeyCapture {
            n_layers: cfg.n_layers,
            n_kv_heads: cfg.n_kv_heads,
            cells,
        })
    }

    /// Final-position query per (layer, kv-head), averaged over the query
    /// heads of each KV group. Indexed `layer * n_kv_heads + kv_head`.
    pub fn capture_last_query(&self, seq: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        let flags = CaptureFlags {
            last_queries: true,
            ..CaptureFlags::default()
        };
        let out = self.forward_captures(seq, None, flags)?;
        Ok(out.captures.last_queries.expect("last queries were requested"))
    }
}

fn positional(t: usize, i: usize, d: usize) -> f64 {
    let pair = (i / 2) as f64;
    let angle = t as f64 / 10000f64.powf(2.0 * pair / d as f64);
    if i.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

fn rms_norm_rows(x: &[f64], scale: &[f64], out: &mut [f64], d: usize) {
    for (src, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let ms = src.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for ((o, v), s) in dst.iter_mut().zip(src).zip(scale) {
            *o = v * inv * s;
        }
    }
}

/// `input (rows x in) · w (in x out)`.
fn project(input: &[f64], rows: usize, w: &Matrix) -> Vec<f64> {
    let (n_in, n_out) = (w.rows(), w.cols());
    let mut out = vec![0.0; rows * n_out];
    for r in 0..rows {
        let src = &input[r * n_in..(r + 1) * n_in];
        let dst = &mut out[r * n_out..(r + 1) * n_out];
        for (k, &a) in src.iter().enumerate() {
            for (o, &b) in dst.iter_mut().zip(w.row(k)) {
                *o += a * b;
            }
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Attention-matrix row rescaling used by post-hoc steering baselines:
/// highlighted entries are multiplied by `alpha`, then the row is
/// renormalized to sum to 1.
pub fn pasta_row_transform(
    row: &[f64],
    highlight: &std::collections::BTreeSet<usize>,
    alpha: f64,
) -> Result<Vec<f64>> {
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(invalid(format!("alpha must be positive, got {alpha}")));
    }
    if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(invalid("attention row entries must be finite and nonnegative"));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("attention row sums to {sum}, not 1")));
    }
    if let Some(&j) = highlight.iter().next_back() {
        if j >= row.len() {
            return Err(invalid(format!("highlight index {j} outside row of {}", row.len())));
        }
    }
    if highlight.is_empty() || alpha == 1.0 {
        return Ok(row.to_vec());
    }
    let c: f64 = row
        .iter()
        .enumerate()
        .map(|(j, a)| if highlight.contains(&j) { alpha * a } else { *a })
        .sum();
    Ok(row
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let s = if highlight.contains(&j) { alpha * a } else { *a };
            s / c
        })
        .collect())
}
