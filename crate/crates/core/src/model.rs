//! A small seeded decoder-only transformer.
//!
//! Pre-norm blocks (RMS normalization, multi-head attention with RoPE,
//! SiLU-gated feed-forward), byte-level vocabulary, untied output head.
//! `forward` accepts arbitrary position indices, an injected past cache and
//! an optional dense mask, which is everything the reuse pipelines need.
//!
//! # Checkpoint format
//!
//! All integers and floats little-endian.
//!
//! ```text
//! magic     b"FTNY"
//! version   u32 (= 1)
//! layers    u32
//! heads     u32
//! head_dim  u32
//! hidden    u32   (must equal heads * head_dim)
//! vocab     u32
//! ffn_mult  u32
//! seed      u64
//! rope_base f64
//! weights   f32 * N, in this order:
//!   embed                    vocab x hidden
//!   per layer:
//!     attn_norm              hidden
//!     wq, wk, wv, wo         hidden x hidden (row-major, out x in)
//!     ffn_norm               hidden
//!     w_gate, w_up           ffn x hidden
//!     w_down                 hidden x ffn
//!   final_norm               hidden
//!   lm_head                  vocab x hidden
//! ```

use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kv::{AttnMask, LayeredKV};
use crate::rope::{RotationFrequencies, DEFAULT_BASE};
use crate::tensor::{dot, matvec, rms_norm, silu};

pub const INIT_STD: f32 = 0.02;
const NORM_EPS: f32 = 1e-5;
const CHECKPOINT_MAGIC: &[u8; 4] = b"FTNY";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub ffn_mult: usize,
    pub seed: u64,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            head_dim: 16,
            vocab: 256,
            ffn_mult: 4,
            seed: 0,
            rope_base: DEFAULT_BASE,
        }
    }
}

impl ModelConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.hidden()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be positive".into()));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be positive".into()));
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if self.vocab < 2 {
            return Err(Error::Config(format!("vocab must be >= 2, got {}", self.vocab)));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be positive".into()));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(Error::Config("rope_base must be positive".into()));
        }
        Ok(())
    }

    /// Bytes of K+V for one token across all layers.
    pub fn kv_bytes_per_token(&self) -> u64 {
        (self.layers * self.hidden() * 2 * std::mem::size_of::<f32>()) as u64
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    attn_norm: Vec<f32>,
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    ffn_norm: Vec<f32>,
    w_gate: Vec<f32>,
    w_up: Vec<f32>,
    w_down: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    freqs: RotationFrequencies,
    embed: Vec<f32>,
    layers: Vec<LayerWeights>,
    final_norm: Vec<f32>,
    lm_head: Vec<f32>,
}

/// Logits for every input token plus the cache extended by those tokens.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f32>,
    pub kv: LayeredKV,
}

impl ForwardOutput {
    pub fn logits_row(&self, vocab: usize, row: usize) -> &[f32] {
        &self.logits[row * vocab..(row + 1) * vocab]
    }
}

/// Instrumentation captured by [`Model::forward_traced`].
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    /// Post-RoPE queries per layer, `(tokens x heads x head_dim)`.
    pub queries: Vec<Vec<f32>>,
    /// Largest |sum(weights) - 1| over every softmax row.
    pub max_row_sum_error: f32,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let freqs = RotationFrequencies::new(cfg.head_dim, cfg.rope_base)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| normal.sample(&mut rng)).collect() };
        let h = cfg.hidden();
        let f = cfg.ffn_hidden();
        let embed = draw(cfg.vocab * h);
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let wq = draw(h * h);
            let wk = draw(h * h);
            let wv = draw(h * h);
            let wo = draw(h * h);
            let w_gate = draw(f * h);
            let w_up = draw(f * h);
            let w_down = draw(h * f);
            layers.push(LayerWeights {
                attn_norm: vec![1.0; h],
                wq,
                wk,
                wv,
                wo,
                ffn_norm: vec![1.0; h],
                w_gate,
                w_up,
                w_down,
            });
        }
        let lm_head = draw(cfg.vocab * h);
        Ok(Self {
            cfg,
            freqs,
            embed,
            layers,
            final_norm: vec![1.0; h],
            lm_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn freqs(&self) -> &RotationFrequencies {
        &self.freqs
    }

    pub fn empty_kv(&self) -> LayeredKV {
        LayeredKV::empty(self.cfg.layers, self.cfg.heads, self.cfg.head_dim)
    }

    /// SHA-256 over the checkpoint byte image.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    fn weight_slices(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![&self.embed];
        for l in &self.layers {
            out.extend([
                l.attn_norm.as_slice(),
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.ffn_norm,
                &l.w_gate,
                &l.w_up,
                &l.w_down,
            ]);
        }
        out.push(&self.final_norm);
        out.push(&self.lm_head);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.cfg;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [c.layers, c.heads, c.head_dim, c.hidden(), c.vocab, c.ffn_mult] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&c.rope_base.to_le_bytes());
        for s in self.weight_slices() {
            for x in s {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::bytes::Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { expected: "FTNY" });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { expected: CHECKPOINT_VERSION, found: version });
        }
        let layers = r.u32()? as usize;
        let heads = r.u32()? as usize;
        let head_dim = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let vocab = r.u32()? as usize;
        let ffn_mult = r.u32()? as usize;
        let seed = r.u64()?;
        let rope_base = r.f64()?;
        let cfg = ModelConfig { layers, heads, head_dim, vocab, ffn_mult, seed, rope_base };
        cfg.validate()?;
        if hidden != cfg.hidden() {
            return Err(Error::Config(format!(
                "hidden {hidden} != heads * head_dim = {}",
                cfg.hidden()
            )));
        }
        let h = hidden;
        let f = cfg.ffn_hidden();
        let embed = r.f32s(vocab * h)?;
        let mut ls = Vec::with_capacity(layers);
        for _ in 0..layers {
            ls.push(LayerWeights {
                attn_norm: r.f32s(h)?,
                wq: r.f32s(h * h)?,
                wk: r.f32s(h * h)?,
                wv: r.f32s(h * h)?,
                wo: r.f32s(h * h)?,
                ffn_norm: r.f32s(h)?,
                w_gate: r.f32s(f * h)?,
                w_up: r.f32s(f * h)?,
                w_down: r.f32s(h * f)?,
            });
        }
        let final_norm = r.f32s(h)?;
        let lm_head = r.f32s(vocab * h)?;
        Ok(Self {
            freqs: RotationFrequencies::new(cfg.head_dim, cfg.rope_base)?,
            cfg,
            embed,
            layers: ls,
            final_norm,
            lm_head,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// One model step over `tokens` at `positions` against `past`.
    ///
    /// Without a mask each query sees every key (past or new) whose
    /// position is `<=` its own. A mask, when given, is
    /// `(tokens x (past.len() + tokens))` with past keys first.
    pub fn forward(
        &self,
        tokens: &[u32],
        positions: &[u32],
        past: &LayeredKV,
        mask: Option<&AttnMask>,
    ) -> Result<ForwardOutput> {
        let (logits, fresh, _) = self.run_dense(tokens, positions, past, mask, false)?;
        let mut kv = past.clone();
        kv.extend_from(&fresh)?;
        Ok(ForwardOutput { logits, kv })
    }

    /// Like [`forward`](Self::forward) but extends `kv` in place and returns logits.
    pub fn forward_append(
        &self,
        tokens: &[u32],
        positions: &[u32],
        kv: &mut LayeredKV,
        mask: Option<&AttnMask>,
    ) -> Result<Vec<f32>> {
        let (logits, fresh, _) = self.run_dense(tokens, positions, kv, mask, false)?;
        kv.extend_from(&fresh)?;
        Ok(logits)
    }

    pub fn forward_traced(
        &self,
        tokens: &[u32],
        positions: &[u32],
        past: &LayeredKV,
        mask: Option<&AttnMask>,
    ) -> Result<(ForwardOutput, ForwardTrace)> {
        let (logits, fresh, trace) = self.run_dense(tokens, positions, past, mask, true)?;
        let mut kv = past.clone();
        kv.extend_from(&fresh)?;
        Ok((ForwardOutput { logits, kv }, trace.unwrap_or_default()))
    }

    /// K/V of `tokens` for the first `n_layers` layers only.
    pub fn prefill_kv(
        &self,
        tokens: &[u32],
        positions: &[u32],
        past: &LayeredKV,
        n_layers: usize,
    ) -> Result<LayeredKV> {
        let n_layers = n_layers.min(self.cfg.layers);
        let mut backend = DenseBackend::new(self, positions, past, None, false)?;
        self.run_layers(tokens, positions, &mut backend, n_layers)?;
        let mut fresh = backend.fresh;
        fresh.truncate_layers(n_layers);
        fresh.push_positions(positions);
        Ok(fresh)
    }

    /// Post-RoPE queries of the final attention layer for `tokens`, shape
    /// `(tokens x heads x head_dim)`. `past` is not modified.
    pub fn last_layer_query_states(
        &self,
        tokens: &[u32],
        positions: &[u32],
        past: &LayeredKV,
    ) -> Result<Vec<f32>> {
        let mut backend = DenseBackend::new(self, positions, past, None, false)?;
        backend.capture_layer = Some(self.cfg.layers - 1);
        self.run_layers(tokens, positions, &mut backend, self.cfg.layers)?;
        Ok(backend.captured.take().unwrap_or_default())
    }

    fn run_dense(
        &self,
        tokens: &[u32],
        positions: &[u32],
        past: &LayeredKV,
        mask: Option<&AttnMask>,
        traced: bool,
    ) -> Result<(Vec<f32>, LayeredKV, Option<ForwardTrace>)> {
        let mut backend = DenseBackend::new(self, positions, past, mask, traced)?;
        let hidden = self.run_layers(tokens, positions, &mut backend, self.cfg.layers)?;
        let logits = self.logits(&hidden);
        let mut fresh = backend.fresh;
        fresh.push_positions(positions);
        Ok((logits, fresh, backend.trace))
    }

    fn embed_tokens(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        let h = self.cfg.hidden();
        let mut x = Vec::with_capacity(tokens.len() * h);
        for &t in tokens {
            let t = t as usize;
            if t >= self.cfg.vocab {
                return Err(Error::Contract(format!(
                    "token id {t} outside vocabulary of {}",
                    self.cfg.vocab
                )));
            }
            x.extend_from_slice(&self.embed[t * h..(t + 1) * h]);
        }
        Ok(x)
    }

    /// Runs the first `n_layers` blocks, delegating attention to `backend`.
    /// Returns the residual stream `(tokens x hidden)`.
    pub(crate) fn run_layers<B: AttentionBackend>(
        &self,
        tokens: &[u32],
        positions: &[u32],
        backend: &mut B,
        n_layers: usize,
    ) -> Result<Vec<f32>> {
        if tokens.len() != positions.len() {
            return Err(Error::Contract(format!(
                "{} tokens but {} positions",
                tokens.len(),
                positions.len()
            )));
        }
        let h = self.cfg.hidden();
        let f = self.cfg.ffn_hidden();
        let n = tokens.len();
        let mut x = self.embed_tokens(tokens)?;
        let mut xn = vec![0.0f32; h];
        let mut q = vec![0.0f32; n * h];
        let mut k = vec![0.0f32; n * h];
        let mut v = vec![0.0f32; n * h];
        let mut proj = vec![0.0f32; h];
        let mut gate = vec![0.0f32; f];
        let mut up = vec![0.0f32; f];
        let mut down = vec![0.0f32; h];
        for (l, w) in self.layers.iter().enumerate().take(n_layers) {
            for t in 0..n {
                let row = t * h..(t + 1) * h;
                rms_norm(&x[row.clone()], &w.attn_norm, NORM_EPS, &mut xn);
                matvec(&w.wq, h, h, &xn, &mut q[row.clone()]);
                matvec(&w.wk, h, h, &xn, &mut k[row.clone()]);
                matvec(&w.wv, h, h, &xn, &mut v[row.clone()]);
                let p = positions[t] as i64;
                self.freqs.rotate_heads(&mut q[row.clone()], p)?;
                self.freqs.rotate_heads(&mut k[row.clone()], p)?;
            }
            let attn = backend.attend(l, &q, &k, &v)?;
            for t in 0..n {
                let row = t * h..(t + 1) * h;
                matvec(&w.wo, h, h, &attn[row.clone()], &mut proj);
                for (xi, pi) in x[row.clone()].iter_mut().zip(&proj) {
                    *xi += pi;
                }
                rms_norm(&x[row.clone()], &w.ffn_norm, NORM_EPS, &mut xn);
                matvec(&w.w_gate, f, h, &xn, &mut gate);
                matvec(&w.w_up, f, h, &xn, &mut up);
                for (g, u) in gate.iter_mut().zip(&up) {
                    *g = silu(*g) * u;
                }
                matvec(&w.w_down, h, f, &gate, &mut down);
                for (xi, di) in x[row].iter_mut().zip(&down) {
                    *xi += di;
                }
            }
        }
        Ok(x)
    }

    /// Final norm and output head for every row of the residual stream.
    pub(crate) fn logits(&self, hidden: &[f32]) -> Vec<f32> {
        let h = self.cfg.hidden();
        let vcb = self.cfg.vocab;
        let n = hidden.len() / h;
        let mut out = vec![0.0f32; n * vcb];
        let mut xn = vec![0.0f32; h];
        for t in 0..n {
            rms_norm(&hidden[t * h..(t + 1) * h], &self.final_norm, NORM_EPS, &mut xn);
            matvec(&self.lm_head, vcb, h, &xn, &mut out[t * vcb..(t + 1) * vcb]);
        }
        out
    }

    /// Logits of the last row only.
    pub(crate) fn last_logits(&self, hidden: &[f32]) -> Vec<f32> {
        let h = self.cfg.hidden();
        let n = hidden.len() / h;
        self.logits(&hidden[(n - 1) * h..])
    }
}

/// Attention provider for one layer: receives post-RoPE queries and keys
/// plus values of the tokens being processed, returns `(tokens x hidden)`.
pub(crate) trait AttentionBackend {
    fn attend(&mut self, layer: usize, q: &[f32], k: &[f32], v: &[f32]) -> Result<Vec<f32>>;
}

/// Softmax attention for one query row against an explicit key list.
/// `key`/`value` map a key index to its `(heads x head_dim)` row.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn attend_row<'k>(
    q_row: &[f32],
    heads: usize,
    head_dim: usize,
    visible: &[usize],
    key: impl Fn(usize) -> &'k [f32],
    value: impl Fn(usize) -> &'k [f32],
    scores: &mut Vec<f32>,
    out: &mut [f32],
) -> f32 {
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut worst = 0.0f32;
    for hd in 0..heads {
        let span = hd * head_dim..(hd + 1) * head_dim;
        let qh = &q_row[span.clone()];
        scores.clear();
        for &j in visible {
            scores.push(dot(qh, &key(j)[span.clone()]) * scale);
        }
        let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let mut wsum = 0.0f32;
        for s in scores.iter_mut() {
            *s /= sum;
            wsum += *s;
        }
        worst = worst.max((wsum - 1.0).abs());
        let oh = &mut out[span.clone()];
        oh.iter_mut().for_each(|o| *o = 0.0);
        for (&w, &j) in scores.iter().zip(visible) {
            let vr = &value(j)[span.clone()];
            for (o, &vv) in oh.iter_mut().zip(vr) {
                *o += w * vv;
            }
        }
    }
    worst
}

/// Dense masked multi-head attention over explicit buffers; the reference
/// every sparse path is checked against.
#[allow(clippy::too_many_arguments)]
pub fn dense_masked_attention(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    heads: usize,
    head_dim: usize,
    mask: &AttnMask,
) -> Result<Vec<f32>> {
    let w = heads * head_dim;
    let n_q = q.len() / w;
    let n_k = k.len() / w;
    if mask.rows() != n_q || mask.cols() != n_k || v.len() != k.len() {
        return Err(Error::Contract(format!(
            "mask {}x{} does not fit {n_q} queries and {n_k} keys",
            mask.rows(),
            mask.cols()
        )));
    }
    let mut out = vec![0.0f32; n_q * w];
    let mut scores = Vec::new();
    for i in 0..n_q {
        let visible: Vec<usize> = (0..n_k).filter(|&j| mask.get(i, j)).collect();
        if visible.is_empty() {
            return Err(Error::EmptyMaskRow(i));
        }
        attend_row(
            &q[i * w..(i + 1) * w],
            heads,
            head_dim,
            &visible,
            |j| &k[j * w..(j + 1) * w],
            |j| &v[j * w..(j + 1) * w],
            &mut scores,
            &mut out[i * w..(i + 1) * w],
        );
    }
    Ok(out)
}

/// Dense attention against `past` plus the tokens of the current call.
pub(crate) struct DenseBackend<'a> {
    past: &'a LayeredKV,
    fresh: LayeredKV,
    visible: Vec<Vec<usize>>,
    capture_layer: Option<usize>,
    captured: Option<Vec<f32>>,
    trace: Option<ForwardTrace>,
}

impl<'a> DenseBackend<'a> {
    fn new(
        model: &Model,
        positions: &[u32],
        past: &'a LayeredKV,
        mask: Option<&AttnMask>,
        traced: bool,
    ) -> Result<Self> {
        let cfg = &model.cfg;
        if past.num_layers() != cfg.layers || past.row_width() != cfg.hidden() {
            return Err(Error::Contract("past cache geometry does not match the model".into()));
        }
        let p = past.len();
        let n = positions.len();
        let visible = match mask {
            Some(m) => {
                if m.rows() != n || m.cols() != p + n {
                    return Err(Error::Contract(format!(
                        "mask is {}x{}, expected {}x{}",
                        m.rows(),
                        m.cols(),
                        n,
                        p + n
                    )));
                }
                (0..n)
                    .map(|i| (0..p + n).filter(|&j| m.get(i, j)).collect::<Vec<_>>())
                    .collect::<Vec<_>>()
            }
            None => {
                let mut seen: HashSet<u32> = past.positions().iter().copied().collect();
                for &pos in positions {
                    if !seen.insert(pos) {
                        return Err(Error::PositionCollision(pos));
                    }
                }
                let past_pos = past.positions();
                positions
                    .iter()
                    .map(|&qp| {
                        past_pos
                            .iter()
                            .chain(positions)
                            .enumerate()
                            .filter(|(_, &kp)| kp <= qp)
                            .map(|(j, _)| j)
                            .collect()
                    })
                    .collect()
            }
        };
        if let Some(row) = visible.iter().position(|v| v.is_empty()) {
            return Err(Error::EmptyMaskRow(row));
        }
        Ok(Self {
            past,
            fresh: LayeredKV::empty(cfg.layers, cfg.heads, cfg.head_dim),
            visible,
            capture_layer: None,
            captured: None,
            trace: traced.then(ForwardTrace::default),
        })
    }
}

impl AttentionBackend for DenseBackend<'_> {
    fn attend(&mut self, layer: usize, q: &[f32], k: &[f32], v: &[f32]) -> Result<Vec<f32>> {
        let heads = self.past.heads();
        let hd = self.past.head_dim();
        let w = heads * hd;
        let n = q.len() / w;
        self.fresh.push_layer_rows(layer, k, v);
        if self.capture_layer == Some(layer) {
            self.captured = Some(q.to_vec());
        }
        if let Some(t) = self.trace.as_mut() {
            t.queries.push(q.to_vec());
        }
        let p = self.past.len();
        let past_l = self.past.layer(layer);
        let fresh_l = self.fresh.layer(layer);
        let key = |j: usize| -> &[f32] {
            if j < p {
                &past_l.k[j * w..(j + 1) * w]
            } else {
                &fresh_l.k[(j - p) * w..(j - p + 1) * w]
            }
        };
        let value = |j: usize| -> &[f32] {
            if j < p {
                &past_l.v[j * w..(j + 1) * w]
            } else {
                &fresh_l.v[(j - p) * w..(j - p + 1) * w]
            }
        };
        let mut out = vec![0.0f32; n * w];
        let mut scores = Vec::new();
        let mut worst = 0.0f32;
        for i in 0..n {
            let err = attend_row(
                &q[i * w..(i + 1) * w],
                heads,
                hd,
                &self.visible[i],
                key,
                value,
                &mut scores,
                &mut out[i * w..(i + 1) * w],
            );
            worst = worst.max(err);
        }
        if let Some(t) = self.trace.as_mut() {
            t.max_row_sum_error = t.max_row_sum_error.max(worst);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small() -> Model {
        Model::new(ModelConfig { layers: 2, heads: 2, head_dim: 8, seed: 11, ..Default::default() })
            .unwrap()
    }

    fn rand_tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
        (0..n).map(|_| rng.random_range(0..256u32)).collect()
    }

    #[test]
    fn same_seed_same_checksum() {
        let a = Model::new(ModelConfig::with_seed(5)).unwrap();
        let b = Model::new(ModelConfig::with_seed(5)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = Model::new(ModelConfig::with_seed(6)).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let odd = ModelConfig { head_dim: 15, ..Default::default() };
        assert!(matches!(Model::new(odd), Err(Error::Config(_))));
        let tiny_vocab = ModelConfig { vocab: 1, ..Default::default() };
        assert!(Model::new(tiny_vocab).is_err());
        let no_layers = ModelConfig { layers: 0, ..Default::default() };
        assert!(Model::new(no_layers).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = small();
        let bytes = m.to_bytes();
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert_eq!(back.config(), m.config());
        assert!(matches!(
            Model::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Model::from_bytes(&bad), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn empty_call_is_identity() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let toks = rand_tokens(&mut rng, 5);
        let pos: Vec<u32> = (1..=5).collect();
        let past = m.forward(&toks, &pos, &m.empty_kv(), None).unwrap().kv;
        let out = m.forward(&[], &[], &past, None).unwrap();
        assert!(out.logits.is_empty());
        assert_eq!(out.kv, past);
    }

    #[test]
    fn appends_one_entry_per_token_per_layer() {
        let m = small();
        let out = m.forward(&[1, 2, 3], &[1, 2, 3], &m.empty_kv(), None).unwrap();
        assert_eq!(out.kv.len(), 3);
        for l in 0..2 {
            assert_eq!(out.kv.layer(l).k.len(), 3 * 16);
        }
        assert_eq!(out.logits.len(), 3 * 256);
    }

    #[test]
    fn position_collision_is_rejected() {
        let m = small();
        let past = m.forward(&[1, 2], &[1, 2], &m.empty_kv(), None).unwrap().kv;
        assert!(matches!(
            m.forward(&[3], &[2], &past, None),
            Err(Error::PositionCollision(2))
        ));
        assert!(matches!(
            m.forward(&[3, 4], &[5, 5], &past, None),
            Err(Error::PositionCollision(5))
        ));
    }

    #[test]
    fn all_false_mask_row_is_rejected() {
        let m = small();
        let mut mask = AttnMask::new(2, 2, true);
        mask.set(1, 0, false);
        mask.set(1, 1, false);
        assert!(matches!(
            m.forward(&[1, 2], &[1, 2], &m.empty_kv(), Some(&mask)),
            Err(Error::EmptyMaskRow(1))
        ));
    }

    #[test]
    fn prefill_equals_token_by_token_decode() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let toks = rand_tokens(&mut rng, 40);
        let pos: Vec<u32> = (1..=40).collect();
        let full = m.forward(&toks, &pos, &m.empty_kv(), None).unwrap();
        let mut kv = m.empty_kv();
        let mut last = Vec::new();
        for (t, p) in toks.iter().zip(&pos) {
            last = m.forward_append(&[*t], &[*p], &mut kv, None).unwrap();
        }
        assert!(full.kv.max_abs_diff(&kv) <= 1e-5);
        let tail = full.logits_row(256, 39);
        for (a, b) in tail.iter().zip(&last) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_logits_are_finite() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let toks = rand_tokens(&mut rng, 30);
        let pos: Vec<u32> = (1..=30).collect();
        let (out, trace) = m.forward_traced(&toks, &pos, &m.empty_kv(), None).unwrap();
        assert!(trace.max_row_sum_error <= 1e-6);
        assert!(out.logits.iter().all(|x| x.is_finite()));
        assert_eq!(trace.queries.len(), 2);
    }

    #[test]
    fn query_states_match_instrumented_forward() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ctx = rand_tokens(&mut rng, 12);
        let past = m.forward(&ctx, &(1..=12).collect::<Vec<_>>(), &m.empty_kv(), None).unwrap().kv;
        let q = rand_tokens(&mut rng, 3);
        let qpos = [13, 14, 15];
        let states = m.last_layer_query_states(&q, &qpos, &past).unwrap();
        let (_, trace) = m.forward_traced(&q, &qpos, &past, None).unwrap();
        assert_eq!(states.len(), 3 * 16);
        let want = trace.queries.last().unwrap();
        for (a, b) in states.iter().zip(want) {
            assert!((a - b).abs() <= 1e-6);
        }
        let single = m.last_layer_query_states(&q[..1], &qpos[..1], &past).unwrap();
        assert_eq!(single.len(), 2 * 8);
    }

    #[test]
    fn final_layer_values_do_not_reach_final_queries() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ctx = rand_tokens(&mut rng, 10);
        let past = m.forward(&ctx, &(1..=10).collect::<Vec<_>>(), &m.empty_kv(), None).unwrap().kv;
        let base = m.last_layer_query_states(&[7, 8], &[11, 12], &past).unwrap();
        // rebuild the cache with the final layer's V scrambled
        let last = past.num_layers() - 1;
        let mut layers: Vec<_> = past.layers().to_vec();
        layers[last].v.iter_mut().for_each(|x| *x = -*x * 3.0 + 0.5);
        let perturbed =
            LayeredKV::from_parts(layers, past.positions().to_vec(), past.heads(), past.head_dim())
                .unwrap();
        let again = m.last_layer_query_states(&[7, 8], &[11, 12], &perturbed).unwrap();
        assert_eq!(base, again);
    }
}
