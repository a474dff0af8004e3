//! Online stage: stitching cached chunks, measuring KV deviation, picking
//! critical tokens and running the sparse prefill plus greedy decoding.
//!
//! Positions are 1-based. The system prompt occupies `1..=|S|`, retrieved
//! chunks follow back to back and the question comes last.

use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{ChunkId, KnowledgeBase};
use crate::error::{Error, Result};
use crate::kv::LayeredKV;
use crate::kv_store::{ChunkKVRecord, ChunkMatch, KvStore, RecordHandle};
use crate::model::{AttentionBackend, Model};
use crate::preprocessing::SystemPromptKV;
use crate::rope::RotationFrequencies;
use crate::sparse_attention::{attend_sparse, q_sparse_attn, ExclusivePage, QIndexPlan};
use crate::tensor::{argmax, softmax_in_place};

/// Greedy decoding stops after emitting this token (a newline).
pub const STOP_TOKEN: u32 = b'\n' as u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextChunk {
    pub id: ChunkId,
    pub tokens: Vec<u32>,
}

/// `cat(S, C_1..C_n, Q)` with consecutive 1-based positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledContext {
    pub system: Vec<u32>,
    pub chunks: Vec<ContextChunk>,
    pub question: Vec<u32>,
}

impl AssembledContext {
    pub fn new(system: Vec<u32>, chunks: Vec<ContextChunk>, question: Vec<u32>) -> Result<Self> {
        if question.is_empty() {
            return Err(Error::EmptyInput("question"));
        }
        if chunks.iter().any(|c| c.tokens.is_empty()) {
            return Err(Error::EmptyInput("chunk tokens"));
        }
        Ok(Self { system, chunks, question })
    }

    /// Context built from knowledge-base chunks in the given order.
    pub fn from_ids(
        kb: &KnowledgeBase,
        system: &[u32],
        ids: &[ChunkId],
        question: &[u32],
    ) -> Result<Self> {
        let chunks = ids
            .iter()
            .map(|id| {
                let c = kb.require(id)?;
                Ok(ContextChunk { id: *id, tokens: c.tokens.clone() })
            })
            .collect::<Result<_>>()?;
        Self::new(system.to_vec(), chunks, question.to_vec())
    }

    pub fn chunk_ids(&self) -> Vec<ChunkId> {
        self.chunks.iter().map(|c| c.id).collect()
    }

    /// `|S| + sum |C_i|`.
    pub fn context_len(&self) -> usize {
        self.system.len() + self.chunk_token_count()
    }

    pub fn total_len(&self) -> usize {
        self.context_len() + self.question.len()
    }

    pub fn chunk_token_count(&self) -> usize {
        self.chunks.iter().map(|c| c.tokens.len()).sum()
    }

    /// Position range of every chunk.
    pub fn chunk_ranges(&self) -> Vec<Range<u32>> {
        let mut start = self.system.len() as u32 + 1;
        self.chunks
            .iter()
            .map(|c| {
                let r = start..start + c.tokens.len() as u32;
                start = r.end;
                r
            })
            .collect()
    }

    /// Positions of all chunk tokens, ascending.
    pub fn chunk_positions(&self) -> Vec<u32> {
        let s = self.system.len() as u32;
        (s + 1..=s + self.chunk_token_count() as u32).collect()
    }

    pub fn question_positions(&self) -> Vec<u32> {
        let c = self.context_len() as u32;
        (c + 1..=c + self.question.len() as u32).collect()
    }

    /// Tokens of `S` and the chunks.
    pub fn context_tokens(&self) -> Vec<u32> {
        let mut out = self.system.clone();
        for c in &self.chunks {
            out.extend_from_slice(&c.tokens);
        }
        out
    }

    pub fn all_tokens(&self) -> Vec<u32> {
        let mut out = self.context_tokens();
        out.extend_from_slice(&self.question);
        out
    }

    pub fn token_at(&self, position: u32) -> u32 {
        self.all_tokens()[position as usize - 1]
    }

    /// Index of the chunk holding `position`.
    pub fn chunk_of(&self, position: u32) -> Option<usize> {
        self.chunk_ranges().iter().position(|r| r.contains(&position))
    }
}

/// `cat(KV_S, relocated records...)`: each record's keys are re-rotated so
/// the records sit back to back right after the system prompt.
pub fn stitch_records(
    system: &LayeredKV,
    records: &[&ChunkKVRecord],
    freqs: &RotationFrequencies,
) -> Result<LayeredKV> {
    let mut out = system.clone();
    let mut start = system.len() as u32 + 1;
    for r in records {
        out.extend_from(&r.kv.relocated(start, freqs)?)?;
        start += r.tokens() as u32;
    }
    Ok(out)
}

#[derive(Debug)]
pub struct Stitched {
    pub kv: LayeredKV,
    pub matches: Vec<ChunkMatch>,
    /// Chunks that had no record and were prefilled on the spot.
    pub fallback_prefills: usize,
    pub load_bytes: u64,
    pub load_ticks: u64,
    /// Pins held on the fetched records.
    pub handles: Vec<RecordHandle>,
}

/// Full-reuse cache for `ctx`: fetch every chunk's record and stitch.
/// Unmatched chunks are an error unless `fallback` allows an isolated
/// prefill on the spot.
pub fn stitch_full_reuse(
    ctx: &AssembledContext,
    store: &KvStore,
    sys: &SystemPromptKV,
    model: &Model,
    fallback: bool,
) -> Result<Stitched> {
    if sys.tokens != ctx.system {
        return Err(Error::Contract("system prompt cache does not match the context".into()));
    }
    let ids = ctx.chunk_ids();
    let matches = store.alternative_path_match(&ids);
    let mut owned: Vec<ChunkKVRecord> = Vec::new();
    let mut handles = Vec::new();
    let mut order: Vec<(bool, usize)> = Vec::new();
    let (mut bytes, mut ticks, mut fallback_prefills) = (0u64, 0u64, 0usize);
    for c in &ctx.chunks {
        if matches.iter().any(|m| m.chunk_id == c.id) {
            let f = store.fetch(&c.id)?;
            if f.handle.tokens() != c.tokens.len() {
                return Err(Error::Contract(format!(
                    "record for {} holds {} tokens, chunk has {}",
                    c.id,
                    f.handle.tokens(),
                    c.tokens.len()
                )));
            }
            bytes += f.bytes;
            ticks += f.load_ticks;
            order.push((true, handles.len()));
            handles.push(f.handle);
        } else if fallback {
            let start = sys.next_position();
            let positions: Vec<u32> = (start..start + c.tokens.len() as u32).collect();
            let kv = model.prefill_kv(&c.tokens, &positions, &sys.kv, model.config().layers)?;
            order.push((false, owned.len()));
            owned.push(ChunkKVRecord::new(c.id, kv, crate::kv_store::Variant::Isolated)?);
            fallback_prefills += 1;
        } else {
            return Err(Error::MissingRecord(c.id));
        }
    }
    let recs: Vec<&ChunkKVRecord> = order
        .iter()
        .map(|&(stored, i)| if stored { &*handles[i] } else { &owned[i] })
        .collect();
    let kv = stitch_records(&sys.kv, &recs, model.freqs())?;
    Ok(Stitched { kv, matches, fallback_prefills, load_bytes: bytes, load_ticks: ticks, handles })
}

/// Per-token, per-layer squared K and V differences between two caches.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationMap {
    tokens: usize,
    layers: usize,
    data: Vec<[f32; 2]>,
}

impl DeviationMap {
    pub fn between(a: &LayeredKV, b: &LayeredKV, tokens: usize, layers: usize) -> Self {
        let w = a.row_width();
        let mut data = vec![[0.0f32; 2]; tokens * layers];
        for t in 0..tokens {
            for l in 0..layers {
                let sq = |x: &[f32], y: &[f32]| -> f32 {
                    x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum()
                };
                let (la, lb) = (a.layer(l), b.layer(l));
                let r = t * w..(t + 1) * w;
                data[t * layers + l] =
                    [sq(&la.k[r.clone()], &lb.k[r.clone()]), sq(&la.v[r.clone()], &lb.v[r])];
            }
        }
        Self { tokens, layers, data }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Deviation of token `t` (0-based, position `t + 1`) at layer `l` (0-based).
    pub fn get(&self, t: usize, l: usize, c: DevComponent) -> f32 {
        let [k, v] = self.data[t * self.layers + l];
        match c {
            DevComponent::K => k,
            DevComponent::V => v,
            DevComponent::Both => k + v,
        }
    }

    /// Mean over `positions` at layer `l`.
    pub fn mean(&self, positions: &[u32], l: usize, c: DevComponent) -> f64 {
        if positions.is_empty() {
            return 0.0;
        }
        positions.iter().map(|&p| self.get(p as usize - 1, l, c) as f64).sum::<f64>()
            / positions.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DevComponent {
    #[default]
    K,
    V,
    Both,
}

/// Full-attention K/V of `cat(S, chunks)` for the first `layers` layers.
pub fn full_attention_context_kv(ctx: &AssembledContext, model: &Model, layers: usize) -> Result<LayeredKV> {
    let tokens = ctx.context_tokens();
    let positions: Vec<u32> = (1..=tokens.len() as u32).collect();
    model.prefill_kv(&tokens, &positions, &model.empty_kv(), layers)
}

/// Deviation of the stitched cache from full attention over the first
/// `layers` layers, for every context token.
pub fn kv_deviation(
    ctx: &AssembledContext,
    stitched: &LayeredKV,
    model: &Model,
    layers: usize,
) -> Result<DeviationMap> {
    let layers = layers.min(model.config().layers);
    let fa = full_attention_context_kv(ctx, model, layers)?;
    if stitched.len() < ctx.context_len() {
        return Err(Error::Contract("stitched cache is shorter than the context".into()));
    }
    Ok(DeviationMap::between(&fa, stitched, ctx.context_len(), layers))
}

/// Chosen critical tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalTokenSet {
    /// Sorted global positions.
    pub positions: Vec<u32>,
    /// Positions per retrieved chunk, in context order.
    pub per_chunk: Vec<Vec<u32>>,
    pub ratio: f64,
}

impl CriticalTokenSet {
    pub fn new(ctx: &AssembledContext, mut positions: Vec<u32>, ratio: f64) -> Result<Self> {
        positions.sort_unstable();
        positions.dedup();
        let ranges = ctx.chunk_ranges();
        let mut per_chunk = vec![Vec::new(); ranges.len()];
        for &p in &positions {
            let i = ranges
                .iter()
                .position(|r| r.contains(&p))
                .ok_or_else(|| Error::InvalidPlan(format!("position {p} is not a chunk token")))?;
            per_chunk[i].push(p);
        }
        Ok(Self { positions, per_chunk, ratio })
    }

    pub fn empty(ctx: &AssembledContext) -> Self {
        Self { positions: Vec::new(), per_chunk: vec![Vec::new(); ctx.chunks.len()], ratio: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// `round(r * sum |C_i|)`.
pub fn budget(ctx: &AssembledContext, ratio: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("recomputation ratio {ratio} outside [0, 1]")));
    }
    Ok((ratio * ctx.chunk_token_count() as f64).round() as usize)
}

/// The `k` candidates with the highest scores, lower position first on
/// ties, returned sorted by position.
pub fn top_k(candidates: &[u32], scores: &[f32], k: usize) -> Vec<u32> {
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        scores[*b].total_cmp(&scores[*a]).then(candidates[*a].cmp(&candidates[*b]))
    };
    let k = k.min(idx.len());
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
    }
    let mut out: Vec<u32> = idx[..k].iter().map(|&i| candidates[i]).collect();
    out.sort_unstable();
    out
}

/// Layer used for deviation-based selection: the second one.
pub fn cacheblend_layer(model: &Model) -> usize {
    1.min(model.config().layers - 1)
}

/// Per chunk-token deviation scores at the selection layer.
pub fn cacheblend_scores(ctx: &AssembledContext, dev: &DeviationMap, layer: usize, comp: DevComponent) -> Vec<f32> {
    ctx.chunk_positions().iter().map(|&p| dev.get(p as usize - 1, layer, comp)).collect()
}

/// Deviation-based selection: top `r` of the chunk tokens by second-layer
/// deviation between full attention and full reuse.
pub fn select_cacheblend(
    ctx: &AssembledContext,
    stitched: &LayeredKV,
    model: &Model,
    ratio: f64,
    comp: DevComponent,
) -> Result<CriticalTokenSet> {
    let k = budget(ctx, ratio)?;
    if k == 0 {
        return Ok(CriticalTokenSet { ratio, ..CriticalTokenSet::empty(ctx) });
    }
    let layer = cacheblend_layer(model);
    let dev = kv_deviation(ctx, stitched, model, layer + 1)?;
    let scores = cacheblend_scores(ctx, &dev, layer, comp);
    CriticalTokenSet::new(ctx, top_k(&ctx.chunk_positions(), &scores, k), ratio)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// Softmax over all chunk keys per question token and head.
    #[default]
    JointSoftmax,
    /// Scaled dot products without normalisation.
    Raw,
}

/// Column-summed final-layer attention of the question over chunk keys.
///
/// The question is prefilled against the stitched cache; its final-layer
/// queries are scored against every chunk token's stitched final-layer key.
/// Sums run over question tokens, then heads, in that order.
pub fn query_guided_scores(
    ctx: &AssembledContext,
    stitched: &LayeredKV,
    model: &Model,
    scoring: Scoring,
) -> Result<Vec<f32>> {
    let cfg = model.config();
    let (heads, hd) = (cfg.heads, cfg.head_dim);
    let w = heads * hd;
    let q = model.last_layer_query_states(&ctx.question, &ctx.question_positions(), stitched)?;
    let last = stitched.layer(cfg.layers - 1);
    let chunk_slots: Vec<usize> = ctx.chunk_positions().iter().map(|&p| p as usize - 1).collect();
    let scale = 1.0 / (hd as f32).sqrt();
    let mut cols = vec![0.0f64; chunk_slots.len()];
    let mut row = vec![0.0f32; chunk_slots.len()];
    for i in 0..ctx.question.len() {
        for h in 0..heads {
            let qh = &q[i * w + h * hd..i * w + (h + 1) * hd];
            for (r, &s) in row.iter_mut().zip(&chunk_slots) {
                *r = crate::tensor::dot(qh, &last.k[s * w + h * hd..s * w + (h + 1) * hd]) * scale;
            }
            if scoring == Scoring::JointSoftmax {
                softmax_in_place(&mut row);
            }
            for (c, r) in cols.iter_mut().zip(&row) {
                *c += *r as f64;
            }
        }
    }
    Ok(cols.into_iter().map(|c| c as f32).collect())
}

/// Query-guided selection: top `r` of the chunk tokens by the question's
/// final-layer attention.
pub fn select_query_guided(
    ctx: &AssembledContext,
    stitched: &LayeredKV,
    model: &Model,
    ratio: f64,
    scoring: Scoring,
) -> Result<CriticalTokenSet> {
    let k = budget(ctx, ratio)?;
    if k == 0 {
        return Ok(CriticalTokenSet { ratio, ..CriticalTokenSet::empty(ctx) });
    }
    let scores = query_guided_scores(ctx, stitched, model, scoring)?;
    CriticalTokenSet::new(ctx, top_k(&ctx.chunk_positions(), &scores, k), ratio)
}

struct SparsePrefill<'a> {
    shared: &'a LayeredKV,
    page: ExclusivePage,
    plan: &'a QIndexPlan,
    flops: u64,
}

impl AttentionBackend for SparsePrefill<'_> {
    fn attend(&mut self, layer: usize, q: &[f32], k: &[f32], v: &[f32]) -> Result<Vec<f32>> {
        let out = q_sparse_attn(q, k, v, self.shared, layer, &mut self.page, self.plan)?;
        self.flops += out.flops;
        Ok(out.out)
    }
}

struct SparseDecode<'a> {
    shared: &'a LayeredKV,
    page: &'a mut ExclusivePage,
    stale: &'a [u32],
    position: u32,
    slot: usize,
    flops: u64,
}

impl AttentionBackend for SparseDecode<'_> {
    fn attend(&mut self, layer: usize, q: &[f32], k: &[f32], v: &[f32]) -> Result<Vec<f32>> {
        self.page.write_slot(layer, self.slot, k, v);
        let out = attend_sparse(q, &[self.position], self.shared, layer, self.stale, self.page);
        self.flops += out.flops;
        Ok(out.out)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseOutcome {
    pub answer: Vec<u32>,
    pub first_logits: Vec<f32>,
    pub flops: u64,
    /// Tokens pushed through the model in the prefill (critical + question).
    pub computed_tokens: usize,
    pub prefill_secs: f64,
    pub decode_secs: f64,
}

fn sparse_prefill(
    ctx: &AssembledContext,
    stitched: &LayeredKV,
    model: &Model,
    crit: &CriticalTokenSet,
) -> Result<(QIndexPlan, Vec<f32>, ExclusivePage, u64)> {
    let cfg = model.config();
    let plan = QIndexPlan::new(&crit.positions, &ctx.question_positions())?;
    let all = ctx.all_tokens();
    let tokens: Vec<u32> = plan.q_indices().iter().map(|&p| all[p as usize - 1]).collect();
    let mut prefill = SparsePrefill {
        shared: stitched,
        page: ExclusivePage::for_plan(&plan, cfg.layers, cfg.heads, cfg.head_dim),
        plan: &plan,
        flops: 0,
    };
    let hidden = model.run_layers(&tokens, plan.q_indices(), &mut prefill, cfg.layers)?;
    let SparsePrefill { page, flops, .. } = prefill;
    Ok((plan, hidden, page, flops))
}

/// Context cache as the sparse prefill sees it: the stitched cache with
/// every critical token's entries replaced by their recomputed values.
pub fn recomputed_context_kv(
    ctx: &AssembledContext,
    stitched: &LayeredKV,
    model: &Model,
    crit: &CriticalTokenSet,
) -> Result<LayeredKV> {
    let (plan, _, page, _) = sparse_prefill(ctx, stitched, model, crit)?;
    let mut kv = stitched.slice(0..ctx.context_len());
    for (&pos, &slot) in plan.exclusive_page() {
        let row = pos as usize - 1;
        for l in 0..kv.num_layers() {
            let (k, v) = page.row(l, slot);
            kv.overwrite_row(l, row, k, v);
        }
    }
    Ok(kv)
}

/// Sparse prefill of the critical tokens and the question over the stitched
/// cache, then greedy decoding. The stitched cache is only read.
pub fn sparse_prefill_and_decode(
    ctx: &AssembledContext,
    stitched: &LayeredKV,
    model: &Model,
    crit: &CriticalTokenSet,
    max_new_tokens: usize,
) -> Result<SparseOutcome> {
    let cfg = model.config();
    let t0 = Instant::now();
    let (plan, hidden, mut page, mut flops) = sparse_prefill(ctx, stitched, model, crit)?;
    let computed_tokens = plan.q_indices().len();
    let first_logits = model.last_logits(&hidden);
    let prefill_secs = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut answer = Vec::new();
    let mut logits = first_logits.clone();
    let mut position = ctx.total_len() as u32 + 1;
    while answer.len() < max_new_tokens {
        let tok = argmax(&logits) as u32;
        answer.push(tok);
        if tok == STOP_TOKEN || answer.len() == max_new_tokens {
            break;
        }
        let slot = page.push_slot(position);
        let mut dec = SparseDecode {
            shared: stitched,
            page: &mut page,
            stale: plan.stale_positions(),
            position,
            slot,
            flops: 0,
        };
        let hidden = model.run_layers(&[tok], &[position], &mut dec, cfg.layers)?;
        flops += dec.flops;
        logits = model.last_logits(&hidden);
        position += 1;
    }
    Ok(SparseOutcome {
        answer,
        first_logits,
        flops,
        computed_tokens,
        prefill_secs,
        decode_secs: t1.elapsed().as_secs_f64(),
    })
}

/// Greedy continuation from `logits` with a dense cache.
pub fn greedy_decode(
    model: &Model,
    kv: &mut LayeredKV,
    mut logits: Vec<f32>,
    mut position: u32,
    max_new_tokens: usize,
) -> Result<Vec<u32>> {
    let mut answer = Vec::new();
    while answer.len() < max_new_tokens {
        let tok = argmax(&logits) as u32;
        answer.push(tok);
        if tok == STOP_TOKEN || answer.len() == max_new_tokens {
            break;
        }
        logits = model.forward_append(&[tok], &[position], kv, None)?;
        position += 1;
    }
    Ok(answer)
}

/// Last-row logits of a dense forward.
fn last_row(logits: &[f32], vocab: usize) -> Vec<f32> {
    logits[logits.len() - vocab..].to_vec()
}

/// Full attention: prefill the whole prompt, then decode.
pub fn full_attention_answer(
    ctx: &AssembledContext,
    model: &Model,
    max_new_tokens: usize,
) -> Result<(Vec<u32>, Vec<f32>)> {
    let tokens = ctx.all_tokens();
    let positions: Vec<u32> = (1..=tokens.len() as u32).collect();
    let mut kv = model.empty_kv();
    let logits = model.forward_append(&tokens, &positions, &mut kv, None)?;
    let first = last_row(&logits, model.config().vocab);
    let answer = greedy_decode(model, &mut kv, first.clone(), tokens.len() as u32 + 1, max_new_tokens)?;
    Ok((answer, first))
}

/// Full reuse: prefill only the question over the stitched cache.
pub fn full_reuse_answer(
    ctx: &AssembledContext,
    stitched: &LayeredKV,
    model: &Model,
    max_new_tokens: usize,
) -> Result<(Vec<u32>, Vec<f32>)> {
    let mut kv = stitched.clone();
    let logits = model.forward_append(&ctx.question, &ctx.question_positions(), &mut kv, None)?;
    let first = last_row(&logits, model.config().vocab);
    let pos = ctx.total_len() as u32 + 1;
    let answer = greedy_decode(model, &mut kv, first.clone(), pos, max_new_tokens)?;
    Ok((answer, first))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "fa")]
    FullAttention,
    #[serde(rename = "fr")]
    FullReuse,
    #[serde(rename = "cacheblend")]
    CacheBlend,
    #[serde(rename = "fusionrag")]
    FusionRag,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::FullAttention, Mode::FullReuse, Mode::CacheBlend, Mode::FusionRag];

    pub fn name(self) -> &'static str {
        match self {
            Mode::FullAttention => "fa",
            Mode::FullReuse => "fr",
            Mode::CacheBlend => "cacheblend",
            Mode::FusionRag => "fusionrag",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }

    /// Whether the mode reads fused records.
    pub fn uses_fused(self) -> bool {
        self == Mode::FusionRag
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryConfig {
    pub mode: Mode,
    pub ratio: f64,
    pub max_new_tokens: usize,
    pub scoring: Scoring,
    pub deviation: DevComponent,
    pub fallback: bool,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            mode: Mode::FusionRag,
            ratio: 0.15,
            max_new_tokens: 16,
            scoring: Scoring::default(),
            deviation: DevComponent::default(),
            fallback: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub load_secs: f64,
    /// Simulated tier transfer time of the fetched records.
    pub load_ticks: u64,
    pub selection_secs: f64,
    pub prefill_secs: f64,
    pub decode_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub mode: Mode,
    pub answer: Vec<u32>,
    pub critical: Option<CriticalTokenSet>,
    pub timing: Timing,
    /// Token-layer rows computed before the first output token, in units
    /// of whole-model token passes.
    pub prefill_token_equiv: f64,
    /// Part of `prefill_token_equiv` spent choosing critical tokens.
    pub selection_token_equiv: f64,
}

/// One request end to end. `store` must hold the record variant the mode
/// expects (isolated for FR and deviation-based selection, fused for the
/// query-guided pipeline); it is unused for full attention.
pub fn run_query(
    ctx: &AssembledContext,
    store: &KvStore,
    sys: &SystemPromptKV,
    model: &Model,
    cfg: &QueryConfig,
) -> Result<QueryOutcome> {
    let layers = model.config().layers as f64;
    let mut timing = Timing::default();
    if cfg.mode == Mode::FullAttention {
        let t = Instant::now();
        let (answer, _) = full_attention_answer(ctx, model, cfg.max_new_tokens)?;
        timing.prefill_secs = t.elapsed().as_secs_f64();
        return Ok(QueryOutcome {
            mode: cfg.mode,
            answer,
            critical: None,
            timing,
            prefill_token_equiv: ctx.total_len() as f64,
            selection_token_equiv: 0.0,
        });
    }
    let t = Instant::now();
    let stitched = stitch_full_reuse(ctx, store, sys, model, cfg.fallback)?;
    timing.load_secs = t.elapsed().as_secs_f64();
    timing.load_ticks = stitched.load_ticks;
    let q = ctx.question.len() as f64;
    let (crit, selection_cost) = match cfg.mode {
        Mode::FullReuse => {
            let t = Instant::now();
            let (answer, _) = full_reuse_answer(ctx, &stitched.kv, model, cfg.max_new_tokens)?;
            timing.prefill_secs = t.elapsed().as_secs_f64();
            return Ok(QueryOutcome {
                mode: cfg.mode,
                answer,
                critical: None,
                timing,
                prefill_token_equiv: q,
                selection_token_equiv: 0.0,
            });
        }
        Mode::CacheBlend => {
            let t = Instant::now();
            let crit = select_cacheblend(ctx, &stitched.kv, model, cfg.ratio, cfg.deviation)?;
            timing.selection_secs = t.elapsed().as_secs_f64();
            let cost = if crit.is_empty() {
                0.0
            } else {
                ctx.context_len() as f64 * (cacheblend_layer(model) + 1) as f64 / layers
            };
            (crit, cost)
        }
        Mode::FusionRag => {
            let t = Instant::now();
            let crit = select_query_guided(ctx, &stitched.kv, model, cfg.ratio, cfg.scoring)?;
            timing.selection_secs = t.elapsed().as_secs_f64();
            let cost = if crit.is_empty() { 0.0 } else { q };
            (crit, cost)
        }
        Mode::FullAttention => unreachable!(),
    };
    let out = sparse_prefill_and_decode(ctx, &stitched.kv, model, &crit, cfg.max_new_tokens)?;
    timing.prefill_secs = out.prefill_secs;
    timing.decode_secs = out.decode_secs;
    Ok(QueryOutcome {
        mode: cfg.mode,
        answer: out.answer,
        critical: Some(crit),
        timing,
        prefill_token_equiv: out.computed_tokens as f64 + selection_cost,
        selection_token_equiv: selection_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv::AttnMask;
    use crate::kv_store::{StoreConfig, Variant};
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        Model::new(ModelConfig { layers: 3, ..ModelConfig::with_seed(11) }).unwrap()
    }

    fn toks(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
        (0..n).map(|_| rng.random_range(32..127)).collect()
    }

    fn ctx_with(rng: &mut ChaCha8Rng, sys: usize, chunks: &[usize], q: usize) -> AssembledContext {
        let chunks = chunks
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let tokens = toks(rng, n);
                ContextChunk { id: ChunkId::derive(Some(&i.to_string()), &tokens), tokens }
            })
            .collect();
        AssembledContext::new(toks(rng, sys), chunks, toks(rng, q)).unwrap()
    }

    /// Isolated records for every chunk of `ctx`, stored.
    fn store_for(ctx: &AssembledContext, m: &Model) -> (KvStore, SystemPromptKV) {
        let sys = SystemPromptKV::compute(m, &ctx.system).unwrap();
        let store = KvStore::new(StoreConfig::default(), sys.id());
        for c in &ctx.chunks {
            let start = sys.next_position();
            let pos: Vec<u32> = (start..start + c.tokens.len() as u32).collect();
            let kv = m.prefill_kv(&c.tokens, &pos, &sys.kv, m.config().layers).unwrap();
            store.put_record(ChunkKVRecord::new(c.id, kv, Variant::Isolated).unwrap(), false).unwrap();
        }
        (store, sys)
    }

    #[test]
    fn positions_are_consecutive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ctx = ctx_with(&mut rng, 3, &[4, 2], 2);
        assert_eq!(ctx.chunk_ranges(), vec![4..8, 8..10]);
        assert_eq!(ctx.question_positions(), vec![10, 11]);
        assert_eq!(ctx.chunk_of(8), Some(1));
        assert_eq!(ctx.chunk_of(2), None);
        assert_eq!(ctx.token_at(10), ctx.question[0]);
    }

    #[test]
    fn one_chunk_at_native_offset_is_bit_equal() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ctx = ctx_with(&mut rng, 4, &[6], 3);
        let (store, sys) = store_for(&ctx, &m);
        let st = stitch_full_reuse(&ctx, &store, &sys, &m, false).unwrap();
        let rec = store.handle(&ctx.chunks[0].id).unwrap();
        assert_eq!(st.kv.slice(4..10).to_bytes(), rec.kv.to_bytes());
        // single chunk: stitched cache is exact prefix reuse
        let (fa, fa_logits) = full_attention_answer(&ctx, &m, 4).unwrap();
        let (fr, fr_logits) = full_reuse_answer(&ctx, &st.kv, &m, 4).unwrap();
        assert_eq!(fa, fr);
        for (a, b) in fa_logits.iter().zip(&fr_logits) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn missing_chunk_needs_fallback() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ctx = ctx_with(&mut rng, 2, &[3, 3], 2);
        let sys = SystemPromptKV::compute(&m, &ctx.system).unwrap();
        let store = KvStore::new(StoreConfig::default(), sys.id());
        assert!(matches!(
            stitch_full_reuse(&ctx, &store, &sys, &m, false),
            Err(Error::MissingRecord(_))
        ));
        let st = stitch_full_reuse(&ctx, &store, &sys, &m, true).unwrap();
        assert_eq!(st.fallback_prefills, 2);
        assert_eq!(st.kv.len(), 8);
    }

    #[test]
    fn stitching_moves_second_chunk_keys() {
        // second chunk cached at [2,3,4,5] lands at [5,6,7,8]
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ctx = ctx_with(&mut rng, 1, &[3, 4], 1);
        let (store, sys) = store_for(&ctx, &m);
        let rec = store.handle(&ctx.chunks[1].id).unwrap();
        assert_eq!(rec.kv.positions(), &[2, 3, 4, 5]);
        let st = stitch_full_reuse(&ctx, &store, &sys, &m, false).unwrap();
        assert_eq!(&st.kv.positions()[4..8], &[5, 6, 7, 8]);
        let moved = rec.kv.relocated(5, m.freqs()).unwrap();
        assert_eq!(st.kv.slice(4..8).to_bytes(), moved.to_bytes());
    }

    #[test]
    fn deviation_vanishes_for_single_chunk_and_first_layer() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let one = ctx_with(&mut rng, 3, &[8], 2);
        let (store, sys) = store_for(&one, &m);
        let st = stitch_full_reuse(&one, &store, &sys, &m, false).unwrap();
        let d = kv_deviation(&one, &st.kv, &m, 3).unwrap();
        for t in 0..d.tokens() {
            for l in 0..3 {
                assert!(d.get(t, l, DevComponent::Both) <= 1e-10);
            }
        }
        let two = ctx_with(&mut rng, 3, &[8, 8, 8], 2);
        let (store, sys) = store_for(&two, &m);
        let st = stitch_full_reuse(&two, &store, &sys, &m, false).unwrap();
        let d = kv_deviation(&two, &st.kv, &m, 3).unwrap();
        for t in 0..d.tokens() {
            assert!(d.get(t, 0, DevComponent::Both) <= 1e-10);
        }
    }

    #[test]
    fn quoting_chunk_deviates_at_second_layer() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let first = toks(&mut rng, 10);
        let mut second = first[2..8].to_vec();
        second.extend(toks(&mut rng, 4));
        let ctx = AssembledContext::new(
            toks(&mut rng, 2),
            vec![
                ContextChunk { id: ChunkId::derive(None, &first), tokens: first },
                ContextChunk { id: ChunkId::derive(None, &second), tokens: second },
            ],
            toks(&mut rng, 2),
        )
        .unwrap();
        let (store, sys) = store_for(&ctx, &m);
        let st = stitch_full_reuse(&ctx, &store, &sys, &m, false).unwrap();
        let d = kv_deviation(&ctx, &st.kv, &m, 2).unwrap();
        for p in ctx.chunk_ranges()[1].clone() {
            assert!(d.get(p as usize - 1, 1, DevComponent::K) > 0.0);
        }
    }

    #[test]
    fn selectors_respect_endpoints_and_never_touch_prompt_or_question() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ctx = ctx_with(&mut rng, 4, &[7, 9], 3);
        let (store, sys) = store_for(&ctx, &m);
        let st = stitch_full_reuse(&ctx, &store, &sys, &m, false).unwrap();
        for r in [0.0, 0.3, 1.0] {
            let a = select_cacheblend(&ctx, &st.kv, &m, r, DevComponent::K).unwrap();
            let b = select_query_guided(&ctx, &st.kv, &m, r, Scoring::JointSoftmax).unwrap();
            for set in [&a, &b] {
                assert_eq!(set.len(), budget(&ctx, r).unwrap());
                assert!(set.positions.iter().all(|&p| (5..=20).contains(&p)));
            }
        }
        let all = select_query_guided(&ctx, &st.kv, &m, 1.0, Scoring::Raw).unwrap();
        assert_eq!(all.positions, ctx.chunk_positions());
    }

    #[test]
    fn top_k_breaks_ties_by_lower_position() {
        assert_eq!(top_k(&[5, 6, 7, 8], &[1.0, 2.0, 2.0, 2.0], 2), vec![6, 7]);
        assert_eq!(top_k(&[5, 6], &[1.0, 2.0], 0), Vec::<u32>::new());
        assert_eq!(top_k(&[5, 6], &[1.0, 2.0], 9), vec![5, 6]);
    }

    #[test]
    fn sparse_prefill_on_eight_token_example() {
        // S = 2 tokens, chunks [3..=4] and [5..=6], question [7, 8]; critical {3, 5}
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ctx = ctx_with(&mut rng, 2, &[2, 2], 2);
        let (store, sys) = store_for(&ctx, &m);
        let st = stitch_full_reuse(&ctx, &store, &sys, &m, false).unwrap();
        let crit = CriticalTokenSet::new(&ctx, vec![3, 5], 0.5).unwrap();
        let plan = QIndexPlan::new(&crit.positions, &ctx.question_positions()).unwrap();
        assert_eq!(plan.q_indices(), &[3, 5, 7, 8]);
        let out = sparse_prefill_and_decode(&ctx, &st.kv, &m, &crit, 1).unwrap();
        assert_eq!(out.computed_tokens, 4);

        // dense oracle: stitched keys with 3 and 5 hidden, fresh keys appended
        let all = ctx.all_tokens();
        let toks: Vec<u32> = [3u32, 5, 7, 8].iter().map(|&p| all[p as usize - 1]).collect();
        let shared_pos = st.kv.positions().to_vec();
        let mut mask = AttnMask::new(4, shared_pos.len() + 4, false);
        for (r, &qp) in [3u32, 5, 7, 8].iter().enumerate() {
            for (j, &kp) in shared_pos.iter().enumerate() {
                mask.set(r, j, kp <= qp && kp != 3 && kp != 5);
            }
            for (j, &kp) in [3u32, 5, 7, 8].iter().enumerate() {
                mask.set(r, shared_pos.len() + j, kp <= qp);
            }
        }
        let visible: Vec<u32> = (0..mask.cols()).filter(|&j| mask.get(0, j)).map(|j| {
            if j < 6 { shared_pos[j] } else { [3, 5, 7, 8][j - 6] }
        }).collect();
        assert_eq!(visible, vec![1, 2, 3]);
        let dense = m.forward(&toks, &[3, 5, 7, 8], &st.kv, Some(&mask)).unwrap();
        let v = m.config().vocab;
        for (a, b) in out.first_logits.iter().zip(dense.logits_row(v, 3)) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn endpoints_reduce_to_dense_modes() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let ctx = ctx_with(&mut rng, 3, &[6, 9, 5], 4);
            let (store, sys) = store_for(&ctx, &m);
            let st = stitch_full_reuse(&ctx, &store, &sys, &m, false).unwrap();
            let (fa, fa_logits) = full_attention_answer(&ctx, &m, 6).unwrap();
            let (fr, fr_logits) = full_reuse_answer(&ctx, &st.kv, &m, 6).unwrap();
            for sel in 0..2 {
                let pick = |r: f64| {
                    if sel == 0 {
                        select_cacheblend(&ctx, &st.kv, &m, r, DevComponent::K).unwrap()
                    } else {
                        select_query_guided(&ctx, &st.kv, &m, r, Scoring::JointSoftmax).unwrap()
                    }
                };
                let one = sparse_prefill_and_decode(&ctx, &st.kv, &m, &pick(1.0), 6).unwrap();
                assert_eq!(one.answer, fa);
                assert_eq!(one.first_logits, fa_logits);
                let zero = sparse_prefill_and_decode(&ctx, &st.kv, &m, &pick(0.0), 6).unwrap();
                assert_eq!(zero.answer, fr);
                assert_eq!(zero.first_logits, fr_logits);
            }
        }
    }

    #[test]
    fn run_query_modes_share_answers_at_endpoints() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ctx = ctx_with(&mut rng, 2, &[5, 5], 3);
        let (store, sys) = store_for(&ctx, &m);
        let run = |mode, ratio| {
            let cfg = QueryConfig { mode, ratio, max_new_tokens: 5, ..Default::default() };
            run_query(&ctx, &store, &sys, &m, &cfg).unwrap()
        };
        let fa = run(Mode::FullAttention, 0.0);
        let fr = run(Mode::FullReuse, 0.0);
        assert_eq!(run(Mode::CacheBlend, 1.0).answer, fa.answer);
        assert_eq!(run(Mode::FusionRag, 0.0).answer, fr.answer);
        assert!(fr.prefill_token_equiv < fa.prefill_token_equiv);
        assert!(store.heat_of(&ctx.chunks[0].id).unwrap().count >= 3);
    }
}
