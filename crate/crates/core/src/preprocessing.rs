//! Offline chunk cache generation.
//!
//! Isolated records hold each chunk prefilled after the system prompt
//! alone. Fused records re-prefill a chunk after the stitched isolated
//! caches of its nearest neighbours, so its keys and values already carry
//! cross-chunk attention.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Chunk, ChunkId, KnowledgeBase, SimilarityIndex};
use crate::error::{Error, Result};
use crate::kv::LayeredKV;
use crate::kv_store::{ChunkKVRecord, Variant};
use crate::model::Model;
use crate::reprocessing::stitch_records;

pub const DEFAULT_FUSED_BUDGET: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub top_n: usize,
    pub system_prompt: Vec<u32>,
    pub overwrite: bool,
    /// Upper bound on neighbour tokens placed before a chunk when fusing.
    pub fused_budget: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            top_n: crate::corpus::DEFAULT_SIMILARITY_TOP_N,
            system_prompt: Vec::new(),
            overwrite: true,
            fused_budget: DEFAULT_FUSED_BUDGET,
        }
    }
}

/// K/V of the system prompt at positions `1..=|S|`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemPromptKV {
    pub tokens: Vec<u32>,
    pub kv: LayeredKV,
}

impl SystemPromptKV {
    pub fn compute(model: &Model, tokens: &[u32]) -> Result<Self> {
        let positions: Vec<u32> = (1..=tokens.len() as u32).collect();
        let kv = model.prefill_kv(tokens, &positions, &model.empty_kv(), model.config().layers)?;
        Ok(Self { tokens: tokens.to_vec(), kv })
    }

    pub fn id(&self) -> ChunkId {
        ChunkId::derive(Some("\0system"), &self.tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// First position after the prompt.
    pub fn next_position(&self) -> u32 {
        self.tokens.len() as u32 + 1
    }

    pub fn to_record(&self) -> Result<ChunkKVRecord> {
        ChunkKVRecord::new(self.id(), self.kv.clone(), Variant::Isolated)
    }

    pub fn from_record(rec: &ChunkKVRecord, tokens: Vec<u32>) -> Result<Self> {
        if rec.tokens() != tokens.len() || (!tokens.is_empty() && rec.native_start != 1) {
            return Err(Error::Contract("system prompt record does not match its tokens".into()));
        }
        Ok(Self { tokens, kv: rec.kv.clone() })
    }
}

/// Timing and size summary of one preprocessing run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub chunks: usize,
    pub variant: Option<Variant>,
    pub wall_secs: f64,
    /// Sum of per-chunk compute times (exceeds wall time when parallel).
    pub chunk_secs_total: f64,
    pub mean_secs_per_chunk: f64,
    pub record_bytes: u64,
    /// Tokens prefilled: the chunks themselves.
    pub chunk_tokens: u64,
    /// Neighbour tokens placed before chunks (stitched, not recomputed).
    pub context_tokens: u64,
}

impl PreprocessReport {
    fn finish(mut self, start: Instant) -> Self {
        self.wall_secs = start.elapsed().as_secs_f64();
        if self.chunks > 0 {
            self.mean_secs_per_chunk = self.chunk_secs_total / self.chunks as f64;
        }
        self
    }
}

fn isolated_record(model: &Model, sys: &SystemPromptKV, chunk: &Chunk) -> Result<ChunkKVRecord> {
    if chunk.tokens.is_empty() {
        return Err(Error::EmptyInput("chunk tokens"));
    }
    let start = sys.next_position();
    let positions: Vec<u32> = (start..start + chunk.tokens.len() as u32).collect();
    let kv = model.prefill_kv(&chunk.tokens, &positions, &sys.kv, model.config().layers)?;
    ChunkKVRecord::new(chunk.id, kv, Variant::Isolated)
}

/// Isolated records for every chunk of `kb`, in knowledge-base order.
pub fn preprocess_isolated(
    kb: &KnowledgeBase,
    model: &Model,
    cfg: &PreprocessConfig,
) -> Result<(SystemPromptKV, Vec<ChunkKVRecord>, PreprocessReport)> {
    let start = Instant::now();
    let sys = SystemPromptKV::compute(model, &cfg.system_prompt)?;
    let timed: Vec<(ChunkKVRecord, f64)> = kb
        .chunks()
        .par_iter()
        .map(|c| {
            let t = Instant::now();
            let rec = isolated_record(model, &sys, c)?;
            Ok((rec, t.elapsed().as_secs_f64()))
        })
        .collect::<Result<_>>()?;
    let mut report = PreprocessReport {
        chunks: timed.len(),
        variant: Some(Variant::Isolated),
        ..Default::default()
    };
    let mut records = Vec::with_capacity(timed.len());
    for (rec, secs) in timed {
        report.chunk_secs_total += secs;
        report.record_bytes += rec.size_bytes();
        report.chunk_tokens += rec.tokens() as u64;
        records.push(rec);
    }
    Ok((sys, records, report.finish(start)))
}

/// Neighbours of `id` that fit the fused-context budget, most similar first.
pub fn fused_neighbors(
    id: &ChunkId,
    kb: &KnowledgeBase,
    sim_index: &SimilarityIndex,
    cfg: &PreprocessConfig,
) -> Result<Vec<ChunkId>> {
    let mut out = Vec::new();
    let mut used = 0usize;
    for n in sim_index.get(id).map(Vec::as_slice).unwrap_or(&[]).iter().take(cfg.top_n) {
        let len = kb.require(n)?.tokens.len();
        if used + len > cfg.fused_budget {
            break;
        }
        used += len;
        out.push(*n);
    }
    Ok(out)
}

fn fused_record(
    model: &Model,
    sys: &SystemPromptKV,
    chunk: &Chunk,
    neighbors: &[ChunkId],
    isolated: &HashMap<ChunkId, &ChunkKVRecord>,
) -> Result<ChunkKVRecord> {
    let recs: Vec<&ChunkKVRecord> = neighbors
        .iter()
        .map(|n| isolated.get(n).copied().ok_or(Error::MissingRecord(*n)))
        .collect::<Result<_>>()?;
    let past = stitch_records(&sys.kv, &recs, model.freqs())?;
    let start = past.len() as u32 + 1;
    let positions: Vec<u32> = (start..start + chunk.tokens.len() as u32).collect();
    let kv = model.prefill_kv(&chunk.tokens, &positions, &past, model.config().layers)?;
    ChunkKVRecord::new(chunk.id, kv, Variant::Fused)
}

/// Fused records for every chunk of `kb`. Each chunk is prefilled after the
/// system prompt and the stitched isolated caches of its top neighbours.
pub fn preprocess_fused(
    kb: &KnowledgeBase,
    model: &Model,
    cfg: &PreprocessConfig,
    sim_index: &SimilarityIndex,
    sys: &SystemPromptKV,
    isolated: &[ChunkKVRecord],
) -> Result<(Vec<ChunkKVRecord>, PreprocessReport)> {
    let start = Instant::now();
    let by_id: HashMap<ChunkId, &ChunkKVRecord> =
        isolated.iter().map(|r| (r.chunk_id, r)).collect();
    let timed: Vec<(ChunkKVRecord, f64, u64)> = kb
        .chunks()
        .par_iter()
        .map(|c| {
            let t = Instant::now();
            let neighbors = fused_neighbors(&c.id, kb, sim_index, cfg)?;
            let ctx: u64 = neighbors.iter().map(|n| by_id.get(n).map_or(0, |r| r.tokens() as u64)).sum();
            let rec = fused_record(model, sys, c, &neighbors, &by_id)?;
            Ok((rec, t.elapsed().as_secs_f64(), ctx))
        })
        .collect::<Result<_>>()?;
    let mut report = PreprocessReport {
        chunks: timed.len(),
        variant: Some(Variant::Fused),
        ..Default::default()
    };
    let mut records = Vec::with_capacity(timed.len());
    for (rec, secs, ctx) in timed {
        report.chunk_secs_total += secs;
        report.record_bytes += rec.size_bytes();
        report.chunk_tokens += rec.tokens() as u64;
        report.context_tokens += ctx;
        records.push(rec);
    }
    Ok((records, report.finish(start)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_similarity_index;
    use crate::model::ModelConfig;

    fn model() -> Model {
        Model::new(ModelConfig { layers: 2, ..ModelConfig::with_seed(5) }).unwrap()
    }

    fn kb(texts: &[&str]) -> KnowledgeBase {
        let mut kb = KnowledgeBase::new(64);
        for t in texts {
            kb.insert(Chunk::new(None, t, 64).unwrap());
        }
        kb
    }

    #[test]
    fn one_token_chunk_lands_after_the_system_prompt() {
        let m = model();
        let cfg = PreprocessConfig { system_prompt: vec![1, 2, 3], ..Default::default() };
        let (sys, recs, report) = preprocess_isolated(&kb(&["x"]), &m, &cfg).unwrap();
        assert_eq!(sys.kv.positions(), &[1, 2, 3]);
        assert_eq!(recs[0].tokens(), 1);
        assert_eq!(recs[0].native_start, 4);
        assert_eq!(recs[0].kv.num_layers(), 2);
        assert_eq!(report.chunks, 1);
    }

    #[test]
    fn zero_neighbours_makes_fused_equal_isolated() {
        let m = model();
        let k = kb(&["alpha beta", "gamma delta", "alpha gamma"]);
        let cfg = PreprocessConfig { top_n: 0, system_prompt: vec![7, 8], ..Default::default() };
        let (sys, iso, _) = preprocess_isolated(&k, &m, &cfg).unwrap();
        let idx = build_similarity_index(&k, 2);
        let (fused, _) = preprocess_fused(&k, &m, &cfg, &idx, &sys, &iso).unwrap();
        for (a, b) in iso.iter().zip(&fused) {
            assert_eq!(a.kv.to_bytes(), b.kv.to_bytes());
            assert_eq!(b.variant, Variant::Fused);
        }
    }

    #[test]
    fn fused_start_follows_neighbours() {
        let m = model();
        let k = kb(&["aaaa", "aaab", "zzzzzz"]);
        let cfg = PreprocessConfig { top_n: 1, system_prompt: vec![9], ..Default::default() };
        let (sys, iso, _) = preprocess_isolated(&k, &m, &cfg).unwrap();
        let idx = build_similarity_index(&k, 2);
        let (fused, report) = preprocess_fused(&k, &m, &cfg, &idx, &sys, &iso).unwrap();
        for (c, r) in k.chunks().iter().zip(&fused) {
            let nb = &idx[&c.id][0];
            let len = k.get(nb).unwrap().tokens.len() as u32;
            assert_eq!(r.native_start, 1 + len + 1);
        }
        assert!(report.context_tokens > 0);
    }

    #[test]
    fn missing_neighbour_is_named() {
        let m = model();
        let k = kb(&["one", "two"]);
        let cfg = PreprocessConfig { top_n: 1, ..Default::default() };
        let (sys, iso, _) = preprocess_isolated(&k, &m, &cfg).unwrap();
        let idx = build_similarity_index(&k, 1);
        let err = preprocess_fused(&k, &m, &cfg, &idx, &sys, &iso[..1]).unwrap_err();
        assert!(matches!(err, Error::MissingRecord(id) if id == k.chunks()[1].id));
    }

    #[test]
    fn budget_truncates_the_neighbour_tail() {
        let k = kb(&["abcd", "abce", "abcf", "abcg"]);
        let idx = build_similarity_index(&k, 3);
        let cfg = PreprocessConfig { top_n: 3, fused_budget: 9, ..Default::default() };
        let id = k.chunks()[0].id;
        let n = fused_neighbors(&id, &k, &idx, &cfg).unwrap();
        assert_eq!(n, idx[&id][..2].to_vec());
    }

    #[test]
    fn preprocessing_is_deterministic() {
        let m = model();
        let k = kb(&["the cat sat", "on the mat", "cat on mat"]);
        let cfg = PreprocessConfig { top_n: 2, system_prompt: vec![1], ..Default::default() };
        let idx = build_similarity_index(&k, 2);
        let run = || {
            let (sys, iso, _) = preprocess_isolated(&k, &m, &cfg).unwrap();
            let (fused, _) = preprocess_fused(&k, &m, &cfg, &idx, &sys, &iso).unwrap();
            fused.iter().map(crate::kv_store::serialize_record).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
