//! Chunked knowledge base, hashed bigram embeddings and exact top-n retrieval.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_EMBED_DIM: usize = 256;
pub const DEFAULT_WINDOW: usize = 128;
pub const DEFAULT_SIMILARITY_TOP_N: usize = 10;

const BOS: u64 = 256;
const EOS: u64 = 257;

/// 128-bit content hash identifying a chunk.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChunkId(pub [u8; 16]);

impl ChunkId {
    /// Hash of the token ids, salted with the external id when one exists so
    /// that two corpus entries with identical text stay distinct.
    pub fn derive(external_id: Option<&str>, tokens: &[u32]) -> Self {
        let mut h = Sha256::new();
        match external_id {
            Some(id) => {
                h.update(b"ext\0");
                h.update(id.as_bytes());
                h.update([0u8]);
            }
            None => h.update(b"tok\0"),
        }
        for t in tokens {
            h.update(t.to_le_bytes());
        }
        let digest = h.finalize();
        let mut out = [0u8; 16];
        out.copy_from_slice(&digest[..16]);
        ChunkId(out)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let raw = hex::decode(s).map_err(|e| Error::Config(format!("bad chunk id {s:?}: {e}")))?;
        let arr: [u8; 16] = raw
            .try_into()
            .map_err(|_| Error::Config(format!("chunk id {s:?} is not 16 bytes")))?;
        Ok(ChunkId(arr))
    }
}

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ChunkId({})", &self.to_hex()[..8])
    }
}

impl Serialize for ChunkId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ChunkId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ChunkId::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

pub fn detokenize(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().map(|&t| t.min(255) as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Fixed-size token windows; the last window may be shorter.
pub fn split_tokens(tokens: &[u32], window: usize) -> Vec<Vec<u32>> {
    let window = window.max(1);
    tokens.chunks(window).map(<[u32]>::to_vec).collect()
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashed bag of token bigrams (with start/end boundary markers), L2-normalized.
pub fn embed(tokens: &[u32], dim: usize) -> Result<Vec<f32>> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("cannot embed an empty token list"));
    }
    if dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    let mut v = vec![0.0f32; dim];
    let seq = std::iter::once(BOS)
        .chain(tokens.iter().map(|&t| t as u64))
        .chain(std::iter::once(EOS));
    let mut prev = None;
    for t in seq {
        if let Some(p) = prev {
            let bucket = (mix((p << 32) | t) % dim as u64) as usize;
            v[bucket] += 1.0;
        }
        prev = Some(t);
    }
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub id: ChunkId,
    pub text: String,
    pub tokens: Vec<u32>,
    pub embedding: Vec<f32>,
}

impl Chunk {
    pub fn new(external_id: Option<&str>, text: &str, dim: usize) -> Result<Self> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::EmptyInput("chunk text is empty"));
        }
        Ok(Self {
            id: ChunkId::derive(external_id, &tokens),
            text: text.to_owned(),
            embedding: embed(&tokens, dim)?,
            tokens,
        })
    }
}

/// One line of a corpus JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub text: String,
}

/// One line of a QA JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaEntry {
    pub question: String,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    chunks: Vec<Chunk>,
    index: HashMap<ChunkId, usize>,
    dim: usize,
}

impl KnowledgeBase {
    pub fn new(dim: usize) -> Self {
        Self { chunks: Vec::new(), index: HashMap::new(), dim }
    }

    pub fn from_entries(entries: &[CorpusEntry], dim: usize) -> Result<Self> {
        let mut kb = Self::new(dim);
        for e in entries {
            kb.insert(Chunk::new(e.id.as_deref(), &e.text, dim)?);
        }
        Ok(kb)
    }

    /// Inserts a chunk; an identical id replaces nothing and is skipped.
    pub fn insert(&mut self, chunk: Chunk) -> bool {
        if self.index.contains_key(&chunk.id) {
            return false;
        }
        self.index.insert(chunk.id, self.chunks.len());
        self.chunks.push(chunk);
        true
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn get(&self, id: &ChunkId) -> Option<&Chunk> {
        self.index.get(id).map(|&i| &self.chunks[i])
    }

    pub fn require(&self, id: &ChunkId) -> Result<&Chunk> {
        self.get(id).ok_or(Error::MissingRecord(*id))
    }

    pub fn entries(&self) -> Vec<CorpusEntry> {
        self.chunks
            .iter()
            .map(|c| CorpusEntry { id: None, text: c.text.clone() })
            .collect()
    }
}

/// Ranked `(chunk, cosine)` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalResult {
    pub hits: Vec<(ChunkId, f32)>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<ChunkId> {
        self.hits.iter().map(|(id, _)| *id).collect()
    }
}

fn rank(mut scored: Vec<(ChunkId, f32)>, n: usize) -> Vec<(ChunkId, f32)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(n);
    scored
}

/// Exact top-n by cosine similarity; ties go to the smaller chunk id.
pub fn retrieve_topn(query_tokens: &[u32], kb: &KnowledgeBase, n: usize) -> Result<RetrievalResult> {
    let q = embed(query_tokens, kb.dim)?;
    let scored = kb.chunks.iter().map(|c| (c.id, cosine(&q, &c.embedding))).collect();
    Ok(RetrievalResult { hits: rank(scored, n) })
}

/// For every chunk, its `n` nearest other chunks in descending similarity.
pub type SimilarityIndex = BTreeMap<ChunkId, Vec<ChunkId>>;

pub fn build_similarity_index(kb: &KnowledgeBase, n: usize) -> SimilarityIndex {
    kb.chunks
        .par_iter()
        .map(|c| {
            if n == 0 {
                return (c.id, Vec::new());
            }
            let scored = kb
                .chunks
                .iter()
                .filter(|o| o.id != c.id)
                .map(|o| (o.id, cosine(&c.embedding, &o.embedding)))
                .collect();
            (c.id, rank(scored, n).into_iter().map(|(id, _)| id).collect())
        })
        .collect()
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in rows {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
