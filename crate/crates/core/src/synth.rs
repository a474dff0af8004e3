//! Seeded synthetic corpora and workloads.
//!
//! Chunks are built from per-cluster word pools, so chunks in the same
//! cluster paraphrase each other. Question chains are planted as facts
//! `a > b.` spread over distinct chunks; the answer to a `h`-hop question
//! is the entity reached after following `h` facts from its start.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Chunk, ChunkId, KnowledgeBase, QaEntry};
use crate::error::{Error, Result};

pub const SYSTEM_PROMPT: &str = "Follow the links and name the last entity.\n";
pub const QUESTION_TEMPLATE: &str = "Q {start} {hops}?";
/// Wide enough that hashed bigram collisions rarely outweigh a shared entity.
pub const SYNTH_EMBED_DIM: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub clusters: usize,
    pub chunks_per_cluster: usize,
    /// Probability that a chunk keeps each word of its cluster's base text.
    pub overlap: f64,
    pub words_per_chunk: usize,
    pub questions: usize,
    /// Hop counts are drawn uniformly from `1..=max_hops`.
    pub max_hops: usize,
    /// Decoy facts per question, each in a non-evidence chunk.
    pub distractors: usize,
    pub embed_dim: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            clusters: 10,
            chunks_per_cluster: 10,
            overlap: 0.7,
            words_per_chunk: 10,
            questions: 50,
            max_hops: 3,
            distractors: 1,
            embed_dim: SYNTH_EMBED_DIM,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.clusters * self.chunks_per_cluster;
        if n == 0 {
            return Err(Error::InfeasibleSpec("corpus has no chunks".into()));
        }
        if !(1..=4).contains(&self.max_hops) {
            return Err(Error::InfeasibleSpec(format!("max_hops {} outside 1..=4", self.max_hops)));
        }
        if self.max_hops + self.distractors > n {
            return Err(Error::InfeasibleSpec(format!(
                "{} evidence plus {} decoy chunks do not fit in {n} chunks",
                self.max_hops, self.distractors
            )));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::InfeasibleSpec(format!("overlap {} outside [0, 1]", self.overlap)));
        }
        if self.words_per_chunk == 0 {
            return Err(Error::InfeasibleSpec("chunks need at least one word".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub question: String,
    pub answers: Vec<String>,
    /// Chunks holding the chain facts, in hop order.
    pub evidence: Vec<ChunkId>,
    pub hops: usize,
}

impl QaExample {
    pub fn entry(&self) -> QaEntry {
        QaEntry { question: self.question.clone(), answers: self.answers.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub kb: KnowledgeBase,
    pub qa: Vec<QaExample>,
    /// Cluster of every chunk, in `kb` order.
    pub cluster_of: Vec<usize>,
    pub system_prompt: String,
}

/// Run metadata describing the prompt layout.
pub fn template_metadata() -> serde_json::Value {
    serde_json::json!({
        "system_prompt": SYSTEM_PROMPT,
        "question_template": QUESTION_TEMPLATE,
        "fact_template": "{a} > {b}.",
        "answer": "greedy bytes up to the first newline",
    })
}

fn word(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> String {
    const C: &[u8] = b"bcdfghjklmnprstvz";
    const V: &[u8] = b"aeiou";
    let n = rng.random_range(lo..=hi);
    (0..n)
        .map(|i| {
            let pool = if i % 2 == 0 { C } else { V };
            *pool.choose(rng).unwrap() as char
        })
        .collect()
}

/// Distinct entity code: three capitals and three digits, disjoint from
/// the lowercase filler words.
fn entity(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    loop {
        let e = format!(
            "{}{}{}{}{}{}",
            rng.random_range(b'A'..=b'Z') as char,
            rng.random_range(b'A'..=b'Z') as char,
            rng.random_range(b'A'..=b'Z') as char,
            rng.random_range(0..10),
            rng.random_range(0..10),
            rng.random_range(0..10)
        );
        if used.insert(e.clone()) {
            return e;
        }
    }
}

pub fn fact(a: &str, b: &str) -> String {
    format!("{a} > {b}.")
}

pub fn question_text(start: &str, hops: usize) -> String {
    QUESTION_TEMPLATE.replace("{start}", start).replace("{hops}", &hops.to_string())
}

/// Words of every chunk before facts are inserted.
fn cluster_texts(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<Vec<String>>, Vec<usize>)> {
    let mut texts = Vec::new();
    let mut cluster_of = Vec::new();
    let mut seen = HashSet::new();
    for c in 0..spec.clusters {
        let pool: Vec<String> = (0..spec.words_per_chunk.max(4) * 2).map(|_| word(rng, 3, 6)).collect();
        let base: Vec<String> = (0..spec.words_per_chunk).map(|_| pool.choose(rng).unwrap().clone()).collect();
        for _ in 0..spec.chunks_per_cluster {
            // paraphrases must stay distinct chunks
            let mut tries = 0;
            let words = loop {
                tries += 1;
                if tries > 1000 {
                    return Err(Error::InfeasibleSpec("cannot draw enough distinct paraphrases".into()));
                }
                let words: Vec<String> = base
                    .iter()
                    .map(|w| if rng.random_bool(spec.overlap) { w.clone() } else { pool.choose(rng).unwrap().clone() })
                    .collect();
                if seen.insert(words.join(" ")) {
                    break words;
                }
            };
            texts.push(words);
            cluster_of.push(c);
        }
    }
    Ok((texts, cluster_of))
}

/// Inserts `sentence` at a uniformly random word boundary.
fn plant(words: &mut Vec<String>, sentence: String, rng: &mut ChaCha8Rng) -> usize {
    let at = rng.random_range(0..=words.len());
    words.insert(at, sentence);
    at
}

fn build_kb(texts: &[Vec<String>], dim: usize) -> Result<(KnowledgeBase, Vec<ChunkId>)> {
    let mut kb = KnowledgeBase::new(dim);
    let mut ids = Vec::with_capacity(texts.len());
    for (i, words) in texts.iter().enumerate() {
        let chunk = Chunk::new(None, &words.join(" "), dim)?;
        ids.push(chunk.id);
        if !kb.insert(chunk) {
            return Err(Error::InfeasibleSpec(format!("chunk {i} duplicates an earlier chunk")));
        }
    }
    Ok((kb, ids))
}

/// Paraphrase-cluster corpus with planted multi-hop chains.
pub fn gen_synthetic_corpus(spec: &CorpusSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut texts, cluster_of) = cluster_texts(spec, &mut rng)?;
    let n = texts.len();
    let mut used = HashSet::new();
    let mut chains = Vec::with_capacity(spec.questions);
    for _ in 0..spec.questions {
        let hops = rng.random_range(1..=spec.max_hops);
        let ents: Vec<String> = (0..=hops).map(|_| entity(&mut rng, &mut used)).collect();
        let mut picks: Vec<usize> = (0..n).collect();
        picks.shuffle(&mut rng);
        let (ev, rest) = picks.split_at(hops);
        for (j, &c) in ev.iter().enumerate() {
            plant(&mut texts[c], fact(&ents[j], &ents[j + 1]), &mut rng);
        }
        // decoys start from a near miss of the chain's first entity
        for &c in rest.iter().take(spec.distractors) {
            let mut decoy = ents[0].clone().into_bytes();
            decoy[5] = b'0' + (decoy[5] - b'0' + 1) % 10;
            let decoy = String::from_utf8(decoy).unwrap();
            if used.insert(decoy.clone()) {
                let target = entity(&mut rng, &mut used);
                plant(&mut texts[c], fact(&decoy, &target), &mut rng);
            }
        }
        chains.push((ents, ev.to_vec()));
    }
    let (kb, ids) = build_kb(&texts, spec.embed_dim)?;
    let qa = chains
        .into_iter()
        .map(|(ents, ev)| QaExample {
            question: question_text(&ents[0], ev.len()),
            answers: vec![ents[ev.len()].clone()],
            evidence: ev.iter().map(|&c| ids[c]).collect(),
            hops: ev.len(),
        })
        .collect();
    Ok(SyntheticCorpus { kb, qa, cluster_of, system_prompt: SYSTEM_PROMPT.to_string() })
}

/// Follows the planted facts through `chunks` by string matching.
pub fn extract_answer(question: &str, chunks: &[&str]) -> Option<String> {
    let rest = question.strip_prefix("Q ")?.strip_suffix('?')?;
    let (start, hops) = rest.split_once(' ')?;
    let hops: usize = hops.parse().ok()?;
    let mut cur = start.to_string();
    for _ in 0..hops {
        let needle = format!("{cur} > ");
        let next = chunks.iter().find_map(|c| {
            let i = c.find(&needle)?;
            let tail = &c[i + needle.len()..];
            Some(tail[..tail.find('.')?].to_string())
        })?;
        cur = next;
    }
    Some(cur)
}

/// Chunks for one question: evidence chunks forced in, the remaining slots
/// filled by retrieval, all ordered by similarity to the question.
pub fn context_for(kb: &KnowledgeBase, qa: &QaExample, top_chunks: usize) -> Result<Vec<ChunkId>> {
    let q = tokenize(&qa.question);
    let ranked = crate::corpus::retrieve_topn(&q, kb, kb.len())?;
    let k = top_chunks.max(qa.evidence.len());
    let mut chosen: BTreeSet<ChunkId> = qa.evidence.iter().copied().collect();
    for id in ranked.ids() {
        if chosen.len() >= k {
            break;
        }
        chosen.insert(id);
    }
    Ok(ranked.ids().into_iter().filter(|id| chosen.contains(id)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedSpec {
    pub chunks: usize,
    pub words_per_chunk: usize,
    pub questions: usize,
    pub chunks_per_query: usize,
    pub embed_dim: usize,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self { chunks: 60, words_per_chunk: 12, questions: 40, chunks_per_query: 4, embed_dim: SYNTH_EMBED_DIM }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub kb: KnowledgeBase,
    pub qa: Vec<QaExample>,
    /// Retrieved chunks of every question; the evidence chunk is among them.
    pub contexts: Vec<Vec<ChunkId>>,
    /// Word index of the planted fact inside each chunk, in `kb` order.
    pub planted_word: Vec<usize>,
}

/// Every chunk carries one fact at a uniformly random word index; each
/// question asks for one of them.
pub fn gen_planted_uniform(spec: &PlantedSpec, seed: u64) -> Result<PlantedCorpus> {
    if spec.chunks < spec.chunks_per_query || spec.chunks_per_query == 0 || spec.words_per_chunk == 0 {
        return Err(Error::InfeasibleSpec("planted corpus too small for its queries".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = HashSet::new();
    let mut texts = Vec::with_capacity(spec.chunks);
    let mut facts = Vec::with_capacity(spec.chunks);
    let mut planted_word = Vec::with_capacity(spec.chunks);
    for _ in 0..spec.chunks {
        let mut words: Vec<String> = (0..spec.words_per_chunk).map(|_| word(&mut rng, 3, 6)).collect();
        let (a, b) = (entity(&mut rng, &mut used), entity(&mut rng, &mut used));
        planted_word.push(plant(&mut words, fact(&a, &b), &mut rng));
        texts.push(words);
        facts.push((a, b));
    }
    let (kb, ids) = build_kb(&texts, spec.embed_dim)?;
    let mut qa = Vec::new();
    let mut contexts = Vec::new();
    for _ in 0..spec.questions {
        let target = rng.random_range(0..spec.chunks);
        let mut others: Vec<usize> = (0..spec.chunks).filter(|&c| c != target).collect();
        others.shuffle(&mut rng);
        let mut ctx: Vec<usize> = others[..spec.chunks_per_query - 1].to_vec();
        ctx.insert(rng.random_range(0..=ctx.len()), target);
        qa.push(QaExample {
            question: question_text(&facts[target].0, 1),
            answers: vec![facts[target].1.clone()],
            evidence: vec![ids[target]],
            hops: 1,
        });
        contexts.push(ctx.iter().map(|&c| ids[c]).collect());
    }
    Ok(PlantedCorpus { kb, qa, contexts, planted_word })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StorageWorkloadSpec {
    pub queries: usize,
    pub chunks_per_query: usize,
    pub known_fraction: f64,
    pub shared_fraction: f64,
    /// Chunks cached before the replay starts.
    pub known_pool: usize,
    /// Newly uploaded chunks drawn by several queries.
    pub shared_pool: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl Default for StorageWorkloadSpec {
    fn default() -> Self {
        Self {
            queries: 1000,
            chunks_per_query: 5,
            known_fraction: 0.6,
            shared_fraction: 0.3,
            known_pool: 300,
            shared_pool: 300,
            min_tokens: 32,
            max_tokens: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkOrigin {
    Known,
    SharedNew,
    Unique,
}

#[derive(Debug, Clone)]
pub struct StorageWorkload {
    pub known: Vec<ChunkId>,
    pub queries: Vec<Vec<ChunkId>>,
    pub origin: std::collections::HashMap<ChunkId, ChunkOrigin>,
    pub tokens: std::collections::HashMap<ChunkId, usize>,
}

pub fn gen_storage_workload(spec: &StorageWorkloadSpec, seed: u64) -> Result<StorageWorkload> {
    if spec.known_fraction + spec.shared_fraction > 1.0 || spec.known_pool == 0 || spec.shared_pool == 0 {
        return Err(Error::InfeasibleSpec("storage workload fractions or pools invalid".into()));
    }
    if spec.min_tokens == 0 || spec.min_tokens > spec.max_tokens {
        return Err(Error::InfeasibleSpec("chunk token range invalid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut origin = std::collections::HashMap::new();
    let mut tokens = std::collections::HashMap::new();
    let mut mk = |name: String, o: ChunkOrigin, rng: &mut ChaCha8Rng| {
        let id = ChunkId::derive(Some(&name), &[]);
        origin.insert(id, o);
        tokens.insert(id, rng.random_range(spec.min_tokens..=spec.max_tokens));
        id
    };
    let known: Vec<ChunkId> = (0..spec.known_pool).map(|i| mk(format!("known-{i}"), ChunkOrigin::Known, &mut rng)).collect();
    let shared: Vec<ChunkId> =
        (0..spec.shared_pool).map(|i| mk(format!("shared-{i}"), ChunkOrigin::SharedNew, &mut rng)).collect();
    let mut unique = 0usize;
    let mut queries = Vec::with_capacity(spec.queries);
    for _ in 0..spec.queries {
        let mut q: Vec<ChunkId> = Vec::with_capacity(spec.chunks_per_query);
        while q.len() < spec.chunks_per_query {
            let u: f64 = rng.random();
            let id = if u < spec.known_fraction {
                *known.choose(&mut rng).unwrap()
            } else if u < spec.known_fraction + spec.shared_fraction {
                *shared.choose(&mut rng).unwrap()
            } else {
                unique += 1;
                mk(format!("unique-{unique}"), ChunkOrigin::Unique, &mut rng)
            };
            if !q.contains(&id) {
                q.push(id);
            }
        }
        queries.push(q);
    }
    Ok(StorageWorkload { known, queries, origin, tokens })
}
