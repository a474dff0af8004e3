//! Experiment orchestration: preprocessing fixtures, the mode/ratio grid,
//! the scheduler and length sweeps, the storage replay and their CSV files.
//!
//! Every number written here is a count, a score or a virtual tick, so
//! reruns with the same seeds produce byte-identical files.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_similarity_index, detokenize, tokenize, ChunkId, KnowledgeBase};
use crate::error::{Error, Result};
use crate::kv::{LayerKv, LayeredKV};
use crate::kv_store::{ChunkKVRecord, KvStore, PrefixKey, StoreConfig, Variant};
use crate::metrics::{exact_match, f1_score, fmt_normalized, normalized_f1};
use crate::model::Model;
use crate::preprocessing::{preprocess_fused, preprocess_isolated, PreprocessConfig, PreprocessReport, SystemPromptKV};
use crate::reprocessing::{
    budget, cacheblend_layer, cacheblend_scores, full_reuse_answer, greedy_decode, query_guided_scores,
    recomputed_context_kv, sparse_prefill_and_decode, stitch_full_reuse, top_k, AssembledContext, CriticalTokenSet,
    DevComponent, DeviationMap, Mode, QueryConfig, Scoring, STOP_TOKEN,
};
use crate::scheduler::{engine_ticks, poisson_arrivals, run_async, Engine, Request, SchedulerConfig};
use crate::synth::{context_for, gen_synthetic_corpus, template_metadata, CorpusSpec, QaExample, StorageWorkload};

/// Offline caches of one knowledge base.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sys: SystemPromptKV,
    pub isolated: Vec<ChunkKVRecord>,
    pub fused: Vec<ChunkKVRecord>,
    pub reports: Vec<PreprocessReport>,
}

impl Prepared {
    pub fn new(kb: &KnowledgeBase, model: &Model, system: &[u32], top_n: usize) -> Result<Self> {
        let cfg = PreprocessConfig { top_n, system_prompt: system.to_vec(), ..Default::default() };
        let (sys, isolated, r1) = preprocess_isolated(kb, model, &cfg)?;
        let sim = build_similarity_index(kb, top_n);
        let (fused, r2) = preprocess_fused(kb, model, &cfg, &sim, &sys, &isolated)?;
        Ok(Self { sys, isolated, fused, reports: vec![r1, r2] })
    }

    pub fn records(&self, variant: Variant) -> &[ChunkKVRecord] {
        match variant {
            Variant::Isolated => &self.isolated,
            Variant::Fused => &self.fused,
        }
    }

    /// A fresh store holding every record of `variant`.
    pub fn store(&self, variant: Variant, cfg: StoreConfig) -> Result<KvStore> {
        let store = KvStore::new(cfg, self.sys.id());
        for r in self.records(variant) {
            store.put_record(r.clone(), false)?;
        }
        Ok(store)
    }
}

/// Record variant each mode reads.
pub fn variant_for(mode: Mode) -> Variant {
    if mode.uses_fused() {
        Variant::Fused
    } else {
        Variant::Isolated
    }
}

/// Decoded answer text up to the stop token.
pub fn answer_text(tokens: &[u32]) -> String {
    let end = tokens.iter().position(|&t| t == STOP_TOKEN).unwrap_or(tokens.len());
    detokenize(&tokens[..end])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentGrid {
    pub modes: Vec<Mode>,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub corpus: CorpusSpec,
    pub top_chunks: usize,
    /// Neighbours used for fused preprocessing.
    pub top_n: usize,
    pub max_new_tokens: usize,
    pub scoring: Scoring,
    pub deviation: DevComponent,
    pub histogram_bins: usize,
    /// Also measure the final-layer deviation left after recomputation.
    pub fidelity: bool,
    pub cost: SchedulerConfig,
    pub store: StoreConfig,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        Self {
            modes: Mode::ALL.to_vec(),
            ratios: vec![0.0, 0.05, 0.10, 0.15, 1.0],
            seeds: vec![1, 2, 3],
            corpus: CorpusSpec::default(),
            top_chunks: 4,
            top_n: 10,
            max_new_tokens: 8,
            scoring: Scoring::JointSoftmax,
            deviation: DevComponent::K,
            histogram_bins: 10,
            fidelity: true,
            cost: SchedulerConfig::default(),
            // records start in host memory, so every request pays a load
            store: StoreConfig { gpu_capacity: 0, ..Default::default() },
        }
    }
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Config(format!("ratio {r} outside [0, 1]")));
        }
        if self.seeds.is_empty() || self.modes.is_empty() {
            return Err(Error::Config("grid needs at least one seed and one mode".into()));
        }
        if self.histogram_bins == 0 || self.top_chunks == 0 {
            return Err(Error::Config("histogram bins and top_chunks must be positive".into()));
        }
        self.corpus.validate()
    }

    /// Ratios evaluated for `mode`: the full list for the selective modes,
    /// the fixed endpoint for the baselines.
    pub fn ratios_for(&self, mode: Mode) -> Vec<f64> {
        match mode {
            Mode::FullAttention => vec![1.0],
            Mode::FullReuse => vec![0.0],
            _ => self.ratios.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Ticks {
    pub load: u64,
    pub selection: u64,
    pub prefill: u64,
}

impl Ticks {
    pub fn ttft(&self) -> u64 {
        self.load + self.selection + self.prefill
    }
}

/// One (mode, ratio) run of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Run {
    pub mode: Mode,
    pub ratio: f64,
    pub answer: String,
    pub ticks: Ticks,
    pub critical: Vec<u32>,
    /// Mean final-layer K+V deviation from full attention over chunk tokens.
    pub fidelity: Option<f64>,
}

/// Everything measured on one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEval {
    pub index: usize,
    pub hops: usize,
    pub gold: Vec<String>,
    pub runs: Vec<Run>,
    /// Full reuse over the fused records: FusionRAG's own `r = 0` endpoint.
    pub fr_fused: Option<String>,
    pub chunk_ranges: Vec<(u32, u32)>,
    /// Second-layer deviation per chunk token, isolated then fused records.
    pub layer2_isolated: Vec<[f32; 2]>,
    pub layer2_fused: Vec<[f32; 2]>,
}

impl QueryEval {
    pub fn run(&self, mode: Mode, ratio: f64) -> Option<&Run> {
        self.runs.iter().find(|r| r.mode == mode && r.ratio == ratio)
    }

    pub fn fa(&self) -> &Run {
        self.run(Mode::FullAttention, 1.0).expect("full attention is always run")
    }
}

fn mean_last_layer(dev: &DeviationMap, positions: &[u32]) -> f64 {
    dev.mean(positions, dev.layers() - 1, DevComponent::Both)
}

/// Runs every mode and ratio of `grid` on one question.
pub fn evaluate_query(
    index: usize,
    qa: &QaExample,
    ids: &[ChunkId],
    kb: &KnowledgeBase,
    prep: &Prepared,
    stores: &BTreeMap<Variant, KvStore>,
    model: &Model,
    grid: &ExperimentGrid,
) -> Result<QueryEval> {
    let ctx = AssembledContext::from_ids(kb, &prep.sys.tokens, ids, &tokenize(&qa.question))?;
    let layers = model.config().layers;
    let ctx_len = ctx.context_len();
    let chunk_pos = ctx.chunk_positions();
    let q_len = ctx.question.len() as f64;
    let tick = |te: f64| (te * grid.cost.ticks_per_token).ceil() as u64;

    // full attention, keeping its context cache for the deviation oracles
    let tokens = ctx.all_tokens();
    let positions: Vec<u32> = (1..=tokens.len() as u32).collect();
    let mut kv = model.empty_kv();
    let logits = model.forward_append(&tokens, &positions, &mut kv, None)?;
    let fa_ctx = kv.slice(0..ctx_len);
    let vocab = model.config().vocab;
    let first = logits[logits.len() - vocab..].to_vec();
    let fa = greedy_decode(model, &mut kv, first, tokens.len() as u32 + 1, grid.max_new_tokens)?;
    let mut runs = vec![Run {
        mode: Mode::FullAttention,
        ratio: 1.0,
        answer: answer_text(&fa),
        ticks: Ticks { load: 0, selection: 0, prefill: engine_ticks(&grid.cost, tokens.len() as f64) },
        critical: Vec::new(),
        fidelity: grid.fidelity.then_some(0.0),
    }];

    let iso = stitch_full_reuse(&ctx, &stores[&Variant::Isolated], &prep.sys, model, false)?;
    let fused = stitch_full_reuse(&ctx, &stores[&Variant::Fused], &prep.sys, model, false)?;
    let dev_iso = DeviationMap::between(&fa_ctx, &iso.kv, ctx_len, layers);
    let dev_fused = DeviationMap::between(&fa_ctx, &fused.kv, ctx_len, layers);

    let (fr, _) = full_reuse_answer(&ctx, &iso.kv, model, grid.max_new_tokens)?;
    runs.push(Run {
        mode: Mode::FullReuse,
        ratio: 0.0,
        answer: answer_text(&fr),
        ticks: Ticks { load: iso.load_ticks, selection: 0, prefill: engine_ticks(&grid.cost, q_len) },
        critical: Vec::new(),
        fidelity: grid.fidelity.then(|| mean_last_layer(&dev_iso, &chunk_pos)),
    });

    let fr_fused = if grid.modes.contains(&Mode::FusionRag) {
        Some(answer_text(&full_reuse_answer(&ctx, &fused.kv, model, grid.max_new_tokens)?.0))
    } else {
        None
    };
    let cb_layer = cacheblend_layer(model);
    for mode in [Mode::CacheBlend, Mode::FusionRag] {
        if !grid.modes.contains(&mode) {
            continue;
        }
        let (st, scores, sel_cost) = match mode {
            Mode::CacheBlend => (
                &iso,
                cacheblend_scores(&ctx, &dev_iso, cb_layer, grid.deviation),
                ctx_len as f64 * (cb_layer + 1) as f64 / layers as f64,
            ),
            _ => (&fused, query_guided_scores(&ctx, &fused.kv, model, grid.scoring)?, q_len),
        };
        for &ratio in &grid.ratios {
            let k = budget(&ctx, ratio)?;
            let crit = CriticalTokenSet::new(&ctx, top_k(&chunk_pos, &scores, k), ratio)?;
            let out = sparse_prefill_and_decode(&ctx, &st.kv, model, &crit, grid.max_new_tokens)?;
            let fidelity = if grid.fidelity {
                let rec = recomputed_context_kv(&ctx, &st.kv, model, &crit)?;
                Some(mean_last_layer(&DeviationMap::between(&fa_ctx, &rec, ctx_len, layers), &chunk_pos))
            } else {
                None
            };
            runs.push(Run {
                mode,
                ratio,
                answer: answer_text(&out.answer),
                ticks: Ticks {
                    load: st.load_ticks,
                    selection: if k == 0 { 0 } else { tick(sel_cost) },
                    prefill: engine_ticks(&grid.cost, out.computed_tokens as f64),
                },
                critical: crit.positions,
                fidelity,
            });
        }
    }
    let layer2 = |d: &DeviationMap| -> Vec<[f32; 2]> {
        chunk_pos
            .iter()
            .map(|&p| {
                let t = p as usize - 1;
                [d.get(t, cb_layer, DevComponent::K), d.get(t, cb_layer, DevComponent::V)]
            })
            .collect()
    };
    Ok(QueryEval {
        index,
        hops: qa.hops,
        gold: qa.answers.clone(),
        runs,
        fr_fused,
        chunk_ranges: ctx.chunk_ranges().iter().map(|r| (r.start, r.end)).collect(),
        layer2_isolated: layer2(&dev_iso),
        layer2_fused: layer2(&dev_fused),
    })
}

/// All queries of one seed.
#[derive(Debug, Clone)]
pub struct SeedEval {
    pub seed: u64,
    pub evals: Vec<QueryEval>,
    /// `(query index, error)` for queries that failed.
    pub failures: Vec<(usize, String)>,
}

pub fn evaluate_seed(grid: &ExperimentGrid, seed: u64, model: &Model) -> Result<SeedEval> {
    let corpus = gen_synthetic_corpus(&grid.corpus, seed)?;
    let prep = Prepared::new(&corpus.kb, model, &tokenize(&corpus.system_prompt), grid.top_n)?;
    let stores: BTreeMap<Variant, KvStore> = [Variant::Isolated, Variant::Fused]
        .into_iter()
        .map(|v| Ok((v, prep.store(v, grid.store.clone())?)))
        .collect::<Result<_>>()?;
    let results: Vec<std::result::Result<QueryEval, (usize, String)>> = corpus
        .qa
        .par_iter()
        .enumerate()
        .map(|(i, qa)| {
            context_for(&corpus.kb, qa, grid.top_chunks)
                .and_then(|ids| evaluate_query(i, qa, &ids, &corpus.kb, &prep, &stores, model, grid))
                .map_err(|e| (i, e.to_string()))
        })
        .collect();
    let mut evals = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(e) => evals.push(e),
            Err(f) => failures.push(f),
        }
    }
    Ok(SeedEval { seed, evals, failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub mode: String,
    pub ratio: f64,
    pub seed: u64,
    pub queries: usize,
    pub failures: usize,
    pub em: f64,
    pub f1: f64,
    /// F1 of the answer against the full-attention answer.
    pub f1_vs_fa: f64,
    pub normalized_f1: String,
    pub mean_ttft_ticks: f64,
    pub mean_critical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub seed: u64,
    pub query: usize,
    pub hops: usize,
    pub mode: String,
    pub ratio: f64,
    pub prediction: String,
    pub gold: String,
    pub em: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub mode: String,
    pub ratio: f64,
    pub seed: u64,
    pub bin: usize,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationCdfRow {
    pub seed: u64,
    pub variant: String,
    pub quantile: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationSummaryRow {
    pub seed: u64,
    pub variant: String,
    pub queries: usize,
    pub tokens: usize,
    pub mean_layer2_k: f64,
    pub mean_layer2_v: f64,
    pub mean_layer2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub mode: String,
    pub ratio: f64,
    pub seed: u64,
    pub mean_final_layer_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub mode: String,
    pub ratio: f64,
    pub seed: u64,
    pub load_ticks: f64,
    pub selection_ticks: f64,
    pub prefill_ticks: f64,
    pub ttft_ticks: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GridResults {
    pub rows: Vec<GridRow>,
    pub predictions: Vec<PredictionRow>,
    pub histograms: Vec<HistogramRow>,
    pub deviation_cdf: Vec<DeviationCdfRow>,
    pub deviation_summary: Vec<DeviationSummaryRow>,
    pub fidelity: Vec<FidelityRow>,
    pub latency: Vec<LatencyRow>,
    /// Selective runs at `r = 0` or `r = 1` whose answer differs from the
    /// dense mode they reduce to.
    pub endpoint_violations: Vec<String>,
}

impl GridResults {
    pub fn row(&self, mode: Mode, ratio: f64, seed: u64) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.mode == mode.name() && r.ratio == ratio && r.seed == seed)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Within-chunk relative position histogram of selected tokens.
pub fn selection_histogram(critical: &[u32], chunk_ranges: &[(u32, u32)], bins: usize) -> Vec<u64> {
    let mut hist = vec![0u64; bins];
    for &p in critical {
        if let Some(&(s, e)) = chunk_ranges.iter().find(|(s, e)| (*s..*e).contains(&p)) {
            let b = ((p - s) as usize * bins) / (e - s) as usize;
            hist[b.min(bins - 1)] += 1;
        }
    }
    hist
}

fn quantiles(mut xs: Vec<f64>, steps: usize) -> Vec<(f64, f64)> {
    if xs.is_empty() {
        return Vec::new();
    }
    xs.sort_by(f64::total_cmp);
    (0..=steps)
        .map(|i| {
            let q = i as f64 / steps as f64;
            let idx = ((xs.len() - 1) as f64 * q).round() as usize;
            (q, xs[idx])
        })
        .collect()
}

/// Selective runs at the ratio endpoints that disagree with full attention
/// (`r = 1`) or with full reuse over the same records (`r = 0`).
pub fn endpoint_violations(seed: u64, e: &QueryEval) -> Vec<String> {
    let fr = e.run(Mode::FullReuse, 0.0).map(|r| r.answer.clone());
    let mut out = Vec::new();
    for r in e.runs.iter().filter(|r| matches!(r.mode, Mode::CacheBlend | Mode::FusionRag)) {
        let want = if r.ratio == 1.0 {
            Some(e.fa().answer.clone())
        } else if r.ratio == 0.0 {
            if r.mode == Mode::FusionRag {
                e.fr_fused.clone()
            } else {
                fr.clone()
            }
        } else {
            None
        };
        if want.is_some_and(|w| w != r.answer) {
            out.push(format!("seed {seed} query {} {} r={}", e.index, r.mode.name(), r.ratio));
        }
    }
    out
}

/// Folds per-query evaluations of one seed into report rows.
pub fn summarize_seed(grid: &ExperimentGrid, s: &SeedEval, out: &mut GridResults) {
    for e in &s.evals {
        out.endpoint_violations.extend(endpoint_violations(s.seed, e));
    }
    let score = |mode: Mode, ratio: f64, f: &dyn Fn(&QueryEval, &Run) -> f64| {
        mean(s.evals.iter().filter_map(|e| e.run(mode, ratio).map(|r| f(e, r))))
    };
    let f1_of = |e: &QueryEval, r: &Run| f1_score(&r.answer, &e.gold);
    let fa_f1 = score(Mode::FullAttention, 1.0, &f1_of);
    let fr_f1 = score(Mode::FullReuse, 0.0, &f1_of);
    for &mode in &grid.modes {
        for ratio in grid.ratios_for(mode) {
            let f1 = score(mode, ratio, &f1_of);
            out.rows.push(GridRow {
                mode: mode.name().into(),
                ratio,
                seed: s.seed,
                queries: s.evals.len(),
                failures: s.failures.len(),
                em: score(mode, ratio, &|e, r| exact_match(&r.answer, &e.gold)),
                f1,
                f1_vs_fa: score(mode, ratio, &|e, r| f1_score(&r.answer, &[e.fa().answer.clone()])),
                normalized_f1: fmt_normalized(normalized_f1(f1, fr_f1, fa_f1)),
                mean_ttft_ticks: score(mode, ratio, &|_, r| r.ticks.ttft() as f64),
                mean_critical: score(mode, ratio, &|_, r| r.critical.len() as f64),
            });
            out.latency.push(LatencyRow {
                mode: mode.name().into(),
                ratio,
                seed: s.seed,
                load_ticks: score(mode, ratio, &|_, r| r.ticks.load as f64),
                selection_ticks: score(mode, ratio, &|_, r| r.ticks.selection as f64),
                prefill_ticks: score(mode, ratio, &|_, r| r.ticks.prefill as f64),
                ttft_ticks: score(mode, ratio, &|_, r| r.ticks.ttft() as f64),
            });
            if grid.fidelity {
                out.fidelity.push(FidelityRow {
                    mode: mode.name().into(),
                    ratio,
                    seed: s.seed,
                    mean_final_layer_delta: score(mode, ratio, &|_, r| r.fidelity.unwrap_or(0.0)),
                });
            }
            if matches!(mode, Mode::CacheBlend | Mode::FusionRag) {
                let mut hist = vec![0u64; grid.histogram_bins];
                for e in &s.evals {
                    if let Some(r) = e.run(mode, ratio) {
                        let h = selection_histogram(&r.critical, &e.chunk_ranges, grid.histogram_bins);
                        hist.iter_mut().zip(h).for_each(|(a, b)| *a += b);
                    }
                }
                for (bin, count) in hist.into_iter().enumerate() {
                    out.histograms.push(HistogramRow { mode: mode.name().into(), ratio, seed: s.seed, bin, count });
                }
            }
            for e in &s.evals {
                if let Some(r) = e.run(mode, ratio) {
                    out.predictions.push(PredictionRow {
                        seed: s.seed,
                        query: e.index,
                        hops: e.hops,
                        mode: mode.name().into(),
                        ratio,
                        prediction: r.answer.clone(),
                        gold: e.gold.join("|"),
                        em: exact_match(&r.answer, &e.gold),
                        f1: f1_score(&r.answer, &e.gold),
                    });
                }
            }
        }
    }
    for (variant, pick) in [("isolated", 0usize), ("fused", 1)] {
        let vals: Vec<[f32; 2]> = s
            .evals
            .iter()
            .flat_map(|e| if pick == 0 { e.layer2_isolated.clone() } else { e.layer2_fused.clone() })
            .collect();
        let k = mean(vals.iter().map(|v| v[0] as f64));
        let v = mean(vals.iter().map(|v| v[1] as f64));
        out.deviation_summary.push(DeviationSummaryRow {
            seed: s.seed,
            variant: variant.into(),
            queries: s.evals.len(),
            tokens: vals.len(),
            mean_layer2_k: k,
            mean_layer2_v: v,
            mean_layer2: k + v,
        });
        for (quantile, delta) in quantiles(vals.iter().map(|v| (v[0] + v[1]) as f64).collect(), 100) {
            out.deviation_cdf.push(DeviationCdfRow { seed: s.seed, variant: variant.into(), quantile, delta });
        }
    }
}

/// Every mode and ratio on every seed's corpus. Failed queries are counted
/// and skipped.
pub fn run_grid(grid: &ExperimentGrid, model: &Model) -> Result<GridResults> {
    grid.validate()?;
    let mut out = GridResults::default();
    for &seed in &grid.seeds {
        let s = evaluate_seed(grid, seed, model)?;
        summarize_seed(grid, &s, &mut out);
    }
    Ok(out)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the grid's CSV files and run metadata into `dir`; returns the
/// file names.
pub fn write_grid_outputs(dir: &Path, grid: &ExperimentGrid, model: &Model, res: &GridResults) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(&dir.join("grid.csv"), &res.rows)?;
    write_csv(&dir.join("predictions.csv"), &res.predictions)?;
    write_csv(&dir.join("selection_hist.csv"), &res.histograms)?;
    write_csv(&dir.join("deviation_cdf.csv"), &res.deviation_cdf)?;
    write_csv(&dir.join("deviation_summary.csv"), &res.deviation_summary)?;
    write_csv(&dir.join("fidelity.csv"), &res.fidelity)?;
    write_csv(&dir.join("latency_stack.csv"), &res.latency)?;
    let meta = serde_json::json!({
        "grid": grid,
        "model": model.config(),
        "model_checksum": model.checksum(),
        "template": template_metadata(),
    });
    let path = dir.join("metadata.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    Ok([
        "grid.csv",
        "predictions.csv",
        "selection_hist.csv",
        "deviation_cdf.csv",
        "deviation_summary.csv",
        "fidelity.csv",
        "latency_stack.csv",
        "metadata.json",
    ]
    .map(String::from)
    .to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub mode: String,
    pub rate: f64,
    pub requests: usize,
    pub makespan_ticks: u64,
    pub throughput_rps: f64,
    pub mean_ttft_ticks: f64,
    pub idle_fraction: f64,
    pub batches: usize,
}

/// Requests for the first `n` questions of a corpus, arriving as a Poisson
/// process at `rate` per second.
pub fn poisson_workload(
    kb: &KnowledgeBase,
    qa: &[QaExample],
    top_chunks: usize,
    query: &QueryConfig,
    n: usize,
    rate: f64,
    seed: u64,
) -> Result<Vec<Request>> {
    let arrivals = poisson_arrivals(n, rate, seed)?;
    qa.iter()
        .cycle()
        .take(n)
        .zip(arrivals)
        .enumerate()
        .map(|(i, (q, arrival))| {
            Ok(Request {
                id: i as u64,
                question: tokenize(&q.question),
                chunks: context_for(kb, q, top_chunks)?,
                query: query.clone(),
                arrival,
            })
        })
        .collect()
}

/// Throughput and TTFT of the overlapped scheduler as the arrival rate grows.
#[allow(clippy::too_many_arguments)]
pub fn throughput_sweep(
    kb: &KnowledgeBase,
    qa: &[QaExample],
    prep: &Prepared,
    model: &Model,
    modes: &[Mode],
    rates: &[f64],
    n: usize,
    ratio: f64,
    top_chunks: usize,
    sched: &SchedulerConfig,
    store_cfg: &StoreConfig,
    seed: u64,
) -> Result<Vec<ThroughputRow>> {
    let env = Engine { model, kb, sys: &prep.sys };
    let mut rows = Vec::new();
    for &mode in modes {
        let query = QueryConfig { mode, ratio, max_new_tokens: 8, ..Default::default() };
        for &rate in rates {
            let wl = poisson_workload(kb, qa, top_chunks, &query, n, rate, seed)?;
            let store = prep.store(variant_for(mode), store_cfg.clone())?;
            let trace = run_async(&wl, &store, env, sched)?;
            trace.check_work_conservation()?;
            rows.push(ThroughputRow {
                mode: mode.name().into(),
                rate,
                requests: n,
                makespan_ticks: trace.makespan(),
                throughput_rps: n as f64 / (trace.makespan().max(1) as f64 / crate::kv_store::TICKS_PER_SECOND),
                mean_ttft_ticks: mean(trace.requests.iter().map(|r| r.ttft() as f64)),
                idle_fraction: trace.idle_fraction(),
                batches: trace.batches.len(),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthRow {
    pub mode: String,
    pub ratio: f64,
    pub chunks: usize,
    pub mean_context_tokens: f64,
    pub mean_ttft_ticks: f64,
}

/// TTFT of each mode as the number of retrieved chunks grows.
#[allow(clippy::too_many_arguments)]
pub fn length_sweep(
    kb: &KnowledgeBase,
    qa: &[QaExample],
    prep: &Prepared,
    model: &Model,
    modes: &[Mode],
    chunk_counts: &[usize],
    ratio: f64,
    cost: &SchedulerConfig,
    store_cfg: &StoreConfig,
) -> Result<Vec<LengthRow>> {
    let mut rows = Vec::new();
    for &mode in modes {
        let store = prep.store(variant_for(mode), store_cfg.clone())?;
        let query = QueryConfig { mode, ratio, max_new_tokens: 1, ..Default::default() };
        for &n in chunk_counts {
            let mut lens = Vec::new();
            let mut ttft = Vec::new();
            for q in qa {
                let ids = context_for(kb, q, n)?;
                let ctx = AssembledContext::from_ids(kb, &prep.sys.tokens, &ids, &tokenize(&q.question))?;
                let out = crate::reprocessing::run_query(&ctx, &store, &prep.sys, model, &query)?;
                lens.push(ctx.context_len() as f64);
                ttft.push((out.timing.load_ticks + engine_ticks(cost, out.prefill_token_equiv)) as f64);
            }
            rows.push(LengthRow {
                mode: mode.name().into(),
                ratio,
                chunks: n,
                mean_context_tokens: mean(lens.into_iter()),
                mean_ttft_ticks: mean(ttft.into_iter()),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub queries: usize,
    pub chunk_slots: usize,
    pub distinct_chunks: usize,
    pub alt_hits: usize,
    pub plain_hits: usize,
    pub alt_hit_rate: f64,
    pub plain_hit_rate: f64,
    /// Chunks prefilled online because no usable record was matched.
    pub alt_recomputes: usize,
    pub plain_recomputes: usize,
    /// Recomputations of chunks that already had a record somewhere.
    pub alt_redundant: usize,
    pub plain_redundant: usize,
    pub redundant_reduction: f64,
    pub alt_bytes: u64,
    pub plain_bytes: u64,
    pub storage_reduction: f64,
    /// Largest number of stored copies of one chunk seen during the replay.
    pub max_copies_alt: usize,
    pub max_copies_plain: usize,
    /// Queries where the single store's own leading-prefix match beat
    /// alternative-path matching (must stay zero).
    pub alt_below_plain: usize,
}

/// Stand-in record of the right size: one layer, one head of width 2.
fn sized_record(id: ChunkId, tokens: usize, start: u32) -> Result<ChunkKVRecord> {
    let n = tokens * 2;
    let kv = LayeredKV::from_parts(
        vec![LayerKv { k: vec![0.0; n], v: vec![0.0; n] }],
        (start..start + tokens as u32).collect(),
        1,
        2,
    )?;
    ChunkKVRecord::new(id, kv, Variant::Isolated)
}

/// Replays a storage workload twice: against the single-copy store with
/// alternative-path matching, and against a plain prefix cache that keeps
/// one copy per distinct prefix path.
pub fn storage_replay(w: &StorageWorkload, system: ChunkId) -> Result<StorageReport> {
    let store = KvStore::new(StoreConfig::default(), system);
    let mut plain: HashSet<PrefixKey> = HashSet::new();
    let mut plain_copies: BTreeMap<ChunkId, usize> = BTreeMap::new();
    let mut computed_alt: HashSet<ChunkId> = HashSet::new();
    let mut computed_plain: HashSet<ChunkId> = HashSet::new();
    let mut r = StorageReport { queries: w.queries.len(), ..Default::default() };
    let size = |id: &ChunkId| (w.tokens[id] * 16) as u64;
    for id in &w.known {
        store.put_record(sized_record(*id, w.tokens[id], 1)?, false)?;
        plain.insert(PrefixKey::of(&system, &[*id]));
        *plain_copies.entry(*id).or_default() += 1;
        r.plain_bytes += size(id);
        computed_alt.insert(*id);
        computed_plain.insert(*id);
    }
    for q in &w.queries {
        r.chunk_slots += q.len();
        let alt = store.alternative_path_match(q);
        let leading = store.plain_prefix_match(q).len();
        if alt.len() < leading {
            r.alt_below_plain += 1;
        }
        r.alt_hits += alt.len();
        for (i, id) in q.iter().enumerate() {
            if !alt.iter().any(|m| m.chunk_id == *id) {
                r.alt_recomputes += 1;
                if !computed_alt.insert(*id) {
                    r.alt_redundant += 1;
                }
                store.put_record(sized_record(*id, w.tokens[id], 1)?, false)?;
            }
            store.register_prefix(&q[..i], *id);
        }
        // plain prefix cache: leading run only, then a copy per new path
        let mut hit = true;
        for i in 0..q.len() {
            let key = PrefixKey::of(&system, &q[..=i]);
            if hit && plain.contains(&key) {
                r.plain_hits += 1;
                continue;
            }
            hit = false;
            r.plain_recomputes += 1;
            if !computed_plain.insert(q[i]) {
                r.plain_redundant += 1;
            }
            if plain.insert(key) {
                *plain_copies.entry(q[i]).or_default() += 1;
                r.plain_bytes += size(&q[i]);
            }
        }
        store.check_invariants()?;
        if store.len() != computed_alt.len() {
            return Err(Error::Contract("store holds more records than distinct chunks".into()));
        }
    }
    r.distinct_chunks = store.len();
    r.alt_bytes = store.ids().iter().map(size).sum();
    r.alt_hit_rate = r.alt_hits as f64 / r.chunk_slots.max(1) as f64;
    r.plain_hit_rate = r.plain_hits as f64 / r.chunk_slots.max(1) as f64;
    r.redundant_reduction = if r.plain_redundant == 0 {
        0.0
    } else {
        1.0 - r.alt_redundant as f64 / r.plain_redundant as f64
    };
    r.storage_reduction = 1.0 - r.alt_bytes as f64 / r.plain_bytes.max(1) as f64;
    r.max_copies_alt = 1;
    r.max_copies_plain = plain_copies.values().copied().max().unwrap_or(0);
    Ok(r)
}
