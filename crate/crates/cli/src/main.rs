use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use chunkfuse::corpus::{build_similarity_index, read_jsonl, retrieve_topn, tokenize, write_jsonl, CorpusEntry, KnowledgeBase, QaEntry};
use chunkfuse::experiment::{
    length_sweep, run_grid, storage_replay, throughput_sweep, variant_for, write_csv, write_grid_outputs, ExperimentGrid,
    Prepared,
};
use chunkfuse::kv_store::{read_store_dir, write_store_dir, KvStore, StoreConfig, Tier, Variant};
use chunkfuse::model::{Model, ModelConfig};
use chunkfuse::preprocessing::{preprocess_fused, preprocess_isolated, PreprocessConfig, SystemPromptKV};
use chunkfuse::reprocessing::{kv_deviation, run_query, stitch_full_reuse, AssembledContext, Mode, QueryConfig};
use chunkfuse::scheduler::{
    layers_to_prefetch, run_async, run_isolated, run_sync, Clock, Engine, Request, ScheduleTrace, SchedulerConfig,
};
use chunkfuse::synth::{gen_storage_workload, gen_synthetic_corpus, CorpusSpec, StorageWorkloadSpec, SYNTH_EMBED_DIM};

const CORPUS_FILE: &str = "corpus.jsonl";
const QA_FILE: &str = "qa.jsonl";
const CORPUS_META: &str = "corpus.json";
const MODEL_FILE: &str = "model.json";

#[derive(Parser)]
#[command(name = "chunkfuse", version, about = "Chunk-level KV cache reuse for RAG at desk scale")]
struct Cli {
    /// Seed for model weights and generated data.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Model config as JSON, or a binary checkpoint.
    #[arg(long, global = true)]
    model_config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "store")]
    store_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compute isolated and fused chunk caches for a corpus.
    Preprocess(PreprocessArgs),
    /// Answer one question against a preprocessed store.
    Query(QueryArgs),
    /// Replay a timed workload through the scheduler.
    Bench(BenchArgs),
    /// Mode x ratio x seed grid plus the sweeps, written as CSV.
    Grid(GridArgs),
    /// Write a synthetic multi-hop corpus.
    GenCorpus(GenCorpusArgs),
    /// Store contents and tier usage, or a storage-reuse replay.
    CacheStats(CacheStatsArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Corpus directory (`corpus.jsonl`) or a JSON-lines file.
    corpus: PathBuf,
    /// Output directory; defaults to --store-dir.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    top_n: usize,
    #[arg(long, conflicts_with = "fused")]
    isolated_only: bool,
    /// Compute fused records too (the default).
    #[arg(long)]
    fused: bool,
    /// JSON timing and size summary.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    corpus: PathBuf,
    #[arg(long, conflicts_with = "question_file")]
    question: Option<String>,
    #[arg(long)]
    question_file: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode, default_value = "fusionrag")]
    mode: Mode,
    #[arg(long, default_value_t = 0.15)]
    ratio: f64,
    #[arg(long, default_value_t = 4)]
    top_chunks: usize,
    #[arg(long, default_value_t = 16)]
    max_new_tokens: usize,
    /// CSV: token_index, chunk_id, layer, k_dev, v_dev.
    #[arg(long)]
    emit_deviation: Option<PathBuf>,
    /// JSON timing breakdown.
    #[arg(long)]
    emit_timing: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq)]
enum SchedMode {
    Async,
    Sync,
    Both,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON lines: arrival_tick, question, mode, ratio.
    workload: PathBuf,
    corpus: PathBuf,
    /// `cpu,disk` in bytes per second.
    #[arg(long, value_delimiter = ',')]
    tier_bandwidths: Option<Vec<f64>>,
    /// `gpu,cpu[,disk]` in bytes.
    #[arg(long, value_delimiter = ',')]
    tier_capacities: Option<Vec<u64>>,
    #[arg(long = "async", conflicts_with_all = ["run_sync", "both"])]
    run_async: bool,
    #[arg(long = "sync", conflicts_with = "both")]
    run_sync: bool,
    /// Run both schedulers and compare.
    #[arg(long)]
    both: bool,
    #[arg(long, default_value_t = chunkfuse::scheduler::DEFAULT_BATCH_MAX_TOKENS)]
    batch_max: usize,
    #[arg(long, default_value_t = 4)]
    top_chunks: usize,
    /// Sleep through simulated gaps and time engine steps for real.
    #[arg(long)]
    wall_clock: bool,
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// CSV: request_id, ttft_ticks, load_ticks, prefill_ticks.
    #[arg(long)]
    summary_out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// Output directory for the CSV files.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Grid as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
    modes: Option<Vec<Mode>>,
    #[arg(long)]
    questions: Option<usize>,
    /// Skip the throughput, length and storage sweeps.
    #[arg(long)]
    no_sweeps: bool,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long, default_value = "corpus")]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 10)]
    chunks_per_cluster: usize,
    #[arg(long, default_value_t = 50)]
    questions: usize,
    #[arg(long, default_value_t = 3)]
    max_hops: usize,
    #[arg(long, default_value_t = 1)]
    distractors: usize,
    #[arg(long, default_value_t = 0.7)]
    overlap: f64,
}

#[derive(Args)]
struct CacheStatsArgs {
    /// Replay a synthetic storage workload instead of reading the store.
    #[arg(long)]
    replay: bool,
    #[arg(long, default_value_t = 1000)]
    queries: usize,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    Mode::parse(s).map_err(|e| e.to_string())
}

/// What `corpus.json` records next to the corpus lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusMeta {
    embed_dim: usize,
    system_prompt: String,
    #[serde(default)]
    spec: Option<CorpusSpec>,
    #[serde(default)]
    seed: Option<u64>,
}

struct Corpus {
    kb: KnowledgeBase,
    meta: CorpusMeta,
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    let (lines, meta_path) = if path.is_dir() {
        (path.join(CORPUS_FILE), path.join(CORPUS_META))
    } else {
        (path.to_path_buf(), path.with_file_name(CORPUS_META))
    };
    let meta = if meta_path.exists() {
        serde_json::from_str(&fs::read_to_string(&meta_path)?)?
    } else {
        CorpusMeta {
            embed_dim: SYNTH_EMBED_DIM,
            system_prompt: chunkfuse::synth::SYSTEM_PROMPT.into(),
            spec: None,
            seed: None,
        }
    };
    let entries: Vec<CorpusEntry> = read_jsonl(&lines)?;
    let kb = KnowledgeBase::from_entries(&entries, meta.embed_dim)?;
    ensure!(!kb.is_empty(), "corpus {} has no chunks", lines.display());
    Ok(Corpus { kb, meta })
}

fn load_model(cli: &Cli) -> Result<Model> {
    let Some(path) = &cli.model_config else {
        return Ok(Model::new(ModelConfig::with_seed(cli.seed))?);
    };
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(b"FTNY") {
        return Ok(Model::from_bytes(&bytes)?);
    }
    let cfg: ModelConfig = serde_json::from_slice(&bytes).context("model config JSON")?;
    Ok(Model::new(cfg)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn variant_dir(root: &Path, v: Variant) -> PathBuf {
    root.join(match v {
        Variant::Isolated => "isolated",
        Variant::Fused => "fused",
    })
}

#[derive(Serialize, Deserialize)]
struct ModelStamp {
    config: ModelConfig,
    checksum: String,
}

/// System prompt cache and a store holding `variant`'s records.
fn open_store(root: &Path, variant: Variant, model: &Model, system: &str, cfg: StoreConfig) -> Result<(SystemPromptKV, KvStore)> {
    let stamp: ModelStamp = serde_json::from_str(
        &fs::read_to_string(root.join(MODEL_FILE)).with_context(|| format!("no preprocessed store in {}", root.display()))?,
    )?;
    ensure!(
        stamp.checksum == model.checksum(),
        "store was built with a different model ({}), pass the same --seed/--model-config",
        stamp.checksum
    );
    let dir = variant_dir(root, variant);
    let (sys_rec, records) = read_store_dir(&dir).with_context(|| format!("reading {}", dir.display()))?;
    let sys_rec = sys_rec.context("store has no system prompt record")?;
    let sys = SystemPromptKV::from_record(&sys_rec, tokenize(system))?;
    let store = KvStore::new(cfg, sys.id());
    for r in records {
        store.put_record(r, false)?;
    }
    Ok((sys, store))
}

fn cmd_gen_corpus(cli: &Cli, a: &GenCorpusArgs) -> Result<()> {
    let spec = CorpusSpec {
        clusters: a.clusters,
        chunks_per_cluster: a.chunks_per_cluster,
        questions: a.questions,
        max_hops: a.max_hops,
        distractors: a.distractors,
        overlap: a.overlap,
        ..Default::default()
    };
    let c = gen_synthetic_corpus(&spec, cli.seed)?;
    fs::create_dir_all(&a.out)?;
    write_jsonl(&a.out.join(CORPUS_FILE), &c.kb.entries())?;
    write_jsonl(&a.out.join(QA_FILE), &c.qa.iter().map(|q| q.entry()).collect::<Vec<QaEntry>>())?;
    let meta = CorpusMeta {
        embed_dim: spec.embed_dim,
        system_prompt: c.system_prompt.clone(),
        spec: Some(spec),
        seed: Some(cli.seed),
    };
    write_json(&a.out.join(CORPUS_META), &meta)?;
    println!("{} chunks, {} questions -> {}", c.kb.len(), c.qa.len(), a.out.display());
    Ok(())
}

fn cmd_preprocess(cli: &Cli, a: &PreprocessArgs) -> Result<()> {
    let model = load_model(cli)?;
    let corpus = load_corpus(&a.corpus)?;
    let out = a.out.clone().unwrap_or_else(|| cli.store_dir.clone());
    let cfg = PreprocessConfig { top_n: a.top_n, system_prompt: tokenize(&corpus.meta.system_prompt), ..Default::default() };
    let (sys, isolated, r_iso) = preprocess_isolated(&corpus.kb, &model, &cfg)?;
    let sys_rec = sys.to_record()?;
    fs::create_dir_all(&out)?;
    write_store_dir(&variant_dir(&out, Variant::Isolated), Some(&sys_rec), &isolated.iter().collect::<Vec<_>>())?;
    let mut reports = vec![r_iso];
    if !a.isolated_only {
        let sim = build_similarity_index(&corpus.kb, a.top_n);
        let (fused, r_fused) = preprocess_fused(&corpus.kb, &model, &cfg, &sim, &sys, &isolated)?;
        write_store_dir(&variant_dir(&out, Variant::Fused), Some(&sys_rec), &fused.iter().collect::<Vec<_>>())?;
        reports.push(r_fused);
    }
    write_json(&out.join(MODEL_FILE), &ModelStamp { config: model.config().clone(), checksum: model.checksum() })?;
    let offline: u64 = reports.iter().map(|r| r.chunk_tokens).sum();
    let summary = serde_json::json!({
        "reports": reports,
        "offline_chunk_tokens": offline,
        "stitched_context_tokens": reports.iter().map(|r| r.context_tokens).sum::<u64>(),
        "system_prompt_tokens": sys.len(),
    });
    if let Some(p) = &a.report {
        write_json(p, &summary)?;
    }
    for r in &reports {
        println!(
            "{:?}: {} chunks, {:.4} s/chunk, {} bytes",
            r.variant.unwrap_or(Variant::Isolated),
            r.chunks,
            r.mean_secs_per_chunk,
            r.record_bytes
        );
    }
    Ok(())
}

fn question_text(a: &QueryArgs) -> Result<String> {
    match (&a.question, &a.question_file) {
        (Some(q), _) => Ok(q.clone()),
        (None, Some(p)) => Ok(fs::read_to_string(p)?.trim_end().to_string()),
        (None, None) => bail!("pass --question or --question-file"),
    }
}

#[derive(Serialize)]
struct DeviationRow {
    token_index: u32,
    chunk_id: String,
    layer: usize,
    k_dev: f32,
    v_dev: f32,
}

fn cmd_query(cli: &Cli, a: &QueryArgs) -> Result<()> {
    let model = load_model(cli)?;
    let corpus = load_corpus(&a.corpus)?;
    let question = tokenize(&question_text(a)?);
    let (sys, store) = open_store(&cli.store_dir, variant_for(a.mode), &model, &corpus.meta.system_prompt, StoreConfig::default())?;
    let ids = retrieve_topn(&question, &corpus.kb, a.top_chunks)?.ids();
    let ctx = AssembledContext::from_ids(&corpus.kb, &sys.tokens, &ids, &question)?;
    let cfg = QueryConfig { mode: a.mode, ratio: a.ratio, max_new_tokens: a.max_new_tokens, ..Default::default() };
    let out = run_query(&ctx, &store, &sys, &model, &cfg)?;
    println!("{}", chunkfuse::experiment::answer_text(&out.answer));
    if let Some(p) = &a.emit_deviation {
        let st = stitch_full_reuse(&ctx, &store, &sys, &model, false)?;
        let layers = model.config().layers;
        let dev = kv_deviation(&ctx, &st.kv, &model, layers)?;
        let ranges = ctx.chunk_ranges();
        let mut rows = Vec::new();
        for (range, id) in ranges.iter().zip(ctx.chunk_ids()) {
            for pos in range.clone() {
                for layer in 0..layers {
                    rows.push(DeviationRow {
                        token_index: pos,
                        chunk_id: id.to_hex(),
                        layer: layer + 1,
                        k_dev: dev.get(pos as usize - 1, layer, chunkfuse::reprocessing::DevComponent::K),
                        v_dev: dev.get(pos as usize - 1, layer, chunkfuse::reprocessing::DevComponent::V),
                    });
                }
            }
        }
        write_csv(p, &rows)?;
    }
    if let Some(p) = &a.emit_timing {
        let sched = SchedulerConfig::default();
        let timing = serde_json::json!({
            "mode": a.mode.name(),
            "ratio": a.ratio,
            "chunks": ids.iter().map(|c| c.to_hex()).collect::<Vec<_>>(),
            "critical_tokens": out.critical.as_ref().map_or(0, |c| c.len()),
            "timing": out.timing,
            "prefill_token_equiv": out.prefill_token_equiv,
            "selection_token_equiv": out.selection_token_equiv,
            "ttft_ticks": out.timing.load_ticks + chunkfuse::scheduler::engine_ticks(&sched, out.prefill_token_equiv),
        });
        write_json(p, &timing)?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct WorkloadLine {
    arrival_tick: u64,
    question: String,
    mode: String,
    #[serde(default)]
    ratio: Option<f64>,
}

#[derive(Serialize)]
struct SummaryRow {
    scheduler: &'static str,
    request_id: u64,
    ttft_ticks: u64,
    load_ticks: u64,
    prefill_ticks: u64,
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let model = load_model(cli)?;
    let corpus = load_corpus(&a.corpus)?;
    let lines: Vec<WorkloadLine> = read_jsonl(&a.workload)?;
    ensure!(!lines.is_empty(), "empty workload");
    let mut store_cfg = StoreConfig::default();
    if let Some(bw) = &a.tier_bandwidths {
        ensure!(bw.len() == 2, "--tier-bandwidths takes cpu,disk");
        store_cfg.cpu_bandwidth = bw[0];
        store_cfg.disk_bandwidth = bw[1];
    }
    if let Some(c) = &a.tier_capacities {
        ensure!((2..=3).contains(&c.len()), "--tier-capacities takes gpu,cpu[,disk]");
        store_cfg.gpu_capacity = c[0];
        store_cfg.cpu_capacity = c[1];
        store_cfg.disk_capacity = c.get(2).copied();
    }
    let sched = SchedulerConfig {
        batch_max_tokens: a.batch_max,
        clock: if a.wall_clock { Clock::Wall { scale: 1.0 } } else { Clock::Virtual },
        ..Default::default()
    };
    let mut wl = Vec::new();
    for (i, l) in lines.iter().enumerate() {
        let mode = parse_mode(&l.mode).map_err(anyhow::Error::msg)?;
        let question = tokenize(&l.question);
        wl.push(Request {
            id: i as u64,
            chunks: retrieve_topn(&question, &corpus.kb, a.top_chunks)?.ids(),
            question,
            query: QueryConfig { mode, ratio: l.ratio.unwrap_or(0.15), max_new_tokens: 8, ..Default::default() },
            arrival: l.arrival_tick,
        });
    }
    let which = if a.run_sync {
        SchedMode::Sync
    } else if a.both {
        SchedMode::Both
    } else {
        SchedMode::Async
    };
    // modes read different record variants: one store per variant
    let variants: Vec<Variant> = {
        let mut v: Vec<Variant> = wl.iter().map(|r| variant_for(r.query.mode)).collect();
        v.sort();
        v.dedup();
        v
    };
    ensure!(variants.len() == 1, "a bench workload must use modes over one record variant (fa/fr/cacheblend or fusionrag)");
    let open = || open_store(&cli.store_dir, variants[0], &model, &corpus.meta.system_prompt, store_cfg.clone());
    let (sys, _) = open()?;
    let env = Engine { model: &model, kb: &corpus.kb, sys: &sys };
    let mut traces: Vec<(&'static str, ScheduleTrace)> = Vec::new();
    if which != SchedMode::Sync {
        traces.push(("async", run_async(&wl, &open()?.1, env, &sched)?));
    }
    if which != SchedMode::Async {
        traces.push(("sync", run_sync(&wl, &open()?.1, env, &sched)?));
    }
    let mut failures = Vec::new();
    let isolated = run_isolated(&wl, &open()?.1, env)?;
    for (name, t) in &traces {
        if let Err(e) = t.check_work_conservation() {
            failures.push(format!("{name}: {e}"));
        }
        if t.answers() != isolated {
            failures.push(format!("{name}: answers differ from isolated execution"));
        }
        println!(
            "{name}: makespan {} ticks, idle {:.3}, {} loads, {} batches",
            t.makespan(),
            t.idle_fraction(),
            t.loads.len(),
            t.batches.len()
        );
    }
    if let [(_, x), (_, s)] = traces.as_slice() {
        if x.makespan() > s.makespan() {
            failures.push(format!("async makespan {} exceeds sync {}", x.makespan(), s.makespan()));
        }
    }
    println!(
        "layer-wise prefetch (28 layers, 0.07 s/layer, 0.05 GB/layer, 100 MB/s): must prefetch {} of 28 layers",
        layers_to_prefetch(28, 0.07, 0.05e9, 100e6)
    );
    if let Some(p) = &a.trace_out {
        let map: serde_json::Map<String, serde_json::Value> =
            traces.iter().map(|(n, t)| Ok((n.to_string(), serde_json::to_value(t)?))).collect::<Result<_>>()?;
        write_json(p, &map)?;
    }
    if let Some(p) = &a.summary_out {
        let rows: Vec<SummaryRow> = traces
            .iter()
            .flat_map(|(n, t)| {
                t.requests.iter().map(move |r| SummaryRow {
                    scheduler: n,
                    request_id: r.id,
                    ttft_ticks: r.ttft(),
                    load_ticks: r.load_ticks,
                    prefill_ticks: r.prefill_ticks(),
                })
            })
            .collect();
        write_csv(p, &rows)?;
    }
    if !failures.is_empty() {
        bail!("invariant violations:\n  {}", failures.join("\n  "));
    }
    Ok(())
}

fn cmd_grid(cli: &Cli, a: &GridArgs) -> Result<()> {
    let model = load_model(cli)?;
    let mut grid: ExperimentGrid = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => ExperimentGrid::default(),
    };
    if let Some(s) = &a.seeds {
        grid.seeds = s.clone();
    }
    if let Some(r) = &a.ratios {
        grid.ratios = r.clone();
    }
    if let Some(m) = &a.modes {
        grid.modes = m.clone();
    }
    if let Some(q) = a.questions {
        grid.corpus.questions = q;
    }
    let res = run_grid(&grid, &model)?;
    let files = write_grid_outputs(&a.out, &grid, &model, &res)?;
    for r in &res.rows {
        println!(
            "{:<10} r={:<5} seed={} n={} fail={} em={:.3} f1={:.3} f1_vs_fa={:.3} nf1={} ttft={:.0}",
            r.mode, r.ratio, r.seed, r.queries, r.failures, r.em, r.f1, r.f1_vs_fa, r.normalized_f1, r.mean_ttft_ticks
        );
    }
    if !a.no_sweeps {
        let seed = grid.seeds[0];
        let c = gen_synthetic_corpus(&grid.corpus, seed)?;
        let prep = Prepared::new(&c.kb, &model, &tokenize(&c.system_prompt), grid.top_n)?;
        let qa = &c.qa[..c.qa.len().min(20)];
        let total: u64 = prep.isolated.iter().map(|r| r.size_bytes()).sum();
        let sweep_store = StoreConfig { gpu_capacity: total / 2, cpu_capacity: 0, disk_bandwidth: 2e8, ..Default::default() };
        let tp = throughput_sweep(
            &c.kb,
            qa,
            &prep,
            &model,
            &grid.modes,
            &[50.0, 100.0, 200.0, 400.0, 800.0],
            qa.len(),
            0.15,
            grid.top_chunks,
            &grid.cost,
            &sweep_store,
            seed,
        )?;
        write_csv(&a.out.join("throughput.csv"), &tp)?;
        let ln = length_sweep(&c.kb, qa, &prep, &model, &grid.modes, &[1, 2, 4, 6, 8], 0.15, &grid.cost, &grid.store)?;
        write_csv(&a.out.join("length_sweep.csv"), &ln)?;
        let w = gen_storage_workload(&StorageWorkloadSpec::default(), seed)?;
        let rep = storage_replay(&w, prep.sys.id())?;
        write_json(&a.out.join("storage.json"), &rep)?;
        println!(
            "storage replay: alt hits {} vs plain {}, redundant recompute reduction {:.1}%, storage reduction {:.1}%",
            rep.alt_hits,
            rep.plain_hits,
            rep.redundant_reduction * 100.0,
            rep.storage_reduction * 100.0
        );
    }
    println!("wrote {} to {}", files.join(", "), a.out.display());
    if !res.endpoint_violations.is_empty() {
        bail!("endpoint reduction violated:\n  {}", res.endpoint_violations.join("\n  "));
    }
    Ok(())
}

fn cmd_cache_stats(cli: &Cli, a: &CacheStatsArgs) -> Result<()> {
    if a.replay {
        let spec = StorageWorkloadSpec { queries: a.queries, ..Default::default() };
        let w = gen_storage_workload(&spec, cli.seed)?;
        let rep = storage_replay(&w, chunkfuse::corpus::ChunkId([0; 16]))?;
        println!("{}", serde_json::to_string_pretty(&rep)?);
        ensure!(rep.alt_below_plain == 0, "alternative-path match found fewer hits than the plain prefix");
        return Ok(());
    }
    let model = load_model(cli)?;
    let mut out = serde_json::Map::new();
    for v in [Variant::Isolated, Variant::Fused] {
        let dir = variant_dir(&cli.store_dir, v);
        if !dir.exists() {
            continue;
        }
        let (sys, records) = read_store_dir(&dir)?;
        let sys = sys.context("store has no system prompt record")?;
        let store = KvStore::new(StoreConfig::default(), sys.chunk_id);
        let mut tokens = 0usize;
        for r in records {
            tokens += r.tokens();
            store.put_record(r, false)?;
        }
        store.check_invariants()?;
        let tiers: serde_json::Map<String, serde_json::Value> =
            Tier::ALL.iter().map(|t| (t.name().to_string(), store.usage(*t).into())).collect();
        out.insert(
            format!("{v:?}").to_lowercase(),
            serde_json::json!({
                "records": store.len(),
                "tokens": tokens,
                "bytes": Tier::ALL.iter().map(|t| store.usage(*t)).sum::<u64>(),
                "tier_usage": tiers,
            }),
        );
    }
    ensure!(!out.is_empty(), "no store found in {}", cli.store_dir.display());
    out.insert("model_checksum".into(), model.checksum().into());
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Preprocess(a) => cmd_preprocess(&cli, a),
        Cmd::Query(a) => cmd_query(&cli, a),
        Cmd::Bench(a) => cmd_bench(&cli, a),
        Cmd::Grid(a) => cmd_grid(&cli, a),
        Cmd::GenCorpus(a) => cmd_gen_corpus(&cli, a),
        Cmd::CacheStats(a) => cmd_cache_stats(&cli, a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
