use chunkfuse::corpus::{tokenize, ChunkId, KnowledgeBase};
use chunkfuse::experiment::Prepared;
use chunkfuse::kv_store::{KvStore, StoreConfig, Tier, Variant, TICKS_PER_SECOND};
use chunkfuse::model::{Model, ModelConfig};
use chunkfuse::reprocessing::{Mode, QueryConfig};
use chunkfuse::scheduler::{
    poisson_arrivals, run_async, run_isolated, run_sync, Engine, Request, RequestState, SchedulerConfig,
};
use chunkfuse::synth::{context_for, gen_synthetic_corpus, CorpusSpec, QaExample};
use proptest::prelude::*;
use std::sync::OnceLock;

struct Fixture {
    model: Model,
    kb: KnowledgeBase,
    qa: Vec<QaExample>,
    prep: Prepared,
}

fn fx() -> &'static Fixture {
    static FX: OnceLock<Fixture> = OnceLock::new();
    FX.get_or_init(|| {
        let model = Model::new(ModelConfig { layers: 2, ..ModelConfig::with_seed(11) }).unwrap();
        let spec = CorpusSpec { clusters: 3, chunks_per_cluster: 4, questions: 12, ..Default::default() };
        let c = gen_synthetic_corpus(&spec, 5).unwrap();
        let prep = Prepared::new(&c.kb, &model, &tokenize(&c.system_prompt), 3).unwrap();
        Fixture { model, kb: c.kb, qa: c.qa, prep }
    })
}

fn env(f: &Fixture) -> Engine<'_> {
    Engine { model: &f.model, kb: &f.kb, sys: &f.prep.sys }
}

fn size(f: &Fixture, id: &ChunkId) -> u64 {
    f.prep.isolated.iter().find(|r| r.chunk_id == *id).unwrap().size_bytes()
}

/// Store whose GPU tier holds exactly the records not in `off_gpu`;
/// `off_gpu` records land on CPU (or DISK when `cpu_capacity` is 0).
/// Records are inserted smallest first after `off_gpu`.
fn placed_store(f: &Fixture, off_gpu: &[ChunkId], mut cfg: StoreConfig) -> KvStore {
    let mut rest: Vec<_> = f.prep.isolated.iter().filter(|r| !off_gpu.contains(&r.chunk_id)).collect();
    rest.sort_by_key(|r| (r.size_bytes(), r.chunk_id));
    cfg.gpu_capacity = rest.iter().map(|r| r.size_bytes()).sum();
    let store = KvStore::new(cfg, f.prep.sys.id());
    for id in off_gpu {
        let r = f.prep.isolated.iter().find(|r| r.chunk_id == *id).unwrap();
        store.put_record(r.clone(), false).unwrap();
    }
    for r in rest {
        store.put_record(r.clone(), false).unwrap();
    }
    for id in off_gpu {
        assert_ne!(store.tier_of(id), Some(Tier::Gpu));
    }
    store
}

fn request(id: u64, qa: &QaExample, chunks: Vec<ChunkId>, mode: Mode, arrival: u64) -> Request {
    Request {
        id,
        question: tokenize(&qa.question),
        chunks,
        query: QueryConfig { mode, max_new_tokens: 4, ..Default::default() },
        arrival,
    }
}

fn latency(bytes: u64, bandwidth: f64) -> u64 {
    (bytes as f64 / bandwidth * TICKS_PER_SECOND).ceil() as u64
}

fn prefill(cfg: &SchedulerConfig, tokens: usize) -> u64 {
    cfg.step_overhead_ticks + (tokens as f64 * cfg.ticks_per_token).ceil() as u64
}

#[test]
fn two_request_overlap() {
    let f = fx();
    let ids: Vec<ChunkId> = f.kb.chunks().iter().take(2).map(|c| c.id).collect();
    let cfg = SchedulerConfig::default();
    let store_cfg = StoreConfig { cpu_bandwidth: 2e7, ..Default::default() };
    let wl = vec![
        request(0, &f.qa[0], vec![ids[0]], Mode::FullReuse, 0),
        request(1, &f.qa[1], vec![ids[1]], Mode::FullReuse, 0),
    ];
    let l: Vec<u64> = ids.iter().map(|id| latency(size(f, id), store_cfg.cpu_bandwidth)).collect();
    let p: Vec<u64> = wl.iter().map(|r| prefill(&cfg, r.question.len())).collect();

    let sync = run_sync(&wl, &placed_store(f, &ids, store_cfg.clone()), env(f), &cfg).unwrap();
    assert_eq!(sync.makespan(), l[0] + l[1] + p[0] + p[1]);

    let asy = run_async(&wl, &placed_store(f, &ids, store_cfg.clone()), env(f), &cfg).unwrap();
    assert_eq!(asy.makespan(), (l[0] + l[1]).max(l[0] + p[0]) + p[1]);
    assert!(asy.makespan() < sync.makespan());
    assert_eq!(asy.requests[0].first_token, l[0] + p[0]);
    assert_eq!(asy.requests[0].first_token, sync.requests[0].first_token);
    assert_eq!(asy.loads.len(), 2);
    // Req2 loads while Req1 computes
    assert!(asy.loads[1].start < asy.batches[0].end && asy.loads[1].end > asy.batches[0].start);

    for t in [&sync, &asy] {
        t.check_work_conservation().unwrap();
        assert_eq!(t.busy_ticks() + t.idle_ticks(), t.makespan());
    }
    let iso = run_isolated(&wl, &placed_store(f, &ids, store_cfg), env(f)).unwrap();
    assert_eq!(asy.answers(), sync.answers());
    assert_eq!(asy.answers(), iso);
}

#[test]
fn resident_request_is_ready_immediately() {
    let f = fx();
    let chunks = context_for(&f.kb, &f.qa[2], 3).unwrap();
    let wl = vec![request(0, &f.qa[2], chunks, Mode::FusionRag, 7)];
    let cfg = SchedulerConfig::default();
    let store = f.prep.store(Variant::Fused, StoreConfig::default()).unwrap();
    let a = run_async(&wl, &store, env(f), &cfg).unwrap();
    let s = run_sync(&wl, &store, env(f), &cfg).unwrap();
    let r = &a.requests[0];
    assert_eq!(r.states, [RequestState::Matching, RequestState::Ready, RequestState::Running, RequestState::Done]);
    assert_eq!((r.load_start, r.ready, r.prefill_start), (None, 7, 7));
    assert!(a.loads.is_empty());
    assert_eq!(a.makespan(), s.makespan());
    assert_eq!(a.answers(), s.answers());
}

#[test]
fn shared_disk_chunk_loads_once() {
    let f = fx();
    let shared = f.kb.chunks()[3].id;
    let cfg = SchedulerConfig::default();
    let store_cfg = StoreConfig { cpu_capacity: 0, disk_bandwidth: 5e7, ..Default::default() };
    let store = placed_store(f, &[shared], store_cfg.clone());
    assert_eq!(store.tier_of(&shared), Some(Tier::Disk));
    let wl = vec![
        request(0, &f.qa[0], vec![shared], Mode::FullReuse, 0),
        request(1, &f.qa[1], vec![shared], Mode::FullReuse, 10),
    ];
    let t = run_async(&wl, &store, env(f), &cfg).unwrap();
    assert_eq!(t.loads.len(), 1);
    let lat = latency(size(f, &shared), store_cfg.disk_bandwidth);
    assert_eq!(t.loads[0].latency, lat);
    assert!(10 < lat);
    assert_eq!(t.requests[0].ready, lat);
    assert_eq!(t.requests[1].ready, lat);
    // both ready together, so one batch
    assert_eq!(t.batches.len(), 1);
    assert_eq!(t.batches[0].requests, vec![0, 1]);
    assert_eq!(t.batches[0].shared_chunks, vec![shared]);
    t.check_work_conservation().unwrap();
    store.check_invariants().unwrap();
}

#[test]
fn full_gpu_triggers_eviction_cascade() {
    let f = fx();
    let mut by_size: Vec<ChunkId> = f.kb.chunks().iter().map(|c| c.id).collect();
    by_size.sort_by_key(|id| (size(f, id), *id));
    let big = *by_size.last().unwrap();
    let target = by_size[by_size.len() / 2];
    let store_cfg = StoreConfig { cpu_capacity: size(f, &target) + size(f, &big), ..Default::default() };
    let store = placed_store(f, &[target, big], store_cfg.clone());
    let reference = placed_store(f, &[target, big], store_cfg);
    assert_eq!(store.tier_of(&big), Some(Tier::Cpu));
    assert_eq!(store.usage(Tier::Gpu), store.config().gpu_capacity);

    let wl = vec![request(0, &f.qa[0], vec![target], Mode::FullReuse, 0)];
    let t = run_async(&wl, &store, env(f), &SchedulerConfig::default()).unwrap();
    assert_eq!(t.requests[0].states.last(), Some(&RequestState::Done));
    let demoted = reference.promote(&target).unwrap();
    // GPU victims went to CPU, which pushed `big` to DISK
    assert!(demoted.contains(&big));
    assert_eq!(reference.tier_of(&big), Some(Tier::Disk));
    assert!(demoted.iter().any(|id| reference.tier_of(id) == Some(Tier::Cpu)));
    assert_eq!(reference.tier_of(&target), Some(Tier::Gpu));
    for id in store.ids() {
        assert_eq!(store.tier_of(&id), reference.tier_of(&id), "{}", id.to_hex());
    }
    store.check_invariants().unwrap();
}

fn poisson_wl(f: &Fixture, n: usize, rate: f64, seed: u64, mode: Mode) -> Vec<Request> {
    poisson_arrivals(n, rate, seed)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, at)| {
            let qa = &f.qa[i % f.qa.len()];
            request(i as u64, qa, context_for(&f.kb, qa, 3).unwrap(), mode, at)
        })
        .collect()
}

/// A third of the records on DISK, the rest on the GPU.
fn disk_heavy(f: &Fixture, variant: Variant) -> KvStore {
    let total: u64 = f.prep.records(variant).iter().map(|r| r.size_bytes()).sum();
    let cfg = StoreConfig {
        gpu_capacity: total * 2 / 3,
        cpu_capacity: 0,
        disk_bandwidth: 5e7,
        ..Default::default()
    };
    f.prep.store(variant, cfg).unwrap()
}

#[test]
fn poisson_disk_heavy_idles_less() {
    let f = fx();
    let cfg = SchedulerConfig::default();
    for mode in [Mode::FullReuse, Mode::FusionRag] {
        let wl = poisson_wl(f, 16, 2000.0, 3, mode);
        let variant = if mode.uses_fused() { Variant::Fused } else { Variant::Isolated };
        let a = run_async(&wl, &disk_heavy(f, variant), env(f), &cfg).unwrap();
        let s = run_sync(&wl, &disk_heavy(f, variant), env(f), &cfg).unwrap();
        a.check_work_conservation().unwrap();
        s.check_work_conservation().unwrap();
        assert!(!a.loads.is_empty());
        assert!(a.makespan() < s.makespan(), "{mode:?}: {} vs {}", a.makespan(), s.makespan());
        assert!(a.idle_fraction() < s.idle_fraction());
        let iso = run_isolated(&wl, &disk_heavy(f, variant), env(f)).unwrap();
        assert_eq!(a.answers(), s.answers());
        assert_eq!(a.answers(), iso);
    }
}

#[test]
fn batches_respect_token_cap() {
    let f = fx();
    let cfg = SchedulerConfig { batch_max_tokens: 200, ..Default::default() };
    let wl = poisson_wl(f, 10, 5000.0, 9, Mode::CacheBlend);
    let store = f.prep.store(Variant::Isolated, StoreConfig::default()).unwrap();
    let t = run_async(&wl, &store, env(f), &cfg).unwrap();
    t.check_work_conservation().unwrap();
    for b in &t.batches {
        assert!(b.tokens <= 200 || b.requests.len() == 1);
    }
    assert!(t.batches.iter().any(|b| b.requests.len() > 1));
}

#[test]
fn out_of_order_ids_are_rejected() {
    let f = fx();
    let wl = vec![request(1, &f.qa[0], vec![f.kb.chunks()[0].id], Mode::FullReuse, 0)];
    let store = f.prep.store(Variant::Isolated, StoreConfig::default()).unwrap();
    assert!(run_async(&wl, &store, env(f), &SchedulerConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn schedulers_agree_and_conserve_work(
        picks in prop::collection::vec((0usize..12, 0u64..20_000, 0usize..4, 1usize..4), 1..6),
        bw in 2e7f64..2e9,
    ) {
        let f = fx();
        let mut wl: Vec<Request> = picks
            .iter()
            .enumerate()
            .map(|(i, &(q, at, m, k))| {
                let qa = &f.qa[q];
                request(i as u64, qa, context_for(&f.kb, qa, k).unwrap(), Mode::ALL[m], at)
            })
            .collect();
        wl.sort_by_key(|r| r.arrival);
        for (i, r) in wl.iter_mut().enumerate() {
            r.id = i as u64;
        }
        // one store per variant each, so modes read the records they expect
        let store = |v| {
            let total: u64 = f.prep.records(v).iter().map(|r| r.size_bytes()).sum();
            let cfg = StoreConfig { gpu_capacity: total / 2, cpu_bandwidth: bw, disk_bandwidth: bw / 4.0, ..Default::default() };
            f.prep.store(v, cfg).unwrap()
        };
        let cfg = SchedulerConfig { fallback: true, ..Default::default() };
        for v in [Variant::Isolated, Variant::Fused] {
            let sub: Vec<Request> = wl
                .iter()
                .filter(|r| r.query.mode.uses_fused() == (v == Variant::Fused))
                .cloned()
                .enumerate()
                .map(|(i, mut r)| { r.id = i as u64; r })
                .collect();
            if sub.is_empty() {
                continue;
            }
            let a = run_async(&sub, &store(v), env(f), &cfg).unwrap();
            let s = run_sync(&sub, &store(v), env(f), &cfg).unwrap();
            a.check_work_conservation().unwrap();
            s.check_work_conservation().unwrap();
            prop_assert_eq!(a.answers(), s.answers());
            prop_assert_eq!(a.answers(), run_isolated(&sub, &store(v), env(f)).unwrap());
            prop_assert!(a.makespan() <= s.makespan(), "{} > {}", a.makespan(), s.makespan());
            for r in &a.requests {
                prop_assert!(r.states.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
