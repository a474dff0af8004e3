//! Request scheduling with tiered KV loading: a matcher, a loader moving
//! records into the GPU tier and a batching engine, run over a virtual
//! clock. `run_sync` is the load-then-compute baseline.
//!
//! One tick is one microsecond (see [`TICKS_PER_SECOND`]).

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::corpus::{ChunkId, KnowledgeBase};
use crate::error::{Error, Result};
use crate::kv_store::{KvStore, RecordHandle, Tier, TICKS_PER_SECOND};
use crate::model::Model;
use crate::preprocessing::SystemPromptKV;
use crate::reprocessing::{budget, run_query, AssembledContext, CriticalTokenSet, Mode, QueryConfig};

pub const DEFAULT_BATCH_MAX_TOKENS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub question: Vec<u32>,
    pub chunks: Vec<ChunkId>,
    pub query: QueryConfig,
    pub arrival: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestState {
    Matching,
    Loading,
    Ready,
    Running,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadTask {
    pub chunk_id: ChunkId,
    pub source: Tier,
    pub bytes: u64,
    pub latency: u64,
    pub start: u64,
    pub end: u64,
}

/// One engine step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub start: u64,
    pub end: u64,
    pub requests: Vec<u64>,
    /// Distinct chunk records read by the batch.
    pub shared_chunks: Vec<ChunkId>,
    pub tokens: usize,
    pub critical: Vec<Option<CriticalTokenSet>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestTrace {
    pub id: u64,
    pub arrival: u64,
    pub load_start: Option<u64>,
    pub load_end: Option<u64>,
    pub ready: u64,
    pub prefill_start: u64,
    pub prefill_end: u64,
    pub first_token: u64,
    /// Sum of the latencies of the load tasks this request waited on.
    pub load_ticks: u64,
    pub answer: Vec<u32>,
    pub states: Vec<RequestState>,
}

impl RequestTrace {
    pub fn ttft(&self) -> u64 {
        self.first_token - self.arrival
    }

    pub fn prefill_ticks(&self) -> u64 {
        self.prefill_end - self.prefill_start
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub requests: Vec<RequestTrace>,
    pub loads: Vec<LoadTask>,
    pub batches: Vec<BatchRecord>,
    pub start: u64,
    pub end: u64,
}

impl ScheduleTrace {
    pub fn makespan(&self) -> u64 {
        self.end - self.start
    }

    pub fn busy_ticks(&self) -> u64 {
        self.batches.iter().map(|b| b.end - b.start).sum()
    }

    pub fn idle_ticks(&self) -> u64 {
        self.makespan() - self.busy_ticks()
    }

    pub fn idle_fraction(&self) -> f64 {
        if self.makespan() == 0 {
            0.0
        } else {
            self.idle_ticks() as f64 / self.makespan() as f64
        }
    }

    pub fn answers(&self) -> BTreeMap<u64, Vec<u32>> {
        self.requests.iter().map(|r| (r.id, r.answer.clone())).collect()
    }

    /// Engine idle intervals inside `[start, end)`.
    pub fn idle_intervals(&self) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        let mut t = self.start;
        for b in &self.batches {
            if b.start > t {
                out.push((t, b.start));
            }
            t = t.max(b.end);
        }
        if self.end > t {
            out.push((t, self.end));
        }
        out
    }

    /// The engine never idles while some request is READY, batches do not
    /// overlap, and busy plus idle time adds up to the makespan.
    pub fn check_work_conservation(&self) -> Result<()> {
        for w in self.batches.windows(2) {
            if w[1].start < w[0].end {
                return Err(Error::Contract("engine batches overlap".into()));
            }
        }
        let idle = self.idle_intervals();
        for r in &self.requests {
            if r.prefill_start < r.ready {
                return Err(Error::Contract(format!("request {} ran before it was ready", r.id)));
            }
            for &(a, b) in &idle {
                if a.max(r.ready) < b.min(r.prefill_start) {
                    return Err(Error::Contract(format!(
                        "engine idle over [{a}, {b}) while request {} was ready",
                        r.id
                    )));
                }
            }
            let mut last = RequestState::Matching;
            for &s in &r.states {
                if s < last {
                    return Err(Error::Contract(format!("request {} went backwards", r.id)));
                }
                last = s;
            }
        }
        let idle_sum: u64 = idle.iter().map(|(a, b)| b - a).sum();
        if idle_sum + self.busy_ticks() != self.makespan() {
            return Err(Error::Contract("busy + idle != makespan".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clock {
    Virtual,
    /// Sleeps through simulated gaps (`scale` real seconds per simulated
    /// second) and times engine steps with the wall clock.
    Wall { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub batch_max_tokens: usize,
    /// Engine cost of one whole-model token pass.
    pub ticks_per_token: f64,
    /// Fixed cost of every engine step.
    pub step_overhead_ticks: u64,
    pub clock: Clock,
    /// Prefill unknown chunks in the engine instead of failing at submit.
    pub fallback: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            batch_max_tokens: DEFAULT_BATCH_MAX_TOKENS,
            ticks_per_token: 50.0,
            step_overhead_ticks: 200,
            clock: Clock::Virtual,
            fallback: false,
        }
    }
}

/// Virtual duration of one engine step doing `token_equiv` token passes.
pub fn engine_ticks(cfg: &SchedulerConfig, token_equiv: f64) -> u64 {
    cfg.step_overhead_ticks + (token_equiv * cfg.ticks_per_token).ceil() as u64
}

/// Everything a request needs besides the store.
#[derive(Clone, Copy)]
pub struct Engine<'a> {
    pub model: &'a Model,
    pub kb: &'a KnowledgeBase,
    pub sys: &'a SystemPromptKV,
}

impl Engine<'_> {
    pub fn context(&self, req: &Request) -> Result<AssembledContext> {
        AssembledContext::from_ids(self.kb, &self.sys.tokens, &req.chunks, &req.question)
    }
}

/// Tokens a request pushes through the engine, used for batch admission.
pub fn request_tokens(ctx: &AssembledContext, q: &QueryConfig) -> Result<usize> {
    Ok(match q.mode {
        Mode::FullAttention => ctx.total_len(),
        Mode::FullReuse => ctx.question.len(),
        Mode::CacheBlend | Mode::FusionRag => ctx.question.len() + budget(ctx, q.ratio)?,
    })
}

struct Live {
    req: Request,
    ctx: AssembledContext,
    tokens: usize,
    missing: usize,
    pins: Vec<RecordHandle>,
    load_start: Option<u64>,
    load_end: Option<u64>,
    load_ticks: u64,
    ready: u64,
    states: Vec<RequestState>,
}

struct Sim<'a> {
    store: &'a KvStore,
    env: Engine<'a>,
    cfg: &'a SchedulerConfig,
    now: u64,
    live: Vec<Live>,
    trace: ScheduleTrace,
    done: Vec<Option<RequestTrace>>,
}

impl<'a> Sim<'a> {
    fn new(store: &'a KvStore, env: Engine<'a>, cfg: &'a SchedulerConfig, workload: &[Request]) -> Result<Self> {
        validate_workload(workload)?;
        let start = workload.iter().map(|r| r.arrival).min().unwrap_or(0);
        Ok(Self {
            store,
            env,
            cfg,
            now: start,
            live: Vec::new(),
            trace: ScheduleTrace { start, end: start, ..Default::default() },
            done: vec![None; workload.len()],
        })
    }

    fn advance(&mut self, to: u64) {
        if let Clock::Wall { scale } = self.cfg.clock {
            if to > self.now {
                std::thread::sleep(Duration::from_secs_f64(
                    (to - self.now) as f64 / TICKS_PER_SECOND * scale,
                ));
            }
        }
        self.now = self.now.max(to);
    }

    /// Matching: pin what is already on the GPU and list what must move.
    fn submit(&mut self, req: Request) -> Result<(usize, Vec<ChunkId>)> {
        let ctx = self.env.context(&req)?;
        let tokens = request_tokens(&ctx, &req.query)?;
        let matched = self.store.alternative_path_match(&req.chunks);
        let mut unique = req.chunks.clone();
        unique.sort();
        unique.dedup();
        if !self.cfg.fallback {
            if let Some(c) = unique.iter().find(|c| !matched.iter().any(|m| m.chunk_id == **c)) {
                return Err(Error::MissingRecord(*c));
            }
        }
        let mut pins = Vec::new();
        let mut to_load = Vec::new();
        for c in unique.iter().filter(|c| self.store.contains(c)) {
            if self.store.tier_of(c) == Some(Tier::Gpu) {
                pins.push(self.store.handle(c)?);
            } else {
                to_load.push(*c);
            }
        }
        let idx = self.live.len();
        let mut states = vec![RequestState::Matching];
        states.push(if to_load.is_empty() { RequestState::Ready } else { RequestState::Loading });
        self.live.push(Live {
            ready: self.now,
            req,
            ctx,
            tokens,
            missing: to_load.len(),
            pins,
            load_start: None,
            load_end: None,
            load_ticks: 0,
            states,
        });
        Ok((idx, to_load))
    }

    fn load_task(&self, id: &ChunkId, start: u64) -> Result<LoadTask> {
        let source = self.store.tier_of(id).ok_or(Error::MissingRecord(*id))?;
        let bytes = self.store.size_of(id).unwrap_or(0);
        let latency = self.store.config().load_latency_ticks(bytes, source);
        Ok(LoadTask { chunk_id: *id, source, bytes, latency, start, end: start + latency })
    }

    /// Promote a loaded chunk and pin it for `waiters`. Returns the
    /// waiters that became READY.
    fn land(&mut self, id: &ChunkId, waiters: &[usize], latency: u64) -> Result<Vec<usize>> {
        self.store.promote(id)?;
        let mut ready = Vec::new();
        for &w in waiters {
            let l = &mut self.live[w];
            l.pins.push(self.store.handle(id)?);
            l.load_ticks += latency;
            l.missing -= 1;
            if l.missing == 0 {
                l.ready = self.now;
                l.load_end = Some(self.now);
                l.states.push(RequestState::Ready);
                ready.push(w);
            }
        }
        Ok(ready)
    }

    /// Runs one engine step over `batch`, advancing the clock to its end.
    fn step(&mut self, batch: &[usize]) -> Result<()> {
        let start = self.now;
        let wall = Instant::now();
        let mut answers = Vec::with_capacity(batch.len());
        let mut critical = Vec::with_capacity(batch.len());
        let mut work = 0.0f64;
        let mut shared: Vec<ChunkId> = Vec::new();
        for &i in batch {
            let l = &mut self.live[i];
            l.states.push(RequestState::Running);
            let mut q = l.req.query.clone();
            q.fallback |= self.cfg.fallback;
            let out = run_query(&l.ctx, self.store, self.env.sys, self.env.model, &q)?;
            work += out.prefill_token_equiv;
            answers.push(out.answer);
            critical.push(out.critical);
            if q.mode != Mode::FullAttention {
                shared.extend(l.req.chunks.iter().copied());
            }
        }
        shared.sort();
        shared.dedup();
        let ticks = match self.cfg.clock {
            Clock::Virtual => engine_ticks(self.cfg, work),
            Clock::Wall { .. } => (wall.elapsed().as_secs_f64() * TICKS_PER_SECOND).ceil() as u64,
        };
        let end = start + ticks;
        self.now = end;
        let mut ids = Vec::new();
        for (&i, answer) in batch.iter().zip(answers) {
            let l = &mut self.live[i];
            l.states.push(RequestState::Done);
            l.pins.clear();
            ids.push(l.req.id);
            let pos = l.req.id as usize;
            self.done[pos] = Some(RequestTrace {
                id: l.req.id,
                arrival: l.req.arrival,
                load_start: l.load_start,
                load_end: l.load_end,
                ready: l.ready,
                prefill_start: start,
                prefill_end: end,
                first_token: end,
                load_ticks: l.load_ticks,
                answer,
                states: l.states.clone(),
            });
        }
        self.trace.batches.push(BatchRecord {
            start,
            end,
            requests: ids,
            shared_chunks: shared,
            tokens: batch.iter().map(|&i| self.live[i].tokens).sum(),
            critical,
        });
        Ok(())
    }

    fn finish(mut self) -> ScheduleTrace {
        self.trace.end = self.trace.batches.last().map_or(self.trace.start, |b| b.end);
        self.trace.requests = self.done.into_iter().flatten().collect();
        self.trace
    }
}

fn validate_workload(workload: &[Request]) -> Result<()> {
    for (i, r) in workload.iter().enumerate() {
        if r.id != i as u64 {
            return Err(Error::Config(format!("request ids must be 0..n in order, found {} at {i}", r.id)));
        }
        if r.question.is_empty() {
            return Err(Error::EmptyInput("question"));
        }
    }
    Ok(())
}

/// Arrival order, ties by id.
fn arrival_order(workload: &[Request]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..workload.len()).collect();
    order.sort_by_key(|&i| (workload[i].arrival, i));
    order
}

/// Overlapped pipeline: loads run on their own FIFO channel while the
/// engine batches whatever is READY. Engine steps are never preempted.
/// Arrivals are admitted in order once the chunks they pin fit in the GPU
/// tier together with those of admitted requests, so partial pins cannot
/// deadlock.
pub fn run_async(
    workload: &[Request],
    store: &KvStore,
    env: Engine<'_>,
    cfg: &SchedulerConfig,
) -> Result<ScheduleTrace> {
    let mut sim = Sim::new(store, env, cfg, workload)?;
    let mut arrivals: VecDeque<usize> = arrival_order(workload).into();
    // chunk -> (task index, waiting live indices)
    let mut in_flight: HashMap<ChunkId, (usize, Vec<usize>)> = HashMap::new();
    let mut pending: VecDeque<ChunkId> = VecDeque::new();
    let mut loader_free = sim.now;
    let mut ready: VecDeque<usize> = VecDeque::new();
    let mut stalled: Vec<ChunkId> = Vec::new();
    let mut engine_free = sim.now;
    let mut waiting: VecDeque<usize> = VecDeque::new();
    // live index -> chunks it will hold pinned
    let mut reserved: BTreeMap<usize, Vec<ChunkId>> = BTreeMap::new();
    let gpu_cap = store.config().gpu_capacity;

    loop {
        // completed loads at `now`, in completion order
        while let Some(id) = pending.front().copied() {
            let (task, _) = in_flight[&id];
            if sim.trace.loads[task].end > sim.now {
                break;
            }
            pending.pop_front();
            match try_land(&mut sim, &mut in_flight, &id)? {
                Some(r) => ready.extend(r),
                None => stalled.push(id),
            }
        }
        while let Some(&i) = arrivals.front() {
            if workload[i].arrival > sim.now {
                break;
            }
            arrivals.pop_front();
            waiting.push_back(i);
        }
        // admission: pinned bytes of admitted requests must fit the GPU tier
        while let Some(&i) = waiting.front() {
            let mut union: BTreeSet<ChunkId> = reserved.values().flatten().copied().collect();
            union.extend(workload[i].chunks.iter().copied());
            let need: u64 = union.iter().filter_map(|c| store.size_of(c)).sum();
            if !reserved.is_empty() && need > gpu_cap {
                break;
            }
            waiting.pop_front();
            let (idx, to_load) = sim.submit(workload[i].clone())?;
            reserved.insert(idx, workload[i].chunks.clone());
            if to_load.is_empty() {
                ready.push_back(idx);
            }
            for id in to_load {
                if let Some((task, waiters)) = in_flight.get_mut(&id) {
                    waiters.push(idx);
                    let s = sim.trace.loads[*task].start;
                    let l = &mut sim.live[idx];
                    l.load_start = Some(l.load_start.map_or(s, |x| x.min(s)));
                    continue;
                }
                let task = sim.load_task(&id, loader_free.max(sim.now))?;
                loader_free = task.end;
                let l = &mut sim.live[idx];
                l.load_start = Some(l.load_start.map_or(task.start, |x| x.min(task.start)));
                in_flight.insert(id, (sim.trace.loads.len(), vec![idx]));
                sim.trace.loads.push(task);
                pending.push_back(id);
            }
        }
        if engine_free <= sim.now && !ready.is_empty() {
            let mut batch = vec![ready.pop_front().unwrap()];
            let mut tokens = sim.live[batch[0]].tokens;
            while let Some(&next) = ready.front() {
                if tokens + sim.live[next].tokens > cfg.batch_max_tokens {
                    break;
                }
                tokens += sim.live[next].tokens;
                batch.push(ready.pop_front().unwrap());
            }
            sim.step(&batch)?;
            engine_free = sim.now;
            for i in &batch {
                reserved.remove(i);
            }
            // pins dropped: stalled promotions may now fit
            for id in std::mem::take(&mut stalled) {
                match try_land(&mut sim, &mut in_flight, &id)? {
                    Some(r) => ready.extend(r),
                    None => stalled.push(id),
                }
            }
            continue;
        }
        let next_load = pending.front().map(|id| sim.trace.loads[in_flight[id].0].end);
        let next_arrival = arrivals.front().map(|&i| workload[i].arrival);
        match [next_load, next_arrival].into_iter().flatten().min() {
            Some(t) => sim.advance(t.max(sim.now)),
            None if !stalled.is_empty() => {
                return Err(Error::CapacityExhausted {
                    needed: stalled.iter().filter_map(|c| store.size_of(c)).sum(),
                    tier: Tier::Gpu.name(),
                })
            }
            None if !waiting.is_empty() => {
                return Err(Error::Contract("admitted requests stopped making progress".into()))
            }
            None => break,
        }
    }
    Ok(sim.finish())
}

/// `None` when the GPU tier cannot take the record yet.
fn try_land(
    sim: &mut Sim<'_>,
    in_flight: &mut HashMap<ChunkId, (usize, Vec<usize>)>,
    id: &ChunkId,
) -> Result<Option<Vec<usize>>> {
    let (task, waiters) = &in_flight[id];
    let lat = sim.trace.loads[*task].latency;
    let waiters = waiters.clone();
    match sim.land(id, &waiters, lat) {
        Ok(r) => {
            in_flight.remove(id);
            Ok(Some(r))
        }
        Err(Error::CapacityExhausted { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Baseline: requests in arrival order, each loading its chunks and then
/// computing while nothing else happens.
pub fn run_sync(
    workload: &[Request],
    store: &KvStore,
    env: Engine<'_>,
    cfg: &SchedulerConfig,
) -> Result<ScheduleTrace> {
    let mut sim = Sim::new(store, env, cfg, workload)?;
    for i in arrival_order(workload) {
        sim.advance(workload[i].arrival);
        let (idx, to_load) = sim.submit(workload[i].clone())?;
        for id in to_load {
            let task = sim.load_task(&id, sim.now)?;
            sim.live[idx].load_start.get_or_insert(task.start);
            sim.advance(task.end);
            let lat = task.latency;
            sim.trace.loads.push(task);
            sim.land(&id, &[idx], lat)?;
        }
        sim.step(&[idx])?;
    }
    Ok(sim.finish())
}

/// Every request run alone on a fresh engine step with no loading, for
/// checking that scheduling never changes answers.
pub fn run_isolated(workload: &[Request], store: &KvStore, env: Engine<'_>) -> Result<BTreeMap<u64, Vec<u32>>> {
    workload
        .iter()
        .map(|r| {
            let ctx = env.context(r)?;
            Ok((r.id, run_query(&ctx, store, env.sys, env.model, &r.query)?.answer))
        })
        .collect()
}

/// Seeded Poisson arrival ticks for `n` requests at `rate` per second.
pub fn poisson_arrivals(n: usize, rate: f64, seed: u64) -> Result<Vec<u64>> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Config(format!("arrival rate must be positive, got {rate}")));
    }
    let exp = Exp::new(rate).map_err(|e| Error::Config(format!("arrival rate {rate}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0f64;
    Ok((0..n)
        .map(|_| {
            t += exp.sample(&mut rng);
            (t * TICKS_PER_SECOND).round() as u64
        })
        .collect())
}

/// How many leading layers must be fetched before compute starts so that
/// layer-wise streaming never stalls: layer `j` arrives at `j * load` and
/// is needed at `p * load + (j - 1) * compute`.
pub fn layers_to_prefetch(layers: usize, compute_secs_per_layer: f64, bytes_per_layer: f64, bandwidth: f64) -> usize {
    let load = bytes_per_layer / bandwidth;
    (0..=layers)
        .find(|&p| {
            (p + 1..=layers).all(|j| j as f64 * load <= p as f64 * load + (j - 1) as f64 * compute_secs_per_layer + 1e-12)
        })
        .unwrap_or(layers)
}
