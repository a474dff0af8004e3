//! Tiered chunk cache store.
//!
//! One record per chunk id lives in exactly one of three tiers. GPU and CPU
//! are bounded in-memory arenas; DISK is unbounded by default and may be
//! backed by record files. Lookups go through per-chunk prefix hashes with
//! backtracking over the preceding chunks.

mod format;

use std::collections::{HashMap, HashSet};
use std::ops::Deref;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use format::{
    deserialize_record, read_record_file, read_store_dir, serialize_record, write_record_file,
    write_store_dir, Manifest, ManifestEntry, MANIFEST_FILE, RECORD_MAGIC, RECORD_VERSION,
};

use crate::corpus::ChunkId;
use crate::error::{Error, Result};
use crate::kv::LayeredKV;

/// Simulated clock resolution: one tick is one microsecond.
pub const TICKS_PER_SECOND: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Variant {
    Isolated = 0,
    Fused = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Gpu,
    Cpu,
    Disk,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Gpu, Tier::Cpu, Tier::Disk];

    pub fn below(self) -> Option<Tier> {
        match self {
            Tier::Gpu => Some(Tier::Cpu),
            Tier::Cpu => Some(Tier::Disk),
            Tier::Disk => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Gpu => "gpu",
            Tier::Cpu => "cpu",
            Tier::Disk => "disk",
        }
    }

    fn idx(self) -> usize {
        self as usize
    }
}

/// Cached K/V of one chunk, post-RoPE at consecutive positions from
/// `native_start`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkKVRecord {
    pub chunk_id: ChunkId,
    pub kv: LayeredKV,
    pub native_start: u32,
    pub variant: Variant,
}

impl ChunkKVRecord {
    pub fn new(chunk_id: ChunkId, kv: LayeredKV, variant: Variant) -> Result<Self> {
        let native_start = kv.positions().first().copied().unwrap_or(0);
        let consecutive = kv
            .positions()
            .iter()
            .enumerate()
            .all(|(i, &p)| p == native_start + i as u32);
        if !consecutive {
            return Err(Error::Contract(format!(
                "record for {chunk_id} must hold consecutive positions"
            )));
        }
        Ok(Self { chunk_id, kv, native_start, variant })
    }

    pub fn tokens(&self) -> usize {
        self.kv.len()
    }

    /// Bytes of K and V across all layers.
    pub fn size_bytes(&self) -> u64 {
        (self.kv.num_layers() * 2 * self.kv.len() * self.kv.row_width() * 4) as u64
    }
}

/// 128-bit rolling hash of a system prompt id followed by chunk ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PrefixKey(pub [u8; 16]);

impl PrefixKey {
    pub fn root(system: &ChunkId) -> Self {
        Self::digest(b"pfx\0", &system.0)
    }

    pub fn extend(&self, chunk: &ChunkId) -> Self {
        Self::digest(&self.0, &chunk.0)
    }

    pub fn of(system: &ChunkId, chunks: &[ChunkId]) -> Self {
        chunks.iter().fold(Self::root(system), |k, c| k.extend(c))
    }

    fn digest(a: &[u8], b: &[u8]) -> Self {
        let d = Sha256::new().chain_update(a).chain_update(b).finalize();
        let mut out = [0u8; 16];
        out.copy_from_slice(&d[..16]);
        PrefixKey(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub gpu_capacity: u64,
    pub cpu_capacity: u64,
    /// `None` = unbounded.
    pub disk_capacity: Option<u64>,
    /// Bytes per second into the GPU tier.
    pub cpu_bandwidth: f64,
    pub disk_bandwidth: f64,
    /// Where DISK-tier records are written; in memory when `None`.
    pub disk_dir: Option<PathBuf>,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            gpu_capacity: 64 << 20,
            cpu_capacity: 256 << 20,
            disk_capacity: None,
            cpu_bandwidth: 16e9,
            disk_bandwidth: 1e9,
            disk_dir: None,
        }
    }
}

impl StoreConfig {
    pub fn capacity(&self, tier: Tier) -> Option<u64> {
        match tier {
            Tier::Gpu => Some(self.gpu_capacity),
            Tier::Cpu => Some(self.cpu_capacity),
            Tier::Disk => self.disk_capacity,
        }
    }

    /// Seconds to bring `bytes` from `tier` into the GPU tier.
    pub fn load_latency_secs(&self, bytes: u64, tier: Tier) -> f64 {
        match tier {
            Tier::Gpu => 0.0,
            Tier::Cpu => bytes as f64 / self.cpu_bandwidth,
            Tier::Disk => bytes as f64 / self.disk_bandwidth,
        }
    }

    pub fn load_latency_ticks(&self, bytes: u64, tier: Tier) -> u64 {
        (self.load_latency_secs(bytes, tier) * TICKS_PER_SECOND).ceil() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchedVia {
    Prefix,
    AltPath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkMatch {
    pub chunk_id: ChunkId,
    pub via: MatchedVia,
}

/// Shared read access to a record. While any handle is alive the record
/// cannot be demoted.
#[derive(Debug)]
pub struct RecordHandle {
    rec: Arc<ChunkKVRecord>,
    pins: Arc<AtomicUsize>,
}

impl RecordHandle {
    fn new(rec: Arc<ChunkKVRecord>, pins: Arc<AtomicUsize>) -> Self {
        pins.fetch_add(1, Ordering::SeqCst);
        Self { rec, pins }
    }

    pub fn record(&self) -> &Arc<ChunkKVRecord> {
        &self.rec
    }
}

impl Clone for RecordHandle {
    fn clone(&self) -> Self {
        Self::new(self.rec.clone(), self.pins.clone())
    }
}

impl Drop for RecordHandle {
    fn drop(&mut self) {
        self.pins.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Deref for RecordHandle {
    type Target = ChunkKVRecord;
    fn deref(&self) -> &ChunkKVRecord {
        &self.rec
    }
}

#[derive(Debug)]
pub struct Fetched {
    pub handle: RecordHandle,
    /// Tier the record was in when fetched.
    pub tier: Tier,
    pub bytes: u64,
    /// Simulated time to bring it into the GPU tier.
    pub load_ticks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heat {
    pub count: u64,
    pub last_access: u64,
}

#[derive(Debug)]
enum Data {
    Mem(Arc<ChunkKVRecord>),
    File(PathBuf),
}

#[derive(Debug)]
struct Slot {
    data: Data,
    tier: Tier,
    size: u64,
    count: AtomicU64,
    last: AtomicU64,
    pins: Arc<AtomicUsize>,
}

impl Slot {
    fn heat(&self) -> Heat {
        Heat {
            count: self.count.load(Ordering::SeqCst),
            last_access: self.last.load(Ordering::SeqCst),
        }
    }

    fn load(&self) -> Result<Arc<ChunkKVRecord>> {
        match &self.data {
            Data::Mem(r) => Ok(r.clone()),
            Data::File(p) => Ok(Arc::new(read_record_file(p)?)),
        }
    }
}

#[derive(Debug, Default)]
struct Inner {
    slots: HashMap<ChunkId, Slot>,
    prefixes: HashMap<PrefixKey, ChunkId>,
    used: [u64; 3],
}

/// Tiered record store with prefix-hash lookup.
///
/// Readers (`fetch`, matching) share a read lock and bump heat atomically;
/// placement changes take the write lock.
#[derive(Debug)]
pub struct KvStore {
    cfg: StoreConfig,
    system_id: ChunkId,
    inner: RwLock<Inner>,
    clock: AtomicU64,
}

impl KvStore {
    pub fn new(cfg: StoreConfig, system_id: ChunkId) -> Self {
        Self { cfg, system_id, inner: RwLock::default(), clock: AtomicU64::new(0) }
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    pub fn system_id(&self) -> ChunkId {
        self.system_id
    }

    fn read(&self) -> RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> RwLockWriteGuard<'_, Inner> {
        self.inner.write().unwrap_or_else(|e| e.into_inner())
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::SeqCst) + 1
    }

    /// Stores `rec` under the prefix `[system, chunk]`, placing it in the
    /// highest tier that can make room. Returns the ids demoted to do so.
    pub fn put_record(&self, rec: ChunkKVRecord, overwrite: bool) -> Result<Vec<ChunkId>> {
        let id = rec.chunk_id;
        let size = rec.size_bytes();
        let mut inner = self.write();
        let mut heat = (0, self.tick());
        if let Some(old) = inner.slots.get(&id) {
            if !overwrite {
                return Err(Error::DuplicateRecord(id));
            }
            heat.0 = old.count.load(Ordering::SeqCst);
            let old = inner.slots.remove(&id).unwrap();
            inner.used[old.tier.idx()] -= old.size;
        }
        let mut demoted = Vec::new();
        let tier = Tier::ALL
            .into_iter()
            .find(|&t| self.can_make_room(&inner, size, t))
            .ok_or(Error::CapacityExhausted { needed: size, tier: "disk" })?;
        self.make_room(&mut inner, size, tier, &mut demoted)?;
        let data = self.place(Arc::new(rec), tier)?;
        inner.slots.insert(
            id,
            Slot {
                data,
                tier,
                size,
                count: AtomicU64::new(heat.0),
                last: AtomicU64::new(heat.1),
                pins: Arc::new(AtomicUsize::new(0)),
            },
        );
        inner.used[tier.idx()] += size;
        let key = PrefixKey::of(&self.system_id, &[id]);
        inner.prefixes.insert(key, id);
        Ok(demoted)
    }

    /// Records that `chunk`'s cache is also valid after `preceding`.
    pub fn register_prefix(&self, preceding: &[ChunkId], chunk: ChunkId) {
        let key = PrefixKey::of(&self.system_id, preceding).extend(&chunk);
        self.write().prefixes.insert(key, chunk);
    }

    pub fn contains(&self, id: &ChunkId) -> bool {
        self.read().slots.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.read().slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tier_of(&self, id: &ChunkId) -> Option<Tier> {
        self.read().slots.get(id).map(|s| s.tier)
    }

    pub fn heat_of(&self, id: &ChunkId) -> Option<Heat> {
        self.read().slots.get(id).map(Slot::heat)
    }

    pub fn pins_of(&self, id: &ChunkId) -> usize {
        self.read().slots.get(id).map_or(0, |s| s.pins.load(Ordering::SeqCst))
    }

    pub fn size_of(&self, id: &ChunkId) -> Option<u64> {
        self.read().slots.get(id).map(|s| s.size)
    }

    pub fn usage(&self, tier: Tier) -> u64 {
        self.read().used[tier.idx()]
    }

    /// Ids resident in `tier`, sorted.
    pub fn ids_in(&self, tier: Tier) -> Vec<ChunkId> {
        let inner = self.read();
        let mut ids: Vec<ChunkId> =
            inner.slots.iter().filter(|(_, s)| s.tier == tier).map(|(id, _)| *id).collect();
        ids.sort();
        ids
    }

    pub fn ids(&self) -> Vec<ChunkId> {
        let mut ids: Vec<ChunkId> = self.read().slots.keys().copied().collect();
        ids.sort();
        ids
    }

    /// Access a record: heat goes up, and the tier it was found in plus the
    /// simulated load latency are reported. Moving it is the caller's job.
    pub fn fetch(&self, id: &ChunkId) -> Result<Fetched> {
        let inner = self.read();
        let slot = inner.slots.get(id).ok_or(Error::MissingRecord(*id))?;
        slot.count.fetch_add(1, Ordering::SeqCst);
        slot.last.store(self.tick(), Ordering::SeqCst);
        let handle = RecordHandle::new(slot.load()?, slot.pins.clone());
        Ok(Fetched {
            handle,
            tier: slot.tier,
            bytes: slot.size,
            load_ticks: self.cfg.load_latency_ticks(slot.size, slot.tier),
        })
    }

    /// Pinned handle without touching heat.
    pub fn handle(&self, id: &ChunkId) -> Result<RecordHandle> {
        let inner = self.read();
        let slot = inner.slots.get(id).ok_or(Error::MissingRecord(*id))?;
        Ok(RecordHandle::new(slot.load()?, slot.pins.clone()))
    }

    /// Demote the coldest unpinned records of `tier` (lowest count, then
    /// oldest access) until `bytes` more fit, cascading downwards.
    pub fn evict_to_fit(&self, bytes: u64, tier: Tier) -> Result<Vec<ChunkId>> {
        let mut inner = self.write();
        let mut demoted = Vec::new();
        self.make_room(&mut inner, bytes, tier, &mut demoted)?;
        Ok(demoted)
    }

    /// Move a record into the GPU tier. Returns the ids demoted on the way.
    pub fn promote(&self, id: &ChunkId) -> Result<Vec<ChunkId>> {
        let mut inner = self.write();
        let slot = inner.slots.get(id).ok_or(Error::MissingRecord(*id))?;
        if slot.tier == Tier::Gpu {
            return Ok(Vec::new());
        }
        let (size, from) = (slot.size, slot.tier);
        let mut demoted = Vec::new();
        // keep the record itself out of the victim set while making room
        let guard = slot.pins.clone();
        guard.fetch_add(1, Ordering::SeqCst);
        let res = self.make_room(&mut inner, size, Tier::Gpu, &mut demoted);
        guard.fetch_sub(1, Ordering::SeqCst);
        res?;
        self.move_slot(&mut inner, id, from, Tier::Gpu)?;
        Ok(demoted)
    }

    /// Matches every cached chunk of `context`: via the full preceding
    /// prefix when it hits, else by dropping the earliest preceding chunks
    /// one at a time until a shorter prefix hits.
    pub fn alternative_path_match(&self, context: &[ChunkId]) -> Vec<ChunkMatch> {
        let inner = self.read();
        let mut out: Vec<ChunkMatch> = Vec::new();
        for (i, c) in context.iter().enumerate() {
            if !inner.slots.contains_key(c) || out.iter().any(|m| m.chunk_id == *c) {
                continue;
            }
            let hits = |start: usize| {
                let key = PrefixKey::of(&self.system_id, &context[start..i]).extend(c);
                inner.prefixes.get(&key) == Some(c)
            };
            let via = if hits(0) {
                Some(MatchedVia::Prefix)
            } else {
                (1..=i).find(|&s| hits(s)).map(|_| MatchedVia::AltPath)
            };
            if let Some(via) = via {
                out.push(ChunkMatch { chunk_id: *c, via });
            }
        }
        out
    }

    /// Plain prefix caching: the leading run of chunks whose full prefix hits.
    pub fn plain_prefix_match(&self, context: &[ChunkId]) -> Vec<ChunkId> {
        let inner = self.read();
        let mut key = PrefixKey::root(&self.system_id);
        let mut out = Vec::new();
        for c in context {
            key = key.extend(c);
            if inner.prefixes.get(&key) != Some(c) || !inner.slots.contains_key(c) {
                break;
            }
            out.push(*c);
        }
        out
    }

    /// Every record, loaded into memory, sorted by id.
    pub fn snapshot(&self) -> Result<Vec<Arc<ChunkKVRecord>>> {
        let inner = self.read();
        let mut ids: Vec<&ChunkId> = inner.slots.keys().collect();
        ids.sort();
        ids.into_iter().map(|id| inner.slots[id].load()).collect()
    }

    /// Single-copy and capacity accounting checks.
    pub fn check_invariants(&self) -> Result<()> {
        let inner = self.read();
        let mut used = [0u64; 3];
        for s in inner.slots.values() {
            used[s.tier.idx()] += s.size;
        }
        if used != inner.used {
            return Err(Error::Contract(format!(
                "tier accounting drifted: {used:?} vs {:?}",
                inner.used
            )));
        }
        for t in Tier::ALL {
            if let Some(cap) = self.cfg.capacity(t) {
                if used[t.idx()] > cap {
                    return Err(Error::Contract(format!("{} tier over capacity", t.name())));
                }
            }
        }
        Ok(())
    }

    fn can_make_room(&self, inner: &Inner, bytes: u64, tier: Tier) -> bool {
        let Some(cap) = self.cfg.capacity(tier) else { return true };
        if bytes > cap {
            return false;
        }
        let movable: u64 = inner
            .slots
            .values()
            .filter(|s| s.tier == tier && s.pins.load(Ordering::SeqCst) == 0)
            .map(|s| s.size)
            .sum();
        inner.used[tier.idx()] - movable + bytes <= cap
    }

    fn make_room(
        &self,
        inner: &mut Inner,
        bytes: u64,
        tier: Tier,
        demoted: &mut Vec<ChunkId>,
    ) -> Result<()> {
        let Some(cap) = self.cfg.capacity(tier) else { return Ok(()) };
        let exhausted = Error::CapacityExhausted { needed: bytes, tier: tier.name() };
        if bytes > cap {
            return Err(exhausted);
        }
        while inner.used[tier.idx()] + bytes > cap {
            let victim = inner
                .slots
                .iter()
                .filter(|(_, s)| s.tier == tier && s.pins.load(Ordering::SeqCst) == 0)
                .min_by_key(|(id, s)| {
                    let h = s.heat();
                    (h.count, h.last_access, **id)
                })
                .map(|(id, s)| (*id, s.size));
            let Some((id, size)) = victim else { return Err(exhausted) };
            // skip tiers that cannot take it at all (e.g. zero capacity)
            let mut below = tier.below();
            while let Some(t) = below {
                if self.can_make_room(inner, size, t) {
                    break;
                }
                below = t.below();
            }
            let Some(below) = below else { return Err(exhausted) };
            self.make_room(inner, size, below, demoted)?;
            self.move_slot(inner, &id, tier, below)?;
            demoted.push(id);
        }
        Ok(())
    }

    fn move_slot(&self, inner: &mut Inner, id: &ChunkId, from: Tier, to: Tier) -> Result<()> {
        let slot = inner.slots.get(id).ok_or(Error::MissingRecord(*id))?;
        let rec = slot.load()?;
        let data = self.place(rec, to)?;
        if let Data::File(old) = &slot.data {
            if !matches!(&data, Data::File(p) if p == old) {
                let _ = std::fs::remove_file(old);
            }
        }
        let size = slot.size;
        let slot = inner.slots.get_mut(id).unwrap();
        slot.data = data;
        slot.tier = to;
        inner.used[from.idx()] -= size;
        inner.used[to.idx()] += size;
        Ok(())
    }

    fn place(&self, rec: Arc<ChunkKVRecord>, tier: Tier) -> Result<Data> {
        match (&self.cfg.disk_dir, tier) {
            (Some(dir), Tier::Disk) => {
                let path = Manifest::record_path(dir, &rec.chunk_id);
                write_record_file(&path, &rec)?;
                Ok(Data::File(path))
            }
            _ => Ok(Data::Mem(rec)),
        }
    }
}

/// Ids of all records pinned right now, for diagnostics.
pub fn pinned_ids(store: &KvStore) -> HashSet<ChunkId> {
    let inner = store.read();
    inner
        .slots
        .iter()
        .filter(|(_, s)| s.pins.load(Ordering::SeqCst) > 0)
        .map(|(id, _)| *id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv::LayerKv;

    fn id(n: u8) -> ChunkId {
        ChunkId([n; 16])
    }

    /// Record of `tokens` tokens, one layer, width 2: 16 bytes per token.
    fn rec(n: u8, tokens: usize) -> ChunkKVRecord {
        let vals: Vec<f32> = (0..tokens * 2).map(|i| i as f32 + n as f32).collect();
        let kv = LayeredKV::from_parts(
            vec![LayerKv { k: vals.clone(), v: vals }],
            (3..3 + tokens as u32).collect(),
            1,
            2,
        )
        .unwrap();
        ChunkKVRecord::new(id(n), kv, Variant::Isolated).unwrap()
    }

    fn store(gpu: u64, cpu: u64) -> KvStore {
        KvStore::new(
            StoreConfig { gpu_capacity: gpu, cpu_capacity: cpu, ..Default::default() },
            id(0),
        )
    }

    #[test]
    fn duplicate_put_requires_overwrite() {
        let s = store(1000, 1000);
        s.put_record(rec(1, 2), false).unwrap();
        assert!(matches!(s.put_record(rec(1, 2), false), Err(Error::DuplicateRecord(_))));
        let mut fused = rec(1, 2);
        fused.variant = Variant::Fused;
        s.put_record(fused, true).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.fetch(&id(1)).unwrap().handle.variant, Variant::Fused);
        s.check_invariants().unwrap();
    }

    #[test]
    fn coldest_record_is_demoted() {
        let s = store(48, 1000);
        for (n, fetches) in [(1u8, 5), (2, 1), (3, 3)] {
            s.put_record(rec(n, 1), false).unwrap();
            for _ in 0..fetches {
                s.fetch(&id(n)).unwrap();
            }
        }
        assert!(s.evict_to_fit(0, Tier::Gpu).unwrap().is_empty());
        assert_eq!(s.evict_to_fit(16, Tier::Gpu).unwrap(), vec![id(2)]);
        assert_eq!(s.tier_of(&id(2)), Some(Tier::Cpu));
    }

    #[test]
    fn equal_heat_breaks_ties_by_oldest_access() {
        let s = store(32, 1000);
        s.put_record(rec(1, 1), false).unwrap();
        s.put_record(rec(2, 1), false).unwrap();
        s.fetch(&id(2)).unwrap();
        s.fetch(&id(1)).unwrap();
        assert_eq!(s.evict_to_fit(16, Tier::Gpu).unwrap(), vec![id(2)]);
    }

    #[test]
    fn full_gpu_put_demotes_and_cascades() {
        let s = store(32, 32);
        for n in 1..=5 {
            s.put_record(rec(n, 1), false).unwrap();
        }
        assert_eq!(s.ids_in(Tier::Gpu), vec![id(4), id(5)]);
        assert_eq!(s.ids_in(Tier::Cpu), vec![id(2), id(3)]);
        assert_eq!(s.ids_in(Tier::Disk), vec![id(1)]);
        s.check_invariants().unwrap();
    }

    #[test]
    fn pinned_records_are_never_demoted() {
        let s = store(32, 1000);
        s.put_record(rec(1, 1), false).unwrap();
        s.put_record(rec(2, 1), false).unwrap();
        let h = s.handle(&id(1)).unwrap();
        assert_eq!(s.evict_to_fit(16, Tier::Gpu).unwrap(), vec![id(2)]);
        assert!(matches!(
            s.evict_to_fit(32, Tier::Gpu),
            Err(Error::CapacityExhausted { .. })
        ));
        drop(h);
        assert_eq!(s.pins_of(&id(1)), 0);
        assert_eq!(s.evict_to_fit(32, Tier::Gpu).unwrap(), vec![id(1)]);
    }

    #[test]
    fn oversize_request_is_an_error() {
        let s = store(32, 1000);
        assert!(s.evict_to_fit(33, Tier::Gpu).is_err());
    }

    #[test]
    fn fetch_reports_tier_latency_and_heat() {
        let cfg = StoreConfig {
            gpu_capacity: 0,
            cpu_capacity: 0,
            disk_bandwidth: 1e6,
            ..Default::default()
        };
        let s = KvStore::new(cfg, id(0));
        s.put_record(rec(1, 4), false).unwrap();
        let f = s.fetch(&id(1)).unwrap();
        assert_eq!(f.tier, Tier::Disk);
        assert_eq!(f.bytes, 64);
        // 64 B at 1 MB/s is 64 µs
        assert_eq!(f.load_ticks, 64);
        s.fetch(&id(1)).unwrap();
        assert_eq!(s.heat_of(&id(1)).unwrap().count, 2);

        let g = store(1000, 1000);
        g.put_record(rec(1, 4), false).unwrap();
        assert_eq!(g.fetch(&id(1)).unwrap().load_ticks, 0);
        assert!(matches!(g.fetch(&id(9)), Err(Error::MissingRecord(_))));
    }

    #[test]
    fn promote_moves_into_gpu() {
        let s = store(32, 1000);
        for n in 1..=3 {
            s.put_record(rec(n, 1), false).unwrap();
        }
        assert_eq!(s.tier_of(&id(1)), Some(Tier::Cpu));
        let demoted = s.promote(&id(1)).unwrap();
        assert_eq!(demoted, vec![id(2)]);
        assert_eq!(s.tier_of(&id(1)), Some(Tier::Gpu));
        s.check_invariants().unwrap();
    }

    #[test]
    fn alternative_path_example() {
        let (a, b) = (id(1), id(2));
        let s = store(1000, 1000);
        s.put_record(rec(2, 1), false).unwrap();
        s.put_record(rec(1, 1), false).unwrap();
        let m = s.alternative_path_match(&[b, a]);
        assert_eq!(
            m,
            vec![
                ChunkMatch { chunk_id: b, via: MatchedVia::Prefix },
                ChunkMatch { chunk_id: a, via: MatchedVia::AltPath },
            ]
        );
        assert_eq!(s.plain_prefix_match(&[b, a]), vec![b]);
        assert!(s.alternative_path_match(&[id(7), id(8)]).is_empty());
    }

    #[test]
    fn registered_longer_prefix_matches_as_prefix() {
        let s = store(1000, 1000);
        s.put_record(rec(1, 1), false).unwrap();
        s.put_record(rec(2, 1), false).unwrap();
        s.register_prefix(&[id(1)], id(2));
        let m = s.alternative_path_match(&[id(1), id(2)]);
        assert!(m.iter().all(|m| m.via == MatchedVia::Prefix));
        assert_eq!(s.plain_prefix_match(&[id(1), id(2)]), vec![id(1), id(2)]);
    }

    #[test]
    fn every_permutation_of_every_subset_matches() {
        fn perms(items: &[ChunkId], out: &mut Vec<Vec<ChunkId>>, cur: &mut Vec<ChunkId>) {
            out.push(cur.clone());
            for x in items {
                if !cur.contains(x) {
                    cur.push(*x);
                    perms(items, out, cur);
                    cur.pop();
                }
            }
        }
        for n in 1..=5u8 {
            let s = store(1 << 20, 1 << 20);
            let ids: Vec<ChunkId> = (1..=n).map(id).collect();
            for i in 1..=n {
                s.put_record(rec(i, 1), false).unwrap();
            }
            let mut all = Vec::new();
            perms(&ids, &mut all, &mut Vec::new());
            for ctx in all.iter().filter(|c| !c.is_empty()) {
                let mut got: Vec<ChunkId> =
                    s.alternative_path_match(ctx).iter().map(|m| m.chunk_id).collect();
                got.sort();
                let mut want = ctx.clone();
                want.sort();
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn record_round_trip_and_errors() {
        let r = rec(4, 3);
        let bytes = serialize_record(&r);
        assert_eq!(&bytes[..4], b"FKVC");
        assert_eq!(deserialize_record(&bytes).unwrap(), r);
        assert!(matches!(
            deserialize_record(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(deserialize_record(&bad), Err(Error::BadMagic { .. })));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(
            deserialize_record(&v2),
            Err(Error::VersionMismatch { found: 2, .. })
        ));
    }

    #[test]
    fn disk_tier_can_be_file_backed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = StoreConfig {
            gpu_capacity: 16,
            cpu_capacity: 0,
            disk_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let s = KvStore::new(cfg, id(0));
        s.put_record(rec(1, 1), false).unwrap();
        s.put_record(rec(2, 1), false).unwrap();
        let path = Manifest::record_path(dir.path(), &id(1));
        assert!(path.exists());
        assert_eq!(*s.fetch(&id(1)).unwrap().handle, rec(1, 1));
        s.promote(&id(1)).unwrap();
        assert!(!path.exists());
        assert!(Manifest::record_path(dir.path(), &id(2)).exists());
    }

    #[test]
    fn handles_survive_demotion_of_other_records() {
        let s = store(32, 1000);
        s.put_record(rec(1, 1), false).unwrap();
        s.put_record(rec(2, 1), false).unwrap();
        let h = s.fetch(&id(1)).unwrap().handle;
        s.put_record(rec(3, 1), false).unwrap();
        assert_eq!(s.tier_of(&id(2)), Some(Tier::Cpu));
        assert_eq!(*h, rec(1, 1));
        assert!(pinned_ids(&s).contains(&id(1)));
    }
}
