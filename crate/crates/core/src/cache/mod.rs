//! Three-tier block caching: an in-memory micro-block tier and a local
//! persistent tier on each compute node, plus a distributed macro-block
//! tier (the BlockServer, one per availability zone) shared by all nodes
//! in the zone. Every tier runs ARC replacement; entries carry versions
//! and a version mismatch is a miss that refreshes from below.

pub mod arc;

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use thiserror::Error;

use crate::cache::arc::{ArcCache, ArcOutcome};
use crate::clock::Clock;
use crate::store::{ObjectKey, ObjectStore, StoreError};
use crate::trace::Trace;
use crate::types::{micro_block_slice, MacroBlockId, NodeId};
use crate::wire;

/// Cache key granularities: the memory tier admits micro-blocks only, the
/// distributed tier macro-blocks only, the local tier both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockKey {
    Macro(MacroBlockId),
    Micro(MacroBlockId, u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitTier {
    Memory,
    Local,
    Distributed,
    ObjectStore,
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("corrupt cached block {0:?}")]
    Corrupt(MacroBlockId),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TierStats {
    pub hits: u64,
    pub misses: u64,
    pub bytes_served: u64,
}

impl TierStats {
    fn hit(&mut self, bytes: usize) {
        self.hits += 1;
        self.bytes_served += bytes as u64;
    }
}

#[derive(Debug)]
struct Entry {
    version: u64,
    bytes: Vec<u8>,
}

/// One ARC-managed tier: residency decided by ARC, bytes held alongside,
/// per-key access counts kept for access-sequence export.
struct Tier {
    arc: ArcCache<BlockKey>,
    data: BTreeMap<BlockKey, Entry>,
    counts: BTreeMap<BlockKey, u64>,
    stats: TierStats,
    latency_ms: u64,
}

impl Tier {
    fn new(capacity: usize, latency_ms: u64) -> Tier {
        Tier {
            arc: ArcCache::new(capacity),
            data: BTreeMap::new(),
            counts: BTreeMap::new(),
            stats: TierStats::default(),
            latency_ms,
        }
    }

    /// Probes the tier. A resident entry with version >= expected is a
    /// hit; an older version is treated as a miss and dropped so the
    /// refetched bytes re-enter through admission.
    fn lookup(&mut self, key: BlockKey, expected_version: u64, clock: &Clock) -> Option<Vec<u8>> {
        clock.advance(self.latency_ms);
        *self.counts.entry(key).or_insert(0) += 1;
        let fresh = match self.data.get(&key) {
            Some(entry) if entry.version >= expected_version => true,
            Some(_) => false,
            None => {
                self.stats.misses += 1;
                return None;
            }
        };
        if fresh {
            let outcome = self.arc_access(key);
            self.apply(outcome);
            let bytes = self.data.get(&key).expect("resident entry").bytes.clone();
            self.stats.hit(bytes.len());
            Some(bytes)
        } else {
            self.data.remove(&key);
            self.stats.misses += 1;
            None
        }
    }

    fn arc_access(&mut self, key: BlockKey) -> ArcOutcome<BlockKey> {
        self.arc.access(key)
    }

    fn apply(&mut self, outcome: ArcOutcome<BlockKey>) {
        if let ArcOutcome::Miss { evicted } = outcome {
            for key in evicted {
                self.data.remove(&key);
            }
        }
    }

    fn admit(&mut self, key: BlockKey, version: u64, bytes: Vec<u8>) {
        let outcome = self.arc_access(key);
        self.apply(outcome);
        if self.arc.is_resident(&key) {
            self.data.insert(key, Entry { version, bytes });
        }
    }

    fn resident_blocks(&self) -> Vec<BlockKey> {
        self.arc.residents()
    }
}

#[derive(Debug, Clone)]
pub struct CacheConfig {
    pub memory_entries: usize,
    pub local_entries: usize,
    pub memory_latency_ms: u64,
    pub local_latency_ms: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            memory_entries: 64,
            local_entries: 512,
            memory_latency_ms: 0,
            local_latency_ms: 1,
        }
    }
}

/// The shared macro-block cache service for one availability zone.
pub struct BlockServer {
    clock: Rc<Clock>,
    store: Rc<dyn ObjectStore>,
    tier: RefCell<Tier>,
}

impl BlockServer {
    pub const LATENCY_MS: u64 = 5;

    pub fn new(clock: Rc<Clock>, store: Rc<dyn ObjectStore>, capacity: usize) -> Rc<BlockServer> {
        Rc::new(BlockServer {
            clock,
            store,
            tier: RefCell::new(Tier::new(capacity, Self::LATENCY_MS)),
        })
    }

    /// Serves a macro block, fetching and admitting from the object store
    /// on miss. Returns the bytes and whether this was a cache hit.
    pub fn get_macro(
        &self,
        id: MacroBlockId,
        key: &ObjectKey,
        expected_version: u64,
    ) -> Result<(Vec<u8>, bool), CacheError> {
        let mut tier = self.tier.borrow_mut();
        if let Some(bytes) = tier.lookup(BlockKey::Macro(id), expected_version, &self.clock) {
            return Ok((bytes, true));
        }
        let bytes = self.store.get(key)?;
        tier.admit(BlockKey::Macro(id), expected_version, bytes.clone());
        Ok((bytes, false))
    }

    pub fn stats(&self) -> TierStats {
        self.tier.borrow().stats
    }

    pub fn resident_blocks(&self) -> Vec<MacroBlockId> {
        self.tier
            .borrow()
            .resident_blocks()
            .into_iter()
            .filter_map(|k| match k {
                BlockKey::Macro(id) => Some(id),
                BlockKey::Micro(..) => None,
            })
            .collect()
    }
}

/// Leader-exported access ordering: macro blocks by cache priority, with
/// their access counts. Followers replay it to warm their own tiers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessSequence {
    pub blocks: Vec<(MacroBlockId, u64)>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CacheNodeStats {
    pub memory: TierStats,
    pub local: TierStats,
    pub store_fetches: u64,
}

/// Where read-path block requests were served, cumulatively.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OutcomeCounts {
    pub memory: u64,
    pub local: u64,
    pub distributed: u64,
    pub object_store: u64,
}

impl OutcomeCounts {
    pub fn total(&self) -> u64 {
        self.memory + self.local + self.distributed + self.object_store
    }
}

/// Per-compute-node cache: memory + local persistent tiers, a handle to
/// the zone's BlockServer, and a pinned write cache holding dumped
/// SSTable blocks until they are uploaded to shared storage.
pub struct CacheNode {
    node: NodeId,
    clock: Rc<Clock>,
    trace: Rc<Trace>,
    store: Rc<dyn ObjectStore>,
    block_server: Option<Rc<BlockServer>>,
    memory: RefCell<Tier>,
    local: RefCell<Tier>,
    write_cache: RefCell<BTreeMap<MacroBlockId, Vec<u8>>>,
    store_fetches: Cell<u64>,
    ghost_epoch: Cell<u64>,
    outcomes: Cell<OutcomeCounts>,
}

impl CacheNode {
    pub fn new(
        node: NodeId,
        clock: Rc<Clock>,
        trace: Rc<Trace>,
        store: Rc<dyn ObjectStore>,
        block_server: Option<Rc<BlockServer>>,
        config: CacheConfig,
    ) -> Rc<CacheNode> {
        Rc::new(CacheNode {
            node,
            clock,
            trace,
            store,
            block_server,
            memory: RefCell::new(Tier::new(config.memory_entries, config.memory_latency_ms)),
            local: RefCell::new(Tier::new(config.local_entries, config.local_latency_ms)),
            write_cache: RefCell::new(BTreeMap::new()),
            store_fetches: Cell::new(0),
            ghost_epoch: Cell::new(0),
            outcomes: Cell::new(OutcomeCounts::default()),
        })
    }

    pub fn node_id(&self) -> NodeId {
        self.node
    }

    pub fn stats(&self) -> CacheNodeStats {
        CacheNodeStats {
            memory: self.memory.borrow().stats,
            local: self.local.borrow().stats,
            store_fetches: self.store_fetches.get(),
        }
    }

    pub fn outcomes(&self) -> OutcomeCounts {
        self.outcomes.get()
    }

    fn note_outcome(&self, tier: HitTier) {
        let mut o = self.outcomes.get();
        match tier {
            HitTier::Memory => o.memory += 1,
            HitTier::Local => o.local += 1,
            HitTier::Distributed => o.distributed += 1,
            HitTier::ObjectStore => o.object_store += 1,
        }
        self.outcomes.set(o);
    }

    /// Simulated node crash: RAM is lost, the local persistent tier and
    /// the write cache survive on disk.
    pub fn drop_volatile(&self) {
        let latency = self.memory.borrow().latency_ms;
        let capacity = self.memory.borrow().arc.capacity();
        *self.memory.borrow_mut() = Tier::new(capacity, latency);
    }

    // ---- Write cache (pinned, not subject to replacement) ----

    pub fn pin_write(&self, id: MacroBlockId, bytes: Vec<u8>) {
        self.write_cache.borrow_mut().insert(id, bytes);
    }

    /// Releases a pinned block after upload, folding it into the local
    /// read tier so post-upload reads stay local.
    pub fn unpin_to_local(&self, id: MacroBlockId, version: u64) {
        if let Some(bytes) = self.write_cache.borrow_mut().remove(&id) {
            self.local.borrow_mut().admit(BlockKey::Macro(id), version, bytes);
        }
    }

    pub fn write_cached(&self, id: MacroBlockId) -> Option<Vec<u8>> {
        self.write_cache.borrow().get(&id).cloned()
    }

    pub fn write_cache_len(&self) -> usize {
        self.write_cache.borrow().len()
    }

    // ---- Read path ----

    fn fetch_shared_macro(
        &self,
        id: MacroBlockId,
        key: &ObjectKey,
        expected_version: u64,
    ) -> Result<(Vec<u8>, HitTier), CacheError> {
        if let Some(server) = &self.block_server {
            let (bytes, hit) = server.get_macro(id, key, expected_version)?;
            if !hit {
                self.store_fetches.set(self.store_fetches.get() + 1);
            }
            Ok((bytes, if hit { HitTier::Distributed } else { HitTier::ObjectStore }))
        } else {
            let bytes = self.store.get(key)?;
            self.store_fetches.set(self.store_fetches.get() + 1);
            Ok((bytes, HitTier::ObjectStore))
        }
    }

    /// Whole-macro-block read: Local -> Distributed -> object store, with
    /// admission into the tiers that missed.
    pub fn get_macro_block(
        &self,
        id: MacroBlockId,
        key: &ObjectKey,
        expected_version: u64,
    ) -> Result<(Vec<u8>, HitTier), CacheError> {
        if let Some(bytes) =
            self.local.borrow_mut().lookup(BlockKey::Macro(id), expected_version, &self.clock)
        {
            self.note_outcome(HitTier::Local);
            return Ok((bytes, HitTier::Local));
        }
        let (bytes, tier) = self.fetch_shared_macro(id, key, expected_version)?;
        self.local.borrow_mut().admit(BlockKey::Macro(id), expected_version, bytes.clone());
        self.note_outcome(tier);
        Ok((bytes, tier))
    }

    /// Micro-block read: Memory -> Local (micro, then containing macro) ->
    /// Distributed -> object store. Returns the serialized micro-block.
    pub fn get_micro_block(
        &self,
        id: MacroBlockId,
        key: &ObjectKey,
        micro_idx: u32,
        expected_version: u64,
    ) -> Result<(Vec<u8>, HitTier), CacheError> {
        let micro_key = BlockKey::Micro(id, micro_idx);
        if let Some(bytes) = self.memory.borrow_mut().lookup(micro_key, expected_version, &self.clock)
        {
            self.note_outcome(HitTier::Memory);
            return Ok((bytes, HitTier::Memory));
        }
        let mut local = self.local.borrow_mut();
        if let Some(bytes) = local.lookup(micro_key, expected_version, &self.clock) {
            drop(local);
            self.memory.borrow_mut().admit(micro_key, expected_version, bytes.clone());
            self.note_outcome(HitTier::Local);
            return Ok((bytes, HitTier::Local));
        }
        if let Some(macro_bytes) = local.lookup(BlockKey::Macro(id), expected_version, &self.clock) {
            drop(local);
            let micro = micro_block_slice(&macro_bytes, micro_idx)
                .map_err(|_| CacheError::Corrupt(id))?
                .to_vec();
            self.memory.borrow_mut().admit(micro_key, expected_version, micro.clone());
            self.note_outcome(HitTier::Local);
            return Ok((micro, HitTier::Local));
        }
        drop(local);

        let (macro_bytes, tier) = self.fetch_shared_macro(id, key, expected_version)?;
        let micro = micro_block_slice(&macro_bytes, micro_idx)
            .map_err(|_| CacheError::Corrupt(id))?
            .to_vec();
        self.local.borrow_mut().admit(BlockKey::Macro(id), expected_version, macro_bytes);
        self.memory.borrow_mut().admit(micro_key, expected_version, micro.clone());
        self.note_outcome(tier);
        Ok((micro, tier))
    }

    /// Best-effort prefetch into the local tier (cache warming).
    pub fn prefetch_macro(&self, id: MacroBlockId, key: &ObjectKey, expected_version: u64) {
        if self
            .local
            .borrow_mut()
            .lookup(BlockKey::Macro(id), expected_version, &self.clock)
            .is_some()
        {
            return;
        }
        if let Ok((bytes, _)) = self.fetch_shared_macro(id, key, expected_version) {
            self.local.borrow_mut().admit(BlockKey::Macro(id), expected_version, bytes);
        }
    }

    /// Direct admission, used when bytes are already in hand (migration
    /// copies, post-upload folds).
    pub fn admit_local_macro(&self, id: MacroBlockId, version: u64, bytes: Vec<u8>) {
        self.local.borrow_mut().admit(BlockKey::Macro(id), version, bytes);
    }

    pub fn local_resident_macros(&self) -> Vec<MacroBlockId> {
        self.local
            .borrow()
            .resident_blocks()
            .into_iter()
            .filter_map(|k| match k {
                BlockKey::Macro(id) => Some(id),
                BlockKey::Micro(..) => None,
            })
            .collect()
    }

    pub fn local_macro_bytes(&self, id: MacroBlockId) -> Option<Vec<u8>> {
        self.local.borrow().data.get(&BlockKey::Macro(id)).map(|e| e.bytes.clone())
    }

    /// Test hook for checksum-verification fault injection: corrupts the
    /// cached copy of a block in the local tier (one bit in the payload).
    pub fn corrupt_local_macro(&self, id: MacroBlockId) -> bool {
        let mut local = self.local.borrow_mut();
        if let Some(entry) = local.data.get_mut(&BlockKey::Macro(id)) {
            if let Some(byte) = entry.bytes.last_mut() {
                *byte ^= 0x01;
                return true;
            }
        }
        false
    }

    pub fn evict_local_macro(&self, id: MacroBlockId) {
        self.local.borrow_mut().data.remove(&BlockKey::Macro(id));
    }

    /// The frequency-favored residents of the local tier: the node's hot
    /// set, used for baseline warming and follower sync.
    pub fn hot_macro_blocks(&self) -> Vec<MacroBlockId> {
        self.local
            .borrow()
            .arc
            .frequent_residents()
            .into_iter()
            .filter_map(|k| match k {
                BlockKey::Macro(id) => Some(id),
                BlockKey::Micro(..) => None,
            })
            .collect()
    }

    /// Snapshot of the local tier's access ordering for follower warming:
    /// all resident macro blocks by recency with their access counts.
    pub fn export_access_sequence(&self) -> AccessSequence {
        let local = self.local.borrow();
        let blocks = local
            .resident_blocks()
            .into_iter()
            .filter_map(|k| match k {
                BlockKey::Macro(id) => {
                    Some((id, local.counts.get(&k).copied().unwrap_or(0)))
                }
                BlockKey::Micro(..) => None,
            })
            .collect();
        AccessSequence { blocks }
    }

    /// Warms this node's local tier from a leader's access sequence. The
    /// resolver maps each block to its object key and expected version.
    pub fn warm_from_sequence(
        &self,
        seq: &AccessSequence,
        resolve: impl Fn(MacroBlockId) -> Option<(ObjectKey, u64)>,
    ) {
        // Least-hot first so the hottest blocks end up most recent.
        for (id, _) in seq.blocks.iter().rev() {
            if let Some((key, version)) = resolve(*id) {
                self.prefetch_macro(*id, &key, version);
            }
        }
        self.trace.record(
            self.clock.now(),
            &format!("cache/{}", self.node),
            "cache_warm_sync",
            format!("blocks={}", seq.blocks.len()),
        );
    }

    /// Resizes the local tier. Scaling moves entries between the resident
    /// lists and the ghost lists; the ghost lists are then snapshotted to
    /// the object store (slow-tier ghost persistence).
    pub fn resize_local(&self, new_capacity: usize) -> Result<ObjectKey, CacheError> {
        let mut local = self.local.borrow_mut();
        let evicted = local.arc.resize(new_capacity);
        for key in evicted {
            local.data.remove(&key);
        }
        let (b1, b2) = local.arc.ghosts();
        drop(local);
        let epoch = self.ghost_epoch.get() + 1;
        self.ghost_epoch.set(epoch);
        let key = ObjectKey::new(format!("cache/ghost/{}/{}", self.node, epoch))
            .expect("ghost snapshot key");
        let mut buf = Vec::new();
        for list in [&b1, &b2] {
            wire::put_u32(&mut buf, list.len() as u32);
            for k in list {
                let (id, idx) = match k {
                    BlockKey::Macro(id) => (id.0, u32::MAX),
                    BlockKey::Micro(id, idx) => (id.0, *idx),
                };
                wire::put_u64(&mut buf, id);
                wire::put_u32(&mut buf, idx);
            }
        }
        self.store.put(&key, &buf)?;
        Ok(key)
    }
}

/// Resident-set similarity between two caches: |A ∩ B| / |A ∪ B|.
pub fn jaccard(a: &[MacroBlockId], b: &[MacroBlockId]) -> f64 {
    use std::collections::BTreeSet;
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{key, MemStore, StoreConfig};
    use crate::types::{encode_macro_block, MicroBlock, Row, Scn};

    struct Fixture {
        clock: Rc<Clock>,
        store: Rc<MemStore>,
        server: Rc<BlockServer>,
        cache: Rc<CacheNode>,
    }

    fn fixture() -> Fixture {
        let clock = Rc::new(Clock::new());
        let trace = Rc::new(Trace::disabled());
        let store = MemStore::new(clock.clone(), trace.clone(), StoreConfig::default());
        let server = BlockServer::new(clock.clone(), store.clone(), 256);
        let cache = CacheNode::new(
            NodeId(1),
            clock.clone(),
            trace,
            store.clone(),
            Some(server.clone()),
            CacheConfig::default(),
        );
        Fixture { clock, store, server, cache }
    }

    fn put_block(store: &MemStore, id: u64, k: &str) -> (MacroBlockId, ObjectKey, u32) {
        let rows = vec![Row::put(k.as_bytes().to_vec(), b"v".to_vec(), Scn(1))];
        let micro = MicroBlock::from_rows(rows).unwrap();
        let (_, bytes) = encode_macro_block(MacroBlockId(id), vec![micro]).unwrap();
        let okey = key(format!("block/{id}"));
        store.put(&okey, &bytes).unwrap();
        (MacroBlockId(id), okey, 0)
    }

    #[test]
    fn cold_get_then_memory_hit() {
        let f = fixture();
        let (id, okey, idx) = put_block(&f.store, 1, "a");
        let (_, tier) = f.cache.get_micro_block(id, &okey, idx, 0).unwrap();
        assert_eq!(tier, HitTier::ObjectStore);
        let (_, tier) = f.cache.get_micro_block(id, &okey, idx, 0).unwrap();
        assert_eq!(tier, HitTier::Memory);
    }

    #[test]
    fn tier_latencies_are_ordered() {
        let f = fixture();
        let (id, okey, idx) = put_block(&f.store, 1, "a");

        let t0 = f.clock.now();
        f.cache.get_micro_block(id, &okey, idx, 0).unwrap();
        let cold = f.clock.now() - t0;

        let t0 = f.clock.now();
        f.cache.get_micro_block(id, &okey, idx, 0).unwrap();
        let memory = f.clock.now() - t0;

        // Drop the micro entry from memory so the local tier serves it.
        f.cache.drop_volatile();
        let t0 = f.clock.now();
        let (_, tier) = f.cache.get_micro_block(id, &okey, idx, 0).unwrap();
        assert_eq!(tier, HitTier::Local);
        let local = f.clock.now() - t0;

        // Evict from local too: the distributed tier serves the macro.
        f.cache.drop_volatile();
        f.cache.evict_local_macro(id);
        let mut l = f.cache.local.borrow_mut();
        l.data.clear();
        drop(l);
        let t0 = f.clock.now();
        let (_, tier) = f.cache.get_micro_block(id, &okey, idx, 0).unwrap();
        assert_eq!(tier, HitTier::Distributed);
        let dist = f.clock.now() - t0;

        assert!(memory < local, "memory {memory} < local {local}");
        assert!(local < dist, "local {local} < distributed {dist}");
        assert!(dist < cold, "distributed {dist} < object store {cold}");
    }

    #[test]
    fn version_mismatch_bypasses_stale_tiers() {
        let f = fixture();
        let (id, okey, idx) = put_block(&f.store, 1, "a");
        let (old, _) = f.cache.get_micro_block(id, &okey, idx, 0).unwrap();

        // The object is replaced and the version bumped.
        let rows = vec![Row::put(b"a".to_vec(), b"v2".to_vec(), Scn(2))];
        let micro = MicroBlock::from_rows(rows).unwrap();
        let (_, new_bytes) = encode_macro_block(id, vec![micro]).unwrap();
        f.store.put(&okey, &new_bytes).unwrap();

        let (stale, tier) = f.cache.get_micro_block(id, &okey, idx, 0).unwrap();
        assert_eq!(tier, HitTier::Memory, "old expected version still hits");
        assert_eq!(stale, old);

        let (fresh, tier) = f.cache.get_micro_block(id, &okey, idx, 1).unwrap();
        assert_eq!(tier, HitTier::ObjectStore, "stale tiers bypassed");
        assert_ne!(fresh, old);
        let (again, tier) = f.cache.get_micro_block(id, &okey, idx, 1).unwrap();
        assert_eq!(tier, HitTier::Memory, "refreshed entry serves new version");
        assert_eq!(again, fresh);
    }

    #[test]
    fn block_server_is_shared_between_nodes() {
        let f = fixture();
        let (id, okey, idx) = put_block(&f.store, 1, "a");
        f.cache.get_micro_block(id, &okey, idx, 0).unwrap();

        let other = CacheNode::new(
            NodeId(2),
            f.clock.clone(),
            Rc::new(Trace::disabled()),
            f.store.clone(),
            Some(f.server.clone()),
            CacheConfig::default(),
        );
        let (_, tier) = other.get_micro_block(id, &okey, idx, 0).unwrap();
        assert_eq!(tier, HitTier::Distributed, "second node hits the shared tier");
    }

    #[test]
    fn crash_keeps_local_tier() {
        let f = fixture();
        let (id, okey, idx) = put_block(&f.store, 1, "a");
        f.cache.get_micro_block(id, &okey, idx, 0).unwrap();
        let fetches_before = f.cache.stats().store_fetches;
        f.cache.drop_volatile();
        let (_, tier) = f.cache.get_micro_block(id, &okey, idx, 0).unwrap();
        assert_eq!(tier, HitTier::Local, "local persistent tier survives restart");
        assert_eq!(f.cache.stats().store_fetches, fetches_before);
    }

    #[test]
    fn write_cache_pins_until_upload() {
        let f = fixture();
        f.cache.pin_write(MacroBlockId(9), b"dump".to_vec());
        assert_eq!(f.cache.write_cached(MacroBlockId(9)).unwrap(), b"dump");
        f.cache.unpin_to_local(MacroBlockId(9), 0);
        assert!(f.cache.write_cached(MacroBlockId(9)).is_none());
        assert!(f.cache.local_resident_macros().contains(&MacroBlockId(9)));
    }

    #[test]
    fn follower_warming_reaches_similarity_bar() {
        let f = fixture();
        let mut blocks = Vec::new();
        for i in 0..20 {
            blocks.push(put_block(&f.store, i, &format!("k{i:02}")));
        }
        // Leader develops a hot set.
        for _ in 0..3 {
            for (id, okey, idx) in &blocks {
                f.cache.get_micro_block(*id, okey, *idx, 0).unwrap();
            }
        }
        let seq = f.cache.export_access_sequence();
        assert!(!seq.blocks.is_empty());

        let follower = CacheNode::new(
            NodeId(2),
            f.clock.clone(),
            Rc::new(Trace::disabled()),
            f.store.clone(),
            Some(f.server.clone()),
            CacheConfig::default(),
        );
        follower.warm_from_sequence(&seq, |id| {
            Some((key(format!("block/{}", id.0)), 0))
        });
        let sim = jaccard(&f.cache.local_resident_macros(), &follower.local_resident_macros());
        assert!(sim >= 0.9, "similarity {sim} below bar");

        // Idempotent: syncing again changes nothing.
        let before = follower.local_resident_macros();
        follower.warm_from_sequence(&seq, |id| Some((key(format!("block/{}", id.0)), 0)));
        assert_eq!(follower.local_resident_macros(), before);

        // Empty sequence is a no-op.
        follower.warm_from_sequence(&AccessSequence::default(), |_| None);
        assert_eq!(follower.local_resident_macros(), before);
    }

    #[test]
    fn resize_writes_ghost_snapshot() {
        let f = fixture();
        for i in 0..8 {
            let (id, okey, idx) = put_block(&f.store, i, &format!("k{i}"));
            f.cache.get_micro_block(id, &okey, idx, 0).unwrap();
        }
        let snap_key = f.cache.resize_local(4).unwrap();
        assert_eq!(snap_key.as_str(), "cache/ghost/1/1");
        assert!(f.store.get(&snap_key).is_ok());
    }
}
