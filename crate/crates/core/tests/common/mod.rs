//! Shared test support: independent reference oracles and fixtures.
//!
//! The oracles here deliberately avoid the production code paths they
//! check: the reference ARC is a literal transcription of the published
//! transition rules over plain vectors, the reference CRC is computed bit
//! by bit, and the multiversion oracle is a sorted map of full version
//! history.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::rc::Rc;

use shoal::cache::{BlockServer, CacheConfig, CacheNode};
use shoal::clock::{Clock, ScnSource};
use shoal::engine::{Engine, EngineConfig};
use shoal::log::{LogConfig, LogService};
use shoal::meta::{MetaConfig, MetaService};
use shoal::store::{MemStore, StoreConfig};
use shoal::trace::Trace;
use shoal::types::{LogStreamId, NodeId, Scn, TabletId};

// ---- Reference CRC-32 (bit-at-a-time; ISO-HDLC) ----

/// Processes one bit at a time with the reflected polynomial: slow and
/// obviously faithful to the definition.
pub fn reference_crc32(bytes: &[u8]) -> u32 {
    let mut crc: u32 = 0xFFFF_FFFF;
    for &byte in bytes {
        crc ^= byte as u32;
        for _ in 0..8 {
            if crc & 1 != 0 {
                crc = (crc >> 1) ^ 0xEDB8_8320;
            } else {
                crc >>= 1;
            }
        }
    }
    crc ^ 0xFFFF_FFFF
}

// ---- Reference ARC ----

/// Literal transcription of the adaptive replacement cache transition
/// rules over plain vectors (index 0 = LRU). Includes the same two
/// documented extensions as the production cache: REPLACE is a no-op
/// while the cache has free room, and resize moves residents into ghosts
/// (T1 tail first) before trimming ghost overflow.
pub struct ReferenceArc {
    pub c: usize,
    pub p: usize,
    pub t1: Vec<u64>,
    pub t2: Vec<u64>,
    pub b1: Vec<u64>,
    pub b2: Vec<u64>,
}

impl ReferenceArc {
    pub fn new(c: usize) -> ReferenceArc {
        ReferenceArc { c, p: 0, t1: Vec::new(), t2: Vec::new(), b1: Vec::new(), b2: Vec::new() }
    }

    fn replace(&mut self, requested_in_b2: bool) {
        if self.t1.len() + self.t2.len() < self.c {
            return;
        }
        if !self.t1.is_empty()
            && (self.t1.len() > self.p || (requested_in_b2 && self.t1.len() == self.p))
        {
            let victim = self.t1.remove(0);
            self.b1.push(victim);
        } else if !self.t2.is_empty() {
            let victim = self.t2.remove(0);
            self.b2.push(victim);
        } else if !self.t1.is_empty() {
            let victim = self.t1.remove(0);
            self.b1.push(victim);
        }
    }

    /// Returns true on a resident hit.
    pub fn access(&mut self, x: u64) -> bool {
        // Case I: hit in T1 or T2.
        if let Some(i) = self.t1.iter().position(|&k| k == x) {
            self.t1.remove(i);
            self.t2.push(x);
            return true;
        }
        if let Some(i) = self.t2.iter().position(|&k| k == x) {
            self.t2.remove(i);
            self.t2.push(x);
            return true;
        }
        // Case II: ghost hit in B1.
        if let Some(i) = self.b1.iter().position(|&k| k == x) {
            let delta = if self.b1.len() >= self.b2.len() {
                1
            } else {
                self.b2.len() / self.b1.len()
            };
            self.p = (self.p + delta.max(1)).min(self.c);
            self.replace(false);
            self.b1.remove(i);
            self.t2.push(x);
            return false;
        }
        // Case III: ghost hit in B2.
        if let Some(i) = self.b2.iter().position(|&k| k == x) {
            let delta = if self.b2.len() >= self.b1.len() {
                1
            } else {
                self.b1.len() / self.b2.len()
            };
            self.p = self.p.saturating_sub(delta.max(1));
            self.replace(true);
            self.b2.remove(i);
            self.t2.push(x);
            return false;
        }
        // Case IV: cold miss.
        let l1 = self.t1.len() + self.b1.len();
        if l1 == self.c {
            if self.t1.len() < self.c {
                self.b1.remove(0);
                self.replace(false);
            } else {
                self.t1.remove(0);
            }
        } else {
            let total = l1 + self.t2.len() + self.b2.len();
            if total >= self.c {
                if total == 2 * self.c {
                    self.b2.remove(0);
                }
                self.replace(false);
            }
        }
        self.t1.push(x);
        false
    }

    pub fn resize(&mut self, new_c: usize) {
        if new_c < self.c {
            while self.t1.len() + self.t2.len() > new_c {
                if !self.t1.is_empty() {
                    let victim = self.t1.remove(0);
                    self.b1.push(victim);
                } else if !self.t2.is_empty() {
                    let victim = self.t2.remove(0);
                    self.b2.push(victim);
                } else {
                    break;
                }
            }
        }
        self.c = new_c;
        self.p = self.p.min(self.c);
        while self.t1.len() + self.b1.len() > self.c {
            self.b1.remove(0);
        }
        while self.t1.len() + self.t2.len() + self.b1.len() + self.b2.len() > 2 * self.c {
            if !self.b2.is_empty() {
                self.b2.remove(0);
            } else if !self.b1.is_empty() {
                self.b1.remove(0);
            } else {
                break;
            }
        }
    }
}

// ---- Multiversion sorted-map oracle ----

/// Full version history per key; the ground truth for every read path.
#[derive(Default, Clone)]
pub struct MultiversionOracle {
    versions: BTreeMap<Vec<u8>, BTreeMap<u64, Option<Vec<u8>>>>,
}

impl MultiversionOracle {
    pub fn new() -> MultiversionOracle {
        MultiversionOracle::default()
    }

    pub fn put(&mut self, key: &[u8], value: &[u8], scn: Scn) {
        self.versions.entry(key.to_vec()).or_default().insert(scn.0, Some(value.to_vec()));
    }

    pub fn delete(&mut self, key: &[u8], scn: Scn) {
        self.versions.entry(key.to_vec()).or_default().insert(scn.0, None);
    }

    pub fn read(&self, key: &[u8], read_scn: Scn) -> Option<Vec<u8>> {
        let versions = self.versions.get(key)?;
        versions.range(..=read_scn.0).next_back().and_then(|(_, v)| v.clone())
    }

    /// Live rows in [lo, hi) at the snapshot, in key order.
    pub fn scan(&self, lo: &[u8], hi: &[u8], read_scn: Scn) -> Vec<(Vec<u8>, Vec<u8>)> {
        self.versions
            .range(lo.to_vec()..hi.to_vec())
            .filter_map(|(k, versions)| {
                versions
                    .range(..=read_scn.0)
                    .next_back()
                    .and_then(|(_, v)| v.clone())
                    .map(|v| (k.clone(), v))
            })
            .collect()
    }
}

// ---- Single-node engine fixture ----

pub struct EngineFixture {
    pub clock: Rc<Clock>,
    pub scn: Rc<ScnSource>,
    pub store: Rc<MemStore>,
    pub log: Rc<LogService>,
    pub meta: Rc<MetaService>,
    pub server: Rc<BlockServer>,
    pub engine: Rc<Engine>,
}

pub const TABLET: TabletId = TabletId(1);
pub const STREAM: LogStreamId = LogStreamId(1);
pub const NODE: NodeId = NodeId(1);

pub fn engine_fixture(config: EngineConfig) -> EngineFixture {
    let clock = Rc::new(Clock::new());
    let trace = Rc::new(Trace::disabled());
    let store = MemStore::new(clock.clone(), trace.clone(), StoreConfig::instant());
    let log = LogService::new(
        clock.clone(),
        trace.clone(),
        store.clone(),
        [NodeId(100), NodeId(101), NodeId(102)],
        LogConfig::default(),
    );
    log.create_stream(STREAM);
    let scn = Rc::new(ScnSource::new());
    let meta = MetaService::new(
        clock.clone(),
        trace.clone(),
        store.clone(),
        log.clone(),
        scn.clone(),
        LogStreamId(0),
        MetaConfig::default(),
    );
    let server = BlockServer::new(clock.clone(), store.clone(), 1024);
    let cache = CacheNode::new(
        NODE,
        clock.clone(),
        trace.clone(),
        store.clone(),
        Some(server.clone()),
        CacheConfig::default(),
    );
    let engine = Engine::new(NODE, clock.clone(), trace, store.clone(), cache, meta.clone(), config);
    engine.create_tablet(TABLET, STREAM);
    meta.acquire_sswriter(STREAM, NODE, u64::MAX / 2).expect("lease");
    EngineFixture { clock, scn, store, log, meta, server, engine }
}

/// Adds a replica engine (own cache, shared everything else) to a fixture.
pub fn add_replica(f: &EngineFixture, node: NodeId, config: EngineConfig) -> Rc<Engine> {
    let trace = Rc::new(Trace::disabled());
    let cache = CacheNode::new(
        node,
        f.clock.clone(),
        trace.clone(),
        f.store.clone(),
        Some(f.server.clone()),
        CacheConfig::default(),
    );
    let engine = Engine::new(
        node,
        f.clock.clone(),
        trace,
        f.store.clone(),
        cache,
        f.meta.clone(),
        config,
    );
    engine.create_tablet(TABLET, STREAM);
    engine
}

pub fn fast_engine_config() -> EngineConfig {
    EngineConfig {
        dump_base_ms: 0,
        micro_block_bytes: 512,
        macro_block_bytes: 2048,
        ..EngineConfig::default()
    }
}
