//! Shared helpers for the criterion benches: deterministic fixture
//! builders kept out of the bench bodies so timings measure the kernel,
//! not setup.

use std::rc::Rc;

use shoal::cache::arc::ArcCache;
use shoal::clock::{Clock, ScnSource, SimRng};
use shoal::engine::{Engine, EngineConfig};
use shoal::log::{LogConfig, LogService};
use shoal::meta::{MetaConfig, MetaService};
use shoal::store::{MemStore, StoreConfig};
use shoal::trace::Trace;
use shoal::types::{LogStreamId, NodeId, Row, Scn, TabletId};

pub const TABLET: TabletId = TabletId(1);
pub const STREAM: LogStreamId = LogStreamId(1);

pub struct BenchRig {
    pub clock: Rc<Clock>,
    pub engine: Rc<Engine>,
    pub log: Rc<LogService>,
}

/// Engine over an instant in-memory store with the write path unbounded,
/// so benches measure engine work rather than simulated waiting.
pub fn engine_rig() -> BenchRig {
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
        scn,
        LogStreamId(0),
        MetaConfig::default(),
    );
    let cache = shoal::cache::CacheNode::new(
        NodeId(1),
        clock.clone(),
        trace.clone(),
        store.clone(),
        None,
        shoal::cache::CacheConfig::default(),
    );
    let engine = Engine::new(
        NodeId(1),
        clock.clone(),
        trace,
        store,
        cache,
        meta.clone(),
        EngineConfig {
            dump_base_ms: 0,
            memory_budget_bytes: usize::MAX / 2,
            freeze_threshold_bytes: usize::MAX / 2,
            micro_compaction: false,
            ..EngineConfig::default()
        },
    );
    engine.create_tablet(TABLET, STREAM);
    meta.acquire_sswriter(STREAM, NodeId(1), u64::MAX / 2).unwrap();
    BenchRig { clock, engine, log }
}

pub fn preload_rows(rig: &BenchRig, count: u64) {
    for i in 0..count {
        let row = Row::put(format!("key{i:08}").into_bytes(), vec![b'v'; 64], Scn(i + 1));
        rig.engine.write_row(TABLET, row).unwrap();
    }
}

pub fn warmed_arc(capacity: usize, warm_accesses: u64, key_space: u64) -> ArcCache<u64> {
    let mut arc = ArcCache::new(capacity);
    let mut rng = SimRng::new(99);
    for _ in 0..warm_accesses {
        arc.access(rng.below(key_space));
    }
    arc
}
