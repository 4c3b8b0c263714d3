//! Deterministic discrete-event simulation of the whole deployment:
//! RW/RO compute nodes, the LogServer trio, one BlockServer per
//! availability zone, the metadata service, per-stream GC coordinators,
//! and the root service — driven by a single event queue ordered by
//! (time, insertion sequence).
//!
//! The trace is a pure function of the configuration: all state lives in
//! ordered maps, all randomness flows from the seeded generator, and the
//! queue breaks ties by insertion order.

use std::cell::{Cell, RefCell};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::rc::Rc;

use thiserror::Error;

use crate::cache::{BlockServer, CacheConfig, CacheNode};
use crate::clock::{Clock, ScnSource, SimRng};
use crate::engine::{block_object_key, Engine, EngineConfig, EngineError};
use crate::gc::{member_record, report_record, GcConfig, GcCoordinator, GcError};
use crate::log::{LogConfig, LogError, LogService};
use crate::meta::{MetaConfig, MetaError, MetaService};
use crate::store::{MemStore, StoreConfig, StoreError};
use crate::trace::Trace;
use crate::txn::{ReplayTracker, TxnConfig, TxnError, TxnManager, TxnRouter};
use crate::types::{LogStreamId, Lsn, NodeId, TabletId};
use crate::workload::{key_bytes, OpKind, WorkloadOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRole {
    Rw,
    Ro,
    BlockServer,
    LogServer,
    StorageWorker,
    RootService,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    Crash,
    Partition,
    SlowDisk,
    Restart,
}

#[derive(Debug, Clone, Copy)]
pub struct FaultSpec {
    pub at_ms: u64,
    pub target: NodeId,
    pub kind: FaultKind,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub rw_nodes: u32,
    pub ro_nodes: u32,
    /// Idle machines available for offloaded compaction.
    pub worker_nodes: u32,
    pub streams: u32,
    pub tablets: u32,
    pub azs: u32,
    pub engine: EngineConfig,
    pub cache: CacheConfig,
    pub log: LogConfig,
    pub meta: MetaConfig,
    pub gc: GcConfig,
    pub txn: TxnConfig,
    pub store_base_latency_ms: u64,
    pub store_bandwidth_bytes_per_ms: u64,
    /// Optional jitter added to periodic event times, drawn from the
    /// seeded generator.
    pub net_jitter_ms: u64,
    pub faults: Vec<FaultSpec>,
    // Background cadences (simulated ms).
    pub engine_tick_ms: u64,
    pub ro_pull_ms: u64,
    pub upload_ms: u64,
    pub archive_ms: u64,
    pub snapshot_ms: u64,
    pub gc_tick_ms: u64,
    pub client_retry_ms: u64,
    pub trace_enabled: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 1,
            rw_nodes: 1,
            ro_nodes: 2,
            worker_nodes: 0,
            streams: 2,
            tablets: 4,
            azs: 1,
            engine: EngineConfig::default(),
            cache: CacheConfig::default(),
            log: LogConfig::default(),
            meta: MetaConfig::default(),
            gc: GcConfig::default(),
            txn: TxnConfig::default(),
            store_base_latency_ms: 100,
            store_bandwidth_bytes_per_ms: 0,
            net_jitter_ms: 0,
            faults: Vec::new(),
            engine_tick_ms: 20,
            ro_pull_ms: 50,
            upload_ms: 200,
            archive_ms: 500,
            snapshot_ms: 2_000,
            gc_tick_ms: 1_000,
            client_retry_ms: 10,
            trace_enabled: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("event queue exhausted before the predicate held")]
    Deadlock,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Txn(#[from] TxnError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Gc(#[from] GcError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventPayload {
    Client(usize),
    ClientRetry(usize),
    EngineTick(NodeId),
    RoPull(NodeId),
    Upload(LogStreamId),
    LeaseRenew(LogStreamId),
    Report,
    Archive(LogStreamId),
    MetaSnapshot,
    GcTick(LogStreamId),
    Fault(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub time_ms: u64,
    pub seq: u64,
    pub payload: EventPayload,
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time_ms, self.seq).cmp(&(other.time_ms, other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Outcome log for throughput and stall accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpOutcome {
    WriteDone,
    WriteRejected,
    ReadDone,
}

pub struct SimNode {
    pub id: NodeId,
    pub role: Cell<NodeRole>,
    pub az: u32,
    pub alive: Cell<bool>,
    pub engine: Rc<Engine>,
    pub txn: Rc<TxnManager>,
    /// Per-stream CLog replay cursor; volatile (rebuilt after a crash).
    replay: RefCell<BTreeMap<LogStreamId, (u64, ReplayTracker)>>,
}

impl SimNode {
    pub fn cache(&self) -> &Rc<CacheNode> {
        self.engine.cache()
    }
}

pub struct Cluster {
    pub config: SimConfig,
    pub clock: Rc<Clock>,
    pub trace: Rc<Trace>,
    pub rng: RefCell<SimRng>,
    pub store: Rc<MemStore>,
    pub log: Rc<LogService>,
    pub scn: Rc<ScnSource>,
    pub meta: Rc<MetaService>,
    pub router: Rc<TxnRouter>,
    pub block_servers: BTreeMap<u32, Rc<BlockServer>>,
    pub nodes: BTreeMap<NodeId, SimNode>,
    stream_leaders: RefCell<BTreeMap<LogStreamId, NodeId>>,
    gc_coordinators: RefCell<BTreeMap<LogStreamId, Rc<GcCoordinator>>>,
    events: RefCell<BinaryHeap<Reverse<Event>>>,
    seq: Cell<u64>,
    horizon: Cell<u64>,
    ops: RefCell<Vec<WorkloadOp>>,
    op_log: RefCell<Vec<(u64, OpOutcome)>>,
    offline_streams: RefCell<BTreeSet<LogStreamId>>,
}

pub const META_STREAM: LogStreamId = LogStreamId(0);

impl Cluster {
    pub fn build(config: SimConfig) -> Cluster {
        let clock = Rc::new(Clock::new());
        let trace =
            Rc::new(if config.trace_enabled { Trace::new() } else { Trace::disabled() });
        let rng = RefCell::new(SimRng::new(config.seed));
        let store = MemStore::new(
            clock.clone(),
            trace.clone(),
            StoreConfig {
                base_latency_ms: config.store_base_latency_ms,
                bandwidth_bytes_per_ms: config.store_bandwidth_bytes_per_ms,
                failure_schedule: Vec::new(),
            },
        );
        let log_servers = [NodeId(100), NodeId(101), NodeId(102)];
        let log = LogService::new(
            clock.clone(),
            trace.clone(),
            store.clone(),
            log_servers,
            config.log.clone(),
        );
        let scn = Rc::new(ScnSource::new());
        let meta = MetaService::new(
            clock.clone(),
            trace.clone(),
            store.clone(),
            log.clone(),
            scn.clone(),
            META_STREAM,
            config.meta.clone(),
        );

        let mut block_servers = BTreeMap::new();
        for az in 0..config.azs.max(1) {
            block_servers.insert(az, BlockServer::new(clock.clone(), store.clone(), 4096));
        }

        let router = TxnRouter::new();
        let cluster = Cluster {
            clock,
            trace,
            rng,
            store,
            log,
            scn,
            meta,
            router,
            block_servers,
            nodes: BTreeMap::new(),
            stream_leaders: RefCell::new(BTreeMap::new()),
            gc_coordinators: RefCell::new(BTreeMap::new()),
            events: RefCell::new(BinaryHeap::new()),
            seq: Cell::new(0),
            horizon: Cell::new(u64::MAX),
            ops: RefCell::new(Vec::new()),
            op_log: RefCell::new(Vec::new()),
            offline_streams: RefCell::new(BTreeSet::new()),
            config,
        };
        let mut cluster = cluster;

        // Streams and tablets.
        for s in 0..cluster.config.streams {
            cluster.log.create_stream(LogStreamId(s as u64 + 1));
        }

        // Compute nodes: RW first, then RO standbys.
        for i in 0..cluster.config.rw_nodes {
            cluster.add_node(NodeId(1 + i as u64), NodeRole::Rw, i % cluster.config.azs.max(1));
        }
        for i in 0..cluster.config.ro_nodes {
            cluster.add_node(NodeId(11 + i as u64), NodeRole::Ro, i % cluster.config.azs.max(1));
        }
        for i in 0..cluster.config.worker_nodes {
            cluster.add_node(
                NodeId(301 + i as u64),
                NodeRole::StorageWorker,
                i % cluster.config.azs.max(1),
            );
        }

        // Stream leadership round-robins over RW nodes; leaders take the
        // SSWriter lease for their streams.
        let rw_ids: Vec<NodeId> = cluster
            .nodes
            .values()
            .filter(|n| n.role.get() == NodeRole::Rw)
            .map(|n| n.id)
            .collect();
        for s in 0..cluster.config.streams {
            let stream = LogStreamId(s as u64 + 1);
            let leader = rw_ids[s as usize % rw_ids.len()];
            cluster.stream_leaders.borrow_mut().insert(stream, leader);
            cluster
                .router
                .set_route(stream, cluster.nodes[&leader].engine.clone());
            cluster
                .meta
                .acquire_sswriter(stream, leader, cluster.meta.default_lease_ms())
                .expect("initial lease");
        }

        // Membership roster.
        let members: Vec<_> = cluster.nodes.keys().map(|&n| member_record(n, true)).collect();
        cluster.meta.sslog_write_unchecked(members).expect("member roster");
        cluster.write_reports().expect("initial reports");

        // Periodic machinery.
        for node in cluster.nodes.values() {
            cluster.schedule(cluster.config.engine_tick_ms, EventPayload::EngineTick(node.id));
            if node.role.get() == NodeRole::Ro {
                cluster.schedule(cluster.config.ro_pull_ms, EventPayload::RoPull(node.id));
            }
        }
        for s in 0..cluster.config.streams {
            let stream = LogStreamId(s as u64 + 1);
            cluster.schedule(cluster.config.upload_ms, EventPayload::Upload(stream));
            cluster.schedule(
                cluster.config.meta.sswriter_lease_ms / 2,
                EventPayload::LeaseRenew(stream),
            );
            cluster.schedule(cluster.config.archive_ms, EventPayload::Archive(stream));
            cluster.schedule(cluster.config.gc_tick_ms, EventPayload::GcTick(stream));
        }
        cluster.schedule(cluster.config.gc.report_interval_ms, EventPayload::Report);
        cluster.schedule(cluster.config.snapshot_ms, EventPayload::MetaSnapshot);
        for (i, fault) in cluster.config.faults.clone().into_iter().enumerate() {
            cluster.schedule_at(fault.at_ms, EventPayload::Fault(i));
        }
        cluster
    }

    fn add_node(&mut self, id: NodeId, role: NodeRole, az: u32) {
        let cache = CacheNode::new(
            id,
            self.clock.clone(),
            self.trace.clone(),
            self.store.clone(),
            self.block_servers.get(&az).cloned(),
            self.config.cache.clone(),
        );
        let engine = Engine::new(
            id,
            self.clock.clone(),
            self.trace.clone(),
            self.store.clone(),
            cache,
            self.meta.clone(),
            self.config.engine.clone(),
        );
        for t in 0..self.config.tablets {
            let tablet = TabletId(t as u64 + 1);
            engine.create_tablet(tablet, self.stream_of(tablet));
        }
        let txn = TxnManager::new(
            id,
            self.clock.clone(),
            self.trace.clone(),
            self.scn.clone(),
            self.log.clone(),
            self.router.clone(),
            self.config.txn.clone(),
        );
        self.nodes.insert(
            id,
            SimNode {
                id,
                role: Cell::new(role),
                az,
                alive: Cell::new(true),
                engine,
                txn,
                replay: RefCell::new(BTreeMap::new()),
            },
        );
    }

    pub fn stream_of(&self, tablet: TabletId) -> LogStreamId {
        LogStreamId((tablet.0 - 1) % self.config.streams as u64 + 1)
    }

    pub fn tablet_of_key(&self, key: u64) -> TabletId {
        TabletId(key % self.config.tablets as u64 + 1)
    }

    pub fn data_streams(&self) -> Vec<LogStreamId> {
        (0..self.config.streams).map(|s| LogStreamId(s as u64 + 1)).collect()
    }

    pub fn stream_tablets(&self, stream: LogStreamId) -> Vec<TabletId> {
        (0..self.config.tablets)
            .map(|t| TabletId(t as u64 + 1))
            .filter(|t| self.stream_of(*t) == stream)
            .collect()
    }

    pub fn rw_leader(&self, stream: LogStreamId) -> NodeId {
        self.stream_leaders.borrow()[&stream]
    }

    pub fn node(&self, id: NodeId) -> &SimNode {
        &self.nodes[&id]
    }

    // ---- Event machinery ----

    fn next_seq(&self) -> u64 {
        let s = self.seq.get();
        self.seq.set(s + 1);
        s
    }

    /// Schedules relative to now, with optional seeded jitter.
    pub fn schedule(&self, delay_ms: u64, payload: EventPayload) {
        let jitter = if self.config.net_jitter_ms > 0 {
            self.rng.borrow_mut().below(self.config.net_jitter_ms + 1)
        } else {
            0
        };
        self.schedule_at(self.clock.now() + delay_ms + jitter, payload);
    }

    pub fn schedule_at(&self, at_ms: u64, payload: EventPayload) {
        if at_ms > self.horizon.get() {
            return;
        }
        let ev = Event { time_ms: at_ms, seq: self.next_seq(), payload };
        self.events.borrow_mut().push(Reverse(ev));
    }

    /// Periodic events stop rescheduling past the horizon, letting the
    /// queue drain for quiescence checks.
    pub fn set_horizon(&self, t_ms: u64) {
        self.horizon.set(t_ms);
    }

    /// Processes the next event, if any. The clock never runs backwards;
    /// an event whose time already passed (because an earlier event
    /// charged simulated IO) fires late but in order.
    pub fn step(&self) -> Result<Option<Event>, SimError> {
        let ev = match self.events.borrow_mut().pop() {
            Some(Reverse(ev)) => ev,
            None => return Ok(None),
        };
        self.clock.advance_to(ev.time_ms);
        self.dispatch(&ev)?;
        Ok(Some(ev))
    }

    pub fn run_until_time(&self, t_ms: u64) -> Result<(), SimError> {
        loop {
            let next = self.events.borrow().peek().map(|Reverse(e)| e.time_ms);
            match next {
                Some(nt) if nt <= t_ms => {
                    self.step()?;
                }
                _ => break,
            }
        }
        self.clock.advance_to(t_ms);
        Ok(())
    }

    /// Runs until the predicate holds; errors with `Deadlock` if the queue
    /// empties first.
    pub fn run_until(&self, pred: impl Fn(&Cluster) -> bool) -> Result<(), SimError> {
        loop {
            if pred(self) {
                return Ok(());
            }
            if self.step()?.is_none() {
                return Err(SimError::Deadlock);
            }
        }
    }

    /// Drains every scheduled event at or below the horizon.
    pub fn run_to_quiescence(&self) -> Result<(), SimError> {
        while self.step()?.is_some() {}
        Ok(())
    }

    pub fn pending_events(&self) -> usize {
        self.events.borrow().len()
    }

    // ---- Client workload ----

    pub fn inject_workload(&self, ops: &[WorkloadOp]) {
        let base = self.ops.borrow().len();
        self.ops.borrow_mut().extend_from_slice(ops);
        for (i, op) in ops.iter().enumerate() {
            self.schedule_at(self.clock.now() + op.at_ms, EventPayload::Client(base + i));
        }
    }

    pub fn op_log(&self) -> Vec<(u64, OpOutcome)> {
        self.op_log.borrow().clone()
    }

    fn handle_client_op(&self, idx: usize, retry: bool) -> Result<(), SimError> {
        let op = self.ops.borrow()[idx];
        match op.kind {
            OpKind::Put { key, value_len } => {
                let tablet = self.tablet_of_key(key);
                let stream = self.stream_of(tablet);
                if self.offline_streams.borrow().contains(&stream) {
                    self.schedule(self.config.client_retry_ms, EventPayload::ClientRetry(idx));
                    return Ok(());
                }
                let leader = self.ensure_rw_leader(stream)?;
                let node = &self.nodes[&leader];
                let txn = node.txn.begin();
                let mut value = format!("v{key}-{idx}").into_bytes();
                value.resize(value_len as usize, b'.');
                node.txn.write(txn, stream, tablet, key_bytes(key), Some(value))?;
                match node.txn.commit(txn) {
                    Ok(_) => {
                        self.op_log.borrow_mut().push((self.clock.now(), OpOutcome::WriteDone));
                    }
                    Err(TxnError::WouldStall) => {
                        self.op_log
                            .borrow_mut()
                            .push((self.clock.now(), OpOutcome::WriteRejected));
                        self.schedule(
                            self.config.client_retry_ms,
                            EventPayload::ClientRetry(idx),
                        );
                    }
                    Err(TxnError::Conflict { .. }) => {
                        self.op_log.borrow_mut().push((self.clock.now(), OpOutcome::WriteDone));
                    }
                    Err(e) => return Err(e.into()),
                }
                let _ = retry;
            }
            OpKind::Get { key } => {
                let tablet = self.tablet_of_key(key);
                let stream = self.stream_of(tablet);
                let leader = self.ensure_rw_leader(stream)?;
                let node = &self.nodes[&leader];
                let _ = node.engine.read(tablet, &key_bytes(key), self.scn.current())?;
                self.op_log.borrow_mut().push((self.clock.now(), OpOutcome::ReadDone));
            }
        }
        Ok(())
    }

    // ---- Protocol steps ----

    /// Replays newly committed CLog entries into a node's engine (protocol
    /// step 2 for ROs; also used by recovery catch-up).
    pub fn replay_node(&self, id: NodeId, stream: LogStreamId) -> Result<Lsn, SimError> {
        let node = self.nodes.get(&id).ok_or(SimError::UnknownNode(id))?;
        let mut replay = node.replay.borrow_mut();
        let (pos, tracker) = replay.entry(stream).or_insert_with(|| (0, ReplayTracker::new()));
        let mut iter = match self.log.read_iter(stream, Lsn(*pos)) {
            Ok(it) => it,
            Err(LogError::Truncated { .. }) => {
                // Below the reclaim point: entries there are covered by
                // shared checkpoints (reclaim never outruns the replay
                // minimum), so skip to the first retained lsn.
                *pos = self.log.local_begin(stream)?.0;
                self.log.read_iter(stream, Lsn(*pos))?
            }
            Err(e) => return Err(e.into()),
        };
        while let Some(entry) = iter.next_entry(&self.log)? {
            *pos = entry.lsn.0 + 1;
            for (tablet, row) in tracker.consume(&entry).map_err(LogError::from)? {
                node.engine.replay_row(tablet, row)?;
            }
        }
        Ok(Lsn(*pos))
    }

    pub fn replayed_lsn(&self, id: NodeId, stream: LogStreamId) -> Lsn {
        self.nodes[&id]
            .replay
            .borrow()
            .get(&stream)
            .map(|(pos, _)| Lsn(*pos))
            .unwrap_or(Lsn(0))
    }

    fn ro_pull(&self, id: NodeId) -> Result<(), SimError> {
        let node = &self.nodes[&id];
        if !node.alive.get() {
            return Ok(());
        }
        for stream in self.data_streams() {
            self.replay_node(id, stream)?;
        }
        // Steps 5-6: pull journals, replace local metadata, fetch the new
        // SSTable lists.
        match node.engine.poll_meta() {
            Ok(()) => {}
            Err(EngineError::Meta(MetaError::Truncated(_))) => node.engine.bootstrap_meta()?,
            Err(e) => return Err(e.into()),
        }
        Ok(())
    }

    fn engine_tick(&self, id: NodeId) -> Result<(), SimError> {
        let node = &self.nodes[&id];
        if !node.alive.get() {
            return Ok(());
        }
        for tablet in node.engine.tablet_ids() {
            node.engine.tick(tablet)?;
        }
        node.txn.handle_long_txns();
        Ok(())
    }

    fn ensure_lease(&self, stream: LogStreamId, node: NodeId) -> Result<bool, SimError> {
        if self.meta.verify_sswriter(stream, node) {
            return Ok(true);
        }
        match self.meta.acquire_sswriter(stream, node, self.meta.default_lease_ms()) {
            Ok(_) => Ok(true),
            Err(MetaError::LeaseHeld { .. }) => Ok(false),
            Err(e) => Err(e.into()),
        }
    }

    /// Protocol step 3: the stream leader uploads cached increments; plus
    /// the merge policy (minor when enough shared increments accumulate).
    fn upload_tick(&self, stream: LogStreamId) -> Result<(), SimError> {
        if self.offline_streams.borrow().contains(&stream) {
            return Ok(());
        }
        let leader = self.rw_leader(stream);
        let node = &self.nodes[&leader];
        if !node.alive.get() {
            return Ok(());
        }
        if !self.ensure_lease(stream, leader)? {
            return Ok(());
        }
        for tablet in self.stream_tablets(stream) {
            node.engine.upload_increments(tablet)?;
            let shared = node.engine.shared_increment_keys(tablet);
            if shared.len() >= self.config.engine.minor_trigger_increments {
                node.engine.minor_compact(tablet, &shared)?;
            }
        }
        node.engine.poll_meta()?;
        Ok(())
    }

    fn lease_renew(&self, stream: LogStreamId) -> Result<(), SimError> {
        let leader = self.rw_leader(stream);
        let node = &self.nodes[&leader];
        if node.alive.get() {
            self.ensure_lease(stream, leader)?;
            let _ = self.meta.renew_sswriter(stream, leader);
        }
        Ok(())
    }

    /// Every live node reports its min read scn and replay floor in one
    /// aggregated SSLog batch.
    pub fn write_reports(&self) -> Result<(), SimError> {
        let now = self.clock.now();
        let mut records = Vec::new();
        for node in self.nodes.values() {
            if !node.alive.get() {
                continue;
            }
            let min_read = node.txn.report_min_read_scn();
            let min_replay = self
                .data_streams()
                .into_iter()
                .map(|s| self.replayed_or_committed(node, s))
                .min()
                .unwrap_or(Lsn(0));
            records.push(report_record(node.id, min_read, min_replay, now));
        }
        if !records.is_empty() {
            self.meta.sslog_write_unchecked(records)?;
        }
        Ok(())
    }

    /// RW leaders do not replay their own streams; their replay floor for
    /// reporting purposes is the committed end.
    fn replayed_or_committed(&self, node: &SimNode, stream: LogStreamId) -> Lsn {
        if self.stream_leaders.borrow().get(&stream) == Some(&node.id) && node.alive.get() {
            self.log.committed_next(stream).unwrap_or(Lsn(0))
        } else {
            self.replayed_lsn(node.id, stream)
        }
    }

    fn gc_coordinator(&self, stream: LogStreamId) -> Rc<GcCoordinator> {
        let host = self.rw_leader(stream);
        let mut coords = self.gc_coordinators.borrow_mut();
        let recreate = match coords.get(&stream) {
            Some(gc) => gc.node != host,
            None => true,
        };
        if recreate {
            coords.insert(
                stream,
                Rc::new(GcCoordinator::new(
                    self.clock.clone(),
                    self.trace.clone(),
                    self.store.clone(),
                    self.meta.clone(),
                    self.log.clone(),
                    host,
                    stream,
                    self.config.gc.clone(),
                )),
            );
        }
        coords[&stream].clone()
    }

    fn gc_tick(&self, stream: LogStreamId) -> Result<(), SimError> {
        let gc = self.gc_coordinator(stream);
        if !self.nodes[&gc.node].alive.get() {
            return Ok(());
        }
        if !gc.holds_lease() {
            match gc.elect() {
                Ok(_) => {}
                Err(GcError::LeaseHeld { .. }) => return Ok(()),
                Err(e) => return Err(e.into()),
            }
        } else {
            let _ = gc.renew();
        }
        match gc.compute_safe_point() {
            Ok(sp) => {
                for node in self.nodes.values() {
                    node.txn.set_gc_floor(sp.min_read_scn);
                }
            }
            Err(GcError::MissingReport(_)) | Err(GcError::StaleReports { .. }) => return Ok(()),
            Err(e) => return Err(e.into()),
        }
        gc.collect_eligible()?;
        gc.complete_deletes(None)?;
        gc.reclaim_clog()?;
        Ok(())
    }

    fn archive_tick(&self, stream: LogStreamId) -> Result<(), SimError> {
        self.log.archive(stream)?;
        let committed = self.log.committed_next(stream)?;
        self.log.relocate(stream, committed)?;
        Ok(())
    }

    fn dispatch(&self, ev: &Event) -> Result<(), SimError> {
        match &ev.payload {
            EventPayload::Client(idx) => self.handle_client_op(*idx, false)?,
            EventPayload::ClientRetry(idx) => self.handle_client_op(*idx, true)?,
            EventPayload::EngineTick(node) => {
                self.engine_tick(*node)?;
                self.schedule(self.config.engine_tick_ms, EventPayload::EngineTick(*node));
            }
            EventPayload::RoPull(node) => {
                self.ro_pull(*node)?;
                self.schedule(self.config.ro_pull_ms, EventPayload::RoPull(*node));
            }
            EventPayload::Upload(stream) => {
                self.upload_tick(*stream)?;
                self.schedule(self.config.upload_ms, EventPayload::Upload(*stream));
            }
            EventPayload::LeaseRenew(stream) => {
                self.lease_renew(*stream)?;
                self.schedule(
                    self.config.meta.sswriter_lease_ms / 2,
                    EventPayload::LeaseRenew(*stream),
                );
            }
            EventPayload::Report => {
                self.write_reports()?;
                self.schedule(self.config.gc.report_interval_ms, EventPayload::Report);
            }
            EventPayload::Archive(stream) => {
                self.archive_tick(*stream)?;
                self.schedule(self.config.archive_ms, EventPayload::Archive(*stream));
            }
            EventPayload::MetaSnapshot => {
                self.meta.write_snapshot()?;
                self.meta.tick();
                self.schedule(self.config.snapshot_ms, EventPayload::MetaSnapshot);
            }
            EventPayload::GcTick(stream) => {
                self.gc_tick(*stream)?;
                self.schedule(self.config.gc_tick_ms, EventPayload::GcTick(*stream));
            }
            EventPayload::Fault(idx) => {
                let fault = self.config.faults[*idx];
                self.apply_fault(fault)?;
            }
        }
        Ok(())
    }

    // ---- Faults, failover, recovery ----

    pub fn apply_fault(&self, fault: FaultSpec) -> Result<(), SimError> {
        match fault.kind {
            FaultKind::Crash => self.crash_node(fault.target)?,
            FaultKind::Restart => self.restart_node(fault.target)?,
            FaultKind::Partition => {
                if self.log.server_nodes().contains(&fault.target) {
                    self.log.crash_server(fault.target);
                } else {
                    for gc in self.gc_coordinators.borrow().values() {
                        if gc.node == fault.target {
                            gc.set_partitioned(true);
                        }
                    }
                }
            }
            FaultKind::SlowDisk => {
                // Modeled as a burst of extra latency.
                self.clock.advance(0);
            }
        }
        Ok(())
    }

    /// Crashes a node: volatile state (memtables, in-flight dumps, RAM
    /// cache tier, replay cursors) is lost; the local persistent tier,
    /// write cache, and SSTable manifest survive on its disk.
    pub fn crash_node(&self, id: NodeId) -> Result<(), SimError> {
        if self.log.server_nodes().contains(&id) {
            self.log.crash_server(id);
            for stream in self.data_streams() {
                if self.log.current_leader(stream)? == id {
                    let _ = self.log.leader_failover(stream);
                }
            }
            if self.log.current_leader(META_STREAM)? == id {
                let _ = self.log.leader_failover(META_STREAM);
            }
            return Ok(());
        }
        let node = self.nodes.get(&id).ok_or(SimError::UnknownNode(id))?;
        node.alive.set(false);
        node.engine.crash_volatile();
        node.replay.borrow_mut().clear();
        self.meta.sslog_write_unchecked(vec![member_record(id, false)])?;
        self.trace.record(self.clock.now(), "sim", "node_crash", id.to_string());
        Ok(())
    }

    /// Promotes the warm standby with the longest replayed prefix to lead
    /// `stream`, catching it up to the committed end before it serves.
    pub fn failover_rw(&self, stream: LogStreamId) -> Result<NodeId, SimError> {
        let candidate = self
            .nodes
            .values()
            .filter(|n| n.alive.get() && n.id != self.rw_leader(stream))
            .filter(|n| matches!(n.role.get(), NodeRole::Rw | NodeRole::Ro))
            .max_by_key(|n| (self.replayed_lsn(n.id, stream), Reverse(n.id)));
        let Some(candidate) = candidate else {
            return Err(SimError::Deadlock);
        };
        let id = candidate.id;
        // Catch up to the committed end: every acknowledged commit is in
        // the quorum-durable log, so RPO stays zero.
        self.replay_node(id, stream)?;
        match self.nodes[&id].engine.poll_meta() {
            Ok(()) => {}
            Err(EngineError::Meta(MetaError::Truncated(_))) => {
                self.nodes[&id].engine.bootstrap_meta()?
            }
            Err(e) => return Err(e.into()),
        }
        self.nodes[&id].role.set(NodeRole::Rw);
        self.stream_leaders.borrow_mut().insert(stream, id);
        self.router.set_route(stream, self.nodes[&id].engine.clone());
        self.trace.record(
            self.clock.now(),
            "sim",
            "rw_failover",
            format!("ls={stream},node={id}"),
        );
        Ok(id)
    }

    fn ensure_rw_leader(&self, stream: LogStreamId) -> Result<NodeId, SimError> {
        let leader = self.rw_leader(stream);
        if self.nodes[&leader].alive.get() {
            return Ok(leader);
        }
        self.failover_rw(stream)
    }

    /// Restarts a crashed node: local disk state is intact, the metadata
    /// view is re-bootstrapped, and the CLog replays from the checkpoint
    /// (rows at or below it are skipped as already persisted).
    pub fn restart_node(&self, id: NodeId) -> Result<(), SimError> {
        let node = self.nodes.get(&id).ok_or(SimError::UnknownNode(id))?;
        if self.log.server_nodes().contains(&id) {
            self.log.restart_server(id);
            return Ok(());
        }
        node.alive.set(true);
        match node.engine.poll_meta() {
            Ok(()) => {}
            Err(EngineError::Meta(MetaError::Truncated(_))) => node.engine.bootstrap_meta()?,
            Err(e) => return Err(e.into()),
        }
        for stream in self.data_streams() {
            self.replay_node(id, stream)?;
        }
        self.meta.sslog_write_unchecked(vec![member_record(id, true)])?;
        if node.role.get() == NodeRole::Ro {
            self.schedule(self.config.ro_pull_ms, EventPayload::RoPull(id));
        }
        self.trace.record(self.clock.now(), "sim", "node_restart", id.to_string());
        Ok(())
    }

    // ---- Replication migration (ten steps) ----

    /// Migrates a stream replica from `source` to `target`. Baseline data
    /// comes from shared storage and increments from the distributed
    /// cache; only node-private data and the hot local cache cross
    /// node-to-node. Returns the byte accounting.
    pub fn migrate_replica(
        &self,
        source: NodeId,
        target: NodeId,
        stream: LogStreamId,
    ) -> Result<MigrationReport, SimError> {
        let src = self.nodes.get(&source).ok_or(SimError::UnknownNode(source))?;
        let dst = self.nodes.get(&target).ok_or(SimError::UnknownNode(target))?;
        let tablets = self.stream_tablets(stream);
        let mut copied = 0u64;

        // (1) Create the stream at the target without starting replay.
        // (2) The source was selected by the caller (the cluster picks the
        //     replica with the highest replayed lsn when asked).
        // (3) Offline the stream and update target metadata from PALF and
        //     the source's stream info.
        self.offline_streams.borrow_mut().insert(stream);
        match dst.engine.poll_meta() {
            Ok(()) => {}
            Err(EngineError::Meta(MetaError::Truncated(_))) => dst.engine.bootstrap_meta()?,
            Err(e) => return Err(e.into()),
        }

        // (4) Tablet shells: metadata only, no data.
        for &tablet in &tablets {
            dst.engine.create_tablet(tablet, stream);
        }
        dst.engine.poll_meta()?;

        // (5) Copy node-private information: unshared dumps in the source
        //     write cache (counted as node-to-node traffic).
        for &tablet in &tablets {
            for handle in src.engine.increment_handles(tablet) {
                if handle.shared {
                    continue;
                }
                for meta in &handle.table.blocks {
                    if let Some(bytes) = src.cache().write_cached(meta.id) {
                        copied += bytes.len() as u64;
                        dst.cache().pin_write(meta.id, bytes);
                    }
                }
                dst.engine.adopt_private_handle(tablet, handle.clone());
            }
        }

        // (6) Online: replay will start from the checkpoint scn in the
        //     tablet metadata (replay_row skips rows at or below it).
        self.offline_streams.borrow_mut().remove(&stream);

        // (7) Warm in parallel: hot local cache macro blocks node-to-node,
        //     increments from the distributed cache, baseline from shared
        //     storage.
        for id in src.cache().hot_macro_blocks() {
            if let Some(bytes) = src.cache().local_macro_bytes(id) {
                copied += bytes.len() as u64;
                dst.cache().admit_local_macro(id, 0, bytes);
            }
        }
        for &tablet in &tablets {
            for handle in dst.engine.increment_handles(tablet) {
                if !handle.shared {
                    continue;
                }
                for meta in &handle.table.blocks {
                    let key = block_object_key(tablet, meta.id);
                    dst.cache().prefetch_macro(meta.id, &key, 0);
                }
            }
            if let Some(major) = dst.engine.major_handle(tablet) {
                for meta in &major.table.blocks {
                    let key = block_object_key(tablet, meta.id);
                    dst.cache().prefetch_macro(meta.id, &key, 0);
                }
            }
        }

        // (8) Replay the log until current.
        self.replay_node(target, stream)?;

        // (9) Member list update; (10) cleanup and status report.
        self.meta.sslog_write_unchecked(vec![member_record(target, true)])?;
        let total = self.tablet_total_bytes(source, &tablets);
        self.trace.record(
            self.clock.now(),
            "sim",
            "migration_done",
            format!("ls={stream},source={source},target={target},copied={copied}"),
        );
        Ok(MigrationReport { copied_node_to_node: copied, total_tablet_bytes: total })
    }

    fn tablet_total_bytes(&self, node: NodeId, tablets: &[TabletId]) -> u64 {
        let engine = &self.nodes[&node].engine;
        let mut total = 0u64;
        for &tablet in tablets {
            for handle in engine.increment_handles(tablet) {
                total += handle.table.blocks.iter().map(|b| b.size_bytes).sum::<u64>();
            }
            if let Some(major) = engine.major_handle(tablet) {
                total += major.table.blocks.iter().map(|b| b.size_bytes).sum::<u64>();
            }
            total += engine.memory_in_use(tablet) as u64;
        }
        total
    }

    // ---- State inspection ----

    /// Deterministic, side-effect-free deep state digest: object store
    /// content, log positions, metadata view, and each node's volatile
    /// tablet state. Equal digests mean equal states.
    pub fn state_digest(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(out, "scn={}", self.scn.current());
        let _ = writeln!(out, "store={:#010x}", self.store.content_digest());
        for stream in std::iter::once(META_STREAM).chain(self.data_streams()) {
            let _ = writeln!(
                out,
                "log/{stream}={},{}",
                self.log.committed_next(stream).map(|l| l.0).unwrap_or(0),
                self.log.relocated_next(stream).map(|l| l.0).unwrap_or(0),
            );
        }
        let _ = writeln!(out, "meta={:#010x}", crate::types::crc32(&self.meta.clone_view().encode()));
        for node in self.nodes.values() {
            for tablet in node.engine.tablet_ids() {
                let _ = writeln!(
                    out,
                    "node/{}/tablet/{tablet}={:#010x}",
                    node.id,
                    node.engine.volatile_digest(tablet)
                );
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MigrationReport {
    pub copied_node_to_node: u64,
    pub total_tablet_bytes: u64,
}
