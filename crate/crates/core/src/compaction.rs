//! Major compaction rounds and compaction offloading.
//!
//! A round runs in seven phases, communicating through the metadata
//! service: the root service initiates and compute nodes detect the round
//! (1); the leader schedules tablets and writes task records (2); a
//! storage-layer worker merges baseline and increments into a new Major
//! SSTable in the object store (3) and updates the tablet metadata,
//! marking the task done (4); compute replicas detect the switch through
//! SSLog replay, warm their caches, and report their replica checksum
//! (5); the root service verifies primary-vs-index and cross-replica
//! checksums, retrying stale replicas (6); the round completes (7).

use std::cell::RefCell;
use std::rc::Rc;

use crate::cache::jaccard;
use crate::engine::{block_object_key, Engine, EngineError, TableHandle};
use crate::log::{LogKind, LogService};
use crate::meta::{MetaService, SsLogRecord};
use crate::trace::Trace;
use crate::types::{LogStreamId, NodeId, Scn, TabletId};
use crate::clock::Clock;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskState {
    Pending,
    Running,
    Done,
    Verified,
}

impl TaskState {
    fn as_u8(self) -> u8 {
        match self {
            TaskState::Pending => 0,
            TaskState::Running => 1,
            TaskState::Done => 2,
            TaskState::Verified => 3,
        }
    }

    fn from_u8(v: u8) -> TaskState {
        match v {
            0 => TaskState::Pending,
            1 => TaskState::Running,
            2 => TaskState::Done,
            _ => TaskState::Verified,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompactionTask {
    pub tablet_id: TabletId,
    pub merge_scn: Scn,
    pub state: TaskState,
    /// Logical checksum of the merged output, filled in at Done.
    pub checksum: u32,
}

fn task_key(tablet: TabletId, merge_scn: Scn) -> Vec<u8> {
    format!("task/mc/{tablet}/{merge_scn}").into_bytes()
}

fn encode_task(state: TaskState, checksum: u32) -> Vec<u8> {
    let mut buf = vec![state.as_u8()];
    crate::wire::put_u32(&mut buf, checksum);
    buf
}

fn decode_task(bytes: &[u8]) -> (TaskState, u32) {
    if bytes.len() < 5 {
        return (TaskState::Pending, 0);
    }
    (TaskState::from_u8(bytes[0]), u32::from_be_bytes(bytes[1..5].try_into().unwrap()))
}

#[derive(Debug, Clone, Default)]
pub struct RoundReport {
    pub merge_scn: Scn,
    pub tablets: Vec<TabletId>,
    pub retries: u32,
    pub verified: bool,
}

/// Drives major compaction rounds across the deployment. The coordinator
/// plays the root service and the storage-layer dispatcher; engines are
/// handed in as the leader, the executing worker, and the warming
/// replicas.
pub struct CompactionCoordinator {
    clock: Rc<Clock>,
    trace: Rc<Trace>,
    meta: Rc<MetaService>,
    pub max_retries: u32,
}

impl CompactionCoordinator {
    pub fn new(clock: Rc<Clock>, trace: Rc<Trace>, meta: Rc<MetaService>) -> CompactionCoordinator {
        CompactionCoordinator { clock, trace, meta, max_retries: 3 }
    }

    /// Phase 1: the root service launches the round; nodes detect it by
    /// replaying this record.
    pub fn rs_initiate(&self, tablets: &[TabletId], merge_scn: Scn) -> Result<(), EngineError> {
        let mut buf = Vec::new();
        crate::wire::put_u32(&mut buf, tablets.len() as u32);
        for t in tablets {
            crate::wire::put_u64(&mut buf, t.0);
        }
        self.meta.sslog_write_unchecked(vec![SsLogRecord::put(
            format!("mc/round/{merge_scn}").into_bytes(),
            buf,
        )])?;
        self.trace.record(
            self.clock.now(),
            "rs",
            "mc_initiate",
            format!("merge_scn={merge_scn},tablets={}", tablets.len()),
        );
        Ok(())
    }

    /// Phase 2: the compute-node leader schedules the round's tablets —
    /// it dumps and uploads everything at or below the merge snapshot so
    /// the storage layer sees the full snapshot in shared storage, then
    /// writes one task record per tablet.
    pub fn leader_schedule(&self, leader: &Engine, merge_scn: Scn) -> Result<Vec<TabletId>, EngineError> {
        leader.poll_meta()?;
        let tablets: Vec<TabletId> = leader.with_view(|v| {
            v.get(format!("mc/round/{merge_scn}").as_bytes()).map(|raw| {
                let mut r = crate::wire::Reader::new(raw);
                let count = r.u32().unwrap_or(0);
                (0..count).filter_map(|_| r.u64().ok().map(TabletId)).collect()
            })
        })
        .unwrap_or_default();
        for &tablet in &tablets {
            leader.micro_compact(tablet, Some(merge_scn))?;
            leader.flush_dumps(tablet)?;
            leader.upload_increments(tablet)?;
        }
        let records: Vec<SsLogRecord> = tablets
            .iter()
            .map(|t| SsLogRecord::put(task_key(*t, merge_scn), encode_task(TaskState::Pending, 0)))
            .collect();
        if !records.is_empty() {
            self.meta.sslog_write_unchecked(records)?;
        }
        Ok(tablets)
    }

    pub fn task(&self, tablet: TabletId, merge_scn: Scn) -> Option<CompactionTask> {
        self.meta.with_view(|v| {
            v.get(&task_key(tablet, merge_scn)).map(|raw| {
                let (state, checksum) = decode_task(raw);
                CompactionTask { tablet_id: tablet, merge_scn, state, checksum }
            })
        })
    }

    /// Phases 3-4: the storage-layer worker detects pending tasks,
    /// performs the merge into the object store, updates the tablet
    /// metadata, and marks the task done. Idempotent per (tablet,
    /// merge_scn): a re-dispatched task overwrites identical outputs.
    pub fn worker_execute(&self, worker: &Engine, merge_scn: Scn) -> Result<Vec<TabletId>, EngineError> {
        worker.poll_meta()?;
        let mut done = Vec::new();
        for tablet in worker.tablet_ids() {
            let Some(task) = self.task(tablet, merge_scn) else { continue };
            if task.state == TaskState::Done || task.state == TaskState::Verified {
                continue;
            }
            let (handle, _obsolete) = worker.merge_to_major(tablet, merge_scn)?;
            self.meta.sslog_write_unchecked(vec![SsLogRecord::put(
                task_key(tablet, merge_scn),
                encode_task(TaskState::Done, handle.table.checksum),
            )])?;
            self.trace.record(
                self.clock.now(),
                &format!("worker/{}", worker.node_id()),
                "mc_task_done",
                format!("tablet={tablet},merge_scn={merge_scn}"),
            );
            done.push(tablet);
        }
        Ok(done)
    }

    /// Phase 5 for one replica: detect the new baseline via SSLog replay,
    /// warm it (hot blocks first), reference it, and report the replica
    /// checksum computed through the cache.
    pub fn replica_warm_and_report(
        &self,
        replica: &Engine,
        tablet: TabletId,
        merge_scn: Scn,
    ) -> Result<(), EngineError> {
        // Capture the hot set before the switch: the warm target is the
        // new baseline's blocks covering currently hot key ranges.
        let hot_before = replica.cache().hot_macro_blocks();
        let old_ranges: Vec<(Vec<u8>, Vec<u8>)> = {
            let mut ranges = Vec::new();
            if let Some(major) = replica.major_handle(tablet) {
                for b in &major.table.blocks {
                    if hot_before.contains(&b.id) {
                        ranges.push((b.first_key.clone(), b.last_key.clone()));
                    }
                }
            }
            for h in replica.increment_handles(tablet) {
                for b in &h.table.blocks {
                    if hot_before.contains(&b.id) {
                        ranges.push((b.first_key.clone(), b.last_key.clone()));
                    }
                }
            }
            ranges
        };
        replica.poll_meta()?;
        let Some(new_major) = replica.major_handle(tablet) else {
            return Ok(());
        };
        warm_baseline_ranges(replica, &new_major, &old_ranges);

        let crc = match replica.baseline_checksum_via_cache(tablet) {
            Ok(crc) => crc,
            // A corrupt cached block surfaces as a decode failure; report
            // a checksum that cannot match so verification retries us.
            Err(_) => !0u32,
        };
        self.meta.sslog_write_unchecked(vec![SsLogRecord::put(
            format!("crc/{tablet}/{merge_scn}/{}", replica.node_id()).into_bytes(),
            crc.to_be_bytes().to_vec(),
        )])?;
        Ok(())
    }

    /// Phases 6-7: the root service compares the executor checksum, every
    /// replica's reported checksum, and (when configured) primary-vs-index
    /// pairs. Mismatching replicas are re-warmed from shared storage and
    /// re-reported, up to `max_retries` times.
    pub fn rs_verify(
        &self,
        replicas: &[Rc<Engine>],
        tablets: &[TabletId],
        merge_scn: Scn,
        index_pairs: &[(TabletId, TabletId)],
    ) -> Result<RoundReport, EngineError> {
        let mut report = RoundReport {
            merge_scn,
            tablets: tablets.to_vec(),
            ..RoundReport::default()
        };
        for &tablet in tablets {
            let expected = self
                .task(tablet, merge_scn)
                .map(|t| t.checksum)
                .unwrap_or_default();
            let mut attempts = 0;
            loop {
                let mut all_match = true;
                for replica in replicas {
                    let reported = self.meta.with_view(|v| {
                        v.get(
                            format!("crc/{tablet}/{merge_scn}/{}", replica.node_id()).as_bytes(),
                        )
                        .and_then(|raw| raw.try_into().ok().map(u32::from_be_bytes))
                    });
                    if reported != Some(expected) {
                        all_match = false;
                        // Retry: drop the replica's cached copies of the
                        // new baseline and re-run phase 5.
                        if let Some(major) = replica.major_handle(tablet) {
                            for b in &major.table.blocks {
                                replica.cache().evict_local_macro(b.id);
                            }
                            replica.cache().drop_volatile();
                        }
                        self.replica_warm_and_report(replica, tablet, merge_scn)?;
                    }
                }
                if all_match {
                    break;
                }
                attempts += 1;
                report.retries += 1;
                if attempts > self.max_retries {
                    return Err(EngineError::ChecksumMismatch {
                        tablet,
                        expected,
                        actual: !0,
                    });
                }
            }
            self.meta.sslog_write_unchecked(vec![SsLogRecord::put(
                task_key(tablet, merge_scn),
                encode_task(TaskState::Verified, expected),
            )])?;
        }
        for (primary, index) in index_pairs {
            let a = self.task(*primary, merge_scn).map(|t| t.checksum).unwrap_or_default();
            let b = self.task(*index, merge_scn).map(|t| t.checksum).unwrap_or(!0);
            if a != b {
                return Err(EngineError::ChecksumMismatch {
                    tablet: *index,
                    expected: a,
                    actual: b,
                });
            }
        }
        self.meta.sslog_write_unchecked(vec![SsLogRecord::put(
            format!("mc/done/{merge_scn}").into_bytes(),
            Vec::new(),
        )])?;
        self.trace.record(
            self.clock.now(),
            "rs",
            "mc_verified",
            format!("merge_scn={merge_scn},retries={}", report.retries),
        );
        report.verified = true;
        Ok(report)
    }

    /// The full seven-phase round against one worker and a set of
    /// replicas.
    pub fn run_round(
        &self,
        leader: &Engine,
        worker: &Engine,
        replicas: &[Rc<Engine>],
        tablets: &[TabletId],
        merge_scn: Scn,
        index_pairs: &[(TabletId, TabletId)],
    ) -> Result<RoundReport, EngineError> {
        self.rs_initiate(tablets, merge_scn)?;
        let scheduled = self.leader_schedule(leader, merge_scn)?;
        self.worker_execute(worker, merge_scn)?;
        for replica in replicas {
            for &tablet in &scheduled {
                self.replica_warm_and_report(replica, tablet, merge_scn)?;
            }
        }
        self.rs_verify(replicas, &scheduled, merge_scn, index_pairs)
    }
}

/// Baseline-switch preheating: prefetches the new Major's macro blocks
/// whose key ranges intersect the given hot ranges into the local tier,
/// before reads start landing on the new baseline.
pub fn warm_baseline_ranges(replica: &Engine, new_major: &TableHandle, hot_ranges: &[(Vec<u8>, Vec<u8>)]) {
    if hot_ranges.is_empty() {
        return;
    }
    for block in &new_major.table.blocks {
        let hot = hot_ranges
            .iter()
            .any(|(lo, hi)| block.first_key <= *hi && *lo <= block.last_key);
        if hot {
            let key = block_object_key(new_major.table.tablet_id, block.id);
            let version = replica.with_view(|v| v.block_version(block.id));
            replica.cache().prefetch_macro(block.id, &key, version);
        }
    }
}

/// Pool of underutilized machines available for offloaded compaction.
#[derive(Default)]
pub struct WorkerPool {
    idle: RefCell<Vec<Rc<Engine>>>,
}

impl WorkerPool {
    pub fn new() -> WorkerPool {
        WorkerPool::default()
    }

    pub fn add(&self, worker: Rc<Engine>) {
        self.idle.borrow_mut().push(worker);
    }

    pub fn take(&self) -> Option<Rc<Engine>> {
        self.idle.borrow_mut().pop()
    }

    pub fn release(&self, worker: Rc<Engine>) {
        self.idle.borrow_mut().push(worker);
    }

    pub fn idle_nodes(&self) -> Vec<NodeId> {
        self.idle.borrow().iter().map(|w| w.node_id()).collect()
    }
}

/// Offloads a major compaction to an idle machine: pick a worker (1),
/// create a carrier log stream with the tablet context (2), grant the
/// worker the SSWriter lease (3), let it load the SSTable list and run
/// the compaction plus metadata update (4-5), preload the new data into
/// every node's local cache (6), verify checksums, and return the worker
/// to the pool.
#[allow(clippy::too_many_arguments)]
pub fn offload_compaction(
    coordinator: &CompactionCoordinator,
    log: &Rc<LogService>,
    meta: &Rc<MetaService>,
    pool: &WorkerPool,
    tablet: TabletId,
    tablet_stream: LogStreamId,
    carrier_stream: LogStreamId,
    merge_scn: Scn,
    prior_writer: Option<NodeId>,
    all_nodes: &[Rc<Engine>],
) -> Result<TableHandle, EngineError> {
    let worker = pool.take().ok_or_else(|| {
        EngineError::NotShared("no idle worker available for offloading".to_string())
    })?;
    coordinator.trace.record(
        coordinator.clock.now(),
        "rs",
        "mc_offload",
        format!("tablet={tablet},worker={},merge_scn={merge_scn}", worker.node_id()),
    );

    // Carrier stream: tablet, data, and transaction context for the task.
    log.create_stream(carrier_stream);
    let leader = log.current_leader(carrier_stream)?;
    let mut payload = Vec::new();
    crate::wire::put_u64(&mut payload, tablet.0);
    crate::wire::put_u64(&mut payload, merge_scn.0);
    log.append(carrier_stream, leader, &[payload], LogKind::Journal, merge_scn)?;

    // Lease handover: within its validity only the worker writes shared
    // storage for this stream.
    if let Some(prior) = prior_writer {
        meta.release_sswriter(tablet_stream, prior)?;
    }
    meta.acquire_sswriter(tablet_stream, worker.node_id(), meta.default_lease_ms())?;

    // The worker loads the tablet context and executes.
    worker.create_tablet(tablet, tablet_stream);
    worker.poll_meta()?;
    let (handle, _obsolete) = worker.merge_to_major(tablet, merge_scn)?;

    // Preload the new baseline into every RW/RO local cache.
    for node in all_nodes {
        node.poll_meta()?;
        for block in &handle.table.blocks {
            let key = block_object_key(tablet, block.id);
            let version = node.with_view(|v| v.block_version(block.id));
            node.cache().prefetch_macro(block.id, &key, version);
        }
    }

    // Verification before the worker is released back to the pool.
    for node in all_nodes {
        let crc = node.baseline_checksum_via_cache(tablet)?;
        if crc != handle.table.checksum {
            return Err(EngineError::ChecksumMismatch {
                tablet,
                expected: handle.table.checksum,
                actual: crc,
            });
        }
    }
    meta.release_sswriter(tablet_stream, worker.node_id())?;
    pool.release(worker);
    Ok(handle)
}

/// Migration preheating helper: copies the source node's hot macro blocks
/// into the target's local tier (node-to-node, counted), while increments
/// come from the distributed tier and the baseline from shared storage.
/// Returns the number of bytes copied directly from the source.
pub fn warm_migration(source: &Engine, target: &Engine) -> u64 {
    let mut copied = 0u64;
    for id in source.cache().hot_macro_blocks() {
        if let Some(bytes) = source.cache().local_macro_bytes(id) {
            copied += bytes.len() as u64;
            target.cache().admit_local_macro(id, 0, bytes);
        }
    }
    copied
}

/// How alike two nodes' local hot sets are; used by follower-warming
/// checks.
pub fn cache_similarity(a: &Engine, b: &Engine) -> f64 {
    jaccard(&a.cache().local_resident_macros(), &b.cache().local_resident_macros())
}
