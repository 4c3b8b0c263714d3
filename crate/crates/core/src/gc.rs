//! Lease-based garbage collection: a coordinator per log stream elected
//! through SSLog, a safe reclamation point aggregated from node reports,
//! two-phase deletion with intent records and a grace period, and CLog
//! reclamation.
//!
//! Every lease, report, intent, and commit marker is an SSLog record, so
//! GC state is totally ordered with the metadata it protects, and a new
//! coordinator recovers in-flight deletions by replaying the log.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use thiserror::Error;

use crate::clock::Clock;
use crate::log::{LogError, LogService};
use crate::meta::{decode_lease, encode_lease, MetaError, MetaService, SsLogRecord};
use crate::store::{ObjectKey, ObjectStore, StoreError};
use crate::trace::Trace;
use crate::types::{LogStreamId, Lsn, NodeId, Scn};
use crate::wire::{self, Reader};

#[derive(Debug, Error)]
pub enum GcError {
    #[error("gc lease for stream {ls} already held by node {holder}")]
    LeaseHeld { ls: LogStreamId, holder: NodeId },
    #[error("gc lease for stream {ls} not held by node {node}")]
    LeaseExpired { ls: LogStreamId, node: NodeId },
    #[error("deletion refused: data at scn {data_scn} not older than safe point {safe_scn}")]
    NotSafe { data_scn: Scn, safe_scn: Scn },
    #[error("node {0} has not reported; safe point cannot advance")]
    MissingReport(NodeId),
    #[error("node {node} report is stale ({age_ms}ms old); safe point frozen")]
    StaleReports { node: NodeId, age_ms: u64 },
    #[error("lease renewal failed after backoff; released")]
    RenewalFailed,
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Below this pair, data versions and log positions may be reclaimed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SafePoint {
    pub min_read_scn: Scn,
    pub min_replay_lsn: Lsn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GcLease {
    pub log_stream_id: LogStreamId,
    pub coordinator: NodeId,
    pub expires_at_ms: u64,
}

#[derive(Debug, Clone)]
pub struct GcConfig {
    /// Lease duration; the 30-60s band from the coordination design,
    /// defaulting to its low end.
    pub lease_ms: u64,
    /// Grace period between the deletion intent and the first delete.
    pub grace_ms: u64,
    /// Node reporting cadence and the staleness bound in intervals.
    pub report_interval_ms: u64,
    pub staleness_intervals: u64,
}

impl Default for GcConfig {
    fn default() -> Self {
        GcConfig {
            lease_ms: 30_000,
            grace_ms: 5_000,
            report_interval_ms: 2_000,
            staleness_intervals: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntentState {
    Intent,
    Committed,
    Aborted,
}

#[derive(Debug, Clone)]
pub struct DeletionIntent {
    pub intent_id: u64,
    pub keys: Vec<ObjectKey>,
    pub created_at_ms: u64,
    pub state: IntentState,
}

fn gc_lease_key(ls: LogStreamId) -> Vec<u8> {
    format!("gc/lease/{ls}").into_bytes()
}

fn encode_intent(keys: &[ObjectKey], created_at_ms: u64) -> Vec<u8> {
    let mut buf = Vec::new();
    wire::put_u64(&mut buf, created_at_ms);
    wire::put_u32(&mut buf, keys.len() as u32);
    for key in keys {
        wire::put_bytes(&mut buf, key.as_str().as_bytes());
    }
    buf
}

fn decode_intent(bytes: &[u8]) -> Option<(u64, Vec<ObjectKey>)> {
    let mut r = Reader::new(bytes);
    let created = r.u64().ok()?;
    let count = r.u32().ok()?;
    let mut keys = Vec::with_capacity(count as usize);
    for _ in 0..count {
        keys.push(ObjectKey::new(String::from_utf8(r.bytes().ok()?.to_vec()).ok()?).ok()?);
    }
    Some((created, keys))
}

/// A node's periodic liveness report feeding the safe point.
pub fn report_record(node: NodeId, min_read_scn: Scn, min_replay_lsn: Lsn, now_ms: u64) -> SsLogRecord {
    let mut buf = Vec::new();
    wire::put_u64(&mut buf, min_read_scn.0);
    wire::put_u64(&mut buf, min_replay_lsn.0);
    wire::put_u64(&mut buf, now_ms);
    SsLogRecord::put(format!("report/{node}").into_bytes(), buf)
}

pub fn member_record(node: NodeId, alive: bool) -> SsLogRecord {
    SsLogRecord::put(format!("member/{node}").into_bytes(), vec![alive as u8])
}

/// The GC coordinator for one log stream. There is at most one valid
/// coordinator per stream at any instant; every deletion checks the lease
/// immediately before it runs.
pub struct GcCoordinator {
    clock: Rc<Clock>,
    trace: Rc<Trace>,
    store: Rc<dyn ObjectStore>,
    meta: Rc<MetaService>,
    log: Rc<LogService>,
    pub node: NodeId,
    pub stream: LogStreamId,
    config: GcConfig,
    /// Local knowledge of our lease expiry; authoritative state is the
    /// SSLog record, this only avoids acting after a known expiry.
    lease_expires_ms: Cell<Option<u64>>,
    /// Fault injection: a partitioned coordinator cannot write SSLog.
    partitioned: Cell<bool>,
    last_safe_point: Cell<SafePoint>,
    next_intent_id: Cell<u64>,
    /// First commit frontier at which each eligible record was observed;
    /// a record is deletable only once min_replay_lsn passes this, so
    /// every node has replayed the metadata switch that orphaned it.
    eligible_seen: RefCell<BTreeMap<String, Lsn>>,
}

impl GcCoordinator {
    pub fn new(
        clock: Rc<Clock>,
        trace: Rc<Trace>,
        store: Rc<dyn ObjectStore>,
        meta: Rc<MetaService>,
        log: Rc<LogService>,
        node: NodeId,
        stream: LogStreamId,
        config: GcConfig,
    ) -> GcCoordinator {
        GcCoordinator {
            clock,
            trace,
            store,
            meta,
            log,
            node,
            stream,
            config,
            lease_expires_ms: Cell::new(None),
            partitioned: Cell::new(false),
            last_safe_point: Cell::new(SafePoint::default()),
            next_intent_id: Cell::new(1),
            eligible_seen: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn config(&self) -> &GcConfig {
        &self.config
    }

    pub fn set_partitioned(&self, partitioned: bool) {
        self.partitioned.set(partitioned);
    }

    fn check_partition(&self) -> Result<(), GcError> {
        if self.partitioned.get() {
            Err(GcError::RenewalFailed)
        } else {
            Ok(())
        }
    }

    pub fn current_lease(&self) -> Option<GcLease> {
        let raw = self.meta.with_view(|v| v.get(&gc_lease_key(self.stream)).map(<[u8]>::to_vec))?;
        let (holder, expires_at_ms) = decode_lease(&raw).ok()?;
        Some(GcLease { log_stream_id: self.stream, coordinator: holder, expires_at_ms })
    }

    /// True iff this node holds the unexpired lease, per committed state
    /// and the logical clock.
    pub fn holds_lease(&self) -> bool {
        match self.current_lease() {
            Some(lease) => {
                lease.coordinator == self.node && lease.expires_at_ms > self.clock.now()
            }
            None => false,
        }
    }

    pub fn elect(&self) -> Result<GcLease, GcError> {
        self.check_partition()?;
        if let Some(lease) = self.current_lease() {
            if lease.coordinator != self.node && lease.expires_at_ms > self.clock.now() {
                return Err(GcError::LeaseHeld { ls: self.stream, holder: lease.coordinator });
            }
        }
        let expires_at_ms = self.clock.now() + self.config.lease_ms;
        self.meta.sslog_write_unchecked(vec![SsLogRecord::put(
            gc_lease_key(self.stream),
            encode_lease(self.node, expires_at_ms),
        )])?;
        self.lease_expires_ms.set(Some(expires_at_ms));
        self.trace.record(
            self.clock.now(),
            &format!("gc/{}", self.node),
            "gc_lease_grant",
            format!("ls={},node={},expires={expires_at_ms}", self.stream, self.node),
        );
        Ok(GcLease { log_stream_id: self.stream, coordinator: self.node, expires_at_ms })
    }

    pub fn renew(&self) -> Result<GcLease, GcError> {
        self.check_partition()?;
        if !self.holds_lease() {
            return Err(GcError::LeaseExpired { ls: self.stream, node: self.node });
        }
        self.elect()
    }

    /// Lease renewal with exponential backoff (1, 2, 4, ... simulated
    /// seconds). If the lease expires before a renewal lands, GC stops
    /// and the lease is considered released.
    pub fn renew_with_backoff(&self) -> Result<GcLease, GcError> {
        let mut backoff_ms = 1_000u64;
        loop {
            match self.renew() {
                Ok(lease) => return Ok(lease),
                Err(GcError::RenewalFailed) => {
                    let expires = self.lease_expires_ms.get().unwrap_or(0);
                    if self.clock.now() + backoff_ms >= expires {
                        // Stop GC operations and release.
                        self.lease_expires_ms.set(None);
                        self.trace.record(
                            self.clock.now(),
                            &format!("gc/{}", self.node),
                            "gc_lease_released",
                            format!("ls={}", self.stream),
                        );
                        return Err(GcError::RenewalFailed);
                    }
                    self.clock.advance(backoff_ms);
                    backoff_ms *= 2;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Aggregates the latest report from every live member. A missing or
    /// stale report freezes the safe point at its previous value.
    pub fn compute_safe_point(&self) -> Result<SafePoint, GcError> {
        let now = self.clock.now();
        let staleness_bound = self.config.report_interval_ms * self.config.staleness_intervals;
        let result = self.meta.with_view(|view| {
            let mut members = Vec::new();
            for (k, v) in view.scan_prefix(b"member/") {
                if v == [1] {
                    let id: u64 = std::str::from_utf8(k)
                        .ok()
                        .and_then(|s| s.rsplit('/').next())
                        .and_then(|s| s.parse().ok())
                        .unwrap_or(0);
                    members.push(NodeId(id));
                }
            }
            let mut point = SafePoint { min_read_scn: Scn(u64::MAX), min_replay_lsn: Lsn(u64::MAX) };
            for member in members {
                let raw = view.get(format!("report/{member}").as_bytes());
                let Some(raw) = raw else {
                    return Err(GcError::MissingReport(member));
                };
                let mut r = Reader::new(raw);
                let scn = Scn(r.u64().map_err(MetaError::from)?);
                let lsn = Lsn(r.u64().map_err(MetaError::from)?);
                let at = r.u64().map_err(MetaError::from)?;
                let age = now.saturating_sub(at);
                if age > staleness_bound {
                    return Err(GcError::StaleReports { node: member, age_ms: age });
                }
                point.min_read_scn = point.min_read_scn.min(scn);
                point.min_replay_lsn = point.min_replay_lsn.min(lsn);
            }
            Ok(point)
        })?;
        // Monotone, even across coordinator failover: never regress.
        let prev = self.last_safe_point.get();
        let merged = SafePoint {
            min_read_scn: prev.min_read_scn.max(result.min_read_scn),
            min_replay_lsn: prev.min_replay_lsn.max(result.min_replay_lsn),
        };
        self.last_safe_point.set(merged);
        Ok(merged)
    }

    pub fn last_safe_point(&self) -> SafePoint {
        self.last_safe_point.get()
    }

    /// Phase one of deletion: records the intent in SSLog. Deletion is
    /// refused outright unless the data is strictly older than the safe
    /// point and every node has replayed past `obsoleted_at`.
    pub fn begin_delete(
        &self,
        keys: Vec<ObjectKey>,
        data_end_scn: Scn,
        obsoleted_at: Lsn,
    ) -> Result<u64, GcError> {
        self.check_partition()?;
        if !self.holds_lease() {
            return Err(GcError::LeaseExpired { ls: self.stream, node: self.node });
        }
        let safe = self.last_safe_point.get();
        if data_end_scn >= safe.min_read_scn {
            return Err(GcError::NotSafe { data_scn: data_end_scn, safe_scn: safe.min_read_scn });
        }
        if obsoleted_at > safe.min_replay_lsn {
            return Err(GcError::NotSafe { data_scn: data_end_scn, safe_scn: safe.min_read_scn });
        }
        let intent_id = self.next_intent_id.get();
        self.next_intent_id.set(intent_id + 1);
        let now = self.clock.now();
        self.meta.sslog_write_unchecked(vec![SsLogRecord::put(
            format!("gc/intent/{}/{intent_id}", self.stream).into_bytes(),
            encode_intent(&keys, now),
        )])?;
        self.trace.record(
            now,
            &format!("gc/{}", self.node),
            "gc_intent",
            format!("ls={},id={intent_id},keys={}", self.stream, keys.len()),
        );
        Ok(intent_id)
    }

    fn open_intents(&self) -> Vec<DeletionIntent> {
        let prefix = format!("gc/intent/{}/", self.stream).into_bytes();
        self.meta.with_view(|view| {
            let mut out = Vec::new();
            for (k, v) in view.scan_prefix(&prefix) {
                let Some(id) = std::str::from_utf8(k)
                    .ok()
                    .and_then(|s| s.rsplit('/').next())
                    .and_then(|s| s.parse::<u64>().ok())
                else {
                    continue;
                };
                let committed =
                    view.get(format!("gc/commit/{}/{id}", self.stream).as_bytes()).is_some();
                if committed {
                    continue;
                }
                if let Some((created_at_ms, keys)) = decode_intent(v) {
                    out.push(DeletionIntent {
                        intent_id: id,
                        keys,
                        created_at_ms,
                        state: IntentState::Intent,
                    });
                }
            }
            out
        })
    }

    /// Phase two: after the grace period, deletes the intent's objects
    /// (data first) and then removes the references with a commit marker.
    /// The lease is re-verified before every single deletion; a crashed
    /// coordinator's successor resumes from the intent record, and
    /// re-deleting is idempotent.
    ///
    /// `crash_after` aborts after that many deletions, for crash-point
    /// tests.
    pub fn complete_deletes(&self, crash_after: Option<u32>) -> Result<Vec<u64>, GcError> {
        self.next_intent_id.set(
            self.next_intent_id.get().max(
                self.open_intents().iter().map(|i| i.intent_id + 1).max().unwrap_or(1),
            ),
        );
        let now = self.clock.now();
        let mut completed = Vec::new();
        let mut deletions = 0u32;
        for intent in self.open_intents() {
            if now < intent.created_at_ms + self.config.grace_ms {
                continue;
            }
            for key in &intent.keys {
                self.check_partition()?;
                if !self.holds_lease() {
                    return Err(GcError::LeaseExpired { ls: self.stream, node: self.node });
                }
                if crash_after == Some(deletions) {
                    return Ok(completed);
                }
                self.trace.record(
                    self.clock.now(),
                    &format!("gc/{}", self.node),
                    "gc_delete",
                    format!("ls={},id={},key={key}", self.stream, intent.intent_id),
                );
                self.store.delete(key)?;
                deletions += 1;
            }
            // Reference removal: clear the eligibility records that named
            // these keys, then the commit marker, atomically.
            let mut records = self.clear_eligibility_records(&intent.keys);
            records.push(SsLogRecord::put(
                format!("gc/commit/{}/{}", self.stream, intent.intent_id).into_bytes(),
                Vec::new(),
            ));
            self.meta.sslog_write_unchecked(records)?;
            completed.push(intent.intent_id);
        }
        Ok(completed)
    }

    fn clear_eligibility_records(&self, deleted: &[ObjectKey]) -> Vec<SsLogRecord> {
        let deleted: Vec<&str> = deleted.iter().map(|k| k.as_str()).collect();
        self.meta.with_view(|view| {
            let mut records = Vec::new();
            for (k, v) in view.scan_prefix(b"gc/eligible/") {
                let Some((keys, _)) = decode_eligible(v) else { continue };
                if keys.iter().all(|key| deleted.contains(&key.as_str())) {
                    records.push(SsLogRecord::tombstone(k.to_vec()));
                }
            }
            records
        })
    }

    /// Scans eligibility records published by compaction and opens
    /// deletion intents for every batch that has cleared the safe point.
    pub fn collect_eligible(&self) -> Result<Vec<u64>, GcError> {
        let frontier = self.meta.with_view(|v| v.next_lsn());
        let candidates: Vec<(String, Vec<ObjectKey>, Scn, Lsn)> = self.meta.with_view(|view| {
            let mut out = Vec::new();
            for (k, v) in view.scan_prefix(b"gc/eligible/") {
                let key = String::from_utf8_lossy(k).to_string();
                let Some((keys, end_scn)) = decode_eligible(v) else { continue };
                let seen = {
                    let mut seen_map = self.eligible_seen.borrow_mut();
                    *seen_map.entry(key.clone()).or_insert(frontier)
                };
                out.push((key, keys, end_scn, seen));
            }
            out
        });
        let safe = self.last_safe_point.get();
        let mut intents = Vec::new();
        let already_intented: Vec<String> = self.meta.with_view(|view| {
            let prefix = format!("gc/intent/{}/", self.stream).into_bytes();
            view.scan_prefix(&prefix)
                .filter_map(|(_, v)| decode_intent(v))
                .flat_map(|(_, keys)| keys.into_iter().map(|k| k.as_str().to_string()))
                .collect()
        });
        for (_record_key, keys, end_scn, seen) in candidates {
            if end_scn >= safe.min_read_scn || seen > safe.min_replay_lsn {
                continue;
            }
            if keys.iter().any(|k| already_intented.contains(&k.as_str().to_string())) {
                continue;
            }
            match self.begin_delete(keys, end_scn, seen) {
                Ok(id) => intents.push(id),
                Err(GcError::NotSafe { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        Ok(intents)
    }

    /// Reclaims local CLog files below min(min replay position,
    /// relocation progress).
    pub fn reclaim_clog(&self) -> Result<Lsn, GcError> {
        self.check_partition()?;
        if !self.holds_lease() {
            return Err(GcError::LeaseExpired { ls: self.stream, node: self.node });
        }
        let safe = self.last_safe_point.get();
        let relocated = self.log.relocated_next(self.stream)?;
        let bound = self.log.reclaim(self.stream, safe.min_replay_lsn, relocated)?;
        Ok(bound)
    }
}

pub fn decode_eligible(bytes: &[u8]) -> Option<(Vec<ObjectKey>, Scn)> {
    let mut r = Reader::new(bytes);
    let count = r.u32().ok()?;
    let mut keys = Vec::with_capacity(count as usize);
    for _ in 0..count {
        keys.push(ObjectKey::new(String::from_utf8(r.bytes().ok()?.to_vec()).ok()?).ok()?);
    }
    let end_scn = Scn(r.u64().ok()?);
    Some((keys, end_scn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ScnSource;
    use crate::log::LogConfig;
    use crate::meta::MetaConfig;
    use crate::store::{key, MemStore, StoreConfig};

    const LS: LogStreamId = LogStreamId(7);
    const A: NodeId = NodeId(1);
    const B: NodeId = NodeId(2);

    struct Fixture {
        clock: Rc<Clock>,
        store: Rc<MemStore>,
        meta: Rc<MetaService>,
        log: Rc<LogService>,
    }

    fn fixture() -> Fixture {
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
        log.create_stream(LS);
        let scn = Rc::new(ScnSource::new());
        let meta = MetaService::new(
            clock.clone(),
            trace,
            store.clone(),
            log.clone(),
            scn,
            LogStreamId(0),
            MetaConfig::default(),
        );
        Fixture { clock, store, meta, log }
    }

    fn coordinator(f: &Fixture, node: NodeId) -> GcCoordinator {
        GcCoordinator::new(
            f.clock.clone(),
            Rc::new(Trace::disabled()),
            f.store.clone(),
            f.meta.clone(),
            f.log.clone(),
            node,
            LS,
            GcConfig::default(),
        )
    }

    fn report_all(f: &Fixture, nodes: &[(NodeId, u64, u64)]) {
        let now = f.clock.now();
        let mut records = Vec::new();
        for (node, scn, lsn) in nodes {
            records.push(member_record(*node, true));
            records.push(report_record(*node, Scn(*scn), Lsn(*lsn), now));
        }
        f.meta.sslog_write_unchecked(records).unwrap();
    }

    #[test]
    fn election_is_exclusive_until_expiry() {
        let f = fixture();
        let gc_a = coordinator(&f, A);
        let gc_b = coordinator(&f, B);
        gc_a.elect().unwrap();
        assert!(gc_a.holds_lease());
        assert!(!gc_b.holds_lease());
        assert!(matches!(gc_b.elect(), Err(GcError::LeaseHeld { holder, .. }) if holder == A));
        // Renewal at half-life extends the lease.
        f.clock.advance(15_000);
        let at = f.clock.now();
        let renewed = gc_a.renew().unwrap();
        assert_eq!(renewed.expires_at_ms, at + 30_000);
        // After expiry another node can take over; exactly one valid
        // holder at every instant.
        f.clock.advance(30_001);
        assert!(!gc_a.holds_lease());
        gc_b.elect().unwrap();
        assert!(gc_b.holds_lease());
        assert!(!gc_a.holds_lease());
    }

    #[test]
    fn partitioned_holder_stops_deleting_after_expiry() {
        let f = fixture();
        let gc = coordinator(&f, A);
        gc.elect().unwrap();
        report_all(&f, &[(A, 100, 100)]);
        gc.compute_safe_point().unwrap();
        let k = key("obsolete/1");
        f.store.put(&k, b"x").unwrap();
        gc.begin_delete(vec![k.clone()], Scn(5), Lsn(0)).unwrap();
        // Partition the holder; renewal backs off 1+2+4... and releases.
        gc.set_partitioned(true);
        assert!(matches!(gc.renew_with_backoff(), Err(GcError::RenewalFailed)));
        f.clock.advance(40_000);
        // Past expiry: the partitioned ex-holder must not delete.
        assert!(matches!(gc.complete_deletes(None), Err(GcError::RenewalFailed)));
        gc.set_partitioned(false);
        assert!(matches!(gc.complete_deletes(None), Err(GcError::LeaseExpired { .. })));
        assert!(f.store.get(&k).is_ok(), "object untouched");
    }

    #[test]
    fn safe_point_is_min_over_reports_and_monotone() {
        let f = fixture();
        let gc = coordinator(&f, A);
        report_all(&f, &[(A, 10, 50), (B, 7, 60), (NodeId(3), 12, 40)]);
        let sp = gc.compute_safe_point().unwrap();
        assert_eq!(sp.min_read_scn, Scn(7));
        assert_eq!(sp.min_replay_lsn, Lsn(40));
        // A lower later report cannot regress the safe point.
        report_all(&f, &[(A, 5, 20), (B, 7, 60), (NodeId(3), 12, 40)]);
        let sp2 = gc.compute_safe_point().unwrap();
        assert_eq!(sp2.min_read_scn, Scn(7));
        assert_eq!(sp2.min_replay_lsn, Lsn(40));
    }

    #[test]
    fn missing_member_report_blocks_advancement() {
        let f = fixture();
        let gc = coordinator(&f, A);
        report_all(&f, &[(A, 10, 50)]);
        f.meta.sslog_write_unchecked(vec![member_record(B, true)]).unwrap();
        assert!(matches!(gc.compute_safe_point(), Err(GcError::MissingReport(n)) if n == B));
        // Removing the member from the roster unblocks.
        f.meta.sslog_write_unchecked(vec![member_record(B, false)]).unwrap();
        assert_eq!(gc.compute_safe_point().unwrap().min_read_scn, Scn(10));
    }

    #[test]
    fn stale_report_freezes_safe_point() {
        let f = fixture();
        let gc = coordinator(&f, A);
        report_all(&f, &[(A, 10, 50)]);
        gc.compute_safe_point().unwrap();
        f.clock.advance(7_000); // > 3 intervals of 2s
        assert!(matches!(gc.compute_safe_point(), Err(GcError::StaleReports { .. })));
        assert_eq!(gc.last_safe_point().min_read_scn, Scn(10), "frozen, not reset");
    }

    #[test]
    fn two_phase_delete_honors_grace_and_safe_point() {
        let f = fixture();
        let gc = coordinator(&f, A);
        gc.elect().unwrap();
        report_all(&f, &[(A, 100, 100)]);
        gc.compute_safe_point().unwrap();

        let k1 = key("data/old/1");
        let k2 = key("data/old/2");
        f.store.put(&k1, b"x").unwrap();
        f.store.put(&k2, b"x").unwrap();

        // Data at or above the safe point is refused outright.
        assert!(matches!(
            gc.begin_delete(vec![k1.clone()], Scn(100), Lsn(0)),
            Err(GcError::NotSafe { .. })
        ));

        gc.begin_delete(vec![k1.clone(), k2.clone()], Scn(50), Lsn(10)).unwrap();
        // Grace period not yet elapsed: nothing deleted.
        assert!(gc.complete_deletes(None).unwrap().is_empty());
        assert!(f.store.get(&k1).is_ok());
        f.clock.advance(5_001);
        report_all(&f, &[(A, 100, 100)]);
        let done = gc.complete_deletes(None).unwrap();
        assert_eq!(done.len(), 1);
        assert!(f.store.get(&k1).is_err());
        assert!(f.store.get(&k2).is_err());
    }

    #[test]
    fn crashed_coordinator_successor_finishes_deletion() {
        let f = fixture();
        let gc_a = coordinator(&f, A);
        gc_a.elect().unwrap();
        report_all(&f, &[(A, 100, 100)]);
        gc_a.compute_safe_point().unwrap();
        let keys: Vec<ObjectKey> = (0..3).map(|i| key(format!("data/old/{i}"))).collect();
        for k in &keys {
            f.store.put(k, b"x").unwrap();
        }
        gc_a.begin_delete(keys.clone(), Scn(50), Lsn(10)).unwrap();
        f.clock.advance(5_001);
        report_all(&f, &[(A, 100, 100)]);
        // Crash after deleting 1 of 3 keys.
        assert!(gc_a.complete_deletes(Some(1)).unwrap().is_empty());
        assert!(f.store.get(&keys[0]).is_err());
        assert!(f.store.get(&keys[1]).is_ok());

        // A crashes out of the membership; its lease expires; B recovers
        // the intent and completes.
        f.clock.advance(30_000);
        f.meta.sslog_write_unchecked(vec![member_record(A, false)]).unwrap();
        let gc_b = coordinator(&f, B);
        gc_b.elect().unwrap();
        report_all(&f, &[(B, 100, 100)]);
        gc_b.compute_safe_point().unwrap();
        let done = gc_b.complete_deletes(None).unwrap();
        assert_eq!(done.len(), 1);
        for k in &keys {
            assert!(f.store.get(k).is_err(), "{k} should be deleted");
        }
    }

    #[test]
    fn reclaim_clog_uses_min_of_replay_and_relocation() {
        let f = fixture();
        let gc = coordinator(&f, A);
        gc.elect().unwrap();
        let leader = f.log.current_leader(LS).unwrap();
        let payloads: Vec<Vec<u8>> = (0..200).map(|i| vec![i as u8]).collect();
        f.log.append(LS, leader, &payloads, crate::log::LogKind::CLog, Scn(1)).unwrap();
        f.log.relocate(LS, Lsn(199)).unwrap(); // seals lsn 0..127
        report_all(&f, &[(A, 100, 50)]);
        gc.compute_safe_point().unwrap();
        assert_eq!(gc.reclaim_clog().unwrap(), Lsn(50), "min(replay 50, relocated 128)");
        report_all(&f, &[(A, 100, 180)]);
        gc.compute_safe_point().unwrap();
        assert_eq!(gc.reclaim_clog().unwrap(), Lsn(128), "min(replay 180, relocated 128)");
    }
}
