//! The transaction layer: snapshot reads at a per-transaction read SCN,
//! sharded single-writer commits through each log stream's leader,
//! cross-partition two-phase commit, minimum-read-SCN accounting for GC,
//! and long-running transaction handling.
//!
//! Write-write conflicts resolve first-committer-wins per key under
//! snapshot isolation; lock/prepare ordering follows (log stream, tablet,
//! key) to rule out deadlocks.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use thiserror::Error;

use crate::clock::{Clock, ScnSource};
use crate::engine::{Engine, EngineError};
use crate::log::{LogEntry, LogError, LogKind, LogService};
use crate::trace::Trace;
use crate::types::{LogStreamId, NodeId, Row, Scn, TabletId};
use crate::wire::{self, Reader, WireError};

#[derive(Debug, Error)]
pub enum TxnError {
    #[error("transaction {0} is not active")]
    NotActive(u64),
    #[error("transaction {txn} aborted: write-write conflict with commit at {conflict}")]
    Conflict { txn: u64, conflict: Scn },
    #[error("snapshot too old: read scn {read_scn} below gc safe point {floor}")]
    SnapshotTooOld { read_scn: Scn, floor: Scn },
    #[error("engine would stall; retry after dumps drain")]
    WouldStall,
    #[error("crash injected after step {0}")]
    CrashInjected(u32),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxnState {
    Active,
    Preparing,
    Committed,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LongTxnPolicy {
    Abort,
    Promote,
}

#[derive(Debug, Clone)]
pub struct TxnConfig {
    pub long_txn_timeout_ms: u64,
    pub long_txn_policy: LongTxnPolicy,
}

impl Default for TxnConfig {
    fn default() -> Self {
        TxnConfig { long_txn_timeout_ms: 60_000, long_txn_policy: LongTxnPolicy::Abort }
    }
}

/// One buffered write: key plus value-or-tombstone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteOp {
    pub tablet: TabletId,
    pub key: Vec<u8>,
    pub value: Option<Vec<u8>>,
}

#[derive(Debug)]
pub struct Txn {
    pub txn_id: u64,
    pub read_scn: Scn,
    pub state: TxnState,
    pub start_ms: u64,
    /// Buffered writes grouped by log stream, kept in lock order.
    pub writes: BTreeMap<LogStreamId, Vec<WriteOp>>,
}

// 2PC records are CLog payloads with a 1-byte tag {0x01 Prepare,
// 0x02 Commit, 0x03 Abort} followed by txn_id (8B BE) and the participant
// list; 0x00 tags a plain single-stream commit. Prepare and plain records
// carry the redo writes; Commit records carry the assigned commit scn.

pub const TAG_PLAIN: u8 = 0x00;
pub const TAG_PREPARE: u8 = 0x01;
pub const TAG_COMMIT: u8 = 0x02;
pub const TAG_ABORT: u8 = 0x03;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClogRecord {
    /// Single-stream commit: writes apply at the entry's scn.
    Plain { txn_id: u64, writes: Vec<WriteOp> },
    Prepare { txn_id: u64, participants: Vec<LogStreamId>, writes: Vec<WriteOp> },
    /// In the coordinator's stream this is the commit decision; in a
    /// participant's stream it releases that stream's prepared writes.
    Commit { txn_id: u64, participants: Vec<LogStreamId>, commit_scn: Scn },
    Abort { txn_id: u64, participants: Vec<LogStreamId> },
}

fn encode_writes(buf: &mut Vec<u8>, writes: &[WriteOp]) {
    wire::put_u32(buf, writes.len() as u32);
    for w in writes {
        wire::put_u64(buf, w.tablet.0);
        wire::put_bytes(buf, &w.key);
        match &w.value {
            Some(v) => {
                buf.push(1);
                wire::put_bytes(buf, v);
            }
            None => buf.push(0),
        }
    }
}

fn decode_writes(r: &mut Reader<'_>) -> Result<Vec<WriteOp>, WireError> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let tablet = TabletId(r.u64()?);
        let key = r.bytes()?.to_vec();
        let value = match r.u8()? {
            1 => Some(r.bytes()?.to_vec()),
            0 => None,
            _ => return Err(WireError::Malformed("write flag")),
        };
        out.push(WriteOp { tablet, key, value });
    }
    Ok(out)
}

fn encode_participants(buf: &mut Vec<u8>, participants: &[LogStreamId]) {
    wire::put_u32(buf, participants.len() as u32);
    for p in participants {
        wire::put_u64(buf, p.0);
    }
}

fn decode_participants(r: &mut Reader<'_>) -> Result<Vec<LogStreamId>, WireError> {
    let count = r.u32()? as usize;
    (0..count).map(|_| Ok(LogStreamId(r.u64()?))).collect()
}

impl ClogRecord {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        match self {
            ClogRecord::Plain { txn_id, writes } => {
                buf.push(TAG_PLAIN);
                wire::put_u64(&mut buf, *txn_id);
                encode_writes(&mut buf, writes);
            }
            ClogRecord::Prepare { txn_id, participants, writes } => {
                buf.push(TAG_PREPARE);
                wire::put_u64(&mut buf, *txn_id);
                encode_participants(&mut buf, participants);
                encode_writes(&mut buf, writes);
            }
            ClogRecord::Commit { txn_id, participants, commit_scn } => {
                buf.push(TAG_COMMIT);
                wire::put_u64(&mut buf, *txn_id);
                encode_participants(&mut buf, participants);
                wire::put_u64(&mut buf, commit_scn.0);
            }
            ClogRecord::Abort { txn_id, participants } => {
                buf.push(TAG_ABORT);
                wire::put_u64(&mut buf, *txn_id);
                encode_participants(&mut buf, participants);
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<ClogRecord, WireError> {
        let mut r = Reader::new(bytes);
        let tag = r.u8()?;
        let txn_id = r.u64()?;
        Ok(match tag {
            TAG_PLAIN => ClogRecord::Plain { txn_id, writes: decode_writes(&mut r)? },
            TAG_PREPARE => ClogRecord::Prepare {
                txn_id,
                participants: decode_participants(&mut r)?,
                writes: decode_writes(&mut r)?,
            },
            TAG_COMMIT => ClogRecord::Commit {
                txn_id,
                participants: decode_participants(&mut r)?,
                commit_scn: Scn(r.u64()?),
            },
            TAG_ABORT => ClogRecord::Abort { txn_id, participants: decode_participants(&mut r)? },
            _ => return Err(WireError::Malformed("clog tag")),
        })
    }
}

/// Appends to a stream as whatever replica currently leads it.
pub fn append_as_leader(
    log: &LogService,
    stream: LogStreamId,
    payload: Vec<u8>,
    scn_hint: Scn,
) -> Result<(), LogError> {
    let leader = log.current_leader(stream)?;
    log.append(stream, leader, &[payload], LogKind::CLog, scn_hint)?;
    Ok(())
}

/// Routes each log stream to the engine on its leader node.
#[derive(Default)]
pub struct TxnRouter {
    routes: RefCell<BTreeMap<LogStreamId, Rc<Engine>>>,
}

impl TxnRouter {
    pub fn new() -> Rc<TxnRouter> {
        Rc::new(TxnRouter::default())
    }

    pub fn set_route(&self, stream: LogStreamId, engine: Rc<Engine>) {
        self.routes.borrow_mut().insert(stream, engine);
    }

    pub fn engine_for(&self, stream: LogStreamId) -> Option<Rc<Engine>> {
        self.routes.borrow().get(&stream).cloned()
    }

    pub fn streams(&self) -> Vec<LogStreamId> {
        self.routes.borrow().keys().copied().collect()
    }
}

/// Per-node transaction manager. Transactions begin and end here; their
/// read scns feed the node's min-read-scn report.
pub struct TxnManager {
    node: NodeId,
    clock: Rc<Clock>,
    trace: Rc<Trace>,
    scn: Rc<ScnSource>,
    log: Rc<LogService>,
    router: Rc<TxnRouter>,
    config: TxnConfig,
    next_txn_id: Cell<u64>,
    txns: RefCell<BTreeMap<u64, Txn>>,
    /// GC floor: reads below this are rejected (possible only for
    /// promoted or expired long transactions).
    gc_floor: Cell<Scn>,
}

impl TxnManager {
    pub fn new(
        node: NodeId,
        clock: Rc<Clock>,
        trace: Rc<Trace>,
        scn: Rc<ScnSource>,
        log: Rc<LogService>,
        router: Rc<TxnRouter>,
        config: TxnConfig,
    ) -> Rc<TxnManager> {
        Rc::new(TxnManager {
            node,
            clock,
            trace,
            scn,
            log,
            router,
            config,
            next_txn_id: Cell::new((node.0 << 32) | 1),
            txns: RefCell::new(BTreeMap::new()),
            gc_floor: Cell::new(Scn::UNSET),
        })
    }

    pub fn node_id(&self) -> NodeId {
        self.node
    }

    pub fn set_gc_floor(&self, floor: Scn) {
        self.gc_floor.set(self.gc_floor.get().max(floor));
    }

    /// Opens a transaction reading the snapshot at the current global
    /// committed scn.
    pub fn begin(&self) -> u64 {
        let txn_id = self.next_txn_id.get();
        self.next_txn_id.set(txn_id + 1);
        let txn = Txn {
            txn_id,
            read_scn: self.scn.current(),
            state: TxnState::Active,
            start_ms: self.clock.now(),
            writes: BTreeMap::new(),
        };
        self.txns.borrow_mut().insert(txn_id, txn);
        txn_id
    }

    pub fn read_scn(&self, txn_id: u64) -> Option<Scn> {
        self.txns.borrow().get(&txn_id).map(|t| t.read_scn)
    }

    pub fn state(&self, txn_id: u64) -> Option<TxnState> {
        self.txns.borrow().get(&txn_id).map(|t| t.state)
    }

    /// Buffers a write; it becomes visible only at commit.
    pub fn write(
        &self,
        txn_id: u64,
        stream: LogStreamId,
        tablet: TabletId,
        key: impl Into<Vec<u8>>,
        value: Option<Vec<u8>>,
    ) -> Result<(), TxnError> {
        let mut txns = self.txns.borrow_mut();
        let txn = txns.get_mut(&txn_id).ok_or(TxnError::NotActive(txn_id))?;
        if txn.state != TxnState::Active {
            return Err(TxnError::NotActive(txn_id));
        }
        let ops = txn.writes.entry(stream).or_default();
        ops.push(WriteOp { tablet, key: key.into(), value });
        // Deadlock prevention: acquisition ordered by (stream, tablet, key).
        ops.sort_by(|a, b| (a.tablet, &a.key).cmp(&(b.tablet, &b.key)));
        Ok(())
    }

    /// Snapshot read: always the versions at the transaction's read scn.
    pub fn read_txn(
        &self,
        txn_id: u64,
        tablet: TabletId,
        key: &[u8],
    ) -> Result<Option<Vec<u8>>, TxnError> {
        let read_scn = {
            let txns = self.txns.borrow();
            let txn = txns.get(&txn_id).ok_or(TxnError::NotActive(txn_id))?;
            if txn.state != TxnState::Active {
                return Err(TxnError::NotActive(txn_id));
            }
            txn.read_scn
        };
        if read_scn < self.gc_floor.get() {
            return Err(TxnError::SnapshotTooOld { read_scn, floor: self.gc_floor.get() });
        }
        let engine = self
            .router
            .streams()
            .into_iter()
            .filter_map(|s| self.router.engine_for(s))
            .find(|e| e.tablet_ids().contains(&tablet))
            .ok_or(TxnError::NotActive(txn_id))?;
        Ok(engine.read(tablet, key, read_scn)?)
    }

    pub fn abort(&self, txn_id: u64) -> Result<(), TxnError> {
        let mut txns = self.txns.borrow_mut();
        let txn = txns.get_mut(&txn_id).ok_or(TxnError::NotActive(txn_id))?;
        txn.state = TxnState::Aborted;
        txn.writes.clear();
        Ok(())
    }

    pub fn commit(&self, txn_id: u64) -> Result<Scn, TxnError> {
        self.commit_with_crash(txn_id, None)
    }

    /// Commits the transaction: a single-stream transaction is one CLog
    /// append; a multi-stream transaction runs 2PC across the
    /// participating stream leaders. Returns the commit scn.
    ///
    /// `crash_after` stops the protocol after that many externally visible
    /// steps (appends/applies), for crash-point enumeration; the
    /// transaction is left in doubt and recovery decides its outcome.
    pub fn commit_with_crash(
        &self,
        txn_id: u64,
        crash_after: Option<u32>,
    ) -> Result<Scn, TxnError> {
        let (read_scn, writes) = {
            let mut txns = self.txns.borrow_mut();
            let txn = txns.get_mut(&txn_id).ok_or(TxnError::NotActive(txn_id))?;
            if txn.state != TxnState::Active {
                return Err(TxnError::NotActive(txn_id));
            }
            txn.state = TxnState::Preparing;
            (txn.read_scn, txn.writes.clone())
        };
        let set_state = |state: TxnState| {
            if let Some(txn) = self.txns.borrow_mut().get_mut(&txn_id) {
                txn.state = state;
            }
        };

        if writes.is_empty() {
            self.finish_commit(txn_id, read_scn);
            return Ok(read_scn);
        }

        // Admission: never log a commit the engines cannot absorb.
        for (stream, ops) in &writes {
            let engine = self.router.engine_for(*stream).ok_or(TxnError::WouldStall)?;
            for tablet in ops.iter().map(|o| o.tablet).collect::<std::collections::BTreeSet<_>>() {
                if !engine.can_accept(tablet) {
                    set_state(TxnState::Active);
                    return Err(TxnError::WouldStall);
                }
            }
        }

        // First-committer-wins: any key overwritten since our snapshot
        // aborts the transaction.
        for (stream, ops) in &writes {
            let engine = self.router.engine_for(*stream).ok_or(TxnError::WouldStall)?;
            for op in ops {
                if let Some(newest) = engine.latest_version_scn(op.tablet, &op.key)? {
                    if newest > read_scn {
                        set_state(TxnState::Aborted);
                        return Err(TxnError::Conflict { txn: txn_id, conflict: newest });
                    }
                }
            }
        }

        let participants: Vec<LogStreamId> = writes.keys().copied().collect();
        let mut steps = 0u32;
        let crash_check = |steps: &mut u32| -> Result<(), TxnError> {
            *steps += 1;
            if crash_after == Some(*steps) {
                Err(TxnError::CrashInjected(*steps))
            } else {
                Ok(())
            }
        };

        if participants.len() == 1 {
            // Single-stream fast path: exactly one CLog entry.
            let stream = participants[0];
            let commit_scn = self.scn.next();
            let record = ClogRecord::Plain { txn_id, writes: writes[&stream].clone() };
            if let Err(e) = append_as_leader(&self.log, stream, record.encode(), commit_scn) {
                set_state(TxnState::Aborted);
                return Err(e.into());
            }
            crash_check(&mut steps)?;
            self.apply_writes(stream, &writes[&stream], commit_scn)?;
            self.finish_commit(txn_id, commit_scn);
            return Ok(commit_scn);
        }

        // 2PC. Prepare entries in participant order; abort everywhere on
        // any prepare failure.
        let mut prepare_scns = Vec::new();
        for stream in &participants {
            let prepare_scn = self.scn.next();
            let record = ClogRecord::Prepare {
                txn_id,
                participants: participants.clone(),
                writes: writes[stream].clone(),
            };
            match append_as_leader(&self.log, *stream, record.encode(), prepare_scn) {
                Ok(()) => prepare_scns.push(prepare_scn),
                Err(e) => {
                    // A participant is unavailable during prepare: abort
                    // globally; no write is visible anywhere.
                    for abort_stream in &participants {
                        let rec =
                            ClogRecord::Abort { txn_id, participants: participants.clone() };
                        let _ = append_as_leader(&self.log, *abort_stream, rec.encode(), read_scn);
                    }
                    set_state(TxnState::Aborted);
                    return Err(e.into());
                }
            }
            crash_check(&mut steps)?;
        }

        // Commit scn: the maximum of the participants' prepare scns.
        let commit_scn = prepare_scns.iter().copied().max().expect("non-empty participants");

        // Coordinator decision: the first participant's stream carries the
        // commit record; once it commits, the outcome is durable.
        let coordinator = participants[0];
        let decision =
            ClogRecord::Commit { txn_id, participants: participants.clone(), commit_scn };
        if let Err(e) = append_as_leader(&self.log, coordinator, decision.encode(), commit_scn) {
            set_state(TxnState::Aborted);
            return Err(e.into());
        }
        self.trace.record(
            self.clock.now(),
            &format!("txn/{}", self.node),
            "commit_acked",
            format!("txn={txn_id},scn={commit_scn}"),
        );
        crash_check(&mut steps)?;

        // Participant commit entries release each stream's writes.
        for stream in &participants {
            let rec = ClogRecord::Commit { txn_id, participants: Vec::new(), commit_scn };
            append_as_leader(&self.log, *stream, rec.encode(), commit_scn)?;
            crash_check(&mut steps)?;
        }

        // Apply to the engines: all-or-nothing visibility at commit_scn.
        for stream in &participants {
            self.apply_writes(*stream, &writes[stream], commit_scn)?;
            crash_check(&mut steps)?;
        }
        self.finish_commit(txn_id, commit_scn);
        Ok(commit_scn)
    }

    fn apply_writes(
        &self,
        stream: LogStreamId,
        ops: &[WriteOp],
        commit_scn: Scn,
    ) -> Result<(), TxnError> {
        let engine = self.router.engine_for(stream).ok_or(TxnError::WouldStall)?;
        for op in ops {
            let row = match &op.value {
                Some(v) => Row::put(op.key.clone(), v.clone(), commit_scn),
                None => Row::delete(op.key.clone(), commit_scn),
            };
            engine.write_row(op.tablet, row)?;
        }
        Ok(())
    }

    fn finish_commit(&self, txn_id: u64, commit_scn: Scn) {
        self.txns.borrow_mut().remove(&txn_id);
        self.trace.record(
            self.clock.now(),
            &format!("txn/{}", self.node),
            "commit_done",
            format!("txn={txn_id},scn={commit_scn}"),
        );
    }

    /// This node's report: the minimum read scn over its active
    /// transactions, or the current global scn when idle.
    pub fn report_min_read_scn(&self) -> Scn {
        self.txns
            .borrow()
            .values()
            .filter(|t| matches!(t.state, TxnState::Active | TxnState::Preparing))
            .map(|t| t.read_scn)
            .min()
            .unwrap_or_else(|| self.scn.current())
    }

    pub fn active_count(&self) -> usize {
        self.txns
            .borrow()
            .values()
            .filter(|t| matches!(t.state, TxnState::Active | TxnState::Preparing))
            .count()
    }

    /// Applies the configured policy to transactions open longer than the
    /// timeout: abort them, or promote their read scn to the present so
    /// GC can advance.
    pub fn handle_long_txns(&self) -> Vec<(u64, LongTxnPolicy)> {
        let now = self.clock.now();
        let current = self.scn.current();
        let mut handled = Vec::new();
        let mut txns = self.txns.borrow_mut();
        for txn in txns.values_mut() {
            if txn.state != TxnState::Active
                || now.saturating_sub(txn.start_ms) <= self.config.long_txn_timeout_ms
            {
                continue;
            }
            match self.config.long_txn_policy {
                LongTxnPolicy::Abort => {
                    txn.state = TxnState::Aborted;
                    txn.writes.clear();
                }
                LongTxnPolicy::Promote => {
                    txn.read_scn = current;
                    txn.start_ms = now;
                }
            }
            handled.push((txn.txn_id, self.config.long_txn_policy));
        }
        handled
    }
}

/// Aggregate of node reports: the global minimum read scn broadcast to GC.
pub fn aggregate_min_read_scn(reports: &[Scn]) -> Option<Scn> {
    reports.iter().copied().min()
}

/// Replays committed CLog entries into row applications, resolving 2PC:
/// plain commits apply at the entry scn, prepared writes are buffered and
/// released by their stream's commit record. RO replay and crash recovery
/// share this, so both see identical visibility rules.
#[derive(Debug, Default)]
pub struct ReplayTracker {
    prepared: BTreeMap<(LogStreamId, u64), Vec<WriteOp>>,
}

impl ReplayTracker {
    pub fn new() -> ReplayTracker {
        ReplayTracker::default()
    }

    /// Consumes one committed entry, returning the rows it releases.
    pub fn consume(&mut self, entry: &LogEntry) -> Result<Vec<(TabletId, Row)>, WireError> {
        if entry.kind != LogKind::CLog {
            return Ok(Vec::new());
        }
        let record = ClogRecord::decode(&entry.payload)?;
        let mut out = Vec::new();
        match record {
            ClogRecord::Plain { writes, .. } => {
                for op in writes {
                    out.push((op.tablet, op_to_row(op, entry.scn)));
                }
            }
            ClogRecord::Prepare { txn_id, writes, .. } => {
                self.prepared.insert((entry.log_stream_id, txn_id), writes);
            }
            ClogRecord::Commit { txn_id, commit_scn, .. } => {
                if let Some(writes) = self.prepared.remove(&(entry.log_stream_id, txn_id)) {
                    for op in writes {
                        out.push((op.tablet, op_to_row(op, commit_scn)));
                    }
                }
            }
            ClogRecord::Abort { txn_id, .. } => {
                self.prepared.remove(&(entry.log_stream_id, txn_id));
            }
        }
        Ok(out)
    }
}

fn op_to_row(op: WriteOp, scn: Scn) -> Row {
    match op.value {
        Some(v) => Row::put(op.key, v, scn),
        None => Row::delete(op.key, scn),
    }
}

/// Post-crash recovery: scans every stream's committed entries, decides
/// each in-doubt 2PC transaction from its coordinator stream (commit
/// record present means roll forward; otherwise presumed abort), appends
/// the missing participant records, and replays all released writes into
/// the engines.
pub fn recover_two_phase(
    log: &LogService,
    router: &TxnRouter,
    streams: &[LogStreamId],
) -> Result<(), TxnError> {
    use std::collections::BTreeSet;

    let mut prepares: BTreeMap<u64, Vec<LogStreamId>> = BTreeMap::new();
    let mut decisions: BTreeMap<u64, Scn> = BTreeMap::new();
    let mut aborted: BTreeSet<u64> = BTreeSet::new();
    let mut committed_in: BTreeMap<u64, BTreeSet<LogStreamId>> = BTreeMap::new();
    for &stream in streams {
        let mut iter = log.read_iter(stream, crate::types::Lsn(0))?;
        while let Some(entry) = iter.next_entry(log)? {
            if entry.kind != LogKind::CLog {
                continue;
            }
            match ClogRecord::decode(&entry.payload).map_err(LogError::from)? {
                ClogRecord::Prepare { txn_id, participants, .. } => {
                    prepares.entry(txn_id).or_insert(participants);
                }
                ClogRecord::Commit { txn_id, participants, commit_scn } => {
                    if !participants.is_empty() {
                        decisions.insert(txn_id, commit_scn);
                    }
                    committed_in.entry(txn_id).or_default().insert(stream);
                }
                ClogRecord::Abort { txn_id, .. } => {
                    aborted.insert(txn_id);
                }
                ClogRecord::Plain { .. } => {}
            }
        }
    }

    // Finish the protocol for every decided-but-incomplete transaction;
    // abort the undecided.
    for (txn_id, participants) in &prepares {
        if aborted.contains(txn_id) {
            continue;
        }
        match decisions.get(txn_id) {
            Some(&commit_scn) => {
                let done = committed_in.get(txn_id).cloned().unwrap_or_default();
                for stream in participants {
                    if !done.contains(stream) {
                        let rec = ClogRecord::Commit {
                            txn_id: *txn_id,
                            participants: Vec::new(),
                            commit_scn,
                        };
                        append_as_leader(log, *stream, rec.encode(), commit_scn)?;
                    }
                }
            }
            None => {
                for stream in participants {
                    let rec =
                        ClogRecord::Abort { txn_id: *txn_id, participants: participants.clone() };
                    append_as_leader(log, *stream, rec.encode(), Scn::UNSET)?;
                }
            }
        }
    }

    // Replay everything into the engines (idempotent per (key, scn)).
    for &stream in streams {
        let Some(engine) = router.engine_for(stream) else { continue };
        let mut tracker = ReplayTracker::new();
        let mut iter = log.read_iter(stream, crate::types::Lsn(0))?;
        while let Some(entry) = iter.next_entry(log)? {
            for (tablet, row) in tracker.consume(&entry).map_err(LogError::from)? {
                engine.replay_row(tablet, row)?;
            }
        }
    }
    Ok(())
}
