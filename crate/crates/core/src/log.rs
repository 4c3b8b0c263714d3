//! The shared log service: a 3-replica, majority-quorum, append-only log
//! per log stream, with round batching, pipelined consensus rounds,
//! iterator-based consumption, relocation of sealed segments to the object
//! store, and near-real-time archiving.
//!
//! Consensus is deliberately simplified to fixed-membership leader/majority
//! acknowledgement with terms: no reconfiguration and no log holes (the
//! leader retransmits gaps when followers catch up). Quorum durability and
//! failover behavior match the full protocol for every test we run.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use thiserror::Error;

use crate::clock::Clock;
use crate::store::{ObjectKey, ObjectStore, StoreError};
use crate::trace::Trace;
use crate::types::{LogStreamId, Lsn, NodeId, Scn};
use crate::wire::{self, Reader, WireError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LogKind {
    CLog,
    Journal,
    SsLog,
}

impl LogKind {
    pub fn as_u8(self) -> u8 {
        match self {
            LogKind::CLog => 0,
            LogKind::Journal => 1,
            LogKind::SsLog => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<LogKind> {
        match v {
            0 => Some(LogKind::CLog),
            1 => Some(LogKind::Journal),
            2 => Some(LogKind::SsLog),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub log_stream_id: LogStreamId,
    pub lsn: Lsn,
    pub scn: Scn,
    pub kind: LogKind,
    pub payload: Vec<u8>,
}

impl LogEntry {
    fn encode_into(&self, buf: &mut Vec<u8>) {
        wire::put_u64(buf, self.lsn.0);
        wire::put_u64(buf, self.scn.0);
        buf.push(self.kind.as_u8());
        wire::put_bytes(buf, &self.payload);
    }

    fn decode(stream: LogStreamId, r: &mut Reader<'_>) -> Result<LogEntry, WireError> {
        let lsn = Lsn(r.u64()?);
        let scn = Scn(r.u64()?);
        let kind = LogKind::from_u8(r.u8()?).ok_or(WireError::Malformed("log kind"))?;
        let payload = r.bytes()?.to_vec();
        Ok(LogEntry { log_stream_id: stream, lsn, scn, kind, payload })
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("not leader for stream {stream}; current leader is node {leader}")]
    NotLeader { stream: LogStreamId, leader: NodeId },
    #[error("quorum unavailable for stream {0}")]
    QuorumUnavailable(LogStreamId),
    #[error("log truncated below lsn {requested} (reclaimed up to {reclaimed})")]
    Truncated { requested: Lsn, reclaimed: Lsn },
    #[error("unknown log stream {0}")]
    UnknownStream(LogStreamId),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone)]
pub struct LogConfig {
    /// One proposal-to-quorum-ack round trip, in simulated ms.
    pub round_trip_ms: u64,
    /// Leader-side gap between pipelined round proposals.
    pub proposal_gap_ms: u64,
    /// Maximum entries batched into one consensus round.
    pub batch_max: usize,
    /// Maximum rounds in flight before proposals stall on older commits.
    pub pipeline_depth: usize,
    /// Entries per sealed segment file for relocation.
    pub segment_entries: u64,
    /// Disabled only by the pipelining-safety oracle in tests.
    pub pipelining: bool,
}

impl Default for LogConfig {
    fn default() -> Self {
        LogConfig {
            round_trip_ms: 2,
            proposal_gap_ms: 1,
            batch_max: 64,
            pipeline_depth: 4,
            segment_entries: 128,
            pipelining: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplicaRole {
    Leader,
    Follower,
}

#[derive(Debug)]
struct Replica {
    node: NodeId,
    /// Locally persisted entries, keyed by lsn. The prefix below the
    /// stream's reclaim point is deleted.
    entries: BTreeMap<u64, LogEntry>,
    /// First lsn this replica has not persisted.
    persisted_next: u64,
}

#[derive(Debug)]
struct StreamState {
    id: LogStreamId,
    term: u64,
    leader: usize,
    replicas: Vec<Replica>,
    /// First uncommitted lsn; everything below is quorum-durable.
    committed_next: u64,
    last_scn: Scn,
    /// Local files below this lsn have been reclaimed on every replica.
    local_begin: u64,
    /// First lsn not covered by a relocated segment in the object store.
    relocated_next: u64,
}

impl StreamState {
    fn leader_replica(&mut self) -> &mut Replica {
        &mut self.replicas[self.leader]
    }
}

/// Point-in-time view of one replica's state, for tests and monitoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicaState {
    pub node: NodeId,
    pub role: ReplicaRole,
    pub alive: bool,
    pub persisted_lsn: Option<Lsn>,
}

pub struct LogService {
    clock: Rc<Clock>,
    trace: Rc<Trace>,
    store: Rc<dyn ObjectStore>,
    config: LogConfig,
    server_nodes: [NodeId; 3],
    alive: RefCell<BTreeMap<NodeId, bool>>,
    streams: RefCell<BTreeMap<LogStreamId, StreamState>>,
}

impl LogService {
    pub fn new(
        clock: Rc<Clock>,
        trace: Rc<Trace>,
        store: Rc<dyn ObjectStore>,
        server_nodes: [NodeId; 3],
        config: LogConfig,
    ) -> Rc<LogService> {
        let alive = server_nodes.iter().map(|&n| (n, true)).collect();
        Rc::new(LogService {
            clock,
            trace,
            config,
            store,
            server_nodes,
            alive: RefCell::new(alive),
            streams: RefCell::new(BTreeMap::new()),
        })
    }

    pub fn server_nodes(&self) -> [NodeId; 3] {
        self.server_nodes
    }

    pub fn create_stream(&self, id: LogStreamId) {
        let mut streams = self.streams.borrow_mut();
        streams.entry(id).or_insert_with(|| StreamState {
            id,
            term: 1,
            leader: 0,
            replicas: self
                .server_nodes
                .iter()
                .map(|&node| Replica { node, entries: BTreeMap::new(), persisted_next: 0 })
                .collect(),
            committed_next: 0,
            last_scn: Scn::UNSET,
            local_begin: 0,
            relocated_next: 0,
        });
    }

    pub fn stream_ids(&self) -> Vec<LogStreamId> {
        self.streams.borrow().keys().copied().collect()
    }

    fn is_alive(&self, node: NodeId) -> bool {
        *self.alive.borrow().get(&node).unwrap_or(&false)
    }

    /// Marks a LogServer node down. Its volatile state is irrelevant here;
    /// persisted entries stay on its (simulated) disk.
    pub fn crash_server(&self, node: NodeId) {
        self.alive.borrow_mut().insert(node, false);
        self.trace.record(self.clock.now(), "logsvc", "server_crash", node.to_string());
    }

    /// Brings a LogServer node back. Uncommitted local suffixes from a
    /// deposed leadership are truncated; catch-up happens on the next
    /// replicated round.
    pub fn restart_server(&self, node: NodeId) {
        self.alive.borrow_mut().insert(node, true);
        let mut streams = self.streams.borrow_mut();
        for st in streams.values_mut() {
            let committed = st.committed_next;
            if let Some(rep) = st.replicas.iter_mut().find(|r| r.node == node) {
                rep.entries.retain(|&lsn, _| lsn < committed);
                rep.persisted_next = rep.persisted_next.min(committed);
            }
        }
        self.trace.record(self.clock.now(), "logsvc", "server_restart", node.to_string());
    }

    pub fn current_leader(&self, stream: LogStreamId) -> Result<NodeId, LogError> {
        let streams = self.streams.borrow();
        let st = streams.get(&stream).ok_or(LogError::UnknownStream(stream))?;
        Ok(st.replicas[st.leader].node)
    }

    pub fn committed_next(&self, stream: LogStreamId) -> Result<Lsn, LogError> {
        let streams = self.streams.borrow();
        let st = streams.get(&stream).ok_or(LogError::UnknownStream(stream))?;
        Ok(Lsn(st.committed_next))
    }

    pub fn last_scn(&self, stream: LogStreamId) -> Result<Scn, LogError> {
        let streams = self.streams.borrow();
        let st = streams.get(&stream).ok_or(LogError::UnknownStream(stream))?;
        Ok(st.last_scn)
    }

    pub fn replica_states(&self, stream: LogStreamId) -> Result<Vec<ReplicaState>, LogError> {
        let streams = self.streams.borrow();
        let st = streams.get(&stream).ok_or(LogError::UnknownStream(stream))?;
        Ok(st
            .replicas
            .iter()
            .enumerate()
            .map(|(i, r)| ReplicaState {
                node: r.node,
                role: if i == st.leader { ReplicaRole::Leader } else { ReplicaRole::Follower },
                alive: self.is_alive(r.node),
                persisted_lsn: r.persisted_next.checked_sub(1).map(Lsn),
            })
            .collect())
    }

    /// Appends payloads as the given caller, which must be the current
    /// leader replica's node. Returns the committed lsn range (inclusive).
    pub fn append(
        &self,
        stream: LogStreamId,
        caller: NodeId,
        payloads: &[Vec<u8>],
        kind: LogKind,
        scn_hint: Scn,
    ) -> Result<(Lsn, Lsn), LogError> {
        assert!(!payloads.is_empty(), "append requires at least one payload");
        let mut streams = self.streams.borrow_mut();
        let st = streams.get_mut(&stream).ok_or(LogError::UnknownStream(stream))?;
        let leader_node = st.replicas[st.leader].node;
        if caller != leader_node {
            return Err(LogError::NotLeader { stream, leader: leader_node });
        }

        let scn = st.last_scn.max(scn_hint);
        let leader_alive = self.is_alive(leader_node);
        let quorum_possible = leader_alive
            && st.replicas.iter().filter(|r| self.is_alive(r.node)).count() >= 2;

        // Assign lsns after any uncommitted leader-local suffix so retries
        // re-propose it; the whole prefix commits together once quorum is
        // back.
        let first_lsn = st.leader_replica().persisted_next;
        let mut lsn = first_lsn;
        for payload in payloads {
            let entry = LogEntry {
                log_stream_id: stream,
                lsn: Lsn(lsn),
                scn,
                kind,
                payload: payload.clone(),
            };
            let leader = st.leader_replica();
            leader.entries.insert(lsn, entry);
            leader.persisted_next = lsn + 1;
            lsn += 1;
        }
        let last_lsn = lsn - 1;

        if !quorum_possible {
            return Err(LogError::QuorumUnavailable(stream));
        }

        // Replicate everything the leader has beyond the commit point, in
        // batched rounds with pipelined commit times.
        let start = st.committed_next;
        let end = st.leader_replica().persisted_next;
        let total = (end - start) as usize;
        let rounds = total.div_ceil(self.config.batch_max);
        let now = self.clock.now();
        let mut commit_times: Vec<u64> = Vec::with_capacity(rounds);
        for round in 0..rounds {
            let proposal = if self.config.pipelining {
                let gated = round
                    .checked_sub(self.config.pipeline_depth)
                    .map(|i| commit_times[i])
                    .unwrap_or(0);
                (now + round as u64 * self.config.proposal_gap_ms).max(gated)
            } else if round == 0 {
                now
            } else {
                commit_times[round - 1]
            };
            let mut commit = proposal + self.config.round_trip_ms;
            if let Some(&prev) = commit_times.last() {
                commit = commit.max(prev);
            }
            commit_times.push(commit);
        }

        let leader_idx = st.leader;
        for i in 0..st.replicas.len() {
            if i == leader_idx || !self.is_alive(st.replicas[i].node) {
                continue;
            }
            let missing: Vec<LogEntry> = {
                let from = st.replicas[i].persisted_next;
                st.replicas[leader_idx]
                    .entries
                    .range(from..end)
                    .map(|(_, e)| e.clone())
                    .collect()
            };
            let rep = &mut st.replicas[i];
            for entry in missing {
                rep.persisted_next = entry.lsn.0 + 1;
                rep.entries.insert(entry.lsn.0, entry);
            }
        }

        st.committed_next = end;
        st.last_scn = scn;
        if let Some(&t) = commit_times.last() {
            self.clock.advance_to(t);
        }
        self.trace.record(
            self.clock.now(),
            "logsvc",
            "log_commit",
            format!("ls={stream},first={first_lsn},last={last_lsn},scn={scn}"),
        );
        Ok((Lsn(first_lsn), Lsn(last_lsn)))
    }

    /// Elects the alive replica with the longest persisted committed prefix
    /// as the new leader.
    pub fn leader_failover(&self, stream: LogStreamId) -> Result<NodeId, LogError> {
        let mut streams = self.streams.borrow_mut();
        let st = streams.get_mut(&stream).ok_or(LogError::UnknownStream(stream))?;
        let old_leader = st.leader;
        // The election itself needs a majority of replicas reachable.
        if st.replicas.iter().filter(|r| self.is_alive(r.node)).count() < 2 {
            return Err(LogError::QuorumUnavailable(stream));
        }
        let committed = st.committed_next;
        let candidate = st
            .replicas
            .iter()
            .enumerate()
            .filter(|(i, r)| *i != old_leader && self.is_alive(r.node))
            .max_by_key(|(_, r)| r.persisted_next.min(committed));
        let (new_leader, _) = candidate.ok_or(LogError::QuorumUnavailable(stream))?;
        st.leader = new_leader;
        st.term += 1;
        // Any suffix beyond the new leader's persisted prefix was never
        // committed (quorum intersection); it is simply absent here.
        let new_committed = st.replicas[new_leader].persisted_next.min(committed);
        debug_assert!(
            new_committed == committed,
            "elected leader missing committed entries: {new_committed} < {committed}"
        );
        let node = st.replicas[new_leader].node;
        let term = st.term;
        self.clock.advance(self.config.round_trip_ms);
        self.trace.record(
            self.clock.now(),
            "logsvc",
            "leader_elected",
            format!("ls={stream},node={node},term={term}"),
        );
        Ok(node)
    }

    fn segment_key(stream: LogStreamId, first: u64, last: u64) -> ObjectKey {
        ObjectKey::new(format!("clog/{stream}/{first}-{last}")).expect("segment key")
    }

    /// Moves sealed historical segments at or below `up_to_lsn` into the
    /// object store. Iterators keep serving them transparently.
    pub fn relocate(&self, stream: LogStreamId, up_to_lsn: Lsn) -> Result<Vec<ObjectKey>, LogError> {
        let todo = {
            let streams = self.streams.borrow();
            let st = streams.get(&stream).ok_or(LogError::UnknownStream(stream))?;
            let seg = self.config.segment_entries;
            let sealed_end = (up_to_lsn.0 + 1).min(st.committed_next) / seg * seg;
            let mut todo = Vec::new();
            let mut first = st.relocated_next;
            while first + seg <= sealed_end {
                let last = first + seg - 1;
                let entries: Vec<LogEntry> = st.replicas[st.leader]
                    .entries
                    .range(first..=last)
                    .map(|(_, e)| e.clone())
                    .collect();
                debug_assert_eq!(entries.len() as u64, seg, "sealed segment has holes");
                todo.push((first, last, entries));
                first += seg;
            }
            todo
        };

        let mut keys = Vec::new();
        for (first, last, entries) in todo {
            let key = Self::segment_key(stream, first, last);
            let bytes = encode_segment(&entries);
            // Incremental upload of the sealed file.
            let parts: Vec<Vec<u8>> = bytes.chunks(16 * 1024).map(|c| c.to_vec()).collect();
            self.store.multiupload(&key, &parts)?;
            let mut streams = self.streams.borrow_mut();
            let st = streams.get_mut(&stream).expect("stream exists");
            st.relocated_next = last + 1;
            self.trace.record(
                self.clock.now(),
                "logsvc",
                "clog_relocate",
                format!("ls={stream},first={first},last={last}"),
            );
            keys.push(key);
        }
        Ok(keys)
    }

    pub fn relocated_next(&self, stream: LogStreamId) -> Result<Lsn, LogError> {
        let streams = self.streams.borrow();
        let st = streams.get(&stream).ok_or(LogError::UnknownStream(stream))?;
        Ok(Lsn(st.relocated_next))
    }

    /// First lsn still present in local replica files.
    pub fn local_begin(&self, stream: LogStreamId) -> Result<Lsn, LogError> {
        let streams = self.streams.borrow();
        let st = streams.get(&stream).ok_or(LogError::UnknownStream(stream))?;
        Ok(Lsn(st.local_begin))
    }

    /// Deletes local log files below min(min_replay_lsn, relocation_lsn) on
    /// every replica and returns that bound.
    pub fn reclaim(
        &self,
        stream: LogStreamId,
        min_replay_lsn: Lsn,
        relocation_lsn: Lsn,
    ) -> Result<Lsn, LogError> {
        let mut streams = self.streams.borrow_mut();
        let st = streams.get_mut(&stream).ok_or(LogError::UnknownStream(stream))?;
        let bound = min_replay_lsn.min(relocation_lsn).0.max(st.local_begin);
        for rep in &mut st.replicas {
            rep.entries.retain(|&lsn, _| lsn >= bound);
        }
        st.local_begin = bound;
        self.trace.record(
            self.clock.now(),
            "logsvc",
            "clog_reclaim",
            format!("ls={stream},bound={bound}"),
        );
        Ok(Lsn(bound))
    }

    fn archive_key(stream: LogStreamId) -> ObjectKey {
        ObjectKey::new(format!("archive/{stream}/log")).expect("archive key")
    }

    /// Appends newly committed entries to the stream's archive object.
    /// The watermark is derived from the archive object itself, so a
    /// crashed-and-restarted archiver never duplicates or skips entries.
    pub fn archive(&self, stream: LogStreamId) -> Result<Lsn, LogError> {
        let key = Self::archive_key(stream);
        let archived_next = match self.store.get(&key) {
            Ok(bytes) => {
                let entries = decode_entry_run(stream, &bytes)?;
                entries.last().map(|e| e.lsn.0 + 1).unwrap_or(0)
            }
            Err(StoreError::NotFound(_)) => 0,
            Err(e) => return Err(e.into()),
        };
        let to_archive: Vec<LogEntry> = {
            let streams = self.streams.borrow();
            let st = streams.get(&stream).ok_or(LogError::UnknownStream(stream))?;
            (archived_next..st.committed_next)
                .map(|lsn| self.entry_at(st, lsn))
                .collect::<Result<_, _>>()?
        };
        if to_archive.is_empty() {
            return Ok(Lsn(archived_next));
        }
        let mut buf = Vec::new();
        for entry in &to_archive {
            entry.encode_into(&mut buf);
        }
        self.store.append(&key, &buf)?;
        let watermark = to_archive.last().unwrap().lsn.0 + 1;
        self.trace.record(
            self.clock.now(),
            "logsvc",
            "clog_archive",
            format!("ls={stream},watermark={watermark}"),
        );
        Ok(Lsn(watermark))
    }

    fn entry_at(&self, st: &StreamState, lsn: u64) -> Result<LogEntry, LogError> {
        if lsn >= st.local_begin {
            if let Some(e) = st.replicas[st.leader].entries.get(&lsn) {
                return Ok(e.clone());
            }
        }
        if lsn < st.relocated_next {
            let seg = self.config.segment_entries;
            let first = lsn / seg * seg;
            let key = Self::segment_key(st.id, first, first + seg - 1);
            let bytes = self.store.get(&key)?;
            let entries = decode_segment(st.id, &bytes)?;
            return entries
                .into_iter()
                .find(|e| e.lsn.0 == lsn)
                .ok_or(LogError::Truncated { requested: Lsn(lsn), reclaimed: Lsn(st.local_begin) });
        }
        Err(LogError::Truncated { requested: Lsn(lsn), reclaimed: Lsn(st.local_begin) })
    }

    /// Iterates the committed prefix from `from_lsn`, transparently sourcing
    /// entries from local replica files or relocated segments.
    pub fn read_iter(&self, stream: LogStreamId, from_lsn: Lsn) -> Result<LogIter, LogError> {
        let streams = self.streams.borrow();
        let st = streams.get(&stream).ok_or(LogError::UnknownStream(stream))?;
        if from_lsn.0 < st.local_begin && from_lsn.0 >= st.relocated_next {
            return Err(LogError::Truncated {
                requested: from_lsn,
                reclaimed: Lsn(st.local_begin),
            });
        }
        Ok(LogIter { stream, next: from_lsn.0, segment: None })
    }
}

/// Pull-based reader over the committed prefix of one log stream.
///
/// Holding no borrow of the service, it can be interleaved with appends;
/// it observes entries committed after its creation as well.
pub struct LogIter {
    stream: LogStreamId,
    next: u64,
    segment: Option<(u64, Vec<LogEntry>)>,
}

impl LogIter {
    pub fn next_entry(&mut self, svc: &LogService) -> Result<Option<LogEntry>, LogError> {
        let streams = svc.streams.borrow();
        let st = streams.get(&self.stream).ok_or(LogError::UnknownStream(self.stream))?;
        if self.next >= st.committed_next {
            return Ok(None);
        }
        let lsn = self.next;
        if lsn >= st.local_begin {
            if let Some(e) = st.replicas[st.leader].entries.get(&lsn) {
                self.next += 1;
                return Ok(Some(e.clone()));
            }
        }
        // Serve from a relocated segment, caching one segment at a time.
        if lsn < st.relocated_next {
            let seg = svc.config.segment_entries;
            let first = lsn / seg * seg;
            if self.segment.as_ref().map(|(f, _)| *f) != Some(first) {
                let key = LogService::segment_key(self.stream, first, first + seg - 1);
                drop(streams);
                let bytes = svc.store.get(&key)?;
                let entries = decode_segment(self.stream, &bytes)?;
                self.segment = Some((first, entries));
            }
            let (_, entries) = self.segment.as_ref().unwrap();
            let entry = entries
                .iter()
                .find(|e| e.lsn.0 == lsn)
                .cloned()
                .ok_or(LogError::Truncated { requested: Lsn(lsn), reclaimed: Lsn(lsn) })?;
            self.next += 1;
            return Ok(Some(entry));
        }
        Err(LogError::Truncated { requested: Lsn(lsn), reclaimed: Lsn(st.local_begin) })
    }

    /// Drains everything currently committed.
    pub fn collect_remaining(&mut self, svc: &LogService) -> Result<Vec<LogEntry>, LogError> {
        let mut out = Vec::new();
        while let Some(e) = self.next_entry(svc)? {
            out.push(e);
        }
        Ok(out)
    }

    pub fn position(&self) -> Lsn {
        Lsn(self.next)
    }
}

/// Segment format: count (4B BE) | per-entry (lsn 8B BE, scn 8B BE,
/// kind 1B, payload length 4B BE, payload) | crc32 footer (4B BE).
pub fn encode_segment(entries: &[LogEntry]) -> Vec<u8> {
    let mut buf = Vec::new();
    wire::put_u32(&mut buf, entries.len() as u32);
    for entry in entries {
        entry.encode_into(&mut buf);
    }
    let crc = crate::types::crc32(&buf);
    wire::put_u32(&mut buf, crc);
    buf
}

pub fn decode_segment(stream: LogStreamId, bytes: &[u8]) -> Result<Vec<LogEntry>, LogError> {
    if bytes.len() < 8 {
        return Err(WireError::Truncated(bytes.len()).into());
    }
    let (body, footer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_be_bytes(footer.try_into().unwrap());
    let computed = crate::types::crc32(body);
    if stored != computed {
        return Err(WireError::ChecksumMismatch { stored, computed }.into());
    }
    let mut r = Reader::new(body);
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(LogEntry::decode(stream, &mut r)?);
    }
    Ok(out)
}

/// Decodes a headerless run of entries (the archive object format).
pub fn decode_entry_run(stream: LogStreamId, bytes: &[u8]) -> Result<Vec<LogEntry>, LogError> {
    let mut r = Reader::new(bytes);
    let mut out = Vec::new();
    while r.remaining() > 0 {
        out.push(LogEntry::decode(stream, &mut r)?);
    }
    Ok(out)
}
