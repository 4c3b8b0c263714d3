//! The metadata service: SSLog (a KV-mutation WAL riding the shared log
//! service) plus hierarchical metadata with write-through and write-back
//! levels, metadata 2PC, SSWriter leases, and table-level changes.
//!
//! Everything that coordinates nodes — leases, deletion intents, tablet
//! metadata, version bumps — is an SSLog record, so all coordination state
//! is totally ordered with the metadata it guards. Read-only nodes poll
//! the log and replay records into a local [`KvView`]; after replaying to
//! the same lsn, all views are identical.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use thiserror::Error;

use crate::clock::{Clock, ScnSource};
use crate::log::{LogError, LogKind, LogService};
use crate::store::{ObjectKey, ObjectStore, StoreError};
use crate::trace::Trace;
use crate::types::{LogStreamId, Lsn, NodeId, Scn, SsTableKind, TabletId};
use crate::wire::{self, Reader, WireError};

/// One KV mutation carried by SSLog. Records for one key replay to
/// last-writer-wins by scn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SsLogRecord {
    pub key: Vec<u8>,
    /// `None` is a tombstone.
    pub value: Option<Vec<u8>>,
    pub scn: Scn,
}

impl SsLogRecord {
    pub fn put(key: impl Into<Vec<u8>>, value: Vec<u8>) -> SsLogRecord {
        SsLogRecord { key: key.into(), value: Some(value), scn: Scn::UNSET }
    }

    pub fn tombstone(key: impl Into<Vec<u8>>) -> SsLogRecord {
        SsLogRecord { key: key.into(), value: None, scn: Scn::UNSET }
    }

    fn encode_into(&self, buf: &mut Vec<u8>) {
        wire::put_bytes(buf, &self.key);
        match &self.value {
            Some(v) => {
                buf.push(1);
                wire::put_bytes(buf, v);
            }
            None => buf.push(0),
        }
        wire::put_u64(buf, self.scn.0);
    }

    fn decode(r: &mut Reader<'_>) -> Result<SsLogRecord, WireError> {
        let key = r.bytes()?.to_vec();
        let value = match r.u8()? {
            1 => Some(r.bytes()?.to_vec()),
            0 => None,
            _ => return Err(WireError::Malformed("sslog value flag")),
        };
        let scn = Scn(r.u64()?);
        Ok(SsLogRecord { key, value, scn })
    }
}

fn encode_batch(records: &[SsLogRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    wire::put_u32(&mut buf, records.len() as u32);
    for rec in records {
        rec.encode_into(&mut buf);
    }
    buf
}

pub fn decode_batch(bytes: &[u8]) -> Result<Vec<SsLogRecord>, WireError> {
    let mut r = Reader::new(bytes);
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(SsLogRecord::decode(&mut r)?);
    }
    Ok(out)
}

/// Strict hierarchy: Node > Tenant > LogStream > Tablet. Log stream level
/// and above are write-through; tablet level is write-back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MetaLevel {
    Node,
    Tenant,
    LogStream,
    Tablet,
}

impl MetaLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            MetaLevel::Node => "node",
            MetaLevel::Tenant => "tenant",
            MetaLevel::LogStream => "logstream",
            MetaLevel::Tablet => "tablet",
        }
    }

    pub fn write_through(self) -> bool {
        self <= MetaLevel::LogStream
    }
}

/// A versioned metadata file at one hierarchy level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaFile {
    pub level: MetaLevel,
    pub id: u64,
    pub version: u64,
    pub payload: Vec<u8>,
}

fn encode_meta_value(version: u64, payload: &[u8]) -> Vec<u8> {
    let mut buf = Vec::new();
    wire::put_u64(&mut buf, version);
    wire::put_bytes(&mut buf, payload);
    buf
}

fn decode_meta_value(bytes: &[u8]) -> Result<(u64, Vec<u8>), WireError> {
    let mut r = Reader::new(bytes);
    let version = r.u64()?;
    let payload = r.bytes()?.to_vec();
    Ok((version, payload))
}

/// Exclusive write permission for one log stream's shared data/metadata,
/// valid until `expires_at_ms` on the simulated clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsWriterLease {
    pub log_stream_id: LogStreamId,
    pub holder: NodeId,
    pub expires_at_ms: u64,
}

pub(crate) fn encode_lease(holder: NodeId, expires_at_ms: u64) -> Vec<u8> {
    let mut buf = Vec::new();
    wire::put_u64(&mut buf, holder.0);
    wire::put_u64(&mut buf, expires_at_ms);
    buf
}

pub(crate) fn decode_lease(bytes: &[u8]) -> Result<(NodeId, u64), WireError> {
    let mut r = Reader::new(bytes);
    Ok((NodeId(r.u64()?), r.u64()?))
}

/// Reference to a shared SSTable in the tablet metadata: enough to locate
/// and verify the descriptor object without fetching it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SsTableRef {
    pub kind: SsTableKind,
    pub scn_range: (Scn, Scn),
    pub object_key: String,
    pub checksum: u32,
}

/// Shared per-tablet metadata: the SSTable list and the checkpoint below
/// which everything is persisted in shared storage.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TabletMeta {
    pub tablet_id: TabletId,
    pub log_stream_id: LogStreamId,
    pub checkpoint_scn: Scn,
    pub sstables: Vec<SsTableRef>,
}

impl TabletMeta {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        wire::put_u64(&mut buf, self.tablet_id.0);
        wire::put_u64(&mut buf, self.log_stream_id.0);
        wire::put_u64(&mut buf, self.checkpoint_scn.0);
        wire::put_u32(&mut buf, self.sstables.len() as u32);
        for t in &self.sstables {
            buf.push(t.kind.as_u8());
            wire::put_u64(&mut buf, t.scn_range.0 .0);
            wire::put_u64(&mut buf, t.scn_range.1 .0);
            wire::put_bytes(&mut buf, t.object_key.as_bytes());
            wire::put_u32(&mut buf, t.checksum);
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<TabletMeta, WireError> {
        let mut r = Reader::new(bytes);
        let tablet_id = TabletId(r.u64()?);
        let log_stream_id = LogStreamId(r.u64()?);
        let checkpoint_scn = Scn(r.u64()?);
        let count = r.u32()? as usize;
        let mut sstables = Vec::with_capacity(count);
        for _ in 0..count {
            let kind = SsTableKind::from_u8(r.u8()?).ok_or(WireError::Malformed("sstable kind"))?;
            let start = Scn(r.u64()?);
            let end = Scn(r.u64()?);
            let object_key = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| WireError::Malformed("sstable key utf8"))?;
            let checksum = r.u32()?;
            sstables.push(SsTableRef { kind, scn_range: (start, end), object_key, checksum });
        }
        Ok(TabletMeta { tablet_id, log_stream_id, checkpoint_scn, sstables })
    }
}

/// A replayed view of the SSLog KV state. Applying the committed records
/// in lsn order reproduces the writer's view exactly.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvView {
    entries: BTreeMap<Vec<u8>, (Scn, Option<Vec<u8>>)>,
    next_lsn: u64,
}

impl KvView {
    pub fn new() -> KvView {
        KvView::default()
    }

    pub fn next_lsn(&self) -> Lsn {
        Lsn(self.next_lsn)
    }

    pub fn apply(&mut self, rec: &SsLogRecord) {
        match self.entries.get(&rec.key) {
            Some((scn, _)) if *scn > rec.scn => {}
            _ => {
                self.entries.insert(rec.key.clone(), (rec.scn, rec.value.clone()));
            }
        }
    }

    pub fn get(&self, key: &[u8]) -> Option<&[u8]> {
        match self.entries.get(key) {
            Some((_, Some(v))) => Some(v),
            _ => None,
        }
    }

    /// Keys with the given prefix that currently hold a value.
    pub fn scan_prefix<'a>(&'a self, prefix: &'a [u8]) -> impl Iterator<Item = (&'a [u8], &'a [u8])> {
        self.entries
            .range(prefix.to_vec()..)
            .take_while(move |(k, _)| k.starts_with(prefix))
            .filter_map(|(k, (_, v))| v.as_deref().map(|v| (k.as_slice(), v)))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        wire::put_u64(&mut buf, self.next_lsn);
        let live: Vec<_> = self.entries.iter().collect();
        wire::put_u32(&mut buf, live.len() as u32);
        for (k, (scn, v)) in live {
            wire::put_bytes(&mut buf, k);
            wire::put_u64(&mut buf, scn.0);
            match v {
                Some(v) => {
                    buf.push(1);
                    wire::put_bytes(&mut buf, v);
                }
                None => buf.push(0),
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<KvView, WireError> {
        let mut r = Reader::new(bytes);
        let next_lsn = r.u64()?;
        let count = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let key = r.bytes()?.to_vec();
            let scn = Scn(r.u64()?);
            let value = match r.u8()? {
                1 => Some(r.bytes()?.to_vec()),
                0 => None,
                _ => return Err(WireError::Malformed("snapshot value flag")),
            };
            entries.insert(key, (scn, value));
        }
        Ok(KvView { entries, next_lsn })
    }

    pub fn tablet_meta(&self, tablet: TabletId) -> Option<TabletMeta> {
        let key = format!("meta/tablet/{tablet}");
        let raw = self.get(key.as_bytes())?;
        let (_, payload) = decode_meta_value(raw).ok()?;
        TabletMeta::decode(&payload).ok()
    }

    pub fn meta_file(&self, level: MetaLevel, id: u64) -> Option<MetaFile> {
        let key = format!("meta/{}/{id}", level.as_str());
        let raw = self.get(key.as_bytes())?;
        let (version, payload) = decode_meta_value(raw).ok()?;
        Some(MetaFile { level, id, version, payload })
    }

    pub fn sswriter_lease(&self, ls: LogStreamId) -> Option<SsWriterLease> {
        let raw = self.get(format!("sswriter/lease/{ls}").as_bytes())?;
        let (holder, expires_at_ms) = decode_lease(raw).ok()?;
        Some(SsWriterLease { log_stream_id: ls, holder, expires_at_ms })
    }

    /// Block version registry for version-based cache invalidation.
    pub fn block_version(&self, block: crate::types::MacroBlockId) -> u64 {
        self.get(format!("cachever/{block}").as_bytes())
            .and_then(|raw| raw.try_into().ok().map(u64::from_be_bytes))
            .unwrap_or(0)
    }

    pub fn table_dropped(&self, table_id: u64) -> bool {
        matches!(self.get(format!("table/state/{table_id}").as_bytes()), Some(b"dropped"))
    }
}

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("sswriter lease for stream {ls} not held by node {node}")]
    LeaseExpired { ls: LogStreamId, node: NodeId },
    #[error("sswriter lease for stream {ls} already held by node {holder}")]
    LeaseHeld { ls: LogStreamId, holder: NodeId },
    #[error("sslog truncated below {0}; bootstrap from a metadata snapshot")]
    Truncated(Lsn),
    #[error("table {0} drop deferred: referenced by active transactions")]
    BlockedByActiveTxn(u64),
    #[error("2pc operation {0} crashed before completion")]
    CrashInjected(u64),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone)]
pub struct MetaConfig {
    pub sswriter_lease_ms: u64,
    /// Write-back flush: pending tablet metadata is persisted to the object
    /// store after this many SSLog commits or this much time.
    pub tablet_flush_commits: u64,
    pub tablet_flush_interval_ms: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            sswriter_lease_ms: 10_000,
            tablet_flush_commits: 16,
            tablet_flush_interval_ms: 5_000,
        }
    }
}

/// Child/parent updates for metadata 2PC.
#[derive(Debug, Clone)]
pub struct MetaUpdate {
    pub level: MetaLevel,
    pub id: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableOp {
    SchemaChange,
    PartitionSplit,
    Drop,
}

impl TableOp {
    fn as_str(self) -> &'static str {
        match self {
            TableOp::SchemaChange => "schema_change",
            TableOp::PartitionSplit => "partition_split",
            TableOp::Drop => "drop",
        }
    }
}

pub struct MetaService {
    clock: Rc<Clock>,
    trace: Rc<Trace>,
    store: Rc<dyn ObjectStore>,
    log: Rc<LogService>,
    scn: Rc<ScnSource>,
    meta_stream: LogStreamId,
    config: MetaConfig,
    view: RefCell<KvView>,
    /// Tablet-level updates awaiting their asynchronous object-store persist.
    pending_persist: RefCell<Vec<MetaFile>>,
    commits_since_flush: Cell<u64>,
    last_flush_ms: Cell<u64>,
    next_op_id: Cell<u64>,
    table_refs: RefCell<BTreeMap<u64, BTreeSet<u64>>>,
    deferred_drops: RefCell<BTreeMap<u64, u64>>,
    appends_issued: Cell<u64>,
}

impl MetaService {
    pub fn new(
        clock: Rc<Clock>,
        trace: Rc<Trace>,
        store: Rc<dyn ObjectStore>,
        log: Rc<LogService>,
        scn: Rc<ScnSource>,
        meta_stream: LogStreamId,
        config: MetaConfig,
    ) -> Rc<MetaService> {
        log.create_stream(meta_stream);
        Rc::new(MetaService {
            clock,
            trace,
            store,
            log,
            scn,
            meta_stream,
            config,
            view: RefCell::new(KvView::new()),
            pending_persist: RefCell::new(Vec::new()),
            commits_since_flush: Cell::new(0),
            last_flush_ms: Cell::new(0),
            next_op_id: Cell::new(1),
            table_refs: RefCell::new(BTreeMap::new()),
            deferred_drops: RefCell::new(BTreeMap::new()),
            appends_issued: Cell::new(0),
        })
    }

    pub fn meta_stream(&self) -> LogStreamId {
        self.meta_stream
    }

    pub fn scn_source(&self) -> &Rc<ScnSource> {
        &self.scn
    }

    /// Log-service appends issued so far; tests assert on aggregation.
    pub fn appends_issued(&self) -> u64 {
        self.appends_issued.get()
    }

    pub fn clone_view(&self) -> KvView {
        self.view.borrow().clone()
    }

    pub fn with_view<R>(&self, f: impl FnOnce(&KvView) -> R) -> R {
        f(&self.view.borrow())
    }

    fn alloc_op_id(&self) -> u64 {
        let id = self.next_op_id.get();
        self.next_op_id.set(id + 1);
        id
    }

    /// Appends a batch of mutations as one SSLog entry, stamping each with
    /// a fresh SCN. No lease check: used for coordination records (lease
    /// grants, GC intents, reports) that are themselves the gate.
    pub fn sslog_write_unchecked(&self, mut records: Vec<SsLogRecord>) -> Result<Lsn, MetaError> {
        assert!(!records.is_empty());
        for rec in &mut records {
            rec.scn = self.scn.next();
        }
        let payload = encode_batch(&records);
        let leader = self.log.current_leader(self.meta_stream)?;
        let scn_hint = records.last().unwrap().scn;
        let (_, last) =
            self.log
                .append(self.meta_stream, leader, &[payload], LogKind::SsLog, scn_hint)?;
        self.appends_issued.set(self.appends_issued.get() + 1);
        let mut view = self.view.borrow_mut();
        for rec in &records {
            view.apply(rec);
        }
        view.next_lsn = last.0 + 1;
        drop(view);
        self.note_commit();
        Ok(last)
    }

    /// All shared tablet metadata modifications go through the SSWriter:
    /// the caller must hold the stream's unexpired lease.
    pub fn sslog_write(
        &self,
        node: NodeId,
        ls: LogStreamId,
        records: Vec<SsLogRecord>,
    ) -> Result<Lsn, MetaError> {
        if !self.verify_sswriter(ls, node) {
            return Err(MetaError::LeaseExpired { ls, node });
        }
        self.sslog_write_unchecked(records)
    }

    /// Returns committed records from `view.next_lsn` onward and replays
    /// them into the view.
    pub fn sslog_poll(&self, view: &mut KvView) -> Result<Vec<SsLogRecord>, MetaError> {
        let mut iter = match self.log.read_iter(self.meta_stream, Lsn(view.next_lsn)) {
            Ok(it) => it,
            Err(LogError::Truncated { requested, .. }) => {
                return Err(MetaError::Truncated(requested))
            }
            Err(e) => return Err(e.into()),
        };
        let mut out = Vec::new();
        loop {
            match iter.next_entry(&self.log) {
                Ok(Some(entry)) => {
                    let records = decode_batch(&entry.payload)?;
                    for rec in &records {
                        view.apply(rec);
                    }
                    view.next_lsn = entry.lsn.0 + 1;
                    out.extend(records);
                }
                Ok(None) => break,
                Err(LogError::Truncated { requested, .. }) => {
                    return Err(MetaError::Truncated(requested))
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(out)
    }

    /// Periodic full KV dump enabling `Truncated` recovery and new-node
    /// bring-up.
    pub fn write_snapshot(&self) -> Result<ObjectKey, MetaError> {
        let view = self.view.borrow();
        let key = ObjectKey::new(format!("meta/snapshot/{}", view.next_lsn)).expect("snapshot key");
        let bytes = view.encode();
        drop(view);
        self.store.put(&key, &bytes)?;
        self.trace
            .record(self.clock.now(), "meta", "meta_snapshot", key.as_str().to_string());
        Ok(key)
    }

    /// Bootstraps a fresh view from the newest snapshot, then replays the
    /// remaining log.
    pub fn bootstrap_view(&self) -> Result<KvView, MetaError> {
        let snaps = self.store.list("meta/snapshot/");
        let newest = snaps
            .iter()
            .filter_map(|k| k.as_str().rsplit('/').next()?.parse::<u64>().ok().map(|l| (l, k)))
            .max_by_key(|(l, _)| *l);
        let mut view = match newest {
            Some((_, key)) => KvView::decode(&self.store.get(key)?)?,
            None => KvView::new(),
        };
        self.sslog_poll(&mut view)?;
        Ok(view)
    }

    // ---- SSWriter leases ----

    pub fn verify_sswriter(&self, ls: LogStreamId, node: NodeId) -> bool {
        match self.view.borrow().sswriter_lease(ls) {
            Some(lease) => lease.holder == node && lease.expires_at_ms > self.clock.now(),
            None => false,
        }
    }

    pub fn sswriter_holder(&self, ls: LogStreamId) -> Option<NodeId> {
        let lease = self.view.borrow().sswriter_lease(ls)?;
        (lease.expires_at_ms > self.clock.now()).then_some(lease.holder)
    }

    pub fn acquire_sswriter(
        &self,
        ls: LogStreamId,
        node: NodeId,
        duration_ms: u64,
    ) -> Result<SsWriterLease, MetaError> {
        if let Some(lease) = self.view.borrow().sswriter_lease(ls) {
            if lease.holder != node && lease.expires_at_ms > self.clock.now() {
                return Err(MetaError::LeaseHeld { ls, holder: lease.holder });
            }
        }
        let expires_at_ms = self.clock.now() + duration_ms;
        let rec = SsLogRecord::put(
            format!("sswriter/lease/{ls}").into_bytes(),
            encode_lease(node, expires_at_ms),
        );
        self.sslog_write_unchecked(vec![rec])?;
        self.trace.record(
            self.clock.now(),
            "meta",
            "sswriter_grant",
            format!("ls={ls},node={node},expires={expires_at_ms}"),
        );
        Ok(SsWriterLease { log_stream_id: ls, holder: node, expires_at_ms })
    }

    pub fn renew_sswriter(&self, ls: LogStreamId, node: NodeId) -> Result<SsWriterLease, MetaError> {
        if !self.verify_sswriter(ls, node) {
            return Err(MetaError::LeaseExpired { ls, node });
        }
        self.acquire_sswriter(ls, node, self.config.sswriter_lease_ms)
    }

    /// Voluntary release, e.g. when handing the writer role to an
    /// offloaded compaction worker.
    pub fn release_sswriter(&self, ls: LogStreamId, node: NodeId) -> Result<(), MetaError> {
        if !self.verify_sswriter(ls, node) {
            return Ok(());
        }
        let rec = SsLogRecord::put(
            format!("sswriter/lease/{ls}").into_bytes(),
            encode_lease(node, self.clock.now()),
        );
        self.sslog_write_unchecked(vec![rec])?;
        Ok(())
    }

    pub fn default_lease_ms(&self) -> u64 {
        self.config.sswriter_lease_ms
    }

    // ---- Hierarchical metadata ----

    fn meta_object_key(level: MetaLevel, id: u64, version: u64) -> ObjectKey {
        ObjectKey::new(format!("meta/{}/{id}/{version}", level.as_str())).expect("meta key")
    }

    fn current_version(&self, level: MetaLevel, id: u64) -> u64 {
        self.view.borrow().meta_file(level, id).map(|f| f.version).unwrap_or(0)
    }

    /// Updates one metadata file. Log stream level and above persist to the
    /// object store synchronously before acknowledging (write-through);
    /// tablet level is recorded in SSLog immediately and persisted
    /// asynchronously (write-back).
    pub fn meta_update(
        &self,
        node: NodeId,
        ls: LogStreamId,
        level: MetaLevel,
        id: u64,
        payload: Vec<u8>,
    ) -> Result<u64, MetaError> {
        if level == MetaLevel::Tablet && !self.verify_sswriter(ls, node) {
            return Err(MetaError::LeaseExpired { ls, node });
        }
        let version = self.current_version(level, id) + 1;
        if level.write_through() {
            let key = Self::meta_object_key(level, id, version);
            self.store.put(&key, &payload)?;
        }
        let rec = SsLogRecord::put(
            format!("meta/{}/{id}", level.as_str()).into_bytes(),
            encode_meta_value(version, &payload),
        );
        self.sslog_write_unchecked(vec![rec])?;
        if !level.write_through() {
            self.pending_persist.borrow_mut().push(MetaFile { level, id, version, payload });
            self.maybe_flush();
        }
        Ok(version)
    }

    /// Convenience wrapper: tablet metadata is the common write-back case.
    pub fn update_tablet_meta(&self, node: NodeId, meta: &TabletMeta) -> Result<u64, MetaError> {
        self.meta_update(
            node,
            meta.log_stream_id,
            MetaLevel::Tablet,
            meta.tablet_id.0,
            meta.encode(),
        )
    }

    /// Tablet metadata update plus additional records (GC eligibility,
    /// task markers) in one aggregated SSLog commit, so the swap and its
    /// side records become visible atomically.
    pub fn update_tablet_meta_and(
        &self,
        node: NodeId,
        meta: &TabletMeta,
        extras: Vec<SsLogRecord>,
    ) -> Result<u64, MetaError> {
        let ls = meta.log_stream_id;
        if !self.verify_sswriter(ls, node) {
            return Err(MetaError::LeaseExpired { ls, node });
        }
        let payload = meta.encode();
        let version = self.current_version(MetaLevel::Tablet, meta.tablet_id.0) + 1;
        let mut records = vec![SsLogRecord::put(
            format!("meta/tablet/{}", meta.tablet_id).into_bytes(),
            encode_meta_value(version, &payload),
        )];
        records.extend(extras);
        self.sslog_write_unchecked(records)?;
        self.pending_persist.borrow_mut().push(MetaFile {
            level: MetaLevel::Tablet,
            id: meta.tablet_id.0,
            version,
            payload,
        });
        self.maybe_flush();
        Ok(version)
    }

    pub fn tablet_meta(&self, tablet: TabletId) -> Option<TabletMeta> {
        self.view.borrow().tablet_meta(tablet)
    }

    fn note_commit(&self) {
        self.commits_since_flush.set(self.commits_since_flush.get() + 1);
        if self.commits_since_flush.get() >= self.config.tablet_flush_commits {
            self.flush_pending();
        }
    }

    fn maybe_flush(&self) {
        if self.clock.now().saturating_sub(self.last_flush_ms.get())
            >= self.config.tablet_flush_interval_ms
        {
            self.flush_pending();
        }
    }

    /// Drives the write-back timer; the simulator calls this periodically.
    pub fn tick(&self) {
        self.maybe_flush();
    }

    /// Persists all pending tablet-level metadata files to the object store.
    pub fn flush_pending(&self) {
        let pending: Vec<MetaFile> = self.pending_persist.borrow_mut().drain(..).collect();
        for file in pending {
            let key = Self::meta_object_key(file.level, file.id, file.version);
            // Best effort: a crash before this put is recovered by SSLog
            // replay, which has already committed the update.
            let _ = self.store.put(&key, &file.payload);
        }
        self.commits_since_flush.set(0);
        self.last_flush_ms.set(self.clock.now());
    }

    pub fn pending_persist_len(&self) -> usize {
        self.pending_persist.borrow().len()
    }

    // ---- Metadata 2PC ----

    /// Two-phase metadata update: the prepare phase generates child
    /// metadata files in the object store; the commit phase publishes the
    /// children and the parent update as one atomic SSLog batch. Children
    /// are invisible until commit.
    ///
    /// `crash_after` aborts the operation after that many externally
    /// visible steps, for crash-point enumeration in tests.
    pub fn meta_2pc(
        &self,
        op_id: Option<u64>,
        prepare: &[MetaUpdate],
        commit: &MetaUpdate,
        crash_after: Option<u32>,
    ) -> Result<u64, MetaError> {
        let op_id = op_id.unwrap_or_else(|| self.alloc_op_id());
        self.next_op_id.set(self.next_op_id.get().max(op_id + 1));
        let view_has = |key: String| self.view.borrow().get(key.as_bytes()).is_some();
        if view_has(format!("2pc/commit/{op_id}")) {
            return Ok(op_id);
        }
        let mut steps = 0u32;
        let crash_check = |steps: &mut u32| -> Result<(), MetaError> {
            *steps += 1;
            if crash_after == Some(*steps) {
                Err(MetaError::CrashInjected(op_id))
            } else {
                Ok(())
            }
        };

        // Intent: records the full plan so recovery is deterministic.
        let mut plan = Vec::new();
        wire::put_u32(&mut plan, prepare.len() as u32);
        for child in prepare {
            plan.push(child.level.as_u8());
            wire::put_u64(&mut plan, child.id);
            let version = self.current_version(child.level, child.id) + 1;
            wire::put_u64(&mut plan, version);
        }
        self.sslog_write_unchecked(vec![SsLogRecord::put(
            format!("2pc/intent/{op_id}").into_bytes(),
            plan,
        )])?;
        crash_check(&mut steps)?;

        // Prepare: child files exist in the store but are unreachable.
        let mut child_records = Vec::new();
        for child in prepare {
            let version = self.current_version(child.level, child.id) + 1;
            let key = Self::meta_object_key(child.level, child.id, version);
            self.store.put(&key, &child.payload)?;
            crash_check(&mut steps)?;
            child_records.push(SsLogRecord::put(
                format!("meta/{}/{}", child.level.as_str(), child.id).into_bytes(),
                encode_meta_value(version, &child.payload),
            ));
        }

        // Commit: one atomic batch publishes children, parent, and marker.
        let parent_version = self.current_version(commit.level, commit.id) + 1;
        if commit.level.write_through() {
            let key = Self::meta_object_key(commit.level, commit.id, parent_version);
            self.store.put(&key, &commit.payload)?;
            crash_check(&mut steps)?;
        }
        child_records.push(SsLogRecord::put(
            format!("meta/{}/{}", commit.level.as_str(), commit.id).into_bytes(),
            encode_meta_value(parent_version, &commit.payload),
        ));
        child_records.push(SsLogRecord::put(format!("2pc/commit/{op_id}").into_bytes(), Vec::new()));
        self.sslog_write_unchecked(child_records)?;
        self.trace
            .record(self.clock.now(), "meta", "meta_2pc_commit", format!("op={op_id}"));
        Ok(op_id)
    }

    /// Resolves 2PC operations interrupted by a crash: any intent without a
    /// commit marker is aborted, and its prepared child files are handed to
    /// GC as eligible orphans.
    pub fn recover_2pc(&self) -> Result<Vec<u64>, MetaError> {
        let intents: Vec<(u64, Vec<u8>)> = self
            .view
            .borrow()
            .scan_prefix(b"2pc/intent/")
            .filter_map(|(k, v)| {
                let id: u64 = std::str::from_utf8(k).ok()?.rsplit('/').next()?.parse().ok()?;
                Some((id, v.to_vec()))
            })
            .collect();
        let mut aborted = Vec::new();
        for (op_id, plan) in intents {
            let has = |key: String| self.view.borrow().get(key.as_bytes()).is_some();
            if has(format!("2pc/commit/{op_id}")) || has(format!("2pc/abort/{op_id}")) {
                continue;
            }
            // Orphaned child objects become GC-eligible.
            let mut r = Reader::new(&plan);
            let count = r.u32()?;
            let mut orphan_keys = Vec::new();
            for _ in 0..count {
                let level = match r.u8()? {
                    0 => MetaLevel::Node,
                    1 => MetaLevel::Tenant,
                    2 => MetaLevel::LogStream,
                    _ => MetaLevel::Tablet,
                };
                let id = r.u64()?;
                let version = r.u64()?;
                orphan_keys.push(Self::meta_object_key(level, id, version).as_str().to_string());
            }
            let mut orphans = Vec::new();
            wire::put_u32(&mut orphans, orphan_keys.len() as u32);
            for k in &orphan_keys {
                wire::put_bytes(&mut orphans, k.as_bytes());
            }
            self.sslog_write_unchecked(vec![
                SsLogRecord::put(format!("2pc/abort/{op_id}").into_bytes(), orphans),
            ])?;
            self.trace
                .record(self.clock.now(), "meta", "meta_2pc_abort", format!("op={op_id}"));
            aborted.push(op_id);
        }
        Ok(aborted)
    }

    // ---- Table-level changes ----

    pub fn register_table_ref(&self, table_id: u64, txn_id: u64) {
        self.table_refs.borrow_mut().entry(table_id).or_default().insert(txn_id);
    }

    /// Drops a transaction's reference; deferred table drops whose last
    /// reader just finished are committed here.
    pub fn unregister_table_ref(&self, table_id: u64, txn_id: u64) -> Result<(), MetaError> {
        let now_free = {
            let mut refs = self.table_refs.borrow_mut();
            if let Some(set) = refs.get_mut(&table_id) {
                set.remove(&txn_id);
                set.is_empty()
            } else {
                true
            }
        };
        if now_free {
            let deferred = self.deferred_drops.borrow_mut().remove(&table_id);
            if let Some(op_id) = deferred {
                self.commit_table_change(TableOp::Drop, table_id, op_id)?;
            }
        }
        Ok(())
    }

    fn commit_table_change(&self, op: TableOp, table_id: u64, op_id: u64) -> Result<(), MetaError> {
        let state: &[u8] = match op {
            TableOp::Drop => b"dropped",
            TableOp::SchemaChange => b"schema_changed",
            TableOp::PartitionSplit => b"split",
        };
        self.sslog_write_unchecked(vec![
            SsLogRecord::put(format!("table/state/{table_id}").into_bytes(), state.to_vec()),
            SsLogRecord::put(format!("table/commit/{op_id}").into_bytes(), Vec::new()),
        ])?;
        self.trace.record(
            self.clock.now(),
            "meta",
            "table_change",
            format!("op={},table={table_id}", op.as_str()),
        );
        Ok(())
    }

    /// Intent-then-commit table change. A drop with open referencing
    /// transactions writes its intent and defers the commit until the last
    /// reader ends.
    pub fn table_change(&self, op: TableOp, table_id: u64) -> Result<(), MetaError> {
        let op_id = self.alloc_op_id();
        let intent = format!("{}:{}", op.as_str(), table_id);
        self.sslog_write_unchecked(vec![SsLogRecord::put(
            format!("table/intent/{op_id}").into_bytes(),
            intent.into_bytes(),
        )])?;
        if op == TableOp::Drop {
            let busy =
                self.table_refs.borrow().get(&table_id).map(|s| !s.is_empty()).unwrap_or(false);
            if busy {
                self.deferred_drops.borrow_mut().insert(table_id, op_id);
                return Err(MetaError::BlockedByActiveTxn(table_id));
            }
        }
        self.commit_table_change(op, table_id, op_id)
    }

    /// Resolves table changes whose intent committed but whose commit
    /// record is missing after a crash: deterministically rolls forward
    /// (the intent carries the full operation).
    pub fn recover_table_changes(&self) -> Result<(), MetaError> {
        let intents: Vec<(u64, String)> = self
            .view
            .borrow()
            .scan_prefix(b"table/intent/")
            .filter_map(|(k, v)| {
                let id: u64 = std::str::from_utf8(k).ok()?.rsplit('/').next()?.parse().ok()?;
                Some((id, String::from_utf8(v.to_vec()).ok()?))
            })
            .collect();
        for (op_id, intent) in intents {
            let committed =
                self.view.borrow().get(format!("table/commit/{op_id}").as_bytes()).is_some();
            if committed {
                continue;
            }
            let (op_str, table) = intent.split_once(':').unwrap_or(("", "0"));
            let table_id: u64 = table.parse().unwrap_or(0);
            let op = match op_str {
                "drop" => TableOp::Drop,
                "partition_split" => TableOp::PartitionSplit,
                _ => TableOp::SchemaChange,
            };
            let busy =
                self.table_refs.borrow().get(&table_id).map(|s| !s.is_empty()).unwrap_or(false);
            if op == TableOp::Drop && busy {
                self.deferred_drops.borrow_mut().insert(table_id, op_id);
                continue;
            }
            self.commit_table_change(op, table_id, op_id)?;
        }
        Ok(())
    }

    // ---- Cache version registry ----

    /// Records a block version bump; caches treat older entries as stale.
    pub fn bump_block_version(
        &self,
        block: crate::types::MacroBlockId,
        new_version: u64,
    ) -> Result<(), MetaError> {
        let current = self.view.borrow().block_version(block);
        if new_version <= current {
            return Ok(());
        }
        self.sslog_write_unchecked(vec![SsLogRecord::put(
            format!("cachever/{block}").into_bytes(),
            new_version.to_be_bytes().to_vec(),
        )])?;
        Ok(())
    }

    pub fn block_version(&self, block: crate::types::MacroBlockId) -> u64 {
        self.view.borrow().block_version(block)
    }
}

impl MetaLevel {
    fn as_u8(self) -> u8 {
        match self {
            MetaLevel::Node => 0,
            MetaLevel::Tenant => 1,
            MetaLevel::LogStream => 2,
            MetaLevel::Tablet => 3,
        }
    }
}
