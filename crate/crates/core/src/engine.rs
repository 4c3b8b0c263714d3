//! The tablet storage engine: MemTable writes, micro/mini dumping with
//! asynchronous completion (fast dump), increment upload through the
//! SSWriter lease, minor compaction with macro-block reuse, and the
//! multiversion read path through the cache tiers.
//!
//! Dumps are tasks with a completion time, not synchronous calls: a dump
//! holds its row snapshot until `tick` passes its completion time, and
//! the memory it frees is only released then. Foreground writes are
//! rejected (never blocked in place) when the memory budget is exhausted,
//! which is what the write-stall measurements observe.

use std::cell::RefCell;
use std::collections::{BTreeMap, VecDeque};
use std::rc::Rc;

use thiserror::Error;

use crate::cache::{CacheError, CacheNode};
use crate::clock::Clock;
use crate::meta::{KvView, MetaError, MetaService, SsLogRecord, SsTableRef, TabletMeta};
use crate::store::{ObjectKey, ObjectStore, StoreError};
use crate::trace::Trace;
use crate::types::{
    encode_macro_block, logical_checksum, sort_rows, BlockError, BlockMeta, LogStreamId,
    MacroBlockId, MicroBlock, NodeId, Row, Scn, SsTable, SsTableKind, TabletId,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("memtable full for tablet {0}; dump in progress")]
    MemTableFull(TabletId),
    #[error("unknown tablet {0}")]
    UnknownTablet(TabletId),
    #[error("compaction inputs not contiguous in scn")]
    NonContiguousInputs,
    #[error("compaction input not yet shared: {0}")]
    NotShared(String),
    #[error("checksum mismatch on tablet {tablet}: expected {expected:#010x}, got {actual:#010x}")]
    ChecksumMismatch { tablet: TabletId, expected: u32, actual: u32 },
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Wire(#[from] crate::wire::WireError),
    #[error(transparent)]
    Log(#[from] crate::log::LogError),
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Micro-block target size (scaled down for desk-scale tests).
    pub micro_block_bytes: usize,
    /// Macro-block target size.
    pub macro_block_bytes: usize,
    /// MemTable freeze threshold.
    pub freeze_threshold_bytes: usize,
    /// Fast dump: cut the MemTable early at this fill fraction.
    pub micro_compaction: bool,
    pub micro_trigger_fraction: f64,
    /// Total memory budget (active + frozen + in-flight dumps).
    pub memory_budget_bytes: usize,
    /// Dump cost model: fixed cost plus bytes over bandwidth.
    pub dump_base_ms: u64,
    pub dump_bandwidth_bytes_per_ms: u64,
    /// Concurrent micro dump tasks allowed (mini dumps serialize).
    pub max_inflight_dumps: usize,
    /// Merge policy triggers.
    pub minor_trigger_increments: usize,
    pub major_trigger_minis: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            micro_block_bytes: 4 * 1024,
            macro_block_bytes: 64 * 1024,
            freeze_threshold_bytes: 1024 * 1024,
            micro_compaction: true,
            micro_trigger_fraction: 0.5,
            memory_budget_bytes: 2 * 1024 * 1024,
            dump_base_ms: 20,
            dump_bandwidth_bytes_per_ms: 4096,
            max_inflight_dumps: 8,
            minor_trigger_increments: 4,
            major_trigger_minis: 8,
        }
    }
}

/// In-memory multiversion write buffer. Versions per key are newest-first.
#[derive(Debug, Default, Clone)]
pub struct MemTable {
    entries: BTreeMap<Vec<u8>, Vec<(Scn, Option<Vec<u8>>)>>,
    bytes: usize,
    min_scn: Scn,
    max_scn: Scn,
}

impl MemTable {
    fn insert(&mut self, row: Row) {
        let size = row.encoded_len();
        let value = if row.tombstone { None } else { Some(row.value) };
        let versions = self.entries.entry(row.key).or_default();
        let pos = versions.partition_point(|(scn, _)| *scn > row.commit_scn);
        // Idempotent at the same scn: recovery may re-apply a commit.
        if versions.get(pos).map(|(scn, _)| *scn == row.commit_scn).unwrap_or(false) {
            versions[pos] = (row.commit_scn, value);
            return;
        }
        versions.insert(pos, (row.commit_scn, value));
        self.bytes += size;
        if self.min_scn == Scn::UNSET || row.commit_scn < self.min_scn {
            self.min_scn = row.commit_scn;
        }
        self.max_scn = self.max_scn.max(row.commit_scn);
    }

    fn lookup(&self, key: &[u8], read_scn: Scn) -> Option<(Scn, Option<Vec<u8>>)> {
        let versions = self.entries.get(key)?;
        versions.iter().find(|(scn, _)| *scn <= read_scn).cloned()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }

    /// Removes all versions at or below `cut`, returning them as rows in
    /// canonical order.
    fn split_off_upto(&mut self, cut: Scn) -> Vec<Row> {
        let mut out = Vec::new();
        let mut bytes = 0usize;
        let mut min_scn = Scn::UNSET;
        self.entries.retain(|key, versions| {
            let mut kept = Vec::with_capacity(versions.len());
            for (scn, value) in versions.drain(..) {
                if scn <= cut {
                    out.push(Row {
                        key: key.clone(),
                        value: value.clone().unwrap_or_default(),
                        commit_scn: scn,
                        tombstone: value.is_none(),
                    });
                } else {
                    kept.push((scn, value));
                }
            }
            *versions = kept;
            for (scn, value) in versions.iter() {
                bytes += 4 + key.len() + 4 + value.as_ref().map(Vec::len).unwrap_or(0) + 8 + 1;
                if min_scn == Scn::UNSET || *scn < min_scn {
                    min_scn = *scn;
                }
            }
            !versions.is_empty()
        });
        self.bytes = bytes;
        self.min_scn = min_scn;
        sort_rows(&mut out);
        out
    }
}

/// A locally known SSTable: descriptor plus where its blocks live.
#[derive(Debug, Clone)]
pub struct TableHandle {
    pub table: SsTable,
    pub object_key: ObjectKey,
    /// Uploaded to the object store (false while it lives only in this
    /// node's write cache).
    pub shared: bool,
}

#[derive(Debug)]
struct DumpTask {
    kind: SsTableKind,
    rows: Vec<Row>,
    scn_range: (Scn, Scn),
    bytes: usize,
    done_at_ms: u64,
}

#[derive(Debug, Default)]
struct TabletState {
    log_stream_id: LogStreamId,
    active: MemTable,
    /// Frozen memtables awaiting their mini dump, oldest first.
    frozen: VecDeque<MemTable>,
    inflight: Vec<DumpTask>,
    major: Option<TableHandle>,
    /// Increment SSTables in ascending scn order.
    increments: Vec<TableHandle>,
    /// Local log checkpoint: all rows at or below are persisted locally.
    checkpoint_scn: Scn,
    mini_dumps_since_major: usize,
    stall_rejects: u64,
}

impl TabletState {
    fn memory_in_use(&self) -> usize {
        self.active.bytes
            + self.frozen.iter().map(|m| m.bytes).sum::<usize>()
            + self.inflight.iter().map(|t| t.bytes).sum::<usize>()
    }

    fn highest_persisted_scn(&self) -> Scn {
        let inc = self.increments.last().map(|h| h.table.end_scn()).unwrap_or(Scn::UNSET);
        let major = self.major.as_ref().map(|h| h.table.end_scn()).unwrap_or(Scn::UNSET);
        inc.max(major)
    }
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn block_object_key(tablet: TabletId, id: MacroBlockId) -> ObjectKey {
    ObjectKey::new(format!("block/{tablet}/{id}")).expect("block key")
}

pub fn sstable_object_key(tablet: TabletId, kind: SsTableKind, range: (Scn, Scn)) -> ObjectKey {
    ObjectKey::new(format!("data/{tablet}/{}/{}-{}", kind.as_str(), range.0, range.1))
        .expect("sstable key")
}

pub struct BuiltTable {
    pub table: SsTable,
    pub blocks: Vec<(MacroBlockId, Vec<u8>)>,
}

/// Packs canonical rows into micro blocks, then macro blocks. Block ids
/// are derived deterministically from the table identity and block
/// sequence so retries of the same compaction overwrite identical keys.
pub fn build_sstable(
    tablet: TabletId,
    kind: SsTableKind,
    scn_range: (Scn, Scn),
    rows: &[Row],
    micro_target: usize,
    macro_target: usize,
    name_salt: &str,
) -> Result<BuiltTable, EngineError> {
    let checksum = logical_checksum(rows);

    // Micro blocks close only at key boundaries so key ranges stay
    // disjoint even for heavily versioned keys.
    let mut micros: Vec<MicroBlock> = Vec::new();
    let mut current: Vec<Row> = Vec::new();
    let mut current_bytes = 0usize;
    for (i, row) in rows.iter().enumerate() {
        let key_boundary = i == 0 || rows[i - 1].key != row.key;
        if key_boundary && current_bytes >= micro_target && !current.is_empty() {
            micros.push(MicroBlock::from_rows(std::mem::take(&mut current))?);
            current_bytes = 0;
        }
        current_bytes += row.encoded_len();
        current.push(row.clone());
    }
    if !current.is_empty() {
        micros.push(MicroBlock::from_rows(current)?);
    }

    let mut blocks = Vec::new();
    let mut metas = Vec::new();
    let mut group: Vec<MicroBlock> = Vec::new();
    let mut group_bytes = 0usize;
    let mut seq = 0u32;
    let mut flush_group = |group: &mut Vec<MicroBlock>, seq: &mut u32| -> Result<(), EngineError> {
        if group.is_empty() {
            return Ok(());
        }
        let name = format!(
            "{tablet}/{}/{}-{}/{name_salt}{seq}",
            kind.as_str(),
            scn_range.0,
            scn_range.1
        );
        let id = MacroBlockId(fnv64(name.as_bytes()));
        let first_key = group.first().unwrap().key_range.0.clone();
        let last_key = group.last().unwrap().key_range.1.clone();
        let (_, bytes) = encode_macro_block(id, std::mem::take(group))?;
        metas.push(BlockMeta { id, first_key, last_key, size_bytes: bytes.len() as u64 });
        blocks.push((id, bytes));
        *seq += 1;
        Ok(())
    };
    for micro in micros {
        if group_bytes + micro.size_bytes > macro_target && !group.is_empty() {
            flush_group(&mut group, &mut seq)?;
            group_bytes = 0;
        }
        group_bytes += micro.size_bytes;
        group.push(micro);
    }
    flush_group(&mut group, &mut seq)?;

    Ok(BuiltTable {
        table: SsTable { kind, tablet_id: tablet, scn_range, blocks: metas, checksum },
        blocks,
    })
}

/// Multiversion union of several row sets: every (key, scn) version kept
/// once, in canonical order.
pub fn merge_multiversion(inputs: Vec<Vec<Row>>) -> Vec<Row> {
    let mut all: Vec<Row> = inputs.into_iter().flatten().collect();
    sort_rows(&mut all);
    all.dedup_by(|a, b| a.key == b.key && a.commit_scn == b.commit_scn);
    all
}

/// The newest version per key at `snapshot`, with tombstone winners
/// dropped: the baseline content of a major compaction.
pub fn snapshot_rows(rows: &[Row], snapshot: Scn) -> Vec<Row> {
    let mut out: Vec<Row> = Vec::new();
    let mut last_key: Option<&[u8]> = None;
    for row in rows {
        if row.commit_scn > snapshot {
            continue;
        }
        if last_key == Some(row.key.as_slice()) {
            continue;
        }
        last_key = Some(row.key.as_slice());
        if !row.tombstone {
            out.push(row.clone());
        }
    }
    out
}

pub struct Engine {
    node: NodeId,
    clock: Rc<Clock>,
    trace: Rc<Trace>,
    store: Rc<dyn ObjectStore>,
    cache: Rc<CacheNode>,
    meta: Rc<MetaService>,
    view: RefCell<KvView>,
    tablets: RefCell<BTreeMap<TabletId, TabletState>>,
    /// Block index micro-blocks promoted to memory: the first key of each
    /// micro block per macro block.
    index_cache: RefCell<BTreeMap<MacroBlockId, Vec<Vec<u8>>>>,
    config: EngineConfig,
}

impl Engine {
    pub fn new(
        node: NodeId,
        clock: Rc<Clock>,
        trace: Rc<Trace>,
        store: Rc<dyn ObjectStore>,
        cache: Rc<CacheNode>,
        meta: Rc<MetaService>,
        config: EngineConfig,
    ) -> Rc<Engine> {
        Rc::new(Engine {
            node,
            clock,
            trace,
            store,
            cache,
            meta,
            view: RefCell::new(KvView::new()),
            tablets: RefCell::new(BTreeMap::new()),
            index_cache: RefCell::new(BTreeMap::new()),
            config,
        })
    }

    pub fn node_id(&self) -> NodeId {
        self.node
    }

    pub fn cache(&self) -> &Rc<CacheNode> {
        &self.cache
    }

    pub fn meta_service(&self) -> &Rc<MetaService> {
        &self.meta
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn create_tablet(&self, tablet: TabletId, ls: LogStreamId) {
        self.tablets.borrow_mut().entry(tablet).or_insert_with(|| TabletState {
            log_stream_id: ls,
            ..TabletState::default()
        });
    }

    pub fn tablet_ids(&self) -> Vec<TabletId> {
        self.tablets.borrow().keys().copied().collect()
    }

    pub fn tablet_stream(&self, tablet: TabletId) -> Result<LogStreamId, EngineError> {
        Ok(self
            .tablets
            .borrow()
            .get(&tablet)
            .ok_or(EngineError::UnknownTablet(tablet))?
            .log_stream_id)
    }

    pub fn checkpoint_scn(&self, tablet: TabletId) -> Result<Scn, EngineError> {
        Ok(self
            .tablets
            .borrow()
            .get(&tablet)
            .ok_or(EngineError::UnknownTablet(tablet))?
            .checkpoint_scn)
    }

    pub fn stall_rejects(&self, tablet: TabletId) -> u64 {
        self.tablets.borrow().get(&tablet).map(|t| t.stall_rejects).unwrap_or(0)
    }

    pub fn memory_in_use(&self, tablet: TabletId) -> usize {
        self.tablets.borrow().get(&tablet).map(|t| t.memory_in_use()).unwrap_or(0)
    }

    // ---- Write path ----

    pub fn can_accept(&self, tablet: TabletId) -> bool {
        self.tablets
            .borrow()
            .get(&tablet)
            .map(|t| t.memory_in_use() < self.config.memory_budget_bytes)
            .unwrap_or(false)
    }

    /// Inserts one committed row. The caller guarantees the row's CLog
    /// entry is committed (the transaction layer enforces that ordering).
    pub fn write_row(&self, tablet: TabletId, row: Row) -> Result<(), EngineError> {
        {
            let mut tablets = self.tablets.borrow_mut();
            let state = tablets.get_mut(&tablet).ok_or(EngineError::UnknownTablet(tablet))?;
            if state.memory_in_use() >= self.config.memory_budget_bytes {
                state.stall_rejects += 1;
                drop(tablets);
                // A full memtable starts (or continues) draining.
                self.mini_compact(tablet)?;
                return Err(EngineError::MemTableFull(tablet));
            }
            state.active.insert(row);
        }
        self.maybe_trigger_dumps(tablet)?;
        Ok(())
    }

    fn maybe_trigger_dumps(&self, tablet: TabletId) -> Result<(), EngineError> {
        let (do_micro, do_freeze) = {
            let tablets = self.tablets.borrow();
            let state = tablets.get(&tablet).ok_or(EngineError::UnknownTablet(tablet))?;
            let fill = state.active.bytes as f64;
            let threshold = self.config.freeze_threshold_bytes as f64;
            let do_freeze = fill >= threshold;
            let do_micro = !do_freeze
                && self.config.micro_compaction
                && fill >= threshold * self.config.micro_trigger_fraction
                && state.inflight.len() < self.config.max_inflight_dumps;
            (do_micro, do_freeze)
        };
        if do_freeze {
            self.mini_compact(tablet)?;
        } else if do_micro {
            self.micro_compact(tablet, None)?;
        }
        Ok(())
    }

    fn dump_duration(&self, bytes: usize) -> u64 {
        let mut ms = self.config.dump_base_ms;
        if self.config.dump_bandwidth_bytes_per_ms > 0 {
            ms += bytes as u64 / self.config.dump_bandwidth_bytes_per_ms;
        }
        ms
    }

    /// Early partial dump: rows at or below `cut` (default: everything
    /// currently buffered) leave the memtable as a Micro SSTable without
    /// freezing it, advancing the log checkpoint ahead of the next freeze.
    pub fn micro_compact(
        &self,
        tablet: TabletId,
        cut: Option<Scn>,
    ) -> Result<Option<Scn>, EngineError> {
        let mut tablets = self.tablets.borrow_mut();
        let state = tablets.get_mut(&tablet).ok_or(EngineError::UnknownTablet(tablet))?;
        if state.active.is_empty() {
            return Ok(None);
        }
        let cut = cut.unwrap_or(state.active.max_scn);
        let rows = state.active.split_off_upto(cut);
        if rows.is_empty() {
            return Ok(None);
        }
        let bytes: usize = rows.iter().map(Row::encoded_len).sum();
        let start = rows.iter().map(|r| r.commit_scn).min().unwrap();
        let end = rows.iter().map(|r| r.commit_scn).max().unwrap();
        let done_at_ms = self.clock.now() + self.dump_duration(bytes);
        state.inflight.push(DumpTask {
            kind: SsTableKind::Micro,
            rows,
            scn_range: (start, end),
            bytes,
            done_at_ms,
        });
        Ok(Some(cut))
    }

    /// Freezes the active memtable and queues its mini dump. An empty
    /// freeze produces a metadata-only SSLog record and no data object.
    pub fn mini_compact(&self, tablet: TabletId) -> Result<(), EngineError> {
        let empty = {
            let mut tablets = self.tablets.borrow_mut();
            let state = tablets.get_mut(&tablet).ok_or(EngineError::UnknownTablet(tablet))?;
            if state.active.is_empty() {
                state.frozen.is_empty() && state.inflight.is_empty()
            } else {
                let frozen = std::mem::take(&mut state.active);
                state.frozen.push_back(frozen);
                false
            }
        };
        if empty {
            // Partitions with only metadata changes still checkpoint
            // through SSLog, when this node is the writer.
            let ls = self.tablet_stream(tablet)?;
            if self.meta.verify_sswriter(ls, self.node) {
                let cp = self.checkpoint_scn(tablet)?;
                self.meta.sslog_write(
                    self.node,
                    ls,
                    vec![SsLogRecord::put(
                        format!("dump/{tablet}/empty").into_bytes(),
                        cp.0.to_be_bytes().to_vec(),
                    )],
                )?;
            }
            return Ok(());
        }
        self.pump_mini_dump(tablet)
    }

    /// Starts the next queued mini dump if none is running (mini dumps
    /// serialize; micro dumps may overlap).
    fn pump_mini_dump(&self, tablet: TabletId) -> Result<(), EngineError> {
        let mut tablets = self.tablets.borrow_mut();
        let state = tablets.get_mut(&tablet).ok_or(EngineError::UnknownTablet(tablet))?;
        if state.inflight.iter().any(|t| t.kind == SsTableKind::Mini) {
            return Ok(());
        }
        let Some(mut frozen) = state.frozen.pop_front() else {
            return Ok(());
        };
        let max = frozen.max_scn;
        let rows = frozen.split_off_upto(max);
        let bytes: usize = rows.iter().map(Row::encoded_len).sum();
        let start = rows.iter().map(|r| r.commit_scn).min().unwrap();
        let end = rows.iter().map(|r| r.commit_scn).max().unwrap();
        let done_at_ms = self.clock.now() + self.dump_duration(bytes);
        state.inflight.push(DumpTask {
            kind: SsTableKind::Mini,
            rows,
            scn_range: (start, end),
            bytes,
            done_at_ms,
        });
        Ok(())
    }

    /// Completes dump tasks whose time has passed; called by the event
    /// loop and by anything that just advanced the clock.
    pub fn tick(&self, tablet: TabletId) -> Result<(), EngineError> {
        loop {
            let task = {
                let mut tablets = self.tablets.borrow_mut();
                let state = tablets.get_mut(&tablet).ok_or(EngineError::UnknownTablet(tablet))?;
                let now = self.clock.now();
                // Oldest completion first keeps scn ranges ordered.
                let mut ready: Vec<usize> = (0..state.inflight.len())
                    .filter(|&i| state.inflight[i].done_at_ms <= now)
                    .collect();
                ready.sort_by_key(|&i| state.inflight[i].scn_range.0);
                match ready.first() {
                    Some(&i) => state.inflight.remove(i),
                    None => break,
                }
            };
            self.complete_dump(tablet, task)?;
            self.pump_mini_dump(tablet)?;
        }
        Ok(())
    }

    /// Advances the clock past every pending dump and completes them all.
    pub fn flush_dumps(&self, tablet: TabletId) -> Result<(), EngineError> {
        loop {
            let next_done = {
                let tablets = self.tablets.borrow();
                let state = tablets.get(&tablet).ok_or(EngineError::UnknownTablet(tablet))?;
                if state.inflight.is_empty() && state.frozen.is_empty() {
                    break;
                }
                state.inflight.iter().map(|t| t.done_at_ms).min()
            };
            match next_done {
                Some(t) => {
                    self.clock.advance_to(t);
                    self.tick(tablet)?;
                }
                None => self.pump_mini_dump(tablet)?,
            }
        }
        Ok(())
    }

    fn complete_dump(&self, tablet: TabletId, task: DumpTask) -> Result<(), EngineError> {
        let built = build_sstable(
            tablet,
            task.kind,
            task.scn_range,
            &task.rows,
            self.config.micro_block_bytes,
            self.config.macro_block_bytes,
            "",
        )?;
        // Dumped blocks land in this node's write cache; a background
        // upload shares them later.
        for (id, bytes) in &built.blocks {
            self.index_cache.borrow_mut().insert(*id, index_first_keys(bytes));
            self.cache.pin_write(*id, bytes.clone());
        }
        let object_key = sstable_object_key(tablet, task.kind, task.scn_range);
        let mut tablets = self.tablets.borrow_mut();
        let state = tablets.get_mut(&tablet).ok_or(EngineError::UnknownTablet(tablet))?;
        state.increments.push(TableHandle { table: built.table, object_key, shared: false });
        state.increments.sort_by_key(|h| h.table.start_scn());
        state.checkpoint_scn = state.checkpoint_scn.max(task.scn_range.1);
        if task.kind == SsTableKind::Mini {
            state.mini_dumps_since_major += 1;
        }
        self.trace.record(
            self.clock.now(),
            &format!("engine/{}", self.node),
            "dump_complete",
            format!(
                "tablet={tablet},kind={},scns={}-{}",
                task.kind.as_str(),
                task.scn_range.0,
                task.scn_range.1
            ),
        );
        Ok(())
    }

    // ---- Sharing ----

    /// Uploads all locally cached (unshared) increments to the object
    /// store and publishes them in one aggregated SSLog metadata commit.
    /// Requires the SSWriter lease; retries are idempotent.
    pub fn upload_increments(&self, tablet: TabletId) -> Result<Vec<ObjectKey>, EngineError> {
        let ls = self.tablet_stream(tablet)?;
        if !self.meta.verify_sswriter(ls, self.node) {
            return Err(EngineError::Meta(MetaError::LeaseExpired { ls, node: self.node }));
        }
        let todo: Vec<TableHandle> = {
            let tablets = self.tablets.borrow();
            let state = tablets.get(&tablet).ok_or(EngineError::UnknownTablet(tablet))?;
            state.increments.iter().filter(|h| !h.shared).cloned().collect()
        };
        if todo.is_empty() {
            return Ok(Vec::new());
        }
        let mut uploaded = Vec::new();
        for handle in &todo {
            for meta in &handle.table.blocks {
                let bytes = self
                    .cache
                    .write_cached(meta.id)
                    .ok_or_else(|| EngineError::NotShared(format!("missing block {}", meta.id)))?;
                self.store.put(&block_object_key(tablet, meta.id), &bytes)?;
            }
            self.store.put(&handle.object_key, &handle.table.encode())?;
            uploaded.push(handle.object_key.clone());
        }

        // One aggregated metadata commit for the whole batch.
        let mut tm = self.meta.tablet_meta(tablet).unwrap_or_else(|| TabletMeta {
            tablet_id: tablet,
            log_stream_id: ls,
            ..TabletMeta::default()
        });
        let mut changed = false;
        for handle in &todo {
            let key = handle.object_key.as_str().to_string();
            if !tm.sstables.iter().any(|r| r.object_key == key) {
                tm.sstables.push(SsTableRef {
                    kind: handle.table.kind,
                    scn_range: handle.table.scn_range,
                    object_key: key,
                    checksum: handle.table.checksum,
                });
                changed = true;
            }
            if handle.table.end_scn() > tm.checkpoint_scn {
                tm.checkpoint_scn = handle.table.end_scn();
                changed = true;
            }
        }
        if changed {
            tm.sstables.sort_by_key(|r| (r.kind != SsTableKind::Major, r.scn_range.0));
            self.meta.update_tablet_meta(self.node, &tm)?;
        }

        // Mark shared locally and fold pinned blocks into the read tier.
        {
            let mut tablets = self.tablets.borrow_mut();
            let state = tablets.get_mut(&tablet).expect("tablet exists");
            for handle in &todo {
                if let Some(h) =
                    state.increments.iter_mut().find(|h| h.object_key == handle.object_key)
                {
                    h.shared = true;
                }
            }
        }
        for handle in &todo {
            for meta in &handle.table.blocks {
                self.cache.unpin_to_local(meta.id, 0);
            }
        }
        self.trace.record(
            self.clock.now(),
            &format!("engine/{}", self.node),
            "increments_uploaded",
            format!("tablet={tablet},count={}", todo.len()),
        );
        Ok(uploaded)
    }

    // ---- Read path ----

    fn block_first_keys(
        &self,
        handle: &TableHandle,
        meta: &BlockMeta,
    ) -> Result<Vec<Vec<u8>>, EngineError> {
        if let Some(keys) = self.index_cache.borrow().get(&meta.id) {
            return Ok(keys.clone());
        }
        let bytes = self.fetch_macro_bytes(handle, meta)?;
        let keys = index_first_keys(&bytes);
        self.index_cache.borrow_mut().insert(meta.id, keys.clone());
        Ok(keys)
    }

    fn fetch_macro_bytes(
        &self,
        handle: &TableHandle,
        meta: &BlockMeta,
    ) -> Result<Vec<u8>, EngineError> {
        if !handle.shared {
            return self
                .cache
                .write_cached(meta.id)
                .ok_or_else(|| EngineError::NotShared(format!("missing block {}", meta.id)));
        }
        let key = block_object_key(handle.table.tablet_id, meta.id);
        let version = self.view.borrow().block_version(meta.id);
        let (bytes, _) = self.cache.get_macro_block(meta.id, &key, version)?;
        Ok(bytes)
    }

    fn fetch_micro(
        &self,
        handle: &TableHandle,
        meta: &BlockMeta,
        idx: u32,
    ) -> Result<MicroBlock, EngineError> {
        let bytes = if !handle.shared {
            let macro_bytes = self
                .cache
                .write_cached(meta.id)
                .ok_or_else(|| EngineError::NotShared(format!("missing block {}", meta.id)))?;
            crate::types::micro_block_slice(&macro_bytes, idx)?.to_vec()
        } else {
            let key = block_object_key(handle.table.tablet_id, meta.id);
            let version = self.view.borrow().block_version(meta.id);
            let (bytes, _) = self.cache.get_micro_block(meta.id, &key, idx, version)?;
            bytes
        };
        Ok(MicroBlock::decode(&bytes)?)
    }

    /// Newest version of `key` in this table at or below `read_scn`.
    fn table_lookup(
        &self,
        handle: &TableHandle,
        key: &[u8],
        read_scn: Scn,
    ) -> Result<Option<(Scn, Option<Vec<u8>>)>, EngineError> {
        let blocks = &handle.table.blocks;
        let idx = blocks.partition_point(|b| b.last_key.as_slice() < key);
        let Some(meta) = blocks.get(idx) else {
            return Ok(None);
        };
        if meta.first_key.as_slice() > key {
            return Ok(None);
        }
        let first_keys = self.block_first_keys(handle, meta)?;
        if first_keys.is_empty() {
            return Ok(None);
        }
        let micro_idx = first_keys.partition_point(|fk| fk.as_slice() <= key).saturating_sub(1);
        let micro = self.fetch_micro(handle, meta, micro_idx as u32)?;
        for row in &micro.rows {
            if row.key.as_slice() == key && row.commit_scn <= read_scn {
                let value = if row.tombstone { None } else { Some(row.value.clone()) };
                return Ok(Some((row.commit_scn, value)));
            }
        }
        Ok(None)
    }

    /// Point read at a snapshot: the newest version with commit scn at or
    /// below `read_scn` wins, searching the memtables, then increments
    /// newest-first, then the baseline.
    pub fn read(
        &self,
        tablet: TabletId,
        key: &[u8],
        read_scn: Scn,
    ) -> Result<Option<Vec<u8>>, EngineError> {
        let (mem_hit, handles) = {
            let tablets = self.tablets.borrow();
            let state = tablets.get(&tablet).ok_or(EngineError::UnknownTablet(tablet))?;

            let mut best: Option<(Scn, Option<Vec<u8>>)> = None;
            let mut consider = |cand: Option<(Scn, Option<Vec<u8>>)>| {
                if let Some((scn, value)) = cand {
                    if best.as_ref().map(|(b, _)| scn > *b).unwrap_or(true) {
                        best = Some((scn, value));
                    }
                }
            };
            consider(state.active.lookup(key, read_scn));
            for frozen in state.frozen.iter() {
                consider(frozen.lookup(key, read_scn));
            }
            for task in &state.inflight {
                let cand = task
                    .rows
                    .iter()
                    .find(|r| r.key.as_slice() == key && r.commit_scn <= read_scn)
                    .map(|r| (r.commit_scn, if r.tombstone { None } else { Some(r.value.clone()) }));
                consider(cand);
            }
            let handles: Vec<TableHandle> = state
                .increments
                .iter()
                .rev()
                .chain(state.major.iter())
                .cloned()
                .collect();
            (best, handles)
        };

        let mem_floor = mem_hit.as_ref().map(|(scn, _)| *scn);
        for handle in &handles {
            if handle.table.start_scn() > read_scn {
                continue;
            }
            // Anything the memtables answered is newer than every table
            // whose range ends at or below it.
            if let Some(floor) = mem_floor {
                if handle.table.end_scn() <= floor {
                    break;
                }
            }
            if let Some((scn, value)) = self.table_lookup(handle, key, read_scn)? {
                let newer_than_mem = mem_floor.map(|f| scn > f).unwrap_or(true);
                if newer_than_mem {
                    return Ok(value);
                }
                break;
            }
        }
        Ok(mem_hit.and_then(|(_, v)| v))
    }

    /// Commit scn of the newest version of `key`, regardless of snapshot:
    /// the first-committer-wins conflict check reads this.
    pub fn latest_version_scn(
        &self,
        tablet: TabletId,
        key: &[u8],
    ) -> Result<Option<Scn>, EngineError> {
        let max = Scn(u64::MAX);
        let (mem_hit, handles) = {
            let tablets = self.tablets.borrow();
            let state = tablets.get(&tablet).ok_or(EngineError::UnknownTablet(tablet))?;
            let mut best: Option<Scn> = None;
            let mut consider = |cand: Option<(Scn, Option<Vec<u8>>)>| {
                if let Some((scn, _)) = cand {
                    if best.map(|b| scn > b).unwrap_or(true) {
                        best = Some(scn);
                    }
                }
            };
            consider(state.active.lookup(key, max));
            for frozen in state.frozen.iter() {
                consider(frozen.lookup(key, max));
            }
            for task in &state.inflight {
                let cand = task
                    .rows
                    .iter()
                    .find(|r| r.key.as_slice() == key)
                    .map(|r| (r.commit_scn, None));
                consider(cand);
            }
            let handles: Vec<TableHandle> = state
                .increments
                .iter()
                .rev()
                .chain(state.major.iter())
                .cloned()
                .collect();
            (best, handles)
        };
        if mem_hit.is_some() {
            return Ok(mem_hit);
        }
        for handle in &handles {
            if let Some((scn, _)) = self.table_lookup(handle, key, max)? {
                return Ok(Some(scn));
            }
        }
        Ok(None)
    }

    /// Range scan at a snapshot: live rows with `lo <= key < hi` in key
    /// order, newest version per key.
    pub fn scan(
        &self,
        tablet: TabletId,
        lo: &[u8],
        hi: &[u8],
        read_scn: Scn,
    ) -> Result<Vec<(Vec<u8>, Vec<u8>)>, EngineError> {
        let mut best: BTreeMap<Vec<u8>, (Scn, Option<Vec<u8>>)> = BTreeMap::new();
        fn consider(
            best: &mut BTreeMap<Vec<u8>, (Scn, Option<Vec<u8>>)>,
            read_scn: Scn,
            key: &[u8],
            scn: Scn,
            value: Option<Vec<u8>>,
        ) {
            if scn > read_scn {
                return;
            }
            match best.get(key) {
                Some((existing, _)) if *existing >= scn => {}
                _ => {
                    best.insert(key.to_vec(), (scn, value));
                }
            }
        }

        let handles: Vec<TableHandle> = {
            let tablets = self.tablets.borrow();
            let state = tablets.get(&tablet).ok_or(EngineError::UnknownTablet(tablet))?;
            for (key, versions) in state.active.entries.range(lo.to_vec()..hi.to_vec()) {
                for (scn, value) in versions {
                    consider(&mut best, read_scn, key, *scn, value.clone());
                }
            }
            for frozen in state.frozen.iter() {
                for (key, versions) in frozen.entries.range(lo.to_vec()..hi.to_vec()) {
                    for (scn, value) in versions {
                        consider(&mut best, read_scn, key, *scn, value.clone());
                    }
                }
            }
            for task in &state.inflight {
                for row in &task.rows {
                    if row.key.as_slice() >= lo && row.key.as_slice() < hi {
                        consider(
                            &mut best,
                            read_scn,
                            &row.key,
                            row.commit_scn,
                            if row.tombstone { None } else { Some(row.value.clone()) },
                        );
                    }
                }
            }
            state.increments.iter().chain(state.major.iter()).cloned().collect()
        };

        for handle in &handles {
            if handle.table.start_scn() > read_scn {
                continue;
            }
            for meta in &handle.table.blocks {
                if meta.last_key.as_slice() < lo || meta.first_key.as_slice() >= hi {
                    continue;
                }
                let first_keys = self.block_first_keys(handle, meta)?;
                for idx in 0..first_keys.len() {
                    let micro = self.fetch_micro(handle, meta, idx as u32)?;
                    if micro.key_range.1.as_slice() < lo || micro.key_range.0.as_slice() >= hi {
                        continue;
                    }
                    for row in &micro.rows {
                        if row.key.as_slice() >= lo && row.key.as_slice() < hi {
                            consider(
                                &mut best,
                                read_scn,
                                &row.key,
                                row.commit_scn,
                                if row.tombstone { None } else { Some(row.value.clone()) },
                            );
                        }
                    }
                }
            }
        }

        Ok(best.into_iter().filter_map(|(k, (_, v))| v.map(|v| (k, v))).collect())
    }

    /// Logical checksum of the live read state at `scn`: the quantity
    /// compaction must preserve across a merge snapshot.
    pub fn read_state_checksum(&self, tablet: TabletId, scn: Scn) -> Result<u32, EngineError> {
        let rows = self.scan(tablet, &[], &[0xFFu8; 24], scn)?;
        let as_rows: Vec<Row> = rows.into_iter().map(|(k, v)| Row::put(k, v, Scn::UNSET)).collect();
        Ok(logical_checksum(&as_rows))
    }

    /// The replica checksum for compaction verification: the baseline's
    /// logical content decoded through this node's cache tiers, so a
    /// corrupted cached copy surfaces as a mismatch rather than being
    /// silently served.
    pub fn baseline_checksum_via_cache(&self, tablet: TabletId) -> Result<u32, EngineError> {
        let Some(major) = self.major_handle(tablet) else {
            return Ok(logical_checksum([]));
        };
        let mut rows: Vec<Row> = Vec::new();
        for meta in &major.table.blocks {
            let bytes = self.fetch_macro_bytes(&major, meta)?;
            let decoded = crate::types::decode_macro_block(meta.id, &bytes)?;
            for micro in decoded.micro_blocks {
                rows.extend(micro.rows);
            }
        }
        sort_rows(&mut rows);
        Ok(logical_checksum(&rows))
    }

    // ---- Minor compaction ----

    /// Merges contiguous shared increments into one Minor SSTable,
    /// reusing any macro block whose key range overlaps no other input's.
    /// Returns the new handle and the object keys made obsolete.
    pub fn minor_compact(
        &self,
        tablet: TabletId,
        input_keys: &[ObjectKey],
    ) -> Result<(TableHandle, Vec<ObjectKey>), EngineError> {
        let ls = self.tablet_stream(tablet)?;
        if !self.meta.verify_sswriter(ls, self.node) {
            return Err(EngineError::Meta(MetaError::LeaseExpired { ls, node: self.node }));
        }
        let inputs: Vec<TableHandle> = {
            let tablets = self.tablets.borrow();
            let state = tablets.get(&tablet).ok_or(EngineError::UnknownTablet(tablet))?;
            input_keys
                .iter()
                .map(|k| {
                    state
                        .increments
                        .iter()
                        .find(|h| &h.object_key == k)
                        .cloned()
                        .ok_or_else(|| EngineError::NotShared(k.as_str().to_string()))
                })
                .collect::<Result<_, _>>()?
        };
        for h in &inputs {
            if !h.shared {
                return Err(EngineError::NotShared(h.object_key.as_str().to_string()));
            }
        }
        let mut sorted = inputs;
        sorted.sort_by_key(|h| h.table.start_scn());
        // Inputs must form a gap-free run of the shared increment list.
        {
            let tablets = self.tablets.borrow();
            let state = tablets.get(&tablet).expect("tablet exists");
            let shared: Vec<&TableHandle> = state.increments.iter().filter(|h| h.shared).collect();
            let positions: Vec<usize> = sorted
                .iter()
                .map(|h| {
                    shared
                        .iter()
                        .position(|s| s.object_key == h.object_key)
                        .unwrap_or(usize::MAX)
                })
                .collect();
            if positions.windows(2).any(|w| w[1] != w[0].wrapping_add(1)) {
                return Err(EngineError::NonContiguousInputs);
            }
        }

        let scn_range =
            (sorted.first().unwrap().table.start_scn(), sorted.last().unwrap().table.end_scn());
        let merged = self.merge_with_reuse(tablet, &sorted, SsTableKind::Minor, scn_range, None)?;
        let obsolete = self.publish_compaction(tablet, ls, &sorted, &merged)?;
        Ok((merged, obsolete))
    }

    /// Shared merge machinery for minor and major compaction. Singleton
    /// key-range clusters pass through by reference (same macro block id,
    /// no rewrite); overlapping clusters are decoded, merged, and rebuilt.
    /// For a snapshot merge (major compaction) only baseline blocks are
    /// reusable, and rewritten rows are pruned to the newest version per
    /// key with tombstones dropped.
    fn merge_with_reuse(
        &self,
        tablet: TabletId,
        inputs: &[TableHandle],
        kind: SsTableKind,
        scn_range: (Scn, Scn),
        snapshot: Option<Scn>,
    ) -> Result<TableHandle, EngineError> {
        struct InputBlock {
            input_idx: usize,
            meta: BlockMeta,
            reusable: bool,
        }
        let mut blocks: Vec<InputBlock> = Vec::new();
        for (i, handle) in inputs.iter().enumerate() {
            let baseline = handle.table.kind == SsTableKind::Major;
            for meta in &handle.table.blocks {
                blocks.push(InputBlock {
                    input_idx: i,
                    meta: meta.clone(),
                    // Under a snapshot merge, multiversion increment blocks
                    // always need pruning; only baseline blocks can pass
                    // through untouched.
                    reusable: snapshot.is_none() || baseline,
                });
            }
        }
        blocks.sort_by(|a, b| a.meta.first_key.cmp(&b.meta.first_key));

        // Cluster by actual key-range overlap.
        let mut clusters: Vec<Vec<InputBlock>> = Vec::new();
        let mut current: Vec<InputBlock> = Vec::new();
        let mut current_max: Vec<u8> = Vec::new();
        for block in blocks {
            if current.is_empty() || block.meta.first_key <= current_max {
                if block.meta.last_key > current_max {
                    current_max = block.meta.last_key.clone();
                }
                current.push(block);
            } else {
                clusters.push(std::mem::take(&mut current));
                current_max = block.meta.last_key.clone();
                current.push(block);
            }
        }
        if !current.is_empty() {
            clusters.push(current);
        }

        // Output identity derives from the input lineage: a re-dispatched
        // task over the same inputs rewrites identical keys, while a later
        // merge at the same scn range with different inputs gets fresh
        // block ids (stale cached copies can never alias new content).
        let lineage = {
            let mut buf = Vec::new();
            for handle in inputs {
                buf.extend_from_slice(handle.object_key.as_str().as_bytes());
                buf.extend_from_slice(&handle.table.checksum.to_be_bytes());
            }
            buf.push(kind.as_u8());
            fnv64(&buf)
        };

        let mut out_metas: Vec<BlockMeta> = Vec::new();
        let mut new_blocks: Vec<(MacroBlockId, Vec<u8>)> = Vec::new();
        let mut all_rows: Vec<Row> = Vec::new();
        let mut cluster_seq = 0u32;
        for cluster in clusters {
            let reuse = cluster.len() == 1 && cluster[0].reusable;
            if reuse {
                let block = &cluster[0];
                out_metas.push(block.meta.clone());
                // Reused content still counts toward the logical checksum.
                let handle = &inputs[block.input_idx];
                let bytes = self.fetch_macro_bytes(handle, &block.meta)?;
                let decoded = crate::types::decode_macro_block(block.meta.id, &bytes)?;
                for micro in decoded.micro_blocks {
                    all_rows.extend(micro.rows);
                }
                continue;
            }
            let mut cluster_rows: Vec<Vec<Row>> = Vec::new();
            for block in &cluster {
                let handle = &inputs[block.input_idx];
                let bytes = self.fetch_macro_bytes(handle, &block.meta)?;
                let decoded = crate::types::decode_macro_block(block.meta.id, &bytes)?;
                let mut rows = Vec::new();
                for micro in decoded.micro_blocks {
                    rows.extend(micro.rows);
                }
                cluster_rows.push(rows);
            }
            let mut merged = merge_multiversion(cluster_rows);
            if let Some(snap) = snapshot {
                merged = snapshot_rows(&merged, snap);
            }
            if merged.is_empty() {
                cluster_seq += 1;
                continue;
            }
            let built = build_sstable(
                tablet,
                kind,
                scn_range,
                &merged,
                self.config.micro_block_bytes,
                self.config.macro_block_bytes,
                &format!("{lineage:016x}-c{cluster_seq}-"),
            )?;
            cluster_seq += 1;
            for (meta, (id, bytes)) in built.table.blocks.iter().zip(built.blocks) {
                out_metas.push(meta.clone());
                new_blocks.push((id, bytes));
            }
            all_rows.extend(merged);
        }
        out_metas.sort_by(|a, b| a.first_key.cmp(&b.first_key));
        sort_rows(&mut all_rows);
        all_rows.dedup_by(|a, b| a.key == b.key && a.commit_scn == b.commit_scn);
        if let Some(snap) = snapshot {
            all_rows = snapshot_rows(&all_rows, snap);
        }

        for (id, bytes) in &new_blocks {
            self.store.put(&block_object_key(tablet, *id), bytes)?;
            self.index_cache.borrow_mut().insert(*id, index_first_keys(bytes));
        }
        let checksum = logical_checksum(&all_rows);
        let table = SsTable { kind, tablet_id: tablet, scn_range, blocks: out_metas, checksum };
        let object_key = sstable_object_key(tablet, kind, scn_range);
        self.store.put(&object_key, &table.encode())?;
        Ok(TableHandle { table, object_key, shared: true })
    }

    /// Swaps compaction inputs for the output in the shared tablet meta
    /// and records the obsolete objects as GC-eligible, in one aggregated
    /// SSLog commit. Returns the obsolete object keys.
    fn publish_compaction(
        &self,
        tablet: TabletId,
        ls: LogStreamId,
        inputs: &[TableHandle],
        output: &TableHandle,
    ) -> Result<Vec<ObjectKey>, EngineError> {
        let reused: std::collections::BTreeSet<MacroBlockId> =
            output.table.blocks.iter().map(|b| b.id).collect();
        let mut obsolete = Vec::new();
        for input in inputs {
            obsolete.push(input.object_key.clone());
            for meta in &input.table.blocks {
                if !reused.contains(&meta.id) {
                    obsolete.push(block_object_key(tablet, meta.id));
                }
            }
        }
        obsolete.retain(|k| k != &output.object_key);

        let mut tm = self.meta.tablet_meta(tablet).unwrap_or_else(|| TabletMeta {
            tablet_id: tablet,
            log_stream_id: ls,
            ..TabletMeta::default()
        });
        let input_keys: Vec<String> =
            inputs.iter().map(|h| h.object_key.as_str().to_string()).collect();
        tm.sstables.retain(|r| !input_keys.contains(&r.object_key));
        tm.sstables.retain(|r| r.object_key != output.object_key.as_str());
        tm.sstables.push(SsTableRef {
            kind: output.table.kind,
            scn_range: output.table.scn_range,
            object_key: output.object_key.as_str().to_string(),
            checksum: output.table.checksum,
        });
        tm.sstables.sort_by_key(|r| (r.kind != SsTableKind::Major, r.scn_range.0));
        tm.checkpoint_scn = tm.checkpoint_scn.max(output.table.end_scn());

        let gc_record = {
            let mut buf = Vec::new();
            crate::wire::put_u32(&mut buf, obsolete.len() as u32);
            for key in &obsolete {
                crate::wire::put_bytes(&mut buf, key.as_str().as_bytes());
            }
            crate::wire::put_u64(&mut buf, output.table.end_scn().0);
            SsLogRecord::put(
                format!("gc/eligible/{tablet}/{}", output.object_key).into_bytes(),
                buf,
            )
        };
        self.meta.update_tablet_meta_and(self.node, &tm, vec![gc_record])?;

        self.apply_table_swap(tablet, &input_keys, output.clone());
        self.trace.record(
            self.clock.now(),
            &format!("engine/{}", self.node),
            "compaction_publish",
            format!(
                "tablet={tablet},kind={},out={}",
                output.table.kind.as_str(),
                output.object_key
            ),
        );
        Ok(obsolete)
    }

    fn apply_table_swap(&self, tablet: TabletId, removed_keys: &[String], output: TableHandle) {
        let mut tablets = self.tablets.borrow_mut();
        let Some(state) = tablets.get_mut(&tablet) else { return };
        state.increments.retain(|h| !removed_keys.contains(&h.object_key.as_str().to_string()));
        if let Some(major) = &state.major {
            if removed_keys.contains(&major.object_key.as_str().to_string()) {
                state.major = None;
            }
        }
        match output.table.kind {
            SsTableKind::Major => {
                state.major = Some(output);
                state.mini_dumps_since_major = 0;
            }
            _ => {
                state.increments.retain(|h| h.object_key != output.object_key);
                state.increments.push(output);
                state.increments.sort_by_key(|h| h.table.start_scn());
            }
        }
    }

    /// Shared increments eligible as minor-compaction inputs, oldest first.
    pub fn shared_increment_keys(&self, tablet: TabletId) -> Vec<ObjectKey> {
        self.tablets
            .borrow()
            .get(&tablet)
            .map(|s| s.increments.iter().filter(|h| h.shared).map(|h| h.object_key.clone()).collect())
            .unwrap_or_default()
    }

    pub fn increment_count(&self, tablet: TabletId) -> usize {
        self.tablets.borrow().get(&tablet).map(|s| s.increments.len()).unwrap_or(0)
    }

    pub fn mini_dumps_since_major(&self, tablet: TabletId) -> usize {
        self.tablets.borrow().get(&tablet).map(|s| s.mini_dumps_since_major).unwrap_or(0)
    }

    pub fn major_handle(&self, tablet: TabletId) -> Option<TableHandle> {
        self.tablets.borrow().get(&tablet).and_then(|s| s.major.clone())
    }

    pub fn increment_handles(&self, tablet: TabletId) -> Vec<TableHandle> {
        self.tablets.borrow().get(&tablet).map(|s| s.increments.clone()).unwrap_or_default()
    }

    /// The object-store half of a major compaction (phase 3): baseline
    /// plus all shared increments fully at or below `merge_scn` are merged
    /// into a new baseline covering [0, merge_scn] and written to shared
    /// storage, without touching the metadata. Returns the output handle
    /// and the consumed inputs. Deterministic object keys make a crashed
    /// worker's re-run overwrite identical bytes.
    pub fn merge_to_major_unpublished(
        &self,
        tablet: TabletId,
        merge_scn: Scn,
    ) -> Result<(TableHandle, Vec<TableHandle>), EngineError> {
        let ls = self.tablet_stream(tablet)?;
        if !self.meta.verify_sswriter(ls, self.node) {
            return Err(EngineError::Meta(MetaError::LeaseExpired { ls, node: self.node }));
        }
        // The baseline may only claim scns whose rows are actually in
        // shared storage; clamp the snapshot to the shared watermark so a
        // replica trimming at the published checkpoint never loses rows.
        let (inputs, old_major, merge_scn) = {
            let tablets = self.tablets.borrow();
            let state = tablets.get(&tablet).ok_or(EngineError::UnknownTablet(tablet))?;
            let watermark = state
                .increments
                .iter()
                .filter(|h| h.shared)
                .map(|h| h.table.end_scn())
                .chain(state.major.as_ref().map(|h| h.table.end_scn()))
                .max()
                .unwrap_or(Scn::UNSET);
            let effective = merge_scn.min(watermark);
            let inc: Vec<TableHandle> = state
                .increments
                .iter()
                .filter(|h| h.shared && h.table.end_scn() <= effective)
                .cloned()
                .collect();
            (inc, state.major.clone(), effective)
        };
        if inputs.is_empty() {
            if let Some(major) = old_major {
                // Identity merge: metadata bump only, checksum unchanged.
                let mut refreshed = major.clone();
                refreshed.table.scn_range = (Scn(0), merge_scn.max(major.table.end_scn()));
                let object_key =
                    sstable_object_key(tablet, SsTableKind::Major, refreshed.table.scn_range);
                refreshed.object_key = object_key.clone();
                self.store.put(&object_key, &refreshed.table.encode())?;
                return Ok((refreshed, vec![major]));
            }
        }
        let mut all_inputs = Vec::new();
        if let Some(major) = &old_major {
            all_inputs.push(major.clone());
        }
        all_inputs.extend(inputs.iter().cloned());
        let merged = self.merge_with_reuse(
            tablet,
            &all_inputs,
            SsTableKind::Major,
            (Scn(0), merge_scn),
            Some(merge_scn),
        )?;
        Ok((merged, all_inputs))
    }

    /// The metadata half of a major compaction (phase 4): swaps inputs for
    /// the new baseline and records GC eligibility.
    pub fn publish_major(
        &self,
        tablet: TabletId,
        inputs: &[TableHandle],
        output: &TableHandle,
    ) -> Result<Vec<ObjectKey>, EngineError> {
        let ls = self.tablet_stream(tablet)?;
        self.publish_compaction(tablet, ls, inputs, output)
    }

    /// Full storage-layer merge: phases 3 and 4 back to back.
    pub fn merge_to_major(
        &self,
        tablet: TabletId,
        merge_scn: Scn,
    ) -> Result<(TableHandle, Vec<ObjectKey>), EngineError> {
        let (merged, inputs) = self.merge_to_major_unpublished(tablet, merge_scn)?;
        let obsolete = self.publish_major(tablet, &inputs, &merged)?;
        Ok((merged, obsolete))
    }

    // ---- Metadata refresh (RO replay and post-compaction switch) ----

    pub fn with_view<R>(&self, f: impl FnOnce(&KvView) -> R) -> R {
        f(&self.view.borrow())
    }

    pub fn view_next_lsn(&self) -> crate::types::Lsn {
        self.view.borrow().next_lsn()
    }

    /// Polls SSLog and reconciles every tablet's SSTable set with the
    /// shared metadata: new descriptors are fetched from shared storage,
    /// superseded handles dropped, and replayed memtable rows at or below
    /// the shared checkpoint trimmed.
    pub fn poll_meta(&self) -> Result<(), EngineError> {
        {
            let mut view = self.view.borrow_mut();
            self.meta.sslog_poll(&mut view)?;
        }
        let tablets: Vec<TabletId> = self.tablets.borrow().keys().copied().collect();
        for tablet in tablets {
            self.refresh_tablet(tablet)?;
        }
        Ok(())
    }

    /// Re-bootstraps this node's metadata view from the latest snapshot
    /// (used when the meta stream was reclaimed below our position).
    pub fn bootstrap_meta(&self) -> Result<(), EngineError> {
        let view = self.meta.bootstrap_view()?;
        *self.view.borrow_mut() = view;
        let tablets: Vec<TabletId> = self.tablets.borrow().keys().copied().collect();
        for tablet in tablets {
            self.refresh_tablet(tablet)?;
        }
        Ok(())
    }

    fn refresh_tablet(&self, tablet: TabletId) -> Result<(), EngineError> {
        let Some(tm) = self.view.borrow().tablet_meta(tablet) else {
            return Ok(());
        };
        let known: Vec<String> = {
            let tablets = self.tablets.borrow();
            let state = tablets.get(&tablet).ok_or(EngineError::UnknownTablet(tablet))?;
            state
                .increments
                .iter()
                .chain(state.major.iter())
                .map(|h| h.object_key.as_str().to_string())
                .collect()
        };
        let mut fetched: Vec<TableHandle> = Vec::new();
        for r in &tm.sstables {
            if known.contains(&r.object_key) {
                continue;
            }
            let key = ObjectKey::new(r.object_key.clone()).expect("valid key in meta");
            let table = SsTable::decode(&self.store.get(&key)?)?;
            fetched.push(TableHandle { table, object_key: key, shared: true });
        }

        let mut tablets = self.tablets.borrow_mut();
        let state = tablets.get_mut(&tablet).expect("tablet exists");
        let live: Vec<String> = tm.sstables.iter().map(|r| r.object_key.clone()).collect();
        for h in &mut state.increments {
            if live.contains(&h.object_key.as_str().to_string()) {
                h.shared = true;
            }
        }
        state.increments.retain(|h| !h.shared || live.contains(&h.object_key.as_str().to_string()));
        if let Some(major) = &state.major {
            if !live.contains(&major.object_key.as_str().to_string()) {
                state.major = None;
            }
        }
        for handle in fetched {
            match handle.table.kind {
                SsTableKind::Major => state.major = Some(handle),
                _ => {
                    state.increments.retain(|h| h.object_key != handle.object_key);
                    state.increments.push(handle);
                }
            }
        }
        state.increments.sort_by_key(|h| h.table.start_scn());
        // Rows now covered by shared SSTables leave the replayed memtable.
        if tm.checkpoint_scn.is_set() && tm.checkpoint_scn > state.checkpoint_scn {
            let covered = state.active.split_off_upto(tm.checkpoint_scn);
            drop(covered);
            state.checkpoint_scn = tm.checkpoint_scn;
        }
        Ok(())
    }

    /// Side-effect-free digest of this node's tablet state: memtable
    /// content plus the SSTable lineup. No IO, no cache traffic, no clock
    /// charge.
    pub fn volatile_digest(&self, tablet: TabletId) -> u32 {
        let tablets = self.tablets.borrow();
        let Some(state) = tablets.get(&tablet) else { return 0 };
        let mut h = crate::types::Crc32::new();
        let mut fold_mem = |mt: &MemTable| {
            for (key, versions) in &mt.entries {
                h.update(key);
                for (scn, value) in versions {
                    h.update(&scn.0.to_be_bytes());
                    match value {
                        Some(v) => h.update(v),
                        None => h.update(&[0xFF]),
                    }
                }
            }
        };
        fold_mem(&state.active);
        for frozen in &state.frozen {
            fold_mem(frozen);
        }
        for task in &state.inflight {
            for row in &task.rows {
                h.update(&row.key);
                h.update(&row.commit_scn.0.to_be_bytes());
            }
        }
        for handle in state.increments.iter().chain(state.major.iter()) {
            h.update(handle.object_key.as_str().as_bytes());
            h.update(&[handle.shared as u8]);
        }
        h.update(&state.checkpoint_scn.0.to_be_bytes());
        h.finish()
    }

    /// Simulated process crash: volatile memtables and in-flight dumps are
    /// lost; the local SSTable manifest, write cache, and local cache tier
    /// remain (they live on the node's disk).
    pub fn crash_volatile(&self) {
        let mut tablets = self.tablets.borrow_mut();
        for state in tablets.values_mut() {
            state.active = MemTable::default();
            state.frozen.clear();
            state.inflight.clear();
        }
        drop(tablets);
        self.cache.drop_volatile();
    }

    /// Adopts a node-private (unshared) SSTable handle copied from another
    /// node during migration; its blocks must already sit in this node's
    /// write cache.
    pub fn adopt_private_handle(&self, tablet: TabletId, handle: TableHandle) {
        let mut tablets = self.tablets.borrow_mut();
        let Some(state) = tablets.get_mut(&tablet) else { return };
        if state.increments.iter().any(|h| h.object_key == handle.object_key) {
            return;
        }
        state.checkpoint_scn = state.checkpoint_scn.max(handle.table.end_scn());
        state.increments.push(handle);
        state.increments.sort_by_key(|h| h.table.start_scn());
    }

    /// Replays one committed row during recovery or RO replay; rows at or
    /// below the checkpoint are already persisted and skipped.
    pub fn replay_row(&self, tablet: TabletId, row: Row) -> Result<(), EngineError> {
        let skip = {
            let tablets = self.tablets.borrow();
            let state = tablets.get(&tablet).ok_or(EngineError::UnknownTablet(tablet))?;
            row.commit_scn <= state.checkpoint_scn
                || row.commit_scn <= state.highest_persisted_scn()
        };
        if skip {
            return Ok(());
        }
        let mut tablets = self.tablets.borrow_mut();
        let state = tablets.get_mut(&tablet).expect("tablet exists");
        state.active.insert(row);
        Ok(())
    }
}

/// First keys of each micro block inside an encoded macro block.
fn index_first_keys(bytes: &[u8]) -> Vec<Vec<u8>> {
    let mut r = crate::wire::Reader::new(&bytes[..bytes.len().saturating_sub(4)]);
    if r.expect_magic(crate::types::MACRO_BLOCK_MAGIC).is_err() {
        return Vec::new();
    }
    let Ok(count) = r.u32() else { return Vec::new() };
    let mut keys = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let Ok(fk) = r.bytes() else { return keys };
        keys.push(fk.to_vec());
        if r.u32().is_err() || r.u32().is_err() {
            return keys;
        }
    }
    keys
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::{BlockServer, CacheConfig};
    use crate::clock::ScnSource;
    use crate::log::{LogConfig, LogService};
    use crate::meta::MetaConfig;
    use crate::store::{MemStore, StoreConfig};

    const T: TabletId = TabletId(1);
    const LS: LogStreamId = LogStreamId(7);
    const NODE: NodeId = NodeId(1);

    struct Fixture {
        clock: Rc<Clock>,
        store: Rc<MemStore>,
        meta: Rc<MetaService>,
        engine: Rc<Engine>,
    }

    fn fixture_with(config: EngineConfig) -> Fixture {
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
        let scn = Rc::new(ScnSource::new());
        let meta = MetaService::new(
            clock.clone(),
            trace.clone(),
            store.clone(),
            log,
            scn,
            LogStreamId(0),
            MetaConfig::default(),
        );
        let server = BlockServer::new(clock.clone(), store.clone(), 256);
        let cache = CacheNode::new(
            NODE,
            clock.clone(),
            trace.clone(),
            store.clone(),
            Some(server),
            CacheConfig::default(),
        );
        let engine = Engine::new(
            NODE,
            clock.clone(),
            trace,
            store.clone(),
            cache,
            meta.clone(),
            config,
        );
        engine.create_tablet(T, LS);
        meta.acquire_sswriter(LS, NODE, 1_000_000).unwrap();
        Fixture { clock, store, meta, engine }
    }

    fn fixture() -> Fixture {
        fixture_with(EngineConfig { dump_base_ms: 0, ..EngineConfig::default() })
    }

    fn put(f: &Fixture, key: &str, value: &str, scn: u64) {
        f.engine.write_row(T, Row::put(key.as_bytes().to_vec(), value.as_bytes().to_vec(), Scn(scn))).unwrap();
    }

    fn get(f: &Fixture, key: &str, scn: u64) -> Option<String> {
        f.engine
            .read(T, key.as_bytes(), Scn(scn))
            .unwrap()
            .map(|v| String::from_utf8(v).unwrap())
    }

    #[test]
    fn mvcc_visibility_and_tombstones() {
        let f = fixture();
        put(&f, "k", "v1", 5);
        put(&f, "k", "v2", 7);
        assert_eq!(get(&f, "k", 5), Some("v1".into()));
        assert_eq!(get(&f, "k", 6), Some("v1".into()));
        assert_eq!(get(&f, "k", 7), Some("v2".into()));
        f.engine.write_row(T, Row::delete(b"k".to_vec(), Scn(9))).unwrap();
        assert_eq!(get(&f, "k", 9), None);
        assert_eq!(get(&f, "k", 8), Some("v2".into()));
    }

    #[test]
    fn micro_compact_partitions_at_cut_and_preserves_reads() {
        let f = fixture();
        for i in 1..=100u64 {
            put(&f, &format!("key{i:03}"), &format!("val{i}"), i);
        }
        let before: Vec<_> = (1..=100).map(|i| get(&f, &format!("key{i:03}"), 100)).collect();
        let cut = f.engine.micro_compact(T, Some(Scn(60))).unwrap();
        assert_eq!(cut, Some(Scn(60)));
        f.engine.flush_dumps(T).unwrap();
        assert_eq!(f.engine.checkpoint_scn(T).unwrap(), Scn(60));
        let incs = f.engine.increment_handles(T);
        assert_eq!(incs.len(), 1);
        assert_eq!(incs[0].table.scn_range, (Scn(1), Scn(60)));
        assert_eq!(incs[0].table.kind, SsTableKind::Micro);
        // Reads identical at every scn before and after the dump.
        let after: Vec<_> = (1..=100).map(|i| get(&f, &format!("key{i:03}"), 100)).collect();
        assert_eq!(before, after);
        assert_eq!(get(&f, "key050", 49), None, "not yet written at scn 49");
        assert_eq!(get(&f, "key050", 50), Some("val50".into()));
    }

    #[test]
    fn micro_compact_empty_is_noop() {
        let f = fixture();
        assert_eq!(f.engine.micro_compact(T, None).unwrap(), None);
        assert_eq!(f.engine.checkpoint_scn(T).unwrap(), Scn::UNSET);
    }

    #[test]
    fn mini_compact_freezes_and_dumps() {
        let f = fixture();
        for i in 1..=50u64 {
            put(&f, &format!("k{i:02}"), "v", i);
        }
        f.engine.mini_compact(T).unwrap();
        f.engine.flush_dumps(T).unwrap();
        assert_eq!(f.engine.checkpoint_scn(T).unwrap(), Scn(50));
        let incs = f.engine.increment_handles(T);
        assert_eq!(incs.len(), 1);
        assert_eq!(incs[0].table.kind, SsTableKind::Mini);
        assert_eq!(f.engine.mini_dumps_since_major(T), 1);
        // Two consecutive freezes produce contiguous scn ranges.
        for i in 51..=80u64 {
            put(&f, &format!("k{i:02}"), "v", i);
        }
        f.engine.mini_compact(T).unwrap();
        f.engine.flush_dumps(T).unwrap();
        let incs = f.engine.increment_handles(T);
        assert_eq!(incs.len(), 2);
        assert!(incs[0].table.end_scn() < incs[1].table.start_scn());
    }

    #[test]
    fn empty_freeze_writes_metadata_only_record() {
        let f = fixture();
        let appends_before = f.meta.appends_issued();
        f.engine.mini_compact(T).unwrap();
        assert_eq!(f.meta.appends_issued(), appends_before + 1, "one sslog record");
        assert!(f.engine.increment_handles(T).is_empty(), "no data object");
        assert_eq!(f.store.list("data/").len(), 0);
    }

    #[test]
    fn upload_is_one_aggregated_metadata_commit() {
        let f = fixture();
        for i in 1..=30u64 {
            put(&f, &format!("k{i:02}"), "v", i);
        }
        f.engine.mini_compact(T).unwrap();
        f.engine.flush_dumps(T).unwrap();
        for i in 31..=60u64 {
            put(&f, &format!("k{i:02}"), "v", i);
        }
        f.engine.mini_compact(T).unwrap();
        f.engine.flush_dumps(T).unwrap();

        let appends_before = f.meta.appends_issued();
        let uploaded = f.engine.upload_increments(T).unwrap();
        assert_eq!(uploaded.len(), 2, "two sstable descriptors");
        assert_eq!(f.meta.appends_issued(), appends_before + 1, "1 aggregated commit");
        assert!(f.store.list("data/1/mini/").len() == 2);
        assert!(!f.store.list("block/1/").is_empty());
        let tm = f.meta.tablet_meta(T).unwrap();
        assert_eq!(tm.sstables.len(), 2);
        assert_eq!(tm.checkpoint_scn, Scn(60));

        // Idempotent retry: nothing new to upload, no extra commit.
        let appends_before = f.meta.appends_issued();
        assert!(f.engine.upload_increments(T).unwrap().is_empty());
        assert_eq!(f.meta.appends_issued(), appends_before);
    }

    #[test]
    fn upload_without_lease_fails() {
        let f = fixture();
        put(&f, "k", "v", 1);
        f.engine.mini_compact(T).unwrap();
        f.engine.flush_dumps(T).unwrap();
        f.clock.advance(2_000_000);
        let err = f.engine.upload_increments(T);
        assert!(matches!(err, Err(EngineError::Meta(MetaError::LeaseExpired { .. }))));
    }

    fn dump_and_upload(f: &Fixture, rows: &[(&str, &str, u64)]) {
        for (k, v, scn) in rows {
            put(f, k, v, *scn);
        }
        f.engine.mini_compact(T).unwrap();
        f.engine.flush_dumps(T).unwrap();
        f.engine.upload_increments(T).unwrap();
    }

    #[test]
    fn minor_compaction_disjoint_inputs_reuse_all_blocks() {
        let f = fixture();
        dump_and_upload(&f, &[("a1", "x", 1), ("a2", "x", 2)]);
        dump_and_upload(&f, &[("b1", "x", 3), ("b2", "x", 4)]);
        let inputs = f.engine.shared_increment_keys(T);
        assert_eq!(inputs.len(), 2);
        let input_blocks: Vec<MacroBlockId> = f
            .engine
            .increment_handles(T)
            .iter()
            .flat_map(|h| h.table.blocks.iter().map(|b| b.id))
            .collect();
        let before_hashes: BTreeMap<MacroBlockId, u64> = f
            .engine
            .increment_handles(T)
            .iter()
            .flat_map(|h| h.table.blocks.iter().map(|b| (b.id, b.size_bytes)))
            .collect();
        let (out, obsolete) = f.engine.minor_compact(T, &inputs).unwrap();
        assert_eq!(out.table.kind, SsTableKind::Minor);
        let out_blocks: Vec<MacroBlockId> = out.table.blocks.iter().map(|b| b.id).collect();
        assert_eq!(out_blocks, input_blocks, "100% of blocks reused by reference");
        for b in &out.table.blocks {
            assert_eq!(before_hashes[&b.id], b.size_bytes, "reused blocks unchanged");
        }
        // Only the input descriptors become obsolete; no block is deleted.
        assert!(obsolete.iter().all(|k| k.as_str().starts_with("data/")));
    }

    #[test]
    fn minor_compaction_merges_overlapping_versions() {
        let f = fixture();
        dump_and_upload(&f, &[("k", "v1", 3)]);
        dump_and_upload(&f, &[("k", "v2", 7), ("m", "v3", 8)]);
        let before_cs = f.engine.read_state_checksum(T, Scn(8)).unwrap();
        let inputs = f.engine.shared_increment_keys(T);
        let (out, _) = f.engine.minor_compact(T, &inputs).unwrap();
        assert_eq!(out.table.scn_range, (Scn(3), Scn(8)));
        // Both versions retained: reads below and above the newer scn.
        assert_eq!(get(&f, "k", 5), Some("v1".into()));
        assert_eq!(get(&f, "k", 7), Some("v2".into()));
        assert_eq!(get(&f, "m", 8), Some("v3".into()));
        assert_eq!(f.engine.read_state_checksum(T, Scn(8)).unwrap(), before_cs);
        assert_eq!(f.engine.increment_count(T), 1);
    }

    #[test]
    fn minor_compaction_rejects_gapped_inputs() {
        let f = fixture();
        dump_and_upload(&f, &[("a", "x", 1)]);
        dump_and_upload(&f, &[("b", "x", 2)]);
        dump_and_upload(&f, &[("c", "x", 3)]);
        let inputs = f.engine.shared_increment_keys(T);
        let gapped = vec![inputs[0].clone(), inputs[2].clone()];
        assert!(matches!(
            f.engine.minor_compact(T, &gapped),
            Err(EngineError::NonContiguousInputs)
        ));
    }

    #[test]
    fn write_when_full_is_rejected_and_counted() {
        let f = fixture_with(EngineConfig {
            freeze_threshold_bytes: 256,
            memory_budget_bytes: 512,
            micro_compaction: false,
            dump_base_ms: 10_000,
            dump_bandwidth_bytes_per_ms: 0,
            ..EngineConfig::default()
        });
        let mut rejected = false;
        for i in 0..100u64 {
            let row = Row::put(format!("key{i:03}").into_bytes(), vec![b'x'; 16], Scn(i + 1));
            if f.engine.write_row(T, row).is_err() {
                rejected = true;
                break;
            }
        }
        assert!(rejected, "memory budget must reject before 100 small writes complete");
        assert!(f.engine.stall_rejects(T) > 0);
        // Time passes; dumps complete; writes flow again.
        f.clock.advance(20_000);
        f.engine.tick(T).unwrap();
        assert!(f.engine.can_accept(T));
    }

    #[test]
    fn reads_identical_during_inflight_dump() {
        let f = fixture_with(EngineConfig {
            dump_base_ms: 5_000,
            ..EngineConfig::default()
        });
        for i in 1..=40u64 {
            put(&f, &format!("k{i:02}"), &format!("v{i}"), i);
        }
        f.engine.micro_compact(T, Some(Scn(20))).unwrap();
        // Dump still in flight: every row remains readable.
        for i in 1..=40u64 {
            assert_eq!(get(&f, &format!("k{i:02}"), 40), Some(format!("v{i}")));
        }
        f.engine.flush_dumps(T).unwrap();
        for i in 1..=40u64 {
            assert_eq!(get(&f, &format!("k{i:02}"), 40), Some(format!("v{i}")));
        }
    }

    #[test]
    fn replay_skips_persisted_rows() {
        let f = fixture();
        put(&f, "a", "v1", 1);
        f.engine.mini_compact(T).unwrap();
        f.engine.flush_dumps(T).unwrap();
        // Replay of an already-persisted row is a no-op; a newer row lands.
        f.engine.replay_row(T, Row::put(b"a".to_vec(), b"stale".to_vec(), Scn(1))).unwrap();
        assert_eq!(get(&f, "a", 1), Some("v1".into()));
        f.engine.replay_row(T, Row::put(b"a".to_vec(), b"v2".to_vec(), Scn(5))).unwrap();
        assert_eq!(get(&f, "a", 5), Some("v2".into()));
    }
}
