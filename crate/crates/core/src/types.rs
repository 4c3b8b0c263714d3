//! Identifiers, block encodings, the SSTable model, and checksums shared
//! by every other module.

use std::fmt;

use crate::wire::{self, Reader, WireError};
use thiserror::Error;

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(TenantId);
id_type!(LogStreamId);
id_type!(TabletId);
id_type!(NodeId);
id_type!(MacroBlockId);

/// Monotonic logical commit timestamp. 0 is reserved as "unset"; every
/// committed write carries a non-zero SCN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Scn(pub u64);

impl Scn {
    pub const UNSET: Scn = Scn(0);

    pub fn is_set(self) -> bool {
        self.0 != 0
    }
}

impl fmt::Display for Scn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Dense per-log-stream sequence number of committed entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Lsn(pub u64);

impl Lsn {
    pub fn next(self) -> Lsn {
        Lsn(self.0 + 1)
    }
}

impl fmt::Display for Lsn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A single multiversion row. Tombstones carry an empty value.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Row {
    pub key: Vec<u8>,
    pub value: Vec<u8>,
    pub commit_scn: Scn,
    pub tombstone: bool,
}

impl Row {
    pub fn put(key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>, scn: Scn) -> Row {
        Row { key: key.into(), value: value.into(), commit_scn: scn, tombstone: false }
    }

    pub fn delete(key: impl Into<Vec<u8>>, scn: Scn) -> Row {
        Row { key: key.into(), value: Vec::new(), commit_scn: scn, tombstone: true }
    }

    /// Canonical serialization: length-prefixed key, length-prefixed value,
    /// 8-byte big-endian SCN, 1-byte tombstone flag.
    pub fn encode_into(&self, buf: &mut Vec<u8>) {
        wire::put_bytes(buf, &self.key);
        wire::put_bytes(buf, &self.value);
        wire::put_u64(buf, self.commit_scn.0);
        buf.push(self.tombstone as u8);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Row, WireError> {
        let key = r.bytes()?.to_vec();
        let value = r.bytes()?.to_vec();
        let scn = Scn(r.u64()?);
        let tombstone = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(WireError::Malformed("tombstone flag")),
        };
        Ok(Row { key, value, commit_scn: scn, tombstone })
    }

    pub fn encoded_len(&self) -> usize {
        4 + self.key.len() + 4 + self.value.len() + 8 + 1
    }
}

/// Canonical row order: key ascending, then commit SCN descending
/// (newest version first).
pub fn row_order(a: &Row, b: &Row) -> std::cmp::Ordering {
    a.key
        .cmp(&b.key)
        .then_with(|| b.commit_scn.cmp(&a.commit_scn))
}

pub fn sort_rows(rows: &mut [Row]) {
    rows.sort_by(row_order);
}

// CRC-32, ISO-HDLC polynomial (reflected 0xEDB88320), init 0xFFFFFFFF,
// final xor 0xFFFFFFFF.
const CRC_POLY: u32 = 0xEDB8_8320;

fn crc_table() -> &'static [u32; 256] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[u32; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [0u32; 256];
        for (i, slot) in table.iter_mut().enumerate() {
            let mut crc = i as u32;
            for _ in 0..8 {
                crc = if crc & 1 != 0 { (crc >> 1) ^ CRC_POLY } else { crc >> 1 };
            }
            *slot = crc;
        }
        table
    })
}

/// Streaming CRC-32 so checksums can be computed incrementally.
#[derive(Debug, Clone)]
pub struct Crc32 {
    state: u32,
}

impl Default for Crc32 {
    fn default() -> Self {
        Self::new()
    }
}

impl Crc32 {
    pub fn new() -> Crc32 {
        Crc32 { state: 0xFFFF_FFFF }
    }

    pub fn update(&mut self, bytes: &[u8]) {
        let table = crc_table();
        for &b in bytes {
            self.state = (self.state >> 8) ^ table[((self.state ^ b as u32) & 0xFF) as usize];
        }
    }

    pub fn finish(&self) -> u32 {
        self.state ^ 0xFFFF_FFFF
    }
}

pub fn crc32(bytes: &[u8]) -> u32 {
    let mut h = Crc32::new();
    h.update(bytes);
    h.finish()
}

/// Checksum over logical row content in canonical order. Equal for any two
/// SSTables with identical rows regardless of how they are packed into
/// blocks.
pub fn logical_checksum<'a>(rows: impl IntoIterator<Item = &'a Row>) -> u32 {
    let mut h = Crc32::new();
    let mut buf = Vec::new();
    for row in rows {
        buf.clear();
        row.encode_into(&mut buf);
        h.update(&buf);
    }
    h.finish()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BlockError {
    #[error("micro-block key ranges overlap at input index {0}")]
    OverlappingRanges(usize),
    #[error("micro-block rows out of canonical order")]
    UnsortedRows,
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// The memory/local-cache unit: a small sorted run of rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MicroBlock {
    pub rows: Vec<Row>,
    pub key_range: (Vec<u8>, Vec<u8>),
    pub size_bytes: usize,
}

impl MicroBlock {
    /// Builds a micro-block from rows already in canonical order. The key
    /// range is tight by construction.
    pub fn from_rows(rows: Vec<Row>) -> Result<MicroBlock, BlockError> {
        if rows.is_empty() {
            return Err(WireError::Malformed("empty micro-block").into());
        }
        if rows.windows(2).any(|w| row_order(&w[0], &w[1]) == std::cmp::Ordering::Greater) {
            return Err(BlockError::UnsortedRows);
        }
        let key_range = (rows.first().unwrap().key.clone(), rows.last().unwrap().key.clone());
        let size_bytes = 4 + rows.iter().map(Row::encoded_len).sum::<usize>();
        Ok(MicroBlock { rows, key_range, size_bytes })
    }

    pub fn encode_into(&self, buf: &mut Vec<u8>) {
        wire::put_u32(buf, self.rows.len() as u32);
        for row in &self.rows {
            row.encode_into(buf);
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<MicroBlock, BlockError> {
        let mut r = Reader::new(bytes);
        let count = r.u32()? as usize;
        let mut rows = Vec::with_capacity(count);
        for _ in 0..count {
            rows.push(Row::decode(&mut r)?);
        }
        if r.remaining() != 0 {
            return Err(WireError::Malformed("trailing bytes in micro-block").into());
        }
        MicroBlock::from_rows(rows)
    }
}

/// One index entry per micro-block inside a macro-block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockIndexEntry {
    pub first_key: Vec<u8>,
    pub offset: u32,
    pub len: u32,
}

/// The distributed-cache unit: an ordered pack of disjoint micro-blocks
/// with an index and a CRC footer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacroBlock {
    pub id: MacroBlockId,
    pub micro_blocks: Vec<MicroBlock>,
    pub block_index: Vec<BlockIndexEntry>,
    pub content_hash: u32,
}

pub const MACRO_BLOCK_MAGIC: [u8; 4] = *b"BMB1";

/// Wire format: magic "BMB1" | block count (4B BE) | index section
/// (per block: first key, data offset, data length) | concatenated
/// serialized micro-blocks | crc32 footer (4B BE).
pub fn encode_macro_block(
    id: MacroBlockId,
    micro_blocks: Vec<MicroBlock>,
) -> Result<(MacroBlock, Vec<u8>), BlockError> {
    for (i, w) in micro_blocks.windows(2).enumerate() {
        if w[1].key_range.0 <= w[0].key_range.1 {
            return Err(BlockError::OverlappingRanges(i + 1));
        }
    }

    let mut data = Vec::new();
    let mut index = Vec::with_capacity(micro_blocks.len());
    for mb in &micro_blocks {
        let offset = data.len() as u32;
        mb.encode_into(&mut data);
        index.push(BlockIndexEntry {
            first_key: mb.key_range.0.clone(),
            offset,
            len: data.len() as u32 - offset,
        });
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(&MACRO_BLOCK_MAGIC);
    wire::put_u32(&mut buf, micro_blocks.len() as u32);
    for entry in &index {
        wire::put_bytes(&mut buf, &entry.first_key);
        wire::put_u32(&mut buf, entry.offset);
        wire::put_u32(&mut buf, entry.len);
    }
    buf.extend_from_slice(&data);
    let hash = crc32(&buf);
    wire::put_u32(&mut buf, hash);

    let block = MacroBlock { id, micro_blocks, block_index: index, content_hash: hash };
    Ok((block, buf))
}

pub fn decode_macro_block(id: MacroBlockId, bytes: &[u8]) -> Result<MacroBlock, BlockError> {
    if bytes.len() < 4 {
        return Err(WireError::Truncated(bytes.len()).into());
    }
    let (body, footer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_be_bytes(footer.try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(WireError::ChecksumMismatch { stored, computed }.into());
    }

    let mut r = Reader::new(body);
    r.expect_magic(MACRO_BLOCK_MAGIC)?;
    let count = r.u32()? as usize;
    let mut index = Vec::with_capacity(count);
    for _ in 0..count {
        let first_key = r.bytes()?.to_vec();
        let offset = r.u32()?;
        let len = r.u32()?;
        index.push(BlockIndexEntry { first_key, offset, len });
    }
    let data = r.take(r.remaining())?;
    let mut micro_blocks = Vec::with_capacity(count);
    for entry in &index {
        let start = entry.offset as usize;
        let end = start + entry.len as usize;
        if end > data.len() {
            return Err(WireError::Malformed("block index out of bounds").into());
        }
        let mb = MicroBlock::decode(&data[start..end])?;
        if mb.key_range.0 != entry.first_key {
            return Err(WireError::Malformed("index first_key mismatch").into());
        }
        micro_blocks.push(mb);
    }
    Ok(MacroBlock { id, micro_blocks, block_index: index, content_hash: stored })
}

/// Returns the serialized bytes of one micro-block inside an encoded
/// macro block, using the index section only (the other blocks are not
/// decoded). The caller is expected to have verified the footer already;
/// this is the cache's slicing path.
pub fn micro_block_slice(bytes: &[u8], idx: u32) -> Result<&[u8], BlockError> {
    if bytes.len() < 4 {
        return Err(WireError::Truncated(bytes.len()).into());
    }
    let body = &bytes[..bytes.len() - 4];
    let mut r = Reader::new(body);
    r.expect_magic(MACRO_BLOCK_MAGIC)?;
    let count = r.u32()?;
    if idx >= count {
        return Err(WireError::Malformed("micro-block index out of range").into());
    }
    let mut target = None;
    for i in 0..count {
        let _first_key = r.bytes()?;
        let offset = r.u32()?;
        let len = r.u32()?;
        if i == idx {
            target = Some((offset as usize, len as usize));
        }
    }
    let (offset, len) = target.expect("idx < count");
    let data = r.take(r.remaining())?;
    if offset + len > data.len() {
        return Err(WireError::Malformed("block index out of bounds").into());
    }
    Ok(&data[offset..offset + len])
}

/// Consolidation levels of an immutable sorted run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SsTableKind {
    Micro,
    Mini,
    Minor,
    Major,
}

impl SsTableKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SsTableKind::Micro => "micro",
            SsTableKind::Mini => "mini",
            SsTableKind::Minor => "minor",
            SsTableKind::Major => "major",
        }
    }

    pub fn from_u8(v: u8) -> Option<SsTableKind> {
        match v {
            0 => Some(SsTableKind::Micro),
            1 => Some(SsTableKind::Mini),
            2 => Some(SsTableKind::Minor),
            3 => Some(SsTableKind::Major),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            SsTableKind::Micro => 0,
            SsTableKind::Mini => 1,
            SsTableKind::Minor => 2,
            SsTableKind::Major => 3,
        }
    }
}

/// Per-macro-block metadata carried in the SSTable descriptor so readers
/// can prune blocks without fetching them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMeta {
    pub id: MacroBlockId,
    pub first_key: Vec<u8>,
    pub last_key: Vec<u8>,
    pub size_bytes: u64,
}

/// An immutable sorted run of macro-blocks with an SCN range and a
/// packing-independent logical checksum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SsTable {
    pub kind: SsTableKind,
    pub tablet_id: TabletId,
    /// Inclusive range of commit SCNs covered. Major tables start at 0 and
    /// cover the full history up to `end`.
    pub scn_range: (Scn, Scn),
    pub blocks: Vec<BlockMeta>,
    pub checksum: u32,
}

impl SsTable {
    pub fn macro_blocks(&self) -> impl Iterator<Item = MacroBlockId> + '_ {
        self.blocks.iter().map(|b| b.id)
    }

    pub fn start_scn(&self) -> Scn {
        self.scn_range.0
    }

    pub fn end_scn(&self) -> Scn {
        self.scn_range.1
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.push(self.kind.as_u8());
        wire::put_u64(&mut buf, self.tablet_id.0);
        wire::put_u64(&mut buf, self.scn_range.0 .0);
        wire::put_u64(&mut buf, self.scn_range.1 .0);
        wire::put_u32(&mut buf, self.checksum);
        wire::put_u32(&mut buf, self.blocks.len() as u32);
        for b in &self.blocks {
            wire::put_u64(&mut buf, b.id.0);
            wire::put_bytes(&mut buf, &b.first_key);
            wire::put_bytes(&mut buf, &b.last_key);
            wire::put_u64(&mut buf, b.size_bytes);
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<SsTable, WireError> {
        let mut r = Reader::new(bytes);
        let kind = SsTableKind::from_u8(r.u8()?).ok_or(WireError::Malformed("sstable kind"))?;
        let tablet_id = TabletId(r.u64()?);
        let start = Scn(r.u64()?);
        let end = Scn(r.u64()?);
        let checksum = r.u32()?;
        let count = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(count);
        for _ in 0..count {
            let id = MacroBlockId(r.u64()?);
            let first_key = r.bytes()?.to_vec();
            let last_key = r.bytes()?.to_vec();
            let size_bytes = r.u64()?;
            blocks.push(BlockMeta { id, first_key, last_key, size_bytes });
        }
        Ok(SsTable { kind, tablet_id, scn_range: (start, end), blocks, checksum })
    }
}
