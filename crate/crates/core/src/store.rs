//! The shared storage substrate: an append-only blob store with S3-like
//! semantics — whole-object atomic replace, no mutual exclusion, append
//! and multi-part upload, lexicographic listing.
//!
//! Two backends implement one contract: an in-memory simulated store that
//! charges latency against the logical clock (the default for tests and
//! benchmarks) and a local-filesystem store for CLI persistence.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use thiserror::Error;

use crate::clock::Clock;
use crate::trace::Trace;

/// "/"-separated object path, e.g. "data/7/minor/5-11".
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectKey(String);

impl ObjectKey {
    pub fn new(path: impl Into<String>) -> Result<ObjectKey, StoreError> {
        let path = path.into();
        if path.is_empty() || path.split('/').any(str::is_empty) {
            return Err(StoreError::InvalidKey(path));
        }
        Ok(ObjectKey(path))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ObjectKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("object not found: {0}")]
    NotFound(String),
    #[error("range out of bounds: {key} len={len} offset={offset} want={want}")]
    RangeOutOfBounds { key: String, len: u64, offset: u64, want: u64 },
    #[error("injected failure at op {0}")]
    InjectedFailure(u64),
    #[error("invalid object key: {0:?}")]
    InvalidKey(String),
    #[error("multiupload requires at least one part")]
    EmptyParts,
    #[error("io error on {key}: {source}")]
    Io {
        key: String,
        #[source]
        source: io::Error,
    },
}

/// Simulated timing for the in-memory backend.
#[derive(Debug, Clone)]
pub struct StoreConfig {
    /// Charged once per operation (per part for multiupload).
    pub base_latency_ms: u64,
    /// Bytes moved per simulated millisecond; 0 means unmetered.
    pub bandwidth_bytes_per_ms: u64,
    /// Operation indices (0-based, in call order) that fail with
    /// `InjectedFailure` before mutating anything.
    pub failure_schedule: Vec<u64>,
}

impl Default for StoreConfig {
    fn default() -> Self {
        // Object storage base latency per the 100ms+ service class.
        StoreConfig { base_latency_ms: 100, bandwidth_bytes_per_ms: 0, failure_schedule: Vec::new() }
    }
}

impl StoreConfig {
    pub fn instant() -> StoreConfig {
        StoreConfig { base_latency_ms: 0, bandwidth_bytes_per_ms: 0, failure_schedule: Vec::new() }
    }
}

/// Byte and operation counters, for cost accounting in benchmarks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StoreStats {
    pub ops: u64,
    pub bytes_written: u64,
    pub bytes_read: u64,
}

pub trait ObjectStore {
    fn put(&self, key: &ObjectKey, bytes: &[u8]) -> Result<(), StoreError>;
    fn get(&self, key: &ObjectKey) -> Result<Vec<u8>, StoreError>;
    fn get_range(&self, key: &ObjectKey, offset: u64, len: u64) -> Result<Vec<u8>, StoreError>;
    /// Extends the object (creating it if absent); returns the new length.
    fn append(&self, key: &ObjectKey, bytes: &[u8]) -> Result<u64, StoreError>;
    /// Equivalent to `put(key, concat(parts))`; all-or-nothing on completion.
    fn multiupload(&self, key: &ObjectKey, parts: &[Vec<u8>]) -> Result<(), StoreError>;
    /// All live keys with the prefix, in lexicographic order.
    fn list(&self, prefix: &str) -> Vec<ObjectKey>;
    /// Idempotent; deleting an absent key is ok.
    fn delete(&self, key: &ObjectKey) -> Result<(), StoreError>;
    fn stats(&self) -> StoreStats;
}

/// Deterministic in-memory backend driven by the logical clock.
pub struct MemStore {
    clock: Rc<Clock>,
    trace: Rc<Trace>,
    config: StoreConfig,
    objects: RefCell<BTreeMap<String, Vec<u8>>>,
    op_index: Cell<u64>,
    stats: Cell<StoreStats>,
}

impl MemStore {
    pub fn new(clock: Rc<Clock>, trace: Rc<Trace>, config: StoreConfig) -> Rc<MemStore> {
        Rc::new(MemStore {
            clock,
            trace,
            config,
            objects: RefCell::new(BTreeMap::new()),
            op_index: Cell::new(0),
            stats: Cell::new(StoreStats::default()),
        })
    }

    /// Charges latency, bumps counters, and fails the op if the schedule
    /// says so. Called exactly once per logical operation part.
    fn charge(&self, bytes: u64, read: bool) -> Result<(), StoreError> {
        let idx = self.op_index.get();
        self.op_index.set(idx + 1);
        let mut cost = self.config.base_latency_ms;
        if self.config.bandwidth_bytes_per_ms > 0 {
            cost += bytes / self.config.bandwidth_bytes_per_ms;
        }
        self.clock.advance(cost);
        let mut stats = self.stats.get();
        stats.ops += 1;
        if self.config.failure_schedule.contains(&idx) {
            self.stats.set(stats);
            return Err(StoreError::InjectedFailure(idx));
        }
        if read {
            stats.bytes_read += bytes;
        } else {
            stats.bytes_written += bytes;
        }
        self.stats.set(stats);
        Ok(())
    }

    fn record(&self, kind: &str, key: &ObjectKey) {
        self.trace.record(self.clock.now(), "store", kind, key.as_str().to_string());
    }

    /// Order-stable digest over all live objects. Charges nothing: used by
    /// side-effect-free state snapshots.
    pub fn content_digest(&self) -> u32 {
        let mut h = crate::types::Crc32::new();
        for (key, bytes) in self.objects.borrow().iter() {
            h.update(key.as_bytes());
            h.update(&(bytes.len() as u64).to_be_bytes());
            h.update(bytes);
        }
        h.finish()
    }
}

impl ObjectStore for MemStore {
    fn put(&self, key: &ObjectKey, bytes: &[u8]) -> Result<(), StoreError> {
        self.charge(bytes.len() as u64, false)?;
        self.objects.borrow_mut().insert(key.as_str().to_string(), bytes.to_vec());
        self.record("store_put", key);
        Ok(())
    }

    fn get(&self, key: &ObjectKey) -> Result<Vec<u8>, StoreError> {
        let bytes = self
            .objects
            .borrow()
            .get(key.as_str())
            .cloned()
            .ok_or_else(|| StoreError::NotFound(key.as_str().to_string()))?;
        self.charge(bytes.len() as u64, true)?;
        self.record("store_get", key);
        Ok(bytes)
    }

    fn get_range(&self, key: &ObjectKey, offset: u64, len: u64) -> Result<Vec<u8>, StoreError> {
        let objects = self.objects.borrow();
        let bytes = objects
            .get(key.as_str())
            .ok_or_else(|| StoreError::NotFound(key.as_str().to_string()))?;
        let total = bytes.len() as u64;
        if offset + len > total {
            return Err(StoreError::RangeOutOfBounds {
                key: key.as_str().to_string(),
                len: total,
                offset,
                want: len,
            });
        }
        let out = bytes[offset as usize..(offset + len) as usize].to_vec();
        drop(objects);
        self.charge(len, true)?;
        self.record("store_get", key);
        Ok(out)
    }

    fn append(&self, key: &ObjectKey, bytes: &[u8]) -> Result<u64, StoreError> {
        self.charge(bytes.len() as u64, false)?;
        let mut objects = self.objects.borrow_mut();
        let obj = objects.entry(key.as_str().to_string()).or_default();
        obj.extend_from_slice(bytes);
        let len = obj.len() as u64;
        drop(objects);
        self.record("store_append", key);
        Ok(len)
    }

    fn multiupload(&self, key: &ObjectKey, parts: &[Vec<u8>]) -> Result<(), StoreError> {
        if parts.is_empty() {
            return Err(StoreError::EmptyParts);
        }
        // Parts are staged; the object appears only on completion.
        let mut staged = Vec::new();
        for part in parts {
            self.charge(part.len() as u64, false)?;
            staged.extend_from_slice(part);
        }
        self.objects.borrow_mut().insert(key.as_str().to_string(), staged);
        self.record("store_put", key);
        Ok(())
    }

    fn list(&self, prefix: &str) -> Vec<ObjectKey> {
        self.objects
            .borrow()
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| ObjectKey(k.clone()))
            .collect()
    }

    fn delete(&self, key: &ObjectKey) -> Result<(), StoreError> {
        self.charge(0, false)?;
        self.objects.borrow_mut().remove(key.as_str());
        self.record("store_delete", key);
        Ok(())
    }

    fn stats(&self) -> StoreStats {
        self.stats.get()
    }
}

/// Filesystem backend: keys map to paths under a root directory, writes go
/// through a temp file plus rename, multiupload stages parts under
/// ".parts/" until completion.
pub struct FsStore {
    root: PathBuf,
    stats: Cell<StoreStats>,
}

impl FsStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Rc<FsStore>, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| StoreError::Io { key: root.display().to_string(), source: e })?;
        Ok(Rc::new(FsStore { root, stats: Cell::new(StoreStats::default()) }))
    }

    fn path_for(&self, key: &ObjectKey) -> PathBuf {
        self.root.join(key.as_str())
    }

    fn io_err(key: &ObjectKey, source: io::Error) -> StoreError {
        StoreError::Io { key: key.as_str().to_string(), source }
    }

    fn write_atomic(&self, key: &ObjectKey, bytes: &[u8]) -> Result<(), StoreError> {
        let path = self.path_for(key);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Self::io_err(key, e))?;
        }
        let tmp = path.with_extension("tmp-writing");
        fs::write(&tmp, bytes).map_err(|e| Self::io_err(key, e))?;
        fs::rename(&tmp, &path).map_err(|e| Self::io_err(key, e))?;
        Ok(())
    }

    fn bump(&self, bytes: u64, read: bool) {
        let mut stats = self.stats.get();
        stats.ops += 1;
        if read {
            stats.bytes_read += bytes;
        } else {
            stats.bytes_written += bytes;
        }
        self.stats.set(stats);
    }

    fn collect_keys(&self, dir: &Path, out: &mut Vec<String>) {
        let entries = match fs::read_dir(dir) {
            Ok(e) => e,
            Err(_) => return,
        };
        for entry in entries.flatten() {
            let path = entry.path();
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if name == ".parts" {
                continue;
            }
            if path.is_dir() {
                self.collect_keys(&path, out);
            } else if let Ok(rel) = path.strip_prefix(&self.root) {
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
    }
}

impl ObjectStore for FsStore {
    fn put(&self, key: &ObjectKey, bytes: &[u8]) -> Result<(), StoreError> {
        self.bump(bytes.len() as u64, false);
        self.write_atomic(key, bytes)
    }

    fn get(&self, key: &ObjectKey) -> Result<Vec<u8>, StoreError> {
        let bytes = fs::read(self.path_for(key)).map_err(|e| {
            if e.kind() == io::ErrorKind::NotFound {
                StoreError::NotFound(key.as_str().to_string())
            } else {
                Self::io_err(key, e)
            }
        })?;
        self.bump(bytes.len() as u64, true);
        Ok(bytes)
    }

    fn get_range(&self, key: &ObjectKey, offset: u64, len: u64) -> Result<Vec<u8>, StoreError> {
        let bytes = self.get(key)?;
        let total = bytes.len() as u64;
        if offset + len > total {
            return Err(StoreError::RangeOutOfBounds {
                key: key.as_str().to_string(),
                len: total,
                offset,
                want: len,
            });
        }
        Ok(bytes[offset as usize..(offset + len) as usize].to_vec())
    }

    fn append(&self, key: &ObjectKey, bytes: &[u8]) -> Result<u64, StoreError> {
        let mut current = match self.get(key) {
            Ok(b) => b,
            Err(StoreError::NotFound(_)) => Vec::new(),
            Err(e) => return Err(e),
        };
        current.extend_from_slice(bytes);
        let len = current.len() as u64;
        self.bump(bytes.len() as u64, false);
        self.write_atomic(key, &current)?;
        Ok(len)
    }

    fn multiupload(&self, key: &ObjectKey, parts: &[Vec<u8>]) -> Result<(), StoreError> {
        if parts.is_empty() {
            return Err(StoreError::EmptyParts);
        }
        let stage_dir = self.root.join(".parts").join(key.as_str());
        fs::create_dir_all(&stage_dir).map_err(|e| Self::io_err(key, e))?;
        let mut joined = Vec::new();
        for (i, part) in parts.iter().enumerate() {
            fs::write(stage_dir.join(format!("{i:06}")), part).map_err(|e| Self::io_err(key, e))?;
            joined.extend_from_slice(part);
        }
        self.bump(joined.len() as u64, false);
        self.write_atomic(key, &joined)?;
        let _ = fs::remove_dir_all(&stage_dir);
        Ok(())
    }

    fn list(&self, prefix: &str) -> Vec<ObjectKey> {
        let mut keys = Vec::new();
        self.collect_keys(&self.root.clone(), &mut keys);
        keys.retain(|k| k.starts_with(prefix));
        keys.sort();
        keys.into_iter().map(ObjectKey).collect()
    }

    fn delete(&self, key: &ObjectKey) -> Result<(), StoreError> {
        self.bump(0, false);
        match fs::remove_file(self.path_for(key)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(Self::io_err(key, e)),
        }
    }

    fn stats(&self) -> StoreStats {
        self.stats.get()
    }
}

pub fn key(path: impl Into<String>) -> ObjectKey {
    ObjectKey::new(path).expect("static object key")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mem() -> (Rc<Clock>, Rc<MemStore>) {
        let clock = Rc::new(Clock::new());
        let trace = Rc::new(Trace::disabled());
        let store = MemStore::new(clock.clone(), trace, StoreConfig::default());
        (clock, store)
    }

    #[test]
    fn put_get_round_trip_and_overwrite() {
        let (_, s) = mem();
        let k = key("a/b");
        s.put(&k, b"one").unwrap();
        assert_eq!(s.get(&k).unwrap(), b"one");
        s.put(&k, b"two").unwrap();
        assert_eq!(s.get(&k).unwrap(), b"two");
    }

    #[test]
    fn get_absent_is_not_found() {
        let (_, s) = mem();
        assert!(matches!(s.get(&key("missing")), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn injected_failure_is_atomic() {
        let clock = Rc::new(Clock::new());
        let trace = Rc::new(Trace::disabled());
        let config = StoreConfig { failure_schedule: vec![0], ..StoreConfig::default() };
        let s = MemStore::new(clock, trace, config);
        let k = key("x");
        assert!(matches!(s.put(&k, b"data"), Err(StoreError::InjectedFailure(0))));
        assert!(matches!(s.get(&k), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn get_range_slices() {
        let (_, s) = mem();
        let k = key("obj");
        s.put(&k, &(0u8..16).collect::<Vec<_>>()).unwrap();
        assert_eq!(s.get_range(&k, 0, 16).unwrap(), s.get(&k).unwrap());
        assert_eq!(s.get_range(&k, 4, 8).unwrap(), (4u8..12).collect::<Vec<_>>());
        assert!(matches!(s.get_range(&k, 10, 8), Err(StoreError::RangeOutOfBounds { .. })));
    }

    #[test]
    fn append_concatenates() {
        let (_, s) = mem();
        let k = key("log");
        assert_eq!(s.append(&k, b"aa").unwrap(), 2);
        assert_eq!(s.append(&k, b"bb").unwrap(), 4);
        assert_eq!(s.get(&k).unwrap(), b"aabb");
    }

    #[test]
    fn multiupload_equals_put_of_concat() {
        let (_, s) = mem();
        let k = key("multi");
        s.multiupload(&k, &[b"a".to_vec(), b"bb".to_vec(), b"ccc".to_vec()]).unwrap();
        assert_eq!(s.get(&k).unwrap(), b"abbccc");
        assert!(matches!(s.multiupload(&k, &[]), Err(StoreError::EmptyParts)));
    }

    #[test]
    fn failed_multiupload_leaves_key_absent() {
        let clock = Rc::new(Clock::new());
        let trace = Rc::new(Trace::disabled());
        let config = StoreConfig { failure_schedule: vec![1], ..StoreConfig::default() };
        let s = MemStore::new(clock, trace, config);
        let k = key("multi");
        let err = s.multiupload(&k, &[b"a".to_vec(), b"b".to_vec()]).unwrap_err();
        assert!(matches!(err, StoreError::InjectedFailure(1)));
        assert!(matches!(s.get(&k), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn list_is_sorted_and_prefix_scoped() {
        let (_, s) = mem();
        s.put(&key("a/2"), b"").unwrap();
        s.put(&key("a/1"), b"").unwrap();
        s.put(&key("b/1"), b"").unwrap();
        let keys: Vec<_> = s.list("a/").iter().map(|k| k.as_str().to_string()).collect();
        assert_eq!(keys, vec!["a/1", "a/2"]);
    }

    #[test]
    fn delete_is_idempotent() {
        let (_, s) = mem();
        let k = key("gone");
        s.put(&k, b"x").unwrap();
        s.delete(&k).unwrap();
        s.delete(&k).unwrap();
        assert!(matches!(s.get(&k), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn latency_favors_large_sequential_reads() {
        let (clock, s) = mem();
        let k = key("big");
        let payload = vec![0u8; 4096];
        s.put(&k, &payload).unwrap();

        let start = clock.now();
        s.get(&k).unwrap();
        let one_big = clock.now() - start;

        let start = clock.now();
        for i in 0..8 {
            s.get_range(&k, i * 512, 512).unwrap();
        }
        let many_small = clock.now() - start;
        assert!(one_big < many_small, "one read {one_big}ms vs eight reads {many_small}ms");
    }

    #[test]
    fn invalid_keys_rejected() {
        assert!(ObjectKey::new("").is_err());
        assert!(ObjectKey::new("a//b").is_err());
        assert!(ObjectKey::new("/a").is_err());
        assert!(ObjectKey::new("a/b/c").is_ok());
    }
}
