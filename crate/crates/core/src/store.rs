//! Append-only durable store: CRC-framed records in rolling segment files,
//! a JSON manifest indexing every acknowledged version, and single-file
//! state packs for moving histories between machines.
//!
//! Frame layout (little-endian):
//!
//! ```text
//! magic u32 = 0x44415254 | type u8 | version u64 | payload_len u32 | payload | crc32 u32
//! ```
//!
//! The CRC (IEEE) covers `type` through the end of `payload`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::SnapshotSink;
use crate::delta::encoding::{ByteSink, Reader};
use crate::delta::{DeltaHeader, DeltaSet, Strategy};
use crate::digest::Digest128;

pub const MAGIC: u32 = 0x4441_5254;
pub const FRAME_HEADER: u64 = 4 + 1 + 8 + 4;
/// Framing bytes added to every payload.
pub const FRAME_OVERHEAD: u64 = FRAME_HEADER + 4;
pub const SEGMENT_LIMIT: u64 = 256 << 20;
pub const LOCK_FILE: &str = ".dart.lock";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Index entries appended since the manifest was last rewritten, one JSON
/// object per line.
pub const INDEX_LOG: &str = "index.jsonl";
pub const SEGMENT_DIR: &str = "segments";
const MANIFEST_FORMAT: u32 = 1;
/// The manifest is rewritten (and the index log emptied) after this many
/// appends, and on sync.
const MANIFEST_EVERY: u32 = 256;
const PACK_MAGIC: &[u8; 8] = b"DARTPACK";
const PACK_END: &[u8; 8] = b"PACKEND!";
const PACK_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordKind {
    Delta = 1,
    Checkpoint = 2,
    ProgramSource = 3,
    ManifestUpdate = 4,
}

impl RecordKind {
    fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            1 => RecordKind::Delta,
            2 => RecordKind::Checkpoint,
            3 => RecordKind::ProgramSource,
            4 => RecordKind::ManifestUpdate,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            RecordKind::Delta => "delta",
            RecordKind::Checkpoint => "checkpoint",
            RecordKind::ProgramSource => "program",
            RecordKind::ManifestUpdate => "manifest-update",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsyncPolicy {
    /// fsync every record before acknowledging it.
    Always,
    /// fsync every n records and on close.
    Batch(u32),
}

#[derive(Debug, Clone, Copy)]
pub struct StoreOptions {
    pub segment_limit: u64,
    pub fsync: FsyncPolicy,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions {
            segment_limit: SEGMENT_LIMIT,
            fsync: FsyncPolicy::Always,
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("store {0} is locked by another session")]
    Locked(PathBuf),
    #[error("{0} is not a store (no manifest)")]
    NotAStore(PathBuf),
    #[error("{0} already contains a store")]
    AlreadyExists(PathBuf),
    #[error("store has no checkpoint")]
    NoCheckpoint,
    #[error("version {version} is not above the latest version {latest}")]
    VersionOrderViolation { version: u64, latest: u64 },
    #[error("unknown version {0}")]
    UnknownVersion(u64),
    #[error("corrupt record for version {version} at offset {offset}")]
    CorruptRecord { version: u64, offset: u64 },
    #[error("target directory {0} is not empty")]
    NotEmpty(PathBuf),
    #[error("corrupt pack: {0}")]
    CorruptPack(String),
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("store has no program record")]
    NoProgram,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub version: u64,
    pub kind: RecordKind,
    pub segment: u32,
    pub offset: u64,
    /// Framed size on disk.
    pub byte_size: u64,
    pub base_version: Option<u64>,
    pub statement_index: u64,
    pub strategy: Option<Strategy>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub program_digest: Option<String>,
    pub seed: Option<u64>,
    pub segments: Vec<String>,
    pub entries: Vec<IndexEntry>,
    /// Orderly session closes recorded so far.
    pub sessions_closed: u64,
}

impl Manifest {
    pub fn latest_version(&self) -> Option<u64> {
        self.entries.last().map(|e| e.version)
    }

    pub fn snapshot_entries(&self) -> impl Iterator<Item = &IndexEntry> {
        self.entries
            .iter()
            .filter(|e| matches!(e.kind, RecordKind::Delta | RecordKind::Checkpoint))
    }

    pub fn entry(&self, version: u64) -> Option<&IndexEntry> {
        self.entries
            .binary_search_by_key(&version, |e| e.version)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn latest_checkpoint(&self) -> Option<u64> {
        self.entries
            .iter()
            .rev()
            .find(|e| e.kind == RecordKind::Checkpoint)
            .map(|e| e.version)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramRecord {
    pub source: String,
    pub digest: Digest128,
    pub seed: u64,
}

impl ProgramRecord {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![1u8];
        out.put(&self.digest.0);
        out.put(&self.seed.to_le_bytes());
        out.put_str(&self.source);
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        let mut r = Reader::new(bytes);
        if r.u8().ok()? != 1 {
            return None;
        }
        let digest = Digest128(r.take(16).ok()?.try_into().ok()?);
        let seed = r.u64_le().ok()?;
        let source = r.str().ok()?;
        r.is_empty().then_some(ProgramRecord {
            source,
            digest,
            seed,
        })
    }
}

pub fn frame(kind: RecordKind, version: u64, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + FRAME_OVERHEAD as usize);
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out[4..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct FrameHeader {
    kind: u8,
    version: u64,
    len: u64,
}

fn parse_header(buf: &[u8]) -> Option<FrameHeader> {
    if buf.len() < FRAME_HEADER as usize || u32::from_le_bytes(buf[0..4].try_into().unwrap()) != MAGIC {
        return None;
    }
    Some(FrameHeader {
        kind: buf[4],
        version: u64::from_le_bytes(buf[5..13].try_into().unwrap()),
        len: u64::from(u32::from_le_bytes(buf[13..17].try_into().unwrap())),
    })
}

/// Validates a complete frame held in `buf`; returns its payload.
fn check_frame(buf: &[u8]) -> Option<(FrameHeader, &[u8])> {
    let h = parse_header(buf)?;
    let end = FRAME_HEADER as usize + h.len as usize;
    if buf.len() != end + 4 {
        return None;
    }
    let crc = u32::from_le_bytes(buf[end..end + 4].try_into().unwrap());
    (crc32fast::hash(&buf[4..end]) == crc).then(|| (h, &buf[FRAME_HEADER as usize..end]))
}

fn segment_name(n: u32) -> String {
    format!("{n:04}.dlog")
}

fn write_manifest(dir: &Path, m: &Manifest, sync: bool) -> Result<(), StoreError> {
    let tmp = dir.join("manifest.json.tmp");
    let json = serde_json::to_vec_pretty(m).map_err(|e| StoreError::Manifest(e.to_string()))?;
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&json)?;
        if sync {
            f.sync_all()?;
        }
    }
    fs::rename(&tmp, dir.join(MANIFEST_FILE))?;
    if sync {
        File::open(dir)?.sync_all()?;
    }
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<Manifest, StoreError> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(StoreError::NotAStore(dir.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let m: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Manifest(e.to_string()))?;
    if m.format != MANIFEST_FORMAT {
        return Err(StoreError::Manifest(format!("unsupported format {}", m.format)));
    }
    if m.entries.windows(2).any(|w| w[0].version >= w[1].version) {
        return Err(StoreError::Manifest("versions out of order".into()));
    }
    Ok(m)
}

/// Adds entries from the index log that the manifest does not hold yet.
/// A partial last line (a crash mid-append) ends the log.
fn read_index_log(m: &mut Manifest, dir: &Path) -> Result<(), StoreError> {
    let bytes = match fs::read(dir.join(INDEX_LOG)) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e.into()),
    };
    let complete = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    for line in bytes[..complete].split(|b| *b == b'\n').filter(|l| !l.is_empty()) {
        let Ok(entry) = serde_json::from_slice::<IndexEntry>(line) else {
            break;
        };
        if m.latest_version().is_none_or(|l| entry.version > l) {
            let seg = segment_name(entry.segment);
            if !m.segments.contains(&seg) {
                m.segments.push(seg);
            }
            m.entries.push(entry);
        }
    }
    Ok(())
}

/// Read-only access to acknowledged records: the manifest, the index log,
/// and any complete, CRC-valid records written after the last indexed one.
/// A torn tail is ignored, never repaired, by readers.
#[derive(Debug, Clone)]
pub struct StoreReader {
    dir: PathBuf,
    manifest: Manifest,
}

impl StoreReader {
    /// Opens a store for reading; fails with `NoCheckpoint` if nothing is
    /// restorable.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let r = Self::open_any(dir)?;
        if r.manifest.latest_checkpoint().is_none() {
            return Err(StoreError::NoCheckpoint);
        }
        Ok(r)
    }

    fn open_any(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        let mut manifest = read_manifest(&dir)?;
        read_index_log(&mut manifest, &dir)?;
        scan_tail(&mut manifest, &dir, false)?;
        Ok(StoreReader { dir, manifest })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.manifest.entries
    }

    pub fn versions(&self) -> Vec<u64> {
        self.manifest.snapshot_entries().map(|e| e.version).collect()
    }

    pub fn latest_snapshot(&self) -> Option<&IndexEntry> {
        self.manifest.snapshot_entries().last()
    }

    pub fn entry(&self, version: u64) -> Result<&IndexEntry, StoreError> {
        self.manifest
            .entry(version)
            .ok_or(StoreError::UnknownVersion(version))
    }

    fn segment_path(&self, segment: u32) -> PathBuf {
        self.dir.join(SEGMENT_DIR).join(segment_name(segment))
    }

    /// Reads and CRC-checks one framed record.
    pub fn read_frame(&self, entry: &IndexEntry) -> Result<Vec<u8>, StoreError> {
        let corrupt = || StoreError::CorruptRecord {
            version: entry.version,
            offset: entry.offset,
        };
        let mut f = File::open(self.segment_path(entry.segment)).map_err(|_| corrupt())?;
        f.seek(SeekFrom::Start(entry.offset))?;
        let mut buf = vec![0u8; entry.byte_size as usize];
        f.read_exact(&mut buf).map_err(|_| corrupt())?;
        match check_frame(&buf) {
            Some((h, _)) if h.version == entry.version && h.kind == entry.kind as u8 => Ok(buf),
            _ => Err(corrupt()),
        }
    }

    pub fn read_payload(&self, entry: &IndexEntry) -> Result<Vec<u8>, StoreError> {
        let mut buf = self.read_frame(entry)?;
        buf.truncate(buf.len() - 4);
        buf.drain(..FRAME_HEADER as usize);
        Ok(buf)
    }

    pub fn program(&self) -> Result<ProgramRecord, StoreError> {
        let entry = self
            .manifest
            .entries
            .iter()
            .find(|e| e.kind == RecordKind::ProgramSource)
            .ok_or(StoreError::NoProgram)?;
        let payload = self.read_payload(entry)?;
        ProgramRecord::decode(&payload).ok_or(StoreError::CorruptRecord {
            version: entry.version,
            offset: entry.offset,
        })
    }

    /// Index entries from the dominating checkpoint to `version`, following
    /// base links.
    pub fn chain_entries(&self, version: u64) -> Result<Vec<&IndexEntry>, StoreError> {
        let mut out = Vec::new();
        let mut cur = self.entry(version)?;
        loop {
            if !matches!(cur.kind, RecordKind::Delta | RecordKind::Checkpoint) {
                return Err(StoreError::UnknownVersion(version));
            }
            out.push(cur);
            match cur.base_version {
                None => break,
                Some(b) => {
                    cur = self.manifest.entry(b).ok_or(StoreError::CorruptRecord {
                        version: cur.version,
                        offset: cur.offset,
                    })?;
                }
            }
        }
        out.reverse();
        Ok(out)
    }

    /// Checkpoint plus the delta chain ending at `version`, decoded and
    /// verified.
    pub fn read_chain(&self, version: u64) -> Result<Vec<DeltaSet>, StoreError> {
        self.chain_entries(version)?
            .into_iter()
            .map(|e| {
                let payload = self.read_payload(e)?;
                DeltaSet::decode(&payload)
                    .ok()
                    .filter(|d| d.version == e.version && d.base_version == e.base_version)
                    .ok_or(StoreError::CorruptRecord {
                        version: e.version,
                        offset: e.offset,
                    })
            })
            .collect()
    }

    /// Single-file export of the program and every record needed to
    /// materialize versions in `[lo, hi]`.
    pub fn export_pack(&self, lo: u64, hi: u64, out: &mut impl Write) -> Result<u64, StoreError> {
        let mut wanted: BTreeSet<u64> = BTreeSet::new();
        let in_range: Vec<u64> = self
            .versions()
            .into_iter()
            .filter(|v| (lo..=hi).contains(v))
            .collect();
        if in_range.is_empty() {
            return Err(StoreError::UnknownVersion(lo));
        }
        self.entry(lo)?;
        self.entry(hi)?;
        for v in in_range {
            for e in self.chain_entries(v)? {
                wanted.insert(e.version);
            }
        }
        let mut entries: Vec<&IndexEntry> = self
            .manifest
            .entries
            .iter()
            .filter(|e| e.kind == RecordKind::ProgramSource)
            .collect();
        for v in &wanted {
            entries.push(self.entry(*v)?);
        }
        let snapshot = Manifest {
            entries: entries.iter().map(|e| (*e).clone()).collect(),
            ..self.manifest.clone()
        };
        let meta = serde_json::to_vec(&snapshot).map_err(|e| StoreError::Manifest(e.to_string()))?;

        let mut body = Vec::new();
        body.extend_from_slice(PACK_MAGIC);
        body.extend_from_slice(&PACK_FORMAT.to_le_bytes());
        body.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        body.extend_from_slice(&meta);
        for e in &entries {
            body.extend_from_slice(&self.read_frame(e)?);
        }
        body.extend_from_slice(PACK_END);
        body.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        out.write_all(&body)?;
        Ok(body.len() as u64)
    }
}

/// Exclusive writer session over a store directory.
pub struct Store {
    reader: StoreReader,
    options: StoreOptions,
    active: File,
    active_segment: u32,
    active_size: u64,
    unsynced: u32,
    /// Appends recorded only in the index log.
    unindexed: u32,
    index: File,
    _lock: File,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("dir", &self.reader.dir)
            .field("entries", &self.reader.manifest.entries.len())
            .finish()
    }
}

fn take_lock(dir: &Path) -> Result<File, StoreError> {
    let lock = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(dir.join(LOCK_FILE))?;
    match lock.try_lock() {
        Ok(()) => Ok(lock),
        Err(fs::TryLockError::WouldBlock) => Err(StoreError::Locked(dir.to_path_buf())),
        Err(fs::TryLockError::Error(e)) => Err(e.into()),
    }
}

/// Opens the index log empty; call only right after a manifest rewrite.
fn open_index(dir: &Path) -> Result<File, StoreError> {
    Ok(OpenOptions::new()
        .create(true)
        .truncate(true)
        .write(true)
        .open(dir.join(INDEX_LOG))?)
}

fn is_empty_dir(dir: &Path) -> Result<bool, StoreError> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_none()),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(true),
        Err(e) => Err(e.into()),
    }
}

impl Store {
    /// Creates a new store in `dir`, which must be absent or empty.
    pub fn create(dir: impl AsRef<Path>, options: StoreOptions) -> Result<Self, StoreError> {
        let dir = dir.as_ref();
        if dir.join(MANIFEST_FILE).exists() {
            return Err(StoreError::AlreadyExists(dir.to_path_buf()));
        }
        if !is_empty_dir(dir)? {
            return Err(StoreError::NotEmpty(dir.to_path_buf()));
        }
        fs::create_dir_all(dir.join(SEGMENT_DIR))?;
        let lock = take_lock(dir)?;
        let manifest = Manifest {
            format: MANIFEST_FORMAT,
            segments: vec![segment_name(0)],
            ..Manifest::default()
        };
        let active = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(SEGMENT_DIR).join(segment_name(0)))?;
        write_manifest(dir, &manifest, true)?;
        let index = open_index(dir)?;
        Ok(Store {
            reader: StoreReader {
                dir: dir.to_path_buf(),
                manifest,
            },
            options,
            active,
            active_segment: 0,
            active_size: 0,
            unsynced: 0,
            unindexed: 0,
            index,
            _lock: lock,
        })
    }

    /// Opens an existing store, recovering records written after the last
    /// manifest update and truncating a torn tail.
    pub fn open(dir: impl AsRef<Path>, options: StoreOptions) -> Result<Self, StoreError> {
        let dir = dir.as_ref();
        let lock = take_lock(dir)?;
        let mut reader = StoreReader::open_any(dir)?;
        drop_torn(&mut reader.manifest, dir)?;
        scan_tail(&mut reader.manifest, dir, true)?;
        let active_segment = reader.manifest.segments.len().saturating_sub(1) as u32;
        let path = dir.join(SEGMENT_DIR).join(segment_name(active_segment));
        let active = OpenOptions::new().create(true).append(true).open(&path)?;
        let active_size = active.metadata()?.len();
        write_manifest(dir, &reader.manifest, true)?;
        let index = open_index(dir)?;
        Ok(Store {
            reader,
            options,
            active,
            active_segment,
            active_size,
            unsynced: 0,
            unindexed: 0,
            index,
            _lock: lock,
        })
    }

    pub fn open_or_create(dir: impl AsRef<Path>, options: StoreOptions) -> Result<Self, StoreError> {
        let dir = dir.as_ref();
        if dir.join(MANIFEST_FILE).exists() {
            Self::open(dir, options)
        } else {
            Self::create(dir, options)
        }
    }

    pub fn reader(&self) -> &StoreReader {
        &self.reader
    }

    pub fn manifest(&self) -> &Manifest {
        &self.reader.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.reader.dir
    }

    fn latest(&self) -> Option<u64> {
        self.reader.manifest.latest_version()
    }

    /// Writes the program record (version 0) if the store has none.
    pub fn write_program(&mut self, program: &ProgramRecord) -> Result<(), StoreError> {
        let m = &self.reader.manifest;
        if let Some(d) = &m.program_digest {
            if *d != program.digest.to_hex() {
                return Err(StoreError::Manifest(format!(
                    "store holds program {d}, not {}",
                    program.digest
                )));
            }
            return Ok(());
        }
        let payload = program.encode();
        self.reader.manifest.program_digest = Some(program.digest.to_hex());
        self.reader.manifest.seed = Some(program.seed);
        self.append_raw(RecordKind::ProgramSource, 0, &payload, None, 0, None)?;
        Ok(())
    }

    /// Appends an encoded [`DeltaSet`]; kind and index metadata come from
    /// its header.
    pub fn append_snapshot(&mut self, payload: &[u8]) -> Result<IndexEntry, StoreError> {
        let h = DeltaHeader::parse(payload).map_err(|e| StoreError::Manifest(e.to_string()))?;
        let kind = if h.base_version.is_none() {
            RecordKind::Checkpoint
        } else {
            RecordKind::Delta
        };
        if let Some(b) = h.base_version {
            self.reader.entry(b)?;
        }
        self.append_raw(kind, h.version, payload, h.base_version, h.statement_index, Some(h.strategy))
    }

    fn append_raw(
        &mut self,
        kind: RecordKind,
        version: u64,
        payload: &[u8],
        base_version: Option<u64>,
        statement_index: u64,
        strategy: Option<Strategy>,
    ) -> Result<IndexEntry, StoreError> {
        if let Some(latest) = self.latest() {
            if version <= latest {
                return Err(StoreError::VersionOrderViolation { version, latest });
            }
        }
        let bytes = frame(kind, version, payload);
        if self.active_size > 0 && self.active_size + bytes.len() as u64 > self.options.segment_limit {
            self.roll()?;
        }
        let offset = self.active_size;
        if let Err(e) = self.active.write_all(&bytes) {
            let _ = self.active.set_len(offset);
            return Err(e.into());
        }
        self.active_size += bytes.len() as u64;
        self.unsynced += 1;
        let sync = match self.options.fsync {
            FsyncPolicy::Always => true,
            FsyncPolicy::Batch(n) => self.unsynced >= n.max(1),
        };
        if sync {
            self.active.sync_data()?;
            self.unsynced = 0;
        }
        let entry = IndexEntry {
            version,
            kind,
            segment: self.active_segment,
            offset,
            byte_size: bytes.len() as u64,
            base_version,
            statement_index,
            strategy,
        };
        self.reader.manifest.entries.push(entry.clone());
        self.unindexed += 1;
        if self.unindexed >= MANIFEST_EVERY || kind == RecordKind::ProgramSource {
            self.compact(sync)?;
        } else {
            let mut line = serde_json::to_vec(&entry).map_err(|e| StoreError::Manifest(e.to_string()))?;
            line.push(b'\n');
            self.index.write_all(&line)?;
        }
        Ok(entry)
    }

    /// Rewrites the manifest with every entry and empties the index log.
    fn compact(&mut self, sync: bool) -> Result<(), StoreError> {
        write_manifest(&self.reader.dir, &self.reader.manifest, sync)?;
        self.index.set_len(0)?;
        self.index.seek(SeekFrom::Start(0))?;
        self.unindexed = 0;
        Ok(())
    }

    fn roll(&mut self) -> Result<(), StoreError> {
        self.active.sync_data()?;
        self.active_segment += 1;
        let name = segment_name(self.active_segment);
        self.active = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.reader.dir.join(SEGMENT_DIR).join(&name))?;
        self.active_size = 0;
        self.reader.manifest.segments.push(name);
        self.compact(false)
    }

    pub fn sync(&mut self) -> Result<(), StoreError> {
        self.active.sync_data()?;
        self.unsynced = 0;
        self.compact(true)
    }

    /// Orderly end of a writer session: appends a manifest-update record
    /// and syncs everything.
    pub fn close_session(&mut self) -> Result<(), StoreError> {
        self.reader.manifest.sessions_closed += 1;
        let summary = serde_json::json!({
            "sessions_closed": self.reader.manifest.sessions_closed,
            "latest_version": self.latest(),
            "records": self.reader.manifest.entries.len(),
        });
        let payload = summary.to_string().into_bytes();
        let bytes = frame(
            RecordKind::ManifestUpdate,
            self.latest().unwrap_or(0),
            &payload,
        );
        if self.active_size > 0 && self.active_size + bytes.len() as u64 > self.options.segment_limit {
            self.roll()?;
        }
        self.active.write_all(&bytes)?;
        self.active_size += bytes.len() as u64;
        self.sync()
    }
}

impl SnapshotSink for Store {
    fn persist(&mut self, _header: &DeltaHeader, payload: &[u8]) -> Result<(), String> {
        self.append_snapshot(payload).map(|_| ()).map_err(|e| e.to_string())
    }

    fn close(&mut self) -> Result<(), String> {
        self.close_session().map_err(|e| e.to_string())
    }
}

/// Scans every segment past the last indexed record and indexes complete,
/// valid frames up to the first invalid or partial one. With `repair`,
/// that frame and everything after it are cut off. Returns whether the
/// manifest changed.
/// Forgets indexed records that run past the end of their segment, and
/// everything after the first such record. Damage inside a segment is left
/// for readers to report.
fn drop_torn(m: &mut Manifest, dir: &Path) -> Result<(), StoreError> {
    let mut lens = BTreeMap::new();
    let mut keep = m.entries.len();
    for (i, e) in m.entries.iter().enumerate() {
        let len = match lens.get(&e.segment) {
            Some(l) => *l,
            None => {
                let l = match fs::metadata(dir.join(SEGMENT_DIR).join(segment_name(e.segment))) {
                    Ok(md) => md.len(),
                    Err(err) if err.kind() == io::ErrorKind::NotFound => 0,
                    Err(err) => return Err(err.into()),
                };
                *lens.entry(e.segment).or_insert(l)
            }
        };
        if e.offset + e.byte_size > len {
            keep = i;
            break;
        }
    }
    m.entries.truncate(keep);
    Ok(())
}

fn scan_tail(m: &mut Manifest, dir: &Path, repair: bool) -> Result<bool, StoreError> {
    let seg_dir = dir.join(SEGMENT_DIR);
    let mut on_disk: Vec<u32> = fs::read_dir(&seg_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".dlog")?.parse::<u32>().ok()
        })
        .collect();
    on_disk.sort_unstable();
    let mut changed = false;
    let (start_seg, mut start_off) = match m.entries.last() {
        Some(e) => (e.segment, e.offset + e.byte_size),
        None => (0, 0),
    };
    let mut cut = false;
    for seg in on_disk.into_iter().filter(|s| *s >= start_seg) {
        let path = seg_dir.join(segment_name(seg));
        if cut {
            if !repair {
                break;
            }
            fs::remove_file(&path)?;
            changed = true;
            continue;
        }
        let data = fs::read(&path)?;
        let mut off = if seg == start_seg { start_off } else { 0 };
        start_off = 0;
        while (off as usize) < data.len() {
            let rest = &data[off as usize..];
            let valid = parse_header(rest).and_then(|h| {
                let total = (FRAME_OVERHEAD + h.len) as usize;
                (rest.len() >= total).then(|| check_frame(&rest[..total]))?
            });
            let Some((h, payload)) = valid else {
                cut = true;
                break;
            };
            let size = FRAME_OVERHEAD + h.len;
            match RecordKind::from_u8(h.kind) {
                Some(RecordKind::ManifestUpdate) => {}
                Some(kind) => {
                    let in_order = m.latest_version().is_none_or(|l| h.version > l);
                    let meta = match kind {
                        RecordKind::ProgramSource => ProgramRecord::decode(payload).map(|p| {
                            m.program_digest = Some(p.digest.to_hex());
                            m.seed = Some(p.seed);
                            (None, 0, None)
                        }),
                        _ => DeltaHeader::parse(payload)
                            .ok()
                            .filter(|d| d.version == h.version)
                            .map(|d| (d.base_version, d.statement_index, Some(d.strategy))),
                    };
                    let Some((base_version, statement_index, strategy)) = meta.filter(|_| in_order)
                    else {
                        cut = true;
                        break;
                    };
                    m.entries.push(IndexEntry {
                        version: h.version,
                        kind,
                        segment: seg,
                        offset: off,
                        byte_size: size,
                        base_version,
                        statement_index,
                        strategy,
                    });
                    changed = true;
                }
                None => {
                    cut = true;
                    break;
                }
            }
            off += size;
        }
        if !m.segments.contains(&segment_name(seg)) {
            m.segments.push(segment_name(seg));
            changed = true;
        }
        if cut && repair {
            let f = OpenOptions::new().write(true).open(&path)?;
            f.set_len(off)?;
            f.sync_all()?;
            changed = true;
        }
    }
    Ok(changed)
}

/// Rebuilds a store from a pack in `target`, which must be absent or
/// empty. Import happens in a sibling temporary directory that is renamed
/// into place, so a failed import leaves nothing behind.
pub fn import_pack(pack: &[u8], target: impl AsRef<Path>) -> Result<Manifest, StoreError> {
    let target = target.as_ref();
    if !is_empty_dir(target)? {
        return Err(StoreError::NotEmpty(target.to_path_buf()));
    }
    let frames = parse_pack(pack)?;
    let parent = target
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = tempdir_in(parent)?;
    let result = (|| {
        let mut store = Store::create(&tmp, StoreOptions::default())?;
        for (kind, version, payload) in &frames {
            match kind {
                RecordKind::ProgramSource => {
                    let p = ProgramRecord::decode(payload)
                        .ok_or_else(|| StoreError::CorruptPack("bad program record".into()))?;
                    store.write_program(&p)?;
                }
                RecordKind::Delta | RecordKind::Checkpoint => {
                    let e = store.append_snapshot(payload)?;
                    if e.version != *version || e.kind != *kind {
                        return Err(StoreError::CorruptPack(format!(
                            "record {version} header disagrees with frame"
                        )));
                    }
                }
                RecordKind::ManifestUpdate => {}
            }
        }
        store.sync()?;
        Ok(store.manifest().clone())
    })();
    let manifest = match result {
        Ok(m) => m,
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            return Err(match e {
                StoreError::CorruptPack(_) => e,
                other => StoreError::CorruptPack(other.to_string()),
            });
        }
    };
    if target.exists() {
        fs::remove_dir(target)?;
    }
    fs::rename(&tmp, target)?;
    Ok(manifest)
}

fn tempdir_in(parent: &Path) -> Result<PathBuf, StoreError> {
    for i in 0..1000u32 {
        let p = parent.join(format!(".dart-import-{}-{i}", std::process::id()));
        match fs::create_dir(&p) {
            Ok(()) => return Ok(p),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(StoreError::Io(io::Error::other("no free temporary directory name")))
}

type PackFrame = (RecordKind, u64, Vec<u8>);

fn parse_pack(pack: &[u8]) -> Result<Vec<PackFrame>, StoreError> {
    let bad = |m: &str| StoreError::CorruptPack(m.to_string());
    if pack.len() < 8 + 4 + 4 + 8 + 4 + 4 || &pack[..8] != PACK_MAGIC {
        return Err(bad("missing header"));
    }
    let body_end = pack.len() - 4;
    let crc = u32::from_le_bytes(pack[body_end..].try_into().unwrap());
    if crc32fast::hash(&pack[..body_end]) != crc {
        return Err(bad("checksum mismatch"));
    }
    let format = u32::from_le_bytes(pack[8..12].try_into().unwrap());
    if format != PACK_FORMAT {
        return Err(bad("unsupported pack format"));
    }
    let meta_len = u32::from_le_bytes(pack[12..16].try_into().unwrap()) as usize;
    let mut off = 16usize
        .checked_add(meta_len)
        .filter(|o| *o <= body_end)
        .ok_or_else(|| bad("manifest overruns pack"))?;
    let meta: Manifest =
        serde_json::from_slice(&pack[16..off]).map_err(|e| StoreError::CorruptPack(e.to_string()))?;
    let trailer = body_end - 12;
    let mut frames = Vec::new();
    while off < trailer {
        let rest = &pack[off..trailer];
        let h = parse_header(rest).ok_or_else(|| bad("bad record header"))?;
        let total = (FRAME_OVERHEAD + h.len) as usize;
        if rest.len() < total {
            return Err(bad("truncated record"));
        }
        let (h, payload) = check_frame(&rest[..total]).ok_or_else(|| bad("record checksum"))?;
        let kind = RecordKind::from_u8(h.kind).ok_or_else(|| bad("unknown record type"))?;
        frames.push((kind, h.version, payload.to_vec()));
        off += total;
    }
    if off != trailer || &pack[trailer..trailer + 8] != PACK_END {
        return Err(bad("missing end marker"));
    }
    let count = u32::from_le_bytes(pack[trailer + 8..trailer + 12].try_into().unwrap()) as usize;
    if count != frames.len() || count != meta.entries.len() {
        return Err(bad("record count mismatch"));
    }
    Ok(frames)
}

/// Cumulative framed bytes of snapshot records, in version order.
pub fn storage_series(m: &Manifest) -> Vec<(u64, u64)> {
    let mut total = 0;
    m.snapshot_entries()
        .map(|e| {
            total += e.byte_size;
            (e.version, total)
        })
        .collect()
}

/// Versions per kind, for quick summaries.
pub fn kind_counts(m: &Manifest) -> BTreeMap<&'static str, usize> {
    let mut out = BTreeMap::new();
    for e in &m.entries {
        *out.entry(e.kind.name()).or_insert(0) += 1;
    }
    out
}
