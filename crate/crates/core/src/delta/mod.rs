//! State deltas between persisted snapshots.
//!
//! Two change-detection strategies produce [`DeltaSet`]s against the last
//! persisted snapshot:
//!
//! * **Serial** encodes each root binding's closure into its own byte array
//!   and diffs the arrays ([`canonical::serialize_state`],
//!   [`canonical::diff_serialized`]).
//! * **IdGraph** builds a graph of live objects keyed by identity with
//!   per-node fingerprints, and writes only new or modified nodes
//!   ([`idgraph`]).
//!
//! Both share one value encoding and one persistent-id space, so a chain may
//! mix strategies. [`materialize::MaterializedState`] applies either kind.

pub mod canonical;
pub mod encoding;
pub mod engine;
pub mod idgraph;
pub mod materialize;
pub mod strategy;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heap::ObjectId;
use crate::vm::EngineRng;
use encoding::{ByteSink, DecodeError, Reader};

pub use canonical::{diff_serialized, serialize_state, Fragments};
pub use engine::{DeltaEngine, Prepared};
pub use idgraph::{build_id_graph, diff_id_graph, IdGraph};
pub use materialize::{apply_delta, MaterializedState};
pub use strategy::{StrategyChoice, StrategySelector};

/// A root binding: (frame index from the bottom, binding name).
pub type RootKey = (u32, String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Serial,
    IdGraph,
}

impl Strategy {
    fn code(self) -> u8 {
        match self {
            Strategy::Serial => 1,
            Strategy::IdGraph => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(Strategy::Serial),
            2 => Some(Strategy::IdGraph),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Serial => "serial",
            Strategy::IdGraph => "idgraph",
        })
    }
}

/// Storage-stable object ids. Assigned on first encounter, never reused
/// for a different object within a store.
#[derive(Debug, Clone, Default)]
pub struct PidMap {
    map: HashMap<ObjectId, u64>,
    next: u64,
}

impl PidMap {
    pub fn starting_at(next: u64) -> Self {
        PidMap {
            map: HashMap::new(),
            next: next.max(1),
        }
    }

    /// Seeds the map from a restored heap so a resumed session keeps
    /// reporting the same pids for the same objects.
    pub fn seeded(pairs: impl IntoIterator<Item = (ObjectId, u64)>, next: u64) -> Self {
        let map: HashMap<_, _> = pairs.into_iter().collect();
        let max = map.values().copied().max().unwrap_or(0);
        PidMap {
            map,
            next: next.max(max + 1).max(1),
        }
    }

    pub fn pid(&mut self, id: ObjectId) -> u64 {
        if let Some(p) = self.map.get(&id) {
            return *p;
        }
        let p = self.next;
        self.next += 1;
        self.map.insert(id, p);
        p
    }

    pub fn get(&self, id: ObjectId) -> Option<u64> {
        self.map.get(&id).copied()
    }

    pub fn forget(&mut self, id: ObjectId) {
        self.map.remove(&id);
    }

    pub fn retain(&mut self, mut keep: impl FnMut(ObjectId) -> bool) {
        self.map.retain(|id, _| keep(*id));
    }

    /// Next pid that would be assigned.
    pub fn next_pid(&self) -> u64 {
        self.next
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    /// Serial: full closure bytes of one root binding.
    WriteVar { frame: u32, name: String, bytes: Vec<u8> },
    /// IdGraph: shallow encoding of one object, children as pid pointers.
    WriteObj { pid: u64, node: Vec<u8> },
    DeleteVar { frame: u32, name: String },
    DeleteObj { pid: u64 },
    /// IdGraph: root binding to a scalar or a pid pointer.
    BindVar { frame: u32, name: String, value: Vec<u8> },
    RngState { seed: u64, draw_count: u64 },
    /// Frame stack layout: function names, cursors and binding order.
    Cursor { layout: Vec<u8> },
}

const REC_WRITE_VAR: u8 = 0x10;
const REC_WRITE_OBJ: u8 = 0x11;
const REC_DELETE_VAR: u8 = 0x12;
const REC_DELETE_OBJ: u8 = 0x13;
const REC_BIND_VAR: u8 = 0x14;
const REC_RNG: u8 = 0x15;
const REC_CURSOR: u8 = 0x16;

const DELTA_FORMAT: u8 = 1;

impl Record {
    pub fn is_write_or_delete(&self) -> bool {
        !matches!(self, Record::RngState { .. } | Record::Cursor { .. })
    }

    fn encode<S: ByteSink>(&self, out: &mut S) {
        match self {
            Record::WriteVar { frame, name, bytes } => {
                out.put_u8(REC_WRITE_VAR);
                out.put_varint(u64::from(*frame));
                out.put_str(name);
                out.put_bytes(bytes);
            }
            Record::WriteObj { pid, node } => {
                out.put_u8(REC_WRITE_OBJ);
                out.put_varint(*pid);
                out.put_bytes(node);
            }
            Record::DeleteVar { frame, name } => {
                out.put_u8(REC_DELETE_VAR);
                out.put_varint(u64::from(*frame));
                out.put_str(name);
            }
            Record::DeleteObj { pid } => {
                out.put_u8(REC_DELETE_OBJ);
                out.put_varint(*pid);
            }
            Record::BindVar { frame, name, value } => {
                out.put_u8(REC_BIND_VAR);
                out.put_varint(u64::from(*frame));
                out.put_str(name);
                out.put_bytes(value);
            }
            Record::RngState { seed, draw_count } => {
                out.put_u8(REC_RNG);
                out.put(&seed.to_le_bytes());
                out.put_varint(*draw_count);
            }
            Record::Cursor { layout } => {
                out.put_u8(REC_CURSOR);
                out.put_bytes(layout);
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let frame = |r: &mut Reader<'_>| -> Result<u32, DecodeError> {
            u32::try_from(r.varint()?).map_err(|_| r.error("frame index overflow"))
        };
        Ok(match r.u8()? {
            REC_WRITE_VAR => Record::WriteVar {
                frame: frame(r)?,
                name: r.str()?,
                bytes: r.bytes()?.to_vec(),
            },
            REC_WRITE_OBJ => Record::WriteObj {
                pid: r.varint()?,
                node: r.bytes()?.to_vec(),
            },
            REC_DELETE_VAR => Record::DeleteVar {
                frame: frame(r)?,
                name: r.str()?,
            },
            REC_DELETE_OBJ => Record::DeleteObj { pid: r.varint()? },
            REC_BIND_VAR => Record::BindVar {
                frame: frame(r)?,
                name: r.str()?,
                value: r.bytes()?.to_vec(),
            },
            REC_RNG => Record::RngState {
                seed: r.u64_le()?,
                draw_count: r.varint()?,
            },
            REC_CURSOR => Record::Cursor {
                layout: r.bytes()?.to_vec(),
            },
            t => return Err(r.error(format!("unknown record tag {t:#04x}"))),
        })
    }
}

/// The persisted information for one snapshot version. `base_version ==
/// None` marks a self-contained checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSet {
    pub version: u64,
    pub base_version: Option<u64>,
    pub statement_index: u64,
    pub strategy: Strategy,
    pub records: Vec<Record>,
}

impl DeltaSet {
    pub fn is_checkpoint(&self) -> bool {
        self.base_version.is_none()
    }

    pub fn rng(&self) -> Option<EngineRng> {
        self.records.iter().find_map(|r| match r {
            Record::RngState { seed, draw_count } => Some(EngineRng {
                seed: *seed,
                draw_count: *draw_count,
            }),
            _ => None,
        })
    }

    pub fn write_delete_count(&self) -> usize {
        self.records.iter().filter(|r| r.is_write_or_delete()).count()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    pub fn encoded_len(&self) -> u64 {
        let mut c = encoding::ByteCounter::default();
        self.encode_into(&mut c);
        c.0
    }

    fn encode_into<S: ByteSink>(&self, out: &mut S) {
        out.put_u8(DELTA_FORMAT);
        out.put_varint(self.version);
        out.put_varint(self.base_version.map_or(0, |b| b + 1));
        out.put_varint(self.statement_index);
        out.put_u8(self.strategy.code());
        out.put_varint(self.records.len() as u64);
        for r in &self.records {
            r.encode(out);
        }
    }

    pub fn decode(payload: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(payload);
        let header = DeltaHeader::read(&mut r)?;
        let n = r.len(2)?;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            records.push(Record::decode(&mut r)?);
        }
        if !r.is_empty() {
            return Err(r.error("trailing bytes after records"));
        }
        Ok(DeltaSet {
            version: header.version,
            base_version: header.base_version,
            statement_index: header.statement_index,
            strategy: header.strategy,
            records,
        })
    }
}

/// Leading fields of an encoded [`DeltaSet`], readable without decoding
/// the records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeltaHeader {
    pub version: u64,
    pub base_version: Option<u64>,
    pub statement_index: u64,
    pub strategy: Strategy,
}

impl DeltaHeader {
    pub fn parse(payload: &[u8]) -> Result<Self, DecodeError> {
        Self::read(&mut Reader::new(payload))
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let format = r.u8()?;
        if format != DELTA_FORMAT {
            return Err(r.error(format!("unsupported delta format {format}")));
        }
        let version = r.varint()?;
        let base_version = r.varint()?.checked_sub(1);
        let statement_index = r.varint()?;
        let code = r.u8()?;
        let strategy =
            Strategy::from_code(code).ok_or_else(|| r.error(format!("bad strategy {code}")))?;
        Ok(DeltaHeader {
            version,
            base_version,
            statement_index,
            strategy,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeltaError {
    #[error("delta for version {version} expects base {expected:?}, state is at {found:?}")]
    BaseMismatch {
        version: u64,
        expected: Option<u64>,
        found: Option<u64>,
    },
    #[error("delta references unknown pid {0}")]
    UnknownPid(u64),
    #[error("corrupt record: {0}")]
    CorruptRecord(String),
}

impl From<DecodeError> for DeltaError {
    fn from(e: DecodeError) -> Self {
        DeltaError::CorruptRecord(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot serialize object pid {pid}: {reason}")]
pub struct SerializeError {
    pub pid: u64,
    pub reason: String,
}

/// Stops an encoder after a fixed number of objects; used to exercise the
/// capture failsafe from tests and the `--inject-fault` flag.
#[derive(Debug, Clone, Copy, Default)]
pub struct FaultPoint {
    pub fail_after_objects: Option<u64>,
}

impl FaultPoint {
    pub const NONE: FaultPoint = FaultPoint {
        fail_after_objects: None,
    };

    pub(crate) fn check(&self, emitted: &mut u64, pid: u64) -> Result<(), SerializeError> {
        if let Some(limit) = self.fail_after_objects {
            if *emitted >= limit {
                return Err(SerializeError {
                    pid,
                    reason: "injected serializer fault".into(),
                });
            }
        }
        *emitted += 1;
        Ok(())
    }
}
