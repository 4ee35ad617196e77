//! Canonical value encoding and the per-variable (Serial) strategy.
//!
//! An object is written inline the first time an encoding pass reaches it
//! and as a pid pointer afterwards, so sharing and cycles survive a round
//! trip. The same walker produces full-state fingerprints (labels assigned
//! in first-visit order) and Serial fragments (labels are pids).

use std::collections::hash_map::Entry;
use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;

use super::encoding::{put_cursor, put_scalar, ByteSink, TAG_BLOB, TAG_LIST, TAG_MAP, TAG_PID};
use super::{DeltaSet, FaultPoint, PidMap, Record, RootKey, SerializeError, Strategy};
use crate::capture::StateView;
use crate::heap::{Heap, ObjectId, ObjectKind, Value};
use crate::vm::{EngineRng, Frame};

pub(crate) enum Visit {
    Inline(u64),
    Pointer(u64),
}

enum Work<'a> {
    Val(&'a Value),
    Key(&'a str),
}

/// Pre-order encoding of `root`'s closure. `visit` decides per reference
/// whether the object is emitted inline (first encounter) or as a pointer.
pub(crate) fn encode_value<'a, S, F>(
    sink: &mut S,
    heap: &'a Heap,
    root: &'a Value,
    visit: &mut F,
) -> Result<(), SerializeError>
where
    S: ByteSink + ?Sized,
    F: FnMut(ObjectId) -> Result<Visit, SerializeError>,
{
    let mut stack = vec![Work::Val(root)];
    while let Some(work) = stack.pop() {
        let v = match work {
            Work::Key(k) => {
                sink.put_str(k);
                continue;
            }
            Work::Val(v) => v,
        };
        let id = match v {
            Value::Ref(id) => *id,
            scalar => {
                put_scalar(sink, scalar);
                continue;
            }
        };
        let label = match visit(id)? {
            Visit::Pointer(label) => {
                sink.put_u8(TAG_PID);
                sink.put_varint(label);
                continue;
            }
            Visit::Inline(label) => label,
        };
        let node = heap.get(id).map_err(|e| SerializeError {
            pid: label,
            reason: e.to_string(),
        })?;
        match &node.kind {
            ObjectKind::List(items) => {
                sink.put_u8(TAG_LIST);
                sink.put_varint(label);
                sink.put_varint(items.len() as u64);
                stack.extend(items.iter().rev().map(Work::Val));
            }
            ObjectKind::Map(entries) => {
                sink.put_u8(TAG_MAP);
                sink.put_varint(label);
                sink.put_varint(entries.len() as u64);
                for (k, v) in entries.iter().rev() {
                    stack.push(Work::Val(v));
                    stack.push(Work::Key(k));
                }
            }
            ObjectKind::Blob(bytes) => {
                sink.put_u8(TAG_BLOB);
                sink.put_varint(label);
                sink.put_bytes(bytes);
            }
        }
    }
    Ok(())
}

/// Shallow encoding of one object: the inline form with every child
/// written as a pointer.
pub(crate) fn encode_node<S: ByteSink + ?Sized>(
    sink: &mut S,
    pid: u64,
    kind: &ObjectKind,
    pid_of: &mut dyn FnMut(ObjectId) -> u64,
) {
    let mut child = |sink: &mut S, v: &Value| match v {
        Value::Ref(id) => {
            sink.put_u8(TAG_PID);
            sink.put_varint(pid_of(*id));
        }
        scalar => put_scalar(sink, scalar),
    };
    match kind {
        ObjectKind::List(items) => {
            sink.put_u8(TAG_LIST);
            sink.put_varint(pid);
            sink.put_varint(items.len() as u64);
            for v in items {
                child(sink, v);
            }
        }
        ObjectKind::Map(entries) => {
            sink.put_u8(TAG_MAP);
            sink.put_varint(pid);
            sink.put_varint(entries.len() as u64);
            for (k, v) in entries {
                sink.put_str(k);
                child(sink, v);
            }
        }
        ObjectKind::Blob(bytes) => {
            sink.put_u8(TAG_BLOB);
            sink.put_varint(pid);
            sink.put_bytes(bytes);
        }
    }
}

/// Frame stack shape: pid high-water mark, then per frame the function
/// name, cursor and binding names in order.
pub(crate) fn encode_layout(frames: &[Frame], next_pid: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.put_varint(next_pid);
    out.put_varint(frames.len() as u64);
    for f in frames {
        out.put_str(&f.function);
        put_cursor(&mut out, &f.cursor);
        out.put_varint(f.bindings.len() as u64);
        for name in f.bindings.keys() {
            out.put_str(name);
        }
    }
    out
}

/// Streams the canonical full-state encoding into `sink`. Objects are
/// relabeled in first-visit order, so two states with the same observable
/// content and sharing produce the same bytes regardless of `ObjectId`s.
/// Mutation counters and allocation stamps are not observable and are
/// excluded.
pub fn write_state<S: ByteSink + ?Sized>(
    sink: &mut S,
    frames: &[Frame],
    heap: &Heap,
    rng: EngineRng,
    statement_index: u64,
) {
    sink.put_varint(statement_index);
    sink.put(&rng.seed.to_le_bytes());
    sink.put_varint(rng.draw_count);
    sink.put_varint(frames.len() as u64);
    let mut labels: HashMap<ObjectId, u64> = HashMap::new();
    let mut visit = |id: ObjectId| {
        let next = labels.len() as u64 + 1;
        Ok(match labels.entry(id) {
            Entry::Occupied(e) => Visit::Pointer(*e.get()),
            Entry::Vacant(e) => Visit::Inline(*e.insert(next)),
        })
    };
    for f in frames {
        sink.put_str(&f.function);
        put_cursor(sink, &f.cursor);
        sink.put_varint(f.bindings.len() as u64);
        for (name, v) in &f.bindings {
            sink.put_str(name);
            // Every id reachable from a live binding is in the heap.
            encode_value(sink, heap, v, &mut visit).expect("live heap is closed");
        }
    }
}

/// Per-root byte arrays of one state, plus the non-heap parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Fragments {
    pub roots: IndexMap<RootKey, Vec<u8>>,
    pub layout: Vec<u8>,
    pub rng: EngineRng,
    pub statement_index: u64,
}

impl Fragments {
    pub fn total_bytes(&self) -> u64 {
        self.roots.values().map(|b| b.len() as u64).sum()
    }
}

/// Encodes each root binding's closure into its own fragment. Roots are
/// visited bottom frame first, then in binding insertion order; an object
/// reached by an earlier root appears in later fragments as a pointer.
pub fn serialize_state(
    view: &StateView<'_>,
    pids: &mut PidMap,
    fault: FaultPoint,
) -> Result<Fragments, SerializeError> {
    let mut seen: HashSet<ObjectId> = HashSet::new();
    let mut emitted = 0u64;
    let mut roots = IndexMap::new();
    for (fi, frame) in view.frames.iter().enumerate() {
        for (name, v) in &frame.bindings {
            let mut bytes = Vec::new();
            let mut visit = |id: ObjectId| {
                let pid = pids.pid(id);
                if !seen.insert(id) {
                    return Ok(Visit::Pointer(pid));
                }
                fault.check(&mut emitted, pid)?;
                Ok(Visit::Inline(pid))
            };
            encode_value(&mut bytes, view.heap, v, &mut visit)?;
            roots.insert((fi as u32, name.clone()), bytes);
        }
    }
    Ok(Fragments {
        roots,
        layout: encode_layout(&view.frames, pids.next_pid()),
        rng: view.rng,
        statement_index: view.statement_index,
    })
}

/// Serial delta: `WriteVar` for new or byte-unequal fragments, `DeleteVar`
/// for roots that disappeared. With `prev == None` every root is written.
pub fn diff_serialized(
    prev: Option<&IndexMap<RootKey, Vec<u8>>>,
    cur: &Fragments,
    version: u64,
    base_version: Option<u64>,
) -> DeltaSet {
    let mut records = Vec::new();
    for ((frame, name), bytes) in &cur.roots {
        let unchanged = prev
            .and_then(|p| p.get(&(*frame, name.clone())))
            .is_some_and(|old| old == bytes);
        if !unchanged {
            records.push(Record::WriteVar {
                frame: *frame,
                name: name.clone(),
                bytes: bytes.clone(),
            });
        }
    }
    if let Some(prev) = prev {
        for (frame, name) in prev.keys() {
            if !cur.roots.contains_key(&(*frame, name.clone())) {
                records.push(Record::DeleteVar {
                    frame: *frame,
                    name: name.clone(),
                });
            }
        }
    }
    records.push(Record::RngState {
        seed: cur.rng.seed,
        draw_count: cur.rng.draw_count,
    });
    records.push(Record::Cursor {
        layout: cur.layout.clone(),
    });
    DeltaSet {
        version,
        base_version,
        statement_index: cur.statement_index,
        strategy: Strategy::Serial,
        records,
    }
}
