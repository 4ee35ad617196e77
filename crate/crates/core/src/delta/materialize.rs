//! Rebuilding states from delta chains. Restored objects keep their pid
//! as `ObjectId`, so the pid map of a resumed session is the identity.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use indexmap::IndexMap;

use super::encoding::{
    read_cursor, DecodeError, Reader, TAG_BLOB, TAG_BOOL, TAG_FLOAT, TAG_INT, TAG_LIST, TAG_MAP,
    TAG_PID, TAG_STR,
};
use super::{DeltaError, DeltaSet, PidMap, Record, RootKey};
use crate::digest::{Digest128, Hasher128};
use crate::heap::{Heap, ObjectId, ObjectKind, ObjectNode, Value};
use crate::vm::{Cursor, EngineRng, Frame, Program, RestoreError, Vm};

#[derive(Debug, Clone, PartialEq)]
pub struct FrameLayout {
    pub function: String,
    pub cursor: Cursor,
    pub names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub next_pid: u64,
    pub frames: Vec<FrameLayout>,
}

pub fn decode_layout(bytes: &[u8]) -> Result<Layout, DecodeError> {
    let mut r = Reader::new(bytes);
    let next_pid = r.varint()?;
    let n = r.len(3)?;
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let function = r.str()?;
        let cursor = read_cursor(&mut r)?;
        let k = r.len(1)?;
        let mut names = Vec::with_capacity(k);
        for _ in 0..k {
            names.push(r.str()?);
        }
        frames.push(FrameLayout {
            function,
            cursor,
            names,
        });
    }
    if !r.is_empty() {
        return Err(r.error("trailing bytes in layout"));
    }
    Ok(Layout { next_pid, frames })
}

enum Partial {
    List {
        pid: u64,
        items: Vec<Value>,
        want: usize,
    },
    Map {
        pid: u64,
        entries: IndexMap<String, Value>,
        want: usize,
        key: Option<String>,
    },
}

impl Partial {
    fn push(&mut self, v: Value, r: &Reader<'_>) -> Result<(), DecodeError> {
        match self {
            Partial::List { items, .. } => items.push(v),
            Partial::Map { entries, key, .. } => {
                let k = key.take().expect("key read before value");
                if entries.insert(k, v).is_some() {
                    return Err(r.error("duplicate map key"));
                }
            }
        }
        Ok(())
    }

    fn done(&self) -> bool {
        match self {
            Partial::List { items, want, .. } => items.len() == *want,
            Partial::Map { entries, want, .. } => entries.len() == *want,
        }
    }

    fn finish(self) -> (u64, ObjectKind) {
        match self {
            Partial::List { pid, items, .. } => (pid, ObjectKind::List(items)),
            Partial::Map { pid, entries, .. } => (pid, ObjectKind::Map(entries)),
        }
    }
}

/// Decodes one value encoding. Inline objects are appended to `out` as
/// `(pid, kind)` with children as `Value::Ref(ObjectId(pid))`. With
/// `shallow`, nested inline objects are rejected.
pub fn decode_value(
    bytes: &[u8],
    shallow: bool,
    out: &mut Vec<(u64, ObjectKind)>,
) -> Result<Value, DecodeError> {
    let mut r = Reader::new(bytes);
    let mut stack: Vec<Partial> = Vec::new();
    let mut inline_seen: HashSet<u64> = HashSet::new();
    loop {
        if let Some(Partial::Map { key, .. }) = stack.last_mut() {
            *key = Some(r.str()?);
        }
        let tag = r.u8()?;
        let mut value = match tag {
            TAG_INT => Value::Int(r.zigzag()?),
            TAG_FLOAT => Value::Float(f64::from_bits(r.u64_le()?)),
            TAG_BOOL => match r.u8()? {
                0 => Value::Bool(false),
                1 => Value::Bool(true),
                b => return Err(r.error(format!("bad bool byte {b}"))),
            },
            TAG_STR => Value::Str(r.str()?),
            TAG_PID => Value::Ref(ObjectId(r.varint()?)),
            TAG_LIST | TAG_MAP | TAG_BLOB => {
                if shallow && !stack.is_empty() {
                    return Err(r.error("nested object in shallow node"));
                }
                let pid = r.varint()?;
                if pid == 0 || !inline_seen.insert(pid) {
                    return Err(r.error(format!("invalid or repeated inline pid {pid}")));
                }
                let partial = match tag {
                    TAG_BLOB => {
                        out.push((pid, ObjectKind::Blob(r.bytes()?.to_vec())));
                        None
                    }
                    TAG_LIST => {
                        let want = r.len(2)?;
                        Some(Partial::List {
                            pid,
                            items: Vec::with_capacity(want),
                            want,
                        })
                    }
                    _ => {
                        let want = r.len(3)?;
                        Some(Partial::Map {
                            pid,
                            entries: IndexMap::with_capacity(want),
                            want,
                            key: None,
                        })
                    }
                };
                match partial {
                    Some(p) if !p.done() => {
                        stack.push(p);
                        continue;
                    }
                    Some(p) => out.push(p.finish()),
                    None => {}
                }
                Value::Ref(ObjectId(pid))
            }
            t => return Err(r.error(format!("unknown value tag {t:#04x}"))),
        };
        // Deliver upward, closing every container the value completes.
        loop {
            let Some(top) = stack.last_mut() else {
                if !r.is_empty() {
                    return Err(r.error("trailing bytes after value"));
                }
                return Ok(value);
            };
            top.push(value, &r)?;
            if !top.done() {
                break;
            }
            let (pid, kind) = stack.pop().unwrap().finish();
            out.push((pid, kind));
            value = Value::Ref(ObjectId(pid));
        }
    }
}

/// A state rebuilt from persisted records. Object ids equal pids.
#[derive(Debug, Clone)]
pub struct MaterializedState {
    pub version: Option<u64>,
    pub statement_index: u64,
    pub heap: Heap,
    pub frames: Vec<Frame>,
    pub rng: EngineRng,
    pub next_pid: u64,
}

impl Default for MaterializedState {
    fn default() -> Self {
        MaterializedState {
            version: None,
            statement_index: 0,
            heap: Heap::new(),
            frames: Vec::new(),
            rng: EngineRng::new(0),
            next_pid: 1,
        }
    }
}

impl MaterializedState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Same digest as [`Vm::fingerprint`] of the state this was captured from.
    pub fn fingerprint(&self) -> Digest128 {
        let mut h = Hasher128::new();
        super::canonical::write_state(
            &mut h,
            &self.frames,
            &self.heap,
            self.rng,
            self.statement_index,
        );
        h.finish()
    }

    pub fn roots(&self) -> IndexMap<RootKey, Value> {
        let mut out = IndexMap::new();
        for (i, f) in self.frames.iter().enumerate() {
            for (name, v) in &f.bindings {
                out.insert((i as u32, name.clone()), v.clone());
            }
        }
        out
    }

    pub fn apply(&mut self, delta: &DeltaSet) -> Result<(), DeltaError> {
        apply_delta(self, delta)
    }

    /// Paused VM at this state plus the pid map a capture session resuming
    /// from it should start with.
    pub fn to_vm(&self, program: Arc<Program>) -> Result<(Vm, PidMap), RestoreError> {
        let vm = Vm::from_parts(
            program,
            self.heap.clone(),
            self.frames.clone(),
            self.rng,
            self.statement_index,
        )?;
        let pids = PidMap::seeded(self.heap.iter().map(|(id, _)| (id, id.0)), self.next_pid);
        Ok((vm, pids))
    }
}

fn corrupt(msg: impl Into<String>) -> DeltaError {
    DeltaError::CorruptRecord(msg.into())
}

/// Applies `delta` to `state`. On any error `state` is left untouched.
pub fn apply_delta(state: &mut MaterializedState, delta: &DeltaSet) -> Result<(), DeltaError> {
    let fresh = delta.base_version.is_none();
    if !fresh && delta.base_version != state.version {
        return Err(DeltaError::BaseMismatch {
            version: delta.version,
            expected: delta.base_version,
            found: state.version,
        });
    }
    let mut roots = if fresh { IndexMap::new() } else { state.roots() };
    let mut written: HashMap<u64, ObjectKind> = HashMap::new();
    let mut deleted: HashSet<u64> = HashSet::new();
    let mut rng = None;
    let mut layout = None;
    let mut scratch = Vec::new();

    for rec in &delta.records {
        match rec {
            Record::WriteVar { frame, name, bytes } => {
                scratch.clear();
                let v = decode_value(bytes, false, &mut scratch)?;
                for (pid, kind) in scratch.drain(..) {
                    written.insert(pid, kind);
                }
                roots.insert((*frame, name.clone()), v);
            }
            Record::WriteObj { pid, node } => {
                scratch.clear();
                let v = decode_value(node, true, &mut scratch)?;
                match (v, scratch.pop()) {
                    (Value::Ref(ObjectId(p)), Some((q, kind))) if p == *pid && q == *pid => {
                        written.insert(*pid, kind);
                    }
                    _ => return Err(corrupt(format!("object record for pid {pid} is malformed"))),
                }
            }
            Record::DeleteVar { frame, name } => {
                if roots.shift_remove(&(*frame, name.clone())).is_none() {
                    return Err(corrupt(format!("delete of unbound root {name} in frame {frame}")));
                }
            }
            Record::DeleteObj { pid } => {
                if fresh || !state.heap.contains(ObjectId(*pid)) {
                    return Err(DeltaError::UnknownPid(*pid));
                }
                deleted.insert(*pid);
            }
            Record::BindVar { frame, name, value } => {
                scratch.clear();
                let v = decode_value(value, true, &mut scratch)?;
                if !scratch.is_empty() {
                    return Err(corrupt("binding record carries an inline object"));
                }
                roots.insert((*frame, name.clone()), v);
            }
            Record::RngState { seed, draw_count } => {
                rng = Some(EngineRng {
                    seed: *seed,
                    draw_count: *draw_count,
                });
            }
            Record::Cursor { layout: bytes } => layout = Some(decode_layout(bytes)?),
        }
    }
    let rng = rng.ok_or_else(|| corrupt("missing rng record"))?;
    let layout = layout.ok_or_else(|| corrupt("missing cursor record"))?;

    let mut frames = Vec::with_capacity(layout.frames.len());
    let mut bound = 0;
    for (i, fl) in layout.frames.iter().enumerate() {
        let mut bindings = IndexMap::with_capacity(fl.names.len());
        for name in &fl.names {
            let v = roots
                .get(&(i as u32, name.clone()))
                .ok_or_else(|| corrupt(format!("layout names unbound root {name}")))?;
            bindings.insert(name.clone(), v.clone());
            bound += 1;
        }
        frames.push(Frame {
            function: fl.function.clone(),
            bindings,
            cursor: fl.cursor.clone(),
        });
    }
    if bound != roots.len() {
        return Err(corrupt("roots not covered by layout"));
    }

    // Reachability over the overlay; every pointer must resolve.
    let base = if fresh { None } else { Some(&state.heap) };
    let lookup = |pid: u64| -> Option<&ObjectKind> {
        if let Some(k) = written.get(&pid) {
            return Some(k);
        }
        if deleted.contains(&pid) {
            return None;
        }
        base.and_then(|h| h.get(ObjectId(pid)).ok()).map(|n| &n.kind)
    };
    let mut live: HashSet<u64> = HashSet::new();
    let mut stack: Vec<u64> = frames
        .iter()
        .flat_map(|f| f.bindings.values())
        .filter_map(|v| v.as_ref_id().map(|id| id.0))
        .collect();
    while let Some(pid) = stack.pop() {
        if !live.insert(pid) {
            continue;
        }
        let kind = lookup(pid).ok_or(DeltaError::UnknownPid(pid))?;
        stack.extend(kind.child_ids().map(|c| c.0).filter(|c| !live.contains(c)));
    }

    // Commit.
    let mut heap = if fresh {
        Heap::new()
    } else {
        std::mem::take(&mut state.heap)
    };
    let stale: Vec<ObjectId> = heap
        .iter()
        .map(|(id, _)| id)
        .filter(|id| !live.contains(&id.0) || written.contains_key(&id.0))
        .collect();
    for id in stale {
        heap.remove_restored(id);
    }
    let mut new_ids: Vec<u64> = written.keys().copied().filter(|p| live.contains(p)).collect();
    new_ids.sort_unstable();
    for pid in new_ids {
        let kind = written.remove(&pid).unwrap();
        heap.insert_restored(
            ObjectId(pid),
            ObjectNode {
                kind,
                mutation_counter: 0,
                created_at: 0,
            },
        );
    }
    let max_pid = heap.iter().map(|(id, _)| id.0).max().unwrap_or(0);
    state.heap = heap;
    state.frames = frames;
    state.rng = rng;
    state.version = Some(delta.version);
    state.statement_index = delta.statement_index;
    state.next_pid = layout.next_pid.max(max_pid + 1);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::collect_frames;
    use crate::delta::canonical::{diff_serialized, serialize_state};
    use crate::delta::idgraph::{build_id_graph, diff_id_graph};
    use crate::delta::FaultPoint;
    use crate::heap::Mutation;
    use crate::vm::{parse, NoHook};

    fn program(src: &str) -> Arc<Program> {
        Arc::new(parse(src).unwrap())
    }

    #[test]
    fn decode_nested_and_empty() {
        let mut out = Vec::new();
        // [ [], {"k": 1}, blob ]
        let bytes = [
            TAG_LIST, 1, 3, TAG_LIST, 2, 0, TAG_MAP, 3, 1, 1, b'k', TAG_INT, 2, TAG_BLOB, 4, 2,
            9, 9,
        ];
        let v = decode_value(&bytes, false, &mut out).unwrap();
        assert_eq!(v, Value::Ref(ObjectId(1)));
        assert_eq!(out.len(), 4);
        assert_eq!(
            out.iter().find(|(p, _)| *p == 1).unwrap().1,
            ObjectKind::List(vec![
                Value::Ref(ObjectId(2)),
                Value::Ref(ObjectId(3)),
                Value::Ref(ObjectId(4))
            ])
        );
        assert!(decode_value(&bytes, true, &mut Vec::new()).is_err());
        assert!(decode_value(&bytes[..bytes.len() - 1], false, &mut Vec::new()).is_err());
    }

    #[test]
    fn checkpoint_round_trip_both_strategies() {
        let src = "let a = [1]\nlet c = {\"x\": blob(8, 2)}\nlet o1 = [a, c]\nlet o2 = [c, 2.5, \"s\"]\npush a o1";
        let mut vm = Vm::new(program(src), 3);
        vm.run(&mut NoHook).unwrap();
        let view = collect_frames(&vm);
        let mut pids = PidMap::starting_at(1);
        let serial = diff_serialized(None, &serialize_state(&view, &mut pids, FaultPoint::NONE).unwrap(), 1, None);
        let g = build_id_graph(&view);
        let idg = diff_id_graph(None, &g, vm.heap(), &mut pids, 1, None, FaultPoint::NONE)
            .unwrap()
            .delta;
        for d in [serial, idg] {
            let decoded = DeltaSet::decode(&d.encode()).unwrap();
            let mut m = MaterializedState::new();
            m.apply(&decoded).unwrap();
            assert_eq!(m.fingerprint(), vm.fingerprint());
            let (restored, _) = m.to_vm(vm.program().clone()).unwrap();
            assert_eq!(restored.fingerprint(), vm.fingerprint());
        }
    }

    #[test]
    fn base_mismatch_leaves_state_untouched() {
        let mut vm = Vm::new(program("let x = [1]"), 1);
        vm.run(&mut NoHook).unwrap();
        let mut pids = PidMap::starting_at(1);
        let f = serialize_state(&collect_frames(&vm), &mut pids, FaultPoint::NONE).unwrap();
        let mut m = MaterializedState::new();
        m.apply(&diff_serialized(None, &f, 1, None)).unwrap();
        let before = m.fingerprint();
        let err = m.apply(&diff_serialized(Some(&f.roots), &f, 3, Some(2))).unwrap_err();
        assert!(matches!(err, DeltaError::BaseMismatch { .. }));
        assert_eq!(m.fingerprint(), before);
        assert_eq!(m.version, Some(1));
    }

    #[test]
    fn unknown_pid_is_rejected_atomically() {
        let mut vm = Vm::new(program("let x = [1]"), 1);
        vm.run(&mut NoHook).unwrap();
        let mut pids = PidMap::starting_at(1);
        let f = serialize_state(&collect_frames(&vm), &mut pids, FaultPoint::NONE).unwrap();
        let mut m = MaterializedState::new();
        m.apply(&diff_serialized(None, &f, 1, None)).unwrap();
        let mut d = diff_serialized(Some(&f.roots), &f, 2, Some(1));
        d.records.insert(
            0,
            Record::BindVar {
                frame: 0,
                name: "x".into(),
                value: vec![TAG_PID, 99],
            },
        );
        assert_eq!(m.apply(&d).unwrap_err(), DeltaError::UnknownPid(99));
        assert_eq!(m.version, Some(1));
    }

    #[test]
    fn restored_sharing_is_preserved() {
        let src = "let a = [1]\nlet b = [2]\nlet c = [3]\nlet o1 = [a, c]\nlet o2 = [b, c]\ndel a\ndel b\ndel c";
        let mut vm = Vm::new(program(src), 1);
        vm.run(&mut NoHook).unwrap();
        let mut pids = PidMap::starting_at(1);
        let f = serialize_state(&collect_frames(&vm), &mut pids, FaultPoint::NONE).unwrap();
        let mut m = MaterializedState::new();
        m.apply(&diff_serialized(None, &f, 1, None)).unwrap();
        assert_eq!(m.heap.len(), 5);
        let (restored, _) = m.to_vm(vm.program().clone()).unwrap();
        let child = |vm: &Vm, root: &str| match &vm.heap().get(vm.global(root).unwrap().as_ref_id().unwrap()).unwrap().kind {
            ObjectKind::List(items) => items[1].as_ref_id().unwrap(),
            _ => unreachable!(),
        };
        let c = child(&restored, "o1");
        assert_eq!(c, child(&restored, "o2"));
        let mut heap = restored.heap().clone();
        heap.mutate(c, Mutation::Push(Value::Int(4))).unwrap();
        assert_eq!(heap.get(child(&restored, "o2")).unwrap().kind.len(), 2);
    }
}
