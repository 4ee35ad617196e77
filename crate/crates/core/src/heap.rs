//! The application object graph: engine-assigned identities, shared
//! references and per-node mutation counters.
//!
//! Scalars live inline in [`Value`]; only lists, maps and blobs are heap
//! objects. Every successful in-place mutation bumps the node's
//! `mutation_counter` by exactly one, which is the dirty signal the ID-graph
//! delta strategy relies on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use indexmap::IndexMap;
use thiserror::Error;

use crate::digest::{Digest128, Hasher128};

/// Engine-assigned object identity. Strictly increasing, never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectId(pub u64);

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone)]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
    Ref(ObjectId),
}

impl Value {
    pub fn as_ref_id(&self) -> Option<ObjectId> {
        match self {
            Value::Ref(id) => Some(*id),
            _ => None,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Int(_) => "int",
            Value::Float(_) => "float",
            Value::Bool(_) => "bool",
            Value::Str(_) => "str",
            Value::Ref(_) => "ref",
        }
    }
}

/// Floats compare by bit pattern so that NaN payloads and signed zeros are
/// treated as distinct observable states.
impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Float(a), Value::Float(b)) => a.to_bits() == b.to_bits(),
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::Str(a), Value::Str(b)) => a == b,
            (Value::Ref(a), Value::Ref(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Value {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ObjectKind {
    List(Vec<Value>),
    Map(IndexMap<String, Value>),
    Blob(Vec<u8>),
}

impl ObjectKind {
    pub fn tag(&self) -> KindTag {
        match self {
            ObjectKind::List(_) => KindTag::List,
            ObjectKind::Map(_) => KindTag::Map,
            ObjectKind::Blob(_) => KindTag::Blob,
        }
    }

    /// Direct references held by this node, in element / insertion order.
    pub fn child_ids(&self) -> impl Iterator<Item = ObjectId> + '_ {
        let values: Box<dyn Iterator<Item = &Value>> = match self {
            ObjectKind::List(items) => Box::new(items.iter()),
            ObjectKind::Map(entries) => Box::new(entries.values()),
            ObjectKind::Blob(_) => Box::new(std::iter::empty()),
        };
        values.filter_map(Value::as_ref_id)
    }

    pub fn len(&self) -> usize {
        match self {
            ObjectKind::List(items) => items.len(),
            ObjectKind::Map(entries) => entries.len(),
            ObjectKind::Blob(bytes) => bytes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KindTag {
    List,
    Map,
    Blob,
}

impl KindTag {
    pub fn name(self) -> &'static str {
        match self {
            KindTag::List => "list",
            KindTag::Map => "map",
            KindTag::Blob => "blob",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectNode {
    pub kind: ObjectKind,
    pub mutation_counter: u64,
    /// Statement index at which the node was allocated.
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mutation {
    ElementWrite { index: usize, value: Value },
    Push(Value),
    KeySet { key: String, value: Value },
    KeyDelete { key: String },
    BlobWrite { offset: usize, bytes: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HeapError {
    #[error("unknown object {0}")]
    UnknownObject(ObjectId),
    #[error("{op} is not supported on a {kind} object")]
    KindMismatch { op: &'static str, kind: &'static str },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("key {0:?} not present")]
    MissingKey(String),
    #[error("reference to unknown object {0}")]
    DanglingRef(ObjectId),
}

/// Inverse operation recorded while a statement transaction is open.
#[derive(Debug)]
enum Undo {
    Alloc(ObjectId),
    ElementWrite { id: ObjectId, index: usize, old: Value },
    Push(ObjectId),
    KeyInserted { id: ObjectId, key: String },
    KeyOverwritten { id: ObjectId, key: String, old: Value },
    KeyDeleted { id: ObjectId, index: usize, key: String, old: Value },
    BlobWrite { id: ObjectId, offset: usize, old: Vec<u8> },
}

#[derive(Debug, Default)]
pub struct Heap {
    objects: BTreeMap<ObjectId, ObjectNode>,
    next_id: u64,
    journal: Option<Vec<Undo>>,
}

impl Clone for Heap {
    fn clone(&self) -> Self {
        Heap {
            objects: self.objects.clone(),
            next_id: self.next_id,
            journal: None,
        }
    }
}

impl PartialEq for Heap {
    fn eq(&self, other: &Self) -> bool {
        self.objects == other.objects
    }
}

impl Heap {
    pub fn new() -> Self {
        Heap {
            objects: BTreeMap::new(),
            next_id: 1,
            journal: None,
        }
    }

    /// Id that the next allocation will receive.
    pub fn next_id(&self) -> ObjectId {
        ObjectId(self.next_id.max(1))
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn get(&self, id: ObjectId) -> Result<&ObjectNode, HeapError> {
        self.objects.get(&id).ok_or(HeapError::UnknownObject(id))
    }

    pub fn contains(&self, id: ObjectId) -> bool {
        self.objects.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ObjectId, &ObjectNode)> {
        self.objects.iter().map(|(id, node)| (*id, node))
    }

    fn check_value(&self, value: &Value) -> Result<(), HeapError> {
        match value {
            Value::Ref(id) if !self.objects.contains_key(id) => Err(HeapError::DanglingRef(*id)),
            _ => Ok(()),
        }
    }

    fn record(&mut self, undo: Undo) {
        if let Some(journal) = self.journal.as_mut() {
            journal.push(undo);
        }
    }

    /// Allocates a new node with `mutation_counter == 0`.
    pub fn alloc(&mut self, kind: ObjectKind, created_at: u64) -> Result<ObjectId, HeapError> {
        let children: Vec<ObjectId> = kind.child_ids().collect();
        for child in children {
            if !self.objects.contains_key(&child) {
                return Err(HeapError::DanglingRef(child));
            }
        }
        let id = self.next_id();
        self.next_id = id.0 + 1;
        self.objects.insert(
            id,
            ObjectNode {
                kind,
                mutation_counter: 0,
                created_at,
            },
        );
        self.record(Undo::Alloc(id));
        Ok(id)
    }

    /// Inserts a node under a caller-chosen id. Used when rebuilding a heap
    /// from persisted state; `next_id` is advanced past `id`.
    pub(crate) fn insert_restored(&mut self, id: ObjectId, node: ObjectNode) {
        self.next_id = self.next_id.max(id.0 + 1);
        self.objects.insert(id, node);
    }

    pub(crate) fn remove_restored(&mut self, id: ObjectId) {
        self.objects.remove(&id);
    }

    /// Applies one in-place mutation. On error the node is untouched and its
    /// counter is not incremented.
    pub fn mutate(&mut self, id: ObjectId, mutation: Mutation) -> Result<(), HeapError> {
        match &mutation {
            Mutation::ElementWrite { value, .. }
            | Mutation::Push(value)
            | Mutation::KeySet { value, .. } => self.check_value(value)?,
            _ => {}
        }
        let node = self
            .objects
            .get_mut(&id)
            .ok_or(HeapError::UnknownObject(id))?;
        let kind_name = node.kind.tag().name();
        let undo = match (&mut node.kind, mutation) {
            (ObjectKind::List(items), Mutation::ElementWrite { index, value }) => {
                let len = items.len();
                let slot = items
                    .get_mut(index)
                    .ok_or(HeapError::IndexOutOfRange { index, len })?;
                let old = std::mem::replace(slot, value);
                Undo::ElementWrite { id, index, old }
            }
            (ObjectKind::List(items), Mutation::Push(value)) => {
                items.push(value);
                Undo::Push(id)
            }
            (ObjectKind::Map(entries), Mutation::KeySet { key, value }) => {
                match entries.get_mut(&key) {
                    Some(slot) => {
                        let old = std::mem::replace(slot, value);
                        Undo::KeyOverwritten { id, key, old }
                    }
                    None => {
                        entries.insert(key.clone(), value);
                        Undo::KeyInserted { id, key }
                    }
                }
            }
            (ObjectKind::Map(entries), Mutation::KeyDelete { key }) => {
                let (index, key, old) = entries
                    .shift_remove_full(&key)
                    .ok_or_else(|| HeapError::MissingKey(key.clone()))?;
                Undo::KeyDeleted { id, index, key, old }
            }
            (ObjectKind::Blob(bytes), Mutation::BlobWrite { offset, bytes: new }) => {
                let len = bytes.len();
                let end = offset
                    .checked_add(new.len())
                    .filter(|end| *end <= len)
                    .ok_or(HeapError::IndexOutOfRange { index: offset + new.len().saturating_sub(1), len })?;
                let old = bytes[offset..end].to_vec();
                bytes[offset..end].copy_from_slice(&new);
                Undo::BlobWrite { id, offset, old }
            }
            (_, m) => {
                return Err(HeapError::KindMismatch {
                    op: mutation_name(&m),
                    kind: kind_name,
                })
            }
        };
        node.mutation_counter += 1;
        self.record(undo);
        Ok(())
    }

    /// Starts journaling so that [`Heap::rollback`] can restore the exact
    /// pre-transaction heap.
    pub fn begin(&mut self) {
        self.journal = Some(Vec::new());
    }

    pub fn commit(&mut self) {
        self.journal = None;
    }

    pub fn rollback(&mut self) {
        let Some(journal) = self.journal.take() else {
            return;
        };
        for undo in journal.into_iter().rev() {
            match undo {
                Undo::Alloc(id) => {
                    self.objects.remove(&id);
                }
                Undo::ElementWrite { id, index, old } => {
                    let node = self.objects.get_mut(&id).expect("journaled object");
                    if let ObjectKind::List(items) = &mut node.kind {
                        items[index] = old;
                    }
                    node.mutation_counter -= 1;
                }
                Undo::Push(id) => {
                    let node = self.objects.get_mut(&id).expect("journaled object");
                    if let ObjectKind::List(items) = &mut node.kind {
                        items.pop();
                    }
                    node.mutation_counter -= 1;
                }
                Undo::KeyInserted { id, key } => {
                    let node = self.objects.get_mut(&id).expect("journaled object");
                    if let ObjectKind::Map(entries) = &mut node.kind {
                        entries.shift_remove(&key);
                    }
                    node.mutation_counter -= 1;
                }
                Undo::KeyOverwritten { id, key, old } => {
                    let node = self.objects.get_mut(&id).expect("journaled object");
                    if let ObjectKind::Map(entries) = &mut node.kind {
                        entries.insert(key, old);
                    }
                    node.mutation_counter -= 1;
                }
                Undo::KeyDeleted { id, index, key, old } => {
                    let node = self.objects.get_mut(&id).expect("journaled object");
                    if let ObjectKind::Map(entries) = &mut node.kind {
                        entries.shift_insert(index, key, old);
                    }
                    node.mutation_counter -= 1;
                }
                Undo::BlobWrite { id, offset, old } => {
                    let node = self.objects.get_mut(&id).expect("journaled object");
                    if let ObjectKind::Blob(bytes) = &mut node.kind {
                        bytes[offset..offset + old.len()].copy_from_slice(&old);
                    }
                    node.mutation_counter -= 1;
                }
            }
        }
    }

    /// Transitive closure over references from `roots`, roots included.
    /// Iterative, so arbitrarily deep or cyclic graphs terminate.
    pub fn reachable(&self, roots: impl IntoIterator<Item = ObjectId>) -> BTreeSet<ObjectId> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<ObjectId> = roots.into_iter().collect();
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                continue;
            }
            if let Some(node) = self.objects.get(&id) {
                stack.extend(node.kind.child_ids().filter(|c| !seen.contains(c)));
            }
        }
        seen
    }

    /// Content digest over (kind tag, mutation counter, ordered child ids,
    /// blob length). Object identity itself is not hashed.
    pub fn fingerprint(&self, id: ObjectId) -> Result<Digest128, HeapError> {
        let node = self.get(id)?;
        Ok(node_fingerprint(node))
    }
}

pub(crate) fn node_fingerprint(node: &ObjectNode) -> Digest128 {
    let mut h = Hasher128::new();
    h.update(&[match node.kind.tag() {
        KindTag::List => 5,
        KindTag::Map => 6,
        KindTag::Blob => 7,
    }]);
    h.update(&node.mutation_counter.to_le_bytes());
    match &node.kind {
        ObjectKind::Blob(bytes) => h.update(&(bytes.len() as u64).to_le_bytes()),
        kind => {
            h.update(&(kind.len() as u64).to_le_bytes());
            for child in kind.child_ids() {
                h.update(&child.0.to_le_bytes());
            }
        }
    }
    h.finish()
}

fn mutation_name(m: &Mutation) -> &'static str {
    match m {
        Mutation::ElementWrite { .. } => "element write",
        Mutation::Push(_) => "push",
        Mutation::KeySet { .. } => "key set",
        Mutation::KeyDelete { .. } => "key delete",
        Mutation::BlobWrite { .. } => "blob write",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(heap: &mut Heap, items: Vec<Value>) -> ObjectId {
        heap.alloc(ObjectKind::List(items), 0).unwrap()
    }

    #[test]
    fn alloc_ids_start_at_one_and_increase() {
        let mut heap = Heap::new();
        let a = list(&mut heap, vec![]);
        let b = list(&mut heap, vec![]);
        assert_eq!(a, ObjectId(1));
        assert_eq!(b, ObjectId(2));
        let blob = heap.alloc(ObjectKind::Blob(vec![0; 16]), 0).unwrap();
        assert_eq!(heap.get(blob).unwrap().mutation_counter, 0);
    }

    #[test]
    fn mutation_counts() {
        let mut heap = Heap::new();
        let xs = list(&mut heap, vec![]);
        heap.mutate(xs, Mutation::Push(Value::Int(5))).unwrap();
        let node = heap.get(xs).unwrap();
        assert_eq!(node.kind, ObjectKind::List(vec![Value::Int(5)]));
        assert_eq!(node.mutation_counter, 1);

        let m = heap.alloc(ObjectKind::Map(IndexMap::new()), 0).unwrap();
        for v in [1, 2] {
            heap.mutate(m, Mutation::KeySet { key: "a".into(), value: Value::Int(v) })
                .unwrap();
        }
        let node = heap.get(m).unwrap();
        assert_eq!(node.mutation_counter, 2);
        match &node.kind {
            ObjectKind::Map(e) => assert_eq!(e.get("a"), Some(&Value::Int(2))),
            _ => unreachable!(),
        }
    }

    #[test]
    fn failed_mutation_does_not_dirty() {
        let mut heap = Heap::new();
        let xs = list(&mut heap, vec![Value::Int(0), Value::Int(1)]);
        let err = heap
            .mutate(xs, Mutation::ElementWrite { index: 3, value: Value::Int(9) })
            .unwrap_err();
        assert_eq!(err, HeapError::IndexOutOfRange { index: 3, len: 2 });
        assert_eq!(heap.get(xs).unwrap().mutation_counter, 0);

        let m = heap.alloc(ObjectKind::Map(IndexMap::new()), 0).unwrap();
        assert!(matches!(
            heap.mutate(m, Mutation::Push(Value::Int(1))),
            Err(HeapError::KindMismatch { .. })
        ));
        assert!(matches!(
            heap.mutate(ObjectId(99), Mutation::Push(Value::Int(1))),
            Err(HeapError::UnknownObject(ObjectId(99)))
        ));
        assert!(matches!(
            heap.mutate(xs, Mutation::Push(Value::Ref(ObjectId(99)))),
            Err(HeapError::DanglingRef(_))
        ));
        assert_eq!(heap.get(m).unwrap().mutation_counter, 0);
    }

    #[test]
    fn reachable_shared_and_cyclic() {
        let mut heap = Heap::new();
        let c = heap.alloc(ObjectKind::Blob(vec![1, 2, 3]), 0).unwrap();
        let o = list(&mut heap, vec![Value::Ref(c)]);
        assert_eq!(heap.reachable([o]), BTreeSet::from([o, c]));

        let a = list(&mut heap, vec![]);
        let b = list(&mut heap, vec![]);
        let o1 = list(&mut heap, vec![Value::Ref(a), Value::Ref(c)]);
        let o2 = list(&mut heap, vec![Value::Ref(b), Value::Ref(c)]);
        assert_eq!(heap.reachable([o1, o2]), BTreeSet::from([o1, o2, a, b, c]));

        let x = list(&mut heap, vec![]);
        let y = list(&mut heap, vec![Value::Ref(x)]);
        heap.mutate(x, Mutation::Push(Value::Ref(y))).unwrap();
        assert_eq!(heap.reachable([x]), BTreeSet::from([x, y]));
    }

    #[test]
    fn fingerprint_tracks_counter_not_identity() {
        let mut heap = Heap::new();
        let a = list(&mut heap, vec![]);
        let b = list(&mut heap, vec![]);
        let fa = heap.fingerprint(a).unwrap();
        assert_eq!(fa, heap.fingerprint(a).unwrap());
        assert_eq!(fa, heap.fingerprint(b).unwrap());
        heap.mutate(a, Mutation::Push(Value::Int(1))).unwrap();
        assert_ne!(fa, heap.fingerprint(a).unwrap());
        assert!(heap.fingerprint(ObjectId(77)).is_err());
    }

    #[test]
    fn rollback_restores_exact_heap() {
        let mut heap = Heap::new();
        let m = heap.alloc(ObjectKind::Map(IndexMap::new()), 0).unwrap();
        for k in ["a", "b", "c"] {
            heap.mutate(m, Mutation::KeySet { key: k.into(), value: Value::Int(1) })
                .unwrap();
        }
        let blob = heap.alloc(ObjectKind::Blob(vec![0; 8]), 0).unwrap();
        let before = heap.clone();

        heap.begin();
        heap.mutate(m, Mutation::KeyDelete { key: "a".into() }).unwrap();
        heap.mutate(m, Mutation::KeySet { key: "b".into(), value: Value::Int(7) })
            .unwrap();
        heap.mutate(m, Mutation::KeySet { key: "z".into(), value: Value::Int(7) })
            .unwrap();
        heap.mutate(blob, Mutation::BlobWrite { offset: 2, bytes: vec![9, 9] })
            .unwrap();
        let fresh = list(&mut heap, vec![]);
        heap.mutate(fresh, Mutation::Push(Value::Int(1))).unwrap();
        heap.rollback();

        assert_eq!(heap, before);
        let ObjectKind::Map(entries) = &heap.get(m).unwrap().kind else {
            unreachable!()
        };
        assert_eq!(entries.keys().collect::<Vec<_>>(), ["a", "b", "c"]);
    }
}
