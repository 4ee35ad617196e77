//! ID-graph strategy: one node per live object with a content fingerprint;
//! new or re-fingerprinted nodes are written as shallow records.

use std::collections::HashMap;

use indexmap::IndexMap;

use super::canonical::{encode_layout, encode_node};
use super::encoding::{put_scalar, scalar_size, varint_len, ByteCounter, ByteSink, TAG_PID};
use super::{DeltaSet, FaultPoint, PidMap, Record, RootKey, SerializeError, Strategy};
use crate::capture::StateView;
use crate::digest::Digest128;
use crate::heap::{node_fingerprint, Heap, ObjectId, ObjectKind, Value};
use crate::vm::EngineRng;

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub fingerprint: Digest128,
    /// Direct references in element / insertion order.
    pub children: Vec<ObjectId>,
    /// Approximate shallow encoded size.
    pub encoded_size: u64,
    /// Index (in root order) of the first root that reaches this node.
    pub owner: u32,
}

#[derive(Debug, Clone, Default)]
pub struct IdGraph {
    pub nodes: HashMap<ObjectId, GraphNode>,
    /// Nodes in first-visit order.
    pub order: Vec<ObjectId>,
    pub roots: IndexMap<RootKey, Value>,
    pub frames: Vec<crate::vm::Frame>,
    pub rng: EngineRng,
    pub statement_index: u64,
}

impl IdGraph {
    pub fn edge_count(&self) -> usize {
        self.nodes.values().map(|n| n.children.len()).sum()
    }

    /// Approximate size of each root's Serial fragment: the sum of shallow
    /// sizes of the nodes it owns plus its own header.
    pub fn owned_sizes(&self) -> Vec<u64> {
        let mut sizes: Vec<u64> = self
            .roots
            .values()
            .map(|v| match v {
                Value::Ref(_) => 0,
                s => scalar_size(s),
            })
            .collect();
        for node in self.nodes.values() {
            sizes[node.owner as usize] += node.encoded_size;
        }
        sizes
    }
}

fn shallow_size(kind: &ObjectKind) -> u64 {
    let header = 1 + 3;
    match kind {
        ObjectKind::List(items) => {
            header + varint_len(items.len() as u64) + items.iter().map(scalar_size).sum::<u64>()
        }
        ObjectKind::Map(entries) => {
            header
                + varint_len(entries.len() as u64)
                + entries
                    .iter()
                    .map(|(k, v)| varint_len(k.len() as u64) + k.len() as u64 + scalar_size(v))
                    .sum::<u64>()
        }
        ObjectKind::Blob(bytes) => header + varint_len(bytes.len() as u64) + bytes.len() as u64,
    }
}

/// Walks every object reachable from the view's roots. Iterative; cycles
/// and shared nodes are visited once.
pub fn build_id_graph(view: &StateView<'_>) -> IdGraph {
    let heap: &Heap = view.heap;
    let mut g = IdGraph {
        frames: view.frames.clone(),
        rng: view.rng,
        statement_index: view.statement_index,
        ..IdGraph::default()
    };
    let mut stack = Vec::new();
    for (fi, frame) in view.frames.iter().enumerate() {
        for (name, v) in &frame.bindings {
            let owner = g.roots.len() as u32;
            g.roots.insert((fi as u32, name.clone()), v.clone());
            let Value::Ref(root) = v else { continue };
            stack.push(*root);
            while let Some(id) = stack.pop() {
                if g.nodes.contains_key(&id) {
                    continue;
                }
                let node = heap.get(id).expect("live heap is closed");
                let children: Vec<ObjectId> = node.kind.child_ids().collect();
                stack.extend(children.iter().rev().filter(|c| !g.nodes.contains_key(c)));
                g.order.push(id);
                g.nodes.insert(
                    id,
                    GraphNode {
                        fingerprint: node_fingerprint(node),
                        children,
                        encoded_size: shallow_size(&node.kind),
                        owner,
                    },
                );
            }
        }
    }
    g
}

fn put_root_value<S: ByteSink>(out: &mut S, v: &Value, pids: &mut PidMap) {
    match v {
        Value::Ref(id) => {
            out.put_u8(TAG_PID);
            out.put_varint(pids.pid(*id));
        }
        s => put_scalar(out, s),
    }
}

/// Result of an ID-graph diff, with the Serial-size estimate Auto needs.
#[derive(Debug, Clone)]
pub struct GraphDiff {
    pub delta: DeltaSet,
    /// Estimated bytes a Serial delta would have written for the same change.
    pub serial_estimate: u64,
}

/// `WriteObj` for new or re-fingerprinted nodes, `DeleteObj` for nodes
/// that left the graph, `BindVar`/`DeleteVar` for root changes. With
/// `prev == None` the result is a self-contained encoding of `cur`.
pub fn diff_id_graph(
    prev: Option<&IdGraph>,
    cur: &IdGraph,
    heap: &Heap,
    pids: &mut PidMap,
    version: u64,
    base_version: Option<u64>,
    fault: FaultPoint,
) -> Result<GraphDiff, SerializeError> {
    let mut records = Vec::new();
    let mut dirty_roots = vec![false; cur.roots.len()];
    let mut emitted = 0u64;
    for id in &cur.order {
        let node = &cur.nodes[id];
        let changed = prev
            .and_then(|p| p.nodes.get(id))
            .is_none_or(|old| old.fingerprint != node.fingerprint);
        if !changed {
            continue;
        }
        let pid = pids.pid(*id);
        fault.check(&mut emitted, pid)?;
        let kind = &heap.get(*id).map_err(|e| SerializeError {
            pid,
            reason: e.to_string(),
        })?.kind;
        let mut bytes = Vec::with_capacity(node.encoded_size as usize);
        encode_node(&mut bytes, pid, kind, &mut |c| pids.pid(c));
        records.push(Record::WriteObj { pid, node: bytes });
        dirty_roots[node.owner as usize] = true;
    }
    if let Some(prev) = prev {
        let mut gone: Vec<ObjectId> = prev
            .nodes
            .keys()
            .filter(|id| !cur.nodes.contains_key(id))
            .copied()
            .collect();
        gone.sort();
        for id in gone {
            if let Some(pid) = pids.get(id) {
                records.push(Record::DeleteObj { pid });
            }
        }
    }
    for (i, ((frame, name), v)) in cur.roots.iter().enumerate() {
        let same = prev
            .and_then(|p| p.roots.get(&(*frame, name.clone())))
            .is_some_and(|old| old == v);
        if !same {
            let mut value = Vec::new();
            put_root_value(&mut value, v, pids);
            records.push(Record::BindVar {
                frame: *frame,
                name: name.clone(),
                value,
            });
            dirty_roots[i] = true;
        }
    }
    if let Some(prev) = prev {
        for (frame, name) in prev.roots.keys() {
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
        layout: encode_layout(&cur.frames, pids.next_pid()),
    });
    let sizes = cur.owned_sizes();
    let serial_estimate = dirty_roots
        .iter()
        .zip(&sizes)
        .filter(|(d, _)| **d)
        .map(|(_, s)| *s + 8)
        .sum();
    Ok(GraphDiff {
        delta: DeltaSet {
            version,
            base_version,
            statement_index: cur.statement_index,
            strategy: Strategy::IdGraph,
            records,
        },
        serial_estimate,
    })
}

/// Bytes an ID-graph delta would take, without encoding node payloads.
/// Used by Auto while running in Serial mode.
pub fn estimate_id_graph_bytes(prev: Option<&IdGraph>, cur: &IdGraph) -> u64 {
    let mut c = ByteCounter::default();
    for id in &cur.order {
        let node = &cur.nodes[id];
        let changed = prev
            .and_then(|p| p.nodes.get(id))
            .is_none_or(|old| old.fingerprint != node.fingerprint);
        if changed {
            c.0 += node.encoded_size + 4;
        }
    }
    if let Some(prev) = prev {
        c.0 += 4 * prev.nodes.keys().filter(|id| !cur.nodes.contains_key(id)).count() as u64;
        for (k, v) in &cur.roots {
            if prev.roots.get(k) != Some(v) {
                c.0 += 8 + k.1.len() as u64;
            }
        }
    }
    c.0
}
