//! Per-session delta state: pid map, the baseline of the last persisted
//! snapshot, and the strategy selector.

use indexmap::IndexMap;

use super::canonical::{diff_serialized, serialize_state};
use super::idgraph::{build_id_graph, diff_id_graph, estimate_id_graph_bytes, IdGraph};
use super::strategy::{StrategyChoice, StrategySelector};
use super::{DeltaHeader, FaultPoint, PidMap, RootKey, SerializeError, Strategy};
use crate::capture::StateView;

#[derive(Debug, Clone)]
struct Baseline {
    version: u64,
    roots: Vec<RootKey>,
    fragments: Option<IndexMap<RootKey, Vec<u8>>>,
    graph: Option<IdGraph>,
}

/// A fully encoded snapshot ready to hand to the store. Holds no
/// references into the live heap.
#[derive(Debug)]
pub struct Prepared {
    pub header: DeltaHeader,
    pub payload: Vec<u8>,
    /// Bytes of the delta under the ID-graph strategy (measured or estimated).
    pub idgraph_bytes: u64,
    /// Bytes of the delta under the Serial strategy (measured or estimated).
    pub serial_bytes: u64,
    baseline: Baseline,
}

impl Prepared {
    pub fn is_checkpoint(&self) -> bool {
        self.header.base_version.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct DeltaEngine {
    pids: PidMap,
    selector: StrategySelector,
    base: Option<Baseline>,
}

impl DeltaEngine {
    pub fn new(choice: StrategyChoice) -> Self {
        Self::with_pids(choice, PidMap::starting_at(1))
    }

    pub fn with_pids(choice: StrategyChoice, pids: PidMap) -> Self {
        DeltaEngine {
            pids,
            selector: StrategySelector::new(choice),
            base: None,
        }
    }

    pub fn pids(&self) -> &PidMap {
        &self.pids
    }

    pub fn selector(&self) -> &StrategySelector {
        &self.selector
    }

    pub fn strategy(&self) -> Strategy {
        self.selector.current()
    }

    /// Version the next delta would be based on.
    pub fn base_version(&self) -> Option<u64> {
        self.base.as_ref().map(|b| b.version)
    }

    /// Drops the baseline so the next snapshot is a full checkpoint.
    pub fn reset_base(&mut self) {
        self.base = None;
    }

    /// Adopts `view` as the persisted state of `version` without producing
    /// a record (a resumed session starts from its restored version).
    pub fn adopt_base(&mut self, view: &StateView<'_>, version: u64) -> Result<(), SerializeError> {
        let strategy = self.selector.current();
        let auto = self.selector.choice() == StrategyChoice::Auto;
        let fragments = if strategy == Strategy::Serial {
            Some(serialize_state(view, &mut self.pids, FaultPoint::NONE)?.roots)
        } else {
            None
        };
        let graph = (strategy == Strategy::IdGraph || auto).then(|| build_id_graph(view));
        self.base = Some(Baseline {
            version,
            roots: root_keys(view),
            fragments,
            graph,
        });
        Ok(())
    }

    /// Computes the snapshot of `view` as `version`: a delta against the
    /// last committed baseline, or a checkpoint when `force_full` is set or
    /// no baseline exists. Nothing changes until [`DeltaEngine::commit`].
    pub fn prepare(
        &mut self,
        view: &StateView<'_>,
        version: u64,
        force_full: bool,
        fault: FaultPoint,
    ) -> Result<Prepared, SerializeError> {
        let strategy = self.selector.current();
        let auto = self.selector.choice() == StrategyChoice::Auto;
        let base = if force_full { None } else { self.base.as_ref() };
        // A delta needs the baseline structure of the strategy in use.
        let base = base.filter(|b| match strategy {
            Strategy::Serial => b.fragments.is_some() || b.graph.is_some(),
            Strategy::IdGraph => b.graph.is_some(),
        });
        let base_version = base.map(|b| b.version);

        let (delta, fragments, graph, idgraph_bytes, serial_bytes) = match strategy {
            Strategy::Serial => {
                let frags = serialize_state(view, &mut self.pids, fault)?;
                let synthesized;
                let prev = match base {
                    None => None,
                    Some(b) => match &b.fragments {
                        Some(f) => Some(f),
                        None => {
                            // Coming from ID-graph mode: rewrite every root.
                            synthesized = b.roots.iter().map(|k| (k.clone(), Vec::new())).collect();
                            Some(&synthesized)
                        }
                    },
                };
                let delta = diff_serialized(prev, &frags, version, base_version);
                let graph = auto.then(|| build_id_graph(view));
                let id_est = match &graph {
                    Some(g) => estimate_id_graph_bytes(base.and_then(|b| b.graph.as_ref()), g),
                    None => 0,
                };
                (delta, Some(frags.roots), graph, id_est, 0)
            }
            Strategy::IdGraph => {
                let g = build_id_graph(view);
                let d = diff_id_graph(
                    base.and_then(|b| b.graph.as_ref()),
                    &g,
                    view.heap,
                    &mut self.pids,
                    version,
                    base_version,
                    fault,
                )?;
                (d.delta, None, Some(g), 0, d.serial_estimate)
            }
        };
        let payload = delta.encode();
        let (idgraph_bytes, serial_bytes) = match strategy {
            Strategy::Serial => (idgraph_bytes, payload.len() as u64),
            Strategy::IdGraph => (payload.len() as u64, serial_bytes),
        };
        Ok(Prepared {
            header: DeltaHeader {
                version,
                base_version,
                statement_index: delta.statement_index,
                strategy,
            },
            payload,
            idgraph_bytes,
            serial_bytes,
            baseline: Baseline {
                version,
                roots: root_keys(view),
                fragments,
                graph,
            },
        })
    }

    /// Makes a prepared snapshot the new baseline. Call only once the
    /// snapshot is accepted for persistence.
    pub fn commit(&mut self, prepared: Prepared) {
        if !prepared.is_checkpoint() {
            self.selector
                .record(prepared.idgraph_bytes, prepared.serial_bytes);
        }
        self.base = Some(prepared.baseline);
    }
}

fn root_keys(view: &StateView<'_>) -> Vec<RootKey> {
    view.frames
        .iter()
        .enumerate()
        .flat_map(|(i, f)| f.bindings.keys().map(move |k| (i as u32, k.clone())))
        .collect()
}
