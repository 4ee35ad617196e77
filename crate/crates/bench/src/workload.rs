//! DartScript generators for the benchmark workloads.
//!
//! Every workload is a setup phase followed by a main loop. Snapshots are
//! taken once after setup and once per loop iteration, at statement indices
//! computed from the generated shape.

use serde::Serialize;

/// Largest single blob a workload allocates.
pub const CHUNK: u64 = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Workload {
    /// Large static dataset plus a small model rewritten every iteration.
    StaticPlusModel {
        dataset_bytes: u64,
        model_bytes: u64,
        iters: u64,
    },
    /// Items moved around a list by random swaps; no item content changes.
    Shuffle {
        items: u64,
        item_bytes: u64,
        iters: u64,
    },
    /// A fraction `p` of the objects is replaced per iteration.
    Volatility {
        objects: u64,
        object_bytes: u64,
        p: f64,
        iters: u64,
    },
    /// Every model layer is rewritten each iteration.
    DeepUpdate { model_bytes: u64, iters: u64 },
}

/// Generated program and where its iteration boundaries fall.
#[derive(Debug, Clone)]
pub struct Plan {
    pub source: String,
    /// Statement index at the end of setup.
    pub setup_statements: u64,
    pub statements_per_iter: u64,
    pub iters: u64,
}

impl Plan {
    /// Statement indices after setup and after each iteration.
    pub fn marks(&self) -> Vec<u64> {
        // The loop statement itself executes once, before the first body.
        let start = self.setup_statements + 1;
        std::iter::once(self.setup_statements)
            .chain((1..=self.iters).map(|j| start + j * self.statements_per_iter))
            .collect()
    }

    pub fn total_statements(&self) -> u64 {
        self.setup_statements + 1 + self.iters * self.statements_per_iter
    }
}

/// Splits `bytes` into `(count, chunk_len)` with chunks of at most [`CHUNK`].
fn chunks(bytes: u64) -> (u64, u64) {
    let n = bytes.div_ceil(CHUNK).max(1);
    (n, (bytes / n).max(1))
}

impl Workload {
    pub fn name(&self) -> &'static str {
        match self {
            Workload::StaticPlusModel { .. } => "static_plus_model",
            Workload::Shuffle { .. } => "shuffle",
            Workload::Volatility { .. } => "volatility",
            Workload::DeepUpdate { .. } => "deep_update",
        }
    }

    pub fn iters(&self) -> u64 {
        match *self {
            Workload::StaticPlusModel { iters, .. }
            | Workload::Shuffle { iters, .. }
            | Workload::Volatility { iters, .. }
            | Workload::DeepUpdate { iters, .. } => iters,
        }
    }

    /// Desk-scale defaults used by the overhead comparison.
    pub fn defaults() -> [Workload; 4] {
        [
            Workload::StaticPlusModel {
                dataset_bytes: 16 << 20,
                model_bytes: 256 << 10,
                iters: 20,
            },
            Workload::Shuffle {
                items: 512,
                item_bytes: 8 << 10,
                iters: 20,
            },
            Workload::Volatility {
                objects: 256,
                object_bytes: 16 << 10,
                p: 0.25,
                iters: 20,
            },
            Workload::DeepUpdate {
                model_bytes: 4 << 20,
                iters: 20,
            },
        ]
    }

    pub fn plan(&self) -> Plan {
        match *self {
            Workload::StaticPlusModel {
                dataset_bytes,
                model_bytes,
                iters,
            } => {
                let (nd, cd) = chunks(dataset_bytes);
                let (nm, cm) = chunks(model_bytes);
                let source = format!(
                    "let data = []
repeat {nd} {{ push data blob({cd}, rand(1000000)) }}
let model = []
repeat {nm} {{ push model blob({cm}, 0) }}
let it = 0
repeat {iters} {{
  let j = 0
  repeat {nm} {{
    set model[j] = blob({cm}, it * {nm} + j + 1)
    let j = j + 1
  }}
  let it = it + 1
}}
"
                );
                Plan {
                    source,
                    setup_statements: 5 + nd + nm,
                    statements_per_iter: 3 + 2 * nm,
                    iters,
                }
            }
            Workload::Shuffle {
                items,
                item_bytes,
                iters,
            } => {
                let items = items.max(2);
                let swaps = (items / 16).max(1);
                let source = format!(
                    "let items = []
repeat {items} {{ push items blob({item_bytes}, rand(1000000)) }}
let model = {{\"items\": items, \"epoch\": 0}}
repeat {iters} {{
  repeat {swaps} {{
    let a = rand({items})
    let b = rand({items})
    let t = items[a]
    set items[a] = items[b]
    set items[b] = t
  }}
  set model[\"epoch\"] = model[\"epoch\"] + 1
}}
"
                );
                Plan {
                    source,
                    setup_statements: 3 + items,
                    statements_per_iter: 2 + 5 * swaps,
                    iters,
                }
            }
            Workload::Volatility {
                objects,
                object_bytes,
                p,
                iters,
            } => {
                let n = objects.max(1);
                let m = (p.clamp(0.0, 1.0) * n as f64).round() as u64;
                let body = if m == 0 {
                    "  let c = c\n".to_string()
                } else {
                    format!(
                        "  repeat {m} {{
    set xs[c] = blob({object_bytes}, rand(1000000))
    let c = (c + 1) % {n}
  }}
"
                    )
                };
                let source = format!(
                    "let xs = []
repeat {n} {{ push xs blob({object_bytes}, rand(1000000)) }}
let c = 0
repeat {iters} {{
{body}}}
"
                );
                Plan {
                    source,
                    setup_statements: 3 + n,
                    statements_per_iter: if m == 0 { 1 } else { 1 + 2 * m },
                    iters,
                }
            }
            Workload::DeepUpdate { model_bytes, iters } => {
                // Training data of the same size stays resident.
                let (nd, cd) = chunks(model_bytes);
                let (nl, cl) = chunks(model_bytes);
                let source = format!(
                    "let data = []
repeat {nd} {{ push data blob({cd}, rand(1000000)) }}
let layers = []
repeat {nl} {{ push layers blob({cl}, 0) }}
let model = {{\"layers\": layers, \"step\": 0}}
repeat {iters} {{
  let j = 0
  repeat {nl} {{
    set layers[j] = blob({cl}, rand(1000000))
    let j = j + 1
  }}
  set model[\"step\"] = model[\"step\"] + 1
}}
"
                );
                Plan {
                    source,
                    setup_statements: 5 + nd + nl,
                    statements_per_iter: 3 + 2 * nl,
                    iters,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dart_core::vm::{HookAction, NoHook};
    use dart_core::{parse, Vm};
    use std::sync::Arc;

    fn small() -> Vec<Workload> {
        vec![
            Workload::StaticPlusModel {
                dataset_bytes: 200_000,
                model_bytes: 70_000,
                iters: 4,
            },
            Workload::Shuffle {
                items: 40,
                item_bytes: 16,
                iters: 3,
            },
            Workload::Volatility {
                objects: 10,
                object_bytes: 8,
                p: 0.3,
                iters: 5,
            },
            Workload::Volatility {
                objects: 10,
                object_bytes: 8,
                p: 0.0,
                iters: 5,
            },
            Workload::DeepUpdate {
                model_bytes: 150_000,
                iters: 2,
            },
        ]
    }

    #[test]
    fn marks_fall_on_iteration_boundaries() {
        for w in small() {
            let plan = w.plan();
            let program = Arc::new(parse(&plan.source).unwrap());
            let mut vm = Vm::new(program, 1);
            vm.run(&mut NoHook).unwrap();
            assert_eq!(vm.statement_index(), plan.total_statements(), "{w:?}");
            let marks = plan.marks();
            assert_eq!(marks.len() as u64, w.iters() + 1);
            assert_eq!(*marks.last().unwrap(), plan.total_statements());
        }
    }

    #[test]
    fn setup_mark_precedes_the_loop() {
        let plan = small()[0].plan();
        let mut vm = Vm::new(Arc::new(parse(&plan.source).unwrap()), 1);
        let mut at_setup = None;
        vm.run(&mut |vm: &Vm| {
            if vm.statement_index() == plan.setup_statements {
                at_setup = vm.global("it").cloned();
            }
            HookAction::Continue
        })
        .unwrap();
        assert_eq!(at_setup, Some(dart_core::Value::Int(0)));
    }

    #[test]
    fn sizes_follow_parameters() {
        assert_eq!(chunks(64 << 20), (1024, CHUNK));
        assert_eq!(chunks(1 << 20), (16, CHUNK));
        assert_eq!(chunks(100), (1, 100));
    }
}
