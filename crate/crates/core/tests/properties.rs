//! Whole-pipeline properties over generated programs: capture, persist,
//! materialize, resume, replay and corruption detection.

use std::collections::BTreeMap;
use std::fs;
use std::sync::Arc;

use dart_core::capture::{CaptureConfig, FaultPlan, Trigger};
use dart_core::recovery::{materialize, replay_to_statement, resume_detached, run_captured, RunOptions};
use dart_core::store::{FsyncPolicy, RecordKind, StoreOptions, StoreReader, SEGMENT_DIR};
use dart_core::vm::NoHook;
use dart_core::{parse, Digest128, RecoveryError, StoreError, StrategyChoice, Vm};
use proptest::prelude::*;

const LISTS: usize = 3;

#[derive(Debug, Clone)]
enum Op {
    Push(usize, Val),
    Set(usize, Val),
    SetKey(u8, Val),
    DelKey(u8),
    Alias(usize, usize),
    Nest(usize, usize),
    Repeat(u8, Vec<Op>),
}

#[derive(Debug, Clone)]
enum Val {
    Int(i32),
    Str(u8),
    Float(i16),
    Blob(u16),
    Rand,
    List(usize),
    Map,
}

fn val() -> impl Strategy<Value = Val> {
    prop_oneof![
        any::<i32>().prop_map(Val::Int),
        (0u8..8).prop_map(Val::Str),
        any::<i16>().prop_map(Val::Float),
        (0u16..2048).prop_map(Val::Blob),
        Just(Val::Rand),
        (0..LISTS).prop_map(Val::List),
        Just(Val::Map),
    ]
}

fn leaf_op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => ((0..LISTS), val()).prop_map(|(l, v)| Op::Push(l, v)),
        3 => ((0..LISTS), val()).prop_map(|(l, v)| Op::Set(l, v)),
        2 => ((0u8..4), val()).prop_map(|(k, v)| Op::SetKey(k, v)),
        1 => (0u8..4).prop_map(Op::DelKey),
        1 => ((0..LISTS), (0..LISTS)).prop_map(|(a, b)| Op::Alias(a, b)),
        1 => ((0..LISTS), (0..LISTS)).prop_map(|(a, b)| Op::Nest(a, b)),
    ]
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        8 => leaf_op(),
        1 => ((1u8..4), prop::collection::vec(leaf_op(), 1..4)).prop_map(|(n, b)| Op::Repeat(n, b)),
    ]
}

fn render_val(v: &Val) -> String {
    match v {
        Val::Int(i) => i.to_string(),
        Val::Str(s) => format!("\"s{s}\""),
        Val::Float(f) => format!("{:.2}", *f as f64 / 7.0),
        Val::Blob(n) => format!("blob({n}, rand(100))"),
        Val::Rand => "rand()".into(),
        Val::List(l) => format!("l{l}"),
        Val::Map => "m".into(),
    }
}

fn render(ops: &[Op], depth: usize, out: &mut String) {
    let pad = "  ".repeat(depth);
    for op in ops {
        let line = match op {
            Op::Push(l, v) => format!("push l{l} {}", render_val(v)),
            Op::Set(l, v) => format!("set l{l}[rand(len(l{l}))] = {}", render_val(v)),
            Op::SetKey(k, v) => format!("set m[\"k{k}\"] = {}", render_val(v)),
            // Keys are kept present by re-setting before deleting.
            Op::DelKey(k) => format!("set m[\"k{k}\"] = 0\n{pad}del m[\"k{k}\"]"),
            Op::Alias(a, b) => format!("let l{a} = l{b}"),
            Op::Nest(a, b) => format!("push l{a} [l{b}, m]"),
            Op::Repeat(n, body) => {
                out.push_str(&format!("{pad}repeat {n} {{\n"));
                render(body, depth + 1, out);
                "}".to_string()
            }
        };
        out.push_str(&pad);
        out.push_str(&line);
        out.push('\n');
    }
}

fn program(ops: &[Op]) -> String {
    let mut out = String::new();
    for l in 0..LISTS {
        out.push_str(&format!("let l{l} = [{l}]\n"));
    }
    out.push_str("let m = {\"k0\": 0}\n");
    render(ops, 0, &mut out);
    out
}

fn strategy() -> impl Strategy<Value = StrategyChoice> {
    prop_oneof![
        Just(StrategyChoice::Serial),
        Just(StrategyChoice::IdGraph),
        Just(StrategyChoice::Auto)
    ]
}

fn options(seed: u64, k: u64, strategy: StrategyChoice, faults: FaultPlan) -> RunOptions {
    RunOptions {
        seed,
        capture: CaptureConfig {
            trigger: Trigger::EveryStatements(k),
            strategy,
            checkpoint_every: 6,
            queue_depth: 0,
            faults,
            record_fingerprints: true,
            ..CaptureConfig::default()
        },
        store: StoreOptions {
            fsync: FsyncPolicy::Batch(1024),
            segment_limit: 8192,
        },
        kill_after_statement: None,
    }
}

fn live(source: &str, seed: u64) -> Vm {
    let mut vm = Vm::new(Arc::new(parse(source).unwrap()), seed);
    vm.run(&mut NoHook).unwrap();
    vm
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_version_materializes_to_its_live_state(
        ops in prop::collection::vec(op(), 1..30),
        seed in any::<u64>(),
        k in 1u64..6,
        strategy in strategy(),
    ) {
        let src = program(&ops);
        let dir = tempfile::tempdir().unwrap();
        let r = run_captured(dir.path(), &src, &options(seed, k, strategy, FaultPlan::default())).unwrap();
        prop_assert!(r.outcome.is_ok());
        prop_assert!(!r.fingerprints.is_empty());
        let expected = live(&src, seed).fingerprint();
        prop_assert_eq!(r.vm.fingerprint(), expected);
        let reader = StoreReader::open(dir.path()).unwrap();
        for (v, fp) in &r.fingerprints {
            prop_assert_eq!(materialize(&reader, *v).unwrap().fingerprint(), *fp);
            // Running on from any version reaches the same final state.
            prop_assert_eq!(resume_detached(&reader, *v, &src).unwrap().fingerprint(), expected);
        }
    }

    #[test]
    fn chains_only_reference_persisted_versions(
        ops in prop::collection::vec(op(), 1..30),
        seed in any::<u64>(),
        p in 0.0f64..0.6,
        strategy in strategy(),
    ) {
        let src = program(&ops);
        let dir = tempfile::tempdir().unwrap();
        let faults = FaultPlan { serialize: p, store: p / 2.0, seed };
        let r = run_captured(dir.path(), &src, &options(seed, 2, strategy, faults)).unwrap();
        prop_assert_eq!(r.vm.fingerprint(), live(&src, seed).fingerprint());
        let Ok(reader) = StoreReader::open(dir.path()) else {
            // Every checkpoint attempt failed.
            prop_assert!(r.fingerprints.is_empty());
            return Ok(());
        };
        let versions = reader.versions();
        for e in reader.manifest().snapshot_entries() {
            if let Some(b) = e.base_version {
                prop_assert!(versions.contains(&b), "base {} of {} missing", b, e.version);
                prop_assert!(b < e.version);
            }
        }
        for (v, fp) in &r.fingerprints {
            prop_assert_eq!(materialize(&reader, *v).unwrap().fingerprint(), *fp);
        }
    }

    #[test]
    fn replay_matches_direct_execution(
        ops in prop::collection::vec(op(), 1..20),
        seed in any::<u64>(),
        k in 1u64..8,
        frac in 0.0f64..1.0,
    ) {
        let src = program(&ops);
        let dir = tempfile::tempdir().unwrap();
        run_captured(dir.path(), &src, &options(seed, k, StrategyChoice::IdGraph, FaultPlan::default())).unwrap();
        let total = live(&src, seed).statement_index();
        let target = (total as f64 * frac) as u64;
        let mut direct = Vm::new(Arc::new(parse(&src).unwrap()), seed);
        while direct.statement_index() < target {
            direct.step().unwrap();
        }
        let reader = StoreReader::open(dir.path()).unwrap();
        let replayed = replay_to_statement(&reader, &src, target).unwrap();
        prop_assert_eq!(replayed.statement_index(), target);
        prop_assert_eq!(replayed.fingerprint(), direct.fingerprint());
    }

    #[test]
    fn flipped_bytes_are_detected_or_harmless(
        ops in prop::collection::vec(op(), 5..30),
        seed in any::<u64>(),
        pick in any::<prop::sample::Index>(),
        bit in 0u8..8,
    ) {
        let src = program(&ops);
        let dir = tempfile::tempdir().unwrap();
        let r = run_captured(dir.path(), &src, &options(seed, 3, StrategyChoice::Auto, FaultPlan::default())).unwrap();
        let clean = StoreReader::open(dir.path()).unwrap();
        let snapshots: Vec<_> = clean.manifest().snapshot_entries().cloned().collect();
        let victim = &clean.manifest().entries[pick.index(clean.manifest().entries.len())];
        let path = dir.path().join(SEGMENT_DIR).join(format!("{:04}.dlog", victim.segment));
        let mut bytes = fs::read(&path).unwrap();
        let at = (victim.offset + pick.index(victim.byte_size as usize) as u64) as usize;
        bytes[at] ^= 1 << bit;
        fs::write(&path, bytes).unwrap();

        let damaged = StoreReader::open(dir.path()).unwrap();
        let recorded: BTreeMap<u64, Digest128> = r.fingerprints.clone();
        for e in &snapshots {
            let on_chain = victim.kind != RecordKind::ProgramSource
                && clean.chain_entries(e.version).unwrap().iter().any(|c| c.version == victim.version);
            match materialize(&damaged, e.version) {
                Ok(m) => {
                    prop_assert!(!on_chain, "version {} decoded through a damaged record", e.version);
                    prop_assert_eq!(Some(m.fingerprint()), recorded.get(&e.version).copied());
                }
                Err(RecoveryError::Store(StoreError::CorruptRecord { version, .. })) => {
                    prop_assert!(on_chain);
                    prop_assert_eq!(version, victim.version);
                }
                Err(other) => prop_assert!(false, "unexpected error {other}"),
            }
        }
    }
}
