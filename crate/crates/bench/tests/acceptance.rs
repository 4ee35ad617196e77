//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. `ACCEPTANCE_ONLY=3,8` runs a subset.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use dart_bench::{measure_storage, random_program, run_bench, sweep_volatility, BenchConfig, Workload};
use dart_core::capture::{
    simulate_capture_fraction, AdaptiveController, CaptureConfig, FaultPlan, Trigger, K_MAX, K_MIN,
};
use dart_core::recovery::{globals_json, materialize, resume, run_captured, RunOptions};
use dart_core::store::{import_pack, FsyncPolicy, RecordKind, StoreOptions, StoreReader};
use dart_core::vm::NoHook;
use dart_core::{parse, Digest128, StoreError, StrategyChoice, Value, Vm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn fast_store() -> StoreOptions {
    StoreOptions {
        fsync: FsyncPolicy::Batch(64),
        ..StoreOptions::default()
    }
}

fn options(seed: u64, k: u64, strategy: StrategyChoice, queue_depth: usize) -> RunOptions {
    RunOptions {
        seed,
        capture: CaptureConfig {
            trigger: Trigger::EveryStatements(k),
            strategy,
            queue_depth,
            record_fingerprints: true,
            ..CaptureConfig::default()
        },
        store: fast_store(),
        kill_after_statement: None,
    }
}

fn uninterrupted(source: &str, seed: u64) -> Vm {
    let mut vm = Vm::new(Arc::new(parse(source).unwrap()), seed);
    vm.set_logging(false);
    vm.run(&mut NoHook).unwrap();
    vm
}

/// Every recorded version restores to its live fingerprint.
fn check_versions(dir: &Path, recorded: &BTreeMap<u64, Digest128>) -> Result<usize, String> {
    if recorded.is_empty() {
        return Ok(0);
    }
    let reader = StoreReader::open(dir).map_err(|e| e.to_string())?;
    for (v, fp) in recorded {
        let got = materialize(&reader, *v).map_err(|e| format!("version {v}: {e}"))?;
        if got.fingerprint() != *fp {
            return Err(format!("version {v}: fingerprint mismatch"));
        }
    }
    Ok(recorded.len())
}

fn c1_restore_fidelity() -> Outcome {
    let mut versions = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0001);
    for i in 0..500u64 {
        let seed = rng.gen::<u64>();
        let statements = rng.gen_range(10..80);
        let max_blob = rng.gen_range(0..4096);
        let src = random_program(seed, statements, max_blob);
        for strategy in [StrategyChoice::Serial, StrategyChoice::IdGraph] {
            let dir = tempfile::tempdir().unwrap();
            let r = run_captured(dir.path(), &src, &options(seed, 5, strategy, 0))
                .map_err(|e| format!("program {i}: {e}"))?;
            if r.outcome.is_err() {
                return Err(format!("program {i} failed: {:?}", r.outcome));
            }
            let live = r.vm.heap().iter().map(|(_, n)| match &n.kind {
                dart_core::ObjectKind::Blob(b) => b.len() as u64,
                k => 16 * k.len() as u64,
            });
            if live.sum::<u64>() > 1 << 20 {
                return Err(format!("program {i} exceeds 1 MiB of state"));
            }
            versions += check_versions(dir.path(), &r.fingerprints)
                .map_err(|e| format!("program {i} ({strategy:?}): {e}"))?;
        }
    }
    Ok(format!("500 programs x 2 strategies, {versions} versions restored exactly"))
}

fn c2_shared_references() -> Outcome {
    let src = "let a = [1]
let b = [2]
let c = [3]
let o1 = [a, c]
let o2 = [b, c]
del c
let t = o1[1]
push t 99
let seen = len(o2[1])
";
    for strategy in [StrategyChoice::Serial, StrategyChoice::IdGraph] {
        let dir = tempfile::tempdir().unwrap();
        run_captured(dir.path(), src, &options(0, 1, strategy, 0)).map_err(|e| e.to_string())?;
        let reader = StoreReader::open(dir.path()).map_err(|e| e.to_string())?;
        // Version 6 is the state right after `del c`.
        let state = materialize(&reader, 6).map_err(|e| e.to_string())?;
        if state.statement_index != 6 {
            return Err(format!("version 6 is at statement {}", state.statement_index));
        }
        let (mut vm, _) = state.to_vm(Arc::new(parse(src).unwrap())).map_err(|e| e.to_string())?;
        let elem = |vm: &Vm, name: &str| -> Option<dart_core::ObjectId> {
            let id = vm.global(name)?.as_ref_id()?;
            match &vm.heap().get(id).ok()?.kind {
                dart_core::ObjectKind::List(items) => items.get(1)?.as_ref_id(),
                _ => None,
            }
        };
        let (c1, c2) = (elem(&vm, "o1"), elem(&vm, "o2"));
        if c1.is_none() || c1 != c2 {
            return Err(format!("{strategy:?}: o1[1] and o2[1] are different objects"));
        }
        if vm.heap().len() != 5 {
            return Err(format!("{strategy:?}: restored heap has {} objects, expected 5", vm.heap().len()));
        }
        vm.run(&mut NoHook).map_err(|e| e.to_string())?;
        if vm.global("seen") != Some(&Value::Int(2)) {
            return Err(format!("{strategy:?}: mutation through o1 not visible through o2"));
        }
    }
    Ok("one shared object for c; push through o1 seen through o2 (both strategies)".into())
}

fn c3_crash_resume() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0003);
    let mut restarted = 0;
    for i in 0..200u64 {
        let seed = rng.gen::<u64>();
        let src = random_program(seed, rng.gen_range(20..60), 512);
        let expected = uninterrupted(&src, seed);
        let total = expected.statement_index();
        if total < 2 {
            continue;
        }
        let kill = rng.gen_range(1..total);
        let strategy = [StrategyChoice::Serial, StrategyChoice::IdGraph, StrategyChoice::Auto][i as usize % 3];
        let depth = if i % 2 == 0 { 0 } else { 2 };
        let opts = options(seed, rng.gen_range(1..8), strategy, depth);
        let dir = tempfile::tempdir().unwrap();
        let killed = run_captured(
            dir.path(),
            &src,
            &RunOptions {
                kill_after_statement: Some(kill),
                ..opts.clone()
            },
        )
        .map_err(|e| format!("run {i}: {e}"))?;
        if !killed.killed() {
            return Err(format!("run {i}: kill at {kill} did not stop the run"));
        }
        let resumed = match resume(dir.path(), None, &src, &opts) {
            Ok(r) => r,
            // Killed before any version was acknowledged: start over.
            Err(dart_core::RecoveryError::Store(StoreError::NoCheckpoint)) => {
                restarted += 1;
                run_captured(dir.path(), &src, &opts).map_err(|e| format!("run {i}: {e}"))?
            }
            Err(e) => return Err(format!("run {i}: resume failed: {e}")),
        };
        if resumed.vm.fingerprint() != expected.fingerprint() {
            return Err(format!("run {i}: resumed final state differs (killed at {kill})"));
        }
    }
    Ok(format!("200 kill/resume runs match the uninterrupted run ({restarted} restarted from scratch)"))
}

fn c4_storage_reduction() -> Outcome {
    let plan = Workload::StaticPlusModel {
        dataset_bytes: 64 << 20,
        model_bytes: 1 << 20,
        iters: 50,
    }
    .plan();
    let mut parts = Vec::new();
    for strategy in [StrategyChoice::Serial, StrategyChoice::IdGraph] {
        let delta = measure_storage(&plan, strategy, false, 1).map_err(|e| e.to_string())?;
        let full = measure_storage(&plan, strategy, true, 1).map_err(|e| e.to_string())?;
        let ratio = delta.total() as f64 / full.total() as f64;
        parts.push(format!("{strategy:?} {ratio:.4}"));
        if ratio > 0.15 {
            return Err(format!("{strategy:?}: delta/full = {ratio:.4} > 0.15"));
        }
    }
    Ok(format!("delta/full storage: {} (limit 0.15)", parts.join(", ")))
}

fn c5_overhead_ordering() -> Outcome {
    let cfg = BenchConfig {
        repetitions: 3,
        ..BenchConfig::default()
    };
    let mut held = 0;
    let mut parts = Vec::new();
    for w in Workload::defaults() {
        let r = run_bench(&w, &cfg).map_err(|e| e.to_string())?;
        if !r.failures.is_empty() {
            return Err(format!("{}: {:?}", w.name(), r.failures));
        }
        let ok = r.delta_overhead_pct <= r.full_overhead_pct;
        held += ok as usize;
        parts.push(format!(
            "{} {:.1}% vs {:.1}%{}",
            w.name(),
            r.delta_overhead_pct,
            r.full_overhead_pct,
            if ok { "" } else { " (violated)" }
        ));
    }
    let detail = format!("delta vs full overhead: {}; holds in {held}/4", parts.join(", "));
    if held >= 3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c6_volatility() -> Outcome {
    let sweep = sweep_volatility(&[0.0, 0.25, 0.5, 0.75, 1.0], 128, 4096, 10, 1).map_err(|e| e.to_string())?;
    let top = sweep.rows.last().unwrap();
    if top.serial_bytes as f64 > 1.1 * top.idgraph_bytes as f64 {
        return Err(format!(
            "p=1.0: serial {} > 1.1 x idgraph {}",
            top.serial_bytes, top.idgraph_bytes
        ));
    }
    let plan = Workload::Shuffle {
        items: 512,
        item_bytes: 8 << 10,
        iters: 10,
    }
    .plan();
    let s = measure_storage(&plan, StrategyChoice::Serial, false, 1).map_err(|e| e.to_string())?;
    let g = measure_storage(&plan, StrategyChoice::IdGraph, false, 1).map_err(|e| e.to_string())?;
    if g.deltas >= s.deltas {
        return Err(format!("shuffle: idgraph {} >= serial {}", g.deltas, s.deltas));
    }
    Ok(format!(
        "p=1.0 serial/idgraph = {:.3}; shuffle idgraph {} B < serial {} B",
        top.serial_bytes as f64 / top.idgraph_bytes as f64,
        g.deltas,
        s.deltas
    ))
}

fn c7_failsafe() -> Outcome {
    let mut skipped = 0;
    let mut total_versions = 0;
    for (i, strategy) in [StrategyChoice::Serial, StrategyChoice::IdGraph, StrategyChoice::Auto]
        .into_iter()
        .enumerate()
    {
        let plan = Workload::Volatility {
            objects: 40,
            object_bytes: 256,
            p: 0.2,
            iters: 60,
        }
        .plan();
        let k = plan.total_statements() / 100;
        let seed = 70 + i as u64;
        let expected = uninterrupted(&plan.source, seed);
        let mut opts = options(seed, k, strategy, 2);
        opts.capture.faults = FaultPlan {
            serialize: 0.3,
            store: 0.0,
            seed,
        };
        let dir = tempfile::tempdir().unwrap();
        let r = run_captured(dir.path(), &plan.source, &opts).map_err(|e| e.to_string())?;
        if r.stats.entries.len() < 100 {
            return Err(format!("only {} snapshots attempted", r.stats.entries.len()));
        }
        if r.outcome.is_err()
            || r.vm.fingerprint() != expected.fingerprint()
            || globals_json(&r.vm) != globals_json(&expected)
        {
            return Err(format!("{strategy:?}: injected faults changed the program result"));
        }
        skipped += r.stats.skipped;
        total_versions += check_versions(dir.path(), &r.fingerprints).map_err(|e| format!("{strategy:?}: {e}"))?;
        let reader = StoreReader::open(dir.path()).map_err(|e| e.to_string())?;
        let present: BTreeSet<u64> = reader.versions().into_iter().collect();
        for e in reader.manifest().snapshot_entries() {
            if let Some(b) = e.base_version {
                if !present.contains(&b) {
                    return Err(format!("version {} has unpersisted base {b}", e.version));
                }
            }
        }
    }
    if skipped == 0 {
        return Err("no snapshot was failed by injection".into());
    }
    Ok(format!(
        "3 runs x 100+ snapshots: {skipped} injected failures, output unchanged, {total_versions} versions restore, all bases persisted"
    ))
}

fn segments(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir.join("segments"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    v.sort();
    v
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to.join("segments")).unwrap();
    for name in ["manifest.json", "index.jsonl"] {
        if from.join(name).exists() {
            fs::copy(from.join(name), to.join(name)).unwrap();
        }
    }
    for seg in segments(from) {
        fs::copy(&seg, to.join("segments").join(seg.file_name().unwrap())).unwrap();
    }
}

fn c8_durability() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0008);
    let mut corrupt_reports = 0;
    let mut clean_reads = 0;
    for run in 0..20u64 {
        let seed = rng.gen::<u64>();
        let src = random_program(seed, 40, 300);
        let total = uninterrupted(&src, seed).statement_index();
        let kill = rng.gen_range(total / 2..total);
        let dir = tempfile::tempdir().unwrap();
        let mut opts = options(seed, 3, [StrategyChoice::Serial, StrategyChoice::IdGraph][run as usize % 2], 2);
        opts.store.segment_limit = 4096;
        opts.kill_after_statement = Some(kill);
        let r = run_captured(dir.path(), &src, &opts).map_err(|e| e.to_string())?;
        // Acknowledged versions survive the kill.
        check_versions(dir.path(), &r.fingerprints).map_err(|e| format!("run {run}: {e}"))?;

        let reader = StoreReader::open(dir.path()).map_err(|e| e.to_string())?;
        for trial in 0..10 {
            let copy = tempfile::tempdir().unwrap();
            copy_dir(dir.path(), copy.path());
            let entries = reader.entries().to_vec();
            let victim = &entries[rng.gen_range(0..entries.len())];
            let seg = copy
                .path()
                .join("segments")
                .join(format!("{:04}.dlog", victim.segment));
            let mut bytes = fs::read(&seg).unwrap();
            let at = victim.offset + rng.gen_range(0..victim.byte_size);
            bytes[at as usize] ^= 1 << rng.gen_range(0..8);
            fs::write(&seg, &bytes).unwrap();

            let damaged = StoreReader::open(copy.path()).map_err(|e| e.to_string())?;
            for (v, fp) in &r.fingerprints {
                let chain: Vec<u64> = reader.chain_entries(*v).unwrap().iter().map(|e| e.version).collect();
                let hit = victim.kind != RecordKind::ProgramSource && chain.contains(&victim.version);
                match (materialize(&damaged, *v), hit) {
                    (Ok(m), false) if m.fingerprint() == *fp => clean_reads += 1,
                    (Err(dart_core::RecoveryError::Store(StoreError::CorruptRecord { version, .. })), true)
                        if version == victim.version =>
                    {
                        corrupt_reports += 1
                    }
                    (res, hit) => {
                        return Err(format!(
                            "run {run} trial {trial}: version {v} (damaged record {} on chain: {hit}) gave {:?}",
                            victim.version,
                            res.map(|m| m.fingerprint())
                        ))
                    }
                }
            }
        }

        // A torn tail: cut the last segment mid-record, then reopen.
        let segs = segments(dir.path());
        let last = segs.last().unwrap();
        let len = fs::metadata(last).unwrap().len();
        if len > 1 {
            let f = fs::OpenOptions::new().write(true).open(last).unwrap();
            f.set_len(rng.gen_range(1..len)).unwrap();
            drop(f);
            let store = dart_core::Store::open(dir.path(), fast_store()).map_err(|e| e.to_string())?;
            let reader = store.reader().clone();
            drop(store);
            let survivors: BTreeMap<u64, Digest128> = r
                .fingerprints
                .iter()
                .filter(|(v, _)| reader.entry(**v).is_ok())
                .map(|(v, f)| (*v, *f))
                .collect();
            check_versions(dir.path(), &survivors).map_err(|e| format!("run {run} after tear: {e}"))?;
        }
    }
    Ok(format!(
        "acked versions restore after kills; 200 single-byte corruptions: {corrupt_reports} CorruptRecord reports, {clean_reads} unaffected reads exact, none decoded silently"
    ))
}

fn c9_replication() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0009);
    for run in 0..10u64 {
        let seed = rng.gen::<u64>();
        let src = random_program(seed, 50, 400);
        let expected = uninterrupted(&src, seed);
        let kill = rng.gen_range(expected.statement_index() / 3..expected.statement_index());
        let origin = tempfile::tempdir().unwrap();
        let mut opts = options(seed, 4, StrategyChoice::Auto, 0);
        opts.kill_after_statement = Some(kill);
        run_captured(origin.path(), &src, &opts).map_err(|e| e.to_string())?;
        opts.kill_after_statement = None;

        let reader = StoreReader::open(origin.path()).map_err(|e| e.to_string())?;
        let versions = reader.versions();
        let mut pack = Vec::new();
        reader
            .export_pack(versions[0], *versions.last().unwrap(), &mut pack)
            .map_err(|e| e.to_string())?;
        let remote = tempfile::tempdir().unwrap();
        let target = remote.path().join("replica");
        import_pack(&pack, &target).map_err(|e| e.to_string())?;

        let there = resume(&target, None, &src, &opts).map_err(|e| format!("replica: {e}"))?;
        let here = resume(origin.path(), None, &src, &opts).map_err(|e| format!("origin: {e}"))?;
        if there.vm.fingerprint() != here.vm.fingerprint() || here.vm.fingerprint() != expected.fingerprint() {
            return Err(format!("run {run}: replica and origin resumed to different states"));
        }
    }
    Ok("10 packs imported and resumed: replica, origin and uninterrupted fingerprints equal".into())
}

fn c10_controller() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0010);
    for _ in 0..10_000 {
        // Exactly representable inputs: integer c (us), v in thousandths of
        // a microsecond, rho = 1/den.
        let c: u64 = rng.gen_range(1..100_000);
        let v_milli: u64 = rng.gen_range(10..1_000_000);
        let den: u64 = [100, 20, 10, 4, 2, 1][rng.gen_range(0..6)];
        // Oracle in integer arithmetic: c / ((1/den) * v_milli/1000).
        let expected = ((c as u128 * den as u128 * 1000).div_ceil(v_milli as u128) as u64).clamp(K_MIN, K_MAX);
        let got = AdaptiveController::k_for(c as f64, v_milli as f64 / 1000.0, 1.0 / den as f64);
        if got != expected {
            return Err(format!("k({c}, {v_milli}/1000, 1/{den}) = {got}, expected {expected}"));
        }
    }
    let mut ctl = AdaptiveController::new(0.1);
    ctl.observe_vm(2000.0, 1000);
    ctl.observe_capture(300.0);
    ctl.observe_capture(100.0);
    // c = 0.3*100 + 0.7*300 = 240, v = 2: k = ceil(240 / 0.2) = 1200.
    if ctl.k() != Some(1200) {
        return Err(format!("EWMA controller gave {:?}, expected 1200", ctl.k()));
    }
    // Triples where K_MAX does not bind; a clamped k cannot honor the budget.
    let mut worst: f64 = 0.0;
    for (c, v, rho) in [
        (500.0, 1.0, 0.05),
        (50.0, 2.0, 0.1),
        (10_000.0, 5.0, 0.01),
        (3.0, 1.0, 0.5),
        (2000.0, 10.0, 0.2),
    ] {
        let f = simulate_capture_fraction(c, v, rho, 2_000_000);
        worst = worst.max(f / rho);
        if f > 1.5 * rho {
            return Err(format!("capture fraction {f:.4} > 1.5 x {rho}"));
        }
    }
    Ok(format!(
        "k = ceil(c/(rho v)) on 10000 synthetic triples; EWMA case 1200; worst fraction/rho = {worst:.3}"
    ))
}

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "restore fidelity", c1_restore_fidelity),
        (2, "shared-reference preservation", c2_shared_references),
        (3, "crash-resume equivalence", c3_crash_resume),
        (4, "delta storage reduction", c4_storage_reduction),
        (5, "overhead ordering", c5_overhead_ordering),
        (6, "volatility trade-off", c6_volatility),
        (7, "failsafe under serializer faults", c7_failsafe),
        (8, "durability and corruption", c8_durability),
        (9, "replication", c9_replication),
        (10, "adaptive controller", c10_controller),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let started = Instant::now();
        let res = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({detail}) [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
