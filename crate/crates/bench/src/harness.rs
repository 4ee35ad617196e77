//! Measurement harness: baseline, delta-capture and full-snapshot runs of
//! a workload, storage accounting, and the volatility sweep.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use dart_core::capture::{
    CaptureConfig, CaptureSession, CountingSink, SnapshotOutcome, SnapshotSink, Trigger,
};
use dart_core::recovery::materialize;
use dart_core::store::{storage_series, FsyncPolicy, ProgramRecord, Store, StoreOptions, StoreReader};
use dart_core::vm::HookAction;
use dart_core::{parse, Digest128, Strategy, StrategyChoice, Vm};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::workload::{Plan, Workload};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("workload program: {0}")]
    Syntax(#[from] dart_core::vm::SyntaxError),
    #[error("workload failed at runtime: {0}")]
    Runtime(#[from] dart_core::vm::RuntimeError),
    #[error(transparent)]
    Store(#[from] dart_core::StoreError),
    #[error(transparent)]
    Capture(#[from] dart_core::capture::CaptureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// No capture.
    Baseline,
    /// Checkpoint then deltas.
    Delta,
    /// Every snapshot a full checkpoint.
    Full,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchConfig {
    pub strategy: StrategyChoice,
    pub repetitions: usize,
    /// Checkpoint cadence of delta runs.
    pub checkpoint_every: u64,
    #[serde(skip)]
    pub fsync: FsyncPolicy,
    pub seed: u64,
    /// Persisted versions checked against live fingerprints per run.
    pub verify_versions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            strategy: StrategyChoice::Auto,
            repetitions: 3,
            checkpoint_every: 64,
            fsync: FsyncPolicy::Batch(16),
            seed: 1,
            verify_versions: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SnapshotRow {
    pub version: u64,
    pub statement_index: u64,
    pub bytes: u64,
    pub checkpoint: bool,
    pub strategy: Option<Strategy>,
    pub micros: u64,
}

/// One timed execution.
#[derive(Debug, Clone)]
pub struct ModeRun {
    pub mode: Mode,
    pub wall: Duration,
    pub rows: Vec<SnapshotRow>,
    /// Cumulative framed bytes by version, from the store manifest.
    pub storage_series: Vec<(u64, u64)>,
    /// Versions whose restored fingerprint was checked, and the result.
    pub verified: Vec<(u64, bool)>,
    /// Stats bytes agree with the store's own accounting.
    pub accounting_ok: bool,
    pub final_fingerprint: Digest128,
}

impl ModeRun {
    pub fn total_bytes(&self) -> u64 {
        self.rows.iter().map(|r| r.bytes).sum()
    }
}

/// Snapshot marks consumed in order by a run hook.
struct Marks {
    at: Vec<u64>,
    next: usize,
}

impl Marks {
    fn new(plan: &Plan) -> Self {
        Marks {
            at: plan.marks(),
            next: 0,
        }
    }

    /// Whether `statement_index` is the next mark; advances past it.
    fn hit(&mut self, statement_index: u64) -> bool {
        if self.at.get(self.next) == Some(&statement_index) {
            self.next += 1;
            true
        } else {
            false
        }
    }
}

fn capture_config(mode: Mode, cfg: &BenchConfig) -> CaptureConfig {
    CaptureConfig {
        // Snapshots are driven by marks, not by the trigger.
        trigger: Trigger::EveryStatements(dart_core::capture::K_MAX),
        strategy: cfg.strategy,
        overhead_budget: None,
        checkpoint_every: if mode == Mode::Full { 1 } else { cfg.checkpoint_every.max(1) },
        queue_depth: 0,
        record_fingerprints: false,
        final_snapshot: false,
        ..CaptureConfig::default()
    }
}

/// Runs `plan` once in `mode`, persisting into a fresh temporary store.
pub fn run_mode(plan: &Plan, mode: Mode, cfg: &BenchConfig, verify: bool) -> Result<ModeRun, BenchError> {
    let program = Arc::new(parse(&plan.source)?);
    let mut vm = Vm::new(Arc::clone(&program), cfg.seed);
    vm.set_logging(false);
    let mut marks = Marks::new(plan);

    if mode == Mode::Baseline {
        let started = Instant::now();
        vm.run(&mut |vm: &Vm| {
            marks.hit(vm.statement_index());
            HookAction::Continue
        })?;
        return Ok(ModeRun {
            mode,
            wall: started.elapsed(),
            rows: Vec::new(),
            storage_series: Vec::new(),
            verified: Vec::new(),
            accounting_ok: true,
            final_fingerprint: vm.fingerprint(),
        });
    }

    let dir = tempfile::tempdir()?;
    let store_dir = dir.path().join("store");
    let mut store = Store::create(
        &store_dir,
        StoreOptions {
            fsync: cfg.fsync,
            ..StoreOptions::default()
        },
    )?;
    store.write_program(&ProgramRecord {
        source: plan.source.clone(),
        digest: program.source_digest,
        seed: cfg.seed,
    })?;
    let mut session = CaptureSession::new(capture_config(mode, cfg), store)?;

    // Snapshot ordinals whose live fingerprint is recorded for the check.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xF1DE);
    let mut chosen: Vec<usize> = (0..plan.marks().len()).collect();
    chosen.shuffle(&mut rng);
    chosen.truncate(if verify { cfg.verify_versions } else { 0 });

    let mut live: BTreeMap<u64, Digest128> = BTreeMap::new();
    let mut excluded = Duration::ZERO;
    let mut ordinal = 0usize;
    let started = Instant::now();
    vm.run(&mut |vm: &Vm| {
        if marks.hit(vm.statement_index()) {
            let out = session.snapshot(vm);
            if chosen.contains(&ordinal) {
                if let SnapshotOutcome::Persisted(v) = out {
                    let t = Instant::now();
                    live.insert(v, vm.fingerprint());
                    excluded += t.elapsed();
                }
            }
            ordinal += 1;
        }
        HookAction::Continue
    })?;
    let report = session.finish()?;
    let wall = started.elapsed().saturating_sub(excluded);

    let manifest = report.sink.manifest().clone();
    drop(report.sink);
    let series = storage_series(&manifest);
    let rows: Vec<SnapshotRow> = report
        .stats
        .entries
        .iter()
        .filter(|e| e.persisted)
        .map(|e| SnapshotRow {
            version: e.version,
            statement_index: e.statement_index,
            bytes: e.bytes,
            checkpoint: e.checkpoint,
            strategy: e.strategy,
            micros: e.micros,
        })
        .collect();
    let accounting_ok = series.last().map_or(0, |s| s.1) == report.stats.persisted_bytes()
        && series.len() == rows.len();

    let mut verified = Vec::new();
    if !live.is_empty() {
        let reader = StoreReader::open(&store_dir)?;
        for (v, fp) in &live {
            let ok = materialize(&reader, *v).is_ok_and(|m| m.fingerprint() == *fp);
            verified.push((*v, ok));
        }
    }
    Ok(ModeRun {
        mode,
        wall,
        rows,
        storage_series: series,
        verified,
        accounting_ok,
        final_fingerprint: vm.fingerprint(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub workload: Workload,
    pub config: BenchConfig,
    pub baseline_ms: f64,
    pub delta_ms: f64,
    pub full_ms: f64,
    /// Relative execution-time overhead, percent.
    pub delta_overhead_pct: f64,
    pub full_overhead_pct: f64,
    pub delta_bytes: u64,
    pub full_bytes: u64,
    pub snapshots: Vec<SnapshotRow>,
    pub delta_storage_series: Vec<(u64, u64)>,
    pub full_storage_series: Vec<(u64, u64)>,
    pub verified_versions: Vec<(u64, bool)>,
    pub fidelity_ok: bool,
    pub accounting_ok: bool,
    /// Capture never changed the program's result.
    pub outcome_unchanged: bool,
    pub failures: Vec<String>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Baseline, delta and full runs of `workload`, interleaved per
/// repetition; times are medians. The first delta run is also checked for
/// restore fidelity.
pub fn run_bench(workload: &Workload, cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    let plan = workload.plan();
    let reps = cfg.repetitions.max(1);
    let (mut base, mut delta, mut full) = (Vec::new(), Vec::new(), Vec::new());
    let mut first_delta: Option<ModeRun> = None;
    let mut first_full: Option<ModeRun> = None;
    let mut fingerprints = Vec::new();
    for rep in 0..reps {
        let b = run_mode(&plan, Mode::Baseline, cfg, false)?;
        let d = run_mode(&plan, Mode::Delta, cfg, rep == 0)?;
        let f = run_mode(&plan, Mode::Full, cfg, false)?;
        base.push(ms(b.wall));
        delta.push(ms(d.wall));
        full.push(ms(f.wall));
        fingerprints.extend([b.final_fingerprint, d.final_fingerprint, f.final_fingerprint]);
        first_delta.get_or_insert(d);
        first_full.get_or_insert(f);
    }
    let d = first_delta.expect("at least one repetition");
    let f = first_full.expect("at least one repetition");
    let (baseline_ms, delta_ms, full_ms) = (median(base), median(delta), median(full));
    let pct = |x: f64| (x - baseline_ms) / baseline_ms.max(1e-9) * 100.0;
    let mut failures = Vec::new();
    let fidelity_ok = d.verified.iter().all(|(_, ok)| *ok);
    if !fidelity_ok {
        failures.push(format!("restore fidelity failed: {:?}", d.verified));
    }
    let accounting_ok = d.accounting_ok && f.accounting_ok;
    if !accounting_ok {
        failures.push("storage accounting disagrees with the store manifest".into());
    }
    let outcome_unchanged = fingerprints.windows(2).all(|w| w[0] == w[1]);
    if !outcome_unchanged {
        failures.push("capture changed the final state".into());
    }
    Ok(BenchReport {
        workload: *workload,
        config: cfg.clone(),
        baseline_ms,
        delta_ms,
        full_ms,
        delta_overhead_pct: pct(delta_ms),
        full_overhead_pct: pct(full_ms),
        delta_bytes: d.total_bytes(),
        full_bytes: f.total_bytes(),
        snapshots: d.rows,
        delta_storage_series: d.storage_series,
        full_storage_series: f.storage_series,
        verified_versions: d.verified,
        fidelity_ok,
        accounting_ok,
        outcome_unchanged,
        failures,
    })
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-snapshot rows of the delta run.
    pub fn to_csv(&self) -> Result<String, BenchError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "version",
            "statement_index",
            "bytes",
            "cumulative_bytes",
            "checkpoint",
            "strategy",
            "micros",
        ])?;
        let mut total = 0;
        for r in &self.snapshots {
            total += r.bytes;
            w.write_record([
                r.version.to_string(),
                r.statement_index.to_string(),
                r.bytes.to_string(),
                total.to_string(),
                r.checkpoint.to_string(),
                r.strategy.map_or(String::new(), |s| s.to_string()),
                r.micros.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Two-column `version cumulative_bytes` series for plotting.
    pub fn series_text(&self) -> String {
        self.delta_storage_series
            .iter()
            .map(|(v, b)| format!("{v} {b}\n"))
            .collect()
    }
}

/// Framed bytes persisted by one strategy: the first (checkpoint) snapshot
/// and the deltas after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StorageSplit {
    pub checkpoint: u64,
    pub deltas: u64,
    /// Write/delete records across all deltas.
    pub delta_writes: u64,
}

impl StorageSplit {
    pub fn total(&self) -> u64 {
        self.checkpoint + self.deltas
    }
}

/// Storage of `plan` under a fixed strategy, without timing or disk I/O.
pub fn measure_storage(
    plan: &Plan,
    strategy: StrategyChoice,
    full: bool,
    seed: u64,
) -> Result<StorageSplit, BenchError> {
    let program = Arc::new(parse(&plan.source)?);
    let mut vm = Vm::new(program, seed);
    vm.set_logging(false);
    let cfg = BenchConfig {
        strategy,
        checkpoint_every: u64::MAX,
        ..BenchConfig::default()
    };
    let mode = if full { Mode::Full } else { Mode::Delta };
    let mut session = CaptureSession::new(capture_config(mode, &cfg), WriteCounter::default())?;
    let mut marks = Marks::new(plan);
    vm.run(&mut |vm: &Vm| {
        if marks.hit(vm.statement_index()) {
            session.snapshot(vm);
        }
        HookAction::Continue
    })?;
    let report = session.finish()?;
    let mut split = StorageSplit {
        checkpoint: 0,
        deltas: 0,
        delta_writes: report.sink.delta_writes,
    };
    for (i, e) in report.stats.entries.iter().filter(|e| e.persisted).enumerate() {
        if i == 0 {
            split.checkpoint += e.bytes;
        } else {
            split.deltas += e.bytes;
        }
    }
    Ok(split)
}

/// Counts bytes like [`CountingSink`] and also write/delete records in
/// deltas.
#[derive(Debug, Default)]
struct WriteCounter {
    inner: CountingSink,
    delta_writes: u64,
}

impl SnapshotSink for WriteCounter {
    fn persist(
        &mut self,
        header: &dart_core::delta::DeltaHeader,
        payload: &[u8],
    ) -> Result<(), String> {
        if header.base_version.is_some() {
            let d = dart_core::DeltaSet::decode(payload).map_err(|e| e.to_string())?;
            self.delta_writes += d.write_delete_count() as u64;
        }
        self.inner.persist(header, payload)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub p: f64,
    pub serial_bytes: u64,
    pub idgraph_bytes: u64,
    pub serial_writes: u64,
    pub idgraph_writes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub objects: u64,
    pub object_bytes: u64,
    pub iters: u64,
    pub rows: Vec<SweepRow>,
    /// Grid points where the winning strategy flips.
    pub crossovers: Vec<(f64, f64)>,
    /// Grid points where IdGraph delta bytes decreased as p grew.
    pub monotonicity_violations: Vec<f64>,
}

/// Delta bytes (excluding the initial checkpoint) per strategy across a
/// grid of volatilities.
pub fn sweep_volatility(
    grid: &[f64],
    objects: u64,
    object_bytes: u64,
    iters: u64,
    seed: u64,
) -> Result<SweepReport, BenchError> {
    let mut rows = Vec::new();
    for &p in grid {
        let plan = Workload::Volatility {
            objects,
            object_bytes,
            p,
            iters,
        }
        .plan();
        let s = measure_storage(&plan, StrategyChoice::Serial, false, seed)?;
        let g = measure_storage(&plan, StrategyChoice::IdGraph, false, seed)?;
        rows.push(SweepRow {
            p,
            serial_bytes: s.deltas,
            idgraph_bytes: g.deltas,
            serial_writes: s.delta_writes,
            idgraph_writes: g.delta_writes,
        });
    }
    let wins = |r: &SweepRow| r.idgraph_bytes < r.serial_bytes;
    let crossovers = rows
        .windows(2)
        .filter(|w| wins(&w[0]) != wins(&w[1]))
        .map(|w| (w[0].p, w[1].p))
        .collect();
    let monotonicity_violations = rows
        .windows(2)
        .filter(|w| w[1].p >= w[0].p && w[1].idgraph_bytes < w[0].idgraph_bytes)
        .map(|w| w[1].p)
        .collect();
    Ok(SweepReport {
        objects,
        object_bytes,
        iters,
        rows,
        crossovers,
        monotonicity_violations,
    })
}

impl SweepReport {
    pub fn to_csv(&self) -> Result<String, BenchError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["p", "serial_bytes", "idgraph_bytes", "serial_writes", "idgraph_writes"])?;
        for r in &self.rows {
            w.write_record([
                r.p.to_string(),
                r.serial_bytes.to_string(),
                r.idgraph_bytes.to_string(),
                r.serial_writes.to_string(),
                r.idgraph_writes.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}
