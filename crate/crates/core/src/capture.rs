//! Snapshot capture: frame collection, triggering, adaptive sampling and
//! failure containment.
//!
//! A [`CaptureSession`] is a [`StepHook`]. Deltas are computed on the VM
//! thread between statements; only persistence runs on a background writer
//! behind a bounded queue. Nothing a session does can change VM state or
//! surface as a VM error.

use std::collections::{BTreeMap, HashSet};
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::delta::engine::{DeltaEngine, Prepared};
use crate::delta::{DeltaHeader, FaultPoint, Strategy, StrategyChoice};
use crate::digest::Digest128;
use crate::heap::Heap;
use crate::vm::{EngineRng, Frame, HookAction, StepHook, Vm};

/// Read-only view of a paused VM. Bindings are copied (scalars and
/// references only); object payloads stay in the borrowed heap.
#[derive(Debug, Clone)]
pub struct StateView<'a> {
    pub frames: Vec<Frame>,
    pub heap: &'a Heap,
    pub rng: EngineRng,
    pub statement_index: u64,
}

pub fn collect_frames(vm: &Vm) -> StateView<'_> {
    StateView {
        frames: vm.frames().to_vec(),
        heap: vm.heap(),
        rng: vm.rng(),
        statement_index: vm.statement_index(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Trigger {
    EveryStatements(u64),
    EveryMillis(u64),
}

/// Injected failure probabilities per snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct FaultPlan {
    pub serialize: f64,
    pub store: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaptureConfig {
    pub trigger: Trigger,
    pub strategy: StrategyChoice,
    /// Capture-time fraction ρ ∈ (0, 1]; enables the adaptive controller.
    pub overhead_budget: Option<f64>,
    pub checkpoint_every: u64,
    /// Pending persist jobs; 0 persists synchronously on the VM thread.
    pub queue_depth: usize,
    pub faults: FaultPlan,
    /// Record the live state fingerprint of every persisted version.
    pub record_fingerprints: bool,
    /// Take one more snapshot when the program completes.
    pub final_snapshot: bool,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        CaptureConfig {
            trigger: Trigger::EveryStatements(10),
            strategy: StrategyChoice::IdGraph,
            overhead_budget: None,
            checkpoint_every: 16,
            queue_depth: 4,
            faults: FaultPlan::default(),
            record_fingerprints: false,
            final_snapshot: true,
        }
    }
}

impl CaptureConfig {
    pub fn validate(&self) -> Result<(), CaptureError> {
        let bad = |m: &str| Err(CaptureError::InvalidConfig(m.to_string()));
        match self.trigger {
            Trigger::EveryStatements(0) => return bad("statement trigger must be >= 1"),
            Trigger::EveryMillis(0) => return bad("time trigger must be >= 1 ms"),
            _ => {}
        }
        if let Some(rho) = self.overhead_budget {
            if !(rho > 0.0 && rho <= 1.0) {
                return bad("overhead budget must be in (0, 1]");
            }
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be >= 1");
        }
        for p in [self.faults.serialize, self.faults.store] {
            if !(0.0..=1.0).contains(&p) {
                return bad("fault probabilities must be in [0, 1]");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("invalid capture config: {0}")]
    InvalidConfig(String),
    #[error("persistence writer panicked")]
    WriterPanicked,
    #[error("closing the sink failed: {0}")]
    Close(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnapshotStat {
    pub version: u64,
    pub statement_index: u64,
    pub micros: u64,
    pub bytes: u64,
    pub persisted: bool,
    pub reason: Option<String>,
    pub checkpoint: bool,
    pub strategy: Option<Strategy>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CaptureStats {
    pub entries: Vec<SnapshotStat>,
    pub total_vm_micros: u64,
    pub total_capture_micros: u64,
    pub taken: u64,
    pub skipped: u64,
}

impl CaptureStats {
    /// One JSON object per snapshot.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let line = serde_json::json!({
                "version": e.version,
                "statement_index": e.statement_index,
                "micros": e.micros,
                "bytes": e.bytes,
                "persisted": e.persisted,
                "reason": e.reason,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    pub fn persisted_versions(&self) -> Vec<u64> {
        self.entries
            .iter()
            .filter(|e| e.persisted)
            .map(|e| e.version)
            .collect()
    }

    pub fn persisted_bytes(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.persisted)
            .map(|e| e.bytes)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SnapshotOutcome {
    Persisted(u64),
    Skipped(String),
}

/// Destination of encoded snapshots. Implemented by the store and by
/// in-memory sinks.
pub trait SnapshotSink: Send {
    fn persist(&mut self, header: &DeltaHeader, payload: &[u8]) -> Result<(), String>;

    /// Called once at orderly session end.
    fn close(&mut self) -> Result<(), String> {
        Ok(())
    }
}

/// Keeps every persisted payload in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub records: Vec<(DeltaHeader, Vec<u8>)>,
}

impl SnapshotSink for MemorySink {
    fn persist(&mut self, header: &DeltaHeader, payload: &[u8]) -> Result<(), String> {
        self.records.push((*header, payload.to_vec()));
        Ok(())
    }
}

/// Counts persisted bytes and drops payloads.
#[derive(Debug, Default)]
pub struct CountingSink {
    pub records: u64,
    pub bytes: u64,
}

impl SnapshotSink for CountingSink {
    fn persist(&mut self, _header: &DeltaHeader, payload: &[u8]) -> Result<(), String> {
        self.records += 1;
        self.bytes += payload.len() as u64;
        Ok(())
    }
}

/// Failure record produced by [`guard`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub reason: String,
}

/// Runs capture-side code, converting both errors and panics into a
/// [`Failure`]. Never unwinds into the caller.
pub fn guard<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, Failure> {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(reason)) => Err(Failure { reason }),
        Err(payload) => {
            let reason = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "capture panicked".to_string());
            Err(Failure {
                reason: format!("panic: {reason}"),
            })
        }
    }
}

pub const K_MIN: u64 = 1;
pub const K_MAX: u64 = 1_000_000;
pub const T_MIN_MS: u64 = 1;
pub const T_MAX_MS: u64 = 600_000;
pub const EWMA_ALPHA: f64 = 0.3;

/// Sampling-period controller: `k = ceil(c / (ρ·v))`, `t = ceil(c / ρ)`,
/// with `c` an EWMA of capture cost and `v` the mean VM time per statement.
#[derive(Debug, Clone)]
pub struct AdaptiveController {
    pub rho: f64,
    cost_ewma: Option<f64>,
    vm_micros: f64,
    statements: u64,
}

/// `ceil` that ignores floating-point noise below 1e-9.
fn ceil_clean(x: f64) -> f64 {
    ((x * 1e9).round() / 1e9).ceil()
}

impl AdaptiveController {
    pub fn new(rho: f64) -> Self {
        AdaptiveController {
            rho,
            cost_ewma: None,
            vm_micros: 0.0,
            statements: 0,
        }
    }

    pub fn observe_capture(&mut self, micros: f64) {
        self.cost_ewma = Some(match self.cost_ewma {
            None => micros,
            Some(c) => EWMA_ALPHA * micros + (1.0 - EWMA_ALPHA) * c,
        });
    }

    pub fn observe_vm(&mut self, micros: f64, statements: u64) {
        self.vm_micros += micros;
        self.statements += statements;
    }

    pub fn capture_cost(&self) -> Option<f64> {
        self.cost_ewma
    }

    pub fn micros_per_statement(&self) -> Option<f64> {
        (self.statements > 0).then(|| self.vm_micros / self.statements as f64)
    }

    /// Statement period; `None` before the first completed snapshot.
    pub fn k(&self) -> Option<u64> {
        let c = self.cost_ewma?;
        let v = self.micros_per_statement()?;
        Some(Self::k_for(c, v, self.rho))
    }

    pub fn k_for(c: f64, v: f64, rho: f64) -> u64 {
        let raw = if v <= 0.0 {
            f64::INFINITY
        } else {
            ceil_clean(c / (rho * v))
        };
        if raw.is_nan() {
            return K_MIN;
        }
        (raw.clamp(K_MIN as f64, K_MAX as f64)) as u64
    }

    /// Time period in milliseconds; `None` before the first snapshot.
    pub fn t_millis(&self) -> Option<u64> {
        Some(Self::t_for(self.cost_ewma?, self.rho))
    }

    /// `c` in microseconds.
    pub fn t_for(c_micros: f64, rho: f64) -> u64 {
        let raw = ceil_clean(c_micros / rho / 1000.0);
        raw.clamp(T_MIN_MS as f64, T_MAX_MS as f64) as u64
    }
}

/// Capture-time fraction of a run with fixed per-statement cost `v` and
/// per-snapshot cost `c`, where the controller re-plans after each
/// snapshot.
pub fn simulate_capture_fraction(c: f64, v: f64, rho: f64, statements: u64) -> f64 {
    let mut ctl = AdaptiveController::new(rho);
    let mut k = 1u64;
    let mut since = 0u64;
    let (mut vm, mut cap) = (0.0f64, 0.0f64);
    for _ in 0..statements {
        vm += v;
        ctl.observe_vm(v, 1);
        since += 1;
        if since >= k {
            cap += c;
            ctl.observe_capture(c);
            k = ctl.k().unwrap_or(1);
            since = 0;
        }
    }
    cap / (vm + cap)
}

struct Job {
    header: DeltaHeader,
    payload: Vec<u8>,
}

#[derive(Debug, Default)]
struct WriterStatus {
    persisted: Vec<u64>,
    persisted_set: HashSet<u64>,
    failures: Vec<(u64, String)>,
}

struct WriterCore<S> {
    sink: S,
    status: Arc<Mutex<WriterStatus>>,
    faults: ChaCha8Rng,
    store_fault: f64,
}

impl<S: SnapshotSink> WriterCore<S> {
    fn write(&mut self, job: Job) {
        let v = job.header.version;
        let fail = |status: &Arc<Mutex<WriterStatus>>, reason: String| {
            status.lock().unwrap().failures.push((v, reason));
        };
        if let Some(base) = job.header.base_version {
            if !self.status.lock().unwrap().persisted_set.contains(&base) {
                fail(&self.status, format!("base version {base} was not persisted"));
                return;
            }
        }
        if self.store_fault > 0.0 && self.faults.gen_bool(self.store_fault) {
            fail(&self.status, "store-failure: injected".into());
            return;
        }
        let res = guard(|| self.sink.persist(&job.header, &job.payload));
        let mut st = self.status.lock().unwrap();
        match res {
            Ok(()) => {
                st.persisted.push(v);
                st.persisted_set.insert(v);
            }
            Err(f) => st.failures.push((v, format!("store-failure: {}", f.reason))),
        }
    }
}

enum Writer<S: SnapshotSink + 'static> {
    Sync(WriterCore<S>),
    Async {
        tx: Option<SyncSender<Job>>,
        handle: Option<JoinHandle<WriterCore<S>>>,
        abort: Arc<AtomicBool>,
    },
}

/// Where a session starts: fresh, or continuing a store at a restored
/// version.
#[derive(Debug, Clone, Default)]
pub struct SessionStart {
    pub next_version: u64,
    /// Versions already durable in the sink (a resume's base).
    pub persisted_base: Option<u64>,
}

pub struct CaptureSession<S: SnapshotSink + 'static> {
    config: CaptureConfig,
    engine: DeltaEngine,
    writer: Writer<S>,
    status: Arc<Mutex<WriterStatus>>,
    next_version: u64,
    ordinal: u64,
    consecutive_failures: u32,
    seen_failures: usize,
    last_fire_statement: u64,
    last_fire_time: Instant,
    last_tick: Instant,
    last_statement: u64,
    period: Trigger,
    controller: Option<AdaptiveController>,
    fault_rng: ChaCha8Rng,
    stats: CaptureStats,
    fingerprints: BTreeMap<u64, Digest128>,
}

/// What a finished or abandoned session hands back.
pub struct SessionReport<S> {
    pub stats: CaptureStats,
    /// Live fingerprints of persisted versions (if recorded).
    pub fingerprints: BTreeMap<u64, Digest128>,
    pub sink: S,
}

const FAILURES_BEFORE_CHECKPOINT: u32 = 3;

impl<S: SnapshotSink + 'static> CaptureSession<S> {
    pub fn new(config: CaptureConfig, sink: S) -> Result<Self, CaptureError> {
        let engine = DeltaEngine::new(config.strategy);
        Self::with_engine(
            config,
            sink,
            engine,
            SessionStart {
                next_version: 1,
                persisted_base: None,
            },
        )
    }

    /// `engine` may carry an adopted baseline (see
    /// [`DeltaEngine::adopt_base`]) whose version is `start.persisted_base`.
    pub fn with_engine(
        config: CaptureConfig,
        sink: S,
        engine: DeltaEngine,
        start: SessionStart,
    ) -> Result<Self, CaptureError> {
        config.validate()?;
        let mut status = WriterStatus::default();
        if let Some(b) = start.persisted_base {
            status.persisted_set.insert(b);
        }
        let status = Arc::new(Mutex::new(status));
        let core = WriterCore {
            sink,
            status: Arc::clone(&status),
            faults: ChaCha8Rng::seed_from_u64(config.faults.seed ^ 0x53_544f_5245),
            store_fault: config.faults.store,
        };
        let writer = if config.queue_depth == 0 {
            Writer::Sync(core)
        } else {
            let (tx, rx) = mpsc::sync_channel::<Job>(config.queue_depth);
            let abort = Arc::new(AtomicBool::new(false));
            let stop = Arc::clone(&abort);
            let handle = thread::Builder::new()
                .name("dart-writer".into())
                .spawn(move || {
                    let mut core = core;
                    for job in rx {
                        if stop.load(Ordering::SeqCst) {
                            break;
                        }
                        core.write(job);
                    }
                    core
                })
                .expect("spawn writer thread");
            Writer::Async {
                tx: Some(tx),
                handle: Some(handle),
                abort,
            }
        };
        let now = Instant::now();
        Ok(CaptureSession {
            period: config.trigger,
            controller: config.overhead_budget.map(AdaptiveController::new),
            fault_rng: ChaCha8Rng::seed_from_u64(config.faults.seed),
            config,
            engine,
            writer,
            status,
            next_version: start.next_version.max(1),
            ordinal: 0,
            consecutive_failures: 0,
            seen_failures: 0,
            last_fire_statement: 0,
            last_fire_time: now,
            last_tick: now,
            last_statement: 0,
            stats: CaptureStats::default(),
            fingerprints: BTreeMap::new(),
        })
    }

    /// Sets the statement index counting starts from (a resumed VM).
    pub fn starting_statement(mut self, statement_index: u64) -> Self {
        self.last_fire_statement = statement_index;
        self.last_statement = statement_index;
        self
    }

    pub fn stats(&self) -> &CaptureStats {
        &self.stats
    }

    pub fn engine(&self) -> &DeltaEngine {
        &self.engine
    }

    pub fn current_period(&self) -> Trigger {
        self.period
    }

    fn due(&self, vm: &Vm) -> bool {
        match self.period {
            Trigger::EveryStatements(k) => vm.statement_index() - self.last_fire_statement >= k,
            Trigger::EveryMillis(t) => self.last_fire_time.elapsed() >= Duration::from_millis(t),
        }
    }

    fn poll_writer(&mut self) {
        let n = self.status.lock().unwrap().failures.len();
        if n > self.seen_failures {
            self.seen_failures = n;
            // The baseline may never reach the store: restart the chain.
            self.engine.reset_base();
        }
    }

    fn enqueue(&mut self, job: Job) -> Result<(), String> {
        match &mut self.writer {
            Writer::Sync(core) => {
                core.write(job);
                Ok(())
            }
            Writer::Async { tx, .. } => {
                let tx = tx.as_ref().expect("open session");
                let job = match tx.try_send(job) {
                    Err(TrySendError::Full(job)) => {
                        // Give a runnable writer one chance before skipping.
                        thread::yield_now();
                        job
                    }
                    other => return other.map_err(|_| "store-failure: writer gone".into()),
                };
                match tx.try_send(job) {
                    Ok(()) => Ok(()),
                    Err(TrySendError::Full(_)) => Err("backpressure".into()),
                    Err(TrySendError::Disconnected(_)) => Err("store-failure: writer gone".into()),
                }
            }
        }
    }

    /// Takes one snapshot now, regardless of the trigger.
    pub fn snapshot(&mut self, vm: &Vm) -> SnapshotOutcome {
        let started = Instant::now();
        self.poll_writer();
        let version = self.next_version;
        self.next_version += 1;
        let force_full = self.ordinal.is_multiple_of(self.config.checkpoint_every)
            || self.consecutive_failures >= FAILURES_BEFORE_CHECKPOINT;
        self.ordinal += 1;
        let inject = self.config.faults.serialize > 0.0
            && self.fault_rng.gen_bool(self.config.faults.serialize);
        let fault = if inject {
            FaultPoint {
                fail_after_objects: Some(self.fault_rng.gen_range(0..4)),
            }
        } else {
            FaultPoint::NONE
        };

        let engine = &mut self.engine;
        let prepared: Result<Prepared, Failure> = guard(|| {
            let view = collect_frames(vm);
            let p = engine
                .prepare(&view, version, force_full, fault)
                .map_err(|e| format!("serialize-failure: {e}"))?;
            if inject {
                return Err("serialize-failure: injected".into());
            }
            Ok(p)
        });

        let mut stat = SnapshotStat {
            version,
            statement_index: vm.statement_index(),
            micros: 0,
            bytes: 0,
            persisted: false,
            reason: None,
            checkpoint: false,
            strategy: None,
        };
        let outcome = match prepared {
            Err(f) => {
                self.consecutive_failures += 1;
                stat.reason = Some(f.reason.clone());
                SnapshotOutcome::Skipped(f.reason)
            }
            Ok(mut p) => {
                stat.bytes = p.payload.len() as u64 + crate::store::FRAME_OVERHEAD;
                stat.checkpoint = p.is_checkpoint();
                stat.strategy = Some(p.header.strategy);
                let header = p.header;
                let payload = std::mem::take(&mut p.payload);
                match self.enqueue(Job { header, payload }) {
                    Ok(()) => {
                        self.engine.commit(p);
                        self.consecutive_failures = 0;
                        if self.config.record_fingerprints {
                            self.fingerprints.insert(version, vm.fingerprint());
                        }
                        stat.persisted = true;
                        SnapshotOutcome::Persisted(version)
                    }
                    Err(reason) => {
                        stat.reason = Some(reason.clone());
                        SnapshotOutcome::Skipped(reason)
                    }
                }
            }
        };
        match outcome {
            SnapshotOutcome::Persisted(_) => self.stats.taken += 1,
            SnapshotOutcome::Skipped(_) => self.stats.skipped += 1,
        }
        let micros = started.elapsed().as_micros() as u64;
        stat.micros = micros;
        self.stats.total_capture_micros += micros;
        self.stats.entries.push(stat);
        outcome
    }

    fn replan(&mut self) {
        let Some(ctl) = &self.controller else { return };
        self.period = match self.period {
            Trigger::EveryStatements(_) => ctl.k().map_or(self.period, Trigger::EveryStatements),
            Trigger::EveryMillis(_) => ctl.t_millis().map_or(self.period, Trigger::EveryMillis),
        };
    }

    fn tick(&mut self, vm: &Vm) {
        let now = Instant::now();
        let micros = now.duration_since(self.last_tick).as_secs_f64() * 1e6;
        let stmts = vm.statement_index().saturating_sub(self.last_statement);
        self.stats.total_vm_micros += micros as u64;
        if let Some(ctl) = &mut self.controller {
            ctl.observe_vm(micros, stmts);
        }
        self.last_statement = vm.statement_index();
    }

    fn fire(&mut self, vm: &Vm) {
        self.last_fire_statement = vm.statement_index();
        self.last_fire_time = Instant::now();
        let before = self.stats.total_capture_micros;
        self.snapshot(vm);
        if let Some(ctl) = &mut self.controller {
            ctl.observe_capture((self.stats.total_capture_micros - before) as f64);
        }
        self.replan();
        self.last_tick = Instant::now();
    }

    /// Stops the writer without draining or closing the sink, as if the
    /// process died. Versions acknowledged so far stay persisted.
    pub fn abandon(mut self) -> Result<SessionReport<S>, CaptureError> {
        if let Writer::Async { abort, .. } = &self.writer {
            abort.store(true, Ordering::SeqCst);
        }
        let core = self.stop_writer()?;
        self.reconcile();
        Ok(SessionReport {
            stats: self.stats,
            fingerprints: self.fingerprints,
            sink: core.sink,
        })
    }

    /// Drains pending jobs, closes the sink and reconciles stats with what
    /// the writer actually persisted.
    pub fn finish(mut self) -> Result<SessionReport<S>, CaptureError> {
        let mut core = self.stop_writer()?;
        self.reconcile();
        core.sink.close().map_err(CaptureError::Close)?;
        Ok(SessionReport {
            stats: self.stats,
            fingerprints: self.fingerprints,
            sink: core.sink,
        })
    }

    fn stop_writer(&mut self) -> Result<WriterCore<S>, CaptureError> {
        let placeholder = Writer::Async {
            tx: None,
            handle: None,
            abort: Arc::new(AtomicBool::new(true)),
        };
        match std::mem::replace(&mut self.writer, placeholder) {
            Writer::Sync(core) => Ok(core),
            Writer::Async { tx, handle, .. } => {
                drop(tx);
                handle
                    .expect("writer running")
                    .join()
                    .map_err(|_| CaptureError::WriterPanicked)
            }
        }
    }

    fn reconcile(&mut self) {
        let st = self.status.lock().unwrap();
        let failures: BTreeMap<u64, &String> = st.failures.iter().map(|(v, r)| (*v, r)).collect();
        for e in &mut self.stats.entries {
            if !e.persisted {
                continue;
            }
            if !st.persisted_set.contains(&e.version) {
                e.persisted = false;
                e.reason = Some(
                    failures
                        .get(&e.version)
                        .map(|r| r.to_string())
                        .unwrap_or_else(|| "abandoned before write".into()),
                );
                self.fingerprints.remove(&e.version);
            }
        }
        self.stats.taken = self.stats.entries.iter().filter(|e| e.persisted).count() as u64;
        self.stats.skipped = self.stats.entries.len() as u64 - self.stats.taken;
    }
}

impl<S: SnapshotSink + 'static> StepHook for CaptureSession<S> {
    fn after_statement(&mut self, vm: &Vm) -> HookAction {
        self.tick(vm);
        if self.due(vm) {
            self.fire(vm);
        }
        HookAction::Continue
    }

    fn finished(&mut self, vm: &Vm) {
        self.tick(vm);
        let last = self.stats.entries.iter().rev().find(|e| e.persisted);
        let covered = last.is_some_and(|e| e.statement_index == vm.statement_index());
        if self.config.final_snapshot && !covered {
            self.fire(vm);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delta::{DeltaSet, MaterializedState};
    use crate::vm::{parse, NoHook, RunOutcome};

    const SRC: &str = "
let xs = []
repeat 30 { push xs blob(32, rand(5)) }
let m = {\"n\": 0}
repeat 30 { set m[\"n\"] = rand(100)\nset xs[rand(30)] = blob(16, 1) }
";

    fn vm() -> Vm {
        Vm::new(Arc::new(parse(SRC).unwrap()), 9)
    }

    fn config(k: u64) -> CaptureConfig {
        CaptureConfig {
            trigger: Trigger::EveryStatements(k),
            record_fingerprints: true,
            queue_depth: 0,
            ..CaptureConfig::default()
        }
    }

    fn replay(records: &[(DeltaHeader, Vec<u8>)]) -> BTreeMap<u64, Digest128> {
        let mut states: BTreeMap<u64, MaterializedState> = BTreeMap::new();
        let mut out = BTreeMap::new();
        for (h, payload) in records {
            let d = DeltaSet::decode(payload).unwrap();
            let mut m = match h.base_version {
                None => MaterializedState::new(),
                Some(b) => states[&b].clone(),
            };
            m.apply(&d).unwrap();
            out.insert(h.version, m.fingerprint());
            states.insert(h.version, m);
        }
        out
    }

    #[test]
    fn view_counts_frames_and_bindings() {
        let mut m = Vm::new(Arc::new(parse("fn f() { let a = 1\nlet b = 2 }\nlet x = 1\nlet y = 2\ncall f()").unwrap()), 1);
        m.step().unwrap();
        m.step().unwrap();
        let v = collect_frames(&m);
        assert_eq!((v.frames.len(), v.frames[0].bindings.len()), (1, 2));
        m.step().unwrap();
        let v = collect_frames(&m);
        assert_eq!(v.frames.len(), 2);
        assert_eq!(v.frames[1].function, "f");
    }

    #[test]
    fn statement_trigger_fires_on_multiples() {
        let mut m = vm();
        let mut s = CaptureSession::new(config(10), MemorySink::default()).unwrap();
        m.run(&mut s).unwrap();
        let r = s.finish().unwrap();
        let idx: Vec<u64> = r.stats.entries.iter().map(|e| e.statement_index).collect();
        assert_eq!(&idx[..3], &[10, 20, 30]);
        assert_eq!(*idx.last().unwrap(), m.statement_index());
    }

    #[test]
    fn capture_does_not_change_the_run() {
        let mut plain = vm();
        let mut per_step = Vec::new();
        plain
            .run(&mut |v: &Vm| {
                per_step.push(v.fingerprint());
                HookAction::Continue
            })
            .unwrap();
        let mut captured = vm();
        let mut s = CaptureSession::new(config(3), MemorySink::default()).unwrap();
        let mut i = 0;
        let mut both = |v: &Vm| {
            assert_eq!(v.fingerprint(), per_step[i]);
            i += 1;
            s.after_statement(v)
        };
        captured.run(&mut both).unwrap();
        assert_eq!(captured.fingerprint(), plain.fingerprint());
    }

    #[test]
    fn every_version_restores_under_faults() {
        for strategy in [StrategyChoice::Serial, StrategyChoice::IdGraph, StrategyChoice::Auto] {
            for depth in [0, 2] {
                let mut m = vm();
                let cfg = CaptureConfig {
                    strategy,
                    queue_depth: depth,
                    faults: FaultPlan {
                        serialize: 0.3,
                        store: 0.2,
                        seed: 4,
                    },
                    ..config(2)
                };
                let mut s = CaptureSession::new(cfg, MemorySink::default()).unwrap();
                m.run(&mut s).unwrap();
                let r = s.finish().unwrap();
                assert!(r.stats.skipped > 0);
                let persisted: HashSet<u64> = r.sink.records.iter().map(|(h, _)| h.version).collect();
                for (h, _) in &r.sink.records {
                    if let Some(b) = h.base_version {
                        assert!(persisted.contains(&b));
                    }
                }
                let restored = replay(&r.sink.records);
                assert_eq!(restored, r.fingerprints);
                assert_eq!(r.stats.persisted_versions(), restored.keys().copied().collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn checkpoint_cadence() {
        let mut m = vm();
        let cfg = CaptureConfig {
            trigger: Trigger::EveryStatements(1),
            checkpoint_every: 16,
            final_snapshot: false,
            ..config(1)
        };
        let mut s = CaptureSession::new(cfg, MemorySink::default()).unwrap();
        let mut n = 0;
        m.run(&mut |v: &Vm| {
            n += 1;
            s.after_statement(v);
            if n == 40 {
                HookAction::Stop
            } else {
                HookAction::Continue
            }
        })
        .unwrap();
        let r = s.finish().unwrap();
        let cps: Vec<u64> = r
            .sink
            .records
            .iter()
            .filter(|(h, _)| h.base_version.is_none())
            .map(|(h, _)| h.version)
            .collect();
        assert_eq!(cps, [1, 17, 33]);
    }

    #[test]
    fn repeated_failures_force_checkpoint() {
        struct Flaky(u32, MemorySink);
        impl SnapshotSink for Flaky {
            fn persist(&mut self, h: &DeltaHeader, p: &[u8]) -> Result<(), String> {
                self.0 += 1;
                if (2..=4).contains(&self.0) {
                    panic!("disk on fire");
                }
                self.1.persist(h, p)
            }
        }
        let mut m = vm();
        let mut s = CaptureSession::new(config(5), Flaky(0, MemorySink::default())).unwrap();
        m.run(&mut s).unwrap();
        let r = s.finish().unwrap();
        assert!(r.stats.entries[1].reason.as_deref().unwrap().contains("disk on fire"));
        let records = &r.sink.1.records;
        assert_eq!(records[1].0.base_version, None);
        assert_eq!(replay(records), r.fingerprints);
    }

    #[test]
    fn guard_contains_panics() {
        assert_eq!(guard(|| Ok::<_, String>(3)), Ok(3));
        let e = guard::<()>(|| panic!("boom")).unwrap_err();
        assert!(e.reason.contains("boom"));
        assert_eq!(guard::<()>(|| Err("x".into())).unwrap_err().reason, "x");
    }

    #[test]
    fn controller_formula() {
        // c = 9 ms, v = 0.1 ms/statement, rho = 0.1.
        assert_eq!(AdaptiveController::k_for(9000.0, 100.0, 0.1), 900);
        assert_eq!(AdaptiveController::k_for(0.0, 100.0, 0.1), K_MIN);
        assert_eq!(AdaptiveController::k_for(1e12, 1.0, 0.01), K_MAX);
        assert_eq!(AdaptiveController::k_for(18000.0, 100.0, 0.1), 1800);
        assert_eq!(AdaptiveController::t_for(9000.0, 0.1), 90);
        assert_eq!(AdaptiveController::t_for(1.0, 1.0), T_MIN_MS);
        assert_eq!(AdaptiveController::t_for(1e12, 0.1), T_MAX_MS);

        let mut ctl = AdaptiveController::new(0.1);
        assert_eq!(ctl.k(), None);
        ctl.observe_vm(1000.0, 10);
        ctl.observe_capture(9000.0);
        assert_eq!(ctl.k(), Some(900));
        ctl.observe_capture(19000.0);
        // 0.3 * 19000 + 0.7 * 9000 = 12000
        assert_eq!(ctl.k(), Some(1200));
    }

    #[test]
    fn simulated_budget_holds() {
        for (c, v, rho) in [(9000.0, 100.0, 0.1), (500.0, 3.0, 0.05), (10.0, 10.0, 0.5)] {
            let f = simulate_capture_fraction(c, v, rho, 200_000);
            assert!(f <= 1.5 * rho, "c={c} v={v} rho={rho}: {f}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            CaptureConfig { trigger: Trigger::EveryStatements(0), ..Default::default() },
            CaptureConfig { trigger: Trigger::EveryMillis(0), ..Default::default() },
            CaptureConfig { overhead_budget: Some(0.0), ..Default::default() },
            CaptureConfig { checkpoint_every: 0, ..Default::default() },
        ] {
            assert!(CaptureSession::new(cfg, CountingSink::default()).is_err());
        }
    }

    #[test]
    fn abandon_keeps_acked_versions() {
        let mut m = vm();
        let mut s = CaptureSession::new(
            CaptureConfig { queue_depth: 2, ..config(4) },
            MemorySink::default(),
        )
        .unwrap();
        let mut n = 0;
        let out = m
            .run(&mut |v: &Vm| {
                n += 1;
                s.after_statement(v);
                if n == 50 { HookAction::Stop } else { HookAction::Continue }
            })
            .unwrap();
        assert_eq!(out, RunOutcome::Stopped);
        let r = s.abandon().unwrap();
        let written: Vec<u64> = r.sink.records.iter().map(|(h, _)| h.version).collect();
        assert_eq!(r.stats.persisted_versions(), written);
        assert_eq!(replay(&r.sink.records).len(), written.len());
        let _ = NoHook;
    }
}
