//! Read path: materialize any persisted version, resume execution from it,
//! replay to an arbitrary statement, and diff two versions. Also the
//! write-side driver that runs a program under capture into a store.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::capture::{
    collect_frames, CaptureConfig, CaptureError, CaptureSession, CaptureStats, SessionStart,
    StateView,
};
use crate::delta::canonical::encode_node;
use crate::delta::engine::DeltaEngine;
use crate::delta::{DeltaError, MaterializedState, RootKey, SerializeError};
use crate::digest::Digest128;
use crate::heap::{Heap, ObjectId, ObjectKind, Value};
use crate::store::{ProgramRecord, Store, StoreError, StoreOptions, StoreReader};
use crate::vm::{
    parse, HookAction, Program, RestoreError, RunOutcome, RuntimeError, StepHook, StepOutcome,
    SyntaxError, Vm,
};

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("version {version}: {source}")]
    Delta { version: u64, source: DeltaError },
    #[error("restore: {0}")]
    Restore(#[from] RestoreError),
    #[error("program digest {found} does not match the stored program {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error("syntax error in program: {0}")]
    Syntax(#[from] SyntaxError),
    #[error("program ends at statement {ended_at}, before target {target}")]
    TargetUnreachable { target: u64, ended_at: u64 },
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error("cannot adopt restored state: {0}")]
    Adopt(#[from] SerializeError),
}

/// Rebuilds the full state of `version`: its checkpoint plus every delta
/// on the chain, applied in order.
pub fn materialize(reader: &StoreReader, version: u64) -> Result<MaterializedState, RecoveryError> {
    let mut state = MaterializedState::new();
    for delta in reader.read_chain(version)? {
        let v = delta.version;
        state
            .apply(&delta)
            .map_err(|source| RecoveryError::Delta { version: v, source })?;
    }
    Ok(state)
}

fn check_program(reader: &StoreReader, program: &Program) -> Result<ProgramRecord, RecoveryError> {
    let stored = reader.program()?;
    if stored.digest != program.source_digest {
        return Err(RecoveryError::DigestMismatch {
            expected: stored.digest.to_hex(),
            found: program.source_digest.to_hex(),
        });
    }
    Ok(stored)
}

/// Settings for a capture-enabled run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: u64,
    pub capture: CaptureConfig,
    pub store: StoreOptions,
    /// Simulate a process kill once this statement has executed: the
    /// session is abandoned without draining or closing the store.
    pub kill_after_statement: Option<u64>,
}

/// What a run (or resumed run) leaves behind.
#[derive(Debug)]
pub struct RunReport {
    pub vm: Vm,
    /// `Stopped` means the run was killed.
    pub outcome: Result<RunOutcome, RuntimeError>,
    pub stats: CaptureStats,
    /// Live fingerprints of persisted versions, when recorded.
    pub fingerprints: BTreeMap<u64, Digest128>,
    /// Version the run was resumed from, if any.
    pub resumed_from: Option<u64>,
}

impl RunReport {
    pub fn killed(&self) -> bool {
        matches!(self.outcome, Ok(RunOutcome::Stopped))
    }
}

struct Killable<'a, S: crate::capture::SnapshotSink + 'static> {
    session: &'a mut CaptureSession<S>,
    kill_after: Option<u64>,
}

impl<S: crate::capture::SnapshotSink + 'static> StepHook for Killable<'_, S> {
    fn after_statement(&mut self, vm: &Vm) -> HookAction {
        let action = self.session.after_statement(vm);
        match self.kill_after {
            Some(k) if vm.statement_index() >= k => HookAction::Stop,
            _ => action,
        }
    }

    fn finished(&mut self, vm: &Vm) {
        self.session.finished(vm);
    }
}

fn drive(
    mut vm: Vm,
    mut session: CaptureSession<Store>,
    kill_after: Option<u64>,
    resumed_from: Option<u64>,
) -> Result<RunReport, RecoveryError> {
    let mut hook = Killable {
        session: &mut session,
        kill_after,
    };
    let outcome = vm.run(&mut hook);
    let report = if matches!(outcome, Ok(RunOutcome::Stopped)) {
        session.abandon()?
    } else {
        session.finish()?
    };
    Ok(RunReport {
        vm,
        outcome,
        stats: report.stats,
        fingerprints: report.fingerprints,
        resumed_from,
    })
}

/// Runs `source` from the start with capture into the store at `dir`
/// (created if absent).
pub fn run_captured(
    dir: impl AsRef<Path>,
    source: &str,
    options: &RunOptions,
) -> Result<RunReport, RecoveryError> {
    let program = Arc::new(parse(source)?);
    let mut store = Store::open_or_create(dir, options.store)?;
    let record = ProgramRecord {
        source: source.to_string(),
        digest: program.source_digest,
        seed: options.seed,
    };
    if let Some(d) = &store.manifest().program_digest {
        if *d != record.digest.to_hex() {
            return Err(RecoveryError::DigestMismatch {
                expected: d.clone(),
                found: record.digest.to_hex(),
            });
        }
    }
    store.write_program(&record)?;
    let start = SessionStart {
        next_version: store.manifest().latest_version().map_or(1, |v| v + 1),
        persisted_base: None,
    };
    let engine = DeltaEngine::new(options.capture.strategy);
    let session = CaptureSession::with_engine(options.capture.clone(), store, engine, start)?;
    let mut vm = Vm::new(program, options.seed);
    vm.set_logging(false);
    drive(vm, session, options.kill_after_statement, None)
}

/// Restores `version` (the latest persisted one when `None`) and runs the
/// program to completion, continuing capture into the same store.
pub fn resume(
    dir: impl AsRef<Path>,
    version: Option<u64>,
    source: &str,
    options: &RunOptions,
) -> Result<RunReport, RecoveryError> {
    let program = Arc::new(parse(source)?);
    let store = Store::open(dir, options.store)?;
    let reader = store.reader().clone();
    check_program(&reader, &program)?;
    let version = match version {
        Some(v) => v,
        None => reader
            .latest_snapshot()
            .map(|e| e.version)
            .ok_or(StoreError::NoCheckpoint)?,
    };
    let state = materialize(&reader, version)?;
    let (mut vm, pids) = state.to_vm(Arc::clone(&program))?;
    vm.set_logging(false);
    let mut engine = DeltaEngine::with_pids(options.capture.strategy, pids);
    engine.adopt_base(&collect_frames(&vm), version)?;
    let start = SessionStart {
        next_version: reader.manifest().latest_version().unwrap_or(0) + 1,
        persisted_base: Some(version),
    };
    let session = CaptureSession::with_engine(options.capture.clone(), store, engine, start)?
        .starting_statement(vm.statement_index());
    drive(vm, session, options.kill_after_statement, Some(version))
}

/// Restores `version` and runs to completion without capture. Read-only
/// over the store.
pub fn resume_detached(
    reader: &StoreReader,
    version: u64,
    source: &str,
) -> Result<Vm, RecoveryError> {
    let program = Arc::new(parse(source)?);
    check_program(reader, &program)?;
    let (mut vm, _) = materialize(reader, version)?.to_vm(program)?;
    vm.set_logging(false);
    vm.run(&mut crate::vm::NoHook)?;
    Ok(vm)
}

/// State after statement `target`: the latest snapshot at or before it,
/// then re-execution of the remaining statements. Without such a snapshot
/// the program is re-run from the start with the stored seed.
pub fn replay_to_statement(
    reader: &StoreReader,
    source: &str,
    target: u64,
) -> Result<Vm, RecoveryError> {
    let program = Arc::new(parse(source)?);
    let stored = check_program(reader, &program)?;
    let base = reader
        .manifest()
        .snapshot_entries()
        .filter(|e| e.statement_index <= target)
        .max_by_key(|e| (e.statement_index, e.version))
        .map(|e| e.version);
    let mut vm = match base {
        Some(v) => materialize(reader, v)?.to_vm(program)?.0,
        None => Vm::new(program, stored.seed),
    };
    vm.set_logging(false);
    while vm.statement_index() < target {
        if vm.step()? == StepOutcome::Finished {
            return Err(RecoveryError::TargetUnreachable {
                target,
                ended_at: vm.statement_index(),
            });
        }
    }
    Ok(vm)
}

/// One changed object between two versions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ObjectChange {
    pub pid: u64,
    pub kind: &'static str,
    pub old_bytes: Option<u64>,
    pub new_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RootChange {
    pub frame: u32,
    pub name: String,
    pub old: Option<String>,
    pub new: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DiffReport {
    pub from: u64,
    pub to: u64,
    pub added_roots: Vec<RootChange>,
    pub removed_roots: Vec<RootChange>,
    pub rebound_roots: Vec<RootChange>,
    pub added_objects: Vec<ObjectChange>,
    pub removed_objects: Vec<ObjectChange>,
    pub changed_objects: Vec<ObjectChange>,
}

impl DiffReport {
    pub fn is_empty(&self) -> bool {
        self.added_roots.is_empty()
            && self.removed_roots.is_empty()
            && self.rebound_roots.is_empty()
            && self.added_objects.is_empty()
            && self.removed_objects.is_empty()
            && self.changed_objects.is_empty()
    }

    pub fn to_text(&self) -> String {
        if self.is_empty() {
            return format!("{} -> {}: no changes\n", self.from, self.to);
        }
        let mut out = format!("{} -> {}\n", self.from, self.to);
        let root = |r: &RootChange| format!("{}[{}]", r.name, r.frame);
        for r in &self.added_roots {
            out += &format!("+ root {} = {}\n", root(r), r.new.as_deref().unwrap_or(""));
        }
        for r in &self.removed_roots {
            out += &format!("- root {} (was {})\n", root(r), r.old.as_deref().unwrap_or(""));
        }
        for r in &self.rebound_roots {
            out += &format!(
                "~ root {}: {} -> {}\n",
                root(r),
                r.old.as_deref().unwrap_or(""),
                r.new.as_deref().unwrap_or("")
            );
        }
        let size = |b: Option<u64>| b.map_or("-".to_string(), |b| format!("{b} B"));
        for o in &self.added_objects {
            out += &format!("+ {} #{} {}\n", o.kind, o.pid, size(o.new_bytes));
        }
        for o in &self.removed_objects {
            out += &format!("- {} #{} {}\n", o.kind, o.pid, size(o.old_bytes));
        }
        for o in &self.changed_objects {
            out += &format!(
                "~ {} #{} {} -> {}\n",
                o.kind,
                o.pid,
                size(o.old_bytes),
                size(o.new_bytes)
            );
        }
        out
    }
}

fn describe(v: &Value) -> String {
    match v {
        Value::Int(i) => i.to_string(),
        Value::Float(f) => format!("{f:?}"),
        Value::Bool(b) => b.to_string(),
        Value::Str(s) => format!("{s:?}"),
        Value::Ref(id) => format!("#{}", id.0),
    }
}

/// Shallow encoded form of every object reachable in `state`, keyed by pid.
/// Restored object ids are pids, so this is comparable across versions.
fn shallow_nodes(state: &MaterializedState) -> BTreeMap<u64, (&'static str, Vec<u8>)> {
    let view = StateView {
        frames: state.frames.clone(),
        heap: &state.heap,
        rng: state.rng,
        statement_index: state.statement_index,
    };
    let roots = view
        .frames
        .iter()
        .flat_map(|f| f.bindings.values())
        .filter_map(Value::as_ref_id);
    let mut out = BTreeMap::new();
    for id in view.heap.reachable(roots) {
        let node = view.heap.get(id).expect("reachable object");
        let mut bytes = Vec::new();
        encode_node(&mut bytes, id.0, &node.kind, &mut |c: ObjectId| c.0);
        out.insert(id.0, (node.kind.tag().name(), bytes));
    }
    out
}

/// Compares two materialized versions: roots by binding, objects by pid
/// and shallow content.
pub fn diff_states(a: &MaterializedState, b: &MaterializedState, from: u64, to: u64) -> DiffReport {
    let mut report = DiffReport {
        from,
        to,
        ..DiffReport::default()
    };
    let ra = a.roots();
    let rb = b.roots();
    let change = |k: &RootKey, old: Option<&Value>, new: Option<&Value>| RootChange {
        frame: k.0,
        name: k.1.clone(),
        old: old.map(describe),
        new: new.map(describe),
    };
    for (k, v) in &rb {
        match ra.get(k) {
            None => report.added_roots.push(change(k, None, Some(v))),
            Some(old) if old != v => report.rebound_roots.push(change(k, Some(old), Some(v))),
            Some(_) => {}
        }
    }
    for (k, v) in &ra {
        if !rb.contains_key(k) {
            report.removed_roots.push(change(k, Some(v), None));
        }
    }
    let na = shallow_nodes(a);
    let nb = shallow_nodes(b);
    let pids: BTreeSet<u64> = na.keys().chain(nb.keys()).copied().collect();
    for pid in pids {
        let old = na.get(&pid);
        let new = nb.get(&pid);
        let entry = |kind| ObjectChange {
            pid,
            kind,
            old_bytes: old.map(|o| o.1.len() as u64),
            new_bytes: new.map(|n| n.1.len() as u64),
        };
        match (old, new) {
            (None, Some(n)) => report.added_objects.push(entry(n.0)),
            (Some(o), None) => report.removed_objects.push(entry(o.0)),
            (Some(o), Some(n)) if o != n => report.changed_objects.push(entry(n.0)),
            _ => {}
        }
    }
    report
}

pub fn diff_versions(reader: &StoreReader, v1: u64, v2: u64) -> Result<DiffReport, RecoveryError> {
    let a = materialize(reader, v1)?;
    let b = materialize(reader, v2)?;
    Ok(diff_states(&a, &b, v1, v2))
}

/// Renders a value as JSON. Objects already on the current path, and
/// objects seen before, are written as `{"$ref": pid}`.
pub fn value_to_json(heap: &Heap, v: &Value) -> serde_json::Value {
    fn go(heap: &Heap, v: &Value, seen: &mut HashSet<ObjectId>) -> serde_json::Value {
        use serde_json::json;
        match v {
            Value::Int(i) => json!(i),
            Value::Float(f) => serde_json::Number::from_f64(*f)
                .map(serde_json::Value::Number)
                .unwrap_or_else(|| json!(f.to_string())),
            Value::Bool(b) => json!(b),
            Value::Str(s) => json!(s),
            Value::Ref(id) => {
                if !seen.insert(*id) {
                    return json!({ "$ref": id.0 });
                }
                match heap.get(*id).map(|n| &n.kind) {
                    Err(_) => json!({ "$dangling": id.0 }),
                    Ok(ObjectKind::List(items)) => {
                        serde_json::Value::Array(items.iter().map(|x| go(heap, x, seen)).collect())
                    }
                    Ok(ObjectKind::Map(entries)) => serde_json::Value::Object(
                        entries
                            .iter()
                            .map(|(k, x)| (k.clone(), go(heap, x, seen)))
                            .collect(),
                    ),
                    Ok(ObjectKind::Blob(bytes)) => {
                        let digest = Digest128::of(bytes);
                        json!({ "blob": bytes.len(), "digest": digest.to_hex() })
                    }
                }
            }
        }
    }
    go(heap, v, &mut HashSet::new())
}

/// Global bindings rendered as one JSON object: the observable output of a
/// program.
pub fn globals_json(vm: &Vm) -> serde_json::Value {
    let mut out = serde_json::Map::new();
    if let Some(g) = vm.frames().first() {
        for (name, v) in &g.bindings {
            out.insert(name.clone(), value_to_json(vm.heap(), v));
        }
    }
    serde_json::Value::Object(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::Trigger;
    use crate::vm::NoHook;

    const SRC: &str = "
let xs = []
repeat 25 { push xs blob(16, rand(9)) }
let m = {\"n\": 0}
repeat 25 { set m[\"n\"] = rand(50)\nset xs[rand(25)] = blob(8, rand(3)) }
";

    fn opts(k: u64) -> RunOptions {
        RunOptions {
            seed: 5,
            capture: CaptureConfig {
                trigger: Trigger::EveryStatements(k),
                record_fingerprints: true,
                queue_depth: 0,
                ..CaptureConfig::default()
            },
            ..RunOptions::default()
        }
    }

    fn plain(seed: u64) -> Vm {
        let mut vm = Vm::new(Arc::new(parse(SRC).unwrap()), seed);
        vm.run(&mut NoHook).unwrap();
        vm
    }

    #[test]
    fn materialize_matches_recorded_fingerprints() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_captured(dir.path(), SRC, &opts(5)).unwrap();
        let reader = StoreReader::open(dir.path()).unwrap();
        assert_eq!(reader.versions().len(), r.fingerprints.len());
        for (v, fp) in &r.fingerprints {
            assert_eq!(materialize(&reader, *v).unwrap().fingerprint(), *fp);
        }
        assert!(matches!(
            materialize(&reader, 999),
            Err(RecoveryError::Store(StoreError::UnknownVersion(999)))
        ));
    }

    #[test]
    fn kill_and_resume_matches_uninterrupted() {
        let expected = plain(5).fingerprint();
        let dir = tempfile::tempdir().unwrap();
        let killed = run_captured(
            dir.path(),
            SRC,
            &RunOptions {
                kill_after_statement: Some(37),
                ..opts(5)
            },
        )
        .unwrap();
        assert!(killed.killed());
        let resumed = resume(dir.path(), None, SRC, &opts(5)).unwrap();
        assert_eq!(resumed.resumed_from, Some(7));
        assert_eq!(resumed.vm.fingerprint(), expected);
        // The continued chain is itself restorable.
        let reader = StoreReader::open(dir.path()).unwrap();
        for (v, fp) in &resumed.fingerprints {
            assert_eq!(materialize(&reader, *v).unwrap().fingerprint(), *fp);
        }
        let first = resume_detached(&reader, 1, SRC).unwrap();
        assert_eq!(first.fingerprint(), expected);
    }

    #[test]
    fn edited_program_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        run_captured(dir.path(), SRC, &opts(5)).unwrap();
        let edited = format!("{SRC}\nlet extra = 1");
        assert!(matches!(
            resume(dir.path(), Some(1), &edited, &opts(5)),
            Err(RecoveryError::DigestMismatch { .. })
        ));
    }

    #[test]
    fn replay_reaches_every_statement() {
        let program = Arc::new(parse(SRC).unwrap());
        let mut live = Vm::new(program, 5);
        let mut per_statement = vec![live.fingerprint()];
        live.run(&mut |vm: &Vm| {
            per_statement.push(vm.fingerprint());
            HookAction::Continue
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_captured(dir.path(), SRC, &opts(7)).unwrap();
        let reader = StoreReader::open(dir.path()).unwrap();
        for target in [0, 3, 7, 8, 20, 49, per_statement.len() as u64 - 1] {
            let vm = replay_to_statement(&reader, SRC, target).unwrap();
            assert_eq!(vm.fingerprint(), per_statement[target as usize], "target {target}");
        }
        let e = reader.entry(2).unwrap();
        let at = replay_to_statement(&reader, SRC, e.statement_index).unwrap();
        assert_eq!(at.fingerprint(), materialize(&reader, 2).unwrap().fingerprint());
        assert!(matches!(
            replay_to_statement(&reader, SRC, 10_000),
            Err(RecoveryError::TargetUnreachable { .. })
        ));
    }

    #[test]
    fn diff_reports_push_and_removal() {
        let src = "let x = [1]\nlet y = {\"a\": 1}\npush x 2\ndel y";
        let dir = tempfile::tempdir().unwrap();
        run_captured(dir.path(), src, &opts(1)).unwrap();
        let reader = StoreReader::open(dir.path()).unwrap();
        assert!(diff_versions(&reader, 2, 2).unwrap().is_empty());
        assert!(diff_versions(&reader, 2, 2).unwrap().to_text().contains("no changes"));

        let d = diff_versions(&reader, 2, 3).unwrap();
        let x_pid = match &materialize(&reader, 3).unwrap().roots()[&(0, "x".to_string())] {
            Value::Ref(id) => id.0,
            other => panic!("x is {other:?}"),
        };
        assert_eq!(d.changed_objects.len(), 1);
        assert_eq!(d.changed_objects[0].pid, x_pid);
        assert!(d.added_roots.is_empty() && d.removed_roots.is_empty() && d.rebound_roots.is_empty());

        let d = diff_versions(&reader, 3, 4).unwrap();
        assert_eq!(d.removed_roots.len(), 1);
        assert_eq!(d.removed_roots[0].name, "y");
        assert_eq!(d.removed_objects.len(), 1);
    }

    #[test]
    fn json_rendering_marks_shared_objects() {
        let src = "let c = [1]\nlet o = [c, c]";
        let mut vm = Vm::new(Arc::new(parse(src).unwrap()), 0);
        vm.run(&mut NoHook).unwrap();
        let g = globals_json(&vm);
        assert_eq!(g["c"], serde_json::json!([1]));
        let o = value_to_json(vm.heap(), vm.global("o").unwrap());
        assert_eq!(o[0], serde_json::json!([1]));
        assert!(o[1].get("$ref").is_some());
    }
}
