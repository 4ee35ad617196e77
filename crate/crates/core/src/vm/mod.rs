//! Deterministic statement-at-a-time interpreter for DartScript.
//!
//! Every primitive statement is one step: it either applies completely
//! (statement index + 1, one log entry) or fails and leaves heap, bindings,
//! RNG and cursor exactly as they were. Hooks run only between steps.

pub mod ast;
pub mod parser;
pub mod rng;

use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;

use indexmap::IndexMap;
use thiserror::Error;

pub use ast::{BlockId, Program, MAIN_BLOCK};
pub use parser::{parse, SyntaxError};
pub use rng::EngineRng;

use crate::digest::{Digest128, Hasher128};
use crate::heap::{Heap, HeapError, Mutation, ObjectKind, Value};
use ast::{BinOp, Expr, Stmt, StmtKind};

pub const GLOBAL_FRAME: &str = "<global>";
pub const MAX_FRAMES: usize = 256;
pub const MAX_BLOB_LEN: i64 = 1 << 30;
/// Binding read as the value of a function called in expression position.
pub const RESULT_BINDING: &str = "result";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopState {
    pub done: u64,
    pub total: u64,
}

/// One level of a cursor path. Outer levels point at the `repeat`
/// statement currently being iterated; the innermost level points at the
/// next statement to execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pos {
    pub block: BlockId,
    pub offset: u32,
    pub repeat: Option<LoopState>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cursor {
    pub path: Vec<Pos>,
}

impl Cursor {
    pub fn at_start(block: BlockId) -> Self {
        Cursor {
            path: vec![Pos {
                block,
                offset: 0,
                repeat: None,
            }],
        }
    }
}

impl fmt::Display for Cursor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.path.iter().enumerate() {
            if i > 0 {
                f.write_str("/")?;
            }
            write!(f, "b{}:{}", p.block, p.offset)?;
            if let Some(l) = p.repeat {
                write!(f, "({}/{})", l.done, l.total)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub function: String,
    pub bindings: IndexMap<String, Value>,
    pub cursor: Cursor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuntimeErrorKind {
    UnknownName,
    KindMismatch,
    IndexOutOfRange,
    DivisionByZero,
    RecursionLimit,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?} at line {line} (cursor {cursor}, statement {statement_index}): {message}")]
pub struct RuntimeError {
    pub kind: RuntimeErrorKind,
    pub message: String,
    pub cursor: Cursor,
    pub line: u32,
    /// Index the failed statement would have received.
    pub statement_index: u64,
}

#[derive(Debug)]
struct Fault {
    kind: RuntimeErrorKind,
    message: String,
}

fn fault(kind: RuntimeErrorKind, message: impl Into<String>) -> Fault {
    Fault {
        kind,
        message: message.into(),
    }
}

impl From<HeapError> for Fault {
    fn from(e: HeapError) -> Self {
        let kind = match e {
            HeapError::IndexOutOfRange { .. } | HeapError::MissingKey(_) => {
                RuntimeErrorKind::IndexOutOfRange
            }
            HeapError::UnknownObject(_) => RuntimeErrorKind::UnknownName,
            HeapError::KindMismatch { .. } | HeapError::DanglingRef(_) => {
                RuntimeErrorKind::KindMismatch
            }
        };
        fault(kind, e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub statement_index: u64,
    /// Top-frame cursor at which the statement started.
    pub cursor: Cursor,
    pub frame_depth: usize,
    pub line: u32,
    pub keyword: &'static str,
}

/// Redo log of executed primitive statements. Entries start at
/// `first_index` (1 for a fresh run, `k + 1` for a run restored at `k`).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StatementLog {
    pub first_index: u64,
    pub entries: Vec<LogEntry>,
}

impl StatementLog {
    pub fn get(&self, statement_index: u64) -> Option<&LogEntry> {
        let i = statement_index.checked_sub(self.first_index)?;
        self.entries.get(usize::try_from(i).ok()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Executed,
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookAction {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    Completed,
    /// A hook asked the run to stop at a statement boundary.
    Stopped,
}

/// Observer invoked on the VM thread between statements.
pub trait StepHook {
    fn after_statement(&mut self, vm: &Vm) -> HookAction;

    fn finished(&mut self, _vm: &Vm) {}
}

pub struct NoHook;

impl StepHook for NoHook {
    fn after_statement(&mut self, _vm: &Vm) -> HookAction {
        HookAction::Continue
    }
}

impl<F: FnMut(&Vm) -> HookAction> StepHook for F {
    fn after_statement(&mut self, vm: &Vm) -> HookAction {
        self(vm)
    }
}

#[derive(Debug, Error)]
pub enum RestoreError {
    #[error("invalid cursor: {0}")]
    InvalidCursor(String),
    #[error("dangling reference in restored bindings")]
    DanglingRef,
}

enum Effect {
    Advance,
    EnterRepeat { total: u64, body: BlockId },
    EnterCall,
}

#[derive(Clone)]
pub struct Vm {
    program: Arc<Program>,
    heap: Heap,
    frames: Vec<Frame>,
    rng: EngineRng,
    statement_index: u64,
    log: StatementLog,
    logging: bool,
}

impl fmt::Debug for Vm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vm")
            .field("statement_index", &self.statement_index)
            .field("frames", &self.frames.len())
            .field("objects", &self.heap.len())
            .field("rng", &self.rng)
            .finish()
    }
}

impl Vm {
    pub fn new(program: Arc<Program>, seed: u64) -> Self {
        let mut vm = Vm {
            program,
            heap: Heap::new(),
            frames: vec![Frame {
                function: GLOBAL_FRAME.to_string(),
                bindings: IndexMap::new(),
                cursor: Cursor::at_start(MAIN_BLOCK),
            }],
            rng: EngineRng::new(seed),
            statement_index: 0,
            log: StatementLog {
                first_index: 1,
                entries: Vec::new(),
            },
            logging: true,
        };
        vm.normalize();
        vm
    }

    /// Rebuilds a paused VM from restored parts, validating every cursor
    /// against the program and every binding against the heap.
    pub fn from_parts(
        program: Arc<Program>,
        heap: Heap,
        frames: Vec<Frame>,
        rng: EngineRng,
        statement_index: u64,
    ) -> Result<Self, RestoreError> {
        if frames.is_empty() || frames[0].function != GLOBAL_FRAME {
            return Err(RestoreError::InvalidCursor("missing global frame".into()));
        }
        if frames.len() > MAX_FRAMES {
            return Err(RestoreError::InvalidCursor("frame stack too deep".into()));
        }
        for (i, frame) in frames.iter().enumerate() {
            validate_cursor(&program, frame, i)?;
            for v in frame.bindings.values() {
                if let Value::Ref(id) = v {
                    if !heap.contains(*id) {
                        return Err(RestoreError::DanglingRef);
                    }
                }
            }
        }
        validate_call_chain(&program, &frames)?;
        Ok(Vm {
            program,
            heap,
            frames,
            rng,
            statement_index,
            log: StatementLog {
                first_index: statement_index + 1,
                entries: Vec::new(),
            },
            logging: true,
        })
    }

    /// Turns off the in-memory statement log (long benchmark runs).
    pub fn set_logging(&mut self, on: bool) {
        self.logging = on;
    }

    pub fn program(&self) -> &Arc<Program> {
        &self.program
    }

    pub fn heap(&self) -> &Heap {
        &self.heap
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn rng(&self) -> EngineRng {
        self.rng
    }

    pub fn statement_index(&self) -> u64 {
        self.statement_index
    }

    pub fn log(&self) -> &StatementLog {
        &self.log
    }

    pub fn global(&self, name: &str) -> Option<&Value> {
        self.frames[0].bindings.get(name)
    }

    pub fn is_finished(&self) -> bool {
        self.frames.len() == 1 && {
            let path = &self.frames[0].cursor.path;
            path.len() == 1 && path[0].offset as usize >= self.program.main().len()
        }
    }

    /// Digest of the canonical full-state encoding; independent of
    /// `ObjectId` numbering.
    pub fn fingerprint(&self) -> Digest128 {
        let mut h = Hasher128::new();
        crate::delta::canonical::write_state(
            &mut h,
            &self.frames,
            &self.heap,
            self.rng,
            self.statement_index,
        );
        h.finish()
    }

    pub fn step(&mut self) -> Result<StepOutcome, RuntimeError> {
        if self.is_finished() {
            return Ok(StepOutcome::Finished);
        }
        let program = Arc::clone(&self.program);
        let top = self.frames.len() - 1;
        let cursor = self.frames[top].cursor.clone();
        let pos = *cursor.path.last().expect("cursor path is never empty");
        let stmt = &program.blocks[pos.block as usize][pos.offset as usize];

        let saved_rng = self.rng;
        let saved_depth = self.frames.len();
        self.heap.begin();
        match self.execute(top, stmt) {
            Ok(effect) => {
                self.heap.commit();
                self.statement_index += 1;
                self.apply_effect(top, effect);
                self.normalize();
                if self.logging {
                    self.log.entries.push(LogEntry {
                        statement_index: self.statement_index,
                        cursor,
                        frame_depth: top + 1,
                        line: stmt.line,
                        keyword: stmt.kind.keyword(),
                    });
                }
                Ok(StepOutcome::Executed)
            }
            Err(f) => {
                self.heap.rollback();
                self.rng = saved_rng;
                self.frames.truncate(saved_depth);
                Err(RuntimeError {
                    kind: f.kind,
                    message: f.message,
                    cursor,
                    line: stmt.line,
                    statement_index: self.statement_index + 1,
                })
            }
        }
    }

    /// Steps to completion, calling `hook` after every successful statement.
    /// A panicking hook is contained and the run continues.
    pub fn run(&mut self, hook: &mut dyn StepHook) -> Result<RunOutcome, RuntimeError> {
        loop {
            if self.is_finished() {
                let vm = &*self;
                let _ = panic::catch_unwind(AssertUnwindSafe(|| hook.finished(vm)));
                return Ok(RunOutcome::Completed);
            }
            self.step()?;
            let vm = &*self;
            let action = panic::catch_unwind(AssertUnwindSafe(|| hook.after_statement(vm)))
                .unwrap_or(HookAction::Continue);
            if action == HookAction::Stop {
                return Ok(RunOutcome::Stopped);
            }
        }
    }

    fn apply_effect(&mut self, frame: usize, effect: Effect) {
        let path = &mut self.frames[frame].cursor.path;
        match effect {
            Effect::Advance => path.last_mut().unwrap().offset += 1,
            Effect::EnterRepeat { total, body } => {
                path.last_mut().unwrap().repeat = Some(LoopState { done: 0, total });
                path.push(Pos {
                    block: body,
                    offset: 0,
                    repeat: None,
                });
            }
            Effect::EnterCall => {}
        }
    }

    /// Unwinds finished blocks: loop iterations, loop exits and returns.
    fn normalize(&mut self) {
        loop {
            let depth = self.frames.len();
            let path = &mut self.frames[depth - 1].cursor.path;
            let inner = *path.last().unwrap();
            let len = self.program.blocks[inner.block as usize].len();
            if (inner.offset as usize) < len {
                return;
            }
            if path.len() > 1 {
                let parent = path.len() - 2;
                let state = path[parent].repeat.as_mut().expect("loop parent");
                state.done += 1;
                if state.done < state.total {
                    path.last_mut().unwrap().offset = 0;
                    return;
                }
                path.pop();
                let p = path.last_mut().unwrap();
                p.repeat = None;
                p.offset += 1;
            } else if depth > 1 {
                self.frames.pop();
                self.frames[depth - 2]
                    .cursor
                    .path
                    .last_mut()
                    .unwrap()
                    .offset += 1;
            } else {
                return;
            }
        }
    }

    fn lookup(&self, frame: usize, name: &str) -> Result<&Value, Fault> {
        self.frames[frame]
            .bindings
            .get(name)
            .or_else(|| self.frames[0].bindings.get(name))
            .ok_or_else(|| fault(RuntimeErrorKind::UnknownName, format!("unknown name `{name}`")))
    }

    fn lookup_object(&self, frame: usize, name: &str) -> Result<crate::heap::ObjectId, Fault> {
        match self.lookup(frame, name)? {
            Value::Ref(id) => Ok(*id),
            other => Err(fault(
                RuntimeErrorKind::KindMismatch,
                format!("`{name}` is a {}, not an object", other.type_name()),
            )),
        }
    }

    fn execute(&mut self, frame: usize, stmt: &Stmt) -> Result<Effect, Fault> {
        match &stmt.kind {
            StmtKind::Repeat { count, body } => {
                let total = self.eval_count(frame, count)?;
                let empty = self.program.blocks[*body as usize].is_empty();
                if total == 0 || empty {
                    Ok(Effect::Advance)
                } else {
                    Ok(Effect::EnterRepeat { total, body: *body })
                }
            }
            StmtKind::Call { name, args } => {
                let args = self.eval_args(frame, args)?;
                self.push_call_frame(name, args)?;
                Ok(Effect::EnterCall)
            }
            kind => {
                self.apply_simple(frame, kind)?;
                Ok(Effect::Advance)
            }
        }
    }

    fn eval_count(&mut self, frame: usize, count: &Expr) -> Result<u64, Fault> {
        match self.eval(frame, count)? {
            Value::Int(n) if n >= 0 => Ok(n as u64),
            Value::Int(n) => Err(fault(
                RuntimeErrorKind::IndexOutOfRange,
                format!("negative repeat count {n}"),
            )),
            v => Err(fault(
                RuntimeErrorKind::KindMismatch,
                format!("repeat count must be int, got {}", v.type_name()),
            )),
        }
    }

    fn eval_args(&mut self, frame: usize, args: &[Expr]) -> Result<Vec<Value>, Fault> {
        args.iter().map(|a| self.eval(frame, a)).collect()
    }

    fn push_call_frame(&mut self, name: &str, args: Vec<Value>) -> Result<(), Fault> {
        let func = self.program.functions.get(name).ok_or_else(|| {
            fault(RuntimeErrorKind::UnknownName, format!("unknown function `{name}`"))
        })?;
        if func.params.len() != args.len() {
            return Err(fault(
                RuntimeErrorKind::KindMismatch,
                format!("`{name}` takes {} arguments, got {}", func.params.len(), args.len()),
            ));
        }
        if self.frames.len() >= MAX_FRAMES {
            return Err(fault(
                RuntimeErrorKind::RecursionLimit,
                format!("call depth exceeds {MAX_FRAMES}"),
            ));
        }
        let bindings = func.params.iter().cloned().zip(args).collect();
        let body = func.body;
        self.frames.push(Frame {
            function: name.to_string(),
            bindings,
            cursor: Cursor::at_start(body),
        });
        Ok(())
    }

    /// Runs a function body to completion inside the current statement.
    fn call_inline(&mut self, name: &str, args: Vec<Value>) -> Result<Value, Fault> {
        self.push_call_frame(name, args)?;
        let frame = self.frames.len() - 1;
        let body = self.frames[frame].cursor.path[0].block;
        self.exec_block_inline(frame, body)?;
        let callee = self.frames.pop().expect("callee frame");
        callee.bindings.get(RESULT_BINDING).cloned().ok_or_else(|| {
            fault(
                RuntimeErrorKind::UnknownName,
                format!("`{name}` used as a value but never binds `{RESULT_BINDING}`"),
            )
        })
    }

    fn exec_block_inline(&mut self, frame: usize, block: BlockId) -> Result<(), Fault> {
        let program = Arc::clone(&self.program);
        for stmt in &program.blocks[block as usize] {
            match &stmt.kind {
                StmtKind::Repeat { count, body } => {
                    let total = self.eval_count(frame, count)?;
                    for _ in 0..total {
                        self.exec_block_inline(frame, *body)?;
                    }
                }
                StmtKind::Call { name, args } => {
                    let args = self.eval_args(frame, args)?;
                    self.push_call_frame(name, args)?;
                    let callee = self.frames.len() - 1;
                    let body = self.frames[callee].cursor.path[0].block;
                    self.exec_block_inline(callee, body)?;
                    self.frames.pop();
                }
                kind => self.apply_simple(frame, kind)?,
            }
        }
        Ok(())
    }

    fn apply_simple(&mut self, frame: usize, kind: &StmtKind) -> Result<(), Fault> {
        match kind {
            StmtKind::Let { name, value } => {
                let v = self.eval(frame, value)?;
                self.frames[frame].bindings.insert(name.clone(), v);
            }
            StmtKind::SetIndex { name, index, value } => {
                let target = self.lookup_object(frame, name)?;
                let index = self.eval(frame, index)?;
                let value = self.eval(frame, value)?;
                let mutation = match (&self.heap.get(target)?.kind, index) {
                    (ObjectKind::List(_), Value::Int(i)) => Mutation::ElementWrite {
                        index: to_index(i)?,
                        value,
                    },
                    (ObjectKind::Map(_), Value::Str(key)) => Mutation::KeySet { key, value },
                    (ObjectKind::Blob(_), Value::Int(i)) => match value {
                        Value::Int(b @ 0..=255) => Mutation::BlobWrite {
                            offset: to_index(i)?,
                            bytes: vec![b as u8],
                        },
                        v => {
                            return Err(fault(
                                RuntimeErrorKind::KindMismatch,
                                format!("blob bytes must be ints in 0..=255, got {v:?}"),
                            ))
                        }
                    },
                    (k, i) => {
                        return Err(fault(
                            RuntimeErrorKind::KindMismatch,
                            format!("cannot index a {} with {}", k.tag().name(), i.type_name()),
                        ))
                    }
                };
                self.heap.mutate(target, mutation)?;
            }
            StmtKind::Push { name, value } => {
                let target = self.lookup_object(frame, name)?;
                let value = self.eval(frame, value)?;
                self.heap.mutate(target, Mutation::Push(value))?;
            }
            StmtKind::DelKey { name, key } => {
                let target = self.lookup_object(frame, name)?;
                match self.eval(frame, key)? {
                    Value::Str(key) => self.heap.mutate(target, Mutation::KeyDelete { key })?,
                    v => {
                        return Err(fault(
                            RuntimeErrorKind::KindMismatch,
                            format!("map keys are strings, got {}", v.type_name()),
                        ))
                    }
                }
            }
            StmtKind::DelVar { name } => {
                if self.frames[frame].bindings.shift_remove(name).is_none() {
                    return Err(fault(
                        RuntimeErrorKind::UnknownName,
                        format!("`{name}` is not bound in this frame"),
                    ));
                }
            }
            StmtKind::Call { .. } | StmtKind::Repeat { .. } => {
                unreachable!("structured statements are handled by the caller")
            }
        }
        Ok(())
    }

    fn eval(&mut self, frame: usize, expr: &Expr) -> Result<Value, Fault> {
        let created_at = self.statement_index + 1;
        Ok(match expr {
            Expr::Int(v) => Value::Int(*v),
            Expr::Float(v) => Value::Float(*v),
            Expr::Bool(v) => Value::Bool(*v),
            Expr::Str(s) => Value::Str(s.clone()),
            Expr::Name(n) => self.lookup(frame, n)?.clone(),
            Expr::List(items) => {
                let items = self.eval_args(frame, items)?;
                Value::Ref(self.heap.alloc(ObjectKind::List(items), created_at)?)
            }
            Expr::Map(entries) => {
                let mut map = IndexMap::with_capacity(entries.len());
                for (k, v) in entries {
                    let key = match self.eval(frame, k)? {
                        Value::Str(s) => s,
                        other => {
                            return Err(fault(
                                RuntimeErrorKind::KindMismatch,
                                format!("map keys are strings, got {}", other.type_name()),
                            ))
                        }
                    };
                    let v = self.eval(frame, v)?;
                    map.insert(key, v);
                }
                Value::Ref(self.heap.alloc(ObjectKind::Map(map), created_at)?)
            }
            Expr::Blob { len, tag } => {
                let len = match self.eval(frame, len)? {
                    Value::Int(n) if (0..=MAX_BLOB_LEN).contains(&n) => n as usize,
                    Value::Int(n) => {
                        return Err(fault(
                            RuntimeErrorKind::IndexOutOfRange,
                            format!("blob length {n} out of range"),
                        ))
                    }
                    v => {
                        return Err(fault(
                            RuntimeErrorKind::KindMismatch,
                            format!("blob length must be int, got {}", v.type_name()),
                        ))
                    }
                };
                let tag = tag_hash(&self.eval(frame, tag)?);
                let mut bytes = vec![0u8; len];
                self.rng.fill_blob(tag, &mut bytes);
                Value::Ref(self.heap.alloc(ObjectKind::Blob(bytes), created_at)?)
            }
            Expr::Rand(None) => Value::Float(self.rng.next_f64()),
            Expr::Rand(Some(n)) => match self.eval(frame, n)? {
                Value::Int(n) if n > 0 => Value::Int((self.rng.next_u64() % n as u64) as i64),
                Value::Int(n) => {
                    return Err(fault(
                        RuntimeErrorKind::IndexOutOfRange,
                        format!("rand bound must be positive, got {n}"),
                    ))
                }
                v => {
                    return Err(fault(
                        RuntimeErrorKind::KindMismatch,
                        format!("rand bound must be int, got {}", v.type_name()),
                    ))
                }
            },
            Expr::Len(e) => match self.eval(frame, e)? {
                Value::Ref(id) => Value::Int(self.heap.get(id)?.kind.len() as i64),
                Value::Str(s) => Value::Int(s.len() as i64),
                v => {
                    return Err(fault(
                        RuntimeErrorKind::KindMismatch,
                        format!("len of {}", v.type_name()),
                    ))
                }
            },
            Expr::Neg(e) => match self.eval(frame, e)? {
                Value::Int(v) => Value::Int(v.wrapping_neg()),
                Value::Float(v) => Value::Float(-v),
                v => {
                    return Err(fault(
                        RuntimeErrorKind::KindMismatch,
                        format!("cannot negate {}", v.type_name()),
                    ))
                }
            },
            Expr::Binary { op, lhs, rhs } => {
                let l = self.eval(frame, lhs)?;
                let r = self.eval(frame, rhs)?;
                binary(*op, l, r)?
            }
            Expr::Index { target, index } => {
                let target = self.eval(frame, target)?;
                let index = self.eval(frame, index)?;
                let Value::Ref(id) = target else {
                    return Err(fault(
                        RuntimeErrorKind::KindMismatch,
                        format!("cannot index a {}", target.type_name()),
                    ));
                };
                match (&self.heap.get(id)?.kind, &index) {
                    (ObjectKind::List(items), Value::Int(i)) => {
                        let len = items.len();
                        items
                            .get(to_index(*i)?)
                            .cloned()
                            .ok_or_else(|| out_of_range(*i, len))?
                    }
                    (ObjectKind::Map(entries), Value::Str(k)) => {
                        entries.get(k).cloned().ok_or_else(|| {
                            fault(RuntimeErrorKind::IndexOutOfRange, format!("missing key {k:?}"))
                        })?
                    }
                    (ObjectKind::Blob(bytes), Value::Int(i)) => {
                        let len = bytes.len();
                        Value::Int(
                            *bytes
                                .get(to_index(*i)?)
                                .ok_or_else(|| out_of_range(*i, len))? as i64,
                        )
                    }
                    (k, i) => {
                        return Err(fault(
                            RuntimeErrorKind::KindMismatch,
                            format!("cannot index a {} with {}", k.tag().name(), i.type_name()),
                        ))
                    }
                }
            }
            Expr::Call { name, args } => {
                let args = self.eval_args(frame, args)?;
                self.call_inline(name, args)?
            }
        })
    }
}

fn out_of_range(i: i64, len: usize) -> Fault {
    fault(
        RuntimeErrorKind::IndexOutOfRange,
        format!("index {i} out of range for length {len}"),
    )
}

fn to_index(i: i64) -> Result<usize, Fault> {
    usize::try_from(i).map_err(|_| out_of_range(i, 0))
}

fn tag_hash(v: &Value) -> u64 {
    match v {
        Value::Int(i) => *i as u64,
        Value::Float(f) => f.to_bits(),
        Value::Bool(b) => *b as u64,
        Value::Str(s) => {
            let d = Digest128::of(s.as_bytes());
            u64::from_le_bytes(d.0[..8].try_into().unwrap())
        }
        Value::Ref(id) => id.0,
    }
}

fn binary(op: BinOp, l: Value, r: Value) -> Result<Value, Fault> {
    use Value::{Float, Int, Str};
    let div_zero = || fault(RuntimeErrorKind::DivisionByZero, "division by zero");
    Ok(match (l, r) {
        (Int(a), Int(b)) => Int(match op {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::Div if b == 0 => return Err(div_zero()),
            BinOp::Div => a.wrapping_div(b),
            BinOp::Rem if b == 0 => return Err(div_zero()),
            BinOp::Rem => a.wrapping_rem(b),
        }),
        (Str(a), Str(b)) if op == BinOp::Add => Str(a + &b),
        (l @ (Int(_) | Float(_)), r @ (Int(_) | Float(_))) => {
            let as_f = |v: Value| match v {
                Int(i) => i as f64,
                Float(f) => f,
                _ => unreachable!(),
            };
            let (a, b) = (as_f(l), as_f(r));
            Float(match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div if b == 0.0 => return Err(div_zero()),
                BinOp::Div => a / b,
                BinOp::Rem if b == 0.0 => return Err(div_zero()),
                BinOp::Rem => a % b,
            })
        }
        (l, r) => {
            return Err(fault(
                RuntimeErrorKind::KindMismatch,
                format!("unsupported operands {} and {}", l.type_name(), r.type_name()),
            ))
        }
    })
}

fn validate_cursor(program: &Program, frame: &Frame, index: usize) -> Result<(), RestoreError> {
    let bad = |m: &str| Err(RestoreError::InvalidCursor(format!("frame {index}: {m}")));
    let path = &frame.cursor.path;
    let Some(first) = path.first() else {
        return bad("empty cursor path");
    };
    let expected_root = if index == 0 {
        MAIN_BLOCK
    } else {
        match program.functions.get(&frame.function) {
            Some(f) => f.body,
            None => return bad("unknown function"),
        }
    };
    if first.block != expected_root {
        return bad("cursor does not start at the frame's body");
    }
    for (depth, pos) in path.iter().enumerate() {
        let Some(block) = program.block(pos.block) else {
            return bad("unknown block");
        };
        let last = depth + 1 == path.len();
        if last {
            if pos.repeat.is_some() {
                return bad("innermost position carries loop state");
            }
            // Only the global frame may rest at the end of its block (finished).
            let at_end = pos.offset as usize >= block.len();
            if pos.offset as usize > block.len() || (at_end && !(index == 0 && path.len() == 1)) {
                return bad("offset out of range");
            }
        } else {
            let Some(stmt) = block.get(pos.offset as usize) else {
                return bad("offset out of range");
            };
            let (StmtKind::Repeat { body, .. }, Some(state)) = (&stmt.kind, pos.repeat) else {
                return bad("outer position is not an active repeat");
            };
            if *body != path[depth + 1].block || state.done >= state.total {
                return bad("inconsistent loop state");
            }
        }
    }
    Ok(())
}

/// Every frame below the top rests on the `call` that created the frame
/// above it.
fn validate_call_chain(program: &Program, frames: &[Frame]) -> Result<(), RestoreError> {
    for (i, pair) in frames.windows(2).enumerate() {
        let pos = pair[0].cursor.path.last().expect("validated");
        let stmt = program.block(pos.block).and_then(|b| b.get(pos.offset as usize));
        match stmt.map(|s| &s.kind) {
            Some(StmtKind::Call { name, .. }) if *name == pair[1].function => {}
            _ => {
                return Err(RestoreError::InvalidCursor(format!(
                    "frame {i} is not paused on a call to `{}`",
                    pair[1].function
                )))
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vm(src: &str, seed: u64) -> Vm {
        Vm::new(Arc::new(parse(src).unwrap()), seed)
    }

    fn run_to_end(src: &str, seed: u64) -> Vm {
        let mut m = vm(src, seed);
        m.run(&mut NoHook).unwrap();
        m
    }

    fn list_of(vm: &Vm, name: &str) -> Vec<Value> {
        let id = vm.global(name).unwrap().as_ref_id().unwrap();
        match &vm.heap().get(id).unwrap().kind {
            ObjectKind::List(items) => items.clone(),
            _ => panic!("not a list"),
        }
    }

    #[test]
    fn empty_program_finishes_immediately() {
        let m = run_to_end("", 1);
        assert!(m.frames()[0].bindings.is_empty());
        assert_eq!(m.statement_index(), 0);
    }

    #[test]
    fn push_executes_one_statement() {
        let mut m = vm("let x = []\npush x 7", 1);
        m.step().unwrap();
        assert_eq!(m.statement_index(), 1);
        m.step().unwrap();
        assert_eq!(m.statement_index(), 2);
        assert_eq!(list_of(&m, "x"), vec![Value::Int(7)]);
        assert_eq!(m.step().unwrap(), StepOutcome::Finished);
        assert_eq!(m.log().entries.len(), 2);
        assert_eq!(m.log().get(2).unwrap().keyword, "push");
    }

    #[test]
    fn failed_statement_is_atomic() {
        let mut m = vm("let x = [1]\nset x[5] = [0, blob(4, 1), rand()]", 1);
        m.step().unwrap();
        let heap = m.heap().clone();
        let frames = m.frames().to_vec();
        let rng = m.rng();
        let fp = m.fingerprint();
        let err = m.step().unwrap_err();
        assert_eq!(err.kind, RuntimeErrorKind::IndexOutOfRange);
        assert_eq!(err.statement_index, 2);
        assert_eq!(m.heap(), &heap);
        assert_eq!(m.frames(), &frames[..]);
        assert_eq!(m.rng(), rng);
        assert_eq!(m.statement_index(), 1);
        assert_eq!(m.fingerprint(), fp);
    }

    #[test]
    fn aliasing_shares_the_object() {
        let m = run_to_end("let x = []\nlet y = x\npush y 3", 1);
        assert_eq!(list_of(&m, "x"), vec![Value::Int(3)]);
        assert_eq!(m.global("x"), m.global("y"));
    }

    #[test]
    fn repeat_counts_each_body_statement() {
        let m = run_to_end("let xs = []\nrepeat 3 { push xs 0 }", 1);
        assert_eq!(list_of(&m, "xs").len(), 3);
        // let, repeat entry, three pushes
        assert_eq!(m.statement_index(), 5);
    }

    #[test]
    fn nested_loops_and_calls() {
        let src = "
fn add(xs, v) { push xs v\n push xs v }
let xs = []
repeat 2 { repeat 2 { call add(xs, 1) } }
";
        let m = run_to_end(src, 1);
        assert_eq!(list_of(&m, "xs").len(), 8);
        // let, outer repeat, 2 x (inner repeat + 2 x (call + 2 pushes))
        assert_eq!(m.statement_index(), 2 + 2 * (1 + 2 * 3));
    }

    #[test]
    fn statement_calls_push_a_frame() {
        let mut m = vm("fn f(a) { let b = a\n let c = 2 }\ncall f(1)", 1);
        m.step().unwrap();
        assert_eq!(m.frames().len(), 2);
        assert_eq!(m.frames()[1].function, "f");
        m.step().unwrap();
        assert_eq!(m.frames()[1].bindings.len(), 2);
        m.step().unwrap();
        assert_eq!(m.frames().len(), 1);
        assert!(m.is_finished());
    }

    #[test]
    fn expression_calls_return_result_binding() {
        let m = run_to_end("fn sq(a) { let result = a * a }\nlet y = sq(7) + 1", 1);
        assert_eq!(m.global("y"), Some(&Value::Int(50)));
        let mut bad = vm("fn f() { let z = 1 }\nlet y = f()", 1);
        assert_eq!(bad.step().unwrap_err().kind, RuntimeErrorKind::UnknownName);
    }

    #[test]
    fn recursion_is_capped() {
        let mut m = vm("fn f() { call f() }\ncall f()", 1);
        let err = m.run(&mut NoHook).unwrap_err();
        assert_eq!(err.kind, RuntimeErrorKind::RecursionLimit);
        assert_eq!(m.frames().len(), MAX_FRAMES);
        let mut inline = vm("fn g() { let result = g() }\nlet x = g()", 1);
        assert_eq!(
            inline.run(&mut NoHook).unwrap_err().kind,
            RuntimeErrorKind::RecursionLimit
        );
        assert_eq!(inline.frames().len(), 1);
    }

    #[test]
    fn runtime_error_kinds() {
        let cases = [
            ("let x = y", RuntimeErrorKind::UnknownName),
            ("let x = 1 / 0", RuntimeErrorKind::DivisionByZero),
            ("let x = 1.0 % 0", RuntimeErrorKind::DivisionByZero),
            ("let m = {}\npush m 1", RuntimeErrorKind::KindMismatch),
            ("let m = {\"a\": 1}\nlet v = m[\"b\"]", RuntimeErrorKind::IndexOutOfRange),
            ("let m = {}\ndel m[\"b\"]", RuntimeErrorKind::IndexOutOfRange),
            ("repeat -1 { let a = 1 }", RuntimeErrorKind::IndexOutOfRange),
            ("del nope", RuntimeErrorKind::UnknownName),
            ("let b = blob(2, 0)\nset b[0] = 300", RuntimeErrorKind::KindMismatch),
            ("let s = \"a\" - \"b\"", RuntimeErrorKind::KindMismatch),
        ];
        for (src, kind) in cases {
            let mut m = vm(src, 1);
            let err = m.run(&mut NoHook).unwrap_err();
            assert_eq!(err.kind, kind, "{src}");
        }
    }

    #[test]
    fn map_order_and_deletion() {
        let m = run_to_end(
            "let m = {\"b\": 1, \"a\": 2}\nset m[\"c\"] = 3\ndel m[\"b\"]\nset m[\"b\"] = 4",
            1,
        );
        let id = m.global("m").unwrap().as_ref_id().unwrap();
        let ObjectKind::Map(e) = &m.heap().get(id).unwrap().kind else {
            panic!()
        };
        assert_eq!(e.keys().collect::<Vec<_>>(), ["a", "c", "b"]);
    }

    #[test]
    fn seeds_drive_rand_and_blobs() {
        let src = "let r = rand()\nlet b = blob(64, \"t\")\nlet i = rand(10)";
        let a = run_to_end(src, 1);
        let b = run_to_end(src, 1);
        let c = run_to_end(src, 2);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.rng().draw_count, 3);
    }

    #[test]
    fn hooks_see_every_boundary_and_can_stop() {
        let mut m = vm("let xs = []\nrepeat 4 { push xs 1 }", 1);
        let mut seen = Vec::new();
        let outcome = m
            .run(&mut |vm: &Vm| {
                seen.push(vm.statement_index());
                if vm.statement_index() == 4 {
                    HookAction::Stop
                } else {
                    HookAction::Continue
                }
            })
            .unwrap();
        assert_eq!(outcome, RunOutcome::Stopped);
        assert_eq!(seen, [1, 2, 3, 4]);
        // Resumes cleanly from the same boundary.
        m.run(&mut NoHook).unwrap();
        assert_eq!(list_of(&m, "xs").len(), 4);
    }

    #[test]
    fn panicking_hook_does_not_disturb_the_run() {
        let src = "let xs = []\nrepeat 3 { push xs rand(5) }";
        let clean = run_to_end(src, 3);
        let mut m = vm(src, 3);
        m.run(&mut |_: &Vm| -> HookAction { panic!("hook failure") })
            .unwrap();
        assert_eq!(m.fingerprint(), clean.fingerprint());
        assert_eq!(m.statement_index(), clean.statement_index());
    }

    #[test]
    fn from_parts_rejects_bad_cursors() {
        let program = Arc::new(parse("let a = 1\nrepeat 2 { let b = 2 }").unwrap());
        let mut frames = vec![Frame {
            function: GLOBAL_FRAME.into(),
            bindings: IndexMap::new(),
            cursor: Cursor::at_start(MAIN_BLOCK),
        }];
        assert!(Vm::from_parts(program.clone(), Heap::new(), frames.clone(), EngineRng::new(1), 0).is_ok());
        frames[0].cursor.path[0].offset = 7;
        assert!(Vm::from_parts(program.clone(), Heap::new(), frames.clone(), EngineRng::new(1), 0).is_err());
        frames[0].cursor.path = vec![
            Pos { block: 0, offset: 1, repeat: Some(LoopState { done: 2, total: 2 }) },
            Pos { block: 1, offset: 0, repeat: None },
        ];
        assert!(Vm::from_parts(program, Heap::new(), frames, EngineRng::new(1), 0).is_err());
    }
}
