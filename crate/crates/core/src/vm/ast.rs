//! DartScript syntax tree and its canonical printed form.

use std::fmt::{self, Write as _};

use indexmap::IndexMap;

use crate::digest::Digest128;

pub type BlockId = u32;

/// Block 0 is always `main`.
pub const MAIN_BLOCK: BlockId = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub functions: IndexMap<String, Function>,
    pub blocks: Vec<Vec<Stmt>>,
    pub source_digest: Digest128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Function {
    pub name: String,
    pub params: Vec<String>,
    pub body: BlockId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stmt {
    pub kind: StmtKind,
    pub line: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StmtKind {
    Let { name: String, value: Expr },
    SetIndex { name: String, index: Expr, value: Expr },
    Push { name: String, value: Expr },
    DelKey { name: String, key: Expr },
    DelVar { name: String },
    Call { name: String, args: Vec<Expr> },
    Repeat { count: Expr, body: BlockId },
}

impl StmtKind {
    pub fn keyword(&self) -> &'static str {
        match self {
            StmtKind::Let { .. } => "let",
            StmtKind::SetIndex { .. } => "set",
            StmtKind::Push { .. } => "push",
            StmtKind::DelKey { .. } | StmtKind::DelVar { .. } => "del",
            StmtKind::Call { .. } => "call",
            StmtKind::Repeat { .. } => "repeat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Rem => "%",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div | BinOp::Rem => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
    Name(String),
    List(Vec<Expr>),
    Map(Vec<(Expr, Expr)>),
    Blob { len: Box<Expr>, tag: Box<Expr> },
    Rand(Option<Box<Expr>>),
    Len(Box<Expr>),
    Neg(Box<Expr>),
    Binary { op: BinOp, lhs: Box<Expr>, rhs: Box<Expr> },
    Index { target: Box<Expr>, index: Box<Expr> },
    Call { name: String, args: Vec<Expr> },
}

impl Program {
    pub fn main(&self) -> &[Stmt] {
        &self.blocks[MAIN_BLOCK as usize]
    }

    pub fn block(&self, id: BlockId) -> Option<&[Stmt]> {
        self.blocks.get(id as usize).map(Vec::as_slice)
    }

    /// Canonical text: functions first in declaration order, then `main`.
    /// Comments and layout are not preserved; the digest is taken over this.
    pub fn canonical_source(&self) -> String {
        let mut out = String::new();
        for f in self.functions.values() {
            let _ = writeln!(out, "fn {}({}) {{", f.name, f.params.join(", "));
            self.write_block(&mut out, f.body, 1);
            out.push_str("}\n");
        }
        self.write_block(&mut out, MAIN_BLOCK, 0);
        out
    }

    fn write_block(&self, out: &mut String, block: BlockId, depth: usize) {
        for stmt in &self.blocks[block as usize] {
            out.push_str(&"  ".repeat(depth));
            match &stmt.kind {
                StmtKind::Let { name, value } => {
                    let _ = writeln!(out, "let {name} = {value}");
                }
                StmtKind::SetIndex { name, index, value } => {
                    let _ = writeln!(out, "set {name}[{index}] = {value}");
                }
                StmtKind::Push { name, value } => {
                    let _ = writeln!(out, "push {name} {value}");
                }
                StmtKind::DelKey { name, key } => {
                    let _ = writeln!(out, "del {name}[{key}]");
                }
                StmtKind::DelVar { name } => {
                    let _ = writeln!(out, "del {name}");
                }
                StmtKind::Call { name, args } => {
                    let _ = writeln!(out, "call {name}({})", join(args));
                }
                StmtKind::Repeat { count, body } => {
                    let _ = writeln!(out, "repeat {count} {{");
                    self.write_block(out, *body, depth + 1);
                    out.push_str(&"  ".repeat(depth));
                    out.push_str("}\n");
                }
            }
        }
    }
}

fn join(items: &[Expr]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

fn write_str_literal(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_char('"')?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            '\n' => f.write_str("\\n")?,
            '\t' => f.write_str("\\t")?,
            c => f.write_char(c)?,
        }
    }
    f.write_char('"')
}

impl Expr {
    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        match self {
            Expr::Int(v) if *v < 0 => write!(f, "({v})"),
            Expr::Int(v) => write!(f, "{v}"),
            Expr::Float(v) => {
                // `{:?}` always keeps a decimal point or exponent.
                let text = format!("{v:?}");
                if text.starts_with('-') || !v.is_finite() {
                    write!(f, "({text})")
                } else {
                    f.write_str(&text)
                }
            }
            Expr::Bool(v) => write!(f, "{v}"),
            Expr::Str(s) => write_str_literal(f, s),
            Expr::Name(n) => f.write_str(n),
            Expr::List(items) => write!(f, "[{}]", join(items)),
            Expr::Map(entries) => {
                f.write_char('{')?;
                for (i, (k, v)) in entries.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{k}: {v}")?;
                }
                f.write_char('}')
            }
            Expr::Blob { len, tag } => write!(f, "blob({len}, {tag})"),
            Expr::Rand(None) => f.write_str("rand()"),
            Expr::Rand(Some(n)) => write!(f, "rand({n})"),
            Expr::Len(e) => write!(f, "len({e})"),
            Expr::Neg(e) if min > 3 => write!(f, "(-{})", PrecWrap(e, 3)),
            Expr::Neg(e) => {
                f.write_char('-')?;
                e.fmt_prec(f, 3)
            }
            Expr::Binary { op, lhs, rhs } => {
                let p = op.precedence();
                if p < min {
                    f.write_char('(')?;
                }
                lhs.fmt_prec(f, p)?;
                write!(f, " {} ", op.symbol())?;
                rhs.fmt_prec(f, p + 1)?;
                if p < min {
                    f.write_char(')')?;
                }
                Ok(())
            }
            Expr::Index { target, index } => {
                target.fmt_prec(f, 4)?;
                write!(f, "[{index}]")
            }
            Expr::Call { name, args } => write!(f, "{name}({})", join(args)),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

struct PrecWrap<'a>(&'a Expr, u8);

impl fmt::Display for PrecWrap<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt_prec(f, self.1)
    }
}
