//! Lexer and recursive-descent parser for DartScript.

use std::fmt;

use indexmap::IndexMap;
use thiserror::Error;

use super::ast::{BinOp, BlockId, Expr, Function, Program, Stmt, StmtKind};
use crate::digest::Digest128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Location {
    pub line: u32,
    pub column: u32,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at {location}: {message}")]
pub struct SyntaxError {
    pub location: Location,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(u64),
    Float(f64),
    Str(String),
    Punct(char),
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Int(v) => write!(f, "`{v}`"),
            Tok::Float(v) => write!(f, "`{v}`"),
            Tok::Str(_) => f.write_str("string literal"),
            Tok::Punct(c) => write!(f, "`{c}`"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    loc: Location,
    newline_before: bool,
}

const KEYWORDS: &[&str] = &[
    "let", "set", "push", "del", "call", "repeat", "fn", "true", "false", "len", "blob", "rand",
];

fn lex(source: &str) -> Result<Vec<Token>, SyntaxError> {
    let chars: Vec<char> = source.chars().collect();
    let mut tokens = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1u32, 1u32);
    let mut newline_before = true;
    let err = |line, column, message: String| SyntaxError {
        location: Location { line, column },
        message,
    };

    while i < chars.len() {
        let c = chars[i];
        let loc = Location { line, column: col };
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            newline_before = true;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        let tok = if c.is_ascii_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            Tok::Ident(chars[start..i].iter().collect())
        } else if c.is_ascii_digit() {
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let mut is_float = false;
            if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                is_float = true;
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    is_float = true;
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            if is_float {
                let v: f64 = text
                    .parse()
                    .map_err(|_| err(loc.line, loc.column, format!("bad float literal {text}")))?;
                if !v.is_finite() {
                    return Err(err(loc.line, loc.column, format!("float literal {text} overflows")));
                }
                Tok::Float(v)
            } else {
                Tok::Int(text.parse().map_err(|_| {
                    err(loc.line, loc.column, format!("integer literal {text} out of range"))
                })?)
            }
        } else if c == '"' {
            i += 1;
            let mut s = String::new();
            loop {
                match chars.get(i) {
                    None | Some('\n') => {
                        return Err(err(loc.line, loc.column, "unterminated string".into()))
                    }
                    Some('"') => {
                        i += 1;
                        break;
                    }
                    Some('\\') => {
                        let esc = match chars.get(i + 1) {
                            Some('n') => '\n',
                            Some('t') => '\t',
                            Some('"') => '"',
                            Some('\\') => '\\',
                            _ => {
                                return Err(err(line, col + (i - start) as u32, "bad escape".into()))
                            }
                        };
                        s.push(esc);
                        i += 2;
                    }
                    Some(&ch) => {
                        s.push(ch);
                        i += 1;
                    }
                }
            }
            Tok::Str(s)
        } else if "=[](){},:;+-*/%".contains(c) {
            i += 1;
            Tok::Punct(c)
        } else {
            return Err(err(loc.line, loc.column, format!("unexpected character {c:?}")));
        };
        col += (i - start) as u32;
        if tok != Tok::Punct(';') {
            tokens.push(Token {
                tok,
                loc,
                newline_before,
            });
            newline_before = false;
        } else {
            newline_before = true;
        }
    }
    tokens.push(Token {
        tok: Tok::Eof,
        loc: Location { line, column: col },
        newline_before: true,
    });
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    blocks: Vec<Vec<Stmt>>,
    functions: IndexMap<String, Function>,
}

type PResult<T> = Result<T, SyntaxError>;

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn error_at<T>(&self, tok: &Token, message: impl Into<String>) -> PResult<T> {
        Err(SyntaxError {
            location: tok.loc,
            message: message.into(),
        })
    }

    fn expect_punct(&mut self, c: char) -> PResult<()> {
        let t = self.next();
        if t.tok == Tok::Punct(c) {
            Ok(())
        } else {
            self.error_at(&t, format!("expected `{c}`, found {}", t.tok))
        }
    }

    fn is_punct(&self, c: char) -> bool {
        self.peek().tok == Tok::Punct(c)
    }

    fn ident(&mut self) -> PResult<String> {
        let t = self.next();
        match t.tok {
            Tok::Ident(ref s) if !KEYWORDS.contains(&s.as_str()) => Ok(s.clone()),
            _ => self.error_at(&t, format!("expected identifier, found {}", t.tok)),
        }
    }

    fn new_block(&mut self) -> BlockId {
        self.blocks.push(Vec::new());
        (self.blocks.len() - 1) as BlockId
    }

    fn program(&mut self) -> PResult<()> {
        let main = self.new_block();
        while self.peek().tok != Tok::Eof {
            if self.peek().tok == Tok::Ident("fn".into()) {
                self.function()?;
            } else {
                let stmt = self.statement()?;
                self.blocks[main as usize].push(stmt);
            }
        }
        Ok(())
    }

    fn function(&mut self) -> PResult<()> {
        let kw = self.next();
        let name = self.ident()?;
        if self.functions.contains_key(&name) {
            return self.error_at(&kw, format!("function `{name}` defined twice"));
        }
        self.expect_punct('(')?;
        let mut params = Vec::new();
        if !self.is_punct(')') {
            loop {
                let p = self.ident()?;
                if params.contains(&p) {
                    return self.error_at(&kw, format!("duplicate parameter `{p}`"));
                }
                params.push(p);
                if !self.is_punct(',') {
                    break;
                }
                self.next();
            }
        }
        self.expect_punct(')')?;
        let body = self.block()?;
        self.functions.insert(name.clone(), Function { name, params, body });
        Ok(())
    }

    fn block(&mut self) -> PResult<BlockId> {
        self.expect_punct('{')?;
        let id = self.new_block();
        while !self.is_punct('}') {
            if self.peek().tok == Tok::Eof {
                let t = self.peek().clone();
                return self.error_at(&t, "expected `}`, found end of input");
            }
            let stmt = self.statement()?;
            self.blocks[id as usize].push(stmt);
        }
        self.next();
        Ok(id)
    }

    fn statement(&mut self) -> PResult<Stmt> {
        let t = self.next();
        let line = t.loc.line;
        let Tok::Ident(word) = &t.tok else {
            return self.error_at(&t, format!("expected statement, found {}", t.tok));
        };
        let kind = match word.as_str() {
            "let" => {
                let name = self.ident()?;
                self.expect_punct('=')?;
                StmtKind::Let {
                    name,
                    value: self.expr()?,
                }
            }
            "set" => {
                let name = self.ident()?;
                self.expect_punct('[')?;
                let index = self.expr()?;
                self.expect_punct(']')?;
                self.expect_punct('=')?;
                StmtKind::SetIndex {
                    name,
                    index,
                    value: self.expr()?,
                }
            }
            "push" => {
                let name = self.ident()?;
                StmtKind::Push {
                    name,
                    value: self.expr()?,
                }
            }
            "del" => {
                let name = self.ident()?;
                if self.is_punct('[') && !self.peek().newline_before {
                    self.next();
                    let key = self.expr()?;
                    self.expect_punct(']')?;
                    StmtKind::DelKey { name, key }
                } else {
                    StmtKind::DelVar { name }
                }
            }
            "call" => {
                let name = self.ident()?;
                StmtKind::Call {
                    name,
                    args: self.args()?,
                }
            }
            "repeat" => {
                let count = self.expr()?;
                StmtKind::Repeat {
                    count,
                    body: self.block()?,
                }
            }
            "fn" => return self.error_at(&t, "functions may only be declared at top level"),
            w if !KEYWORDS.contains(&w) && self.is_punct('(') => StmtKind::Call {
                name: w.to_string(),
                args: self.args()?,
            },
            _ => return self.error_at(&t, format!("expected statement, found {}", t.tok)),
        };
        Ok(Stmt { kind, line })
    }

    fn args(&mut self) -> PResult<Vec<Expr>> {
        self.expect_punct('(')?;
        let items = self.expr_list(')')?;
        Ok(items)
    }

    /// Comma-separated expressions up to and including `close`.
    fn expr_list(&mut self, close: char) -> PResult<Vec<Expr>> {
        let mut items = Vec::new();
        if !self.is_punct(close) {
            loop {
                items.push(self.expr()?);
                if !self.is_punct(',') {
                    break;
                }
                self.next();
            }
        }
        self.expect_punct(close)?;
        Ok(items)
    }

    fn expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().tok {
                Tok::Punct('+') => BinOp::Add,
                Tok::Punct('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.next();
            let rhs = self.term()?;
            lhs = Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
    }

    fn term(&mut self) -> PResult<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().tok {
                Tok::Punct('*') => BinOp::Mul,
                Tok::Punct('/') => BinOp::Div,
                Tok::Punct('%') => BinOp::Rem,
                _ => return Ok(lhs),
            };
            self.next();
            let rhs = self.unary()?;
            lhs = Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
    }

    fn unary(&mut self) -> PResult<Expr> {
        if !self.is_punct('-') {
            return self.postfix();
        }
        let minus = self.next();
        // Negative literals fold so that `-5` and `(-5)` are the same node.
        match self.peek().tok.clone() {
            Tok::Int(v) if v <= i64::MAX as u64 + 1 && !self.followed_by_index(1) => {
                self.next();
                Ok(Expr::Int((v as i64).wrapping_neg()))
            }
            Tok::Int(v) if v > i64::MAX as u64 + 1 => {
                self.error_at(&minus, format!("integer literal -{v} out of range"))
            }
            Tok::Float(v) if !self.followed_by_index(1) => {
                self.next();
                Ok(Expr::Float(-v))
            }
            _ => Ok(Expr::Neg(Box::new(self.unary()?))),
        }
    }

    fn followed_by_index(&self, ahead: usize) -> bool {
        self.tokens
            .get(self.pos + ahead)
            .is_some_and(|t| t.tok == Tok::Punct('[') && !t.newline_before)
    }

    fn postfix(&mut self) -> PResult<Expr> {
        let mut e = self.primary()?;
        while self.is_punct('[') && !self.peek().newline_before {
            self.next();
            let index = self.expr()?;
            self.expect_punct(']')?;
            e = Expr::Index {
                target: Box::new(e),
                index: Box::new(index),
            };
        }
        Ok(e)
    }

    fn primary(&mut self) -> PResult<Expr> {
        let t = self.next();
        match t.tok {
            Tok::Int(v) => match i64::try_from(v) {
                Ok(v) => Ok(Expr::Int(v)),
                Err(_) => self.error_at(&t, format!("integer literal {v} out of range")),
            },
            Tok::Float(v) => Ok(Expr::Float(v)),
            Tok::Str(ref s) => Ok(Expr::Str(s.clone())),
            Tok::Punct('(') => {
                let e = self.expr()?;
                self.expect_punct(')')?;
                Ok(e)
            }
            Tok::Punct('[') => Ok(Expr::List(self.expr_list(']')?)),
            Tok::Punct('{') => {
                let mut entries = Vec::new();
                if !self.is_punct('}') {
                    loop {
                        let k = self.expr()?;
                        self.expect_punct(':')?;
                        let v = self.expr()?;
                        entries.push((k, v));
                        if !self.is_punct(',') {
                            break;
                        }
                        self.next();
                    }
                }
                self.expect_punct('}')?;
                Ok(Expr::Map(entries))
            }
            Tok::Ident(ref word) => match word.as_str() {
                "true" => Ok(Expr::Bool(true)),
                "false" => Ok(Expr::Bool(false)),
                "len" => {
                    let mut args = self.args()?;
                    if args.len() != 1 {
                        return self.error_at(&t, "len takes exactly one argument");
                    }
                    Ok(Expr::Len(Box::new(args.remove(0))))
                }
                "blob" => {
                    let mut args = self.args()?;
                    if args.len() != 2 {
                        return self.error_at(&t, "blob takes (length, tag)");
                    }
                    let tag = args.pop().unwrap();
                    let len = args.pop().unwrap();
                    Ok(Expr::Blob {
                        len: Box::new(len),
                        tag: Box::new(tag),
                    })
                }
                "rand" => {
                    let mut args = self.args()?;
                    match args.len() {
                        0 => Ok(Expr::Rand(None)),
                        1 => Ok(Expr::Rand(Some(Box::new(args.remove(0))))),
                        _ => self.error_at(&t, "rand takes at most one argument"),
                    }
                }
                w if KEYWORDS.contains(&w) => {
                    self.error_at(&t, format!("expected expression, found {}", t.tok))
                }
                _ if self.is_punct('(') && !self.peek().newline_before => Ok(Expr::Call {
                    name: word.clone(),
                    args: self.args()?,
                }),
                _ => Ok(Expr::Name(word.clone())),
            },
            _ => self.error_at(&t, format!("expected expression, found {}", t.tok)),
        }
    }
}

/// Parses DartScript source. Pure: the same text always yields the same
/// program, and the digest is taken over the canonical rendering.
pub fn parse(source: &str) -> Result<Program, SyntaxError> {
    let tokens = lex(source)?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        blocks: Vec::new(),
        functions: IndexMap::new(),
    };
    parser.program()?;
    let mut program = Program {
        functions: parser.functions,
        blocks: parser.blocks,
        source_digest: Digest128::default(),
    };
    program.source_digest = Digest128::of(program.canonical_source().as_bytes());
    Ok(program)
}
