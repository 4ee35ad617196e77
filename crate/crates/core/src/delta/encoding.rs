//! Byte-level primitives of the on-disk value encoding: LEB128 varints,
//! tagged scalars, inline objects and pid pointers.

use thiserror::Error;

use crate::digest::Hasher128;
use crate::heap::Value;
use crate::vm::{Cursor, LoopState, Pos};

pub const TAG_INT: u8 = 0x01;
pub const TAG_FLOAT: u8 = 0x02;
pub const TAG_BOOL: u8 = 0x03;
pub const TAG_STR: u8 = 0x04;
pub const TAG_LIST: u8 = 0x05;
pub const TAG_MAP: u8 = 0x06;
pub const TAG_BLOB: u8 = 0x07;
pub const TAG_PID: u8 = 0x08;

pub trait ByteSink {
    fn put(&mut self, bytes: &[u8]);

    fn put_u8(&mut self, b: u8) {
        self.put(&[b]);
    }

    fn put_varint(&mut self, mut v: u64) {
        let mut buf = [0u8; 10];
        let mut n = 0;
        loop {
            let byte = (v & 0x7f) as u8;
            v >>= 7;
            if v == 0 {
                buf[n] = byte;
                n += 1;
                break;
            }
            buf[n] = byte | 0x80;
            n += 1;
        }
        self.put(&buf[..n]);
    }

    fn put_zigzag(&mut self, v: i64) {
        self.put_varint(((v << 1) ^ (v >> 63)) as u64);
    }

    fn put_str(&mut self, s: &str) {
        self.put_varint(s.len() as u64);
        self.put(s.as_bytes());
    }

    fn put_bytes(&mut self, b: &[u8]) {
        self.put_varint(b.len() as u64);
        self.put(b);
    }
}

impl ByteSink for Vec<u8> {
    fn put(&mut self, bytes: &[u8]) {
        self.extend_from_slice(bytes);
    }
}

impl ByteSink for Hasher128 {
    fn put(&mut self, bytes: &[u8]) {
        self.update(bytes);
    }
}

/// Counts bytes without storing them.
#[derive(Debug, Default, Clone, Copy)]
pub struct ByteCounter(pub u64);

impl ByteSink for ByteCounter {
    fn put(&mut self, bytes: &[u8]) {
        self.0 += bytes.len() as u64;
    }
}

pub fn varint_len(v: u64) -> u64 {
    (64 - v.max(1).leading_zeros() as u64).div_ceil(7)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("decode error at byte {offset}: {message}")]
pub struct DecodeError {
    pub offset: usize,
    pub message: String,
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub fn error(&self, message: impl Into<String>) -> DecodeError {
        DecodeError {
            offset: self.pos,
            message: message.into(),
        }
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        let b = *self
            .buf
            .get(self.pos)
            .ok_or_else(|| self.error("unexpected end of data"))?;
        self.pos += 1;
        Ok(b)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if n > self.remaining() {
            return Err(self.error(format!("need {n} bytes, have {}", self.remaining())));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u64_le(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn varint(&mut self) -> Result<u64, DecodeError> {
        let mut v = 0u64;
        for shift in (0..70).step_by(7) {
            let b = self.u8()?;
            if shift == 63 && b > 1 {
                return Err(self.error("varint overflows u64"));
            }
            v |= u64::from(b & 0x7f) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(self.error("varint too long"))
    }

    pub fn zigzag(&mut self) -> Result<i64, DecodeError> {
        let v = self.varint()?;
        Ok(((v >> 1) as i64) ^ -((v & 1) as i64))
    }

    /// A length that must fit in what is left of the buffer, given a
    /// minimum encoded size per element.
    pub fn len(&mut self, min_elem: usize) -> Result<usize, DecodeError> {
        let n = self.varint()?;
        let n = usize::try_from(n).map_err(|_| self.error("length overflow"))?;
        if n.saturating_mul(min_elem) > self.remaining() {
            return Err(self.error(format!("length {n} exceeds remaining data")));
        }
        Ok(n)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let n = self.len(1)?;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String, DecodeError> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| self.error("invalid utf-8"))
    }
}

/// Writes a scalar; panics on `Ref` (callers handle references).
pub fn put_scalar<S: ByteSink + ?Sized>(sink: &mut S, v: &Value) {
    match v {
        Value::Int(i) => {
            sink.put_u8(TAG_INT);
            sink.put_zigzag(*i);
        }
        Value::Float(f) => {
            sink.put_u8(TAG_FLOAT);
            sink.put(&f.to_bits().to_le_bytes());
        }
        Value::Bool(b) => {
            sink.put_u8(TAG_BOOL);
            sink.put_u8(*b as u8);
        }
        Value::Str(s) => {
            sink.put_u8(TAG_STR);
            sink.put_str(s);
        }
        Value::Ref(_) => unreachable!("references are encoded by the closure walker"),
    }
}

pub fn scalar_size(v: &Value) -> u64 {
    match v {
        Value::Int(i) => 1 + varint_len(((*i << 1) ^ (*i >> 63)) as u64),
        Value::Float(_) => 9,
        Value::Bool(_) => 2,
        Value::Str(s) => 1 + varint_len(s.len() as u64) + s.len() as u64,
        // pointer with a typical 2-3 byte pid
        Value::Ref(_) => 3,
    }
}

pub fn put_cursor<S: ByteSink + ?Sized>(sink: &mut S, cursor: &Cursor) {
    sink.put_varint(cursor.path.len() as u64);
    for pos in &cursor.path {
        sink.put_varint(u64::from(pos.block));
        sink.put_varint(u64::from(pos.offset));
        match pos.repeat {
            None => sink.put_u8(0),
            Some(l) => {
                sink.put_u8(1);
                sink.put_varint(l.done);
                sink.put_varint(l.total);
            }
        }
    }
}

pub fn read_cursor(r: &mut Reader<'_>) -> Result<Cursor, DecodeError> {
    let n = r.len(3)?;
    let mut path = Vec::with_capacity(n);
    for _ in 0..n {
        let block = u32::try_from(r.varint()?).map_err(|_| r.error("block id overflow"))?;
        let offset = u32::try_from(r.varint()?).map_err(|_| r.error("offset overflow"))?;
        let repeat = match r.u8()? {
            0 => None,
            1 => Some(LoopState {
                done: r.varint()?,
                total: r.varint()?,
            }),
            t => return Err(r.error(format!("bad loop flag {t}"))),
        };
        path.push(Pos {
            block,
            offset,
            repeat,
        });
    }
    Ok(Cursor { path })
}
