//! Random DartScript programs for property tests: lists, maps, blobs,
//! aliasing, shared substructure, cycles, loops and function calls.
//!
//! Generated programs are well-typed by construction (every list stays
//! non-empty, every deleted key exists), so they run to completion.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PRELUDE: &str = "fn touch(xs, v) {
  push xs v
  set xs[0] = v
}
fn grow(m, k) {
  set m[k] = [k, len(m)]
  let result = len(m)
}
fn nest(depth_tag) {
  let inner = {\"tag\": depth_tag}
  let result = [inner, inner]
}
";

struct Gen {
    rng: ChaCha8Rng,
    out: String,
    lists: Vec<String>,
    /// Map name and the keys known to be present.
    maps: Vec<(String, Vec<String>)>,
    ints: Vec<String>,
    /// Bindings of unknown type, used only as values.
    anys: Vec<String>,
    fresh: u32,
    max_blob: u64,
}

impl Gen {
    fn name(&mut self, prefix: &str) -> String {
        self.fresh += 1;
        format!("{prefix}{}", self.fresh)
    }

    fn line(&mut self, depth: usize, text: &str) {
        for _ in 0..depth {
            self.out.push_str("  ");
        }
        self.out.push_str(text);
        self.out.push('\n');
    }

    fn scalar(&mut self) -> String {
        match self.rng.gen_range(0..7) {
            0 => self.rng.gen_range(-50i64..50).to_string(),
            1 => format!("{:.3}", self.rng.gen_range(-10.0f64..10.0)),
            2 => format!("\"s{}\"", self.rng.gen_range(0..20)),
            3 => ["true", "false"][self.rng.gen_range(0..2)].to_string(),
            4 => format!("rand({})", self.rng.gen_range(1..100)),
            5 if !self.ints.is_empty() => self.ints.choose(&mut self.rng).unwrap().clone(),
            _ => "rand()".to_string(),
        }
    }

    fn blob(&mut self) -> String {
        let len = self.rng.gen_range(0..=self.max_blob);
        format!("blob({len}, rand(1000))")
    }

    /// Any value, possibly a reference to an existing object.
    fn value(&mut self) -> String {
        match self.rng.gen_range(0..10) {
            0..=3 => self.scalar(),
            4 => self.blob(),
            5 if !self.lists.is_empty() => self.lists.choose(&mut self.rng).unwrap().clone(),
            6 if !self.maps.is_empty() => self.maps.choose(&mut self.rng).unwrap().0.clone(),
            7 if !self.anys.is_empty() => self.anys.choose(&mut self.rng).unwrap().clone(),
            8 => {
                let a = self.scalar();
                format!("[{a}]")
            }
            9 if !self.lists.is_empty() => {
                let l = self.lists.choose(&mut self.rng).unwrap().clone();
                format!("{l}[rand(len({l}))]")
            }
            _ => self.scalar(),
        }
    }

    fn statement(&mut self, depth: usize, top: bool) {
        let pick = self.rng.gen_range(0..20);
        match pick {
            // New bindings only at top level so tracking stays exact.
            0 | 1 if top => {
                let n = self.name("l");
                let a = self.value();
                let b = self.value();
                self.line(depth, &format!("let {n} = [{a}, {b}]"));
                self.lists.push(n);
            }
            2 if top => {
                let n = self.name("m");
                let a = self.value();
                let b = self.value();
                self.line(depth, &format!("let {n} = {{\"a\": {a}, \"b\": {b}}}"));
                self.maps.push((n, vec!["a".into(), "b".into()]));
            }
            3 if top => {
                let n = self.name("i");
                let v = self.rng.gen_range(0..10);
                self.line(depth, &format!("let {n} = {v}"));
                self.ints.push(n);
            }
            4 if top && !self.lists.is_empty() => {
                // Alias.
                let n = self.name("l");
                let src = self.lists.choose(&mut self.rng).unwrap().clone();
                self.line(depth, &format!("let {n} = {src}"));
                self.lists.push(n);
            }
            5 if top && self.lists.len() > 1 => {
                let i = self.rng.gen_range(0..self.lists.len());
                let n = self.lists.remove(i);
                self.line(depth, &format!("del {n}"));
            }
            6 if top && !self.maps.is_empty() => {
                let i = self.rng.gen_range(0..self.maps.len());
                if let Some(k) = self.maps[i].1.pop() {
                    let m = self.maps[i].0.clone();
                    self.line(depth, &format!("del {m}[\"{k}\"]"));
                }
            }
            7 if top && !self.maps.is_empty() => {
                let n = self.name("x");
                let m = self.maps.choose(&mut self.rng).unwrap().0.clone();
                let k = self.rng.gen_range(0..5);
                self.line(depth, &format!("let {n} = grow({m}, \"g{k}\")"));
                let i = self.maps.iter().position(|e| e.0 == m).unwrap();
                let key = format!("g{k}");
                if !self.maps[i].1.contains(&key) {
                    self.maps[i].1.push(key);
                }
                self.ints.push(n);
            }
            8 if top => {
                let n = self.name("y");
                let t = self.rng.gen_range(0..9);
                self.line(depth, &format!("let {n} = nest({t})"));
                self.anys.push(n);
            }
            9 if top && !self.lists.is_empty() => {
                let n = self.name("y");
                let l = self.lists.choose(&mut self.rng).unwrap().clone();
                self.line(depth, &format!("let {n} = {l}[0]"));
                self.anys.push(n);
            }
            10 | 11 if depth < 2 => {
                let count = self.rng.gen_range(1..5);
                self.line(depth, &format!("repeat {count} {{"));
                for _ in 0..self.rng.gen_range(1..4) {
                    self.statement(depth + 1, false);
                }
                self.line(depth, "}");
            }
            12 | 13 if !self.lists.is_empty() => {
                let l = self.lists.choose(&mut self.rng).unwrap().clone();
                let v = if self.rng.gen_bool(0.2) {
                    // Possibly itself: a cycle.
                    self.lists.choose(&mut self.rng).unwrap().clone()
                } else {
                    self.value()
                };
                self.line(depth, &format!("push {l} {v}"));
            }
            14 | 15 if !self.lists.is_empty() => {
                let l = self.lists.choose(&mut self.rng).unwrap().clone();
                let v = self.value();
                self.line(depth, &format!("set {l}[rand(len({l}))] = {v}"));
            }
            16 if !self.maps.is_empty() => {
                let i = self.rng.gen_range(0..self.maps.len());
                let k = format!("k{}", self.rng.gen_range(0..6));
                let v = self.value();
                let m = self.maps[i].0.clone();
                self.line(depth, &format!("set {m}[\"{k}\"] = {v}"));
                if !self.maps[i].1.contains(&k) {
                    self.maps[i].1.push(k);
                }
            }
            17 if !self.lists.is_empty() => {
                let l = self.lists.choose(&mut self.rng).unwrap().clone();
                let v = self.value();
                self.line(depth, &format!("call touch({l}, {v})"));
            }
            18 if !self.ints.is_empty() => {
                let n = self.ints.choose(&mut self.rng).unwrap().clone();
                let d = self.rng.gen_range(1..7);
                self.line(depth, &format!("let {n} = ({n} + {d}) % 1000"));
            }
            _ => {
                if self.lists.is_empty() || self.rng.gen_bool(0.3) {
                    if top {
                        let n = self.name("l");
                        let b = self.blob();
                        self.line(depth, &format!("let {n} = [{b}]"));
                        self.lists.push(n);
                    } else {
                        self.line(depth, "let tmp = rand(7)");
                    }
                } else {
                    let l = self.lists.choose(&mut self.rng).unwrap().clone();
                    let b = self.blob();
                    self.line(depth, &format!("push {l} {b}"));
                }
            }
        }
    }
}

/// A random program with about `statements` top-level statements and
/// blobs of at most `max_blob` bytes.
pub fn random_program(seed: u64, statements: usize, max_blob: u64) -> String {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        out: String::from(PRELUDE),
        lists: Vec::new(),
        maps: Vec::new(),
        ints: Vec::new(),
        anys: Vec::new(),
        fresh: 0,
        max_blob,
    };
    for _ in 0..statements {
        g.statement(0, true);
    }
    g.out
}
