// SPDX-License-Identifier: Apache-2.0

//! Reference models written without the core crate's algorithms: a
//! tree-walking interpreter, an infix evaluator, a timestamp cache model
//! and FNV-1a.

use bundler_core::{EvictionPolicy, TypeTag, Value};

use crate::program::{Arg, BinOp, Expr, Func, Program, Stmt, VECTOR_LEN};

/// Value of an expression tree over integer variables.
pub fn eval_expr(e: &Expr, vars: &[i128]) -> ExprValue {
    match e {
        Expr::Var(i) => ExprValue::Int(vars[*i]),
        Expr::Lit(v) => ExprValue::Int(*v as i128),
        Expr::Not(inner) => match eval_expr(inner, vars) {
            ExprValue::Bool(b) => ExprValue::Bool(!b),
            ExprValue::Int(_) => panic!("negation of an integer"),
        },
        Expr::Bin(op, l, r) => apply(*op, eval_expr(l, vars), eval_expr(r, vars)).expect("well-typed expression"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExprValue {
    Int(i128),
    Bool(bool),
}

fn apply(op: BinOp, l: ExprValue, r: ExprValue) -> Result<ExprValue, String> {
    use ExprValue::*;
    Ok(match (op, l, r) {
        (BinOp::Lt, Int(a), Int(b)) => Bool(a < b),
        (BinOp::Gt, Int(a), Int(b)) => Bool(a > b),
        (BinOp::Le, Int(a), Int(b)) => Bool(a <= b),
        (BinOp::Ge, Int(a), Int(b)) => Bool(a >= b),
        (BinOp::Eq, a, b) if same_kind(a, b) => Bool(a == b),
        (BinOp::Ne, a, b) if same_kind(a, b) => Bool(a != b),
        (BinOp::And, Bool(a), Bool(b)) => Bool(a && b),
        (BinOp::Or, Bool(a), Bool(b)) => Bool(a || b),
        _ => return Err(format!("{} applied to {l:?} and {r:?}", op.symbol())),
    })
}

fn same_kind(a: ExprValue, b: ExprValue) -> bool {
    matches!((a, b), (ExprValue::Int(_), ExprValue::Int(_)) | (ExprValue::Bool(_), ExprValue::Bool(_)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Place(char),
    Lit(u64),
    Op(BinOp),
    Not,
    Open,
    Close,
}

fn tokenize(text: &str) -> Result<Vec<Tok>, String> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let two = b.get(i..i + 2);
        let op2 = match two {
            Some(b"<=") => Some(BinOp::Le),
            Some(b">=") => Some(BinOp::Ge),
            Some(b"==") => Some(BinOp::Eq),
            Some(b"!=") => Some(BinOp::Ne),
            Some(b"&&") => Some(BinOp::And),
            Some(b"||") => Some(BinOp::Or),
            _ => None,
        };
        if let Some(op) = op2 {
            out.push(Tok::Op(op));
            i += 2;
            continue;
        }
        let c = b[i] as char;
        match c {
            ' ' => {}
            '<' => out.push(Tok::Op(BinOp::Lt)),
            '>' => out.push(Tok::Op(BinOp::Gt)),
            '!' => out.push(Tok::Not),
            '(' => out.push(Tok::Open),
            ')' => out.push(Tok::Close),
            'd' | 'u' => out.push(Tok::Place(c)),
            '0'..='9' => {
                let start = i;
                while i + 1 < b.len() && b[i + 1].is_ascii_digit() {
                    i += 1;
                }
                let v = text[start..=i].parse().map_err(|e| format!("literal: {e}"))?;
                out.push(Tok::Lit(v));
            }
            _ => return Err(format!("unexpected '{c}' at {i}")),
        }
        i += 1;
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Tok>,
    at: usize,
    values: &'a [Value],
    next_value: usize,
}

const LEVELS: [&[BinOp]; 4] =
    [&[BinOp::Or], &[BinOp::And], &[BinOp::Eq, BinOp::Ne], &[BinOp::Lt, BinOp::Gt, BinOp::Le, BinOp::Ge]];

impl Parser<'_> {
    fn binary(&mut self, level: usize) -> Result<ExprValue, String> {
        if level == LEVELS.len() {
            return self.unary();
        }
        let mut lhs = self.binary(level + 1)?;
        while let Some(Tok::Op(op)) = self.toks.get(self.at).cloned() {
            if !LEVELS[level].contains(&op) {
                break;
            }
            self.at += 1;
            let rhs = self.binary(level + 1)?;
            lhs = apply(op, lhs, rhs)?;
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<ExprValue, String> {
        match self.toks.get(self.at).cloned() {
            Some(Tok::Not) => {
                self.at += 1;
                match self.unary()? {
                    ExprValue::Bool(b) => Ok(ExprValue::Bool(!b)),
                    v => Err(format!("! applied to {v:?}")),
                }
            }
            Some(Tok::Open) => {
                self.at += 1;
                let v = self.binary(0)?;
                if self.toks.get(self.at) != Some(&Tok::Close) {
                    return Err("missing ')'".into());
                }
                self.at += 1;
                Ok(v)
            }
            Some(Tok::Lit(v)) => {
                self.at += 1;
                Ok(ExprValue::Int(v as i128))
            }
            Some(Tok::Place(tag)) => {
                self.at += 1;
                let v = self.values.get(self.next_value).ok_or("too few values")?;
                self.next_value += 1;
                match (tag, v) {
                    ('d', Value::Int(x)) => Ok(ExprValue::Int(*x as i128)),
                    ('u', Value::UInt(x)) => Ok(ExprValue::Int(*x as i128)),
                    _ => Err(format!("placeholder '{tag}' bound to {v:?}")),
                }
            }
            other => Err(format!("unexpected {other:?}")),
        }
    }
}

/// Evaluates an infix predicate over `d`/`u` placeholders bound in order.
pub fn eval_infix(text: &str, values: &[Value]) -> Result<bool, String> {
    let mut p = Parser { toks: tokenize(text)?, at: 0, values, next_value: 0 };
    let v = p.binary(0)?;
    if p.at != p.toks.len() {
        return Err(format!("trailing input at token {}", p.at));
    }
    if p.next_value != values.len() {
        return Err("too many values".into());
    }
    match v {
        ExprValue::Bool(b) => Ok(b),
        ExprValue::Int(_) => Err("not a boolean".into()),
    }
}

/// Memory of a program as seen by the reference interpreter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelState {
    pub scalars: Vec<i64>,
    pub vectors: Vec<Vec<i64>>,
    pub counts: Vec<u64>,
    pub counters: Vec<i64>,
}

/// Work the reference interpreter expects the real one to report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ModelStats {
    pub call_dispatches: u64,
    pub translation_invocations: u64,
    pub control_steps: u64,
}

#[derive(Debug, Clone, Copy)]
enum Cell {
    Scalar(usize),
    Elem(usize, usize),
    Counter(usize),
}

impl ModelState {
    pub fn new(p: &Program) -> Self {
        Self {
            scalars: p.layout.scalars.clone(),
            vectors: p.layout.vectors.clone(),
            counts: p.layout.counts.clone(),
            counters: vec![0; p.layout.counters],
        }
    }

    fn get(&self, c: Cell) -> i64 {
        match c {
            Cell::Scalar(i) => self.scalars[i],
            Cell::Elem(v, i) => self.vectors[v][i],
            Cell::Counter(i) => self.counters[i],
        }
    }

    fn set(&mut self, c: Cell, x: i64) {
        match c {
            Cell::Scalar(i) => self.scalars[i] = x,
            Cell::Elem(v, i) => self.vectors[v][i] = x,
            Cell::Counter(i) => self.counters[i] = x,
        }
    }

    fn apply(&mut self, f: Func, cells: &[Cell]) {
        match f {
            Func::Inc => self.set(cells[0], self.get(cells[0]).wrapping_add(1)),
            Func::Add => self.set(cells[2], self.get(cells[0]).wrapping_add(self.get(cells[1]))),
            Func::Mix => self.set(cells[1], self.get(cells[1]).wrapping_mul(3).wrapping_add(self.get(cells[0]))),
        }
    }
}

/// Tree-walking reference interpreter.
pub struct RefInterp {
    pub state: ModelState,
    pub stats: ModelStats,
    pub loop_guard: u64,
}

impl RefInterp {
    pub fn new(p: &Program, loop_guard: u64) -> Self {
        Self { state: ModelState::new(p), stats: ModelStats::default(), loop_guard }
    }

    pub fn run(&mut self, p: &Program) -> Result<(), String> {
        self.block(&p.body, 0)
    }

    fn cell(a: Arg, index: usize) -> Result<Cell, String> {
        match a {
            Arg::Scalar(i) => Ok(Cell::Scalar(i)),
            Arg::Vector(v) if index < VECTOR_LEN => Ok(Cell::Elem(v, index)),
            Arg::Vector(_) => Err(format!("element {index} out of range")),
        }
    }

    /// One invocation over `n` iterations; vectors walk from element 0.
    fn sweep(&mut self, f: Func, args: &[Arg], n: u64) -> Result<(), String> {
        if n == 0 {
            return Ok(());
        }
        self.stats.translation_invocations += 1;
        for i in 0..n as usize {
            let cells = args.iter().map(|a| Self::cell(*a, i)).collect::<Result<Vec<_>, _>>()?;
            self.state.apply(f, &cells);
        }
        Ok(())
    }

    fn block(&mut self, body: &[Stmt], pos: usize) -> Result<(), String> {
        for s in body {
            self.stmt(s, pos)?;
        }
        Ok(())
    }

    fn stmt(&mut self, s: &Stmt, pos: usize) -> Result<(), String> {
        match s {
            Stmt::Call { f, args } => {
                let cells = args.iter().map(|a| Self::cell(*a, pos)).collect::<Result<Vec<_>, _>>()?;
                self.state.apply(*f, &cells);
                self.stats.call_dispatches += 1;
                self.stats.translation_invocations += 1;
            }
            Stmt::Iter { f, count, args } => self.sweep(*f, args, self.state.counts[*count])?,
            Stmt::Map { f, count, inputs, output } => {
                let mut args = inputs.clone();
                args.push(Arg::Vector(*output));
                self.sweep(*f, &args, self.state.counts[*count])?;
            }
            Stmt::If { cond, then, otherwise } => {
                let vars: Vec<i128> = self.state.scalars.iter().map(|v| *v as i128).collect();
                let taken = eval_expr(&cond.expr, &vars) == ExprValue::Bool(true);
                // begin, plus else or end on every path but a skipped bare if
                self.stats.control_steps += if taken || otherwise.is_some() { 2 } else { 1 };
                if taken {
                    self.block(then, pos)?;
                } else if let Some(o) = otherwise {
                    self.block(o, pos)?;
                }
            }
            Stmt::For { count, body } => {
                let n = self.state.counts[*count];
                self.stats.control_steps += 1;
                if n > self.loop_guard {
                    return Err(format!("for loop of {n} exceeds the guard"));
                }
                for i in 0..n as usize {
                    self.block(body, pos * n as usize + i)?;
                    self.stats.control_steps += 1;
                }
            }
            Stmt::While { counter, limit, body } => {
                self.stats.control_steps += 1;
                let mut iter = 0u64;
                while (self.state.counters[*counter] as i128) < *limit as i128 {
                    if iter >= self.loop_guard {
                        return Err("while loop exceeds the guard".into());
                    }
                    self.block(body, pos + iter as usize)?;
                    self.state.apply(Func::Inc, &[Cell::Counter(*counter)]);
                    self.stats.call_dispatches += 1;
                    self.stats.translation_invocations += 1;
                    self.stats.control_steps += 1;
                    iter += 1;
                }
            }
        }
        Ok(())
    }
}

/// Timestamp model of a bounded cache. LRU evicts the smallest last-use
/// time, FIFO the smallest insertion time.
#[derive(Debug, Clone)]
pub struct CacheModel {
    cap: usize,
    policy: EvictionPolicy,
    clock: u64,
    entries: Vec<ModelEntry>,
}

#[derive(Debug, Clone)]
struct ModelEntry {
    key: Vec<u8>,
    value: Value,
    inserted: u64,
    used: u64,
}

impl CacheModel {
    pub fn new(cap: usize, policy: EvictionPolicy) -> Self {
        Self { cap, policy, clock: 0, entries: Vec::new() }
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn find(&self, key: &[u8]) -> Option<usize> {
        self.entries.iter().position(|e| e.key == key)
    }

    pub fn insert(&mut self, key: Vec<u8>, value: Value) {
        let now = self.tick();
        if let Some(i) = self.find(&key) {
            let e = &mut self.entries[i];
            e.value = value;
            if self.policy == EvictionPolicy::Lru {
                e.used = now;
            }
            return;
        }
        if self.entries.len() == self.cap {
            let victim = match self.policy {
                EvictionPolicy::Lru => self.entries.iter().enumerate().min_by_key(|(_, e)| e.used),
                EvictionPolicy::Fifo => self.entries.iter().enumerate().min_by_key(|(_, e)| e.inserted),
            }
            .map(|(i, _)| i)
            .expect("full cache has entries");
            self.entries.swap_remove(victim);
        }
        self.entries.push(ModelEntry { key, value, inserted: now, used: now });
    }

    pub fn lookup(&mut self, key: &[u8]) -> Option<Value> {
        let now = self.tick();
        let i = self.find(key)?;
        if self.policy == EvictionPolicy::Lru {
            self.entries[i].used = now;
        }
        Some(self.entries[i].value)
    }

    pub fn invalidate(&mut self, key: &[u8]) {
        if let Some(i) = self.find(key) {
            self.entries.swap_remove(i);
        }
    }

    pub fn update(&mut self, key: &[u8], value: Value) {
        if let Some(i) = self.find(key) {
            self.entries[i].value = value;
        }
    }

    /// Keys from most to least recently ranked.
    pub fn order(&self) -> Vec<Vec<u8>> {
        let mut v: Vec<&ModelEntry> = self.entries.iter().collect();
        match self.policy {
            EvictionPolicy::Lru => v.sort_by_key(|e| std::cmp::Reverse(e.used)),
            EvictionPolicy::Fifo => v.sort_by_key(|e| std::cmp::Reverse(e.inserted)),
        }
        v.into_iter().map(|e| e.key.clone()).collect()
    }

    /// Sum of per-entry FNV-1a hashes.
    pub fn hash(&self) -> u64 {
        self.entries.iter().fold(0u64, |acc, e| acc.wrapping_add(entry_fnv(&e.key, &e.value)))
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 14695981039346656037;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(1099511628211);
    }
    h
}

fn tag_byte(v: &Value) -> u8 {
    match v.tag() {
        TypeTag::Int => b'd',
        TypeTag::UInt => b'u',
        TypeTag::Float => b'f',
        TypeTag::Bool => b'b',
        TypeTag::Handle => b'p',
    }
}

fn value_bytes(v: &Value) -> Vec<u8> {
    match v {
        Value::Int(x) => x.to_le_bytes().to_vec(),
        Value::UInt(x) => x.to_le_bytes().to_vec(),
        Value::Float(x) => x.to_le_bytes().to_vec(),
        Value::Bool(x) => vec![*x as u8],
        Value::Handle(x) => x.to_le_bytes().to_vec(),
    }
}

/// Hash of one cache entry: key, tag character, value bytes.
pub fn entry_fnv(key: &[u8], value: &Value) -> u64 {
    let mut bytes = key.to_vec();
    bytes.push(tag_byte(value));
    bytes.extend(value_bytes(value));
    fnv1a(bytes)
}
