// SPDX-License-Identifier: Apache-2.0

//! Oracle suites. Each suite checks the core crate against an independent
//! model and reports one pass/fail line.

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use bundler_core::flow::{generate, make_driver, DriverConfig, DriverKind, OpMix, WorkloadSpec};
use bundler_core::memo::{
    fingerprint, CacheHash, MemoEntry, MemoTrusted, VerificationSchedule, VerifyStatus, ViolationAction,
    DEFAULT_VERIFY_PERIOD,
};
use bundler_core::{
    CostModel, EvictionPolicy, FunctionId, GraphBuilder, InterpConfig, MemoCache, MemoWrite, Memory, ParamDesc,
    Predicate, SharedRegion, SlotId, TypeTag, Value,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::demo::{self, var, Demo, GET, INC};
use crate::oracles::{eval_expr, eval_infix, CacheModel, ExprValue, RefInterp};
use crate::program::{all_shallow_exprs, random_bool_expr, random_program, Expr};

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteResult {
    pub suite: &'static str,
    pub pass: bool,
    pub detail: String,
    /// Verification reports printed beside the verdict.
    pub reports: Vec<String>,
}

impl SuiteResult {
    fn new(suite: &'static str, outcome: Result<String, String>) -> Self {
        let (pass, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        Self { suite, pass, detail, reports: Vec::new() }
    }
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "verify {} {} {}", self.suite, if self.pass { "PASS" } else { "FAIL" }, self.detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub loop_guard: u64,
    /// Tampers with the live cache in the memo suite.
    pub inject_tamper: bool,
    pub graphs: usize,
    pub predicate_cases: usize,
    pub eviction_sequences: usize,
    pub hash_mutations: usize,
    pub workloads: usize,
    pub max_ops: usize,
    pub period: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            loop_guard: InterpConfig::default().loop_guard,
            inject_tamper: false,
            graphs: 200,
            predicate_cases: 10_000,
            eviction_sequences: 10_000,
            hash_mutations: 10_000,
            workloads: 100,
            max_ops: 2_000,
            period: DEFAULT_VERIFY_PERIOD,
        }
    }
}

pub fn run_all(o: &VerifyOptions) -> Vec<SuiteResult> {
    vec![interpreter(o), while_loop(o), predicate(o), eviction(o), hash(o), tamper(o), memo(o), drivers(o)]
}

/// Random graphs against the tree-walking interpreter.
pub fn interpreter(o: &VerifyOptions) -> SuiteResult {
    SuiteResult::new("interpreter", check_interpreter(o))
}

fn check_interpreter(o: &VerifyOptions) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let (mut nodes, mut deepest) = (0, 0);
    for g in 0..o.graphs {
        let p = random_program(&mut rng, 64);
        let mut mem = Memory::new();
        let slots = p.bind(&mut mem);
        let mut e = demo::enclave(Demo::default(), CostModel::warm());
        let graph = p.graph(e.signatures(), &slots).map_err(|m| format!("graph {g}: {m}"))?;
        nodes = nodes.max(graph.len());
        deepest = deepest.max(depth(&p.body));
        let got = e.ecall_graph(Arc::new(graph), &mut mem);
        let mut reference = RefInterp::new(&p, InterpConfig::default().loop_guard);
        let want = reference.run(&p);
        if got.is_ok() != want.is_ok() {
            return Err(format!("graph {g}: interpreter {got:?}, reference {want:?}"));
        }
        let (scalars, vectors) = slots.snapshot(&mem);
        let counters: Vec<i64> = slots.counters.iter().map(|s| mem.i64_at(*s, 0).expect("counter")).collect();
        let s = &reference.state;
        if scalars != s.scalars || vectors != s.vectors || counters != s.counters {
            return Err(format!("graph {g}: final memory differs"));
        }
        if let Ok(stats) = got {
            let r = reference.stats;
            let ours = (stats.call_dispatches, stats.translation_invocations, stats.control_steps);
            if ours != (r.call_dispatches, r.translation_invocations, r.control_steps) {
                return Err(format!("graph {g}: stats {ours:?} vs reference {r:?}"));
            }
        }
    }
    Ok(format!("graphs={} max_nodes={nodes} max_depth={deepest}", o.graphs))
}

fn depth(body: &[crate::program::Stmt]) -> usize {
    use crate::program::Stmt;
    body.iter()
        .map(|s| match s {
            Stmt::If { then, otherwise, .. } => 1 + depth(then).max(otherwise.as_deref().map_or(0, depth)),
            Stmt::For { body, .. } | Stmt::While { body, .. } => 1 + depth(body),
            _ => 0,
        })
        .max()
        .unwrap_or(0)
}

/// `while x < 3 { x += 1 }` under the configured loop guard.
pub fn while_loop(o: &VerifyOptions) -> SuiteResult {
    let run = || -> Result<String, String> {
        let mut e = demo::enclave(Demo::default(), CostModel::warm());
        e.set_interp_config(InterpConfig { loop_guard: o.loop_guard });
        let mut mem = Memory::new();
        let x = mem.var_i64(0);
        let mut b = GraphBuilder::new(e.signatures());
        b.while_begin(Predicate::new("d<3", vec![var(x)]).map_err(|e| e.to_string())?);
        b.call(INC, vec![var(x)]).map_err(|e| e.to_string())?;
        b.while_end();
        let g = b.build().map_err(|e| e.to_string())?;
        match e.ecall_graph(Arc::new(g), &mut mem) {
            Ok(_) if mem.i64_at(x, 0) == Ok(3) => Ok(format!("iterations=3 guard={}", o.loop_guard)),
            Ok(_) => Err(format!("loop stopped at x={:?}", mem.i64_at(x, 0))),
            Err(err) => Err(format!("guard tripped: {err}")),
        }
    };
    SuiteResult::new("while", run())
}

/// Core predicates against the infix evaluator and the expression tree.
pub fn predicate(o: &VerifyOptions) -> SuiteResult {
    SuiteResult::new("predicate", check_predicates(o))
}

fn agree(e: &Expr, tags: &[TypeTag], values: &[Value]) -> Result<(), String> {
    let (text, vars) = e.render(tags);
    let operands: Vec<ParamDesc> = vars.iter().map(|v| ParamDesc::var(SlotId(*v as u32), tags[*v])).collect();
    let bound: Vec<Value> = vars.iter().map(|v| values[*v]).collect();
    let ints: Vec<i128> = values
        .iter()
        .map(|v| match v {
            Value::Int(x) => *x as i128,
            Value::UInt(x) => *x as i128,
            _ => unreachable!("integer operands only"),
        })
        .collect();
    let tree = eval_expr(e, &ints) == ExprValue::Bool(true);
    let infix = eval_infix(&text, &bound).map_err(|m| format!("{text}: reference rejects: {m}"))?;
    let core = Predicate::new(&text, operands)
        .and_then(|p| p.eval(&bound))
        .map_err(|m| format!("{text}: core rejects: {m}"))?;
    if tree != infix || core != infix {
        return Err(format!("{text} on {bound:?}: core {core}, infix {infix}, tree {tree}"));
    }
    Ok(())
}

fn check_predicates(o: &VerifyOptions) -> Result<String, String> {
    let mut exhaustive = 0u64;
    for e in all_shallow_exprs() {
        let (_, vars) = e.render(&[TypeTag::Int; 4]);
        let n = vars.iter().max().map_or(0, |m| m + 1);
        let tags = vec![TypeTag::Int; n];
        for code in 0..5usize.pow(n as u32) {
            let values: Vec<Value> = (0..n).map(|i| Value::Int((code / 5usize.pow(i as u32) % 5) as i64 - 2)).collect();
            agree(&e, &tags, &values)?;
            exhaustive += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed ^ 0x5eed);
    for _ in 0..o.predicate_cases {
        let n = rng.gen_range(1..=4);
        let tags: Vec<TypeTag> =
            (0..n).map(|_| if rng.gen_ratio(1, 4) { TypeTag::UInt } else { TypeTag::Int }).collect();
        let values: Vec<Value> = tags
            .iter()
            .map(|t| match t {
                TypeTag::UInt => Value::UInt(rng.gen_range(0..=4)),
                _ => Value::Int(rng.gen_range(-3..=3)),
            })
            .collect();
        let depth = rng.gen_range(2..=6);
        agree(&random_bool_expr(&mut rng, depth, n), &tags, &values)?;
    }
    Ok(format!("exhaustive={exhaustive} random={}", o.predicate_cases))
}

#[derive(Debug, Clone, Copy)]
enum CacheOp {
    Insert(u8, i64),
    Lookup(u8),
    Invalidate(u8),
    Update(u8, i64),
}

fn cache_op(rng: &mut ChaCha8Rng, keys: u8) -> CacheOp {
    let k = rng.gen_range(0..keys);
    match rng.gen_range(0..10) {
        0..=3 => CacheOp::Insert(k, rng.gen()),
        4..=6 => CacheOp::Lookup(k),
        7 => CacheOp::Invalidate(k),
        _ => CacheOp::Update(k, rng.gen()),
    }
}

fn memo_key(k: u8) -> Vec<u8> {
    fingerprint(&[Value::Int(k as i64)])
}

/// Applies `op` to both the cache and the model and compares them.
fn step(
    t: &mut MemoTrusted,
    id: bundler_core::MemoCacheId,
    cache: &MemoCache,
    model: &mut CacheModel,
    op: CacheOp,
) -> Result<(), String> {
    let err = |e: bundler_core::memo::MemoError| e.to_string();
    match op {
        CacheOp::Insert(k, v) => {
            t.insert(id, memo_key(k), Value::Int(v)).map_err(err)?;
            model.insert(memo_key(k), Value::Int(v));
        }
        CacheOp::Lookup(k) => {
            let got = cache.lookup(&memo_key(k)).map_err(err)?;
            let want = model.lookup(&memo_key(k));
            if got != want {
                return Err(format!("lookup {k}: cache {got:?}, model {want:?}"));
            }
        }
        CacheOp::Invalidate(k) => {
            t.on_write(id, &memo_key(k), MemoWrite::Invalidate).map_err(err)?;
            model.invalidate(&memo_key(k));
        }
        CacheOp::Update(k, v) => {
            t.on_write(id, &memo_key(k), MemoWrite::Update(Value::Int(v))).map_err(err)?;
            model.update(&memo_key(k), Value::Int(v));
        }
    }
    if cache.order() != model.order() {
        return Err(format!("after {op:?}: order differs"));
    }
    Ok(())
}

fn fresh(cap: usize, policy: EvictionPolicy) -> (MemoTrusted, bundler_core::MemoCacheId, Arc<MemoCache>) {
    let cache = Arc::new(MemoCache::new(FunctionId(9), cap, policy).expect("positive capacity"));
    let mut t = MemoTrusted::default();
    let id = t.register(Arc::clone(&cache));
    (t, id, cache)
}

/// LRU and FIFO against the timestamp model.
pub fn eviction(o: &VerifyOptions) -> SuiteResult {
    let run = || -> Result<String, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(o.seed ^ 0xe71c);
        let mut ops = 0;
        for s in 0..o.eviction_sequences {
            let cap = rng.gen_range(1..=8);
            let policy = if rng.gen() { EvictionPolicy::Lru } else { EvictionPolicy::Fifo };
            let (mut t, id, cache) = fresh(cap, policy);
            let mut model = CacheModel::new(cap, policy);
            for _ in 0..rng.gen_range(1..=40) {
                let op = cache_op(&mut rng, 12);
                step(&mut t, id, &cache, &mut model, op)
                    .map_err(|m| format!("sequence {s} ({policy}, cap {cap}): {m}"))?;
                ops += 1;
            }
        }
        Ok(format!("sequences={} ops={ops}", o.eviction_sequences))
    };
    SuiteResult::new("eviction", run())
}

#[derive(Debug, Clone, Copy)]
enum Tamper {
    Rewrite,
    Remove,
    Forge,
}

/// Corrupts the untrusted entries and returns the undo information.
fn tamper_with(cache: &MemoCache, how: Tamper, rng: &mut ChaCha8Rng) -> (Vec<u8>, Option<MemoEntry>) {
    cache.with_untrusted_entries(|entries| {
        let mut keys: Vec<Vec<u8>> = entries.keys().cloned().collect();
        keys.sort();
        match (how, keys.is_empty()) {
            (Tamper::Rewrite, false) => {
                let k = keys[rng.gen_range(0..keys.len())].clone();
                let e = entries.get_mut(&k).expect("listed key");
                let old = e.clone();
                e.value[0] ^= 1 << rng.gen_range(0..8);
                (k, Some(old))
            }
            (Tamper::Remove, false) => {
                let k = keys[rng.gen_range(0..keys.len())].clone();
                let old = entries.remove(&k);
                (k, old)
            }
            _ => {
                let k = b"forged".to_vec();
                entries.insert(k.clone(), MemoEntry::new(k.clone(), &Value::Int(rng.gen())));
                (k, None)
            }
        }
    })
}

fn restore(cache: &MemoCache, (key, old): (Vec<u8>, Option<MemoEntry>)) {
    cache.with_untrusted_entries(|entries| match old {
        Some(e) => {
            entries.insert(key, e);
        }
        None => {
            entries.remove(&key);
        }
    });
}

/// Incremental hash against from-scratch sums, then tamper checks.
pub fn hash(o: &VerifyOptions) -> SuiteResult {
    let run = || -> Result<String, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(o.seed ^ 0x4a54);
        let (mut t, id, cache) = fresh(16, EvictionPolicy::Lru);
        t.set_schedule(VerificationSchedule { period: 1, on_violation: ViolationAction::Flag })
            .map_err(|e| e.to_string())?;
        let mut model = CacheModel::new(16, EvictionPolicy::Lru);
        let (mut detected, mut restored) = (0, 0);
        for i in 0..o.hash_mutations {
            step(&mut t, id, &cache, &mut model, cache_op(&mut rng, 24))?;
            let inc = t.hash(id).map_err(|e| e.to_string())?;
            if inc != CacheHash::of(&cache.entries()) || inc.0 != model.hash() {
                return Err(format!("mutation {i}: incremental {:#x}, scratch {:#x}", inc.0, model.hash()));
            }
            if i % 10 == 0 {
                let how = [Tamper::Rewrite, Tamper::Remove, Tamper::Forge][rng.gen_range(0..3)];
                let undo = tamper_with(&cache, how, &mut rng);
                if t.verify_all()[0].status != VerifyStatus::Violation {
                    return Err(format!("mutation {i}: {how:?} tamper not detected"));
                }
                detected += 1;
                restore(&cache, undo);
                if t.verify_all()[0].status != VerifyStatus::Ok {
                    return Err(format!("mutation {i}: restored cache flagged"));
                }
                restored += 1;
            }
        }
        Ok(format!("mutations={} tampers_detected={detected} restores_clean={restored}", o.hash_mutations))
    };
    SuiteResult::new("hash", run())
}

/// Polls from a tamper until its detection, on a deterministic poll clock.
/// A tamper restored before the next tick stays undetected.
pub fn tamper(o: &VerifyOptions) -> SuiteResult {
    let run = || -> Result<String, String> {
        let period = o.period.clamp(1, 4096);
        let mut rng = ChaCha8Rng::seed_from_u64(o.seed ^ 0x7a3);
        let mut worst = 0;
        for round in 0..50 {
            let (mut t, id, cache) = fresh(8, EvictionPolicy::Fifo);
            t.set_schedule(VerificationSchedule { period, on_violation: ViolationAction::FlagAndClear })
                .map_err(|e| e.to_string())?;
            for k in 0..8 {
                t.insert(id, memo_key(k), Value::Int(k as i64)).map_err(|e| e.to_string())?;
            }
            for _ in 0..rng.gen_range(0..3 * period) {
                t.on_poll();
            }
            let how = [Tamper::Rewrite, Tamper::Remove, Tamper::Forge][round % 3];
            let undo = tamper_with(&cache, how, &mut rng);
            if round % 2 == 1 {
                // restored before the next tick
                restore(&cache, undo);
                let before = t.log().violations();
                for _ in 0..period {
                    t.on_poll();
                }
                if t.log().violations() != before {
                    return Err(format!("round {round}: restored tamper was flagged"));
                }
                continue;
            }
            let mut polls = 0;
            while t.log().violations() == 0 {
                t.on_poll();
                polls += 1;
                if polls > period {
                    return Err(format!("round {round}: {how:?} tamper undetected after {polls} polls"));
                }
            }
            worst = worst.max(polls);
            if !cache.is_empty() {
                return Err(format!("round {round}: violating cache was not cleared"));
            }
        }
        Ok(format!("period={period} worst_latency={worst}"))
    };
    SuiteResult::new("tamper", run())
}

/// Live worker verification of a memo cache, with an optional tamper.
pub fn memo(o: &VerifyOptions) -> SuiteResult {
    let mut reports = Vec::new();
    let outcome = live_memo(o, &mut reports);
    let mut r = SuiteResult::new("memo", outcome);
    r.reports = reports;
    r
}

/// Result of a live tamper: polls between the tamper and its detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Detection {
    pub latency: u64,
    pub period: u64,
}

/// Tampers with a cache while the worker polls and waits for the periodic
/// check to flag it.
pub fn live_tamper(period: u64, seed: u64) -> Result<Detection, String> {
    let mut reports = Vec::new();
    run_live(period, seed, true, &mut reports).and_then(|d| d.ok_or_else(|| "tamper not detected".to_string()))
}

fn live_memo(o: &VerifyOptions, reports: &mut Vec<String>) -> Result<String, String> {
    let period = o.period.clamp(1, 1 << 16);
    match run_live(period, o.seed, o.inject_tamper, reports)? {
        Some(d) => Err(format!("integrity violation detected {} polls after tamper", d.latency)),
        None => Ok(format!("period={period} checks={}", reports.len())),
    }
}

fn run_live(period: u64, seed: u64, tamper: bool, reports: &mut Vec<String>) -> Result<Option<Detection>, String> {
    let err = |e: &dyn fmt::Display| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = demo::enclave(Demo::default(), CostModel::warm());
    let (id, cache) = e.register_memo_cache(GET, 8, EvictionPolicy::Lru).map_err(|x| err(&x))?;
    e.set_verification(VerificationSchedule { period, on_violation: ViolationAction::FlagAndClear })
        .map_err(|x| err(&x))?;
    e.simulate_ecall(|ctx| (0..8).try_for_each(|k| ctx.memo_insert(id, fingerprint(&[Value::Int(k)]), Value::Int(0))))
        .map_err(|x| err(&x))?
        .map_err(|x| err(&x))?;
    let log = e.verify_log().clone();
    let ledger = Arc::clone(e.ledger());
    let client = e.start_worker(&SharedRegion::new()).map_err(|x| err(&x))?;
    let deadline = Instant::now() + Duration::from_secs(30);
    let wait_for = |cond: &dyn Fn() -> bool| -> Result<(), String> {
        while !cond() {
            if Instant::now() > deadline {
                return Err("timed out waiting for the worker".into());
            }
            std::thread::sleep(Duration::from_micros(200));
        }
        Ok(())
    };
    let mut detection = None;
    wait_for(&|| !log.reports().is_empty())?;
    if tamper {
        let _undo = tamper_with(&cache, Tamper::Rewrite, &mut rng);
        let at_tamper = ledger.snapshot().worker_poll_iterations;
        wait_for(&|| log.violations() > 0)?;
        let flagged = log.reports().into_iter().find(|r| r.status == VerifyStatus::Violation).expect("violation");
        detection = Some(Detection { latency: flagged.at_poll.saturating_sub(at_tamper), period });
    } else {
        let seen = log.reports().len();
        wait_for(&|| log.reports().len() > seen)?;
    }
    drop(client);
    e.stop_worker().map_err(|x| err(&x))?;
    reports.extend(log.reports().iter().map(|r| r.to_string()));
    if let Some(d) = detection {
        if d.latency > period {
            return Err(format!("tamper detected after {} polls, period {period}", d.latency));
        }
    }
    Ok(detection)
}

/// Outcome of one seeded flow-table workload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadCheck {
    pub ops: usize,
    pub evict_heavy: bool,
    /// Transitions per driver, in [`DriverKind::ALL`] order.
    pub transitions: [u64; 4],
}

/// Shortest generated workload. Adds cost vanilla and switchless one
/// transition each, so a handful of adds alone would tie them.
pub const MIN_WORKLOAD_OPS: usize = 100;

/// Runs one seeded workload on every driver and checks agreement.
pub fn check_workload(seed: u64, max_ops: usize) -> Result<WorkloadCheck, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ops = rng.gen_range(MIN_WORKLOAD_OPS..=max_ops.max(MIN_WORKLOAD_OPS));
    let evict_heavy = seed.is_multiple_of(2);
    let mix = if evict_heavy { OpMix::EVICT_HEAVY } else { OpMix::BALANCED };
    let spec = WorkloadSpec { keys: rng.gen_range(8..=128), ..WorkloadSpec::new(ops, mix) };
    let cap = rng.gen_range(4..=64);
    let batch = rng.gen_range(1..=16);
    let workload = generate(&spec, rng.gen());
    let mut outcomes = Vec::new();
    let mut transitions = [0; 4];
    for (i, kind) in DriverKind::ALL.into_iter().enumerate() {
        let mut d = make_driver(kind, DriverConfig::new(cap, batch, CostModel::warm())).map_err(|e| e.to_string())?;
        let results =
            workload.iter().map(|op| d.apply(op)).collect::<Result<Vec<_>, _>>().map_err(|e| format!("{kind}: {e}"))?;
        transitions[i] = d.ledger().transitions();
        outcomes.push((kind, results, d.finish().map_err(|e| e.to_string())?));
    }
    let (_, base_results, base_rules) = &outcomes[0];
    for (kind, results, rules) in &outcomes[1..] {
        if results != base_results || rules != base_rules {
            return Err(format!("{kind} disagrees with baseline"));
        }
    }
    Ok(WorkloadCheck { ops, evict_heavy, transitions })
}

/// Whether transitions follow vanilla > switchless >= bundler, strictly
/// on evict-heavy workloads, with no transitions for the baseline.
pub fn ordered(c: &WorkloadCheck) -> bool {
    let [base, vanilla, switchless, bundler] = c.transitions;
    base == 0 && vanilla > switchless && switchless >= bundler && (!c.evict_heavy || switchless > bundler)
}

/// Every driver against the baseline table on seeded workloads.
pub fn drivers(o: &VerifyOptions) -> SuiteResult {
    let run = || -> Result<String, String> {
        let mut total = 0;
        for w in 0..o.workloads as u64 {
            let c = check_workload(o.seed.wrapping_mul(1000).wrapping_add(w), o.max_ops)
                .map_err(|m| format!("workload {w}: {m}"))?;
            if !ordered(&c) {
                return Err(format!("workload {w}: transitions {:?} out of order", c.transitions));
            }
            total += c.ops;
        }
        Ok(format!("workloads={} ops={total}", o.workloads))
    };
    SuiteResult::new("drivers", run())
}
