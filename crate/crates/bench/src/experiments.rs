// SPDX-License-Identifier: Apache-2.0

//! Deterministic experiments. Every result is a transition count or a
//! modeled cycle total taken from the ledger; wall-clock time is never
//! reported.

use bundler_core::flow::{
    generate, make_driver, Bundler, DriverConfig, DriverKind, FlowError, FlowOp, OpMix, WorkloadSpec,
};
use bundler_core::sim::BoundaryError;
use bundler_core::value::ValueError;
use bundler_core::{
    CallFrame, ChannelError, Client, CostModel, EvictionPolicy, MemoOutcome, Memory, Predicate, SharedRegion,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::demo::{self, var, vector, Demo, CHECK, GET, INC, NOOP, PUT};
use crate::report::{BenchReport, Mean, Tally};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Value(#[from] ValueError),
    #[error(transparent)]
    Boundary(#[from] BoundaryError),
    #[error("{0}")]
    Mismatch(String),
}

/// Settings shared by every experiment.
#[derive(Debug, Clone, Copy)]
pub struct RunConfig {
    pub cost: CostModel,
    pub rounds: u64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { cost: CostModel::warm(), rounds: 20, seed: 1 }
    }
}

/// Rows of one experiment plus the graphs it submitted, as dump text.
#[derive(Debug, Default)]
pub struct Experiment {
    pub rows: Vec<BenchReport>,
    pub graphs: Vec<(String, String)>,
}

pub const MERGING_N: [u64; 6] = [1, 10, 20, 30, 40, 50];
pub const BATCHING_M: [u64; 5] = [1, 5, 10, 15, 20];
pub const BATCHING_LIST: u64 = 20;

fn running(state: Demo, cost: CostModel) -> Result<(bundler_core::Enclave<Demo>, Client), BenchError> {
    let mut e = demo::enclave(state, cost);
    let c = e.start_worker(&SharedRegion::new())?;
    Ok((e, c))
}

/// Measures `body` as a ledger difference.
fn measured<T>(
    c: &mut Client,
    body: impl FnOnce(&mut Client) -> Result<T, BenchError>,
) -> Result<(T, bundler_core::LedgerSnapshot), BenchError> {
    let before = c.ledger().snapshot();
    let out = body(c)?;
    Ok((out, c.ledger().snapshot().since(&before)))
}

/// `n` independent calls, issued one by one and as a single bundle.
pub fn merging(cfg: &RunConfig, ns: &[u64]) -> Result<Experiment, BenchError> {
    let (_e, mut c) = running(Demo::default(), cfg.cost)?;
    let mut exp = Experiment::default();
    for &n in ns {
        let (mut plain, mut bundled) = (Tally::default(), Tally::default());
        for _ in 0..cfg.rounds {
            let mut mem = Memory::new();
            let x = mem.var_i64(0);
            let frame = CallFrame::new(NOOP, vec![var(x)]);
            let ((), d) = measured(&mut c, |c| {
                for _ in 0..n {
                    c.hcall(&frame, &mut mem)?;
                }
                Ok(())
            })?;
            plain.add(&d);
            let ((), d) = measured(&mut c, |c| {
                c.bundle_begin()?;
                for _ in 0..n {
                    c.add_call(NOOP, vec![var(x)])?;
                }
                c.bundle_end(&mut mem)?;
                Ok(())
            })?;
            bundled.add(&d);
        }
        let mode = cfg.cost.cache_mode;
        exp.rows.push(BenchReport::new("merging.unbundled", mode, cfg.seed, &plain).n(n));
        exp.rows.push(BenchReport::new("merging.bundled", mode, cfg.seed, &bundled).n(n));
        if n == *ns.last().unwrap_or(&0) {
            let mut mem = Memory::new();
            let x = mem.var_i64(0);
            c.bundle_begin()?;
            for _ in 0..n {
                c.add_call(NOOP, vec![var(x)])?;
            }
            exp.graphs.push((format!("merging n={n}"), c.bundle_take()?.to_string()));
        }
    }
    Ok(exp)
}

/// `m` functions over a list of `n`, batched by iterator nodes and by a
/// for loop.
pub fn batching(cfg: &RunConfig, n: u64, ms: &[u64]) -> Result<Experiment, BenchError> {
    let (_e, mut c) = running(Demo::default(), cfg.cost)?;
    let mut exp = Experiment::default();
    let mode = cfg.cost.cache_mode;
    for &m in ms {
        let (mut it, mut lp) = (Tally::default(), Tally::default());
        let (mut it_inv, mut lp_inv, mut it_disp, mut lp_disp) = (0, 0, 0, 0);
        for _ in 0..cfg.rounds {
            let mut mem = Memory::new();
            let count = mem.var_u64(n);
            let start: Vec<i64> = (0..n as i64).collect();
            let a = mem.vector_i64(&start);
            let b = mem.vector_i64(&start);
            let (s, d) = measured(&mut c, |c| {
                c.bundle_begin()?;
                for _ in 0..m {
                    c.for_each(INC, count, vec![vector(a)])?;
                }
                Ok(c.bundle_end(&mut mem)?)
            })?;
            it.add(&d);
            it_inv += s.translation_invocations;
            it_disp += s.call_dispatches;
            let (s, d) = measured(&mut c, |c| {
                c.bundle_begin()?;
                c.begin_for(count)?;
                for _ in 0..m {
                    c.add_call(INC, vec![vector(b)])?;
                }
                c.end_for()?;
                Ok(c.bundle_end(&mut mem)?)
            })?;
            lp.add(&d);
            lp_inv += s.translation_invocations;
            lp_disp += s.call_dispatches;
            if mem.i64s(a)? != mem.i64s(b)? {
                return Err(BenchError::Mismatch(format!("batching m={m}: iterator and loop outputs differ")));
            }
        }
        let r = cfg.rounds;
        exp.rows.push(
            BenchReport::new("batching.iterator", mode, cfg.seed, &it)
                .n(n)
                .m(m)
                .counter("translation_invocations", Mean::new(it_inv, r))
                .counter("call_dispatches", Mean::new(it_disp, r)),
        );
        exp.rows.push(
            BenchReport::new("batching.loop", mode, cfg.seed, &lp)
                .n(n)
                .m(m)
                .counter("translation_invocations", Mean::new(lp_inv, r))
                .counter("call_dispatches", Mean::new(lp_disp, r)),
        );
    }
    Ok(exp)
}

/// One branching scenario: the trusted condition and how many times the
/// branch is taken in a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchCase {
    pub name: &'static str,
    pub condition: bool,
    pub iterations: u64,
}

pub const BRANCH_CASES: [BranchCase; 3] = [
    BranchCase { name: "true", condition: true, iterations: 1 },
    BranchCase { name: "false", condition: false, iterations: 1 },
    BranchCase { name: "false-loop2", condition: false, iterations: 2 },
];

/// Branching inside the graph against branching in the application,
/// where the condition is fetched with one call and the body submitted
/// with another.
pub fn branching(cfg: &RunConfig, cases: &[BranchCase]) -> Result<Experiment, BenchError> {
    let mut exp = Experiment::default();
    let mode = cfg.cost.cache_mode;
    for case in cases {
        let mut e = demo::enclave(Demo::default(), cfg.cost);
        e.simulate_ecall(|ctx| ctx.state_mut().flag = case.condition)?;
        let mut c = e.start_worker(&SharedRegion::new())?;
        let (mut enclave_side, mut app_side) = (Tally::default(), Tally::default());
        for _ in 0..cfg.rounds {
            let mut mem = Memory::new();
            let (flag, x, y) = (mem.var_i64(-1), mem.var_i64(0), mem.var_i64(0));
            let iters = mem.var_u64(case.iterations);
            let taken = Predicate::new("d==1", vec![var(flag)]).map_err(|e| BenchError::Mismatch(e.to_string()))?;
            let ((), d) = measured(&mut c, |c| {
                c.bundle_begin()?;
                if case.iterations > 1 {
                    c.begin_for(iters)?;
                }
                c.add_call(CHECK, vec![var(flag)])?;
                c.if_begin(taken.clone())?;
                c.add_call(INC, vec![var(x)])?;
                c.if_end()?;
                if case.iterations > 1 {
                    c.end_for()?;
                }
                c.bundle_end(&mut mem)?;
                Ok(())
            })?;
            enclave_side.add(&d);
            let ((), d) = measured(&mut c, |c| {
                for _ in 0..case.iterations {
                    c.call(CHECK, vec![var(flag)], &mut mem)?;
                    if mem.i64_at(flag, 0)? == 1 {
                        c.call(INC, vec![var(y)], &mut mem)?;
                    }
                }
                Ok(())
            })?;
            app_side.add(&d);
            if mem.i64_at(x, 0)? != mem.i64_at(y, 0)? {
                return Err(BenchError::Mismatch(format!("branching {}: outcomes differ", case.name)));
            }
        }
        let m = case.condition as u64;
        let name = |side| format!("branching.{}.{side}", case.name);
        exp.rows.push(BenchReport::new(name("enclave"), mode, cfg.seed, &enclave_side).n(case.iterations).m(m));
        exp.rows.push(BenchReport::new(name("app"), mode, cfg.seed, &app_side).n(case.iterations).m(m));
        if case.iterations > 1 {
            let mut mem = Memory::new();
            let (flag, x, iters) = (mem.var_i64(0), mem.var_i64(0), mem.var_u64(case.iterations));
            let taken = Predicate::new("d==1", vec![var(flag)]).map_err(|e| BenchError::Mismatch(e.to_string()))?;
            c.bundle_begin()?;
            c.begin_for(iters)?;
            c.add_call(CHECK, vec![var(flag)])?;
            c.if_begin(taken)?;
            c.add_call(INC, vec![var(x)])?;
            c.if_end()?;
            c.end_for()?;
            exp.graphs.push((format!("branching {}", case.name), c.bundle_take()?.to_string()));
        }
    }
    Ok(exp)
}

fn memo_enclave(
    cfg: &RunConfig,
    policy: EvictionPolicy,
    capacity: usize,
    keys: i64,
    memo: bool,
) -> Result<(bundler_core::Enclave<Demo>, Option<bundler_core::MemoCacheId>), BenchError> {
    let store = (0..keys).map(|k| (k, k * k + 1)).collect();
    let mut e = demo::enclave(Demo { store, ..Demo::default() }, cfg.cost);
    let id = if memo {
        let (id, _) = e.register_memo_cache(GET, capacity, policy)?;
        e.simulate_ecall(|ctx| ctx.state_mut().get_memo = Some(id))?;
        Some(id)
    } else {
        None
    };
    Ok((e, id))
}

/// Memoized reads (all hits, all misses, a seeded mix) and the cost of
/// keeping the cache current under a write-only workload.
pub fn memo(cfg: &RunConfig, policies: &[EvictionPolicy], capacity: usize, k: u64) -> Result<Experiment, BenchError> {
    let mut exp = Experiment::default();
    let mode = cfg.cost.cache_mode;
    let cap = capacity.max(1);
    let keys = (2 * cap as u64).max(k) as i64;
    for &policy in policies {
        let report =
            |name: &str, t: &Tally| BenchReport::new(name, mode, cfg.seed, t).n(cap as u64).m(k).policy(policy);
        let (mut hit, mut miss, mut mixed) = (Tally::default(), Tally::default(), Tally::default());
        let (mut hits, mut misses) = (0, 0);
        let (mut upd_off, mut upd_on) = (Tally::default(), Tally::default());
        for round in 0..cfg.rounds {
            // all misses: k distinct keys on a cold cache
            let (mut e, id) = memo_enclave(cfg, policy, cap, keys, true)?;
            let id = id.expect("memo enabled");
            let mut c = e.start_worker(&SharedRegion::new())?;
            let mut mem = Memory::new();
            let (key, out) = (mem.var_i64(0), mem.var_i64(0));
            let frame = CallFrame::new(GET, vec![var(key), var(out)]).memoized(id);
            let ((), d) = measured(&mut c, |c| {
                for i in 0..k as i64 {
                    mem.set(key, bundler_core::Value::Int(i))?;
                    if c.memo_call(&frame, &mut mem)? != MemoOutcome::Miss {
                        return Err(BenchError::Mismatch(format!("memo: key {i} should miss")));
                    }
                }
                Ok(())
            })?;
            miss.add(&d);

            // all hits: keys that fit in the cache, warmed first
            let warm = (cap as i64).min(keys);
            for i in 0..warm {
                mem.set(key, bundler_core::Value::Int(i))?;
                c.memo_call(&frame, &mut mem)?;
            }
            let ((), d) = measured(&mut c, |c| {
                for i in 0..k as i64 {
                    mem.set(key, bundler_core::Value::Int(i % warm))?;
                    if c.memo_call(&frame, &mut mem)? != MemoOutcome::Hit {
                        return Err(BenchError::Mismatch(format!("memo: key {} should hit", i % warm)));
                    }
                    if mem.i64_at(out, 0)? != (i % warm) * (i % warm) + 1 {
                        return Err(BenchError::Mismatch("memo: hit returned a wrong value".into()));
                    }
                }
                Ok(())
            })?;
            hit.add(&d);

            // seeded mix over twice the capacity
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(round));
            let ((), d) = measured(&mut c, |c| {
                for _ in 0..k {
                    let kk = rng.gen_range(0..2 * cap as i64);
                    mem.set(key, bundler_core::Value::Int(kk))?;
                    match c.memo_call(&frame, &mut mem)? {
                        MemoOutcome::Hit => hits += 1,
                        MemoOutcome::Miss => misses += 1,
                    }
                    if mem.i64_at(out, 0)? != kk * kk + 1 {
                        return Err(BenchError::Mismatch("memo: mixed lookup returned a wrong value".into()));
                    }
                }
                Ok(())
            })?;
            mixed.add(&d);
            drop(c);
            e.stop_worker()?;

            // write-only workload with and without a cache to maintain
            for on in [false, true] {
                let (mut e, id) = memo_enclave(cfg, policy, cap, keys, on)?;
                let mut c = e.start_worker(&SharedRegion::new())?;
                let mut mem = Memory::new();
                let (key, val, out) = (mem.var_i64(0), mem.var_i64(0), mem.var_i64(0));
                if let Some(id) = id {
                    let frame = CallFrame::new(GET, vec![var(key), var(out)]).memoized(id);
                    for i in 0..warm {
                        mem.set(key, bundler_core::Value::Int(i))?;
                        c.memo_call(&frame, &mut mem)?;
                    }
                }
                let put = CallFrame::new(PUT, vec![var(key), var(val)]);
                let ((), d) = measured(&mut c, |c| {
                    for i in 0..k as i64 {
                        mem.set(key, bundler_core::Value::Int(i % warm))?;
                        mem.set(val, bundler_core::Value::Int(i))?;
                        c.hcall(&put, &mut mem)?;
                    }
                    Ok(())
                })?;
                if on {
                    upd_on.add(&d)
                } else {
                    upd_off.add(&d)
                }
            }
        }
        let r = cfg.rounds;
        exp.rows.push(report("memo.hit", &hit));
        exp.rows.push(report("memo.miss", &miss));
        exp.rows.push(
            report("memo.mixed", &mixed).counter("hits", Mean::new(hits, r)).counter("misses", Mean::new(misses, r)),
        );
        exp.rows.push(report("memo.update.off", &upd_off));
        exp.rows.push(
            report("memo.update.on", &upd_on)
                .counter("overhead_cycles", Mean::new(upd_on.cycles.saturating_sub(upd_off.cycles), r)),
        );
    }
    Ok(exp)
}

/// Where flow-table operations come from.
#[derive(Debug, Clone)]
pub enum FlowWorkload {
    /// Generated per round from `seed + round`.
    Generated { ops: usize, mix: OpMix },
    /// The same operations every round.
    Fixed(Vec<FlowOp>),
}

#[derive(Debug, Clone)]
pub struct FlowParams {
    pub drivers: Vec<DriverKind>,
    pub workload: FlowWorkload,
    pub capacity: usize,
    pub batch: usize,
}

const OP_NAMES: [&str; 4] = ["add", "del", "mod", "evict"];

fn op_index(op: &FlowOp) -> usize {
    match op {
        FlowOp::Add { .. } => 0,
        FlowOp::Delete(_) => 1,
        FlowOp::Modify(..) => 2,
        FlowOp::Evict => 3,
    }
}

/// Per-operation ledger costs of every driver. All drivers must end with
/// the same table and return the same results.
pub fn flowtable(cfg: &RunConfig, p: &FlowParams) -> Result<Experiment, BenchError> {
    let mut exp = Experiment::default();
    let mode = cfg.cost.cache_mode;
    let dcfg = DriverConfig::new(p.capacity, p.batch, cfg.cost);
    let mut per_op = vec![[Tally::default(); 4]; p.drivers.len()];
    let mut totals = vec![Tally::default(); p.drivers.len()];
    let mut n_ops = 0u64;
    for round in 0..cfg.rounds {
        let ops = match &p.workload {
            FlowWorkload::Generated { ops, mix } => {
                generate(&WorkloadSpec::new(*ops, *mix), cfg.seed.wrapping_add(round))
            }
            FlowWorkload::Fixed(ops) => ops.clone(),
        };
        n_ops = ops.len() as u64;
        let mut reference = None;
        for (di, &kind) in p.drivers.iter().enumerate() {
            let mut d = make_driver(kind, dcfg)?;
            let mut results = Vec::with_capacity(ops.len());
            for op in &ops {
                let before = d.ledger();
                results.push(d.apply(op)?);
                per_op[di][op_index(op)].add(&d.ledger().since(&before));
            }
            totals[di].add(&d.ledger());
            let table = d.finish()?;
            match &reference {
                None => reference = Some((kind, results, table)),
                Some((rk, rr, rt)) => {
                    if *rr != results || *rt != table {
                        return Err(BenchError::Mismatch(format!(
                            "flowtable round {round}: {kind} disagrees with {rk}"
                        )));
                    }
                }
            }
        }
    }
    for (di, &kind) in p.drivers.iter().enumerate() {
        let row = |name: String, t: &Tally| {
            BenchReport::new(name, mode, cfg.seed, t).n(n_ops).m(p.capacity as u64).driver(kind).batch(p.batch)
        };
        for (i, name) in OP_NAMES.iter().enumerate() {
            let t = &per_op[di][i];
            exp.rows.push(row(format!("flowtable.{name}"), t).counter("ops", Mean::new(t.samples, cfg.rounds)));
        }
        exp.rows.push(row("flowtable.total".into(), &totals[di]));
    }
    if p.drivers.contains(&DriverKind::Bundler) {
        let b = Bundler::new(dcfg)?;
        exp.graphs.push((format!("bundler capacity={} batch={}", p.capacity, p.batch), b.dump_graphs()));
    }
    Ok(exp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> RunConfig {
        RunConfig { rounds: 2, ..RunConfig::default() }
    }

    fn row<'a>(exp: &'a Experiment, name: &str, n: u64) -> &'a BenchReport {
        exp.rows.iter().find(|r| r.experiment == name && r.n == Some(n)).expect("row present")
    }

    #[test]
    fn merging_ratio_is_n() {
        let exp = merging(&quick(), &[1, 10, 50]).unwrap();
        for n in [1, 10, 50] {
            let (u, b) = (row(&exp, "merging.unbundled", n), row(&exp, "merging.bundled", n));
            assert_eq!(u.switchless, Mean::new(2 * n, 2));
            assert_eq!(b.switchless, Mean::new(2, 2));
            assert_eq!(u.modeled_cycles.total, n * b.modeled_cycles.total);
        }
    }

    #[test]
    fn batching_counts() {
        let exp = batching(&quick(), 20, &[1, 5]).unwrap();
        let it = exp.rows.iter().find(|r| r.experiment == "batching.iterator" && r.m == Some(5)).unwrap();
        let lp = exp.rows.iter().find(|r| r.experiment == "batching.loop" && r.m == Some(5)).unwrap();
        assert_eq!(it.get_counter("translation_invocations").unwrap().to_string(), "5");
        assert_eq!(lp.get_counter("call_dispatches").unwrap().to_string(), "100");
        assert_eq!((it.switchless.to_string(), lp.switchless.to_string()), ("1".into(), "1".into()));
    }

    #[test]
    fn branching_directions() {
        let exp = branching(&quick(), &BRANCH_CASES).unwrap();
        let get = |n: &str| exp.rows.iter().find(|r| r.experiment == n).unwrap();
        let t = |n: &str| get(n).switchless.value();
        assert_eq!((t("branching.true.enclave"), t("branching.true.app")), (1.0, 2.0));
        assert_eq!((t("branching.false.enclave"), t("branching.false.app")), (1.0, 1.0));
        assert_eq!((t("branching.false-loop2.enclave"), t("branching.false-loop2.app")), (1.0, 2.0));
        let c = |n: &str| get(n).modeled_cycles.value();
        assert!(c("branching.false.app") < c("branching.false.enclave"));
        assert!(c("branching.true.enclave") < c("branching.true.app"));
    }

    #[test]
    fn memo_rows() {
        let exp = memo(&quick(), &[EvictionPolicy::Lru, EvictionPolicy::Fifo], 4, 12).unwrap();
        for r in &exp.rows {
            match r.experiment.as_str() {
                "memo.hit" => assert_eq!(r.switchless.total, 0),
                "memo.miss" => assert_eq!(r.switchless, Mean::new(24, 2)),
                "memo.update.on" => assert!(r.get_counter("overhead_cycles").unwrap().total > 0),
                _ => {}
            }
        }
    }

    #[test]
    fn flowtable_orders_drivers() {
        let p = FlowParams {
            drivers: DriverKind::ALL.to_vec(),
            workload: FlowWorkload::Generated { ops: 120, mix: OpMix::EVICT_HEAVY },
            capacity: 16,
            batch: 4,
        };
        let exp = flowtable(&quick(), &p).unwrap();
        let cost = |name: &str, k: DriverKind| {
            let r = exp.rows.iter().find(|r| r.experiment == name && r.driver == Some(k)).unwrap();
            r.ecalls.total + r.switchless.total
        };
        assert_eq!(cost("flowtable.total", DriverKind::Baseline), 0);
        assert!(cost("flowtable.total", DriverKind::Vanilla) > cost("flowtable.total", DriverKind::Switchless));
        assert!(cost("flowtable.total", DriverKind::Switchless) > cost("flowtable.total", DriverKind::Bundler));
        assert!(cost("flowtable.evict", DriverKind::Switchless) > cost("flowtable.evict", DriverKind::Bundler));
        assert_eq!(exp.graphs.len(), 1);
    }

    #[test]
    fn draining_a_full_table() {
        let mut ops: Vec<FlowOp> = (0..64)
            .map(|k| FlowOp::Add { priority: k % 8, matcher: bundler_core::flow::match_for(k), actions: k })
            .collect();
        ops.extend(std::iter::repeat_n(FlowOp::Evict, 64));
        let p = FlowParams {
            drivers: vec![DriverKind::Switchless, DriverKind::Bundler],
            workload: FlowWorkload::Fixed(ops),
            capacity: 64,
            batch: 16,
        };
        let exp = flowtable(&RunConfig { rounds: 1, ..RunConfig::default() }, &p).unwrap();
        let total = |k| {
            exp.rows.iter().find(|r| r.experiment == "flowtable.total" && r.driver == Some(k)).unwrap().switchless.total
        };
        assert!(total(DriverKind::Switchless) >= 10 * total(DriverKind::Bundler));
    }
}
