// SPDX-License-Identifier: Apache-2.0

//! Acceptance criteria. Each prints one pass/fail line; the test fails if
//! any criterion does.

use std::io::Write;
use std::time::{Duration, Instant};

use bundler_bench::demo::{self, var, Demo, INC};
use bundler_bench::experiments::{self, RunConfig, BATCHING_LIST, BATCHING_M, BRANCH_CASES, MERGING_N};
use bundler_bench::report::{BenchReport, CSV_HEADER};
use bundler_bench::verify::{self, VerifyOptions};
use bundler_core::memo::DEFAULT_VERIFY_PERIOD;
use bundler_core::{CostModel, EvictionPolicy, Memory, SharedRegion};

type Outcome = Result<String, String>;

/// Number, name, runtime limit in seconds, check.
type Criterion = (u32, &'static str, u64, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn row<'a>(rows: &'a [BenchReport], name: &str, n: Option<u64>) -> Result<&'a BenchReport, String> {
    rows.iter()
        .find(|r| r.experiment == name && (n.is_none() || r.n == n))
        .ok_or_else(|| format!("missing row {name} n={n:?}"))
}

fn single_transition() -> Outcome {
    for k in [1u64, 10, 20, 30, 40, 50] {
        let mut e = demo::enclave(Demo::default(), CostModel::warm());
        let mut c = e.start_worker(&SharedRegion::new()).map_err(|x| x.to_string())?;
        let mut mem = Memory::new();
        let x = mem.var_i64(0);
        let before = e.ledger().snapshot();
        c.bundle_begin().map_err(|x| x.to_string())?;
        for _ in 0..k {
            c.add_call(INC, vec![var(x)]).map_err(|x| x.to_string())?;
        }
        c.bundle_end(&mut mem).map_err(|x| x.to_string())?;
        let d = e.ledger().snapshot().since(&before);
        c.close().map_err(|x| x.to_string())?;
        e.stop_worker().map_err(|x| x.to_string())?;
        let state = e.into_state().map_err(|x| x.to_string())?;
        ensure(d.switchless_job_count == 1 && d.ecall_count == 0, || format!("k={k}: {d:?}"))?;
        ensure(state.executions == k && mem.i64_at(x, 0) == Ok(k as i64), || {
            format!("k={k}: {} executions", state.executions)
        })?;
    }
    Ok("k=1..50: 1 switchless transition, k executions".into())
}

fn merging_ratio() -> Outcome {
    let cfg = RunConfig { rounds: 3, ..RunConfig::default() };
    let t = CostModel::warm().switchless_overhead;
    let exp = experiments::merging(&cfg, &MERGING_N).map_err(|e| e.to_string())?;
    for n in MERGING_N {
        let plain = row(&exp.rows, "merging.unbundled", Some(n))?.modeled_cycles;
        let bundled = row(&exp.rows, "merging.bundled", Some(n))?.modeled_cycles;
        // n·T over T, compared without division
        ensure(plain.total * bundled.count == n * bundled.total * plain.count, || {
            format!("n={n}: unbundled {plain} vs bundled {bundled}")
        })?;
        ensure(plain.total == n * t * plain.count && bundled.total == t * bundled.count, || {
            format!("n={n}: cycles differ from n*{t} and {t}")
        })?;
    }
    Ok(format!("unbundled/bundled == n for n in {MERGING_N:?}, T={t}"))
}

fn iterator_vs_loop() -> Outcome {
    let cfg = RunConfig { rounds: 1, ..RunConfig::default() };
    let exp = experiments::batching(&cfg, BATCHING_LIST, &BATCHING_M).map_err(|e| e.to_string())?;
    for m in BATCHING_M {
        let of = |name: &str| {
            exp.rows.iter().find(|r| r.experiment == name && r.m == Some(m)).ok_or(format!("missing {name} m={m}"))
        };
        let (it, lp) = (of("batching.iterator")?, of("batching.loop")?);
        let inv = it.get_counter("translation_invocations").map(|v| v.total / v.count.max(1));
        let disp = lp.get_counter("call_dispatches").map(|v| v.total / v.count.max(1));
        ensure(inv == Some(m) && disp == Some(m * BATCHING_LIST), || {
            format!("m={m}: iterator {inv:?} invocations, loop {disp:?} dispatches")
        })?;
    }
    Ok(format!("m in {BATCHING_M:?}: m invocations vs m*{BATCHING_LIST} dispatches, outputs equal"))
}

fn suite(r: verify::SuiteResult) -> Outcome {
    if r.pass {
        Ok(r.detail)
    } else {
        Err(r.detail)
    }
}

fn memo_counts() -> Outcome {
    let cfg = RunConfig { rounds: 2, ..RunConfig::default() };
    let k = 50;
    let exp =
        experiments::memo(&cfg, &[EvictionPolicy::Lru, EvictionPolicy::Fifo], 16, k).map_err(|e| e.to_string())?;
    for policy in [EvictionPolicy::Lru, EvictionPolicy::Fifo] {
        let of = |name: &str| {
            exp.rows.iter().find(|r| r.experiment == name && r.policy == Some(policy)).ok_or(format!("missing {name}"))
        };
        let (hit, miss) = (of("memo.hit")?, of("memo.miss")?);
        ensure(hit.ecalls.total + hit.switchless.total == 0, || format!("{policy}: hits crossed the boundary"))?;
        ensure(miss.ecalls.total == 0 && miss.switchless.total == k * miss.switchless.count, || {
            format!("{policy}: {} transitions for {k} misses", miss.switchless)
        })?;
    }
    Ok(format!("all-hit 0 transitions, all-miss {k} of {k}"))
}

fn integrity() -> Outcome {
    let o = VerifyOptions::default();
    let h = suite(verify::hash(&o))?;
    let t = suite(verify::tamper(&o))?;
    let live = verify::live_tamper(DEFAULT_VERIFY_PERIOD, 3)?;
    ensure(live.latency <= live.period, || format!("live tamper found after {} polls", live.latency))?;
    Ok(format!("{h}; {t}; live latency={} period={}", live.latency, live.period))
}

fn branching_directions() -> Outcome {
    let exp = experiments::branching(&RunConfig { rounds: 2, ..RunConfig::default() }, &BRANCH_CASES)
        .map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for case in BRANCH_CASES {
        let enc = row(&exp.rows, &format!("branching.{}.enclave", case.name), None)?;
        let app = row(&exp.rows, &format!("branching.{}.app", case.name), None)?;
        let tr = |r: &BenchReport| (r.ecalls.total + r.switchless.total) / r.repetitions.max(1);
        let (te, ta) = (tr(enc), tr(app));
        let expected = match (case.condition, case.iterations) {
            (true, _) => (1, 2),
            (false, 1) => (1, 1),
            (false, _) => (1, 2),
        };
        ensure((te, ta) == expected, || format!("{}: transitions {te} vs {ta}, expected {expected:?}", case.name))?;
        let app_cheaper = app.modeled_cycles.value() <= enc.modeled_cycles.value();
        let single_false = !case.condition && case.iterations == 1;
        ensure(!app_cheaper || single_false, || format!("{}: app branch cheaper in cycles", case.name))?;
        out.push(format!("{} {te}v{ta}", case.name));
    }
    Ok(out.join(", "))
}

fn drivers() -> Outcome {
    let (mut ops, mut strict) = (0, 0);
    for w in 0..100u64 {
        let c = verify::check_workload(9000 + w, 2_000).map_err(|m| format!("workload {w}: {m}"))?;
        ensure(c.ops <= 10_000 && verify::ordered(&c), || format!("workload {w}: {:?}", c))?;
        ops += c.ops;
        strict += c.evict_heavy as u32;
    }
    Ok(format!("100 workloads, {ops} ops, {strict} evict-heavy strict"))
}

fn determinism() -> Outcome {
    let dir = std::env::temp_dir().join(format!("bench-cli-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for i in 0..2 {
        let path = dir.join(format!("run{i}.csv"));
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_bench-cli"))
            .args(["all", "--seed", "42", "--rounds", "2"])
            .arg("--csv")
            .arg(&path)
            .stderr(std::process::Stdio::null())
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), || format!("run {i} exited with {status}"))?;
        outputs.push(std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    std::fs::remove_dir_all(&dir).ok();
    ensure(outputs[0] == outputs[1], || "CSV differs between runs".into())?;
    let text = String::from_utf8_lossy(&outputs[0]);
    ensure(text.lines().next() == Some(CSV_HEADER), || "unexpected header".into())?;
    Ok(format!("{} identical bytes, {} rows", outputs[0].len(), text.lines().count() - 1))
}

/// Writes past the test harness's output capture so the verdicts always
/// show up in the log.
fn line(args: std::fmt::Arguments<'_>) {
    let mut out = std::io::stdout().lock();
    out.write_fmt(args).and_then(|()| out.write_all(b"\n")).expect("stdout is writable");
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 11] = [
        (1, "single transition per bundle", 1, single_transition),
        (2, "merging ratio", 1, merging_ratio),
        (3, "iterator vs loop", 1, iterator_vs_loop),
        (4, "interpreter oracle", 10, || suite(verify::interpreter(&VerifyOptions::default()))),
        (5, "predicate oracle", 10, || suite(verify::predicate(&VerifyOptions::default()))),
        (6, "memo hit purity", 1, memo_counts),
        (7, "eviction policies", 10, || suite(verify::eviction(&VerifyOptions::default()))),
        (8, "integrity hash", 10, integrity),
        (9, "branching directions", 1, branching_directions),
        (10, "driver equivalence and ordering", 60, drivers),
        (11, "determinism", 60, determinism),
    ];
    let mut failed = Vec::new();
    for (id, name, limit, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let outcome = outcome.and_then(|d| {
            if took <= Duration::from_secs(limit) {
                Ok(d)
            } else {
                Err(format!("{d} (took {took:.2?}, limit {limit}s)"))
            }
        });
        match &outcome {
            Ok(d) => line(format_args!("criterion {id}: PASS {name}: {d} [{took:.2?}]")),
            Err(d) => {
                line(format_args!("criterion {id}: FAIL {name}: {d} [{took:.2?}]"));
                failed.push(id);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
