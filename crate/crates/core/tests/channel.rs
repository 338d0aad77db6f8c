// SPDX-License-Identifier: Apache-2.0

mod common;

use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use bundler_core::interp::ExecErrorKind;
use bundler_core::registry::RegistryError;
use bundler_core::sim::BoundaryError;
use bundler_core::{CallFrame, ChannelError, EvictionPolicy, FunctionId, MemoOutcome, Memory, SharedRegion, Value};
use common::*;

#[test]
fn plus_one() {
    let mut e = enclave();
    let client = e.start_worker(&SharedRegion::new()).unwrap();
    let mut mem = Memory::new();
    let x = mem.var_i64(0);
    client.call(PLUS_ONE, vec![var(x)], &mut mem).unwrap();
    assert_eq!(mem.i64_at(x, 0).unwrap(), 1);
    let s = client.ledger().snapshot();
    assert_eq!((s.ecall_count, s.switchless_job_count), (1, 1));
}

#[test]
fn plus_writes_return_slot() {
    let mut e = enclave();
    let client = e.start_worker(&SharedRegion::new()).unwrap();
    let mut mem = Memory::new();
    let (a, b, r) = (mem.var_i64(2), mem.var_i64(3), mem.var_i64(0));
    client.call(PLUS, vec![var(a), var(b), var(r)], &mut mem).unwrap();
    assert_eq!(mem.i64_at(r, 0).unwrap(), 5);
}

#[test]
fn thousand_hcalls() {
    let mut e = enclave();
    let client = e.start_worker(&SharedRegion::new()).unwrap();
    let mut mem = Memory::new();
    let x = mem.var_i64(0);
    let before = client.ledger().snapshot();
    let frame = CallFrame::new(PLUS_ONE, vec![var(x)]);
    for _ in 0..1000 {
        client.hcall(&frame, &mut mem).unwrap();
    }
    let d = client.ledger().snapshot().since(&before);
    assert_eq!(mem.i64_at(x, 0).unwrap(), 1000);
    assert_eq!(d.switchless_job_count, 1000);
    assert_eq!(d.ecall_count, 0);
    e.stop_worker().unwrap();
    let total = e.ledger().snapshot();
    assert_eq!(total.modeled_cycles, total.expected_cycles(e.ledger().cost_model()));
}

#[test]
fn sequenced_canaries_never_tear() {
    let mut e = enclave();
    let client = e.start_worker(&SharedRegion::new()).unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut mem = Memory::new();
        let seq = mem.var_u64(0);
        let a = mem.var_u64(0);
        let b = mem.var_u64(0);
        let out = mem.var_u64(u64::MAX);
        let frame = CallFrame::new(CANARY, vec![uvar(seq), uvar(a), uvar(b), uvar(out)]);
        let mut state = 0x9e37_79b9_7f4a_7c15u64;
        for i in 0..5000u64 {
            state = state.rotate_left(13).wrapping_mul(0x2545_f491_4f6c_dd1d) ^ i;
            mem.set(seq, Value::UInt(i)).unwrap();
            mem.set(a, Value::UInt(state)).unwrap();
            mem.set(b, Value::UInt(!state)).unwrap();
            client.hcall(&frame, &mut mem).unwrap();
            assert_eq!(mem.u64_at(out, 0).unwrap(), i);
        }
        tx.send(client.ledger().snapshot()).unwrap();
    });
    let snap = rx.recv_timeout(Duration::from_secs(120)).expect("client finished in time");
    assert_eq!(snap.switchless_job_count, 5000);
    e.stop_worker().unwrap();
    assert_eq!(e.into_state().unwrap().executions, 5000);
}

#[test]
fn stop_waits_for_job_in_flight() {
    let mut e = enclave();
    let client = e.start_worker(&SharedRegion::new()).unwrap();
    let ledger = client.ledger().clone();
    let h = thread::spawn(move || {
        let mut mem = Memory::new();
        let x = mem.var_i64(41);
        let r = client.call(SLOW_PLUS_ONE, vec![var(x)], &mut mem);
        (r, mem.i64_at(x, 0).unwrap(), client)
    });
    while ledger.in_flight() == 0 {
        thread::yield_now();
    }
    e.stop_worker().unwrap();
    let (r, x, client) = h.join().unwrap();
    r.unwrap();
    assert_eq!(x, 42);
    let mut mem = Memory::new();
    let y = mem.var_i64(0);
    assert_eq!(client.call(PLUS_ONE, vec![var(y)], &mut mem).unwrap_err(), ChannelError::NoWorker);
}

#[test]
fn idle_worker_polls() {
    let mut e = enclave();
    let _client = e.start_worker(&SharedRegion::new()).unwrap();
    thread::sleep(Duration::from_millis(20));
    e.stop_worker().unwrap();
    let s = e.ledger().snapshot();
    assert!(s.worker_poll_iterations > 0);
    assert_eq!(s.modeled_cycles, s.ecall_count * e.ledger().cost_model().ecall_cost);
}

#[test]
fn unregistered_function_reports_status() {
    let mut e = enclave();
    let client = e.start_worker(&SharedRegion::new()).unwrap();
    let mut mem = Memory::new();
    let x = mem.var_i64(0);
    let err = client.call(FunctionId(99), vec![var(x)], &mut mem).unwrap_err();
    match err {
        ChannelError::Exec(e) => {
            assert_eq!(e.kind, ExecErrorKind::Registry(RegistryError::Unregistered(FunctionId(99))))
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(client.ledger().snapshot().switchless_job_count, 1);
    // worker is still serving
    client.call(PLUS_ONE, vec![var(x)], &mut mem).unwrap();
}

#[test]
fn arity_mismatch_and_failures_come_back() {
    let mut e = enclave();
    let client = e.start_worker(&SharedRegion::new()).unwrap();
    let mut mem = Memory::new();
    let x = mem.var_i64(0);
    assert!(matches!(
        client.call(PLUS, vec![var(x)], &mut mem),
        Err(ChannelError::Exec(ref e)) if matches!(e.kind, ExecErrorKind::Arity { expected: 3, found: 1, .. })
    ));
    assert!(matches!(client.call(FAIL, vec![var(x)], &mut mem), Err(ChannelError::Exec(_))));
}

#[test]
fn panicking_function_does_not_kill_worker() {
    let mut e = enclave();
    e.register(FunctionId(50), 1, |_, _| panic!("trusted bug")).unwrap();
    let client = e.start_worker(&SharedRegion::new()).unwrap();
    let mut mem = Memory::new();
    let x = mem.var_i64(0);
    assert!(matches!(client.call(FunctionId(50), vec![var(x)], &mut mem), Err(ChannelError::WorkerPanicked(_))));
    client.call(PLUS_ONE, vec![var(x)], &mut mem).unwrap();
    assert_eq!(mem.i64_at(x, 0).unwrap(), 1);
}

#[test]
fn nested_ecall_from_trusted_code() {
    let mut outer = enclave();
    let mut inner = enclave();
    let got = outer.simulate_ecall(|_| inner.simulate_ecall(|_| ())).unwrap();
    assert_eq!(got, Err(BoundaryError::NestedEcall));
}

#[test]
fn restart_after_stop() {
    let mut e = enclave();
    let region = SharedRegion::new();
    let c = e.start_worker(&region).unwrap();
    let mut mem = Memory::new();
    let x = mem.var_i64(0);
    c.call(PLUS_ONE, vec![var(x)], &mut mem).unwrap();
    e.stop_worker().unwrap();
    drop(c);
    let c = e.start_worker(&region).unwrap();
    c.call(PLUS_ONE, vec![var(x)], &mut mem).unwrap();
    assert_eq!(mem.i64_at(x, 0).unwrap(), 2);
    e.stop_worker().unwrap();
    assert_eq!(e.into_state().unwrap().executions, 2);
}

#[test]
fn memo_hits_skip_the_boundary() {
    let mut e = enclave();
    let (id, cache) = e.register_memo_cache(SQUARE, 8, EvictionPolicy::Lru).unwrap();
    let client = e.start_worker(&SharedRegion::new()).unwrap();
    let mut mem = Memory::new();
    let (x, y) = (mem.var_i64(7), mem.var_i64(0));
    let frame = CallFrame::new(SQUARE, vec![var(x), var(y)]).memoized(id);

    let before = client.ledger().snapshot();
    assert_eq!(client.memo_call(&frame, &mut mem).unwrap(), MemoOutcome::Miss);
    assert_eq!(client.ledger().snapshot().since(&before).transitions(), 1);
    assert_eq!(mem.i64_at(y, 0).unwrap(), 49);

    mem.set(y, Value::Int(0)).unwrap();
    let before = client.ledger().snapshot();
    for _ in 0..100 {
        assert_eq!(client.memo_call(&frame, &mut mem).unwrap(), MemoOutcome::Hit);
    }
    assert_eq!(client.ledger().snapshot().since(&before).transitions(), 0);
    assert_eq!(mem.i64_at(y, 0).unwrap(), 49);
    assert_eq!(cache.stats().hits, 100);

    assert_eq!(
        client.memo_call(&CallFrame::new(SQUARE, vec![var(x), var(y)]), &mut mem),
        Err(ChannelError::NotMemoized)
    );
}

#[test]
fn memo_registration_needs_the_state() {
    let mut e = enclave();
    let _c = e.start_worker(&SharedRegion::new()).unwrap();
    assert_eq!(
        e.register_memo_cache(SQUARE, 8, EvictionPolicy::Fifo).unwrap_err(),
        ChannelError::Boundary(BoundaryError::WorkerOwnsState)
    );
}
