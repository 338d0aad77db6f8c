// SPDX-License-Identifier: Apache-2.0

mod common;

use std::sync::Arc;

use bundler_core::flow::{generate, make_driver, DriverConfig, DriverKind, OpMix, WorkloadSpec};
use bundler_core::memo::{CacheHash, MemoTrusted};
use bundler_core::{
    CostModel, EvictionPolicy, ExecutionGraph, FunctionId, GraphBuilder, MemoCache, MemoWrite, Predicate, SlotId,
    TransitionLedger, Value,
};
use common::*;
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Stmt {
    Call(FunctionId),
    Iter,
    If(Vec<Stmt>, Option<Vec<Stmt>>),
    For(Vec<Stmt>),
    While(Vec<Stmt>),
}

fn stmts() -> impl Strategy<Value = Vec<Stmt>> {
    let leaf =
        prop_oneof![prop_oneof![Just(PLUS_ONE), Just(SQUARE), Just(PLUS)].prop_map(Stmt::Call), Just(Stmt::Iter),];
    let stmt = leaf.prop_recursive(3, 24, 4, |inner| {
        let body = prop::collection::vec(inner, 0..4);
        prop_oneof![
            (body.clone(), prop::option::of(body.clone())).prop_map(|(t, e)| Stmt::If(t, e)),
            body.clone().prop_map(Stmt::For),
            body.prop_map(Stmt::While),
        ]
    });
    prop::collection::vec(stmt, 0..6)
}

fn emit(b: &mut GraphBuilder, body: &[Stmt]) {
    let (x, y, n) = (SlotId(0), SlotId(1), SlotId(2));
    for s in body {
        match s {
            Stmt::Call(f) if *f == PLUS => {
                b.call(PLUS, vec![var(x), var(y), vector(SlotId(3))]).unwrap();
            }
            Stmt::Call(f) if *f == SQUARE => {
                b.call(SQUARE, vec![var(x), var(y)]).unwrap();
            }
            Stmt::Call(f) => {
                b.call(*f, vec![vector(SlotId(3))]).unwrap();
            }
            Stmt::Iter => {
                b.for_each(PLUS_ONE, n, vec![vector(SlotId(3))]).unwrap();
            }
            Stmt::If(t, e) => {
                b.if_begin(Predicate::new("(d<d)||!(d==1)", vec![var(x), var(y), var(x)]).unwrap());
                emit(b, t);
                if let Some(e) = e {
                    b.else_begin();
                    emit(b, e);
                }
                b.if_end();
            }
            Stmt::For(body) => {
                b.begin_for(n);
                emit(b, body);
                b.end_for();
            }
            Stmt::While(body) => {
                b.while_begin(Predicate::new("u>=3", vec![uvar(n)]).unwrap());
                emit(b, body);
                b.while_end();
            }
        }
    }
}

#[derive(Debug, Clone)]
enum MemoOp {
    Insert(u8, i64),
    Lookup(u8),
    Invalidate(u8),
    Update(u8, i64),
}

fn memo_ops() -> impl Strategy<Value = Vec<MemoOp>> {
    let op = prop_oneof![
        4 => (0..16u8, any::<i64>()).prop_map(|(k, v)| MemoOp::Insert(k, v)),
        3 => (0..16u8).prop_map(MemoOp::Lookup),
        1 => (0..16u8).prop_map(MemoOp::Invalidate),
        1 => (0..16u8, any::<i64>()).prop_map(|(k, v)| MemoOp::Update(k, v)),
    ];
    prop::collection::vec(op, 0..200)
}

fn key(k: u8) -> Vec<u8> {
    vec![k]
}

/// Reference cache: most recently used (or inserted) key first.
struct Model {
    cap: usize,
    policy: EvictionPolicy,
    order: Vec<(u8, i64)>,
}

impl Model {
    fn insert(&mut self, k: u8, v: i64) {
        if let Some(i) = self.order.iter().position(|e| e.0 == k) {
            match self.policy {
                EvictionPolicy::Lru => {
                    self.order.remove(i);
                    self.order.insert(0, (k, v));
                }
                EvictionPolicy::Fifo => self.order[i].1 = v,
            }
            return;
        }
        if self.order.len() == self.cap {
            self.order.pop();
        }
        self.order.insert(0, (k, v));
    }

    fn lookup(&mut self, k: u8) -> Option<i64> {
        let i = self.order.iter().position(|e| e.0 == k)?;
        let e = self.order[i];
        if self.policy == EvictionPolicy::Lru {
            self.order.remove(i);
            self.order.insert(0, e);
        }
        Some(e.1)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dump_round_trip(body in stmts()) {
        let mut b = GraphBuilder::new(registry().signatures());
        emit(&mut b, &body);
        let g = b.build().unwrap();
        let text = g.to_string();
        let back = ExecutionGraph::parse_dump(&text).unwrap();
        prop_assert_eq!(back.nodes(), g.nodes());
        let again = back.validate(&registry().signatures()).unwrap();
        prop_assert_eq!(again.to_string(), text);
    }

    #[test]
    fn cache_matches_model_and_hash(cap in 1usize..=8, lru in any::<bool>(), ops in memo_ops()) {
        let policy = if lru { EvictionPolicy::Lru } else { EvictionPolicy::Fifo };
        let cache = Arc::new(MemoCache::new(SQUARE, cap, policy).unwrap());
        let mut t = MemoTrusted::default();
        let id = t.register(Arc::clone(&cache));
        let mut model = Model { cap, policy, order: Vec::new() };
        for op in ops {
            match op {
                MemoOp::Insert(k, v) => {
                    t.insert(id, key(k), Value::Int(v)).unwrap();
                    model.insert(k, v);
                }
                MemoOp::Lookup(k) => {
                    let got = cache.lookup(&key(k)).unwrap();
                    prop_assert_eq!(got, model.lookup(k).map(Value::Int));
                }
                MemoOp::Invalidate(k) => {
                    t.on_write(id, &key(k), MemoWrite::Invalidate).unwrap();
                    model.order.retain(|e| e.0 != k);
                }
                MemoOp::Update(k, v) => {
                    t.on_write(id, &key(k), MemoWrite::Update(Value::Int(v))).unwrap();
                    if let Some(e) = model.order.iter_mut().find(|e| e.0 == k) {
                        e.1 = v;
                    }
                }
            }
            let order: Vec<Vec<u8>> = model.order.iter().map(|e| key(e.0)).collect();
            prop_assert_eq!(cache.order(), order);
            prop_assert_eq!(t.hash(id).unwrap(), CacheHash::of(&cache.entries()));
        }
    }

    #[test]
    fn ledger_identity(events in prop::collection::vec(0u8..4, 0..500), cold in any::<bool>()) {
        let cost = if cold { CostModel::cold() } else { CostModel::warm() };
        let l = TransitionLedger::new(cost);
        for e in events {
            match e {
                0 => l.record_ecall(),
                1 => l.record_switchless_job(),
                2 => l.record_poll(),
                _ => l.charge_local(3),
            }
        }
        let s = l.snapshot();
        prop_assert_eq!(s.modeled_cycles, s.expected_cycles(&cost));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn drivers_agree_on_small_workloads(seed in any::<u64>(), cap in 1usize..24, batch in 1usize..8, evicty in any::<bool>()) {
        let mix = if evicty { OpMix::EVICT_HEAVY } else { OpMix::BALANCED };
        let ops = generate(&WorkloadSpec { keys: 24, ..WorkloadSpec::new(60, mix) }, seed);
        let mut finals = Vec::new();
        let mut results = Vec::new();
        for kind in DriverKind::ALL {
            let mut d = make_driver(kind, DriverConfig::new(cap, batch, CostModel::warm())).unwrap();
            results.push(ops.iter().map(|op| d.apply(op).unwrap()).collect::<Vec<_>>());
            finals.push(d.finish().unwrap());
        }
        for i in 1..finals.len() {
            prop_assert_eq!(&finals[i], &finals[0]);
            prop_assert_eq!(&results[i], &results[0]);
        }
    }

    #[test]
    fn warm_and_cold_count_the_same(seed in any::<u64>()) {
        let ops = generate(&WorkloadSpec::new(40, OpMix::BALANCED), seed);
        for kind in DriverKind::ALL {
            let mut snaps = Vec::new();
            for cost in [CostModel::warm(), CostModel::cold()] {
                let mut d = make_driver(kind, DriverConfig::new(8, 4, cost)).unwrap();
                for op in &ops {
                    d.apply(op).unwrap();
                }
                let s = d.ledger();
                prop_assert_eq!(s.modeled_cycles, s.expected_cycles(&cost));
                snaps.push((s.ecall_count, s.switchless_job_count, s.local_ops));
            }
            prop_assert_eq!(snaps[0], snaps[1]);
        }
    }
}
