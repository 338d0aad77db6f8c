// SPDX-License-Identifier: Apache-2.0

//! Ways of driving a flow table that lives behind the boundary.
//!
//! * `Baseline` calls the table directly, with no boundary at all.
//! * `Vanilla` issues one ecall per trusted function touched. Variable-size
//!   results are fetched in two steps, a size query followed by the fetch
//!   into a buffer of that size, as fixed-size ecall interfaces require.
//! * `Switchless` issues one switchless call per function touched; the
//!   shared memory holds a buffer large enough for any result.
//! * `Bundler` submits execution graphs. Add and evict run as a single
//!   graph each; delete and modify collect the matching ids once and then
//!   process them `batch` at a time with iterator nodes. The rule count is
//!   memoized, so an add only carries the eviction subgraph when the table
//!   may be full.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::channel::{CallFrame, ChannelError, Client, MemoOutcome, SharedRegion};
use crate::enclave::Enclave;
use crate::graph::{ExecutionGraph, GraphBuilder};
use crate::memo::{EvictionPolicy, MemoCacheId};
use crate::predicate::{Predicate, PredicateError};
use crate::registry::Signatures;
use crate::sim::{CostModel, LedgerSnapshot, TransitionLedger};
use crate::value::{Memory, ParamDesc, SlotId, TypeTag, Value, ValueError};

use super::funcs::{self, flow_registry};
use super::table::{AddResult, AddStatus, FlowMatch, FlowRule, FlowTable, Pattern};
use super::workload::{FlowOp, OpResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DriverKind {
    Baseline,
    Vanilla,
    Switchless,
    Bundler,
}

impl DriverKind {
    pub const ALL: [DriverKind; 4] =
        [DriverKind::Baseline, DriverKind::Vanilla, DriverKind::Switchless, DriverKind::Bundler];
}

impl fmt::Display for DriverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DriverKind::Baseline => "baseline",
            DriverKind::Vanilla => "vanilla",
            DriverKind::Switchless => "switchless",
            DriverKind::Bundler => "bundler",
        })
    }
}

impl FromStr for DriverKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(DriverKind::Baseline),
            "vanilla" => Ok(DriverKind::Vanilla),
            "switchless" => Ok(DriverKind::Switchless),
            "bundler" => Ok(DriverKind::Bundler),
            other => Err(format!("unknown driver '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Value(#[from] ValueError),
    #[error(transparent)]
    Predicate(#[from] PredicateError),
    #[error("unexpected reply from the enclave: {0}")]
    Protocol(String),
}

/// Settings shared by all drivers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriverConfig {
    pub capacity: usize,
    pub batch: usize,
    pub cost: CostModel,
}

impl DriverConfig {
    pub fn new(capacity: usize, batch: usize, cost: CostModel) -> Self {
        Self { capacity, batch: batch.max(1), cost }
    }
}

/// A flow table plus the means to reach it.
pub trait FlowDriver {
    fn kind(&self) -> DriverKind;
    fn add(&mut self, matcher: FlowMatch, priority: u64, actions: u64) -> Result<AddResult, FlowError>;
    fn delete(&mut self, pattern: &Pattern) -> Result<u64, FlowError>;
    fn modify(&mut self, pattern: &Pattern, actions: u64) -> Result<u64, FlowError>;
    fn evict(&mut self) -> Result<Option<u64>, FlowError>;
    /// Ledger activity since the driver was set up.
    fn ledger(&self) -> LedgerSnapshot;
    /// Tears the driver down and returns the final rules.
    fn finish(self: Box<Self>) -> Result<Vec<FlowRule>, FlowError>;

    fn apply(&mut self, op: &FlowOp) -> Result<OpResult, FlowError> {
        Ok(match op {
            FlowOp::Add { priority, matcher, actions } => OpResult::Added(self.add(*matcher, *priority, *actions)?),
            FlowOp::Delete(p) => OpResult::Deleted(self.delete(p)?),
            FlowOp::Modify(p, act) => OpResult::Modified(self.modify(p, *act)?),
            FlowOp::Evict => OpResult::Evicted(self.evict()?),
        })
    }
}

pub fn make_driver(kind: DriverKind, cfg: DriverConfig) -> Result<Box<dyn FlowDriver>, FlowError> {
    Ok(match kind {
        DriverKind::Baseline => Box::new(Baseline::new(cfg)),
        DriverKind::Vanilla => {
            Box::new(PerTouch::new(DriverKind::Vanilla, EcallTransport(flow_enclave(&cfg)), cfg, true))
        }
        DriverKind::Switchless => {
            let t = HcallTransport::start(flow_enclave(&cfg))?;
            Box::new(PerTouch::new(DriverKind::Switchless, t, cfg, false))
        }
        DriverKind::Bundler => Box::new(Bundler::new(cfg)?),
    })
}

pub struct Baseline {
    table: FlowTable,
    ledger: TransitionLedger,
}

impl Baseline {
    pub fn new(cfg: DriverConfig) -> Self {
        Self { table: FlowTable::new(cfg.capacity), ledger: TransitionLedger::new(cfg.cost) }
    }
}

impl FlowDriver for Baseline {
    fn kind(&self) -> DriverKind {
        DriverKind::Baseline
    }

    fn add(&mut self, matcher: FlowMatch, priority: u64, actions: u64) -> Result<AddResult, FlowError> {
        Ok(self.table.add(matcher, priority, actions))
    }

    fn delete(&mut self, pattern: &Pattern) -> Result<u64, FlowError> {
        Ok(self.table.delete(pattern))
    }

    fn modify(&mut self, pattern: &Pattern, actions: u64) -> Result<u64, FlowError> {
        Ok(self.table.modify(pattern, actions))
    }

    fn evict(&mut self) -> Result<Option<u64>, FlowError> {
        Ok(self.table.evict())
    }

    fn ledger(&self) -> LedgerSnapshot {
        self.ledger.snapshot()
    }

    fn finish(self: Box<Self>) -> Result<Vec<FlowRule>, FlowError> {
        Ok(self.table.rules())
    }
}

/// Argument buffers shared by the boundary-crossing drivers.
#[derive(Debug, Clone)]
struct Slots {
    prio: SlotId,
    m: [SlotId; 6],
    act: SlotId,
    status: SlotId,
    status2: SlotId,
    kind: SlotId,
    pm: [SlotId; 6],
    kind_all: SlotId,
    ids: SlotId,
    n: SlotId,
    kprio: SlotId,
    klu: SlotId,
    best_prio: SlotId,
    best_lu: SlotId,
    best_id: SlotId,
    id: SlotId,
    out: SlotId,
    out2: SlotId,
    chunk_ids: SlotId,
    chunk_n: SlotId,
    chunk_out: SlotId,
}

fn u(slot: SlotId) -> ParamDesc {
    ParamDesc::var(slot, TypeTag::UInt)
}

fn uv(slot: SlotId) -> ParamDesc {
    ParamDesc::vector(slot, TypeTag::UInt)
}

impl Slots {
    fn alloc(mem: &mut Memory, capacity: usize, batch: usize) -> Self {
        let mut six = || [0; 6].map(|_| mem.var_u64(0));
        let m = six();
        let pm = six();
        Slots {
            prio: mem.var_u64(0),
            m,
            act: mem.var_u64(0),
            status: mem.var_u64(0),
            status2: mem.var_u64(0),
            kind: mem.var_u64(0),
            pm,
            kind_all: mem.var_u64(1),
            ids: mem.vector(TypeTag::UInt, capacity),
            n: mem.var_u64(0),
            kprio: mem.vector(TypeTag::UInt, capacity),
            klu: mem.vector(TypeTag::UInt, capacity),
            best_prio: mem.var_u64(0),
            best_lu: mem.var_u64(0),
            best_id: mem.var_u64(0),
            id: mem.var_u64(0),
            out: mem.var_u64(0),
            out2: mem.var_u64(0),
            chunk_ids: mem.vector(TypeTag::UInt, batch),
            chunk_n: mem.var_u64(0),
            chunk_out: mem.vector(TypeTag::UInt, batch),
        }
    }

    fn insert_args(&self, status: SlotId) -> Vec<ParamDesc> {
        let mut v = vec![u(self.prio)];
        v.extend(self.m.iter().map(|s| u(*s)));
        v.push(u(self.act));
        v.push(u(status));
        v
    }

    fn pattern_args(&self, all: bool) -> Vec<ParamDesc> {
        if all {
            let mut v = vec![u(self.kind_all)];
            // fields are ignored for match-all; any scalars will do
            v.extend(self.pm.iter().map(|s| u(*s)));
            v
        } else {
            let mut v = vec![u(self.kind)];
            v.extend(self.pm.iter().map(|s| u(*s)));
            v
        }
    }

    fn count_frame(&self, all: bool) -> CallFrame {
        let mut args = self.pattern_args(all);
        args.push(u(self.n));
        CallFrame::new(funcs::COUNT_MATCHES, args)
    }

    fn collect_args(&self, all: bool) -> Vec<ParamDesc> {
        let mut args = self.pattern_args(all);
        args.push(uv(self.ids));
        args.push(u(self.n));
        args
    }

    fn set_add(&self, mem: &mut Memory, matcher: FlowMatch, priority: u64, actions: u64) -> Result<(), ValueError> {
        mem.set(self.prio, Value::UInt(priority))?;
        for (s, v) in self.m.iter().zip(matcher.0) {
            mem.set(*s, Value::UInt(v))?;
        }
        mem.set(self.act, Value::UInt(actions))
    }

    fn set_pattern(&self, mem: &mut Memory, p: &Pattern) -> Result<(), ValueError> {
        let (kind, fields) = p.encode();
        mem.set(self.kind, Value::UInt(kind))?;
        for (s, v) in self.pm.iter().zip(fields) {
            mem.set(*s, Value::UInt(v))?;
        }
        Ok(())
    }

    fn reset_best(&self, mem: &mut Memory) -> Result<(), ValueError> {
        mem.set(self.best_prio, Value::UInt(u64::MAX))?;
        mem.set(self.best_lu, Value::UInt(u64::MAX))?;
        mem.set(self.best_id, Value::UInt(0))
    }

    fn ids(&self, mem: &Memory) -> Result<Vec<u64>, ValueError> {
        let n = mem.u64_at(self.n, 0)? as usize;
        Ok(mem.u64s(self.ids)?[..n].to_vec())
    }

    /// Appends the eviction subgraph: collect every id, fetch all keys with
    /// one iterator node, keep the minimum in a loop, remove it.
    fn evict_section(&self, b: &mut GraphBuilder) -> Result<(), FlowError> {
        b.call(funcs::COLLECT, self.collect_args(true)).map_err(build_err)?;
        b.for_each(funcs::GET_KEY, self.n, vec![uv(self.ids), uv(self.kprio), uv(self.klu)]).map_err(build_err)?;
        b.begin_for(self.n);
        let less = Predicate::new(
            "u<u || u==u && u<u",
            vec![uv(self.kprio), u(self.best_prio), uv(self.kprio), u(self.best_prio), uv(self.klu), u(self.best_lu)],
        )?;
        b.if_begin(less);
        b.call(
            funcs::TAKE_BEST,
            vec![uv(self.kprio), uv(self.klu), uv(self.ids), u(self.best_prio), u(self.best_lu), u(self.best_id)],
        )
        .map_err(build_err)?;
        b.if_end();
        b.end_for();
        b.if_begin(Predicate::new("u>0", vec![u(self.n)])?);
        b.call(funcs::REMOVE, vec![u(self.best_id), u(self.out)]).map_err(build_err)?;
        b.if_end();
        Ok(())
    }
}

fn build_err(e: crate::graph::BuildError) -> FlowError {
    FlowError::Channel(ChannelError::Build(e))
}

fn status_code(mem: &Memory, slot: SlotId) -> Result<u64, FlowError> {
    Ok(mem.u64_at(slot, 0)?)
}

#[derive(Debug, Default, Clone)]
struct Mirror {
    next_id: u64,
    by_key: std::collections::BTreeMap<(FlowMatch, u64), u64>,
    keys: std::collections::BTreeMap<u64, (FlowMatch, u64)>,
}

impl Mirror {
    fn new() -> Self {
        Self { next_id: 1, ..Default::default() }
    }

    fn added(&mut self, matcher: FlowMatch, priority: u64, code: u64) -> Result<AddStatus, FlowError> {
        match code {
            0 => {
                let id = self.next_id;
                self.next_id += 1;
                self.by_key.insert((matcher, priority), id);
                self.keys.insert(id, (matcher, priority));
                Ok(AddStatus::Added(id))
            }
            1 => self
                .by_key
                .get(&(matcher, priority))
                .map(|id| AddStatus::Replaced(*id))
                .ok_or_else(|| FlowError::Protocol("replaced a rule the client never added".into())),
            other => Err(FlowError::Protocol(format!("insert status {other}"))),
        }
    }

    fn removed(&mut self, id: u64) {
        if let Some(k) = self.keys.remove(&id) {
            self.by_key.remove(&k);
        }
    }
}

/// One call into the enclave, by ecall or switchless job.
trait Transport {
    fn call(&mut self, frame: &CallFrame, mem: &mut Memory) -> Result<(), ChannelError>;
    fn snapshot(&self) -> LedgerSnapshot;
    fn into_rules(self) -> Result<Vec<FlowRule>, FlowError>;
}

struct EcallTransport(Enclave<FlowTable>);

impl Transport for EcallTransport {
    fn call(&mut self, frame: &CallFrame, mem: &mut Memory) -> Result<(), ChannelError> {
        self.0.ecall_frame(frame, mem).map(|_| ())
    }

    fn snapshot(&self) -> LedgerSnapshot {
        self.0.ledger().snapshot()
    }

    fn into_rules(self) -> Result<Vec<FlowRule>, FlowError> {
        Ok(self.0.into_state()?.rules())
    }
}

struct HcallTransport {
    enclave: Enclave<FlowTable>,
    client: Client,
}

impl HcallTransport {
    fn start(enclave: Enclave<FlowTable>) -> Result<Self, FlowError> {
        let mut enclave = enclave;
        let client = enclave.start_worker(&SharedRegion::new())?;
        Ok(Self { enclave, client })
    }
}

impl Transport for HcallTransport {
    fn call(&mut self, frame: &CallFrame, mem: &mut Memory) -> Result<(), ChannelError> {
        self.client.hcall(frame, mem).map(|_| ())
    }

    fn snapshot(&self) -> LedgerSnapshot {
        self.enclave.ledger().snapshot()
    }

    fn into_rules(self) -> Result<Vec<FlowRule>, FlowError> {
        self.client.close()?;
        Ok(self.enclave.into_state()?.rules())
    }
}

/// Shared implementation of the one-call-per-touch drivers.
struct PerTouch<T> {
    kind: DriverKind,
    transport: T,
    mem: Memory,
    slots: Slots,
    mirror: Mirror,
    size_query: bool,
    base: LedgerSnapshot,
}

impl<T: Transport> PerTouch<T> {
    fn new(kind: DriverKind, transport: T, cfg: DriverConfig, size_query: bool) -> Self {
        let mut mem = Memory::new();
        let slots = Slots::alloc(&mut mem, cfg.capacity, cfg.batch);
        let base = transport.snapshot();
        Self { kind, transport, mem, slots, mirror: Mirror::new(), size_query, base }
    }

    fn call(&mut self, frame: &CallFrame) -> Result<(), FlowError> {
        Ok(self.transport.call(frame, &mut self.mem)?)
    }

    fn collect(&mut self, all: bool) -> Result<Vec<u64>, FlowError> {
        if self.size_query {
            self.call(&self.slots.count_frame(all))?;
            if self.mem.u64_at(self.slots.n, 0)? == 0 {
                return Ok(Vec::new());
            }
        }
        self.call(&CallFrame::new(funcs::COLLECT, self.slots.collect_args(all)))?;
        Ok(self.slots.ids(&self.mem)?)
    }

    fn per_id(&mut self, function: crate::registry::FunctionId, id: u64, extra: &[ParamDesc]) -> Result<(), FlowError> {
        self.mem.set(self.slots.id, Value::UInt(id))?;
        let mut args = vec![u(self.slots.id)];
        args.extend_from_slice(extra);
        self.call(&CallFrame::new(function, args))
    }

    fn evict_inner(&mut self) -> Result<Option<u64>, FlowError> {
        let ids = self.collect(true)?;
        let mut best: Option<((u64, u64), u64)> = None;
        for id in ids {
            self.per_id(funcs::GET_KEY, id, &[u(self.slots.out), u(self.slots.out2)])?;
            let key = (self.mem.u64_at(self.slots.out, 0)?, self.mem.u64_at(self.slots.out2, 0)?);
            if best.is_none_or(|(b, _)| key < b) {
                best = Some((key, id));
            }
        }
        let Some((_, victim)) = best else { return Ok(None) };
        self.per_id(funcs::REMOVE, victim, &[u(self.slots.out)])?;
        self.mirror.removed(victim);
        Ok(Some(victim))
    }

    fn insert(&mut self, matcher: FlowMatch, priority: u64, actions: u64) -> Result<u64, FlowError> {
        self.slots.set_add(&mut self.mem, matcher, priority, actions)?;
        self.call(&CallFrame::new(funcs::INSERT, self.slots.insert_args(self.slots.status)))?;
        status_code(&self.mem, self.slots.status)
    }
}

impl<T: Transport> FlowDriver for PerTouch<T> {
    fn kind(&self) -> DriverKind {
        self.kind
    }

    fn add(&mut self, matcher: FlowMatch, priority: u64, actions: u64) -> Result<AddResult, FlowError> {
        let mut code = self.insert(matcher, priority, actions)?;
        let mut evicted = None;
        if code == funcs::INSERT_STATUS_FULL {
            evicted = self.evict_inner()?;
            code = self.insert(matcher, priority, actions)?;
        }
        Ok(AddResult { status: self.mirror.added(matcher, priority, code)?, evicted })
    }

    fn delete(&mut self, pattern: &Pattern) -> Result<u64, FlowError> {
        self.slots.set_pattern(&mut self.mem, pattern)?;
        let ids = self.collect(false)?;
        for &id in &ids {
            self.per_id(funcs::REMOVE, id, &[u(self.slots.out)])?;
            self.mirror.removed(id);
        }
        Ok(ids.len() as u64)
    }

    fn modify(&mut self, pattern: &Pattern, actions: u64) -> Result<u64, FlowError> {
        self.slots.set_pattern(&mut self.mem, pattern)?;
        let ids = self.collect(false)?;
        self.mem.set(self.slots.act, Value::UInt(actions))?;
        for &id in &ids {
            self.per_id(funcs::SET_ACTIONS, id, &[u(self.slots.act), u(self.slots.out)])?;
        }
        Ok(ids.len() as u64)
    }

    fn evict(&mut self) -> Result<Option<u64>, FlowError> {
        self.evict_inner()
    }

    fn ledger(&self) -> LedgerSnapshot {
        self.transport.snapshot().since(&self.base)
    }

    fn finish(self: Box<Self>) -> Result<Vec<FlowRule>, FlowError> {
        self.transport.into_rules()
    }
}

fn flow_enclave(cfg: &DriverConfig) -> Enclave<FlowTable> {
    Enclave::with_registry(FlowTable::new(cfg.capacity), cfg.cost, flow_registry())
}

/// Execution graphs plus memoized rule count and actions.
pub struct Bundler {
    enclave: Enclave<FlowTable>,
    client: Client,
    mem: Memory,
    slots: Slots,
    mirror: Mirror,
    capacity: usize,
    batch: usize,
    count_frame: CallFrame,
    actions_memo: MemoCacheId,
    plain_add: Arc<ExecutionGraph>,
    evicting_add: Arc<ExecutionGraph>,
    evict: Arc<ExecutionGraph>,
    remove_chunk: Arc<ExecutionGraph>,
    modify_chunk: Arc<ExecutionGraph>,
    stats: BundlerStats,
    base: LedgerSnapshot,
}

/// Work counters of the bundler driver.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BundlerStats {
    pub graphs: u64,
    pub graph_nodes: u64,
    pub memo_hits: u64,
    pub memo_misses: u64,
}

impl Bundler {
    pub fn new(cfg: DriverConfig) -> Result<Self, FlowError> {
        let mut enclave = flow_enclave(&cfg);
        let (count_memo, _) = enclave.register_memo_cache(funcs::RULE_COUNT, 1, EvictionPolicy::Lru)?;
        let (actions_memo, _) = enclave.register_memo_cache(funcs::GET_ACTIONS, cfg.capacity, EvictionPolicy::Lru)?;
        // Tell the trusted functions which caches to maintain. This runs
        // before the measured workload and is not part of any operation.
        enclave
            .simulate_ecall(|ctx| {
                ctx.state_mut().count_memo = Some(count_memo);
                ctx.state_mut().actions_memo = Some(actions_memo);
            })
            .map_err(ChannelError::from)?;

        let mut mem = Memory::new();
        let slots = Slots::alloc(&mut mem, cfg.capacity, cfg.batch);
        let sigs = enclave.signatures();
        let graphs = BundlerGraphs::build(&slots, &sigs)?;
        let client = enclave.start_worker(&SharedRegion::new())?;
        let count_frame = CallFrame::new(funcs::RULE_COUNT, vec![u(slots.out)]).memoized(count_memo);
        let base = enclave.ledger().snapshot();
        Ok(Self {
            enclave,
            client,
            mem,
            slots,
            mirror: Mirror::new(),
            capacity: cfg.capacity,
            batch: cfg.batch,
            count_frame,
            actions_memo,
            plain_add: graphs.plain_add,
            evicting_add: graphs.evicting_add,
            evict: graphs.evict,
            remove_chunk: graphs.remove_chunk,
            modify_chunk: graphs.modify_chunk,
            stats: BundlerStats::default(),
            base,
        })
    }

    pub fn stats(&self) -> BundlerStats {
        self.stats
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Dump text of every prebuilt graph.
    pub fn dump_graphs(&self) -> String {
        format!(
            "# add\n{}# add-evicting\n{}# evict\n{}# delete-chunk\n{}# modify-chunk\n{}",
            self.plain_add, self.evicting_add, self.evict, self.remove_chunk, self.modify_chunk
        )
    }

    fn submit(&mut self, graph: &Arc<ExecutionGraph>) -> Result<(), FlowError> {
        self.stats.graphs += 1;
        self.stats.graph_nodes += graph.len() as u64;
        self.client.submit_graph(Arc::clone(graph), &mut self.mem)?;
        Ok(())
    }

    /// Memoized rule count, or `None` when not cached.
    fn cached_count(&mut self) -> Result<Option<u64>, FlowError> {
        let cache = Arc::clone(self.client.memo_cache(self.count_frame.memo.expect("count frame is memoized"))?);
        self.client.ledger().charge_local(1);
        match cache.lookup(&funcs::count_key()).map_err(ChannelError::from)? {
            Some(Value::UInt(n)) => {
                self.stats.memo_hits += 1;
                Ok(Some(n))
            }
            _ => {
                self.stats.memo_misses += 1;
                Ok(None)
            }
        }
    }

    /// Actions of a rule, answered from the memo cache when possible.
    pub fn actions(&mut self, id: u64) -> Result<(u64, MemoOutcome), FlowError> {
        self.mem.set(self.slots.id, Value::UInt(id))?;
        let frame =
            CallFrame::new(funcs::GET_ACTIONS, vec![u(self.slots.id), u(self.slots.out2)]).memoized(self.actions_memo);
        let outcome = self.client.memo_call(&frame, &mut self.mem)?;
        Ok((self.mem.u64_at(self.slots.out2, 0)?, outcome))
    }

    fn collect(&mut self) -> Result<Vec<u64>, FlowError> {
        let frame = CallFrame::new(funcs::COLLECT, self.slots.collect_args(false));
        self.client.hcall(&frame, &mut self.mem)?;
        Ok(self.slots.ids(&self.mem)?)
    }

    fn chunked(&mut self, ids: &[u64], graph: Arc<ExecutionGraph>) -> Result<(), FlowError> {
        for chunk in ids.chunks(self.batch) {
            let values = self.mem.values_mut_from(self.slots.chunk_ids, 0)?;
            for (slot, id) in values.iter_mut().zip(chunk) {
                *slot = Value::UInt(*id);
            }
            self.mem.set(self.slots.chunk_n, Value::UInt(chunk.len() as u64))?;
            self.submit(&graph)?;
        }
        Ok(())
    }

    fn victim(&self) -> Result<Option<u64>, FlowError> {
        let n = self.mem.u64_at(self.slots.n, 0)?;
        Ok((n > 0).then(|| self.mem.u64_at(self.slots.best_id, 0)).transpose()?)
    }
}

struct BundlerGraphs {
    plain_add: Arc<ExecutionGraph>,
    evicting_add: Arc<ExecutionGraph>,
    evict: Arc<ExecutionGraph>,
    remove_chunk: Arc<ExecutionGraph>,
    modify_chunk: Arc<ExecutionGraph>,
}

impl BundlerGraphs {
    fn build(s: &Slots, sigs: &Signatures) -> Result<Self, FlowError> {
        let done = |b: GraphBuilder| -> Result<Arc<ExecutionGraph>, FlowError> {
            b.build().map(Arc::new).map_err(|r| FlowError::Channel(ChannelError::Invalid(r)))
        };

        let mut b = GraphBuilder::new(sigs.clone());
        b.call(funcs::INSERT, s.insert_args(s.status)).map_err(build_err)?;
        let plain_add = done(b)?;

        let mut b = GraphBuilder::new(sigs.clone());
        b.call(funcs::INSERT, s.insert_args(s.status)).map_err(build_err)?;
        b.if_begin(Predicate::new("u==2", vec![u(s.status)])?);
        s.evict_section(&mut b)?;
        b.call(funcs::INSERT, s.insert_args(s.status2)).map_err(build_err)?;
        b.if_end();
        let evicting_add = done(b)?;

        let mut b = GraphBuilder::new(sigs.clone());
        s.evict_section(&mut b)?;
        let evict = done(b)?;

        let mut b = GraphBuilder::new(sigs.clone());
        b.for_each(funcs::REMOVE, s.chunk_n, vec![uv(s.chunk_ids), uv(s.chunk_out)]).map_err(build_err)?;
        let remove_chunk = done(b)?;

        let mut b = GraphBuilder::new(sigs.clone());
        b.for_each(funcs::SET_ACTIONS, s.chunk_n, vec![uv(s.chunk_ids), u(s.act), uv(s.chunk_out)])
            .map_err(build_err)?;
        let modify_chunk = done(b)?;

        Ok(Self { plain_add, evicting_add, evict, remove_chunk, modify_chunk })
    }
}

impl FlowDriver for Bundler {
    fn kind(&self) -> DriverKind {
        DriverKind::Bundler
    }

    fn add(&mut self, matcher: FlowMatch, priority: u64, actions: u64) -> Result<AddResult, FlowError> {
        self.slots.set_add(&mut self.mem, matcher, priority, actions)?;
        let may_be_full = self.cached_count()?.is_none_or(|n| n as usize >= self.capacity);
        if may_be_full {
            self.slots.reset_best(&mut self.mem)?;
            self.mem.set(self.slots.n, Value::UInt(0))?;
            let g = Arc::clone(&self.evicting_add);
            self.submit(&g)?;
        } else {
            let g = Arc::clone(&self.plain_add);
            self.submit(&g)?;
        }
        let mut code = status_code(&self.mem, self.slots.status)?;
        let mut evicted = None;
        if may_be_full && code == funcs::INSERT_STATUS_FULL {
            evicted = self.victim()?;
            if let Some(id) = evicted {
                self.mirror.removed(id);
            }
            code = status_code(&self.mem, self.slots.status2)?;
        }
        Ok(AddResult { status: self.mirror.added(matcher, priority, code)?, evicted })
    }

    fn delete(&mut self, pattern: &Pattern) -> Result<u64, FlowError> {
        self.slots.set_pattern(&mut self.mem, pattern)?;
        let ids = self.collect()?;
        let g = Arc::clone(&self.remove_chunk);
        self.chunked(&ids, g)?;
        for id in &ids {
            self.mirror.removed(*id);
        }
        Ok(ids.len() as u64)
    }

    fn modify(&mut self, pattern: &Pattern, actions: u64) -> Result<u64, FlowError> {
        self.slots.set_pattern(&mut self.mem, pattern)?;
        let ids = self.collect()?;
        self.mem.set(self.slots.act, Value::UInt(actions))?;
        let g = Arc::clone(&self.modify_chunk);
        self.chunked(&ids, g)?;
        Ok(ids.len() as u64)
    }

    fn evict(&mut self) -> Result<Option<u64>, FlowError> {
        self.slots.reset_best(&mut self.mem)?;
        let g = Arc::clone(&self.evict);
        self.submit(&g)?;
        let victim = self.victim()?;
        if let Some(id) = victim {
            self.mirror.removed(id);
        }
        Ok(victim)
    }

    fn ledger(&self) -> LedgerSnapshot {
        self.enclave.ledger().snapshot().since(&self.base)
    }

    fn finish(self: Box<Self>) -> Result<Vec<FlowRule>, FlowError> {
        let this = *self;
        this.client.close()?;
        Ok(this.enclave.into_state()?.rules())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::workload::{generate, match_for, OpMix, WorkloadSpec};

    fn cfg(capacity: usize, batch: usize) -> DriverConfig {
        DriverConfig::new(capacity, batch, CostModel::warm())
    }

    fn run(kind: DriverKind, c: DriverConfig, ops: &[FlowOp]) -> (Vec<OpResult>, Vec<FlowRule>, LedgerSnapshot) {
        let mut d = make_driver(kind, c).unwrap();
        let results = ops.iter().map(|op| d.apply(op).unwrap()).collect();
        let ledger = d.ledger();
        (results, d.finish().unwrap(), ledger)
    }

    #[test]
    fn drivers_agree() {
        let ops = generate(&WorkloadSpec::new(300, OpMix::BALANCED), 5);
        let c = cfg(16, 4);
        let (r0, t0, l0) = run(DriverKind::Baseline, c, &ops);
        assert_eq!(l0.transitions(), 0);
        let mut transitions = Vec::new();
        for kind in [DriverKind::Vanilla, DriverKind::Switchless, DriverKind::Bundler] {
            let (r, t, l) = run(kind, c, &ops);
            assert_eq!(r, r0, "{kind}");
            assert_eq!(t, t0, "{kind}");
            transitions.push(l.transitions());
        }
        assert!(transitions[0] > transitions[1] && transitions[1] > transitions[2], "{transitions:?}");
    }

    #[test]
    fn evict_transition_counts() {
        let n = 10;
        let mut ops: Vec<FlowOp> =
            (0..n).map(|k| FlowOp::Add { priority: 5 - k % 3, matcher: match_for(k), actions: 0 }).collect();
        ops.push(FlowOp::Evict);
        for (kind, want) in [(DriverKind::Vanilla, n + 3), (DriverKind::Switchless, n + 2), (DriverKind::Bundler, 1)] {
            let mut d = make_driver(kind, cfg(32, 16)).unwrap();
            for op in &ops[..n as usize] {
                d.apply(op).unwrap();
            }
            let before = d.ledger();
            assert_eq!(d.evict().unwrap(), Some(3), "{kind}");
            assert_eq!(d.ledger().since(&before).transitions(), want, "{kind}");
        }
    }

    #[test]
    fn empty_evict_and_delete() {
        for kind in DriverKind::ALL {
            let mut d = make_driver(kind, cfg(4, 2)).unwrap();
            assert_eq!(d.evict().unwrap(), None);
            assert_eq!(d.delete(&Pattern::All).unwrap(), 0);
            assert_eq!(d.modify(&Pattern::All, 1).unwrap(), 0);
        }
    }

    #[test]
    fn bigger_batches_need_fewer_transitions() {
        let mut ops: Vec<FlowOp> =
            (0..40).map(|k| FlowOp::Add { priority: k, matcher: match_for(k % 4), actions: 0 }).collect();
        ops.push(FlowOp::Delete(Pattern::Exact(match_for(1))));
        ops.push(FlowOp::Modify(Pattern::All, 3));
        let (r1, t1, l1) = run(DriverKind::Bundler, cfg(64, 1), &ops);
        let (r16, t16, l16) = run(DriverKind::Bundler, cfg(64, 16), &ops);
        assert_eq!((r1, t1), (r16, t16));
        assert!(l16.transitions() < l1.transitions());
    }

    #[test]
    fn bundler_add_is_one_transition_even_when_full() {
        let mut d = Bundler::new(cfg(4, 1)).unwrap();
        for k in 0..12 {
            let before = d.ledger();
            let r = d.add(match_for(k), k % 3, 0).unwrap();
            assert_eq!(d.ledger().since(&before).transitions(), 1);
            assert_eq!(r.evicted.is_some(), k >= 4);
        }
        assert!(d.stats().memo_hits >= 11);
    }

    #[test]
    fn actions_are_memoized_and_updated() {
        let mut d = Bundler::new(cfg(8, 4)).unwrap();
        let id = match d.add(match_for(1), 1, 7).unwrap().status {
            AddStatus::Added(id) => id,
            other => panic!("{other:?}"),
        };
        assert_eq!(d.actions(id).unwrap(), (7, MemoOutcome::Miss));
        let before = d.ledger();
        assert_eq!(d.actions(id).unwrap(), (7, MemoOutcome::Hit));
        assert_eq!(d.ledger().since(&before).transitions(), 0);
        d.modify(&Pattern::All, 9).unwrap();
        assert_eq!(d.actions(id).unwrap(), (9, MemoOutcome::Hit));
        d.delete(&Pattern::All).unwrap();
        assert!(d.actions(id).is_err());
    }
}
