// SPDX-License-Identifier: Apache-2.0

//! Worker-side interpreter for validated execution graphs.
//!
//! The interpreter walks the node array with a program counter and a loop
//! stack. List parameters of nodes inside for/while bodies are indexed by the
//! flattened iteration position of the enclosing loops: a for loop with trip
//! count `n` nested at position `p` yields positions `p * n + i`; a while loop
//! has no trip count up front and yields `p + i`. Iterator and map nodes
//! always index their lists from element 0 through their own argument matrix.
//!
//! Each visit of a control node (if/else/endif, for/endfor, while/endwhile)
//! charges one local operation. Call, iterator and map nodes charge nothing
//! themselves; their cost is whatever the translation function charges.

use thiserror::Error;

use crate::graph::{ExecutionGraph, GraphNode};
use crate::predicate::{Predicate, PredicateError};
use crate::registry::{ArgRow, Args, CallError, FunctionId, FunctionRegistry, RegistryError, TrustedCtx};
use crate::value::{Memory, ParamDesc, SlotId, Value, ValueError};

/// Default cap on the iterations of any single loop.
pub const DEFAULT_LOOP_GUARD: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterpConfig {
    pub loop_guard: u64,
}

impl Default for InterpConfig {
    fn default() -> Self {
        Self { loop_guard: DEFAULT_LOOP_GUARD }
    }
}

/// Work performed while executing one job.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecStats {
    pub nodes_visited: u64,
    /// Executions of plain call nodes.
    pub call_dispatches: u64,
    /// Translation-function invocations of any origin.
    pub translation_invocations: u64,
    pub control_steps: u64,
}

impl ExecStats {
    pub fn add(&mut self, other: &ExecStats) {
        self.nodes_visited += other.nodes_visited;
        self.call_dispatches += other.call_dispatches;
        self.translation_invocations += other.translation_invocations;
        self.control_steps += other.control_steps;
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecErrorKind {
    #[error("graph was not validated")]
    NotValidated,
    #[error("loop exceeded the guard of {0} iterations")]
    LoopGuard(u64),
    #[error("iteration count {0} is not a non-negative integer")]
    BadCount(Value),
    #[error("parameter {param} needs element {index} of slot {slot}, which has {len}")]
    Bounds { param: usize, slot: SlotId, index: usize, len: usize },
    #[error("parameter {param} declared '{declared}' but slot holds '{actual}'")]
    ParamTag { param: usize, declared: char, actual: char },
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("function {function} takes {expected} parameter(s), got {found}")]
    Arity { function: FunctionId, expected: usize, found: usize },
    #[error(transparent)]
    Predicate(#[from] PredicateError),
    #[error(transparent)]
    Value(#[from] ValueError),
    #[error("function failed: {0}")]
    Call(#[from] CallError),
}

/// First failing node of a job and why it failed.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("node {node}: {kind}")]
pub struct ExecError {
    pub node: usize,
    pub kind: ExecErrorKind,
}

/// Result of running a job: statistics are reported even on failure, and
/// writes made before the failing node stay in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecOutcome {
    pub stats: ExecStats,
    pub result: Result<(), ExecError>,
}

#[derive(Debug, Clone, Copy)]
struct LoopFrame {
    end: usize,
    iter: u64,
    trip: Option<u64>,
    parent_position: usize,
    position: usize,
}

/// Interpreter state for one graph execution.
#[derive(Debug)]
pub struct InterpreterState {
    pub pc: usize,
    loops: Vec<LoopFrame>,
}

impl InterpreterState {
    fn position(&self) -> usize {
        self.loops.last().map_or(0, |f| f.position)
    }

    pub fn loop_depth(&self) -> usize {
        self.loops.len()
    }
}

fn read_count(mem: &Memory, slot: SlotId) -> Result<u64, ExecErrorKind> {
    match mem.get(slot)? {
        Value::UInt(n) => Ok(n),
        Value::Int(n) if n >= 0 => Ok(n as u64),
        other => Err(ExecErrorKind::BadCount(other)),
    }
}

/// Resolves parameter descriptors into argument rows for `iters` iterations
/// starting at loop position `position`.
fn bind_rows(
    mem: &Memory,
    params: &[ParamDesc],
    position: usize,
    iters: usize,
    own_indexing: bool,
) -> Result<Vec<ArgRow>, ExecErrorKind> {
    params
        .iter()
        .enumerate()
        .map(|(param, p)| {
            let actual = mem.tag(p.slot)?;
            if actual != p.tag {
                return Err(ExecErrorKind::ParamTag { param, declared: p.tag.as_char(), actual: actual.as_char() });
            }
            let (base, step) = match (p.is_vector(), own_indexing) {
                (false, _) => (0, 0),
                (true, false) => (p.element(position), 0),
                (true, true) => (0, p.element(1)),
            };
            let len = mem.len(p.slot)?;
            let last = base + step * iters.saturating_sub(1);
            if iters > 0 && last >= len {
                return Err(ExecErrorKind::Bounds { param, slot: p.slot, index: last, len });
            }
            Ok(ArgRow { slot: p.slot, base, step })
        })
        .collect()
}

fn invoke<S>(
    ctx: &mut TrustedCtx<'_, S>,
    reg: &FunctionRegistry<S>,
    mem: &mut Memory,
    function: FunctionId,
    rows: &[ArgRow],
    iters: usize,
) -> Result<(), ExecErrorKind> {
    let (func, arity) = reg.lookup(function)?;
    if arity != rows.len() {
        return Err(ExecErrorKind::Arity { function, expected: arity, found: rows.len() });
    }
    let mut args = Args::new(mem, rows, iters);
    func(ctx, &mut args)?;
    Ok(())
}

/// Runs a single call with one iteration, as used for plain switchless calls
/// and for call nodes.
pub fn run_call<S>(
    ctx: &mut TrustedCtx<'_, S>,
    reg: &FunctionRegistry<S>,
    mem: &mut Memory,
    function: FunctionId,
    params: &[ParamDesc],
    position: usize,
) -> Result<(), ExecErrorKind> {
    let rows = bind_rows(mem, params, position, 1, false)?;
    invoke(ctx, reg, mem, function, &rows, 1)
}

/// Runs an iterator or map node: one translation-function invocation for all
/// iterations. Returns whether the function was invoked (it is skipped when
/// the count is zero).
pub fn run_iterator<S>(
    ctx: &mut TrustedCtx<'_, S>,
    reg: &FunctionRegistry<S>,
    mem: &mut Memory,
    function: FunctionId,
    n_iters: SlotId,
    params: &[ParamDesc],
) -> Result<bool, ExecErrorKind> {
    let n = read_count(mem, n_iters)? as usize;
    if n == 0 {
        return Ok(false);
    }
    let rows = bind_rows(mem, params, 0, n, true)?;
    invoke(ctx, reg, mem, function, &rows, n)?;
    Ok(true)
}

fn eval_at(pred: &Predicate, mem: &Memory, position: usize) -> Result<bool, ExecErrorKind> {
    pred.eval_with(|i| {
        let p = pred.operands()[i];
        mem.get_at(p.slot, p.element(position)).map_err(ExecErrorKind::from)
    })
}

/// Decides where control goes after a branching node. `node` must be an
/// `IfBegin`, `Else` or `WhileBegin`; anything else just advances.
pub fn step_branch(state: &InterpreterState, node: &GraphNode, mem: &Memory) -> Result<usize, ExecErrorKind> {
    let pc = state.pc;
    match node {
        GraphNode::IfBegin { predicate, else_offset, end_offset } => {
            if eval_at(predicate, mem, state.position())? {
                Ok(pc + 1)
            } else {
                Ok(else_offset.map_or(end_offset + 1, |e| e + 1))
            }
        }
        GraphNode::Else { end_offset } => Ok(end_offset + 1),
        GraphNode::WhileBegin { predicate, end_offset } => {
            if eval_at(predicate, mem, state.position())? {
                Ok(pc + 1)
            } else {
                Ok(end_offset + 1)
            }
        }
        _ => Ok(pc + 1),
    }
}

/// Executes a validated graph against trusted state and client memory.
pub fn execute_graph<S>(
    graph: &ExecutionGraph,
    ctx: &mut TrustedCtx<'_, S>,
    reg: &FunctionRegistry<S>,
    mem: &mut Memory,
    cfg: &InterpConfig,
) -> ExecOutcome {
    let mut stats = ExecStats::default();
    if !graph.is_validated() {
        return ExecOutcome { stats, result: Err(ExecError { node: 0, kind: ExecErrorKind::NotValidated }) };
    }
    let mut state = InterpreterState { pc: 0, loops: Vec::new() };
    let result =
        run(graph, ctx, reg, mem, cfg, &mut state, &mut stats).map_err(|kind| ExecError { node: state.pc, kind });
    ExecOutcome { stats, result }
}

fn run<S>(
    graph: &ExecutionGraph,
    ctx: &mut TrustedCtx<'_, S>,
    reg: &FunctionRegistry<S>,
    mem: &mut Memory,
    cfg: &InterpConfig,
    state: &mut InterpreterState,
    stats: &mut ExecStats,
) -> Result<(), ExecErrorKind> {
    let nodes = graph.nodes();
    while let Some(node) = nodes.get(state.pc) {
        stats.nodes_visited += 1;
        if node.is_control() {
            stats.control_steps += 1;
            ctx.charge_local(1);
        }
        let next = match node {
            GraphNode::Call { function, params } => {
                run_call(ctx, reg, mem, *function, params, state.position())?;
                stats.call_dispatches += 1;
                stats.translation_invocations += 1;
                state.pc + 1
            }
            GraphNode::Iterator { function, n_iters, params } => {
                if run_iterator(ctx, reg, mem, *function, *n_iters, params)? {
                    stats.translation_invocations += 1;
                }
                state.pc + 1
            }
            GraphNode::Map { function, n_iters, inputs, output } => {
                let mut params = inputs.clone();
                params.push(*output);
                if run_iterator(ctx, reg, mem, *function, *n_iters, &params)? {
                    stats.translation_invocations += 1;
                }
                state.pc + 1
            }
            GraphNode::IfBegin { .. } | GraphNode::Else { .. } => step_branch(state, node, mem)?,
            GraphNode::IfEnd => state.pc + 1,
            GraphNode::ForBegin { n_iters, end_offset } => {
                let n = read_count(mem, *n_iters)?;
                if n > cfg.loop_guard {
                    return Err(ExecErrorKind::LoopGuard(cfg.loop_guard));
                }
                if n == 0 {
                    end_offset + 1
                } else {
                    let parent = state.position();
                    state.loops.push(LoopFrame {
                        end: *end_offset,
                        iter: 0,
                        trip: Some(n),
                        parent_position: parent,
                        position: parent * n as usize,
                    });
                    state.pc + 1
                }
            }
            GraphNode::WhileBegin { .. } => {
                let next = step_branch(state, node, mem)?;
                if next == state.pc + 1 {
                    let parent = state.position();
                    let end = match node {
                        GraphNode::WhileBegin { end_offset, .. } => *end_offset,
                        _ => unreachable!(),
                    };
                    state.loops.push(LoopFrame { end, iter: 0, trip: None, parent_position: parent, position: parent });
                }
                next
            }
            GraphNode::ForEnd { begin_offset } | GraphNode::WhileEnd { begin_offset } => {
                let frame = state.loops.last_mut().expect("validated graph has a loop frame at its end marker");
                debug_assert_eq!(frame.end, state.pc);
                let again = match (frame.trip, &nodes[*begin_offset]) {
                    (Some(trip), _) => frame.iter + 1 < trip,
                    (None, GraphNode::WhileBegin { predicate, .. }) => eval_at(predicate, mem, frame.parent_position)?,
                    (None, _) => false,
                };
                if again {
                    frame.iter += 1;
                    if frame.iter >= cfg.loop_guard {
                        return Err(ExecErrorKind::LoopGuard(cfg.loop_guard));
                    }
                    frame.position = match frame.trip {
                        Some(trip) => frame.parent_position * trip as usize + frame.iter as usize,
                        None => frame.parent_position + frame.iter as usize,
                    };
                    begin_offset + 1
                } else {
                    state.loops.pop();
                    state.pc + 1
                }
            }
        };
        state.pc = next;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use crate::memo::MemoTrusted;
    use crate::sim::{CostModel, TransitionLedger};
    use crate::value::TypeTag;

    const PLUS_ONE: FunctionId = FunctionId(0);
    const PLUS: FunctionId = FunctionId(1);
    const PLUS_ONE_RET: FunctionId = FunctionId(2);
    const FAIL: FunctionId = FunctionId(3);

    fn registry() -> FunctionRegistry<u64> {
        let mut reg = FunctionRegistry::default();
        reg.register(PLUS_ONE, 1, |ctx: &mut TrustedCtx<'_, u64>, a: &mut Args<'_>| {
            *ctx.state_mut() += 1;
            for i in 0..a.iters() {
                let v = a.i64(0, i)?;
                a.set_i64(0, i, v + 1)?;
            }
            Ok(())
        })
        .unwrap();
        reg.register(PLUS, 3, |ctx: &mut TrustedCtx<'_, u64>, a: &mut Args<'_>| {
            *ctx.state_mut() += 1;
            for i in 0..a.iters() {
                let s = a.i64(0, i)? + a.i64(1, i)?;
                a.set_i64(2, i, s)?;
            }
            Ok(())
        })
        .unwrap();
        reg.register(PLUS_ONE_RET, 2, |ctx: &mut TrustedCtx<'_, u64>, a: &mut Args<'_>| {
            *ctx.state_mut() += 1;
            for i in 0..a.iters() {
                let v = a.i64(0, i)?;
                a.set_i64(1, i, v + 1)?;
            }
            Ok(())
        })
        .unwrap();
        reg.register(FAIL, 1, |_: &mut TrustedCtx<'_, u64>, _: &mut Args<'_>| Err(CallError::Failed("boom".into())))
            .unwrap();
        reg
    }

    struct Harness {
        reg: FunctionRegistry<u64>,
        invocations: u64,
        memo: MemoTrusted,
        ledger: TransitionLedger,
        cfg: InterpConfig,
    }

    impl Harness {
        fn new() -> Self {
            Self {
                reg: registry(),
                invocations: 0,
                memo: MemoTrusted::default(),
                ledger: TransitionLedger::new(CostModel::warm()),
                cfg: InterpConfig::default(),
            }
        }

        fn builder(&self) -> GraphBuilder {
            GraphBuilder::new(self.reg.signatures())
        }

        fn run(&mut self, b: GraphBuilder, mem: &mut Memory) -> ExecOutcome {
            let g = b.build().expect("valid graph");
            let mut ctx = TrustedCtx::new(&mut self.invocations, &mut self.memo, &self.ledger);
            execute_graph(&g, &mut ctx, &self.reg, mem, &self.cfg)
        }
    }

    fn var(s: SlotId) -> ParamDesc {
        ParamDesc::var(s, TypeTag::Int)
    }

    fn vec_(s: SlotId) -> ParamDesc {
        ParamDesc::vector(s, TypeTag::Int)
    }

    fn pred(fmt: &str, ops: Vec<ParamDesc>) -> Predicate {
        Predicate::new(fmt, ops).unwrap()
    }

    #[test]
    fn two_merged_calls() {
        let mut h = Harness::new();
        let mut mem = Memory::new();
        let x = mem.var_i64(0);
        let mut b = h.builder();
        b.call(PLUS_ONE, vec![var(x)]).unwrap().call(PLUS_ONE, vec![var(x)]).unwrap();
        let out = h.run(b, &mut mem);
        out.result.unwrap();
        assert_eq!(mem.i64_at(x, 0).unwrap(), 2);
        assert_eq!(out.stats.call_dispatches, 2);
    }

    #[test]
    fn for_loop_increments_each_element() {
        let mut h = Harness::new();
        let mut mem = Memory::new();
        let n = mem.var_u64(10);
        let xs = mem.vector_i64(&[0; 10]);
        let mut b = h.builder();
        b.begin_for(n).call(PLUS_ONE, vec![vec_(xs)]).unwrap();
        b.end_for();
        let out = h.run(b, &mut mem);
        out.result.unwrap();
        assert_eq!(mem.i64s(xs).unwrap(), vec![1; 10]);
        assert_eq!(out.stats.call_dispatches, 10);
    }

    #[test]
    fn empty_for_loop() {
        let mut h = Harness::new();
        let mut mem = Memory::new();
        let n = mem.var_u64(0);
        let x = mem.var_i64(4);
        let mut b = h.builder();
        b.begin_for(n).call(PLUS_ONE, vec![var(x)]).unwrap();
        b.end_for();
        h.run(b, &mut mem).result.unwrap();
        assert_eq!(mem.i64_at(x, 0).unwrap(), 4);
    }

    #[test]
    fn nested_for_flattens_positions() {
        let mut h = Harness::new();
        let mut mem = Memory::new();
        let outer = mem.var_u64(3);
        let inner = mem.var_u64(4);
        let xs = mem.vector_i64(&(0..12).collect::<Vec<_>>());
        let mut b = h.builder();
        b.begin_for(outer).begin_for(inner).call(PLUS_ONE, vec![vec_(xs)]).unwrap();
        b.end_for().end_for();
        h.run(b, &mut mem).result.unwrap();
        assert_eq!(mem.i64s(xs).unwrap(), (1..13).collect::<Vec<_>>());
    }

    #[test]
    fn for_each_is_one_invocation() {
        let mut h = Harness::new();
        let mut mem = Memory::new();
        let n = mem.var_u64(10);
        let xs = mem.vector_i64(&[0; 10]);
        let mut b = h.builder();
        b.for_each(PLUS_ONE, n, vec![vec_(xs)]).unwrap();
        let out = h.run(b, &mut mem);
        out.result.unwrap();
        assert_eq!(mem.i64s(xs).unwrap(), vec![1; 10]);
        assert_eq!(out.stats.translation_invocations, 1);
        assert_eq!(h.invocations, 1);
    }

    #[test]
    fn iterator_sums_pairwise() {
        let mut h = Harness::new();
        let mut mem = Memory::new();
        let n = mem.var_u64(3);
        let a = mem.vector_i64(&[1, 2, 3]);
        let bb = mem.vector_i64(&[10, 20, 30]);
        let out_v = mem.vector_i64(&[0; 3]);
        let mut b = h.builder();
        b.for_each(PLUS, n, vec![vec_(a), vec_(bb), vec_(out_v)]).unwrap();
        h.run(b, &mut mem).result.unwrap();
        assert_eq!(mem.i64s(out_v).unwrap(), vec![11, 22, 33]);
    }

    #[test]
    fn iterator_with_zero_count_is_skipped() {
        let mut h = Harness::new();
        let mut mem = Memory::new();
        let n = mem.var_u64(0);
        let xs = mem.vector_i64(&[5; 3]);
        let mut b = h.builder();
        b.for_each(PLUS_ONE, n, vec![vec_(xs)]).unwrap();
        let out = h.run(b, &mut mem);
        out.result.unwrap();
        assert_eq!(out.stats.translation_invocations, 0);
        assert_eq!(h.invocations, 0);
        assert_eq!(mem.i64s(xs).unwrap(), vec![5; 3]);
    }

    #[test]
    fn iterator_bounds() {
        let mut h = Harness::new();
        let mut mem = Memory::new();
        let n = mem.var_u64(4);
        let xs = mem.vector_i64(&[0; 3]);
        let mut b = h.builder();
        b.for_each(PLUS_ONE, n, vec![vec_(xs)]).unwrap();
        let err = h.run(b, &mut mem).result.unwrap_err();
        assert!(matches!(err.kind, ExecErrorKind::Bounds { index: 3, len: 3, .. }));
    }

    #[test]
    fn map_leaves_inputs_alone() {
        let mut h = Harness::new();
        let mut mem = Memory::new();
        let n = mem.var_u64(10);
        let xs = mem.vector_i64(&[0; 10]);
        let ys = mem.vector_i64(&[0; 10]);
        let mut b = h.builder();
        b.map(PLUS_ONE_RET, n, vec![vec_(xs)], vec_(ys)).unwrap();
        h.run(b, &mut mem).result.unwrap();
        assert_eq!(mem.i64s(xs).unwrap(), vec![0; 10]);
        assert_eq!(mem.i64s(ys).unwrap(), vec![1; 10]);
    }

    #[test]
    fn if_true_and_false() {
        for (y, x, want) in [(7, 5, 6), (5, 7, 7)] {
            let mut h = Harness::new();
            let mut mem = Memory::new();
            let xs = mem.var_i64(x);
            let ys = mem.var_i64(y);
            let mut b = h.builder();
            b.if_begin(pred("d>d", vec![var(ys), var(xs)]));
            b.call(PLUS_ONE, vec![var(xs)]).unwrap();
            b.if_end();
            h.run(b, &mut mem).result.unwrap();
            assert_eq!(mem.i64_at(xs, 0).unwrap(), want);
        }
    }

    #[test]
    fn else_branch() {
        let mut h = Harness::new();
        let mut mem = Memory::new();
        let a = mem.var_i64(0);
        let b_ = mem.var_i64(0);
        let five = mem.var_i64(5);
        let seven = mem.var_i64(7);
        let mut b = h.builder();
        b.if_begin(pred("d>d", vec![var(five), var(seven)]));
        b.call(PLUS_ONE, vec![var(a)]).unwrap();
        b.else_begin();
        b.call(PLUS_ONE, vec![var(b_)]).unwrap();
        b.if_end();
        h.run(b, &mut mem).result.unwrap();
        assert_eq!((mem.i64_at(a, 0).unwrap(), mem.i64_at(b_, 0).unwrap()), (0, 1));
    }

    #[test]
    fn while_counts_up() {
        let mut h = Harness::new();
        let mut mem = Memory::new();
        let x = mem.var_i64(0);
        let mut b = h.builder();
        b.while_begin(pred("d<3", vec![var(x)]));
        b.call(PLUS_ONE, vec![var(x)]).unwrap();
        b.while_end();
        let out = h.run(b, &mut mem);
        out.result.unwrap();
        assert_eq!(mem.i64_at(x, 0).unwrap(), 3);
        assert_eq!(out.stats.call_dispatches, 3);
    }

    #[test]
    fn while_initially_false() {
        let mut h = Harness::new();
        let mut mem = Memory::new();
        let x = mem.var_i64(9);
        let mut b = h.builder();
        b.while_begin(pred("d<3", vec![var(x)]));
        b.call(PLUS_ONE, vec![var(x)]).unwrap();
        b.while_end();
        h.run(b, &mut mem).result.unwrap();
        assert_eq!(mem.i64_at(x, 0).unwrap(), 9);
    }

    #[test]
    fn loop_guard_trips() {
        let mut h = Harness::new();
        h.cfg.loop_guard = 100;
        let mut mem = Memory::new();
        let x = mem.var_i64(0);
        let mut b = h.builder();
        b.while_begin(pred("d>=0", vec![var(x)]));
        b.call(PLUS_ONE, vec![var(x)]).unwrap();
        b.while_end();
        let err = h.run(b, &mut mem).result.unwrap_err();
        assert_eq!(err.kind, ExecErrorKind::LoopGuard(100));
        assert_eq!(err.node, 2);
        assert_eq!(mem.i64_at(x, 0).unwrap(), 100);
    }

    #[test]
    fn failure_aborts_but_keeps_partial_writes() {
        let mut h = Harness::new();
        let mut mem = Memory::new();
        let x = mem.var_i64(0);
        let mut b = h.builder();
        b.call(PLUS_ONE, vec![var(x)]).unwrap();
        b.call(FAIL, vec![var(x)]).unwrap();
        b.call(PLUS_ONE, vec![var(x)]).unwrap();
        let out = h.run(b, &mut mem);
        let err = out.result.unwrap_err();
        assert_eq!(err.node, 1);
        assert!(matches!(err.kind, ExecErrorKind::Call(_)));
        assert_eq!(mem.i64_at(x, 0).unwrap(), 1);
    }

    #[test]
    fn unvalidated_graph_refused() {
        let mut h = Harness::new();
        let mut mem = Memory::new();
        let g = ExecutionGraph::from_nodes(vec![GraphNode::IfEnd]);
        let mut ctx = TrustedCtx::new(&mut h.invocations, &mut h.memo, &h.ledger);
        let out = execute_graph(&g, &mut ctx, &h.reg, &mut mem, &h.cfg);
        assert_eq!(out.result.unwrap_err().kind, ExecErrorKind::NotValidated);
    }

    #[test]
    fn declared_tag_must_match_slot() {
        let mut h = Harness::new();
        let mut mem = Memory::new();
        let x = mem.var_u64(0);
        let mut b = h.builder();
        b.call(PLUS_ONE, vec![var(x)]).unwrap();
        let err = h.run(b, &mut mem).result.unwrap_err();
        assert!(matches!(err.kind, ExecErrorKind::ParamTag { declared: 'd', actual: 'u', .. }));
    }

    #[test]
    fn control_nodes_charge_local_ops() {
        let mut h = Harness::new();
        let mut mem = Memory::new();
        let n = mem.var_u64(2);
        let x = mem.var_i64(0);
        let mut b = h.builder();
        b.begin_for(n).call(PLUS_ONE, vec![var(x)]).unwrap();
        b.end_for();
        let out = h.run(b, &mut mem);
        // for, endfor, endfor
        assert_eq!(out.stats.control_steps, 3);
        assert_eq!(h.ledger.snapshot().local_ops, 3);
    }

    #[test]
    fn step_branch_targets() {
        let mut mem = Memory::new();
        let a = mem.var_i64(1);
        let t = pred("d==1", vec![var(a)]);
        let f = pred("d==2", vec![var(a)]);
        let state = InterpreterState { pc: 4, loops: Vec::new() };
        let if_t = GraphNode::IfBegin { predicate: t.clone(), else_offset: Some(7), end_offset: 9 };
        let if_f = GraphNode::IfBegin { predicate: f.clone(), else_offset: Some(7), end_offset: 9 };
        let if_f_noelse = GraphNode::IfBegin { predicate: f.clone(), else_offset: None, end_offset: 9 };
        assert_eq!(step_branch(&state, &if_t, &mem).unwrap(), 5);
        assert_eq!(step_branch(&state, &if_f, &mem).unwrap(), 8);
        assert_eq!(step_branch(&state, &if_f_noelse, &mem).unwrap(), 10);
        assert_eq!(step_branch(&state, &GraphNode::Else { end_offset: 9 }, &mem).unwrap(), 10);
        let wf = GraphNode::WhileBegin { predicate: f, end_offset: 6 };
        assert_eq!(step_branch(&state, &wf, &mem).unwrap(), 7);
    }
}
