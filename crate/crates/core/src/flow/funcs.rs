// SPDX-License-Identifier: Apache-2.0

//! Trusted-side flow-table functions and their translation functions.
//!
//! All values are `'u'`. Patterns travel as a kind word (0 exact, 1 all)
//! followed by six match fields. Every function loops over its iterations so
//! that it can be batched by iterator nodes.

use crate::memo::{fingerprint, MemoWrite};
use crate::registry::{Args, CallError, FunctionId, FunctionRegistry, TrustedCtx};
use crate::value::Value;

use super::table::{FlowMatch, FlowTable, InsertStatus, Pattern};

/// `(prio, m0..m5, actions, status)`; status 0 inserted, 1 replaced, 2 full.
pub const INSERT: FunctionId = FunctionId(0);
/// `(kind, m0..m5, n)`
pub const COUNT_MATCHES: FunctionId = FunctionId(1);
/// `(kind, m0..m5, ids[], n)`
pub const COLLECT: FunctionId = FunctionId(2);
/// `(id, prio, last_used)`
pub const GET_KEY: FunctionId = FunctionId(3);
/// `(id, status)`; status 1 when a rule was removed.
pub const REMOVE: FunctionId = FunctionId(4);
/// `(id, actions, status)`
pub const SET_ACTIONS: FunctionId = FunctionId(5);
/// `(prio, last_used, id, best_prio, best_last_used, best_id)`
pub const TAKE_BEST: FunctionId = FunctionId(6);
/// `(count)`
pub const RULE_COUNT: FunctionId = FunctionId(7);
/// `(id, actions)`
pub const GET_ACTIONS: FunctionId = FunctionId(8);

pub const INSERT_STATUS_FULL: u64 = 2;

fn missing(id: u64) -> CallError {
    CallError::Failed(format!("no flow rule with id {id}"))
}

fn read_match(a: &Args<'_>, first: usize, i: usize) -> Result<[u64; 6], CallError> {
    let mut m = [0; 6];
    for (k, f) in m.iter_mut().enumerate() {
        *f = a.u64(first + k, i)?;
    }
    Ok(m)
}

fn read_pattern(a: &Args<'_>, i: usize) -> Result<Pattern, CallError> {
    let kind = a.u64(0, i)?;
    Pattern::decode(kind, read_match(a, 1, i)?).ok_or_else(|| CallError::Failed(format!("bad pattern kind {kind}")))
}

/// Memo key of the rule-count cache.
pub fn count_key() -> Vec<u8> {
    fingerprint(&[])
}

/// Memo key of the per-rule actions cache.
pub fn actions_key(id: u64) -> Vec<u8> {
    fingerprint(&[Value::UInt(id)])
}

fn publish_count(ctx: &mut TrustedCtx<'_, FlowTable>) -> Result<(), CallError> {
    if let Some(cache) = ctx.state().count_memo {
        let n = ctx.state().len() as u64;
        ctx.memo_insert(cache, count_key(), Value::UInt(n))?;
    }
    Ok(())
}

fn publish_actions(ctx: &mut TrustedCtx<'_, FlowTable>, id: u64, write: MemoWrite) -> Result<(), CallError> {
    if let Some(cache) = ctx.state().actions_memo {
        ctx.memo_on_write(cache, &actions_key(id), write)?;
    }
    Ok(())
}

fn insert(ctx: &mut TrustedCtx<'_, FlowTable>, a: &mut Args<'_>) -> Result<(), CallError> {
    for i in 0..a.iters() {
        let prio = a.u64(0, i)?;
        let m = FlowMatch(read_match(a, 1, i)?);
        let act = a.u64(7, i)?;
        let status = ctx.state_mut().insert(m, prio, act);
        match status {
            InsertStatus::Inserted(_) => publish_count(ctx)?,
            InsertStatus::Replaced(id) => publish_actions(ctx, id, MemoWrite::Update(Value::UInt(act)))?,
            InsertStatus::Full => {}
        }
        a.set_u64(8, i, status.code())?;
    }
    Ok(())
}

fn count_matches(ctx: &mut TrustedCtx<'_, FlowTable>, a: &mut Args<'_>) -> Result<(), CallError> {
    for i in 0..a.iters() {
        let p = read_pattern(a, i)?;
        let n = ctx.state_mut().count_matches(&p);
        a.set_u64(7, i, n)?;
    }
    Ok(())
}

fn collect(ctx: &mut TrustedCtx<'_, FlowTable>, a: &mut Args<'_>) -> Result<(), CallError> {
    for i in 0..a.iters() {
        let p = read_pattern(a, i)?;
        let ids = ctx.state_mut().collect(&p);
        let out = a.tail_mut(7, i)?;
        if out.len() < ids.len() {
            return Err(CallError::Failed(format!("id buffer holds {} of {} matches", out.len(), ids.len())));
        }
        for (slot, id) in out.iter_mut().zip(&ids) {
            *slot = Value::UInt(*id);
        }
        a.set_u64(8, i, ids.len() as u64)?;
    }
    Ok(())
}

fn get_key(ctx: &mut TrustedCtx<'_, FlowTable>, a: &mut Args<'_>) -> Result<(), CallError> {
    for i in 0..a.iters() {
        let id = a.u64(0, i)?;
        let r = *ctx.state().get(id).ok_or_else(|| missing(id))?;
        a.set_u64(1, i, r.priority)?;
        a.set_u64(2, i, r.last_used)?;
    }
    Ok(())
}

fn remove(ctx: &mut TrustedCtx<'_, FlowTable>, a: &mut Args<'_>) -> Result<(), CallError> {
    for i in 0..a.iters() {
        let id = a.u64(0, i)?;
        let removed = ctx.state_mut().remove(id).is_some();
        if removed {
            publish_count(ctx)?;
            publish_actions(ctx, id, MemoWrite::Invalidate)?;
        }
        a.set_u64(1, i, removed as u64)?;
    }
    Ok(())
}

fn set_actions(ctx: &mut TrustedCtx<'_, FlowTable>, a: &mut Args<'_>) -> Result<(), CallError> {
    for i in 0..a.iters() {
        let id = a.u64(0, i)?;
        let act = a.u64(1, i)?;
        let done = ctx.state_mut().set_actions(id, act);
        if done {
            publish_actions(ctx, id, MemoWrite::Update(Value::UInt(act)))?;
        }
        a.set_u64(2, i, done as u64)?;
    }
    Ok(())
}

fn take_best(_: &mut TrustedCtx<'_, FlowTable>, a: &mut Args<'_>) -> Result<(), CallError> {
    for i in 0..a.iters() {
        for k in 0..3 {
            let v = a.u64(k, i)?;
            a.set_u64(k + 3, i, v)?;
        }
    }
    Ok(())
}

fn rule_count(ctx: &mut TrustedCtx<'_, FlowTable>, a: &mut Args<'_>) -> Result<(), CallError> {
    let n = ctx.state().len() as u64;
    for i in 0..a.iters() {
        a.set_u64(0, i, n)?;
    }
    Ok(())
}

fn get_actions(ctx: &mut TrustedCtx<'_, FlowTable>, a: &mut Args<'_>) -> Result<(), CallError> {
    for i in 0..a.iters() {
        let id = a.u64(0, i)?;
        let act = ctx.state().get(id).ok_or_else(|| missing(id))?.actions;
        a.set_u64(1, i, act)?;
    }
    Ok(())
}

/// Registry with every flow-table function.
type FlowFn = fn(&mut TrustedCtx<'_, FlowTable>, &mut Args<'_>) -> Result<(), CallError>;

pub fn flow_registry() -> FunctionRegistry<FlowTable> {
    let mut reg = FunctionRegistry::default();
    let table: [(FunctionId, usize, FlowFn); 9] = [
        (INSERT, 9, insert),
        (COUNT_MATCHES, 8, count_matches),
        (COLLECT, 9, collect),
        (GET_KEY, 3, get_key),
        (REMOVE, 2, remove),
        (SET_ACTIONS, 3, set_actions),
        (TAKE_BEST, 6, take_best),
        (RULE_COUNT, 1, rule_count),
        (GET_ACTIONS, 2, get_actions),
    ];
    for (id, arity, f) in table {
        reg.register(id, arity, f).expect("flow function ids are distinct");
    }
    reg
}
