// SPDX-License-Identifier: Apache-2.0

//! Small trusted functions used by the experiments and suites.

use std::collections::BTreeMap;

use bundler_core::{
    Args, CallError, CostModel, Enclave, FunctionId, FunctionRegistry, MemoCacheId, MemoWrite, ParamDesc, SlotId,
    TrustedCtx, TypeTag, Value,
};

/// `(x)`: does nothing.
pub const NOOP: FunctionId = FunctionId(0);
/// `(x)`: `x += 1`.
pub const INC: FunctionId = FunctionId(1);
/// `(a, b, out)`: `out = a + b`.
pub const ADD: FunctionId = FunctionId(2);
/// `(a, out)`: `out = 3 * out + a`.
pub const MIX: FunctionId = FunctionId(3);
/// `(out)`: writes the trusted flag as 0 or 1.
pub const CHECK: FunctionId = FunctionId(4);
/// `(key, out)`: reads the trusted store.
pub const GET: FunctionId = FunctionId(5);
/// `(key, value)`: writes the trusted store.
pub const PUT: FunctionId = FunctionId(6);

/// Trusted state of the demo enclave.
#[derive(Debug, Default, Clone)]
pub struct Demo {
    /// Translation-function invocations.
    pub invocations: u64,
    /// Iterations executed across all invocations.
    pub executions: u64,
    pub flag: bool,
    pub store: BTreeMap<i64, i64>,
    /// Cache kept in step with `PUT`.
    pub get_memo: Option<MemoCacheId>,
}

type Ctx<'a, 'b> = &'a mut TrustedCtx<'b, Demo>;
type DemoFn = fn(Ctx<'_, '_>, &mut Args<'_>) -> Result<(), CallError>;

fn count(ctx: Ctx<'_, '_>, a: &Args<'_>) {
    let s = ctx.state_mut();
    s.invocations += 1;
    s.executions += a.iters() as u64;
}

fn noop(ctx: Ctx<'_, '_>, a: &mut Args<'_>) -> Result<(), CallError> {
    count(ctx, a);
    Ok(())
}

fn inc(ctx: Ctx<'_, '_>, a: &mut Args<'_>) -> Result<(), CallError> {
    count(ctx, a);
    for i in 0..a.iters() {
        let v = a.i64(0, i)?;
        a.set_i64(0, i, v.wrapping_add(1))?;
    }
    Ok(())
}

fn add(ctx: Ctx<'_, '_>, a: &mut Args<'_>) -> Result<(), CallError> {
    count(ctx, a);
    for i in 0..a.iters() {
        let v = a.i64(0, i)?.wrapping_add(a.i64(1, i)?);
        a.set_i64(2, i, v)?;
    }
    Ok(())
}

fn mix(ctx: Ctx<'_, '_>, a: &mut Args<'_>) -> Result<(), CallError> {
    count(ctx, a);
    for i in 0..a.iters() {
        let v = a.i64(1, i)?.wrapping_mul(3).wrapping_add(a.i64(0, i)?);
        a.set_i64(1, i, v)?;
    }
    Ok(())
}

fn check(ctx: Ctx<'_, '_>, a: &mut Args<'_>) -> Result<(), CallError> {
    count(ctx, a);
    let flag = ctx.state().flag as i64;
    for i in 0..a.iters() {
        a.set_i64(0, i, flag)?;
    }
    Ok(())
}

fn get(ctx: Ctx<'_, '_>, a: &mut Args<'_>) -> Result<(), CallError> {
    count(ctx, a);
    for i in 0..a.iters() {
        let k = a.i64(0, i)?;
        let v = ctx.state().store.get(&k).copied().unwrap_or(0);
        a.set_i64(1, i, v)?;
    }
    Ok(())
}

fn put(ctx: Ctx<'_, '_>, a: &mut Args<'_>) -> Result<(), CallError> {
    count(ctx, a);
    for i in 0..a.iters() {
        let (k, v) = (a.i64(0, i)?, a.i64(1, i)?);
        ctx.state_mut().store.insert(k, v);
        if let Some(cache) = ctx.state().get_memo {
            let key = bundler_core::memo::fingerprint(&[Value::Int(k)]);
            ctx.memo_on_write(cache, &key, MemoWrite::Update(Value::Int(v)))?;
        }
    }
    Ok(())
}

pub fn registry() -> FunctionRegistry<Demo> {
    let mut r = FunctionRegistry::default();
    let fns: [(FunctionId, usize, DemoFn); 7] =
        [(NOOP, 1, noop), (INC, 1, inc), (ADD, 3, add), (MIX, 2, mix), (CHECK, 1, check), (GET, 2, get), (PUT, 2, put)];
    for (id, arity, f) in fns {
        r.register(id, arity, f).expect("demo function ids are distinct");
    }
    r
}

pub fn enclave(state: Demo, cost: CostModel) -> Enclave<Demo> {
    Enclave::with_registry(state, cost, registry())
}

pub fn var(s: SlotId) -> ParamDesc {
    ParamDesc::var(s, TypeTag::Int)
}

pub fn vector(s: SlotId) -> ParamDesc {
    ParamDesc::vector(s, TypeTag::Int)
}
