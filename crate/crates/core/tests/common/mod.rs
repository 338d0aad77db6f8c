// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

use std::time::Duration;

use bundler_core::{
    Args, CallError, CostModel, Enclave, FunctionId, FunctionRegistry, ParamDesc, SlotId, TrustedCtx, TypeTag,
};

pub const PLUS_ONE: FunctionId = FunctionId(1);
pub const PLUS: FunctionId = FunctionId(2);
pub const PLUS_ONE_RET: FunctionId = FunctionId(3);
pub const IDENTITY: FunctionId = FunctionId(4);
pub const SLOW_PLUS_ONE: FunctionId = FunctionId(5);
/// `(seq, a, b, out)`: checks `b == !a`, writes `seq` to `out`.
pub const CANARY: FunctionId = FunctionId(6);
pub const FAIL: FunctionId = FunctionId(7);
pub const SQUARE: FunctionId = FunctionId(8);

#[derive(Debug, Default)]
pub struct Counters {
    pub invocations: u64,
    pub executions: u64,
}

fn each(ctx: &mut TrustedCtx<'_, Counters>, a: &Args<'_>) {
    ctx.state_mut().invocations += 1;
    ctx.state_mut().executions += a.iters() as u64;
}

pub fn registry() -> FunctionRegistry<Counters> {
    let mut r = FunctionRegistry::default();
    r.register(PLUS_ONE, 1, |ctx: &mut TrustedCtx<'_, Counters>, a: &mut Args<'_>| {
        each(ctx, a);
        for i in 0..a.iters() {
            let v = a.i64(0, i)?;
            a.set_i64(0, i, v + 1)?;
        }
        Ok(())
    })
    .unwrap();
    r.register(PLUS, 3, |ctx: &mut TrustedCtx<'_, Counters>, a: &mut Args<'_>| {
        each(ctx, a);
        for i in 0..a.iters() {
            let s = a.i64(0, i)? + a.i64(1, i)?;
            a.set_i64(2, i, s)?;
        }
        Ok(())
    })
    .unwrap();
    r.register(PLUS_ONE_RET, 2, |ctx: &mut TrustedCtx<'_, Counters>, a: &mut Args<'_>| {
        each(ctx, a);
        for i in 0..a.iters() {
            let v = a.i64(0, i)?;
            a.set_i64(1, i, v + 1)?;
        }
        Ok(())
    })
    .unwrap();
    r.register(IDENTITY, 2, |ctx: &mut TrustedCtx<'_, Counters>, a: &mut Args<'_>| {
        each(ctx, a);
        for i in 0..a.iters() {
            let v = a.get(0, i)?;
            a.set(1, i, v)?;
        }
        Ok(())
    })
    .unwrap();
    r.register(SLOW_PLUS_ONE, 1, |ctx: &mut TrustedCtx<'_, Counters>, a: &mut Args<'_>| {
        each(ctx, a);
        std::thread::sleep(Duration::from_millis(50));
        let v = a.i64(0, 0)?;
        a.set_i64(0, 0, v + 1)
    })
    .unwrap();
    r.register(CANARY, 4, |ctx: &mut TrustedCtx<'_, Counters>, a: &mut Args<'_>| {
        each(ctx, a);
        let (seq, x, y) = (a.u64(0, 0)?, a.u64(1, 0)?, a.u64(2, 0)?);
        if y != !x {
            return Err(CallError::Failed(format!("torn frame at {seq}")));
        }
        a.set_u64(3, 0, seq)
    })
    .unwrap();
    r.register(FAIL, 1, |_: &mut TrustedCtx<'_, Counters>, _: &mut Args<'_>| Err(CallError::Failed("refused".into())))
        .unwrap();
    r.register(SQUARE, 2, |ctx: &mut TrustedCtx<'_, Counters>, a: &mut Args<'_>| {
        each(ctx, a);
        for i in 0..a.iters() {
            let v = a.i64(0, i)?;
            a.set_i64(1, i, v * v)?;
        }
        Ok(())
    })
    .unwrap();
    r
}

pub fn enclave() -> Enclave<Counters> {
    Enclave::with_registry(Counters::default(), CostModel::warm(), registry())
}

pub fn var(s: SlotId) -> ParamDesc {
    ParamDesc::var(s, TypeTag::Int)
}

pub fn vector(s: SlotId) -> ParamDesc {
    ParamDesc::vector(s, TypeTag::Int)
}

pub fn uvar(s: SlotId) -> ParamDesc {
    ParamDesc::var(s, TypeTag::UInt)
}
