// SPDX-License-Identifier: Apache-2.0

//! Function ids, translation functions and the registry mapping one to the
//! other.
//!
//! A translation function receives the argument matrix of a call: one row per
//! parameter, one column per iteration. For a plain call there is a single
//! iteration; iterator and map nodes hand over every iteration in one
//! invocation. By convention the last parameter is the return destination.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::memo::{MemoCacheId, MemoTrusted, MemoWrite};
use crate::sim::{BoundaryError, TransitionLedger};
use crate::value::{Memory, SlotId, TypeTag, Value, ValueError};

/// Identifier of a registered enclave function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FunctionId(pub u16);

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Number of ids a default registry can hold.
pub const DEFAULT_REGISTRY_CAPACITY: usize = 256;

/// Failure raised by a translation function.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CallError {
    #[error(transparent)]
    Value(#[from] ValueError),
    #[error(transparent)]
    Boundary(#[from] BoundaryError),
    #[error("{0}")]
    Failed(String),
}

/// One parameter row: element `i` lives at `base + i * step` of `slot`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ArgRow {
    pub slot: SlotId,
    pub base: usize,
    pub step: usize,
}

/// Argument matrix handed to a translation function, indexed
/// `[parameter][iteration]`. Cells alias the client's memory directly.
pub struct Args<'m> {
    mem: &'m mut Memory,
    rows: &'m [ArgRow],
    iters: usize,
}

impl<'m> Args<'m> {
    pub(crate) fn new(mem: &'m mut Memory, rows: &'m [ArgRow], iters: usize) -> Self {
        Self { mem, rows, iters }
    }

    /// Iteration count.
    pub fn iters(&self) -> usize {
        self.iters
    }

    /// Parameter count.
    pub fn params(&self) -> usize {
        self.rows.len()
    }

    fn cell(&self, param: usize, iter: usize) -> Result<(SlotId, usize), CallError> {
        let row = self.rows.get(param).ok_or_else(|| CallError::Failed(format!("parameter {param} out of range")))?;
        Ok((row.slot, row.base + iter * row.step))
    }

    pub fn get(&self, param: usize, iter: usize) -> Result<Value, CallError> {
        let (slot, idx) = self.cell(param, iter)?;
        Ok(self.mem.get_at(slot, idx)?)
    }

    pub fn set(&mut self, param: usize, iter: usize, value: Value) -> Result<(), CallError> {
        let (slot, idx) = self.cell(param, iter)?;
        Ok(self.mem.set_at(slot, idx, value)?)
    }

    pub fn i64(&self, param: usize, iter: usize) -> Result<i64, CallError> {
        let (slot, idx) = self.cell(param, iter)?;
        Ok(self.mem.i64_at(slot, idx)?)
    }

    pub fn u64(&self, param: usize, iter: usize) -> Result<u64, CallError> {
        let (slot, idx) = self.cell(param, iter)?;
        Ok(self.mem.u64_at(slot, idx)?)
    }

    pub fn set_i64(&mut self, param: usize, iter: usize, v: i64) -> Result<(), CallError> {
        self.set(param, iter, Value::Int(v))
    }

    pub fn set_u64(&mut self, param: usize, iter: usize, v: u64) -> Result<(), CallError> {
        self.set(param, iter, Value::UInt(v))
    }

    /// The buffer behind `param` from the element used at `iter` onward,
    /// for functions that treat a list parameter as an output array.
    pub fn tail_mut(&mut self, param: usize, iter: usize) -> Result<&mut [Value], CallError> {
        let (slot, idx) = self.cell(param, iter)?;
        Ok(self.mem.values_mut_from(slot, idx)?)
    }

    pub fn tag(&self, param: usize) -> Result<TypeTag, CallError> {
        let (slot, _) = self.cell(param, 0)?;
        Ok(self.mem.tag(slot)?)
    }
}

/// Trusted-side context visible to translation functions.
pub struct TrustedCtx<'a, S> {
    state: &'a mut S,
    memo: &'a mut MemoTrusted,
    ledger: &'a TransitionLedger,
}

impl<'a, S> TrustedCtx<'a, S> {
    pub(crate) fn new(state: &'a mut S, memo: &'a mut MemoTrusted, ledger: &'a TransitionLedger) -> Self {
        Self { state, memo, ledger }
    }

    pub fn state(&self) -> &S {
        self.state
    }

    pub fn state_mut(&mut self) -> &mut S {
        self.state
    }

    /// Charges `ops` units of trusted-side work to the ledger.
    pub fn charge_local(&self, ops: u64) {
        self.ledger.charge_local(ops);
    }

    pub fn ledger(&self) -> &TransitionLedger {
        self.ledger
    }

    /// Inserts (or replaces) a memoized result, keeping the trusted hash in
    /// step.
    pub fn memo_insert(&mut self, cache: MemoCacheId, key: Vec<u8>, value: Value) -> Result<(), CallError> {
        self.ledger.charge_local(1);
        self.memo.insert(cache, key, value).map_err(|e| CallError::Failed(e.to_string()))
    }

    /// Updates or invalidates a memoized result after a mutating call.
    pub fn memo_on_write(&mut self, cache: MemoCacheId, key: &[u8], write: MemoWrite) -> Result<(), CallError> {
        self.ledger.charge_local(1);
        self.memo.on_write(cache, key, write).map_err(|e| CallError::Failed(e.to_string()))
    }

    pub fn memo(&mut self) -> &mut MemoTrusted {
        self.memo
    }
}

/// Adapter from the generic argument matrix to a concrete enclave function.
pub type TranslationFn<S> = Arc<dyn Fn(&mut TrustedCtx<'_, S>, &mut Args<'_>) -> Result<(), CallError> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("function id {0} already registered")]
    Duplicate(FunctionId),
    #[error("function id {id} exceeds registry capacity {capacity}")]
    OutOfRange { id: FunctionId, capacity: usize },
    #[error("function id {0} is not registered")]
    Unregistered(FunctionId),
    #[error("function id {0} must take at least one parameter")]
    ZeroArity(FunctionId),
    #[error("registry is frozen while a worker is attached")]
    Frozen,
}

struct Registered<S> {
    func: TranslationFn<S>,
    arity: usize,
}

impl<S> Clone for Registered<S> {
    fn clone(&self) -> Self {
        Self { func: Arc::clone(&self.func), arity: self.arity }
    }
}

/// Table from function ids to translation functions and their arity.
pub struct FunctionRegistry<S> {
    table: Vec<Option<Registered<S>>>,
}

impl<S> Default for FunctionRegistry<S> {
    fn default() -> Self {
        Self::with_capacity(DEFAULT_REGISTRY_CAPACITY)
    }
}

impl<S> fmt::Debug for FunctionRegistry<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FunctionRegistry")
            .field("capacity", &self.table.len())
            .field("registered", &self.table.iter().flatten().count())
            .finish()
    }
}

impl<S> FunctionRegistry<S> {
    pub fn with_capacity(capacity: usize) -> Self {
        Self { table: (0..capacity).map(|_| None).collect() }
    }

    pub fn capacity(&self) -> usize {
        self.table.len()
    }

    pub fn register<F>(&mut self, id: FunctionId, arity: usize, func: F) -> Result<(), RegistryError>
    where
        F: Fn(&mut TrustedCtx<'_, S>, &mut Args<'_>) -> Result<(), CallError> + Send + Sync + 'static,
    {
        self.register_arc(id, arity, Arc::new(func))
    }

    pub fn register_arc(&mut self, id: FunctionId, arity: usize, func: TranslationFn<S>) -> Result<(), RegistryError> {
        let capacity = self.table.len();
        let entry = self.table.get_mut(id.0 as usize).ok_or(RegistryError::OutOfRange { id, capacity })?;
        if entry.is_some() {
            return Err(RegistryError::Duplicate(id));
        }
        if arity == 0 {
            return Err(RegistryError::ZeroArity(id));
        }
        *entry = Some(Registered { func, arity });
        Ok(())
    }

    pub fn lookup(&self, id: FunctionId) -> Result<(&TranslationFn<S>, usize), RegistryError> {
        match self.table.get(id.0 as usize) {
            Some(Some(r)) => Ok((&r.func, r.arity)),
            _ => Err(RegistryError::Unregistered(id)),
        }
    }

    pub fn arity(&self, id: FunctionId) -> Option<usize> {
        self.lookup(id).ok().map(|(_, a)| a)
    }

    /// Arity table for client-side validation.
    pub fn signatures(&self) -> Signatures {
        Signatures(self.table.iter().map(|e| e.as_ref().map(|r| r.arity)).collect())
    }
}

/// Read-only arity table, shareable with untrusted code.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Signatures(Arc<[Option<usize>]>);

impl Signatures {
    pub fn arity(&self, id: FunctionId) -> Option<usize> {
        self.0.get(id.0 as usize).copied().flatten()
    }

    /// Builds a table from `(id, arity)` pairs.
    pub fn from_pairs(pairs: &[(FunctionId, usize)]) -> Self {
        let len = pairs.iter().map(|(id, _)| id.0 as usize + 1).max().unwrap_or(0);
        let mut table = vec![None; len];
        for &(id, arity) in pairs {
            table[id.0 as usize] = Some(arity);
        }
        Signatures(table.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noop(_: &mut TrustedCtx<'_, ()>, _: &mut Args<'_>) -> Result<(), CallError> {
        Ok(())
    }

    #[test]
    fn register_then_lookup() {
        let mut reg = FunctionRegistry::<()>::default();
        reg.register(FunctionId(1), 1, noop).unwrap();
        let (_, arity) = reg.lookup(FunctionId(1)).unwrap();
        assert_eq!(arity, 1);
        assert_eq!(reg.signatures().arity(FunctionId(1)), Some(1));
    }

    #[test]
    fn duplicate_registration_fails() {
        let mut reg = FunctionRegistry::<()>::default();
        reg.register(FunctionId(4), 2, noop).unwrap();
        assert_eq!(reg.register(FunctionId(4), 2, noop), Err(RegistryError::Duplicate(FunctionId(4))));
    }

    #[test]
    fn sixty_four_ids() {
        let mut reg = FunctionRegistry::<()>::default();
        for id in 0..64u16 {
            reg.register(FunctionId(id), 1 + id as usize % 3, noop).unwrap();
        }
        for id in 0..64u16 {
            assert_eq!(reg.arity(FunctionId(id)), Some(1 + id as usize % 3));
        }
        assert!(matches!(reg.lookup(FunctionId(64)), Err(RegistryError::Unregistered(_))));
    }

    #[test]
    fn capacity_and_arity_limits() {
        let mut reg = FunctionRegistry::<()>::with_capacity(8);
        assert!(matches!(reg.register(FunctionId(8), 1, noop), Err(RegistryError::OutOfRange { .. })));
        assert_eq!(reg.register(FunctionId(0), 0, noop), Err(RegistryError::ZeroArity(FunctionId(0))));
    }
}
