// SPDX-License-Identifier: Apache-2.0

//! Simulated trusted/untrusted boundary.
//!
//! Nothing here is hardware-enforced. Crossing costs are modeled integers
//! charged to a [`TransitionLedger`], and trusted state is guarded by an
//! ownership token plus a thread-local "inside the enclave" marker that is
//! set by [`crate::Enclave::simulate_ecall`] and by the worker thread.

use std::cell::Cell;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread::{self, ThreadId};

use thiserror::Error;

use crate::memo::MemoTrusted;

/// Cache state assumed by the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CacheMode {
    Warm,
    Cold,
}

impl fmt::Display for CacheMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CacheMode::Warm => "warm",
            CacheMode::Cold => "cold",
        })
    }
}

impl FromStr for CacheMode {
    type Err = CostModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "warm" => Ok(CacheMode::Warm),
            "cold" => Ok(CacheMode::Cold),
            other => Err(CostModelError::BadValue { key: "cache_mode".into(), value: other.into() }),
        }
    }
}

/// Switchless handoff overhead, warm cache.
pub const SWITCHLESS_WARM: u64 = 600;
/// Switchless handoff overhead, cold cache.
pub const SWITCHLESS_COLD: u64 = 1400;
/// ECALL cost, warm cache: 20.3 x the switchless overhead.
pub const ECALL_WARM: u64 = 12_180;
/// ECALL cost, cold cache: 18.6 x the switchless overhead.
pub const ECALL_COLD: u64 = 26_040;
/// Cost of one unit of trusted-side bookkeeping work.
pub const LOCAL_OP_DEFAULT: u64 = 30;

/// Modeled cycle costs for every kind of chargeable event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub ecall_cost: u64,
    pub switchless_overhead: u64,
    pub cache_mode: CacheMode,
    pub local_op_cost: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self::warm()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CostModelError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown cost model key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}")]
    BadValue { key: String, value: String },
    #[error("switchless overhead {switchless} must be below ecall cost {ecall}")]
    Ordering { switchless: u64, ecall: u64 },
    #[error("reading cost model: {0}")]
    Io(String),
}

impl CostModel {
    pub fn warm() -> Self {
        Self {
            ecall_cost: ECALL_WARM,
            switchless_overhead: SWITCHLESS_WARM,
            cache_mode: CacheMode::Warm,
            local_op_cost: LOCAL_OP_DEFAULT,
        }
    }

    pub fn cold() -> Self {
        Self {
            ecall_cost: ECALL_COLD,
            switchless_overhead: SWITCHLESS_COLD,
            cache_mode: CacheMode::Cold,
            local_op_cost: LOCAL_OP_DEFAULT,
        }
    }

    pub fn for_mode(mode: CacheMode) -> Self {
        match mode {
            CacheMode::Warm => Self::warm(),
            CacheMode::Cold => Self::cold(),
        }
    }

    pub fn validate(&self) -> Result<(), CostModelError> {
        if self.switchless_overhead >= self.ecall_cost {
            return Err(CostModelError::Ordering { switchless: self.switchless_overhead, ecall: self.ecall_cost });
        }
        Ok(())
    }

    /// Parses `key=value` lines. Keys not given default to the values of the
    /// selected `cache_mode` (warm when absent). Blank lines and `#` comments
    /// are ignored.
    pub fn parse(text: &str) -> Result<Self, CostModelError> {
        let mut pairs = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| CostModelError::Syntax { line: idx + 1, text: raw.to_string() })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }

        let mode = match pairs.iter().rev().find(|(k, _)| k == "cache_mode") {
            Some((_, v)) => v.parse()?,
            None => CacheMode::Warm,
        };
        let mut model = Self::for_mode(mode);
        for (k, v) in pairs {
            let cycles = || v.parse::<u64>().map_err(|_| CostModelError::BadValue { key: k.clone(), value: v.clone() });
            match k.as_str() {
                "ecall_cost" => model.ecall_cost = cycles()?,
                "switchless_overhead" => model.switchless_overhead = cycles()?,
                "local_op_cost" => model.local_op_cost = cycles()?,
                "cache_mode" => {}
                _ => return Err(CostModelError::UnknownKey(k)),
            }
        }
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CostModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| CostModelError::Io(e.to_string()))?;
        Self::parse(&text)
    }

    /// Cycles implied by a set of recorded events.
    pub fn cycles_for(&self, ecalls: u64, jobs: u64, local_ops: u64) -> u64 {
        ecalls * self.ecall_cost + jobs * self.switchless_overhead + local_ops * self.local_op_cost
    }
}

impl fmt::Display for CostModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ecall_cost={}", self.ecall_cost)?;
        writeln!(f, "switchless_overhead={}", self.switchless_overhead)?;
        writeln!(f, "cache_mode={}", self.cache_mode)?;
        writeln!(f, "local_op_cost={}", self.local_op_cost)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("cannot reset the ledger while {0} job(s) are in flight")]
    InFlight(u64),
}

/// Counters for every boundary crossing and worker poll.
///
/// Updated from the client and worker threads; every counter is an
/// independent atomic.
#[derive(Debug)]
pub struct TransitionLedger {
    cost: CostModel,
    ecalls: AtomicU64,
    jobs: AtomicU64,
    polls: AtomicU64,
    local_ops: AtomicU64,
    cycles: AtomicU64,
    in_flight: AtomicU64,
}

impl TransitionLedger {
    pub fn new(cost: CostModel) -> Self {
        Self {
            cost,
            ecalls: AtomicU64::new(0),
            jobs: AtomicU64::new(0),
            polls: AtomicU64::new(0),
            local_ops: AtomicU64::new(0),
            cycles: AtomicU64::new(0),
            in_flight: AtomicU64::new(0),
        }
    }

    pub fn cost_model(&self) -> &CostModel {
        &self.cost
    }

    pub fn record_ecall(&self) {
        self.ecalls.fetch_add(1, Ordering::Relaxed);
        self.cycles.fetch_add(self.cost.ecall_cost, Ordering::Relaxed);
    }

    pub fn record_switchless_job(&self) {
        self.jobs.fetch_add(1, Ordering::Relaxed);
        self.cycles.fetch_add(self.cost.switchless_overhead, Ordering::Relaxed);
    }

    pub fn record_poll(&self) {
        self.polls.fetch_add(1, Ordering::Relaxed);
    }

    pub fn charge_local(&self, ops: u64) {
        if ops == 0 {
            return;
        }
        self.local_ops.fetch_add(ops, Ordering::Relaxed);
        self.cycles.fetch_add(ops * self.cost.local_op_cost, Ordering::Relaxed);
    }

    pub(crate) fn job_started(&self) {
        self.in_flight.fetch_add(1, Ordering::AcqRel);
    }

    pub(crate) fn job_finished(&self) {
        self.in_flight.fetch_sub(1, Ordering::AcqRel);
    }

    pub fn in_flight(&self) -> u64 {
        self.in_flight.load(Ordering::Acquire)
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            ecall_count: self.ecalls.load(Ordering::Acquire),
            switchless_job_count: self.jobs.load(Ordering::Acquire),
            worker_poll_iterations: self.polls.load(Ordering::Acquire),
            local_ops: self.local_ops.load(Ordering::Acquire),
            modeled_cycles: self.cycles.load(Ordering::Acquire),
        }
    }

    pub fn reset(&self) -> Result<(), LedgerError> {
        let pending = self.in_flight();
        if pending > 0 {
            return Err(LedgerError::InFlight(pending));
        }
        for c in [&self.ecalls, &self.jobs, &self.polls, &self.local_ops, &self.cycles] {
            c.store(0, Ordering::Release);
        }
        Ok(())
    }
}

/// Immutable copy of the ledger counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LedgerSnapshot {
    pub ecall_count: u64,
    pub switchless_job_count: u64,
    pub worker_poll_iterations: u64,
    pub local_ops: u64,
    pub modeled_cycles: u64,
}

impl LedgerSnapshot {
    /// Boundary transitions of either kind.
    pub fn transitions(&self) -> u64 {
        self.ecall_count + self.switchless_job_count
    }

    /// Counter-wise difference `self - earlier`.
    pub fn since(&self, earlier: &LedgerSnapshot) -> LedgerSnapshot {
        LedgerSnapshot {
            ecall_count: self.ecall_count - earlier.ecall_count,
            switchless_job_count: self.switchless_job_count - earlier.switchless_job_count,
            worker_poll_iterations: self.worker_poll_iterations - earlier.worker_poll_iterations,
            local_ops: self.local_ops - earlier.local_ops,
            modeled_cycles: self.modeled_cycles - earlier.modeled_cycles,
        }
    }

    /// Recomputes the cycle total from the counters.
    pub fn expected_cycles(&self, cost: &CostModel) -> u64 {
        cost.cycles_for(self.ecall_count, self.switchless_job_count, self.local_ops)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BoundaryError {
    #[error("ecall issued from inside trusted context")]
    NestedEcall,
    #[error("trusted state accessed outside trusted context")]
    OutsideTrustedContext,
    #[error("trusted state is owned by the running worker")]
    WorkerOwnsState,
}

thread_local! {
    static IN_TRUSTED: Cell<bool> = const { Cell::new(false) };
}

/// True while the current thread executes inside the simulated enclave.
pub fn in_trusted_context() -> bool {
    IN_TRUSTED.with(Cell::get)
}

/// Marks the current thread as inside the enclave until dropped.
#[derive(Debug)]
pub(crate) struct TrustedScope {
    _not_send: std::marker::PhantomData<*const ()>,
}

impl TrustedScope {
    pub(crate) fn enter() -> Result<Self, BoundaryError> {
        if IN_TRUSTED.with(|c| c.replace(true)) {
            return Err(BoundaryError::NestedEcall);
        }
        Ok(Self { _not_send: std::marker::PhantomData })
    }
}

impl Drop for TrustedScope {
    fn drop(&mut self) {
        IN_TRUSTED.with(|c| c.set(false));
    }
}

/// Trusted application state plus the library's own trusted bookkeeping.
#[derive(Debug)]
pub struct TrustedRegion<S> {
    owner: Option<ThreadId>,
    state: S,
    pub(crate) memo: MemoTrusted,
}

impl<S> TrustedRegion<S> {
    pub fn new(state: S) -> Self {
        Self { owner: None, state, memo: MemoTrusted::default() }
    }

    pub(crate) fn claim(&mut self) {
        self.owner = Some(thread::current().id());
    }

    pub(crate) fn release(&mut self) {
        self.owner = None;
    }

    /// Checks that the caller is the thread currently inside the enclave.
    pub fn check_access(&self) -> Result<(), BoundaryError> {
        if in_trusted_context() && self.owner == Some(thread::current().id()) {
            Ok(())
        } else {
            Err(BoundaryError::OutsideTrustedContext)
        }
    }

    pub fn try_state(&self) -> Result<&S, BoundaryError> {
        self.check_access().map(|_| &self.state)
    }

    pub fn try_state_mut(&mut self) -> Result<&mut S, BoundaryError> {
        self.check_access()?;
        Ok(&mut self.state)
    }

    pub fn state(&self) -> &S {
        debug_assert!(self.check_access().is_ok(), "trusted state read outside trusted context");
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut S {
        debug_assert!(self.check_access().is_ok(), "trusted state written outside trusted context");
        &mut self.state
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut S, &mut MemoTrusted) {
        debug_assert!(self.check_access().is_ok(), "trusted state used outside trusted context");
        (&mut self.state, &mut self.memo)
    }

    /// Tears the region down, handing back the application state.
    pub fn into_state(self) -> S {
        self.state
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_costs_follow_the_ratios() {
        assert_eq!(ECALL_WARM, (20.3f64 * 600.0).round() as u64);
        assert_eq!(ECALL_COLD, (18.6f64 * 1400.0).round() as u64);
        CostModel::warm().validate().unwrap();
        CostModel::cold().validate().unwrap();
    }

    #[test]
    fn parse_cost_model_file() {
        let m = CostModel::parse("# cold box\ncache_mode=cold\nlocal_op_cost = 5\n").unwrap();
        assert_eq!(m.cache_mode, CacheMode::Cold);
        assert_eq!(m.ecall_cost, ECALL_COLD);
        assert_eq!(m.local_op_cost, 5);
        assert_eq!(CostModel::parse(&CostModel::warm().to_string()).unwrap(), CostModel::warm());
    }

    #[test]
    fn parse_rejects_bad_input() {
        assert!(matches!(CostModel::parse("ecall_cost"), Err(CostModelError::Syntax { line: 1, .. })));
        assert!(matches!(CostModel::parse("bogus=1"), Err(CostModelError::UnknownKey(_))));
        assert!(matches!(CostModel::parse("ecall_cost=-1"), Err(CostModelError::BadValue { .. })));
        assert!(matches!(CostModel::parse("cache_mode=lukewarm"), Err(CostModelError::BadValue { .. })));
        assert!(matches!(
            CostModel::parse("ecall_cost=100\nswitchless_overhead=100"),
            Err(CostModelError::Ordering { .. })
        ));
    }

    #[test]
    fn fresh_snapshot_is_zero() {
        let ledger = TransitionLedger::new(CostModel::warm());
        assert_eq!(ledger.snapshot(), LedgerSnapshot::default());
    }

    #[test]
    fn snapshot_is_a_copy() {
        let ledger = TransitionLedger::new(CostModel::warm());
        let before = ledger.snapshot();
        ledger.record_switchless_job();
        assert_eq!(before.switchless_job_count, 0);
        assert_eq!(ledger.snapshot().switchless_job_count, 1);
    }

    #[test]
    fn snapshot_diff_counts_jobs() {
        let ledger = TransitionLedger::new(CostModel::warm());
        ledger.record_ecall();
        let a = ledger.snapshot();
        for _ in 0..17 {
            ledger.record_switchless_job();
        }
        let d = ledger.snapshot().since(&a);
        assert_eq!(d.switchless_job_count, 17);
        assert_eq!(d.ecall_count, 0);
        assert_eq!(d.modeled_cycles, 17 * SWITCHLESS_WARM);
    }

    #[test]
    fn reset_zeroes_and_is_idempotent() {
        let ledger = TransitionLedger::new(CostModel::warm());
        ledger.reset().unwrap();
        assert_eq!(ledger.snapshot(), LedgerSnapshot::default());
        for _ in 0..5 {
            ledger.record_ecall();
        }
        ledger.reset().unwrap();
        assert_eq!(ledger.snapshot(), LedgerSnapshot::default());

        ledger.record_switchless_job();
        let fresh = TransitionLedger::new(CostModel::warm());
        fresh.record_switchless_job();
        assert_eq!(ledger.snapshot(), fresh.snapshot());
    }

    #[test]
    fn reset_refused_while_in_flight() {
        let ledger = TransitionLedger::new(CostModel::warm());
        ledger.job_started();
        assert_eq!(ledger.reset(), Err(LedgerError::InFlight(1)));
        ledger.job_finished();
        ledger.reset().unwrap();
    }

    #[test]
    fn accounting_identity_and_mode_swap() {
        let run = |cost: CostModel| {
            let ledger = TransitionLedger::new(cost);
            for i in 0..40u64 {
                match i % 3 {
                    0 => ledger.record_ecall(),
                    1 => ledger.record_switchless_job(),
                    _ => ledger.charge_local(i),
                }
            }
            let s = ledger.snapshot();
            assert_eq!(s.modeled_cycles, s.expected_cycles(&cost));
            s
        };
        let warm = run(CostModel::warm());
        let cold = run(CostModel::cold());
        assert_eq!(
            (warm.ecall_count, warm.switchless_job_count, warm.local_ops),
            (cold.ecall_count, cold.switchless_job_count, cold.local_ops)
        );
        assert_ne!(warm.modeled_cycles, cold.modeled_cycles);
    }

    #[test]
    fn region_access_outside_context_is_refused() {
        let mut region = TrustedRegion::new(5u32);
        assert_eq!(region.try_state(), Err(BoundaryError::OutsideTrustedContext));
        let scope = TrustedScope::enter().unwrap();
        region.claim();
        assert_eq!(*region.try_state().unwrap(), 5);
        assert_eq!(TrustedScope::enter().unwrap_err(), BoundaryError::NestedEcall);
        drop(scope);
        assert!(region.try_state_mut().is_err());
    }

    #[test]
    fn region_owned_by_other_thread_is_refused() {
        let mut region = TrustedRegion::new(0u8);
        std::thread::scope(|s| {
            s.spawn(|| {
                let _scope = TrustedScope::enter().unwrap();
                region.claim();
            });
        });
        let _scope = TrustedScope::enter().unwrap();
        assert_eq!(region.try_state(), Err(BoundaryError::OutsideTrustedContext));
    }
}
