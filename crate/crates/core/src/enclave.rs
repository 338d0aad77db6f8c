// SPDX-License-Identifier: Apache-2.0

//! The simulated enclave: trusted state, registered functions, memo caches
//! and the worker thread that serves switchless calls.

use std::sync::Arc;
use std::thread::{self, JoinHandle};

use crate::channel::{execute_job, worker_loop, CallFrame, ChannelError, Client, JobKind, SharedRegion};
use crate::graph::ExecutionGraph;
use crate::interp::{ExecStats, InterpConfig};
use crate::memo::{EvictionPolicy, MemoCache, MemoCacheId, VerificationSchedule, VerifyLog};
use crate::registry::{Args, CallError, FunctionId, FunctionRegistry, RegistryError, Signatures, TrustedCtx};
use crate::sim::{BoundaryError, CostModel, TransitionLedger, TrustedRegion, TrustedScope};
use crate::value::Memory;

struct Worker<S> {
    region: Arc<SharedRegion>,
    handle: JoinHandle<TrustedRegion<S>>,
}

/// Trusted state `S` behind a simulated boundary.
pub struct Enclave<S> {
    ledger: Arc<TransitionLedger>,
    trusted: Option<TrustedRegion<S>>,
    registry: Arc<FunctionRegistry<S>>,
    worker: Option<Worker<S>>,
    interp: InterpConfig,
    verify_log: VerifyLog,
}

impl<S> std::fmt::Debug for Enclave<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Enclave")
            .field("ledger", &self.ledger.snapshot())
            .field("registry", &self.registry)
            .field("worker_running", &self.worker.is_some())
            .finish()
    }
}

impl<S: Send + 'static> Enclave<S> {
    pub fn new(state: S, cost: CostModel) -> Self {
        Self::with_registry(state, cost, FunctionRegistry::default())
    }

    pub fn with_registry(state: S, cost: CostModel, registry: FunctionRegistry<S>) -> Self {
        let trusted = TrustedRegion::new(state);
        let verify_log = trusted.memo.log();
        Self {
            ledger: Arc::new(TransitionLedger::new(cost)),
            trusted: Some(trusted),
            registry: Arc::new(registry),
            worker: None,
            interp: InterpConfig::default(),
            verify_log,
        }
    }

    pub fn ledger(&self) -> &Arc<TransitionLedger> {
        &self.ledger
    }

    pub fn interp_config(&self) -> InterpConfig {
        self.interp
    }

    pub fn set_interp_config(&mut self, cfg: InterpConfig) {
        self.interp = cfg;
    }

    /// Registers a function. Fails while a worker is running.
    pub fn register<F>(&mut self, id: FunctionId, arity: usize, func: F) -> Result<(), RegistryError>
    where
        F: Fn(&mut TrustedCtx<'_, S>, &mut Args<'_>) -> Result<(), CallError> + Send + Sync + 'static,
    {
        Arc::get_mut(&mut self.registry).ok_or(RegistryError::Frozen)?.register(id, arity, func)
    }

    pub fn registry(&self) -> &FunctionRegistry<S> {
        &self.registry
    }

    pub fn signatures(&self) -> Signatures {
        self.registry.signatures()
    }

    fn trusted_mut(&mut self) -> Result<&mut TrustedRegion<S>, BoundaryError> {
        self.trusted.as_mut().ok_or(BoundaryError::WorkerOwnsState)
    }

    /// Creates a memo cache for `function_id`. Only possible while no worker
    /// is running.
    pub fn register_memo_cache(
        &mut self,
        function_id: FunctionId,
        capacity: usize,
        policy: EvictionPolicy,
    ) -> Result<(MemoCacheId, Arc<MemoCache>), ChannelError> {
        let cache = Arc::new(MemoCache::new(function_id, capacity, policy)?);
        let id = self.trusted_mut()?.memo.register(Arc::clone(&cache));
        Ok((id, cache))
    }

    pub fn set_verification(&mut self, schedule: VerificationSchedule) -> Result<(), ChannelError> {
        self.trusted_mut()?.memo.set_schedule(schedule)?;
        Ok(())
    }

    /// Verification reports produced so far.
    pub fn verify_log(&self) -> &VerifyLog {
        &self.verify_log
    }

    /// Runs `body` inside the enclave through one ordinary ecall.
    pub fn simulate_ecall<R>(&mut self, body: impl FnOnce(&mut TrustedCtx<'_, S>) -> R) -> Result<R, BoundaryError> {
        let _scope = TrustedScope::enter()?;
        let ledger = Arc::clone(&self.ledger);
        let trusted = self.trusted_mut()?;
        ledger.record_ecall();
        trusted.claim();
        let (state, memo) = trusted.parts_mut();
        let r = body(&mut TrustedCtx::new(state, memo, &ledger));
        trusted.release();
        Ok(r)
    }

    fn ecall_job(&mut self, kind: JobKind, mem: &mut Memory) -> Result<ExecStats, ChannelError> {
        let reg = Arc::clone(&self.registry);
        let cfg = self.interp;
        self.simulate_ecall(|ctx| execute_job(&kind, mem, ctx, &reg, &cfg))?
    }

    /// Executes a single call frame through an ecall.
    pub fn ecall_frame(&mut self, frame: &CallFrame, mem: &mut Memory) -> Result<ExecStats, ChannelError> {
        self.ecall_job(JobKind::Call(frame.clone()), mem)
    }

    /// Executes a validated graph through an ecall.
    pub fn ecall_graph(&mut self, graph: Arc<ExecutionGraph>, mem: &mut Memory) -> Result<ExecStats, ChannelError> {
        self.ecall_job(JobKind::Graph(graph), mem)
    }

    pub fn worker_running(&self) -> bool {
        self.worker.is_some()
    }

    /// Starts the worker on `region`. The worker enters the enclave once,
    /// which is counted as one ecall, and owns the trusted state until
    /// [`Enclave::stop_worker`]. The registry is frozen meanwhile.
    pub fn start_worker(&mut self, region: &Arc<SharedRegion>) -> Result<Client, ChannelError> {
        if self.worker.is_some() {
            return Err(ChannelError::AlreadyRunning);
        }
        if crate::sim::in_trusted_context() {
            return Err(BoundaryError::NestedEcall.into());
        }
        region.attach()?;
        let trusted = self.trusted.take().expect("trusted region is home while no worker runs");
        let caches = trusted.memo.handles();
        let ledger = Arc::clone(&self.ledger);
        ledger.record_ecall();
        let (r, reg, l, cfg) = (Arc::clone(region), Arc::clone(&self.registry), Arc::clone(&ledger), self.interp);
        let handle = thread::Builder::new()
            .name("enclave-worker".into())
            .spawn(move || worker_loop(r, trusted, reg, l, cfg))
            .expect("spawn worker thread");
        self.worker = Some(Worker { region: Arc::clone(region), handle });
        Ok(Client::new(Arc::clone(region), ledger, self.registry.signatures(), caches))
    }

    /// Requests shutdown and joins the worker. A job already in the slot is
    /// completed first.
    pub fn stop_worker(&mut self) -> Result<(), ChannelError> {
        let worker = self.worker.take().ok_or(ChannelError::NoWorker)?;
        worker.region.request_shutdown();
        let joined = worker.handle.join();
        worker.region.detach();
        match joined {
            Ok(trusted) => {
                self.trusted = Some(trusted);
                Ok(())
            }
            Err(_) => Err(ChannelError::WorkerPanicked("worker thread died".into())),
        }
    }

    /// Stops any worker and returns the trusted state.
    pub fn into_state(mut self) -> Result<S, ChannelError> {
        if self.worker.is_some() {
            self.stop_worker()?;
        }
        let trusted = self.trusted.take().ok_or(BoundaryError::WorkerOwnsState)?;
        Ok(trusted.into_state())
    }
}

impl<S> Drop for Enclave<S> {
    fn drop(&mut self) {
        if let Some(worker) = self.worker.take() {
            worker.region.request_shutdown();
            let _ = worker.handle.join();
            worker.region.detach();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::CacheMode;

    fn enclave() -> Enclave<u64> {
        Enclave::new(0, CostModel::warm())
    }

    #[test]
    fn ecall_counts_and_charges() {
        let mut e = enclave();
        for _ in 0..10 {
            e.simulate_ecall(|ctx| *ctx.state_mut() += 1).unwrap();
        }
        let s = e.ledger().snapshot();
        assert_eq!(s.ecall_count, 10);
        assert_eq!(s.modeled_cycles, 10 * 12180);
        assert_eq!(e.into_state().unwrap(), 10);
    }

    #[test]
    fn nested_ecall_is_rejected() {
        let mut outer = enclave();
        let mut inner = enclave();
        let r = outer.simulate_ecall(|_| inner.simulate_ecall(|_| ()).unwrap_err()).unwrap();
        assert_eq!(r, BoundaryError::NestedEcall);
        assert_eq!(inner.ledger().snapshot().ecall_count, 0);
    }

    #[test]
    fn start_stop() {
        let mut e = Enclave::new(0u64, CostModel::for_mode(CacheMode::Cold));
        let region = SharedRegion::new();
        let client = e.start_worker(&region).unwrap();
        assert_eq!(e.start_worker(&region).unwrap_err(), ChannelError::AlreadyRunning);
        assert_eq!(e.simulate_ecall(|_| ()).unwrap_err(), BoundaryError::WorkerOwnsState);
        assert_eq!(e.register(FunctionId(0), 1, |_, _| Ok(())), Err(RegistryError::Frozen));
        e.stop_worker().unwrap();
        assert_eq!(e.stop_worker(), Err(ChannelError::NoWorker));
        let s = e.ledger().snapshot();
        assert_eq!((s.ecall_count, s.switchless_job_count), (1, 0));
        client.close().unwrap();
        e.register(FunctionId(0), 1, |_, _| Ok(())).unwrap();
    }

    #[test]
    fn region_cannot_serve_two_enclaves() {
        let mut a = enclave();
        let mut b = enclave();
        let region = SharedRegion::new();
        let _c = a.start_worker(&region).unwrap();
        assert_eq!(b.start_worker(&region).unwrap_err(), ChannelError::AlreadyAttached);
        a.stop_worker().unwrap();
        let _c = b.start_worker(&region).unwrap();
    }
}
