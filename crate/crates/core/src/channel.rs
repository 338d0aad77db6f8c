// SPDX-License-Identifier: Apache-2.0

//! Switchless call channel.
//!
//! A [`SharedRegion`] is a single job cell in untrusted memory guarded by a
//! spinlock. The enclave worker busy-polls the cell; a [`Client`] writes one
//! job under the lock and spins on the completion flag until the worker has
//! put the result back. A job is either a single [`CallFrame`] or a whole
//! [`ExecutionGraph`]; either way it costs one switchless transition.
//!
//! The client's [`Memory`] travels with the job and comes back with the
//! result, so the worker has exclusive use of the argument buffers while the
//! call is in flight.

use std::cell::UnsafeCell;
use std::mem;
use std::ops::{Deref, DerefMut};
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;

use thiserror::Error;

use crate::graph::{BuildError, ExecutionGraph, GraphBuilder, ValidationReport};
use crate::interp::{execute_graph, run_call, ExecError, ExecErrorKind, ExecStats, InterpConfig};
use crate::memo::{fingerprint, MemoCache, MemoCacheId, MemoError};
use crate::predicate::Predicate;
use crate::registry::{FunctionId, FunctionRegistry, Signatures, TrustedCtx};
use crate::sim::{BoundaryError, TransitionLedger, TrustedRegion, TrustedScope};
use crate::value::{Memory, ParamDesc, SlotId, Value};

/// Spins between forced yields while busy-waiting.
pub const YIELD_EVERY: u32 = 64;

/// One busy-wait step: a pause hint, and every [`YIELD_EVERY`] steps a yield
/// so that the other side can run on a machine with few cores.
#[inline]
pub fn relax(spins: &mut u32) {
    std::hint::spin_loop();
    *spins = spins.wrapping_add(1);
    if (*spins).is_multiple_of(YIELD_EVERY) {
        thread::yield_now();
    }
}

/// Test-and-test-and-set spinlock. Locking has acquire semantics and
/// unlocking has release semantics.
#[derive(Debug, Default)]
pub struct SpinLock<T> {
    locked: AtomicBool,
    data: UnsafeCell<T>,
}

// SAFETY: access to `data` is serialized by `locked`.
unsafe impl<T: Send> Sync for SpinLock<T> {}

impl<T> SpinLock<T> {
    pub fn new(value: T) -> Self {
        Self { locked: AtomicBool::new(false), data: UnsafeCell::new(value) }
    }

    pub fn lock(&self) -> SpinGuard<'_, T> {
        let mut spins = 0;
        while self.locked.compare_exchange_weak(false, true, Ordering::Acquire, Ordering::Relaxed).is_err() {
            while self.locked.load(Ordering::Relaxed) {
                relax(&mut spins);
            }
        }
        SpinGuard { lock: self }
    }

    pub fn try_lock(&self) -> Option<SpinGuard<'_, T>> {
        self.locked
            .compare_exchange(false, true, Ordering::Acquire, Ordering::Relaxed)
            .ok()
            .map(|_| SpinGuard { lock: self })
    }
}

pub struct SpinGuard<'a, T> {
    lock: &'a SpinLock<T>,
}

impl<T> Deref for SpinGuard<'_, T> {
    type Target = T;

    fn deref(&self) -> &T {
        // SAFETY: the guard holds the lock.
        unsafe { &*self.lock.data.get() }
    }
}

impl<T> DerefMut for SpinGuard<'_, T> {
    fn deref_mut(&mut self) -> &mut T {
        // SAFETY: the guard holds the lock exclusively.
        unsafe { &mut *self.lock.data.get() }
    }
}

impl<T> Drop for SpinGuard<'_, T> {
    fn drop(&mut self) {
        self.lock.locked.store(false, Ordering::Release);
    }
}

/// One switchless invocation. The last argument receives the result.
#[derive(Debug, Clone, PartialEq)]
pub struct CallFrame {
    pub function_id: FunctionId,
    pub args: Vec<ParamDesc>,
    /// Cache that the worker fills with the result.
    pub memo: Option<MemoCacheId>,
}

impl CallFrame {
    pub fn new(function_id: FunctionId, args: Vec<ParamDesc>) -> Self {
        Self { function_id, args, memo: None }
    }

    pub fn memoized(mut self, cache: MemoCacheId) -> Self {
        self.memo = Some(cache);
        self
    }

    pub fn ret(&self) -> Option<&ParamDesc> {
        self.args.last()
    }

    pub fn inputs(&self) -> &[ParamDesc] {
        &self.args[..self.args.len().saturating_sub(1)]
    }

    /// Memo key for the frame's current inputs.
    pub fn key(&self, mem: &Memory) -> Result<Vec<u8>, crate::value::ValueError> {
        let values =
            self.inputs().iter().map(|p| mem.get_at(p.slot, p.element(0))).collect::<Result<Vec<Value>, _>>()?;
        Ok(fingerprint(&values))
    }
}

#[derive(Debug)]
pub(crate) enum JobKind {
    Call(CallFrame),
    Graph(Arc<ExecutionGraph>),
}

#[derive(Debug)]
pub(crate) struct Job {
    kind: JobKind,
    mem: Memory,
}

#[derive(Debug)]
pub(crate) struct JobResult {
    mem: Memory,
    status: Result<ExecStats, ChannelError>,
}

#[derive(Debug, Default)]
struct Slot {
    job: Option<Job>,
    result: Option<JobResult>,
    shutdown: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("no worker is attached to the shared region")]
    NoWorker,
    #[error("a worker is already running")]
    AlreadyRunning,
    #[error("the shared region already has a worker attached")]
    AlreadyAttached,
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("graph failed validation: {0}")]
    Invalid(ValidationReport),
    #[error("cannot append to bundle: {0}")]
    Build(#[from] BuildError),
    #[error("a bundle is already open")]
    NestedBundle,
    #[error("no bundle is open")]
    NoBundle,
    #[error("client closed with an open bundle")]
    BuilderLeak,
    #[error("frame has no memo cache")]
    NotMemoized,
    #[error(transparent)]
    Memo(#[from] MemoError),
    #[error("worker halted after an integrity violation")]
    Halted,
    #[error("worker panicked: {0}")]
    WorkerPanicked(String),
    #[error(transparent)]
    Boundary(#[from] BoundaryError),
    #[error(transparent)]
    Value(#[from] crate::value::ValueError),
}

/// Untrusted communication cell shared by one client and one worker.
#[derive(Debug, Default)]
pub struct SharedRegion {
    slot: SpinLock<Slot>,
    done: AtomicBool,
    attached: AtomicBool,
    halted: AtomicBool,
    leaked_bundles: AtomicU64,
}

impl SharedRegion {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn is_attached(&self) -> bool {
        self.attached.load(Ordering::Acquire)
    }

    pub fn is_halted(&self) -> bool {
        self.halted.load(Ordering::Acquire)
    }

    /// Clients dropped while a bundle was open.
    pub fn leaked_bundles(&self) -> u64 {
        self.leaked_bundles.load(Ordering::Acquire)
    }

    pub(crate) fn attach(&self) -> Result<(), ChannelError> {
        self.attached
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .map(|_| ())
            .map_err(|_| ChannelError::AlreadyAttached)?;
        let mut s = self.slot.lock();
        s.shutdown = false;
        s.job = None;
        s.result = None;
        drop(s);
        self.halted.store(false, Ordering::Release);
        Ok(())
    }

    pub(crate) fn request_shutdown(&self) {
        self.slot.lock().shutdown = true;
    }

    pub(crate) fn detach(&self) {
        self.attached.store(false, Ordering::Release);
    }
}

/// Runs one job against trusted state. Shared by the worker and by
/// simulated ecalls.
pub(crate) fn execute_job<S>(
    kind: &JobKind,
    mem: &mut Memory,
    ctx: &mut TrustedCtx<'_, S>,
    reg: &FunctionRegistry<S>,
    cfg: &InterpConfig,
) -> Result<ExecStats, ChannelError> {
    match kind {
        JobKind::Call(frame) => run_frame(frame, mem, ctx, reg),
        JobKind::Graph(graph) => {
            let out = execute_graph(graph, ctx, reg, mem, cfg);
            out.result?;
            Ok(out.stats)
        }
    }
}

pub(crate) fn run_frame<S>(
    frame: &CallFrame,
    mem: &mut Memory,
    ctx: &mut TrustedCtx<'_, S>,
    reg: &FunctionRegistry<S>,
) -> Result<ExecStats, ChannelError> {
    let fail = |kind: ExecErrorKind| ChannelError::Exec(ExecError { node: 0, kind });
    run_call(ctx, reg, mem, frame.function_id, &frame.args, 0).map_err(fail)?;
    if let (Some(cache), Some(ret)) = (frame.memo, frame.ret()) {
        let key = frame.key(mem)?;
        let value = mem.get_at(ret.slot, ret.element(0))?;
        ctx.memo_insert(cache, key, value).map_err(|e| fail(e.into()))?;
    }
    Ok(ExecStats { nodes_visited: 1, call_dispatches: 1, translation_invocations: 1, control_steps: 0 })
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

/// Worker loop: polls the region until shutdown, then hands the trusted
/// region back.
pub(crate) fn worker_loop<S>(
    region: Arc<SharedRegion>,
    mut trusted: TrustedRegion<S>,
    reg: Arc<FunctionRegistry<S>>,
    ledger: Arc<TransitionLedger>,
    cfg: InterpConfig,
) -> TrustedRegion<S> {
    let scope = TrustedScope::enter().expect("worker thread starts outside trusted context");
    trusted.claim();
    let mut spins = 0u32;
    loop {
        let mut slot = region.slot.lock();
        if let Some(mut job) = slot.job.take() {
            drop(slot);
            let status = if region.is_halted() {
                Err(ChannelError::Halted)
            } else {
                let (state, memo) = trusted.parts_mut();
                let mut ctx = TrustedCtx::new(state, memo, &ledger);
                let mem = &mut job.mem;
                panic::catch_unwind(AssertUnwindSafe(|| execute_job(&job.kind, mem, &mut ctx, &reg, &cfg)))
                    .unwrap_or_else(|p| Err(ChannelError::WorkerPanicked(panic_message(p))))
            };
            region.slot.lock().result = Some(JobResult { mem: job.mem, status });
            region.done.store(true, Ordering::Release);
            continue;
        }
        if slot.shutdown {
            break;
        }
        drop(slot);
        ledger.record_poll();
        if trusted.memo.on_poll() && trusted.memo.halted() {
            region.halted.store(true, Ordering::Release);
        }
        relax(&mut spins);
    }
    trusted.release();
    drop(scope);
    trusted
}

/// Whether a memoized call was answered from the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoOutcome {
    Hit,
    Miss,
}

/// Untrusted caller of a running worker, with a bundle builder context.
#[derive(Debug)]
pub struct Client {
    region: Arc<SharedRegion>,
    ledger: Arc<TransitionLedger>,
    sigs: Signatures,
    caches: Vec<Arc<MemoCache>>,
    bundle: Option<GraphBuilder>,
}

impl Client {
    pub(crate) fn new(
        region: Arc<SharedRegion>,
        ledger: Arc<TransitionLedger>,
        sigs: Signatures,
        caches: Vec<Arc<MemoCache>>,
    ) -> Self {
        Self { region, ledger, sigs, caches, bundle: None }
    }

    pub fn ledger(&self) -> &Arc<TransitionLedger> {
        &self.ledger
    }

    pub fn region(&self) -> &Arc<SharedRegion> {
        &self.region
    }

    pub fn signatures(&self) -> &Signatures {
        &self.sigs
    }

    pub fn memo_cache(&self, id: MemoCacheId) -> Result<&Arc<MemoCache>, ChannelError> {
        self.caches.get(id.0 as usize).ok_or(ChannelError::Memo(MemoError::UnknownCache(id)))
    }

    fn submit(&self, kind: JobKind, mem: &mut Memory) -> Result<ExecStats, ChannelError> {
        if !self.region.is_attached() {
            return Err(ChannelError::NoWorker);
        }
        if self.region.is_halted() {
            return Err(ChannelError::Halted);
        }
        {
            let mut slot = self.region.slot.lock();
            if slot.shutdown {
                return Err(ChannelError::NoWorker);
            }
            debug_assert!(slot.job.is_none(), "single job slot already occupied");
            self.region.done.store(false, Ordering::Relaxed);
            self.ledger.job_started();
            self.ledger.record_switchless_job();
            slot.job = Some(Job { kind, mem: mem::take(mem) });
        }
        let mut spins = 0u32;
        while !self.region.done.load(Ordering::Acquire) {
            relax(&mut spins);
        }
        let result = self.region.slot.lock().result.take().expect("worker posts a result before signalling");
        self.region.done.store(false, Ordering::Relaxed);
        self.ledger.job_finished();
        *mem = result.mem;
        result.status
    }

    /// Blocking switchless call; results land in the frame's return slot.
    pub fn hcall(&self, frame: &CallFrame, mem: &mut Memory) -> Result<ExecStats, ChannelError> {
        self.submit(JobKind::Call(frame.clone()), mem)
    }

    pub fn call(
        &self,
        function: FunctionId,
        args: Vec<ParamDesc>,
        mem: &mut Memory,
    ) -> Result<ExecStats, ChannelError> {
        self.hcall(&CallFrame::new(function, args), mem)
    }

    /// Submits an already validated graph as one job.
    pub fn submit_graph(&self, graph: Arc<ExecutionGraph>, mem: &mut Memory) -> Result<ExecStats, ChannelError> {
        if !graph.is_validated() {
            return Err(ChannelError::Exec(ExecError { node: 0, kind: ExecErrorKind::NotValidated }));
        }
        self.submit(JobKind::Graph(graph), mem)
    }

    /// Looks the frame's inputs up in its cache. A hit writes the return
    /// slot without crossing the boundary; a miss falls through to `hcall`
    /// and the worker stores the result.
    pub fn memo_call(&self, frame: &CallFrame, mem: &mut Memory) -> Result<MemoOutcome, ChannelError> {
        let id = frame.memo.ok_or(ChannelError::NotMemoized)?;
        let cache = self.memo_cache(id)?;
        let ret = *frame.ret().ok_or(ChannelError::NotMemoized)?;
        let key = frame.key(mem)?;
        self.ledger.charge_local(1);
        if let Some(v) = cache.lookup(&key)? {
            mem.set_at(ret.slot, ret.element(0), v)?;
            return Ok(MemoOutcome::Hit);
        }
        self.hcall(frame, mem)?;
        Ok(MemoOutcome::Miss)
    }

    pub fn bundle_open(&self) -> bool {
        self.bundle.is_some()
    }

    pub fn bundle_begin(&mut self) -> Result<(), ChannelError> {
        if self.bundle.is_some() {
            return Err(ChannelError::NestedBundle);
        }
        self.bundle = Some(GraphBuilder::new(self.sigs.clone()));
        Ok(())
    }

    fn builder(&mut self) -> Result<&mut GraphBuilder, ChannelError> {
        self.bundle.as_mut().ok_or(ChannelError::NoBundle)
    }

    /// Nodes appended to the open bundle so far.
    pub fn bundle_len(&self) -> usize {
        self.bundle.as_ref().map_or(0, GraphBuilder::len)
    }

    pub fn add_call(&mut self, function: FunctionId, params: Vec<ParamDesc>) -> Result<(), ChannelError> {
        self.builder()?.call(function, params)?;
        Ok(())
    }

    pub fn for_each(
        &mut self,
        function: FunctionId,
        n_iters: SlotId,
        params: Vec<ParamDesc>,
    ) -> Result<(), ChannelError> {
        self.builder()?.for_each(function, n_iters, params)?;
        Ok(())
    }

    pub fn map(
        &mut self,
        function: FunctionId,
        n_iters: SlotId,
        inputs: Vec<ParamDesc>,
        output: ParamDesc,
    ) -> Result<(), ChannelError> {
        self.builder()?.map(function, n_iters, inputs, output)?;
        Ok(())
    }

    pub fn begin_for(&mut self, n_iters: SlotId) -> Result<(), ChannelError> {
        self.builder()?.begin_for(n_iters);
        Ok(())
    }

    pub fn end_for(&mut self) -> Result<(), ChannelError> {
        self.builder()?.end_for();
        Ok(())
    }

    pub fn if_begin(&mut self, predicate: Predicate) -> Result<(), ChannelError> {
        self.builder()?.if_begin(predicate);
        Ok(())
    }

    pub fn else_begin(&mut self) -> Result<(), ChannelError> {
        self.builder()?.else_begin();
        Ok(())
    }

    pub fn if_end(&mut self) -> Result<(), ChannelError> {
        self.builder()?.if_end();
        Ok(())
    }

    pub fn while_begin(&mut self, predicate: Predicate) -> Result<(), ChannelError> {
        self.builder()?.while_begin(predicate);
        Ok(())
    }

    pub fn while_end(&mut self) -> Result<(), ChannelError> {
        self.builder()?.while_end();
        Ok(())
    }

    /// Closes the bundle without submitting it, returning the validated
    /// graph.
    pub fn bundle_take(&mut self) -> Result<ExecutionGraph, ChannelError> {
        let builder = self.bundle.take().ok_or(ChannelError::NoBundle)?;
        builder.build().map_err(ChannelError::Invalid)
    }

    /// Validates the open bundle and submits it as a single job. An invalid
    /// bundle is discarded without crossing the boundary.
    pub fn bundle_end(&mut self, mem: &mut Memory) -> Result<ExecStats, ChannelError> {
        let graph = self.bundle_take()?;
        self.submit(JobKind::Graph(Arc::new(graph)), mem)
    }

    /// Drops the client, reporting a bundle left open.
    pub fn close(mut self) -> Result<(), ChannelError> {
        if self.bundle.take().is_some() {
            return Err(ChannelError::BuilderLeak);
        }
        Ok(())
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        if self.bundle.is_some() {
            self.region.leaked_bundles.fetch_add(1, Ordering::AcqRel);
        }
    }
}
