// SPDX-License-Identifier: Apache-2.0

//! Switchless calls, execution graphs and memoization against a simulated
//! enclave boundary.
//!
//! Every crossing is recorded in a [`TransitionLedger`], which turns the
//! cost of a workload into exact counts plus modeled cycles.

pub mod channel;
pub mod enclave;
pub mod flow;
pub mod graph;
pub mod interp;
pub mod memo;
pub mod predicate;
pub mod registry;
pub mod sim;
pub mod value;

pub use channel::{CallFrame, ChannelError, Client, MemoOutcome, SharedRegion};
pub use enclave::Enclave;
pub use graph::{ExecutionGraph, GraphBuilder, GraphNode, ValidationReport};
pub use interp::{ExecStats, InterpConfig};
pub use memo::{EvictionPolicy, MemoCache, MemoCacheId, MemoWrite};
pub use predicate::Predicate;
pub use registry::{Args, CallError, FunctionId, FunctionRegistry, TrustedCtx};
pub use sim::{CacheMode, CostModel, LedgerSnapshot, TransitionLedger};
pub use value::{Memory, ParamDesc, SlotId, TypeTag, Value};
