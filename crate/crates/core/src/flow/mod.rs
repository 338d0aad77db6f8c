// SPDX-License-Identifier: Apache-2.0

//! A software-switch flow table kept as trusted state.

mod driver;
pub mod funcs;
mod table;
mod workload;

pub use driver::{make_driver, Baseline, Bundler, BundlerStats, DriverConfig, DriverKind, FlowDriver, FlowError};
pub use table::{AddResult, AddStatus, FlowMatch, FlowRule, FlowStats, FlowTable, InsertStatus, Pattern};
pub use workload::{
    generate, match_for, parse_workload, render_workload, FlowOp, OpMix, OpResult, ParseError, WorkloadSpec,
};
