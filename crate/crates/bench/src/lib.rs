// SPDX-License-Identifier: Apache-2.0

//! Benchmarks and oracle suites for the bundler runtime.

pub mod demo;
pub mod experiments;
pub mod oracles;
pub mod program;
pub mod report;
pub mod verify;
