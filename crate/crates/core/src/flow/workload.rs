// SPDX-License-Identifier: Apache-2.0

//! Flow-table workloads: a line-oriented text format and a seeded
//! generator.
//!
//! ```text
//! # comment
//! add 3 1,10,20,30,40,6 7
//! del *
//! del 1,10,20,30,40,6
//! mod * 9
//! evict
//! ```

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::table::{AddResult, FlowMatch, Pattern};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlowOp {
    Add { priority: u64, matcher: FlowMatch, actions: u64 },
    Delete(Pattern),
    Modify(Pattern, u64),
    Evict,
}

impl FlowOp {
    pub fn name(&self) -> &'static str {
        match self {
            FlowOp::Add { .. } => "add",
            FlowOp::Delete(_) => "del",
            FlowOp::Modify(..) => "mod",
            FlowOp::Evict => "evict",
        }
    }
}

impl fmt::Display for FlowOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlowOp::Add { priority, matcher, actions } => write!(f, "add {priority} {matcher} {actions}"),
            FlowOp::Delete(p) => write!(f, "del {p}"),
            FlowOp::Modify(p, a) => write!(f, "mod {p} {a}"),
            FlowOp::Evict => f.write_str("evict"),
        }
    }
}

/// What an operation returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpResult {
    Added(AddResult),
    Deleted(u64),
    Modified(u64),
    Evicted(Option<u64>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

impl FromStr for FlowOp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let words: Vec<&str> = s.split_whitespace().collect();
        let num = |w: &str| w.parse::<u64>().map_err(|e| format!("bad number '{w}': {e}"));
        match words.as_slice() {
            ["add", prio, m] => Ok(FlowOp::Add { priority: num(prio)?, matcher: m.parse()?, actions: 0 }),
            ["add", prio, m, act] => Ok(FlowOp::Add { priority: num(prio)?, matcher: m.parse()?, actions: num(act)? }),
            ["del", p] => Ok(FlowOp::Delete(p.parse()?)),
            ["mod", p, act] => Ok(FlowOp::Modify(p.parse()?, num(act)?)),
            ["evict"] => Ok(FlowOp::Evict),
            _ => Err(format!("cannot parse operation '{}'", s.trim())),
        }
    }
}

pub fn parse_workload(text: &str) -> Result<Vec<FlowOp>, ParseError> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(line, l)| l.parse().map_err(|msg| ParseError { line, msg }))
        .collect()
}

pub fn render_workload(ops: &[FlowOp]) -> String {
    ops.iter().map(|op| format!("{op}\n")).collect()
}

/// Relative weights of the four operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpMix {
    pub add: u32,
    pub delete: u32,
    pub modify: u32,
    pub evict: u32,
}

impl OpMix {
    pub const BALANCED: OpMix = OpMix { add: 6, delete: 1, modify: 2, evict: 1 };
    pub const EVICT_HEAVY: OpMix = OpMix { add: 5, delete: 0, modify: 1, evict: 4 };
    pub const ADD_ONLY: OpMix = OpMix { add: 1, delete: 0, modify: 0, evict: 0 };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkloadSpec {
    pub ops: usize,
    pub mix: OpMix,
    /// Number of distinct match tuples drawn from.
    pub keys: u64,
    /// Priorities are drawn from `0..priorities`.
    pub priorities: u64,
    /// Share of delete/modify patterns that are match-all, in percent.
    pub wildcard_pct: u32,
}

impl WorkloadSpec {
    pub fn new(ops: usize, mix: OpMix) -> Self {
        Self { ops, mix, keys: 64, priorities: 8, wildcard_pct: 5 }
    }
}

/// Match tuple number `k` of the key space.
pub fn match_for(k: u64) -> FlowMatch {
    FlowMatch([k % 16, 0x0200_0000_0000 | k, 0x0200_0000_ffff, 0x0a00_0000 | k, 0x0a00_00fe, 6 + (k % 2) * 11])
}

/// Seeded operation sequence.
pub fn generate(spec: &WorkloadSpec, seed: u64) -> Vec<FlowOp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = spec.mix;
    let weights = [m.add, m.delete, m.modify, m.evict];
    let pick = WeightedIndex::new(weights).expect("at least one operation weight is positive");
    let keys = spec.keys.max(1);
    let prios = spec.priorities.max(1);
    let pattern = |rng: &mut ChaCha8Rng| {
        if rng.gen_range(0..100) < spec.wildcard_pct {
            Pattern::All
        } else {
            Pattern::Exact(match_for(rng.gen_range(0..keys)))
        }
    };
    (0..spec.ops)
        .map(|_| match pick.sample(&mut rng) {
            0 => FlowOp::Add {
                priority: rng.gen_range(0..prios),
                matcher: match_for(rng.gen_range(0..keys)),
                actions: rng.gen_range(0..1000),
            },
            1 => FlowOp::Delete(pattern(&mut rng)),
            2 => FlowOp::Modify(pattern(&mut rng), rng.gen_range(0..1000)),
            _ => FlowOp::Evict,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let ops = generate(&WorkloadSpec::new(200, OpMix::BALANCED), 11);
        assert_eq!(parse_workload(&render_workload(&ops)).unwrap(), ops);
    }

    #[test]
    fn parses_comments_and_defaults() {
        let ops = parse_workload("# header\nadd 3 1,2,3,4,5,6\n\ndel * # all\nevict\n").unwrap();
        assert_eq!(ops.len(), 3);
        assert_eq!(ops[0], FlowOp::Add { priority: 3, matcher: FlowMatch([1, 2, 3, 4, 5, 6]), actions: 0 });
        let err = parse_workload("evict\nfrobnicate\n").unwrap_err();
        assert_eq!(err.line, 2);
    }

    #[test]
    fn generator_is_seeded() {
        let spec = WorkloadSpec::new(100, OpMix::EVICT_HEAVY);
        assert_eq!(generate(&spec, 3), generate(&spec, 3));
        assert_ne!(generate(&spec, 3), generate(&spec, 4));
        assert!(generate(&WorkloadSpec::new(50, OpMix::ADD_ONLY), 1).iter().all(|o| o.name() == "add"));
    }
}
