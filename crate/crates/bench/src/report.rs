// SPDX-License-Identifier: Apache-2.0

//! Benchmark rows and their CSV form.

use std::fmt;

use bundler_core::flow::DriverKind;
use bundler_core::{CacheMode, EvictionPolicy, LedgerSnapshot};

pub const CSV_HEADER: &str =
    "experiment,param_n,param_m,driver,policy,batch,cache_mode,ecalls,switchless,modeled_cycles,seed";

/// Exact mean of integer samples. Prints as an integer when the division
/// is exact and with three decimals otherwise.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Mean {
    pub total: u64,
    pub count: u64,
}

impl Mean {
    pub fn new(total: u64, count: u64) -> Self {
        Self { total, count }
    }

    pub fn value(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total as f64 / self.count as f64
        }
    }
}

impl fmt::Display for Mean {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.count == 0 {
            f.write_str("0")
        } else if self.total.is_multiple_of(self.count) {
            write!(f, "{}", self.total / self.count)
        } else {
            write!(f, "{:.3}", self.value())
        }
    }
}

/// Ledger totals over a number of samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub ecalls: u64,
    pub switchless: u64,
    pub local_ops: u64,
    pub cycles: u64,
    pub samples: u64,
}

impl Tally {
    pub fn add(&mut self, d: &LedgerSnapshot) {
        self.ecalls += d.ecall_count;
        self.switchless += d.switchless_job_count;
        self.local_ops += d.local_ops;
        self.cycles += d.modeled_cycles;
        self.samples += 1;
    }

    pub fn transitions(&self) -> u64 {
        self.ecalls + self.switchless
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub experiment: String,
    pub n: Option<u64>,
    pub m: Option<u64>,
    pub driver: Option<DriverKind>,
    pub policy: Option<EvictionPolicy>,
    pub batch: Option<usize>,
    pub cache_mode: CacheMode,
    pub ecalls: Mean,
    pub switchless: Mean,
    pub modeled_cycles: Mean,
    pub repetitions: u64,
    pub seed: u64,
    /// Extra counters reported beside the CSV.
    pub counters: Vec<(&'static str, Mean)>,
}

impl BenchReport {
    pub fn new(experiment: impl Into<String>, cache_mode: CacheMode, seed: u64, tally: &Tally) -> Self {
        let per = |v| Mean::new(v, tally.samples);
        Self {
            experiment: experiment.into(),
            n: None,
            m: None,
            driver: None,
            policy: None,
            batch: None,
            cache_mode,
            ecalls: per(tally.ecalls),
            switchless: per(tally.switchless),
            modeled_cycles: per(tally.cycles),
            repetitions: tally.samples,
            seed,
            counters: Vec::new(),
        }
    }

    pub fn n(mut self, n: u64) -> Self {
        self.n = Some(n);
        self
    }

    pub fn m(mut self, m: u64) -> Self {
        self.m = Some(m);
        self
    }

    pub fn driver(mut self, d: DriverKind) -> Self {
        self.driver = Some(d);
        self
    }

    pub fn policy(mut self, p: EvictionPolicy) -> Self {
        self.policy = Some(p);
        self
    }

    pub fn batch(mut self, b: usize) -> Self {
        self.batch = Some(b);
        self
    }

    pub fn counter(mut self, name: &'static str, value: Mean) -> Self {
        self.counters.push((name, value));
        self
    }

    pub fn get_counter(&self, name: &str) -> Option<Mean> {
        self.counters.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    pub fn csv_row(&self) -> String {
        fn opt<T: fmt::Display>(v: &Option<T>) -> String {
            v.as_ref().map_or_else(|| "-".to_string(), T::to_string)
        }
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.experiment,
            opt(&self.n),
            opt(&self.m),
            opt(&self.driver),
            opt(&self.policy),
            opt(&self.batch),
            self.cache_mode,
            self.ecalls,
            self.switchless,
            self.modeled_cycles,
            self.seed
        )
    }

    /// `experiment key=value ...` line with the extra counters.
    pub fn counter_line(&self) -> Option<String> {
        if self.counters.is_empty() {
            return None;
        }
        let mut line = self.experiment.clone();
        for (k, v) in [("n", self.n), ("m", self.m)] {
            if let Some(v) = v {
                line.push_str(&format!(" {k}={v}"));
            }
        }
        if let Some(d) = self.driver {
            line.push_str(&format!(" driver={d}"));
        }
        if let Some(p) = self.policy {
            line.push_str(&format!(" policy={p}"));
        }
        for (k, v) in &self.counters {
            line.push_str(&format!(" {k}={v}"));
        }
        Some(line)
    }
}

pub fn render_csv(rows: &[BenchReport]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}
