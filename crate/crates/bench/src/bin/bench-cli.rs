// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use bundler_bench::experiments::{
    self, BenchError, Experiment, FlowParams, FlowWorkload, RunConfig, BATCHING_LIST, BATCHING_M, BRANCH_CASES,
    MERGING_N,
};
use bundler_bench::report::{render_csv, BenchReport};
use bundler_bench::verify::{self, VerifyOptions};
use bundler_core::flow::{parse_workload, DriverKind, OpMix};
use bundler_core::{CacheMode, CostModel, EvictionPolicy};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bench-cli", about = "Transition-count benchmarks for switchless calls and execution graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// n separate calls vs one bundle of n calls.
    Merging,
    /// Iterator node vs for loop over a list.
    Batching,
    /// Branching inside the graph vs in the application.
    Branching,
    /// Memoized reads and cache maintenance.
    Memo,
    /// Flow-table operations per driver.
    Flowtable,
    /// Runs the oracle suites.
    Verify,
    /// Every experiment with its defaults.
    All,
}

#[derive(Debug, clap::Args)]
struct Opts {
    /// merging: calls; batching: list size; memo: capacity; flowtable: ops.
    #[arg(long, global = true)]
    n: Option<u64>,
    /// batching: functions; memo: reads; flowtable: table capacity.
    #[arg(long, global = true)]
    m: Option<u64>,
    #[arg(long, global = true, default_value_t = 8)]
    batch: usize,
    #[arg(long, global = true)]
    policy: Option<EvictionPolicy>,
    #[arg(long, global = true)]
    driver: Option<DriverKind>,
    /// `key=value` file overriding the cost model.
    #[arg(long, global = true)]
    cost_model: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = CacheMode::Warm)]
    cache_mode: CacheMode,
    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    #[arg(long, global = true, default_value_t = 20)]
    rounds: u64,
    /// Prints execution graphs to standard error.
    #[arg(long, global = true)]
    dump_graph: bool,
    #[arg(long, global = true)]
    loop_guard: Option<u64>,
    /// Corrupts the live memo cache during `verify`.
    #[arg(long, global = true)]
    inject_tamper: bool,
    /// `balanced`, `evict-heavy`, `add-only` or `add:del:mod:evict` weights.
    #[arg(long, global = true, default_value = "balanced", value_parser = parse_mix)]
    mix: OpMix,
    /// Flow-table operations, one per line; replaces generated workloads.
    #[arg(long, global = true)]
    workload: Option<PathBuf>,
}

fn parse_mix(s: &str) -> Result<OpMix, String> {
    match s {
        "balanced" => return Ok(OpMix::BALANCED),
        "evict-heavy" => return Ok(OpMix::EVICT_HEAVY),
        "add-only" => return Ok(OpMix::ADD_ONLY),
        _ => {}
    }
    let w: Vec<u32> =
        s.split(':').map(|p| p.parse().map_err(|_| format!("bad mix weight '{p}'"))).collect::<Result<_, _>>()?;
    match w[..] {
        [add, delete, modify, evict] if add + delete + modify + evict > 0 => Ok(OpMix { add, delete, modify, evict }),
        _ => Err("mix needs four weights, not all zero".into()),
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("{0}")]
    Input(String),
}

fn run_config(o: &Opts) -> Result<RunConfig, CliError> {
    let cost = match &o.cost_model {
        Some(path) => CostModel::load(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?,
        None => CostModel::for_mode(o.cache_mode),
    };
    Ok(RunConfig { cost, rounds: o.rounds.max(1), seed: o.seed })
}

fn flow_params(o: &Opts) -> Result<FlowParams, CliError> {
    let workload = match &o.workload {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            FlowWorkload::Fixed(parse_workload(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?)
        }
        None => FlowWorkload::Generated { ops: o.n.unwrap_or(1000) as usize, mix: o.mix },
    };
    Ok(FlowParams {
        drivers: o.driver.map_or_else(|| DriverKind::ALL.to_vec(), |d| vec![d]),
        workload,
        capacity: o.m.unwrap_or(64).max(1) as usize,
        batch: o.batch.max(1),
    })
}

fn experiment(cmd: &Command, o: &Opts, cfg: &RunConfig) -> Result<Experiment, CliError> {
    let policies = o.policy.map_or_else(|| vec![EvictionPolicy::Lru, EvictionPolicy::Fifo], |p| vec![p]);
    Ok(match cmd {
        Command::Merging => match o.n {
            Some(n) => experiments::merging(cfg, &[n])?,
            None => experiments::merging(cfg, &MERGING_N)?,
        },
        Command::Batching => {
            let list = o.n.unwrap_or(BATCHING_LIST);
            match o.m {
                Some(m) => experiments::batching(cfg, list, &[m])?,
                None => experiments::batching(cfg, list, &BATCHING_M)?,
            }
        }
        Command::Branching => experiments::branching(cfg, &BRANCH_CASES)?,
        Command::Memo => experiments::memo(cfg, &policies, o.n.unwrap_or(16) as usize, o.m.unwrap_or(100))?,
        Command::Flowtable => experiments::flowtable(cfg, &flow_params(o)?)?,
        Command::All => {
            let mut all = Experiment::default();
            for c in [Command::Merging, Command::Batching, Command::Branching, Command::Memo, Command::Flowtable] {
                let e = experiment(&c, o, cfg)?;
                all.rows.extend(e.rows);
                all.graphs.extend(e.graphs);
            }
            all
        }
        Command::Verify => unreachable!("verify does not produce rows"),
    })
}

fn emit(rows: &[BenchReport], o: &Opts) -> Result<(), CliError> {
    let csv = render_csv(rows);
    match &o.csv {
        Some(path) => std::fs::write(path, csv).map_err(|e| CliError::Input(format!("{}: {e}", path.display()))),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn verify_options(o: &Opts) -> VerifyOptions {
    let d = VerifyOptions::default();
    VerifyOptions {
        seed: o.seed,
        loop_guard: o.loop_guard.unwrap_or(d.loop_guard),
        inject_tamper: o.inject_tamper,
        ..d
    }
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    let o = &cli.opts;
    if let Command::Verify = cli.command {
        let mut ok = true;
        for r in verify::run_all(&verify_options(o)) {
            for line in &r.reports {
                println!("{line}");
            }
            println!("{r}");
            ok &= r.pass;
        }
        return Ok(ok);
    }
    let cfg = run_config(o)?;
    let exp = experiment(&cli.command, o, &cfg)?;
    for line in exp.rows.iter().filter_map(BenchReport::counter_line) {
        eprintln!("{line}");
    }
    if o.dump_graph {
        for (title, dump) in &exp.graphs {
            eprintln!("# {title}\n{dump}");
        }
    }
    emit(&exp.rows, o)?;
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("bench-cli: {e}");
            ExitCode::from(2)
        }
    }
}
