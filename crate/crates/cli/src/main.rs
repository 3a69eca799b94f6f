//! Scenario runner for the advertising covert-channel simulator.
//!
//! Loads a scenario file, executes the full interval/seed sweep, and writes
//! metrics, curves, and a per-run summary (plus optional traces and PDU
//! hexdumps) under the output directory.
//!
//! Exit codes: 0 on success, 1 on a config error, 2 on a simulation failure
//! (or, with `--require-complete`, on any transfer that did not reconstruct).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use advchan::scenario::{load_scenario, run_scenario, RunOptions, ScenarioError};

#[derive(Parser)]
#[command(name = "advchan", version, about = "BLE advertising covert-channel simulator")]
struct Args {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,

    /// Output directory for CSVs, traces, and dumps.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Write one event-log file per run under <out>/traces/.
    #[arg(long)]
    trace: bool,

    /// Write one PDU hexdump per run under <out>/pdus/.
    #[arg(long)]
    dump_pdus: bool,

    /// Exit nonzero if any transfer fails to reconstruct byte-exactly.
    #[arg(long)]
    require_complete: bool,

    /// Run only this seed instead of the scenario's seed list.
    #[arg(long)]
    seed_override: Option<u64>,
}

fn main() -> ExitCode {
    let args = Args::parse();

    let scenario = match load_scenario(&args.scenario) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };

    let opts = RunOptions {
        out_dir: args.out.clone(),
        write_trace: args.trace,
        dump_pdus: args.dump_pdus,
        seed_override: args.seed_override,
    };
    let report = match run_scenario(&scenario, &opts) {
        Ok(r) => r,
        Err(ScenarioError::Config(e)) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };

    for run in &report.results {
        let status = match (&run.failure, run.completed) {
            (Some(f), _) => format!("FAILED ({f})"),
            (None, true) => "complete".to_string(),
            (None, false) => "incomplete".to_string(),
        };
        println!(
            "{}: {} | n={} unique={} rounds={} rate={:.3} B/s loss={:.2}% total={:.3} s",
            run.run_id,
            status,
            run.params.n,
            run.unique_received,
            run.rounds_used,
            run.metrics.data_rate_bps,
            run.metrics.packet_loss_pct,
            run.metrics.total_time_s,
        );
    }
    println!(
        "{} runs -> {}",
        report.results.len(),
        args.out.display()
    );

    if report.any_failure() {
        eprintln!("simulation failure in at least one run");
        return ExitCode::from(2);
    }
    if args.require_complete && !report.all_complete() {
        eprintln!("incomplete transfer with --require-complete set");
        return ExitCode::from(2);
    }
    ExitCode::SUCCESS
}
