use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use num_rational::Ratio;

use otspc_core::analysis::{capacity, is_prisoners_dilemma, nash_equilibria, payoff_matrix, ExitAction, ExitPayoffs};
use otspc_core::harness::{find_scenario, load_scenario, run, SimReport};
use otspc_core::txgraph::{exit_path_report, PrivacyLevel};

#[derive(Parser)]
#[command(name = "otspc", about = "OTS payment channel simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file (or the name of a bundled one).
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        privacy_level: Option<u8>,
        /// Write the event log here, one JSON object per line.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Exit payoff matrix for delay cost p, unilateral fees u, close fee c.
    Payoff {
        #[arg(long)]
        p: i128,
        #[arg(long)]
        u: i128,
        #[arg(long)]
        c: i128,
    },
    /// How long a sequence-number space lasts.
    Capacity {
        #[arg(long)]
        bits: u32,
        /// Updates per second.
        #[arg(long)]
        rate: f64,
    },
    /// Reference weights of the exit path.
    Weights,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match cli.cmd {
        Cmd::Run { scenario, seed, privacy_level, log, json } => cmd_run(scenario, seed, privacy_level, log, json),
        Cmd::Payoff { p, u, c } => cmd_payoff(p, u, c),
        Cmd::Capacity { bits, rate } => match capacity(bits, rate) {
            Ok(cap) => {
                println!("max updates: {}", cap.max_updates);
                println!("days: {:.1}", cap.days);
                println!("years: {:.2}", cap.years);
                ExitCode::SUCCESS
            }
            Err(e) => usage(e),
        },
        Cmd::Weights => {
            let r = exit_path_report();
            for tx in &r.txs {
                println!("{:?}", tx.kind);
                for l in &tx.lines {
                    println!("  {:<32} {:>5} wu", l.component, l.wu);
                }
                println!("  {:<32} {:>5} wu", "subtotal", tx.total);
            }
            println!("Total: {} wu", r.total);
            ExitCode::SUCCESS
        }
    }
}

fn usage(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(2)
}

fn cmd_run(path: PathBuf, seed: Option<u64>, level: Option<u8>, log: Option<PathBuf>, json: bool) -> ExitCode {
    let mut sc = match load_scenario(&find_scenario(&path)) {
        Ok(s) => s,
        Err(e) => return usage(e),
    };
    if let Some(s) = seed {
        sc.config.seed = s;
    }
    if let Some(l) = level {
        sc.config.level = PrivacyLevel::try_from(l).expect("range checked by clap");
    }
    let report = match run(&sc) {
        Ok(r) => r,
        Err(e) => return usage(e),
    };
    if let Some(p) = log {
        let mut text = report.log.join("\n");
        text.push('\n');
        if let Err(e) = std::fs::write(&p, text) {
            return usage(format!("{}: {e}", p.display()));
        }
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        summary(&report);
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn summary(r: &SimReport) {
    println!("scenario {} seed {} level {}", r.scenario, r.seed, r.level as u8);
    println!("ticks {} height {} fees {}", r.ticks, r.height, r.fees);
    match &r.resolution {
        Some((txid, kind)) => println!("resolved by {kind:?} {txid}"),
        None => println!("unresolved"),
    }
    for (who, amount) in &r.payouts {
        println!("payout {who:?} {amount}");
    }
    for e in &r.action_errors {
        println!("action error: {e}");
    }
    for a in &r.assertions {
        println!("{} {}: {}", if a.passed { "ok  " } else { "FAIL" }, a.check, a.detail);
    }
    for v in &r.violations {
        println!("violation: {v}");
    }
}

fn cmd_payoff(p: i128, u: i128, c: i128) -> ExitCode {
    let x = match ExitPayoffs::new(p, u, c) {
        Ok(x) => x,
        Err(e) => return usage(e),
    };
    let m = payoff_matrix(&x);
    let show = |r: Ratio<i128>| if r.is_integer() { r.to_integer().to_string() } else { format!("{}/{}", r.numer(), r.denom()) };
    println!("{:<10} {:>18} {:>18}", "alice\\bob", "cooperate", "defect");
    for a in ExitAction::ALL {
        let row: Vec<String> = ExitAction::ALL
            .iter()
            .map(|&b| {
                let (x, y) = m.get(a, b);
                format!("({}, {})", show(x), show(y))
            })
            .collect();
        println!("{:<10} {:>18} {:>18}", format!("{a:?}").to_lowercase(), row[0], row[1]);
    }
    println!("prisoners dilemma: {}", is_prisoners_dilemma(&x));
    let eq: Vec<String> = nash_equilibria(&m).iter().map(|(a, b)| format!("({a:?}, {b:?})").to_lowercase()).collect();
    println!("nash equilibria: {}", eq.join(" "));
    ExitCode::SUCCESS
}
