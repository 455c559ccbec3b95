//! `skyway`: run load scenarios, serve the gateway over HTTP, verify reports.
//!
//! Exit status is 0 when everything passed, 1 when a check failed or a run
//! could not complete, and 2 for usage errors and unreadable inputs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use skyway::clock::SystemClock;
use skyway::gateway::Gateway;
use skyway::harness::spec::{ClockMode, WorkloadSpec};
use skyway::harness::{self, emit_report, HarnessError, ReportFormat, TransportKind, Verdict};
use skyway::http::HttpServer;
use skyway::services::{Testbed, TestbedConfig};

#[derive(Parser)]
#[command(name = "skyway", version, about = "Airline reservation microservices testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Inproc,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    Real,
    Virtual,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its report.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's transport.
        #[arg(long, value_enum)]
        transport: Option<TransportArg>,
        /// Overrides the scenario's clock.
        #[arg(long, value_enum)]
        clock: Option<ClockArg>,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the extension of --out, else json.
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        /// Verify the fresh report against these thresholds.
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
    /// Serve the gateway and services over HTTP until interrupted.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        payment_fail_prob: f64,
        #[arg(long, default_value_t = 8)]
        threads: usize,
    },
    /// Check a JSON report against a thresholds file.
    Verify {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        thresholds: PathBuf,
    },
}

fn usage_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn print_verdicts(verdicts: &[Verdict]) -> ExitCode {
    for v in verdicts {
        let value = v.value.map_or("missing".to_string(), |x| x.to_string());
        println!("{} {} = {} ({})", if v.pass { "PASS" } else { "FAIL" }, v.metric, value, v.explanation);
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!("{} of {} checks passed", verdicts.len() - failed, verdicts.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn format_for(path: &Path, arg: Option<FormatArg>) -> ReportFormat {
    match arg {
        Some(FormatArg::Json) => ReportFormat::Json,
        Some(FormatArg::Csv) => ReportFormat::Csv,
        Some(FormatArg::Text) => ReportFormat::Text,
        None => path
            .extension()
            .and_then(|e| e.to_str())
            .and_then(ReportFormat::parse)
            .unwrap_or(ReportFormat::Json),
    }
}

fn verify_exit(result: Result<Vec<Verdict>, HarnessError>) -> ExitCode {
    match result {
        Ok(v) => print_verdicts(&v),
        Err(e) => usage_error(e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            transport,
            clock,
            seed,
            out,
            format,
            thresholds,
        } => {
            let mut spec = match WorkloadSpec::from_file(&scenario) {
                Ok(s) => s,
                Err(e) => return usage_error(e),
            };
            if let Some(t) = transport {
                spec.transport = match t {
                    TransportArg::Inproc => TransportKind::Inproc,
                    TransportArg::Http => TransportKind::Http,
                };
            }
            if let Some(c) = clock {
                spec.clock = match c {
                    ClockArg::Real => ClockMode::Real,
                    ClockArg::Virtual => ClockMode::Virtual,
                };
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            let report = match harness::run(&spec) {
                Ok(r) => r,
                Err(e @ HarnessError::Rejected(_)) => return usage_error(e),
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            let fmt = format_for(&out, format);
            if let Err(e) = emit_report(&report, fmt, &out) {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
            print!("{}", report.to_text());
            match thresholds {
                Some(t) if fmt == ReportFormat::Json => verify_exit(harness::verify(&out, &t)),
                Some(t) => {
                    let text = match std::fs::read_to_string(&t) {
                        Ok(s) => s,
                        Err(e) => return usage_error(format!("{}: {e}", t.display())),
                    };
                    match harness::Thresholds::from_json(&text) {
                        Ok(th) => print_verdicts(&th.check(&report.metrics())),
                        Err(e) => usage_error(e),
                    }
                }
                None => ExitCode::SUCCESS,
            }
        }
        Command::Serve {
            listen,
            seed,
            payment_fail_prob,
            threads,
        } => {
            if !(0.0..=1.0).contains(&payment_fail_prob) {
                return usage_error("--payment-fail-prob must be within [0, 1]");
            }
            let config = TestbedConfig {
                seed,
                payment_fail_prob,
                ..TestbedConfig::default()
            };
            let tb = Arc::new(Testbed::new(SystemClock::shared(), &config));
            let _workers = harness::live::spawn_background(tb.clone());
            let server = match HttpServer::start(Arc::new(Gateway::new(tb)), &listen, threads) {
                Ok(s) => s,
                Err(e) => return usage_error(format!("cannot listen on {listen}: {e}")),
            };
            println!("listening on http://{}", server.addr());
            server.wait();
            ExitCode::SUCCESS
        }
        Command::Verify { report, thresholds } => verify_exit(harness::verify(&report, &thresholds)),
    }
}
