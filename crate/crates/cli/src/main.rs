//! `cqd-bench`: run one certification experiment and emit its report.
//!
//! The report goes to `--out` or stdout; one `PASS`/`FAIL` line per check goes
//! to stderr. Exit status is 0 iff every check passed, 1 if any failed, and 2
//! on usage or runtime errors.

mod args;

use std::io::Write;
use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;
use cqd_core::experiments::run_experiment;
use cqd_core::report::emit_report;

use args::{build_config, Command};

#[derive(Parser, Debug)]
#[command(
    version,
    about = "Certification experiments for compressed query delegation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn run(cli: &Cli) -> Result<bool> {
    let (id, common) = cli.command.split();
    let cfg = build_config(id, common)?;
    let report = run_experiment(&cfg)?;
    match &cfg.out {
        Some(path) => emit_report(&report, path, cfg.format)?,
        None => std::io::stdout().write_all(report.render(cfg.format)?.as_bytes())?,
    }
    let mut err = std::io::stderr().lock();
    for c in &report.checks {
        let tag = if c.pass { "PASS" } else { "FAIL" };
        writeln!(
            err,
            "{tag} {id}/{}: {} (want {})",
            c.name, c.value, c.threshold
        )?;
    }
    writeln!(err, "{} {id}", if report.pass { "PASS" } else { "FAIL" })?;
    Ok(report.pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
