//! Command line runner: `dpnc run <config>` executes an experiment and
//! writes its reports; `dpnc verify <results>` re-checks the certificates
//! recorded in an emitted report.

use std::path::PathBuf;
use std::process::ExitCode;

use dpnc_core::harness::{emit_report, run_experiment, verify_results, ExperimentConfig};

const USAGE: &str = "usage:
  dpnc run <config> [--jobs N] [--seed S] [--out DIR] [--key=value ...]
  dpnc verify <results.csv | results dir>

`run` reads a flat key = value config file, applies the --key=value
overrides, executes every trial, and writes results.csv, summary.json and
plots.svg into the output directory (default: runs/<experiment>).

`verify` re-checks the stationarity certificates, ledger totals, and
aggregates recorded in an emitted report; exit code 0 means all checks
passed.";

fn run(args: &[String]) -> Result<(), String> {
    let config_path = args.first().ok_or_else(|| USAGE.to_string())?;
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| format!("cannot read {config_path}: {e}"))?;
    let mut config = ExperimentConfig::parse(&text).map_err(|e| e.to_string())?;

    let mut out_dir: Option<PathBuf> = None;
    let mut it = args[1..].iter();
    while let Some(arg) = it.next() {
        let take_value = |it: &mut std::slice::Iter<String>, flag: &str| {
            it.next()
                .cloned()
                .ok_or_else(|| format!("{flag} needs a value"))
        };
        if arg == "--jobs" {
            config
                .set("jobs", &take_value(&mut it, "--jobs")?)
                .map_err(|e| e.to_string())?;
        } else if arg == "--seed" {
            config
                .set("seed", &take_value(&mut it, "--seed")?)
                .map_err(|e| e.to_string())?;
        } else if arg == "--out" {
            out_dir = Some(PathBuf::from(take_value(&mut it, "--out")?));
        } else if let Some(rest) = arg.strip_prefix("--") {
            let (key, value) = rest
                .split_once('=')
                .ok_or_else(|| format!("expected --key=value, got {arg}"))?;
            config.set(key, value).map_err(|e| e.to_string())?;
        } else {
            return Err(format!("unexpected argument {arg}\n{USAGE}"));
        }
    }
    config.validate().map_err(|e| e.to_string())?;

    let table = run_experiment(&config).map_err(|e| e.to_string())?;
    let dir =
        out_dir.unwrap_or_else(|| PathBuf::from("runs").join(table.config.kind.as_str()));
    emit_report(&table, &dir).map_err(|e| e.to_string())?;

    let ok = table.rows.iter().filter(|r| r.is_ok()).count();
    println!(
        "{}: {} trials ({} ok) -> {}",
        table.config.kind.as_str(),
        table.rows.len(),
        ok,
        dir.display()
    );
    if let Some(q) = table.summary.get("grad_norm_quartiles") {
        println!("  grad norm median = {}", q["median"]);
    }
    if let Some(s) = table.summary.get("slope") {
        println!("  fitted log-log slope = {s}");
    }
    println!(
        "  ledger max spend = ({}, {}) within budget: {}",
        table.summary["eps_spent_max"],
        table.summary["delta_spent_max"],
        table.summary["within_budget"]
    );
    Ok(())
}

fn verify(args: &[String]) -> Result<bool, String> {
    let path = args.first().ok_or_else(|| USAGE.to_string())?;
    let report = verify_results(std::path::Path::new(path)).map_err(|e| e.to_string())?;
    for (name, ok, detail) in &report.checks {
        println!("{}: {} ({detail})", name, if *ok { "pass" } else { "FAIL" });
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.first().map(String::as_str) {
        Some("run") => match run(&args[1..]) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("{e}");
                ExitCode::FAILURE
            }
        },
        Some("verify") => match verify(&args[1..]) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::FAILURE,
            Err(e) => {
                eprintln!("{e}");
                ExitCode::FAILURE
            }
        },
        _ => {
            eprintln!("{USAGE}");
            ExitCode::FAILURE
        }
    }
}
