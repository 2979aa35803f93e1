//! Report emission and certificate re-checking.
//!
//! `results.csv` has a fixed comma-separated schema with `.` decimals and
//! empty fields for inapplicable values; `summary.json` carries the config
//! echo, the problem constants, and the aggregates; `plots.svg` is a
//! log-log rate plot for scans and a histogram otherwise.  Emission is a
//! pure function of the results table, so re-emitting produces identical
//! bytes.

use std::fs;
use std::path::Path;

use super::runner::ResultsTable;
use super::stats::{least_squares_closed_form, quartiles};
use super::HarnessError;

pub const CSV_HEADER: &str = "trial,seed,n,grad_norm,smin,cert_alpha,eps_spent,delta_spent,\
o1_calls,o2_calls,steps,excess_emp,excess_pop,accept_rate,status";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Render the per-trial rows with the fixed schema.
pub fn render_results_csv(table: &ResultsTable) -> String {
    let mut out = String::with_capacity(64 * (table.rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.trial,
            r.seed,
            r.n,
            opt(r.grad_norm),
            opt(r.smin),
            opt(r.cert_alpha),
            r.eps_spent,
            r.delta_spent,
            r.o1_calls,
            r.o2_calls,
            r.steps,
            opt(r.excess_emp),
            opt(r.excess_pop),
            opt(r.accept_rate),
            r.status,
        ));
    }
    out
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 480.0;
const MARGIN: f64 = 60.0;

fn svg_open() -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" \
         viewBox=\"0 0 {SVG_W} {SVG_H}\">\n<rect width=\"{SVG_W}\" height=\"{SVG_H}\" \
         fill=\"white\"/>\n"
    )
}

fn svg_axes(title: &str) -> String {
    let x0 = MARGIN;
    let y0 = SVG_H - MARGIN;
    let x1 = SVG_W - MARGIN;
    let y1 = MARGIN;
    format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"30\" text-anchor=\"middle\" font-family=\"monospace\" \
         font-size=\"14\">{title}</text>\n",
        SVG_W / 2.0
    )
}

fn scale(v: f64, lo: f64, hi: f64, out_lo: f64, out_hi: f64) -> f64 {
    if hi <= lo {
        return (out_lo + out_hi) / 2.0;
    }
    out_lo + (v - lo) / (hi - lo) * (out_hi - out_lo)
}

/// Log-log rate plot: one point per dataset size plus the fitted line.
fn svg_rate_plot(points: &[(f64, f64)], slope: f64, intercept: f64) -> String {
    let mut svg = svg_open();
    svg.push_str(&svg_axes("median certified gradient norm vs n (log-log)"));
    if !points.is_empty() {
        let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
        let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
        let (xlo, xhi) = (
            lx.iter().cloned().fold(f64::MAX, f64::min),
            lx.iter().cloned().fold(f64::MIN, f64::max),
        );
        let (ylo, yhi) = (
            ly.iter().cloned().fold(f64::MAX, f64::min),
            ly.iter().cloned().fold(f64::MIN, f64::max),
        );
        let pad = 0.2;
        let (ylo, yhi) = (ylo - pad, yhi + pad);
        for (x, y) in lx.iter().zip(&ly) {
            let cx = scale(*x, xlo, xhi, MARGIN, SVG_W - MARGIN);
            let cy = scale(*y, ylo, yhi, SVG_H - MARGIN, MARGIN);
            svg.push_str(&format!(
                "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"4\" fill=\"steelblue\"/>\n"
            ));
        }
        let fy = |x: f64| intercept + slope * x;
        let px0 = scale(xlo, xlo, xhi, MARGIN, SVG_W - MARGIN);
        let py0 = scale(fy(xlo), ylo, yhi, SVG_H - MARGIN, MARGIN);
        let px1 = scale(xhi, xlo, xhi, MARGIN, SVG_W - MARGIN);
        let py1 = scale(fy(xhi), ylo, yhi, SVG_H - MARGIN, MARGIN);
        svg.push_str(&format!(
            "<line x1=\"{px0}\" y1=\"{py0}\" x2=\"{px1}\" y2=\"{py1}\" \
             stroke=\"firebrick\" stroke-dasharray=\"6,3\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\">slope = {slope}</text>\n",
            MARGIN + 10.0,
            MARGIN + 20.0,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Histogram of a value column.
fn svg_histogram(values: &[f64], title: &str) -> String {
    let mut svg = svg_open();
    svg.push_str(&svg_axes(title));
    if !values.is_empty() {
        let lo = values.iter().cloned().fold(f64::MAX, f64::min);
        let hi = values.iter().cloned().fold(f64::MIN, f64::max);
        let bins = 24usize;
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let mut counts = vec![0usize; bins];
        for v in values {
            let mut b = ((v - lo) / width) as usize;
            if b >= bins {
                b = bins - 1;
            }
            counts[b] += 1;
        }
        let max_count = counts.iter().cloned().max().unwrap_or(1).max(1);
        let bar_w = (SVG_W - 2.0 * MARGIN) / bins as f64;
        for (i, c) in counts.iter().enumerate() {
            let h = (SVG_H - 2.0 * MARGIN) * *c as f64 / max_count as f64;
            let x = MARGIN + i as f64 * bar_w;
            let y = SVG_H - MARGIN - h;
            svg.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{}\" height=\"{h}\" \
                 fill=\"steelblue\" stroke=\"white\"/>\n",
                bar_w
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\">range [{lo}, {hi}]</text>\n",
            MARGIN + 10.0,
            MARGIN + 20.0,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Build the plot document for a results table.
pub fn render_plots_svg(table: &ResultsTable) -> String {
    use super::config::ExperimentKind;
    match table.config.kind {
        ExperimentKind::RateScan => {
            let per_n = table.summary.get("per_n").and_then(|v| v.as_array());
            let mut points = Vec::new();
            if let Some(rows) = per_n {
                for row in rows {
                    let n = row.get("n").and_then(|v| v.as_f64());
                    let med = row.get("median_grad_norm").and_then(|v| v.as_f64());
                    if let (Some(n), Some(med)) = (n, med) {
                        points.push((n, med));
                    }
                }
            }
            let slope = table
                .summary
                .get("slope")
                .and_then(|v| v.as_f64())
                .unwrap_or(0.0);
            let intercept = table
                .summary
                .get("intercept")
                .and_then(|v| v.as_f64())
                .unwrap_or(0.0);
            svg_rate_plot(&points, slope, intercept)
        }
        ExperimentKind::EmContinuous | ExperimentKind::EmPacking => {
            let values: Vec<f64> = table.rows.iter().filter_map(|r| r.excess_emp).collect();
            svg_histogram(&values, "empirical excess over the grid minimum")
        }
        _ => {
            let values: Vec<f64> = table.rows.iter().filter_map(|r| r.grad_norm).collect();
            svg_histogram(&values, "exact gradient norm at the reported point")
        }
    }
}

/// Write results.csv, summary.json, and plots.svg into `dir`.
pub fn emit_report(table: &ResultsTable, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), render_results_csv(table))?;
    let summary = serde_json::to_string_pretty(&table.summary)
        .map_err(|e| HarnessError::Verify(format!("summary serialization: {e}")))?;
    fs::write(dir.join("summary.json"), summary + "\n")?;
    fs::write(dir.join("plots.svg"), render_plots_svg(table))?;
    Ok(())
}

/// One named check of the verification pass.
#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub checks: Vec<(String, bool, String)>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|(_, ok, _)| *ok)
    }
}

fn parse_opt(field: &str) -> Option<f64> {
    if field.is_empty() {
        None
    } else {
        field.parse().ok()
    }
}

/// Re-check the certificates recorded in an emitted report directory:
/// stationarity certificates are recomputed from the logged statistics,
/// ledger totals are compared against the configured budget, and the
/// aggregates are recomputed from the rows.
pub fn verify_results(dir: &Path) -> Result<VerifyReport, HarnessError> {
    let csv_path = if dir.is_dir() {
        dir.join("results.csv")
    } else {
        dir.to_path_buf()
    };
    let base = csv_path
        .parent()
        .ok_or_else(|| HarnessError::Verify("no parent directory".into()))?;
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(base.join("summary.json"))?)
            .map_err(|e| HarnessError::Verify(format!("summary.json: {e}")))?;
    let csv = fs::read_to_string(&csv_path)?;

    let rho = summary["spec"]["hessian_lipschitz"]
        .as_f64()
        .ok_or_else(|| HarnessError::Verify("missing spec.hessian_lipschitz".into()))?;
    let epsilon = summary["config"]["epsilon"]
        .as_f64()
        .ok_or_else(|| HarnessError::Verify("missing config.epsilon".into()))?;
    let delta = summary["config"]["delta"].as_f64().unwrap_or(0.0);

    let mut lines = csv.lines();
    let header = lines.next().unwrap_or_default();
    let mut checks = Vec::new();
    checks.push((
        "csv_header".to_string(),
        header == CSV_HEADER,
        header.to_string(),
    ));

    let mut cert_ok = true;
    let mut budget_ok = true;
    let mut grads = Vec::new();
    let mut per_n: std::collections::BTreeMap<u64, Vec<f64>> = Default::default();
    let mut row_count = 0usize;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        row_count += 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 15 {
            return Err(HarnessError::Verify(format!("short row: {line}")));
        }
        let n: u64 = fields[2].parse().unwrap_or(0);
        let grad = parse_opt(fields[3]);
        let smin = parse_opt(fields[4]);
        let cert = parse_opt(fields[5]);
        let eps_spent: f64 = fields[6].parse().unwrap_or(f64::NAN);
        let delta_spent: f64 = fields[7].parse().unwrap_or(f64::NAN);
        let status = fields[14];
        if let (Some(g), Some(s), Some(c)) = (grad, smin, cert) {
            let expect = g.max(if s < 0.0 { s * s / rho } else { 0.0 });
            if (c - expect).abs() > 1e-9 * expect.max(1.0) {
                cert_ok = false;
            }
        }
        if !(eps_spent <= epsilon + 1e-12) || !(delta_spent <= delta + 1e-15) {
            budget_ok = false;
        }
        if status == "ok" || status == "fallback_best" {
            if let Some(g) = grad {
                grads.push(g);
                per_n.entry(n).or_default().push(g);
            }
        }
    }
    checks.push((
        "stationarity_certificates".to_string(),
        cert_ok,
        format!("{row_count} rows"),
    ));
    checks.push((
        "ledger_within_budget".to_string(),
        budget_ok,
        format!("epsilon target {epsilon}"),
    ));

    if let Some(q) = summary.get("grad_norm_quartiles") {
        let med = q["median"].as_f64().unwrap_or(f64::NAN);
        let ok = if grads.is_empty() {
            false
        } else {
            let (_, recomputed, _) = quartiles(&grads);
            (med - recomputed).abs() <= 1e-9 * recomputed.abs().max(1.0)
        };
        checks.push(("median_recomputed".to_string(), ok, format!("{med}")));
    }
    if let Some(slope) = summary.get("slope").and_then(|v| v.as_f64()) {
        let mut lx = Vec::new();
        let mut ly = Vec::new();
        for (n, grads_n) in &per_n {
            if grads_n.is_empty() {
                continue;
            }
            lx.push((*n as f64).ln());
            ly.push(super::stats::median(grads_n).ln());
        }
        let ok = if lx.len() >= 2 {
            let fit = least_squares_closed_form(&lx, &ly);
            (fit.slope - slope).abs() <= 1e-9 * slope.abs().max(1.0)
        } else {
            false
        };
        checks.push(("slope_recomputed".to_string(), ok, format!("{slope}")));
    }
    Ok(VerifyReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::runner::run_experiment;
    use crate::harness::ExperimentConfig;

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.kind = crate::harness::ExperimentKind::AboveThreshold;
        cfg.trials = 4;
        cfg.n = 500;
        cfg.alpha = Some(0.1);
        cfg.gd_steps = 20;
        cfg
    }

    #[test]
    fn empty_table_renders_header_only() {
        let cfg = {
            let mut c = small_config();
            c.trials = 0;
            c
        };
        let table = run_experiment(&cfg).unwrap();
        let csv = render_results_csv(&table);
        assert_eq!(csv.trim_end(), CSV_HEADER);
        // Summary stays valid and free of NaN.
        assert!(!serde_json::to_string(&table.summary).unwrap().contains("NaN"));
    }

    #[test]
    fn emit_verify_round_trip() {
        let cfg = small_config();
        let table = run_experiment(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("dpnc_report_{}", std::process::id()));
        emit_report(&table, &dir).unwrap();
        let report = verify_results(&dir).unwrap();
        assert!(report.passed(), "checks: {:?}", report.checks);
        // Re-emitting produces identical bytes.
        let before = std::fs::read(dir.join("results.csv")).unwrap();
        emit_report(&table, &dir).unwrap();
        let after = std::fs::read(dir.join("results.csv")).unwrap();
        assert_eq!(before, after);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn svg_is_emitted_for_histogram_and_rate_plot() {
        let table = run_experiment(&small_config()).unwrap();
        let svg = render_plots_svg(&table);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("</svg>"));
    }
}
