//! Delimiter-separated output tables. Every file starts with `#` lines
//! carrying the digests of its inputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use evgame::metrics::{BaselineResult, ExpectedOutcome, SavingsReport};
use evgame::outer::{BehaviorModel, ModelKind, OuterSolution};

use crate::SolutionFile;

/// One solution evaluated against the scenario and tensor.
pub struct Column {
    pub label: String,
    pub solution_path: String,
    pub outcome: ExpectedOutcome,
    pub report: SavingsReport,
}

/// Short comma-free name for a behaviour model.
pub fn model_label(model: &BehaviorModel) -> String {
    match model.kind {
        ModelKind::Eut => "eut".to_string(),
        ModelKind::Pt => {
            let first = model.alphas.first().copied().unwrap_or(1.0);
            if model.alphas.iter().all(|&a| a == first) {
                format!("pt_{first}")
            } else {
                let parts: Vec<String> = model.alphas.iter().map(|a| a.to_string()).collect();
                format!("pt_{}", parts.join("_"))
            }
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn digest_header(out: &mut String, baseline: &BaselineResult, columns: &[Column]) {
    let _ = writeln!(out, "# scenario_digest={}", baseline.scenario_digest);
    if let Some(first) = columns.first() {
        let _ = writeln!(out, "# tensor_digest={}", first.outcome.tensor_digest);
    }
    for c in columns {
        let _ = writeln!(out, "# solution {}={}", c.label, c.solution_path);
    }
}

/// Makes labels unique by suffixing repeats with their position.
fn unique_labels(columns: &mut [Column]) {
    for k in 1..columns.len() {
        if columns[..k].iter().any(|c| c.label == columns[k].label) {
            columns[k].label = format!("{}_{}", columns[k].label, k + 1);
        }
    }
}

/// Writes savings.csv, par.csv, expected_load.csv and slot1_load.csv into
/// `dir` and returns their paths.
pub fn write_report(
    dir: &Path,
    base_load: &[f64],
    baseline: &BaselineResult,
    columns: &mut [Column],
) -> Result<Vec<PathBuf>> {
    unique_labels(columns);
    let columns = &*columns;
    let n = baseline.costs.len();
    let horizon = baseline.aggregate_load.len();
    let mut written = Vec::new();

    let mut savings = String::new();
    digest_header(&mut savings, baseline, columns);
    savings.push_str("solution,aggregator,baseline_cost,expected_cost,savings_pct\n");
    for c in columns {
        for i in 0..n {
            let _ = writeln!(
                savings,
                "{},{},{},{},{}",
                c.label,
                i + 1,
                c.report.baseline_costs[i],
                c.report.expected_costs[i],
                c.report.savings_pct[i]
            );
        }
    }
    let path = dir.join("savings.csv");
    write_file(&path, &savings)?;
    written.push(path);

    let mut par = String::new();
    digest_header(&mut par, baseline, columns);
    par.push_str("solution,baseline_par,coordinated_par,par_reduction_pct\n");
    for c in columns {
        let _ = writeln!(
            par,
            "{},{},{},{}",
            c.label, c.report.baseline_par, c.report.coordinated_par, c.report.par_reduction_pct
        );
    }
    let path = dir.join("par.csv");
    write_file(&path, &par)?;
    written.push(path);

    let mut load = String::new();
    digest_header(&mut load, baseline, columns);
    load.push_str("slot,base_load,baseline");
    for c in columns {
        let _ = write!(load, ",{}", c.label);
    }
    load.push('\n');
    for t in 0..horizon {
        let _ = write!(load, "{},{},{}", t + 1, base_load[t], baseline.aggregate_load[t]);
        for c in columns {
            let _ = write!(load, ",{}", c.outcome.aggregate_load[t]);
        }
        load.push('\n');
    }
    let path = dir.join("expected_load.csv");
    write_file(&path, &load)?;
    written.push(path);

    let mut slot1 = String::new();
    digest_header(&mut slot1, baseline, columns);
    slot1.push_str("aggregator,baseline");
    for c in columns {
        let _ = write!(slot1, ",{}", c.label);
    }
    slot1.push('\n');
    for i in 0..n {
        let _ = write!(slot1, "{},{}", i + 1, baseline.profiles[i][0]);
        for c in columns {
            let _ = write!(slot1, ",{}", c.outcome.expected_loads[i][0]);
        }
        slot1.push('\n');
    }
    let path = dir.join("slot1_load.csv");
    write_file(&path, &slot1)?;
    written.push(path);

    Ok(written)
}

/// One α-sweep row: the uniform α and its solve.
pub type SweepRow<'a> = (f64, &'a OuterSolution, &'a SavingsReport);

pub fn write_sweep(path: &Path, scenario_digest: &str, tensor_digest: &str, rows: &[SweepRow<'_>]) -> Result<()> {
    let n = rows.first().map_or(0, |r| r.1.strategies.len());
    let mut out = String::new();
    let _ = writeln!(out, "# scenario_digest={scenario_digest}");
    let _ = writeln!(out, "# tensor_digest={tensor_digest}");
    out.push_str("alpha,epsilon,iterations,converged,coordinated_par,par_reduction_pct");
    for prefix in ["savings_pct", "mode", "modal_prob"] {
        for i in 1..=n {
            let _ = write!(out, ",{prefix}_{i}");
        }
    }
    out.push('\n');
    for (alpha, solution, report) in rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            alpha,
            solution.epsilon,
            solution.iterations,
            solution.converged,
            report.coordinated_par,
            report.par_reduction_pct
        );
        for s in &report.savings_pct {
            let _ = write!(out, ",{s}");
        }
        for a in &solution.strategies {
            let _ = write!(out, ",{}", a.mode());
        }
        for a in &solution.strategies {
            let _ = write!(out, ",{}", a.probs[a.mode() - 1]);
        }
        out.push('\n');
    }
    write_file(path, &out)
}

/// Human-readable summary of a solve on stdout.
pub fn print_summary(file: &SolutionFile) {
    let s = &file.solution;
    let r = &file.report;
    println!("aggregator  mode  modal_prob  baseline_cost  expected_cost  savings_pct");
    for (i, a) in s.strategies.iter().enumerate() {
        let mode = a.mode();
        println!(
            "{:>10}  {:>4}  {:>10.6}  {:>13.4}  {:>13.4}  {:>11.4}",
            i + 1,
            mode,
            a.probs[mode - 1],
            r.baseline_costs[i],
            r.expected_costs[i],
            r.savings_pct[i]
        );
    }
    println!(
        "par baseline={:.6} coordinated={:.6} reduction_pct={:.4}",
        r.baseline_par, r.coordinated_par, r.par_reduction_pct
    );
}
