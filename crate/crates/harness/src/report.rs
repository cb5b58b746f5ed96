//! Report files: JSON, plot-ready CSV, the config, and wall-clock timings.
//!
//! `results.csv` columns: experiment, scenario, mode, attackers, epsilon,
//! phi, instances, ap, no_ground_truth, tpr, fpr, flagged_malicious,
//! malicious, flagged_benign, benign. Empty `tpr`/`fpr` cells mean the
//! rate is undefined (no agents of that kind).
//!
//! `verdicts.csv` columns: row (index into results.csv), scene, ego,
//! agent, malicious, flagged, match_loss, recon_loss, p_match, p_recon,
//! rule, mad_score.
//!
//! `traces.csv` columns: scene, ego, mode, attackers, epsilon, run,
//! iterate, objective.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::experiment::{Report, ResultRow, VerdictRecord};
use crate::lab::write_atomic;

pub const REPORT_JSON: &str = "report.json";
pub const RESULTS_CSV: &str = "results.csv";
pub const VERDICTS_CSV: &str = "verdicts.csv";
pub const TRACES_CSV: &str = "traces.csv";
pub const CONFIG_TOML: &str = "config.toml";
pub const TIMING_JSON: &str = "timing.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Serialize)]
struct TraceRow<'a> {
    scene: usize,
    ego: usize,
    mode: &'a str,
    attackers: usize,
    epsilon: f64,
    run: usize,
    iterate: usize,
    objective: f64,
}

pub fn report_json(report: &Report) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn parse_report(bytes: &[u8]) -> Result<Report> {
    Ok(serde_json::from_slice(bytes)?)
}

fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| HarnessError::Serde(e.to_string()))
}

pub fn results_csv(report: &Report) -> Result<Vec<u8>> {
    to_csv(&report.rows)
}

pub fn parse_results_csv(bytes: &[u8]) -> Result<Vec<ResultRow>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .map(|r| r.map_err(HarnessError::from))
        .collect()
}

pub fn parse_verdicts_csv(bytes: &[u8]) -> Result<Vec<VerdictRecord>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .map(|r| r.map_err(HarnessError::from))
        .collect()
}

/// Writes the requested formats plus the config into `dir`; returns the written paths.
pub fn emit_report(report: &Report, dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>> {
    let mut files: Vec<(&str, Vec<u8>)> = vec![(CONFIG_TOML, report.config.to_toml()?.into_bytes())];
    if formats.contains(&Format::Json) {
        files.push((REPORT_JSON, report_json(report)?));
    }
    if formats.contains(&Format::Csv) {
        files.push((RESULTS_CSV, results_csv(report)?));
        files.push((VERDICTS_CSV, to_csv(&report.verdicts)?));
        let traces = report.traces.iter().flat_map(|t| {
            t.traces.iter().enumerate().flat_map(move |(run, values)| {
                values.iter().enumerate().map(move |(iterate, &objective)| TraceRow {
                    scene: t.scene,
                    ego: t.ego,
                    mode: &t.mode,
                    attackers: t.attackers,
                    epsilon: t.epsilon,
                    run,
                    iterate,
                    objective,
                })
            })
        });
        files.push((TRACES_CSV, to_csv(traces)?));
    }
    let mut written = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_report(dir: &Path) -> Result<Report> {
    let path = dir.join(REPORT_JSON);
    let bytes = std::fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
    parse_report(&bytes)
}

/// Seconds per stage. Kept out of the report so reports stay reproducible.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stages: BTreeMap<String, f64>,
}

impl Timing {
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = std::time::Instant::now();
        let out = f();
        *self.stages.entry(stage.to_string()).or_default() += start.elapsed().as_secs_f64();
        out
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(TIMING_JSON);
        write_atomic(&path, &serde_json::to_vec_pretty(self)?)?;
        Ok(path)
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.3}", x))
}

/// Markdown tables, one per experiment.
pub fn render_markdown(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {} (config {})\n", report.config.name, &report.config_hash[..12]);
    let mut experiments: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !experiments.contains(&r.experiment.as_str()) {
            experiments.push(&r.experiment);
        }
    }
    for e in experiments {
        let _ = writeln!(out, "## {e}\n");
        let _ = writeln!(out, "| scenario | mode | attackers | epsilon | phi | AP@0.5 | TPR | FPR |");
        let _ = writeln!(out, "|---|---|---|---|---|---|---|---|");
        for r in report.rows.iter().filter(|r| r.experiment == e) {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {:.2} | {} | {} |",
                r.scenario,
                r.mode,
                r.attackers,
                r.epsilon,
                r.phi,
                r.ap,
                pct(r.tpr),
                pct(r.fpr)
            );
        }
        out.push('\n');
    }
    let _ = writeln!(out, "## audits\n");
    for a in &report.audits {
        let status = if a.passed { "ok" } else { "FAILED" };
        let _ = writeln!(out, "- {}: {} ({} checked, {} violations)", a.name, status, a.checked, a.violations);
    }
    out
}
