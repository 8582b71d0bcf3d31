//! CSV traces and JSON summaries.
//!
//! `seed_<N>.csv` holds one row per recorded step with the columns of
//! [`CsvRow`]. A run that stops early gets a final row for the failing step
//! whose `status` is `diverged` or `failed`; its metrics are NaN unless the
//! step produced a record.

use std::fs;
use std::io;
use std::path::Path;

use psilora::tasks::{Aggregate, ExperimentResult, MetricRecord, RunStatus, SeedTrace};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub schema_version: u32,
    pub step: usize,
    pub seed: u64,
    pub loss: f64,
    pub eval: f64,
    pub grad_norm: f64,
    pub rho_used: f64,
    pub elapsed_ms: f64,
    pub status: String,
}

impl CsvRow {
    fn new(r: &MetricRecord, status: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            step: r.step,
            seed: r.seed,
            loss: r.loss,
            eval: r.eval,
            grad_norm: r.grad_norm,
            rho_used: r.rho_used,
            elapsed_ms: r.elapsed_ms,
            status: status.to_string(),
        }
    }

    pub fn record(&self) -> MetricRecord {
        MetricRecord {
            step: self.step,
            seed: self.seed,
            loss: self.loss,
            eval: self.eval,
            grad_norm: self.grad_norm,
            rho_used: self.rho_used,
            elapsed_ms: self.elapsed_ms,
        }
    }
}

fn failing_step(status: &RunStatus) -> Option<usize> {
    match status {
        RunStatus::Ok => None,
        RunStatus::Diverged { step } | RunStatus::Failed { step, .. } => Some(*step),
    }
}

pub fn csv_rows(trace: &SeedTrace) -> Vec<CsvRow> {
    let bad = failing_step(&trace.status);
    let mut rows: Vec<CsvRow> = trace
        .records
        .iter()
        .map(|r| CsvRow::new(r, if Some(r.step) == bad { trace.status.label() } else { "ok" }))
        .collect();
    if let Some(step) = bad {
        if rows.last().map(|r| r.step) != Some(step) {
            let nan = MetricRecord {
                step,
                seed: trace.seed,
                loss: f64::NAN,
                eval: f64::NAN,
                grad_norm: f64::NAN,
                rho_used: f64::NAN,
                elapsed_ms: f64::NAN,
            };
            rows.push(CsvRow::new(&nan, trace.status.label()));
        }
    }
    rows
}

pub fn write_csv<W: io::Write>(trace: &SeedTrace, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in csv_rows(trace) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: io::Read>(input: R) -> csv::Result<Vec<CsvRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

pub fn csv_name(seed: u64) -> String {
    format!("seed_{seed}.csv")
}

pub fn summary_json(result: &ExperimentResult) -> serde_json::Value {
    let seeds: Vec<_> = result
        .traces
        .iter()
        .map(|t| {
            let mut v = serde_json::to_value(&t.status).expect("status serializes");
            v["seed"] = json!(t.seed);
            v
        })
        .collect();
    json!({
        "schema_version": SCHEMA_VERSION,
        "ok": result.all_ok(),
        "seeds": seeds,
        "aggregate": aggregate_json(&result.aggregate),
    })
}

fn aggregate_json(a: &Aggregate) -> serde_json::Value {
    serde_json::to_value(a).expect("aggregate serializes")
}

/// Writes `config.toml`, one CSV per seed and `aggregate.json` into `dir`.
pub fn write_run(dir: &Path, config_text: &str, result: &ExperimentResult) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), config_text)?;
    for trace in &result.traces {
        let file = fs::File::create(dir.join(csv_name(trace.seed)))?;
        write_csv(trace, io::BufWriter::new(file)).map_err(io::Error::other)?;
    }
    write_json(&dir.join("aggregate.json"), &summary_json(result))
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}
