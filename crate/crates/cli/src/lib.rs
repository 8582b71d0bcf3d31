//! Experiment harness behind the `psilora` binary.

pub mod config;
pub mod output;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Context;
use psilora::tasks::{run_experiment, ExperimentConfig, ExperimentResult};
use serde_json::json;

use config::{emit, GridPoint};

pub const DEFAULT_OUT_DIR: &str = "runs";

/// Output directory: explicit flag or environment first, then the config's
/// `output` key, then [`DEFAULT_OUT_DIR`].
pub fn out_dir(flag: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Runs every seed of `config` and writes the run files into `dir`.
pub fn run_to_dir(config: &ExperimentConfig, dir: &Path) -> anyhow::Result<ExperimentResult> {
    let result = run_experiment(config).context("experiment setup failed")?;
    output::write_run(dir, &emit(config), &result).with_context(|| format!("writing {}", dir.display()))?;
    Ok(result)
}

/// Outcome of one grid point.
#[derive(Debug)]
pub struct GridOutcome {
    pub dir: PathBuf,
    pub result: anyhow::Result<ExperimentResult>,
}

impl GridOutcome {
    pub fn ok(&self) -> bool {
        matches!(&self.result, Ok(r) if r.all_ok())
    }
}

/// Runs each grid point into `dir/run_NNN` on up to `jobs` threads, then
/// writes `dir/grid.json` indexing the runs by their parameters.
pub fn run_grid(points: &[GridPoint], dir: &Path, jobs: usize) -> anyhow::Result<Vec<GridOutcome>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<GridOutcome>>> = points.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, points.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(point) = points.get(i) else { break };
                let run_dir = dir.join(format!("run_{i:03}"));
                let result = run_to_dir(&point.config, &run_dir);
                *slots[i].lock().unwrap() = Some(GridOutcome { dir: run_dir, result });
            });
        }
    });
    let outcomes: Vec<GridOutcome> = slots.into_iter().map(|m| m.into_inner().unwrap().expect("every point ran")).collect();

    let runs: Vec<_> = points
        .iter()
        .zip(&outcomes)
        .enumerate()
        .map(|(i, (p, o))| {
            let params: serde_json::Map<_, _> =
                p.params.iter().map(|(k, v)| (k.clone(), toml_to_json(v))).collect();
            let mut entry = json!({
                "index": i,
                "dir": o.dir.file_name().map(|f| f.to_string_lossy().into_owned()),
                "params": params,
            });
            match &o.result {
                Ok(r) => {
                    entry["ok"] = json!(r.all_ok());
                    entry["aggregate"] = serde_json::to_value(&r.aggregate).expect("aggregate serializes");
                }
                Err(e) => {
                    entry["ok"] = json!(false);
                    entry["error"] = json!(format!("{e:#}"));
                }
            }
            entry
        })
        .collect();
    output::write_json(&dir.join("grid.json"), &json!({ "schema_version": output::SCHEMA_VERSION, "runs": runs }))?;
    Ok(outcomes)
}

fn toml_to_json(v: &toml::Value) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}
