//! Run reports. `report.json` holds only seed-determined content so that
//! reruns are byte-identical; wall-clock timings and the thread count go to
//! `timings.json` next to it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.json";

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub seed: u64,
    pub config_echo: RunConfig,
    /// Input paths as given on the command line.
    pub inputs: BTreeMap<String, String>,
    pub metrics: Metrics,
    pub warnings: Vec<String>,
    /// Written files, relative to the output directory.
    pub artifact_paths: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<StageFailure>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_genes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_cells: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_sparsity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout_mid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_sizes: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_zeros: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_flagged: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flagged_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stratified: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_status_counts: Option<BTreeMap<String, usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deltas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oob_trace: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations_run: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub returned_iteration: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ari: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nmi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wcss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elbow: Option<Vec<(usize, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ari_truth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ari_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ari_after: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nmi_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nmi_after: Option<f64>,
    /// RMSE against the pre-dropout truth over flagged entries.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masked_rmse: Option<f64>,
    /// The same RMSE for the mean-initialized matrix.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_rmse: Option<f64>,
}

impl RunReport {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            seed: config.seed,
            config_echo: config.clone(),
            inputs: BTreeMap::new(),
            metrics: Metrics::default(),
            warnings: Vec::new(),
            artifact_paths: Vec::new(),
            error: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, out_dir: &Path) -> Result<(), CliError> {
        write_file(&out_dir.join(REPORT_FILE), &self.to_json())
    }
}

/// Per-stage wall-clock seconds.
#[derive(Debug, Serialize)]
pub struct Timings {
    pub command: String,
    pub threads: usize,
    pub stages: Vec<(String, f64)>,
    #[serde(skip)]
    start: Option<Instant>,
}

impl Timings {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            threads: rayon::current_num_threads(),
            stages: Vec::new(),
            start: Some(Instant::now()),
        }
    }

    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        log::info!("{name}: started");
        let t = Instant::now();
        let out = f();
        let secs = t.elapsed().as_secs_f64();
        log::info!("{name}: {secs:.2}s");
        self.stages.push((name.to_string(), secs));
        out
    }

    pub fn write(&mut self, out_dir: &Path) -> Result<(), CliError> {
        if let Some(t) = self.start {
            self.stages.push(("total".into(), t.elapsed().as_secs_f64()));
        }
        let mut s = serde_json::to_string_pretty(self).expect("timings serialize");
        s.push('\n');
        write_file(&out_dir.join(TIMINGS_FILE), &s)
    }
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
