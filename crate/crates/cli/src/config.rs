//! Run configuration: one TOML document with a section per stage. Command
//! line flags are applied on top, and the resolved result is echoed into
//! every report.

use std::fs;
use std::path::Path;

use scrmf_core::forest_impute::{ForestConfig, Mtry};
use scrmf_core::simulate::SimConfig;
use scrmf_core::zinb_dropout::EmConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into the simulator and forest sections on
    /// resolution and used for k-means.
    pub seed: u64,
    pub simulate: SimConfig,
    pub calibrate: CalibrateSection,
    pub detect: DetectSection,
    pub impute: ForestConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            simulate: SimConfig::default(),
            calibrate: CalibrateSection::default(),
            detect: DetectSection::default(),
            impute: ForestConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateSection {
    /// Tune the dropout midpoint to this observed zero fraction before
    /// simulating. Absent means use `simulate.dropout_mid` as given.
    pub target_sparsity: Option<f64>,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        Self {
            target_sparsity: Some(0.8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub max_em_iterations: usize,
    pub em_tolerance: f64,
    /// In `pipeline`, fit per cell group using the known labels.
    pub stratify_by_labels: bool,
}

impl Default for DetectSection {
    fn default() -> Self {
        let em = EmConfig::default();
        Self {
            max_em_iterations: em.max_iterations,
            em_tolerance: em.tolerance,
            stratify_by_labels: false,
        }
    }
}

impl DetectSection {
    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            max_iterations: self.max_em_iterations,
            tolerance: self.em_tolerance,
            ..EmConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: usize,
    pub n_components: usize,
    pub elbow_min: usize,
    pub elbow_max: usize,
    pub n_restarts: usize,
    pub max_kmeans_iterations: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k: 3,
            n_components: 20,
            elbow_min: 1,
            elbow_max: 10,
            n_restarts: 10,
            max_kmeans_iterations: 300,
        }
    }
}

/// Flag values that override the file; `None` leaves the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub target_sparsity: Option<f64>,
    pub ntree: Option<usize>,
    pub mtry: Option<usize>,
    pub min_node_size: Option<usize>,
    pub max_iterations: Option<usize>,
    pub round_counts: bool,
    pub winsorize: bool,
    pub k: Option<usize>,
    pub elbow_min: Option<usize>,
    pub elbow_max: Option<usize>,
    pub stratify_by_labels: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Apply flag overrides, propagate the master seed and validate.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self, CliError> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.target_sparsity {
            self.calibrate.target_sparsity = Some(t);
        }
        let f = &mut self.impute;
        if let Some(v) = o.ntree {
            f.ntree = v;
        }
        if let Some(v) = o.mtry {
            f.mtry = Mtry::Fixed(v);
        }
        if let Some(v) = o.min_node_size {
            f.min_node_size = v;
        }
        if let Some(v) = o.max_iterations {
            f.max_iterations = v;
        }
        f.round_counts |= o.round_counts;
        f.winsorize |= o.winsorize;
        if let Some(v) = o.k {
            self.eval.k = v;
        }
        if let Some(v) = o.elbow_min {
            self.eval.elbow_min = v;
        }
        if let Some(v) = o.elbow_max {
            self.eval.elbow_max = v;
        }
        self.detect.stratify_by_labels |= o.stratify_by_labels;
        self.simulate.seed = self.seed;
        self.impute.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.simulate
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(t) = self.calibrate.target_sparsity {
            if !(t > 0.0 && t < 1.0) {
                return bad(format!("calibrate.target_sparsity must lie in (0, 1), got {t}"));
            }
        }
        let f = &self.impute;
        if f.ntree == 0 || f.min_node_size == 0 || f.max_iterations == 0 {
            return bad("impute.ntree, min_node_size and max_iterations must be positive".into());
        }
        if f.mtry == Mtry::Fixed(0) {
            return bad("impute.mtry must be positive".into());
        }
        let e = &self.eval;
        if e.k == 0 || e.n_components == 0 || e.n_restarts == 0 || e.max_kmeans_iterations == 0 {
            return bad("eval.k, n_components, n_restarts and max_kmeans_iterations must be positive".into());
        }
        if e.elbow_min == 0 || e.elbow_min > e.elbow_max {
            return bad(format!(
                "eval elbow range {}..={} is empty or starts at 0",
                e.elbow_min, e.elbow_max
            ));
        }
        if self.detect.max_em_iterations == 0 || !(self.detect.em_tolerance > 0.0) {
            return bad("detect.max_em_iterations and em_tolerance must be positive".into());
        }
        Ok(())
    }
}
