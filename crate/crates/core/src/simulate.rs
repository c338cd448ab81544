//! Splatter-style synthetic counts with group structure and logistic dropout.
//!
//! The generator keeps the pre-dropout counts so downstream stages can be
//! scored against them. Dropout uses one uniform draw per entry from its own
//! stream, so for a fixed seed the set of dropped entries only grows as the
//! logistic midpoint increases; `calibrate_dropout` relies on that.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Gamma, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forest_impute::derive_seed;
use crate::matrix_io::{default_names, CountMatrix, MatrixError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(
        "target sparsity {target} is unreachable: counts before dropout are already {truth_sparsity:.4} sparse"
    )]
    UnreachableTarget { target: f64, truth_sparsity: f64 },
    #[error("bisection stopped at sparsity {achieved:.4}, target {target}")]
    NoConvergence { target: f64, achieved: f64 },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Generator parameters. Everything except the group probabilities is a
/// tunable default of splatter-like magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_genes: usize,
    pub n_cells: usize,
    pub group_probs: Vec<f64>,
    pub mean_shape: f64,
    pub mean_rate: f64,
    pub de_prob: f64,
    pub de_factor_sd: f64,
    pub libsize_mu: f64,
    pub libsize_sd: f64,
    pub dispersion: f64,
    pub dropout_mid: f64,
    pub dropout_shape: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_genes: 1000,
            n_cells: 800,
            group_probs: vec![0.20, 0.35, 0.45],
            mean_shape: 0.6,
            mean_rate: 0.3,
            de_prob: 0.1,
            de_factor_sd: 0.4,
            libsize_mu: 11.0,
            libsize_sd: 0.2,
            dispersion: 0.1,
            dropout_mid: 0.0,
            dropout_shape: -1.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SimError::Config(msg));
        if self.n_genes == 0 || self.n_cells == 0 {
            return bad(format!("empty shape {}x{}", self.n_genes, self.n_cells));
        }
        if self.group_probs.is_empty() {
            return bad("group_probs is empty".into());
        }
        if let Some(p) = self.group_probs.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return bad(format!("group probability {p} is not positive"));
        }
        let total: f64 = self.group_probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("group_probs sum to {total}, expected 1"));
        }
        for (name, v) in [
            ("mean_shape", self.mean_shape),
            ("mean_rate", self.mean_rate),
            ("dispersion", self.dispersion),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("de_factor_sd", self.de_factor_sd), ("libsize_sd", self.libsize_sd)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.de_prob) {
            return bad(format!("de_prob must lie in [0, 1], got {}", self.de_prob));
        }
        if !self.libsize_mu.is_finite() || !self.dropout_mid.is_finite() {
            return bad("libsize_mu and dropout_mid must be finite".into());
        }
        if !(self.dropout_shape.is_finite() && self.dropout_shape < 0.0) {
            return bad(format!("dropout_shape must be negative, got {}", self.dropout_shape));
        }
        Ok(())
    }
}

pub struct SimOutput {
    pub truth: CountMatrix,
    pub observed: CountMatrix,
    /// Group index per cell.
    pub labels: Vec<usize>,
    /// Gene-major flags for entries that were nonzero in `truth` and zeroed by
    /// dropout.
    pub dropout_mask_true: Vec<bool>,
}

impl SimOutput {
    pub fn was_dropped(&self, gene: usize, cell: usize) -> bool {
        self.dropout_mask_true[gene * self.truth.n_cells() + cell]
    }

    pub fn n_dropped(&self) -> usize {
        self.dropout_mask_true.iter().filter(|&&d| d).count()
    }
}

/// Everything that does not depend on the dropout curve.
struct Base {
    n_genes: usize,
    n_cells: usize,
    labels: Vec<usize>,
    truth: Vec<f64>,
    /// `log2(mu + 1)` of the per-entry expected count.
    log_mean: Vec<f64>,
    uniforms: Vec<f64>,
}

impl Base {
    fn generate(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        let (n_genes, n_cells) = (cfg.n_genes, cfg.n_cells);
        let n_groups = cfg.group_probs.len();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0]));

        let gene_mean = Gamma::new(cfg.mean_shape, 1.0 / cfg.mean_rate)
            .map_err(|e| SimError::Config(e.to_string()))?;
        let base_means: Vec<f64> = (0..n_genes).map(|_| gene_mean.sample(&mut rng)).collect();

        let groups = WeightedIndex::new(&cfg.group_probs).map_err(|e| SimError::Config(e.to_string()))?;
        let labels: Vec<usize> = (0..n_cells).map(|_| groups.sample(&mut rng)).collect();

        // Log-symmetric fold changes, so up- and down-regulation are equally likely.
        let de_factor = Normal::new(0.0, cfg.de_factor_sd).map_err(|e| SimError::Config(e.to_string()))?;
        let mut group_means = vec![0.0; n_groups * n_genes];
        for k in 0..n_groups {
            for g in 0..n_genes {
                let factor = if rng.random::<f64>() < cfg.de_prob {
                    de_factor.sample(&mut rng).exp()
                } else {
                    1.0
                };
                group_means[k * n_genes + g] = base_means[g] * factor;
            }
        }
        let group_totals: Vec<f64> = group_means.chunks(n_genes).map(|m| m.iter().sum()).collect();

        let libsize = LogNormal::new(cfg.libsize_mu, cfg.libsize_sd)
            .map_err(|e| SimError::Config(e.to_string()))?;
        let lib: Vec<f64> = (0..n_cells).map(|_| libsize.sample(&mut rng)).collect();

        // Counts are gamma-Poisson with the common dispersion.
        let shape = 1.0 / cfg.dispersion;
        let mut truth = vec![0.0; n_genes * n_cells];
        let mut log_mean = vec![0.0; n_genes * n_cells];
        for g in 0..n_genes {
            for c in 0..n_cells {
                let k = labels[c];
                let mu = lib[c] * group_means[k * n_genes + g] / group_totals[k];
                let idx = g * n_cells + c;
                log_mean[idx] = mu.ln_1p() / std::f64::consts::LN_2;
                let rate = Gamma::new(shape, mu / shape)
                    .map_err(|e| SimError::Config(e.to_string()))?
                    .sample(&mut rng);
                truth[idx] = if rate > 0.0 {
                    Poisson::new(rate)
                        .map_err(|e| SimError::Config(e.to_string()))?
                        .sample(&mut rng)
                } else {
                    0.0
                };
            }
        }

        let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1]));
        let uniforms = (0..n_genes * n_cells).map(|_| drop_rng.random::<f64>()).collect();

        Ok(Self {
            n_genes,
            n_cells,
            labels,
            truth,
            log_mean,
            uniforms,
        })
    }

    fn truth_sparsity(&self) -> f64 {
        self.truth.iter().filter(|&&v| v == 0.0).count() as f64 / self.truth.len() as f64
    }

    fn dropped(&self, idx: usize, mid: f64, shape: f64) -> bool {
        self.truth[idx] > 0.0 && self.uniforms[idx] < logistic(shape * (self.log_mean[idx] - mid))
    }

    fn sparsity_at(&self, mid: f64, shape: f64) -> f64 {
        let zeros = (0..self.truth.len())
            .filter(|&i| self.truth[i] == 0.0 || self.dropped(i, mid, shape))
            .count();
        zeros as f64 / self.truth.len() as f64
    }

    fn finish(self, mid: f64, shape: f64) -> Result<SimOutput> {
        let dropout_mask_true: Vec<bool> = (0..self.truth.len()).map(|i| self.dropped(i, mid, shape)).collect();
        let observed: Vec<f64> = self
            .truth
            .iter()
            .zip(&dropout_mask_true)
            .map(|(&v, &d)| if d { 0.0 } else { v })
            .collect();
        let genes = default_names("gene", self.n_genes);
        let cells = default_names("cell", self.n_cells);
        let truth = CountMatrix::from_dense(self.n_genes, self.n_cells, &self.truth, genes.clone(), cells.clone())?;
        let observed = CountMatrix::from_dense(self.n_genes, self.n_cells, &observed, genes, cells)?;
        Ok(SimOutput {
            truth,
            observed,
            labels: self.labels,
            dropout_mask_true,
        })
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Generate one dataset. Deterministic in `config.seed`.
pub fn simulate(config: &SimConfig) -> Result<SimOutput> {
    let base = Base::generate(config)?;
    base.finish(config.dropout_mid, config.dropout_shape)
}

/// Observed zero fraction for `config` without materializing the matrices.
pub fn observed_sparsity(config: &SimConfig) -> Result<f64> {
    let base = Base::generate(config)?;
    Ok(base.sparsity_at(config.dropout_mid, config.dropout_shape))
}

pub const CALIBRATION_TOLERANCE: f64 = 0.02;
const MAX_BISECTIONS: usize = 40;

/// Bisect `dropout_mid` until the observed zero fraction is within 0.02 of
/// `target_sparsity`. Returns the updated config.
pub fn calibrate_dropout(config: &SimConfig, target_sparsity: f64) -> Result<SimConfig> {
    if !(target_sparsity > 0.0 && target_sparsity < 1.0) {
        return Err(SimError::Config(format!(
            "target sparsity must lie in (0, 1), got {target_sparsity}"
        )));
    }
    let base = Base::generate(config)?;
    let truth_sparsity = base.truth_sparsity();
    if truth_sparsity >= target_sparsity {
        return Err(SimError::UnreachableTarget {
            target: target_sparsity,
            truth_sparsity,
        });
    }
    let shape = config.dropout_shape;
    // 40 / |shape| past the extreme means saturates the logistic to ~1e-17.
    let reach = 40.0 / shape.abs();
    let (lo_x, hi_x) = base
        .log_mean
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (mut lo, mut hi) = (lo_x - reach, hi_x + reach);
    let mut mid = 0.5 * (lo + hi);
    let mut achieved = base.sparsity_at(mid, shape);
    for _ in 0..MAX_BISECTIONS {
        if (achieved - target_sparsity).abs() < CALIBRATION_TOLERANCE {
            return Ok(SimConfig {
                dropout_mid: mid,
                ..config.clone()
            });
        }
        if achieved < target_sparsity {
            lo = mid;
        } else {
            hi = mid;
        }
        mid = 0.5 * (lo + hi);
        achieved = base.sparsity_at(mid, shape);
    }
    if (achieved - target_sparsity).abs() < CALIBRATION_TOLERANCE {
        return Ok(SimConfig {
            dropout_mid: mid,
            ..config.clone()
        });
    }
    Err(SimError::NoConvergence {
        target: target_sparsity,
        achieved,
    })
}
