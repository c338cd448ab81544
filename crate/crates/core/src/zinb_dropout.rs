//! Dropout detection: per-gene zero-inflated negative binomial fits, the
//! dropout posterior for observed zeros, per-cell dropout budgets and the
//! resulting imputation mask.
//!
//! The NB component uses the size/success parameterization
//! `P(x) = C(x + r - 1, x) p^x (1 - p)^r`, so `P(0) = (1 - p)^r` and the mean
//! is `r p / (1 - p)`.

use rayon::prelude::*;
use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

use crate::matrix_io::CountMatrix;

pub const R_MIN: f64 = 1e-3;
pub const R_MAX: f64 = 1e6;

#[derive(Debug, Error, PartialEq)]
pub enum ZinbError {
    #[error("need at least 2 observations, got {0}")]
    InsufficientData(usize),
    #[error("observation {index} = {value} is not a nonnegative integer count")]
    NonIntegerCount { index: usize, value: f64 },
    #[error("no fit for gene {gene} in stratum {stratum}, which has zeros")]
    MissingFit { gene: usize, stratum: usize },
    #[error("invalid strata: {0}")]
    InvalidStrata(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, ZinbError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub max_iterations: usize,
    /// Relative change of the log-likelihood below which EM stops.
    pub tolerance: f64,
    /// Maximum distance from an integer accepted as a raw count.
    pub integer_tolerance: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-6,
            integer_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    /// EM hit `max_iterations`; the last iterate is returned.
    NonConvergence,
    /// Every count is zero: theta = 1, no dropout candidates are informative.
    AllZero,
    /// No zeros: theta = 0 and a plain NB fit.
    NoZero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZinbFit {
    /// Probability that a zero is structural.
    pub theta: f64,
    /// NB size.
    pub r: f64,
    /// NB success probability.
    pub p: f64,
    pub log_likelihood: f64,
    pub n_iterations: usize,
    pub converged: bool,
    pub status: FitStatus,
    /// Observed-data log-likelihood after initialization and after each EM
    /// iteration.
    pub ll_trace: Vec<f64>,
}

impl ZinbFit {
    pub fn nb_zero_prob(&self) -> f64 {
        nb_zero_prob(self.r, self.p)
    }

    pub fn nb_mean(&self) -> f64 {
        self.r * self.p / (1.0 - self.p)
    }
}

/// `(1 - p)^r`.
pub fn nb_zero_prob(r: f64, p: f64) -> f64 {
    (r * (-p).ln_1p()).exp()
}

/// Probability that an observed zero came from the NB component:
/// `(1 - theta) P0 / (theta + (1 - theta) P0)` with `P0 = (1 - p)^r`.
pub fn dropout_posterior(fit: &ZinbFit) -> f64 {
    posterior_from_params(fit.theta, fit.r, fit.p)
}

pub fn posterior_from_params(theta: f64, r: f64, p: f64) -> f64 {
    if theta <= 0.0 {
        return 1.0;
    }
    if theta >= 1.0 {
        return 0.0;
    }
    let nb0 = (1.0 - theta) * nb_zero_prob(r, p);
    nb0 / (theta + nb0)
}

// ---------------------------------------------------------------------------
// EM
// ---------------------------------------------------------------------------

/// Distinct nonzero counts with multiplicities.
struct CountTable {
    n_zero: f64,
    values: Vec<(f64, f64)>,
}

impl CountTable {
    fn new(xs: &[u64]) -> Self {
        let mut sorted: Vec<u64> = xs.to_vec();
        sorted.sort_unstable();
        let mut values: Vec<(f64, f64)> = Vec::new();
        let mut n_zero = 0.0;
        for x in sorted {
            if x == 0 {
                n_zero += 1.0;
            } else if let Some(last) = values.last_mut().filter(|l| l.0 == x as f64) {
                last.1 += 1.0;
            } else {
                values.push((x as f64, 1.0));
            }
        }
        Self { n_zero, values }
    }

    fn n(&self) -> f64 {
        self.n_zero + self.values.iter().map(|v| v.1).sum::<f64>()
    }
}

/// `ln Γ(x + r) - ln Γ(r)`, summed exactly for small integer `x`.
fn ln_gamma_ratio(x: f64, r: f64) -> f64 {
    if x <= 64.0 {
        (0..x as u64).map(|j| (r + j as f64).ln()).sum()
    } else {
        ln_gamma(x + r) - ln_gamma(r)
    }
}

/// `ψ(x + r) - ψ(r)` and `ψ'(x + r) - ψ'(r)`.
fn digamma_ratio(x: f64, r: f64) -> (f64, f64) {
    if x <= 64.0 {
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for j in 0..x as u64 {
            let t = 1.0 / (r + j as f64);
            d1 += t;
            d2 -= t * t;
        }
        (d1, d2)
    } else {
        (digamma(x + r) - digamma(r), trigamma(x + r) - trigamma(r))
    }
}

/// Trigamma via upward recurrence and the asymptotic expansion.
pub(crate) fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 20.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x
        + x2 / 2.0
        + (1.0 / x)
            * x2
            * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 * (1.0 / 30.0))))
}

fn nb_log_pmf_unnormalized(x: f64, r: f64, ln_p: f64, ln_q: f64) -> f64 {
    ln_gamma_ratio(x, r) + x * ln_p + r * ln_q
}

fn observed_log_likelihood(t: &CountTable, theta: f64, r: f64, p: f64) -> f64 {
    let ln_p = p.ln();
    let ln_q = (-p).ln_1p();
    let p0 = (r * ln_q).exp();
    let mut ll = 0.0;
    if t.n_zero > 0.0 {
        ll += t.n_zero * (theta + (1.0 - theta) * p0).ln();
    }
    let ln_keep = (-theta).ln_1p();
    for &(x, n) in &t.values {
        ll += n * (ln_keep + nb_log_pmf_unnormalized(x, r, ln_p, ln_q) - ln_gamma(x + 1.0));
    }
    ll
}

/// Weighted NB log-likelihood profiled over `p` at fixed `r`, with the
/// `ln x!` terms dropped.
fn nb_profile(t: &CountTable, zero_weight: f64, r: f64, w: f64, s: f64) -> f64 {
    let m = s / w;
    let ln_p = (m / (r + m)).ln();
    let ln_q = (r / (r + m)).ln();
    let mut ll = zero_weight * r * ln_q;
    for &(x, n) in &t.values {
        ll += n * nb_log_pmf_unnormalized(x, r, ln_p, ln_q);
    }
    ll
}

/// Weighted NB maximization over `(r, p)` starting from `r0`. Zeros carry
/// `zero_weight` in total, nonzero counts weight 1. `p` is profiled out in
/// closed form; `r` is updated by damped Newton steps on `ln r` that never
/// decrease the profile likelihood.
fn weighted_nb_update(t: &CountTable, zero_weight: f64, r0: f64) -> (f64, f64) {
    let w = zero_weight + t.values.iter().map(|v| v.1).sum::<f64>();
    let s: f64 = t.values.iter().map(|&(x, n)| x * n).sum();
    let m = s / w;
    let mut r = r0.clamp(R_MIN, R_MAX);
    let mut f = nb_profile(t, zero_weight, r, w, s);
    for _ in 0..100 {
        let (mut g, mut h) = (0.0, 0.0);
        for &(x, n) in &t.values {
            let (d1, d2) = digamma_ratio(x, r);
            g += n * d1;
            h += n * d2;
        }
        g += w * (r / (r + m)).ln();
        h += w * m / (r * (r + m));
        // Derivatives with respect to u = ln r.
        let gu = r * g;
        let hu = r * r * h + r * g;
        let mut step = if hu < 0.0 { -gu / hu } else { gu.signum() };
        step = step.clamp(-5.0, 5.0);
        if step.abs() < 1e-10 {
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let cand = (r.ln() + step).exp().clamp(R_MIN, R_MAX);
            let fc = nb_profile(t, zero_weight, cand, w, s);
            if fc >= f {
                let moved = (cand - r).abs() > 0.0;
                r = cand;
                f = fc;
                accepted = moved;
                break;
            }
            step *= 0.5;
        }
        if !accepted || step.abs() < 1e-10 {
            break;
        }
    }
    (r, m / (r + m))
}

fn to_counts(counts: &[f64], tol: f64) -> Result<Vec<u64>> {
    counts
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            let rounded = value.round();
            if !value.is_finite() || value < 0.0 || (value - rounded).abs() > tol {
                Err(ZinbError::NonIntegerCount { index, value })
            } else {
                Ok(rounded as u64)
            }
        })
        .collect()
}

/// Method-of-moments NB start on all observations.
fn moment_start(t: &CountTable) -> (f64, f64) {
    let n = t.n();
    let mean = t.values.iter().map(|&(x, k)| x * k).sum::<f64>() / n;
    let var = (t.n_zero * mean * mean
        + t.values
            .iter()
            .map(|&(x, k)| k * (x - mean) * (x - mean))
            .sum::<f64>())
        / (n - 1.0);
    let r = if var > mean {
        (mean * mean / (var - mean)).clamp(R_MIN, R_MAX)
    } else {
        R_MAX
    };
    (r, mean / (r + mean))
}

/// Fits a ZINB to the counts of one gene (within one stratum) by EM.
pub fn fit_zinb(counts: &[f64], cfg: &EmConfig) -> Result<ZinbFit> {
    if counts.len() < 2 {
        return Err(ZinbError::InsufficientData(counts.len()));
    }
    let xs = to_counts(counts, cfg.integer_tolerance)?;
    let table = CountTable::new(&xs);
    let n = table.n();

    if table.values.is_empty() {
        return Ok(ZinbFit {
            theta: 1.0,
            r: 1.0,
            p: 0.5,
            log_likelihood: 0.0,
            n_iterations: 0,
            converged: true,
            status: FitStatus::AllZero,
            ll_trace: vec![0.0],
        });
    }

    let (r_mom, _) = moment_start(&table);
    if table.n_zero == 0.0 {
        let (r, p) = weighted_nb_update(&table, 0.0, r_mom);
        let ll = observed_log_likelihood(&table, 0.0, r, p);
        return Ok(ZinbFit {
            theta: 0.0,
            r,
            p,
            log_likelihood: ll,
            n_iterations: 0,
            converged: true,
            status: FitStatus::NoZero,
            ll_trace: vec![ll],
        });
    }

    let (mut r, mut p) = moment_start(&table);
    let zero_frac = table.n_zero / n;
    let mut theta = (zero_frac - nb_zero_prob(r, p)).clamp(0.01, 0.99);
    let mut ll = observed_log_likelihood(&table, theta, r, p);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..cfg.max_iterations {
        iterations += 1;
        // E-step: structural responsibility is shared by all zeros.
        let p0 = nb_zero_prob(r, p);
        let gamma = theta / (theta + (1.0 - theta) * p0);
        // M-step.
        let new_theta = table.n_zero * gamma / n;
        let (new_r, new_p) = weighted_nb_update(&table, table.n_zero * (1.0 - gamma), r);
        let new_ll = observed_log_likelihood(&table, new_theta, new_r, new_p);
        // Numerical guard: a generalized EM step cannot lower the likelihood,
        // so a lower value here is rounding noise in the M-step.
        if new_ll < ll {
            converged = (ll - new_ll) <= cfg.tolerance * ll.abs().max(1.0);
            trace.push(ll);
            break;
        }
        theta = new_theta;
        r = new_r;
        p = new_p;
        let rel = (new_ll - ll).abs() / ll.abs().max(f64::MIN_POSITIVE);
        ll = new_ll;
        trace.push(ll);
        if rel < cfg.tolerance {
            converged = true;
            break;
        }
    }

    Ok(ZinbFit {
        theta,
        r,
        p,
        log_likelihood: ll,
        n_iterations: iterations,
        converged,
        status: if converged {
            FitStatus::Converged
        } else {
            FitStatus::NonConvergence
        },
        ll_trace: trace,
    })
}

// ---------------------------------------------------------------------------
// Strata and per-gene fits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StratumLabels {
    labels: Vec<usize>,
    n_strata: usize,
}

impl StratumLabels {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        let n_strata = labels.iter().max().map_or(0, |m| m + 1);
        if n_strata == 0 {
            return Err(ZinbError::InvalidStrata("no cells".into()));
        }
        let mut sizes = vec![0usize; n_strata];
        for &l in &labels {
            sizes[l] += 1;
        }
        if let Some(k) = sizes.iter().position(|&s| s == 0) {
            return Err(ZinbError::InvalidStrata(format!("stratum {k} is empty")));
        }
        Ok(Self { labels, n_strata })
    }

    pub fn single(n_cells: usize) -> Self {
        Self {
            labels: vec![0; n_cells],
            n_strata: 1,
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_strata(&self) -> usize {
        self.n_strata
    }

    /// Cell indices of each stratum.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_strata];
        for (c, &l) in self.labels.iter().enumerate() {
            out[l].push(c);
        }
        out
    }
}

/// Fits for every (gene, stratum) pair, `None` where no fit was made.
#[derive(Debug, Clone)]
pub struct GeneFits {
    n_genes: usize,
    n_strata: usize,
    fits: Vec<Option<ZinbFit>>,
}

impl GeneFits {
    pub fn new(n_genes: usize, n_strata: usize) -> Self {
        Self {
            n_genes,
            n_strata,
            fits: vec![None; n_genes * n_strata],
        }
    }

    pub fn get(&self, gene: usize, stratum: usize) -> Option<&ZinbFit> {
        self.fits[gene * self.n_strata + stratum].as_ref()
    }

    pub fn set(&mut self, gene: usize, stratum: usize, fit: ZinbFit) {
        self.fits[gene * self.n_strata + stratum] = Some(fit);
    }

    pub fn n_genes(&self) -> usize {
        self.n_genes
    }

    pub fn n_strata(&self) -> usize {
        self.n_strata
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &ZinbFit)> {
        self.fits.iter().enumerate().filter_map(|(i, f)| {
            f.as_ref()
                .map(|f| (i / self.n_strata, i % self.n_strata, f))
        })
    }
}

/// Fits every gene (within every stratum). Genes are independent and run in
/// parallel; results do not depend on scheduling. A stratum with a single
/// cell borrows the gene's unstratified fit.
pub fn fit_genes(
    m: &CountMatrix,
    strata: Option<&StratumLabels>,
    cfg: &EmConfig,
) -> Result<GeneFits> {
    let single = StratumLabels::single(m.n_cells());
    let strata = strata.unwrap_or(&single);
    if strata.labels().len() != m.n_cells() {
        return Err(ZinbError::Shape(format!(
            "{} stratum labels for {} cells",
            strata.labels().len(),
            m.n_cells()
        )));
    }
    let members = strata.members();
    let per_gene: Vec<Vec<ZinbFit>> = (0..m.n_genes())
        .into_par_iter()
        .map(|g| {
            let mut row = vec![0.0; m.n_cells()];
            for (c, v) in m.row(g) {
                row[c] = v;
            }
            let mut global: Option<ZinbFit> = None;
            members
                .iter()
                .map(|cells| {
                    if cells.len() < 2 {
                        if global.is_none() {
                            global = Some(fit_zinb(&row, cfg)?);
                        }
                        return Ok(global.clone().unwrap());
                    }
                    let vals: Vec<f64> = cells.iter().map(|&c| row[c]).collect();
                    fit_zinb(&vals, cfg)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut fits = GeneFits::new(m.n_genes(), strata.n_strata());
    for (g, row) in per_gene.into_iter().enumerate() {
        for (k, f) in row.into_iter().enumerate() {
            fits.set(g, k, f);
        }
    }
    Ok(fits)
}

// ---------------------------------------------------------------------------
// Dropout budgets
// ---------------------------------------------------------------------------

/// Per-cell number of zeros to treat as dropouts.
pub trait TargetEstimator {
    fn estimate(&self, m: &CountMatrix) -> Vec<usize>;
}

/// Chao1 richness gap: `f1^2 / (2 f2)` unseen genes per cell, or the
/// bias-corrected `f1 (f1 - 1) / 2` when there are no doubletons. The result
/// is rounded and clamped to the cell's zero count.
#[derive(Debug, Clone, Copy, Default)]
pub struct Chao1Gap;

impl Chao1Gap {
    pub fn gap(f1: usize, f2: usize) -> f64 {
        let f1 = f1 as f64;
        if f2 > 0 {
            f1 * f1 / (2.0 * f2 as f64)
        } else {
            f1 * (f1 - 1.0).max(0.0) / 2.0
        }
    }
}

impl TargetEstimator for Chao1Gap {
    fn estimate(&self, m: &CountMatrix) -> Vec<usize> {
        let mut f1 = vec![0usize; m.n_cells()];
        let mut f2 = vec![0usize; m.n_cells()];
        for (_, c, v) in m.entries() {
            if (v - 1.0).abs() <= 1e-6 {
                f1[c] += 1;
            } else if (v - 2.0).abs() <= 1e-6 {
                f2[c] += 1;
            }
        }
        m.zeros_per_cell()
            .into_iter()
            .enumerate()
            .map(|(c, zeros)| {
                let gap = Self::gap(f1[c], f2[c]).round();
                (gap.max(0.0) as usize).min(zeros)
            })
            .collect()
    }
}

pub fn estimate_dropout_targets(m: &CountMatrix) -> Vec<usize> {
    Chao1Gap.estimate(m)
}

// ---------------------------------------------------------------------------
// Mask
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    n_genes: usize,
    n_cells: usize,
    /// Gene-major flags.
    mask: Vec<bool>,
    /// `(gene, cell, d)` for every zero of the input, gene-major.
    posteriors: Vec<(usize, usize, f64)>,
    targets: Vec<usize>,
}

impl DropoutMask {
    /// Mask from explicit positions (e.g. loaded from disk). Targets are the
    /// per-cell flag counts; posteriors are unknown.
    pub fn from_positions(
        n_genes: usize,
        n_cells: usize,
        positions: &[(usize, usize)],
    ) -> Result<Self> {
        let mut mask = vec![false; n_genes * n_cells];
        let mut targets = vec![0usize; n_cells];
        for &(g, c) in positions {
            if g >= n_genes || c >= n_cells {
                return Err(ZinbError::Shape(format!(
                    "position ({g}, {c}) outside {n_genes}x{n_cells}"
                )));
            }
            if !mask[g * n_cells + c] {
                mask[g * n_cells + c] = true;
                targets[c] += 1;
            }
        }
        Ok(Self {
            n_genes,
            n_cells,
            mask,
            posteriors: Vec::new(),
            targets,
        })
    }

    pub fn empty(n_genes: usize, n_cells: usize) -> Self {
        Self {
            n_genes,
            n_cells,
            mask: vec![false; n_genes * n_cells],
            posteriors: Vec::new(),
            targets: vec![0; n_cells],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_genes, self.n_cells)
    }

    pub fn is_masked(&self, gene: usize, cell: usize) -> bool {
        self.mask[gene * self.n_cells + cell]
    }

    pub fn n_masked(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Flagged `(gene, cell)` positions, gene-major.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / self.n_cells, i % self.n_cells))
            .collect()
    }

    pub fn flags_per_cell(&self) -> Vec<usize> {
        let mut out = vec![0usize; self.n_cells];
        for (i, &b) in self.mask.iter().enumerate() {
            if b {
                out[i % self.n_cells] += 1;
            }
        }
        out
    }

    pub fn posteriors(&self) -> &[(usize, usize, f64)] {
        &self.posteriors
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }
}

/// Flags, in every cell, the `min(L_c, zeros)` zero entries with the largest
/// dropout posterior. Ties go to the lower gene index.
pub fn build_mask(
    m: &CountMatrix,
    fits: &GeneFits,
    strata: Option<&StratumLabels>,
    targets: &[usize],
) -> Result<DropoutMask> {
    let (n_genes, n_cells) = m.shape();
    if targets.len() != n_cells {
        return Err(ZinbError::Shape(format!(
            "{} targets for {n_cells} cells",
            targets.len()
        )));
    }
    if let Some(s) = strata {
        if s.labels().len() != n_cells {
            return Err(ZinbError::Shape(format!(
                "{} stratum labels for {n_cells} cells",
                s.labels().len()
            )));
        }
    }
    let n_strata = strata.map_or(1, |s| s.n_strata());
    if fits.n_genes() != n_genes || fits.n_strata() != n_strata {
        return Err(ZinbError::Shape(format!(
            "fits cover {}x{} gene x strata, expected {n_genes}x{n_strata}",
            fits.n_genes(),
            fits.n_strata()
        )));
    }
    let stratum_of = |c: usize| strata.map_or(0, |s| s.labels()[c]);

    let mut nonzero = vec![false; n_genes * n_cells];
    for (g, c, _) in m.entries() {
        nonzero[g * n_cells + c] = true;
    }

    // Posterior per (gene, stratum), with a missing-fit check on pairs that
    // actually contain zeros.
    let mut post = vec![f64::NAN; n_genes * n_strata];
    let mut posteriors = Vec::new();
    for g in 0..n_genes {
        for c in 0..n_cells {
            if nonzero[g * n_cells + c] {
                continue;
            }
            let k = stratum_of(c);
            let slot = &mut post[g * n_strata + k];
            if slot.is_nan() {
                let fit = fits
                    .get(g, k)
                    .ok_or(ZinbError::MissingFit { gene: g, stratum: k })?;
                *slot = dropout_posterior(fit);
            }
            posteriors.push((g, c, *slot));
        }
    }

    let selected: Vec<Vec<usize>> = (0..n_cells)
        .into_par_iter()
        .map(|c| {
            let k = stratum_of(c);
            let mut zeros: Vec<(f64, usize)> = (0..n_genes)
                .filter(|&g| !nonzero[g * n_cells + c])
                .map(|g| (post[g * n_strata + k], g))
                .collect();
            let take = targets[c].min(zeros.len());
            zeros.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            zeros.truncate(take);
            zeros.into_iter().map(|(_, g)| g).collect()
        })
        .collect();

    let mut mask = vec![false; n_genes * n_cells];
    for (c, genes) in selected.iter().enumerate() {
        for &g in genes {
            mask[g * n_cells + c] = true;
        }
    }
    Ok(DropoutMask {
        n_genes,
        n_cells,
        mask,
        posteriors,
        targets: targets.to_vec(),
    })
}

/// Full detection stage: fits, Chao1 budgets and the mask.
pub fn detect_dropouts(
    m: &CountMatrix,
    strata: Option<&StratumLabels>,
    cfg: &EmConfig,
) -> Result<(GeneFits, DropoutMask)> {
    let fits = fit_genes(m, strata, cfg)?;
    let targets = estimate_dropout_targets(m);
    let mask = build_mask(m, &fits, strata, &targets)?;
    Ok((fits, mask))
}
