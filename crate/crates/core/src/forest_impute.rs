//! Regression random forests and iterative imputation of masked entries.
//!
//! Cells are observations and genes are variables: the forest for gene `g`
//! regresses `g` on every other gene across the cells where `g` is not
//! masked. One imputation pass updates all masked genes from the previous
//! iterate (Jacobi style), so the output does not depend on visiting order
//! or thread count.

use std::borrow::Cow;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix_io::{CountMatrix, MatrixError};
use crate::zinb_dropout::DropoutMask;

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("need at least 2 training observations, got {0}")]
    InsufficientData(usize),
    #[error("response value {value} at observation {index} is not finite")]
    NonFiniteResponse { index: usize, value: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid forest configuration: {0}")]
    Config(String),
    #[error("mask shape {mask:?} does not match matrix shape {matrix:?}")]
    MaskShape {
        mask: (usize, usize),
        matrix: (usize, usize),
    },
    #[error("mask flags nonzero entry at gene {gene}, cell {cell}")]
    MaskOnNonzero { gene: usize, cell: usize },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

pub type Result<T> = std::result::Result<T, ForestError>;

/// Number of candidate predictors sampled at each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mtry {
    /// `floor(sqrt(p))`, at least 1.
    #[default]
    SqrtP,
    Fixed(usize),
}

impl Mtry {
    pub fn resolve(self, n_features: usize) -> Result<usize> {
        match self {
            Mtry::SqrtP => Ok(((n_features as f64).sqrt().floor() as usize).max(1)),
            Mtry::Fixed(0) => Err(ForestError::Config("mtry must be positive".into())),
            Mtry::Fixed(m) if m > n_features => Err(ForestError::Config(format!(
                "mtry {m} exceeds {n_features} predictors"
            ))),
            Mtry::Fixed(m) => Ok(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub ntree: usize,
    pub mtry: Mtry,
    /// Minimum number of training observations in a leaf.
    pub min_node_size: usize,
    pub max_iterations: usize,
    pub seed: u64,
    /// Draw a bootstrap sample per tree. Disabling it (testing only) trains
    /// every tree on all observations and leaves OOB error undefined.
    pub bootstrap: bool,
    /// Minimum absolute improvement in mean OOB error to keep iterating.
    pub oob_tolerance: f64,
    /// Round imputed values half-to-even when the input holds integer counts.
    pub round_counts: bool,
    /// Cap imputed values at the gene's largest observed value.
    pub winsorize: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            ntree: 10,
            mtry: Mtry::SqrtP,
            min_node_size: 5,
            max_iterations: 2,
            seed: 0,
            bootstrap: true,
            oob_tolerance: 1e-4,
            round_counts: false,
            winsorize: false,
        }
    }
}

impl ForestConfig {
    fn validate(&self) -> Result<()> {
        if self.ntree == 0 {
            return Err(ForestError::Config("ntree must be at least 1".into()));
        }
        if self.min_node_size == 0 {
            return Err(ForestError::Config("min_node_size must be at least 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(ForestError::Config("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Seeding
// ---------------------------------------------------------------------------

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based derivation of an independent stream seed from a master seed
/// and a key path, e.g. `derive_seed(seed, &[gene, iteration, tree])`.
pub fn derive_seed(master: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(master), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

// ---------------------------------------------------------------------------
// Predictors
// ---------------------------------------------------------------------------

/// Read-only view of a feature-major buffer: feature `j` of the view is
/// column `columns[j]`, stored at `data[columns[j] * n_rows..][..n_rows]`.
#[derive(Debug, Clone)]
pub struct PredictorView<'a> {
    data: &'a [f64],
    n_rows: usize,
    columns: Cow<'a, [usize]>,
}

impl<'a> PredictorView<'a> {
    /// All columns of a feature-major buffer.
    pub fn new(data: &'a [f64], n_rows: usize) -> Result<Self> {
        if n_rows == 0 || data.len() % n_rows != 0 {
            return Err(ForestError::ShapeMismatch(format!(
                "{} values do not form columns of {n_rows} rows",
                data.len()
            )));
        }
        let n_cols = data.len() / n_rows;
        Ok(Self {
            data,
            n_rows,
            columns: Cow::Owned((0..n_cols).collect()),
        })
    }

    /// Every column except `excluded`.
    pub fn excluding(data: &'a [f64], n_rows: usize, excluded: usize) -> Result<Self> {
        let mut v = Self::new(data, n_rows)?;
        v.columns.to_mut().retain(|&c| c != excluded);
        Ok(v)
    }

    /// Builds a feature-major buffer from row-major observations.
    pub fn transpose_rows(rows: &[Vec<f64>]) -> Vec<f64> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        let mut out = vec![0.0; n * p];
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                out[j * n + i] = v;
            }
        }
        out
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    #[inline]
    pub fn column(&self, feature: usize) -> &[f64] {
        let c = self.columns[feature];
        &self.data[c * self.n_rows..(c + 1) * self.n_rows]
    }

    #[inline]
    pub fn value(&self, row: usize, feature: usize) -> f64 {
        self.data[self.columns[feature] * self.n_rows + row]
    }
}

// ---------------------------------------------------------------------------
// Trees
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Binary regression tree; observations with `x[feature] <= threshold` go
/// left.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    fn route(&self, value_of: impl Fn(usize) -> f64) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if value_of(feature) <= threshold {
                        left
                    } else {
                        right
                    }
                }
            }
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.route(|f| row[f])
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

struct SplitCandidate {
    feature: usize,
    threshold: f64,
    score: f64,
}

/// Scratch buffers reused across the nodes of one tree.
struct TreeBuilder<'v, 'a> {
    x: &'v PredictorView<'a>,
    y: &'v [f64],
    mtry: usize,
    min_leaf: usize,
    pairs: Vec<(f64, f64)>,
}

impl TreeBuilder<'_, '_> {
    fn build(&mut self, sample: &mut [usize], rng: &mut ChaCha8Rng) -> RegressionTree {
        let mut nodes = Vec::new();
        // (node index, start, end) of nodes awaiting a split decision
        let mut stack = vec![(0usize, 0usize, sample.len())];
        nodes.push(Node::Leaf { value: 0.0 });
        while let Some((id, start, end)) = stack.pop() {
            let rows = &mut sample[start..end];
            let (sum, lo, hi) = rows.iter().fold(
                (0.0, f64::INFINITY, f64::NEG_INFINITY),
                |(s, lo, hi), &r| {
                    let v = self.y[r];
                    (s + v, lo.min(v), hi.max(v))
                },
            );
            let n = rows.len();
            let mean = sum / n as f64;
            nodes[id] = Node::Leaf { value: mean };
            if n < 2 * self.min_leaf || lo == hi {
                continue;
            }
            let Some(best) = self.best_split(rows, sum, rng) else {
                continue;
            };
            let col = self.x.column(best.feature);
            let mid = partition(rows, |&r| col[r] <= best.threshold);
            let (left, right) = (nodes.len(), nodes.len() + 1);
            nodes.push(Node::Leaf { value: 0.0 });
            nodes.push(Node::Leaf { value: 0.0 });
            nodes[id] = Node::Split {
                feature: best.feature,
                threshold: best.threshold,
                left,
                right,
            };
            stack.push((right, start + mid, end));
            stack.push((left, start, start + mid));
        }
        RegressionTree { nodes }
    }

    /// Best variance-reducing split among `mtry` sampled features. Splits
    /// whose gains agree to within `1e-10` of the node SSE count as ties and
    /// keep the lower feature index, then the lower threshold.
    fn best_split(
        &mut self,
        rows: &[usize],
        sum: f64,
        rng: &mut ChaCha8Rng,
    ) -> Option<SplitCandidate> {
        let n = rows.len();
        let mean = sum / n as f64;
        let sse: f64 = rows.iter().map(|&r| (self.y[r] - mean).powi(2)).sum();
        let tie = 1e-10 * sse;
        let mut features = sample(rng, self.x.n_features(), self.mtry).into_vec();
        features.sort_unstable();

        let mut best: Option<SplitCandidate> = None;
        for f in features {
            let col = self.x.column(f);
            // Zeros dominate expression predictors; they are pooled rather
            // than sorted. Responses are centered on the node mean so the
            // split gain is `left_sum^2 * n / (n_left * n_right)`.
            self.pairs.clear();
            let (mut n_zero, mut zero_sum) = (0usize, 0.0);
            for &r in rows {
                let v = col[r];
                if v == 0.0 {
                    n_zero += 1;
                    zero_sum += self.y[r] - mean;
                } else {
                    self.pairs.push((v, self.y[r] - mean));
                }
            }
            self.pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            let neg = self.pairs.partition_point(|p| p.0 < 0.0);

            let mut left_n = 0usize;
            let mut left_sum = 0.0;
            let mut prev_x: Option<f64> = None;
            let min_leaf = self.min_leaf;
            let mut consider = |x: f64, cnt: usize, s: f64, best: &mut Option<SplitCandidate>| {
                if let Some(px) = prev_x {
                    let right_n = n - left_n;
                    if left_n >= min_leaf && right_n >= min_leaf {
                        let gain =
                            left_sum * left_sum * n as f64 / (left_n as f64 * right_n as f64);
                        if best.as_ref().is_none_or(|b| gain > b.score + tie) {
                            let mut threshold = 0.5 * (px + x);
                            if threshold >= x {
                                threshold = px;
                            }
                            *best = Some(SplitCandidate {
                                feature: f,
                                threshold,
                                score: gain,
                            });
                        }
                    }
                }
                left_n += cnt;
                left_sum += s;
                prev_x = Some(x);
            };

            let mut i = 0;
            let mut zero_done = n_zero == 0;
            while i < self.pairs.len() || !zero_done {
                if !zero_done && i == neg {
                    consider(0.0, n_zero, zero_sum, &mut best);
                    zero_done = true;
                    continue;
                }
                let x = self.pairs[i].0;
                let (mut cnt, mut s) = (0usize, 0.0);
                while i < self.pairs.len() && self.pairs[i].0 == x {
                    cnt += 1;
                    s += self.pairs[i].1;
                    i += 1;
                }
                consider(x, cnt, s, &mut best);
            }
        }
        best.filter(|b| b.score > 1e-12 * sse)
    }
}

fn partition<T>(v: &mut [T], pred: impl Fn(&T) -> bool) -> usize {
    let mut i = 0;
    for j in 0..v.len() {
        if pred(&v[j]) {
            v.swap(i, j);
            i += 1;
        }
    }
    i
}

// ---------------------------------------------------------------------------
// Forests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionForest {
    trees: Vec<RegressionTree>,
    n_features: usize,
    /// Normalized OOB error `SSE / SST` (plain MSE when `SST = 0`).
    pub oob_error: f64,
    /// Number of observations that were out of bag for at least one tree.
    pub oob_count: usize,
    /// Raw OOB sums of squares behind `oob_error`.
    pub oob_sse: f64,
    pub oob_sst: f64,
    pub constant_response: bool,
    /// Gene the forest was trained for, when used for imputation.
    pub trained_response: Option<usize>,
}

impl RegressionForest {
    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Mean over trees of the routed leaf value, for one row given as a
    /// dense feature vector.
    pub fn predict_row(&self, row: &[f64]) -> Result<f64> {
        if row.len() != self.n_features {
            return Err(ForestError::ShapeMismatch(format!(
                "row has {} features, forest expects {}",
                row.len(),
                self.n_features
            )));
        }
        Ok(self.mean_over_trees(|t| t.predict_row(row)))
    }

    /// Predictions for selected rows of a view laid out like the training
    /// view.
    pub fn predict(&self, x: &PredictorView, rows: &[usize]) -> Result<Vec<f64>> {
        if x.n_features() != self.n_features {
            return Err(ForestError::ShapeMismatch(format!(
                "view has {} features, forest expects {}",
                x.n_features(),
                self.n_features
            )));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= x.n_rows()) {
            return Err(ForestError::ShapeMismatch(format!(
                "row {r} outside view of {} rows",
                x.n_rows()
            )));
        }
        Ok(rows
            .iter()
            .map(|&r| self.mean_over_trees(|t| t.route(|f| x.value(r, f))))
            .collect())
    }

    fn mean_over_trees(&self, f: impl Fn(&RegressionTree) -> f64) -> f64 {
        self.trees.iter().map(f).sum::<f64>() / self.trees.len() as f64
    }
}

/// Trains on every row of `x`.
pub fn train_forest(
    x: &PredictorView,
    y: &[f64],
    config: &ForestConfig,
    seed: u64,
) -> Result<RegressionForest> {
    let rows: Vec<usize> = (0..x.n_rows()).collect();
    train_forest_on(x, y, &rows, config, seed)
}

/// Trains on the observations listed in `rows`; `y` is indexed like the rows
/// of `x`.
pub fn train_forest_on(
    x: &PredictorView,
    y: &[f64],
    rows: &[usize],
    config: &ForestConfig,
    seed: u64,
) -> Result<RegressionForest> {
    config.validate()?;
    if y.len() != x.n_rows() {
        return Err(ForestError::ShapeMismatch(format!(
            "{} responses for {} rows",
            y.len(),
            x.n_rows()
        )));
    }
    if rows.len() < 2 {
        return Err(ForestError::InsufficientData(rows.len()));
    }
    for &r in rows {
        if r >= y.len() {
            return Err(ForestError::ShapeMismatch(format!("row {r} out of range")));
        }
        if !y[r].is_finite() {
            return Err(ForestError::NonFiniteResponse {
                index: r,
                value: y[r],
            });
        }
    }
    let mtry = Mtry::resolve(config.mtry, x.n_features())?;
    let n = rows.len();

    let grown: Vec<(RegressionTree, Vec<bool>)> = (0..config.ntree)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[t as u64]));
            let mut in_bag = vec![false; n];
            let mut sample: Vec<usize> = if config.bootstrap {
                (0..n)
                    .map(|_| {
                        let i = rng.random_range(0..n);
                        in_bag[i] = true;
                        rows[i]
                    })
                    .collect()
            } else {
                in_bag.iter_mut().for_each(|b| *b = true);
                rows.to_vec()
            };
            let mut builder = TreeBuilder {
                x,
                y,
                mtry,
                min_leaf: config.min_node_size,
                pairs: Vec::with_capacity(n),
            };
            (builder.build(&mut sample, &mut rng), in_bag)
        })
        .collect();

    let mut oob_sum = vec![0.0; n];
    let mut oob_cnt = vec![0usize; n];
    for (tree, in_bag) in &grown {
        for (i, &r) in rows.iter().enumerate() {
            if !in_bag[i] {
                oob_sum[i] += tree.route(|f| x.value(r, f));
                oob_cnt[i] += 1;
            }
        }
    }
    let oob: Vec<(f64, f64)> = rows
        .iter()
        .enumerate()
        .filter(|(i, _)| oob_cnt[*i] > 0)
        .map(|(i, &r)| (y[r], oob_sum[i] / oob_cnt[i] as f64))
        .collect();
    let (oob_sse, oob_sst) = if oob.is_empty() {
        (0.0, 0.0)
    } else {
        let mean = oob.iter().map(|p| p.0).sum::<f64>() / oob.len() as f64;
        let sse: f64 = oob.iter().map(|(t, p)| (t - p) * (t - p)).sum();
        let sst: f64 = oob.iter().map(|(t, _)| (t - mean) * (t - mean)).sum();
        (sse, sst)
    };
    let oob_error = if oob_sst > 0.0 {
        oob_sse / oob_sst
    } else if oob.is_empty() {
        0.0
    } else {
        oob_sse / oob.len() as f64
    };
    let first = y[rows[0]];
    Ok(RegressionForest {
        trees: grown.into_iter().map(|(t, _)| t).collect(),
        n_features: x.n_features(),
        oob_error,
        oob_count: oob.len(),
        oob_sse,
        oob_sst,
        constant_response: rows.iter().all(|&r| y[r] == first),
        trained_response: None,
    })
}

// ---------------------------------------------------------------------------
// Iterative imputation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    DeltaIncreased,
    OobStalled,
    MaxIterations,
    /// Nothing to impute; no iterations were run.
    EmptyMask,
}

#[derive(Debug, Clone)]
pub struct ImputationResult {
    pub imputed: CountMatrix,
    /// `Δ^(t)` for every completed pass `t = 1, 2, ...`.
    pub deltas: Vec<f64>,
    /// Mean OOB error over the forests of each pass.
    pub oob_trace: Vec<f64>,
    pub iterations_run: usize,
    pub stop_reason: StopReason,
    /// Pass whose iterate was returned (before post-processing).
    pub returned_iteration: usize,
    /// Masked `(gene, cell)` positions, gene-major.
    pub masked_positions: Vec<(usize, usize)>,
    /// Values at `masked_positions` for `Y^(0)`, `Y^(1)`, ...
    pub iterates: Vec<Vec<f64>>,
}

impl ImputationResult {
    /// `Δ^(t)` recomputed from two stored iterates.
    pub fn delta_between(prev: &[f64], cur: &[f64]) -> f64 {
        let num: f64 = prev
            .iter()
            .zip(cur)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            .sqrt();
        let den: f64 = prev.iter().map(|a| a * a).sum::<f64>().sqrt();
        if den > 0.0 {
            num / den
        } else if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

struct GeneUpdate {
    predictions: Vec<f64>,
    oob_error: f64,
}

/// Iterative random-forest imputation of the masked entries of `x`.
pub fn impute(x: &CountMatrix, mask: &DropoutMask, config: &ForestConfig) -> Result<ImputationResult> {
    config.validate()?;
    let (n_genes, n_cells) = x.shape();
    if mask.shape() != x.shape() {
        return Err(ForestError::MaskShape {
            mask: mask.shape(),
            matrix: x.shape(),
        });
    }
    let positions = mask.positions();
    for &(g, c) in &positions {
        if x.get(g, c) != 0.0 {
            return Err(ForestError::MaskOnNonzero { gene: g, cell: c });
        }
    }
    if positions.is_empty() {
        return Ok(ImputationResult {
            imputed: x.clone(),
            deltas: Vec::new(),
            oob_trace: Vec::new(),
            iterations_run: 0,
            stop_reason: StopReason::EmptyMask,
            returned_iteration: 0,
            masked_positions: positions,
            iterates: Vec::new(),
        });
    }

    let mut masked_cells: Vec<Vec<usize>> = vec![Vec::new(); n_genes];
    for &(g, c) in &positions {
        masked_cells[g].push(c);
    }

    // Y^(0): masked entries get the gene's mean over its nonzero values.
    let mut y0 = x.to_dense();
    let mut trainable = vec![false; n_genes];
    let mut gene_max = vec![0.0f64; n_genes];
    for g in 0..n_genes {
        let (n, s, mx) = x
            .row(g)
            .fold((0usize, 0.0, 0.0f64), |(n, s, mx), (_, v)| (n + 1, s + v, mx.max(v)));
        gene_max[g] = mx;
        let init = if n > 0 { s / n as f64 } else { 0.0 };
        for &c in &masked_cells[g] {
            y0[g * n_cells + c] = init;
        }
        trainable[g] = n > 0 && n_cells - masked_cells[g].len() >= 2;
    }

    // Ascending masked count; ties by gene index.
    let mut order: Vec<usize> = (0..n_genes)
        .filter(|&g| !masked_cells[g].is_empty() && trainable[g])
        .collect();
    order.sort_by_key(|&g| (masked_cells[g].len(), g));

    let gather = |y: &[f64]| -> Vec<f64> {
        positions.iter().map(|&(g, c)| y[g * n_cells + c]).collect()
    };

    let mut iterates = vec![gather(&y0)];
    let mut prev = y0;
    let mut deltas = Vec::new();
    let mut oob_trace = Vec::new();
    let mut stop_reason = StopReason::MaxIterations;
    let mut returned_iteration = 0;

    for t in 1..=config.max_iterations {
        let updates: Vec<GeneUpdate> = order
            .par_iter()
            .map(|&g| update_gene(&prev, n_genes, n_cells, g, &masked_cells[g], config, t))
            .collect::<Result<_>>()?;
        let mut cur = prev.clone();
        for (&g, u) in order.iter().zip(&updates) {
            for (&c, &v) in masked_cells[g].iter().zip(&u.predictions) {
                cur[g * n_cells + c] = v;
            }
        }
        let cur_masked = gather(&cur);
        let delta = ImputationResult::delta_between(iterates.last().unwrap(), &cur_masked);
        let oob = if updates.is_empty() {
            0.0
        } else {
            updates.iter().map(|u| u.oob_error).sum::<f64>() / updates.len() as f64
        };
        deltas.push(delta);
        oob_trace.push(oob);
        iterates.push(cur_masked);

        if t >= 2 {
            let prev_delta = deltas[t - 2];
            let prev_oob = oob_trace[t - 2];
            let reason = if delta > prev_delta {
                Some(StopReason::DeltaIncreased)
            } else if prev_oob - oob <= config.oob_tolerance {
                Some(StopReason::OobStalled)
            } else {
                None
            };
            if let Some(reason) = reason {
                // The pass that failed to improve is discarded.
                stop_reason = reason;
                break;
            }
        }
        prev = cur;
        returned_iteration = t;
    }
    let final_y = prev;

    let integral = x.is_integral(1e-9);
    let imputed_values: Vec<f64> = positions
        .iter()
        .map(|&(g, c)| {
            let mut v = final_y[g * n_cells + c].max(0.0);
            if config.winsorize {
                v = v.min(gene_max[g]);
            }
            if config.round_counts && integral {
                v = v.round_ties_even();
            }
            v
        })
        .collect();

    let triplets: Vec<(usize, usize, f64)> = x
        .entries()
        .chain(
            positions
                .iter()
                .zip(&imputed_values)
                .map(|(&(g, c), &v)| (g, c, v)),
        )
        .collect();
    let imputed = CountMatrix::from_triplets(
        n_genes,
        n_cells,
        triplets,
        x.gene_names().to_vec(),
        x.cell_names().to_vec(),
    )?;

    Ok(ImputationResult {
        imputed,
        iterations_run: deltas.len(),
        deltas,
        oob_trace,
        stop_reason,
        returned_iteration,
        masked_positions: positions,
        iterates,
    })
}

fn update_gene(
    prev: &[f64],
    n_genes: usize,
    n_cells: usize,
    gene: usize,
    masked: &[usize],
    config: &ForestConfig,
    iteration: usize,
) -> Result<GeneUpdate> {
    debug_assert_eq!(prev.len(), n_genes * n_cells);
    let view = PredictorView::excluding(prev, n_cells, gene)?;
    let response = &prev[gene * n_cells..(gene + 1) * n_cells];
    let mut is_masked = vec![false; n_cells];
    for &c in masked {
        is_masked[c] = true;
    }
    let train_rows: Vec<usize> = (0..n_cells).filter(|&c| !is_masked[c]).collect();
    let seed = derive_seed(config.seed, &[gene as u64, iteration as u64]);
    let mut forest = train_forest_on(&view, response, &train_rows, config, seed)?;
    forest.trained_response = Some(gene);
    Ok(GeneUpdate {
        predictions: forest.predict(&view, masked)?,
        oob_error: forest.oob_error,
    })
}
