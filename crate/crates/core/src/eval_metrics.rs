//! Clustering evaluation: partitions, ARI/NMI, k-means, PCA, WCSS elbow
//! curves and per-group summary statistics.
//!
//! Point sets are `DMatrix<f64>` with one row per item.

use std::ops::RangeInclusive;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::forest_impute::derive_seed;
use crate::matrix_io::{normalize, CountMatrix, MatrixError, NormalizationMode};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("k = {k} exceeds the number of items ({n})")]
    KTooLarge { k: usize, n: usize },
    #[error("cannot extract {requested} components from a {rows}x{cols} matrix")]
    ComponentCount {
        requested: usize,
        rows: usize,
        cols: usize,
    },
    #[error("group {0} has no members")]
    EmptyGroup(usize),
    #[error("need at least {needed} values, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Cluster assignment of items to `0..n_clusters`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    labels: Vec<usize>,
    n_clusters: usize,
}

impl Partition {
    pub fn new(labels: Vec<usize>) -> Self {
        let n_clusters = labels.iter().max().map_or(0, |m| m + 1);
        Self { labels, n_clusters }
    }

    /// Map arbitrary labels to dense indices in order of first appearance.
    pub fn from_labels<T: Eq + std::hash::Hash + Clone>(labels: &[T]) -> Self {
        let mut ids = std::collections::HashMap::new();
        let dense = labels
            .iter()
            .map(|l| {
                let next = ids.len();
                *ids.entry(l.clone()).or_insert(next)
            })
            .collect();
        Self::new(dense)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `counts[i][j] = |u_i ∩ v_j|`.
#[derive(Debug, Clone)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub total: u64,
}

impl ContingencyTable {
    pub fn new(u: &Partition, v: &Partition) -> Result<Self> {
        if u.len() != v.len() {
            return Err(EvalError::LengthMismatch(u.len(), v.len()));
        }
        let mut counts = vec![vec![0u64; v.n_clusters()]; u.n_clusters()];
        for (&a, &b) in u.labels().iter().zip(v.labels()) {
            counts[a][b] += 1;
        }
        let row_sums = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums = (0..v.n_clusters())
            .map(|j| counts.iter().map(|r| r[j]).sum())
            .collect();
        Ok(Self {
            counts,
            row_sums,
            col_sums,
            total: u.len() as u64,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AriVariant {
    /// Chance-corrected pair counting with binomial coefficients.
    #[default]
    PairCounting,
    /// The same expression with every `C(x, 2)` replaced by `x^2`.
    SquaredCounts,
}

/// Adjusted Rand index (pair-counting form).
pub fn ari(u: &Partition, v: &Partition) -> Result<f64> {
    ari_with(u, v, AriVariant::PairCounting)
}

/// ARI under either counting variant. The denominator vanishes only when
/// both partitions are the same trivial one (one cluster, or all
/// singletons), which scores 1.
pub fn ari_with(u: &Partition, v: &Partition, variant: AriVariant) -> Result<f64> {
    let t = ContingencyTable::new(u, v)?;
    let f: fn(u64) -> u128 = match variant {
        AriVariant::PairCounting => |x| (x as u128) * (x.saturating_sub(1) as u128) / 2,
        AriVariant::SquaredCounts => |x| (x as u128) * (x as u128),
    };
    // Integer sums keep the result exactly symmetric in (u, v).
    let index: u128 = t.counts.iter().flatten().map(|&x| f(x)).sum();
    let a: u128 = t.row_sums.iter().map(|&x| f(x)).sum();
    let b: u128 = t.col_sums.iter().map(|&x| f(x)).sum();
    let all = f(t.total);
    // (index - a b / all) / ((a + b) / 2 - a b / all), cleared of fractions
    // so the only rounding is the final division.
    let num = 2 * index as i128 * all as i128 - 2 * (a * b) as i128;
    let denom = (a + b) as i128 * all as i128 - 2 * (a * b) as i128;
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / denom as f64)
}

/// Normalized mutual information `2 I(U,V) / (H(U) + H(V))`, natural log.
/// Two single-cluster partitions score 1.
pub fn nmi(u: &Partition, v: &Partition) -> Result<f64> {
    let t = ContingencyTable::new(u, v)?;
    if t.total == 0 {
        return Ok(1.0);
    }
    let n = t.total as f64;
    let entropy = |sums: &[u64]| -> f64 {
        sums.iter()
            .filter(|&&x| x > 0)
            .map(|&x| {
                let p = x as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let hu = entropy(&t.row_sums);
    let hv = entropy(&t.col_sums);
    if hu == 0.0 && hv == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (i, row) in t.counts.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            if x > 0 {
                let pij = x as f64 / n;
                let pi = t.row_sums[i] as f64 / n;
                let pj = t.col_sums[j] as f64 / n;
                mi += pij * (pij / (pi * pj)).ln();
            }
        }
    }
    Ok((2.0 * mi / (hu + hv)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Serialize)]
pub struct KMeansConfig {
    pub n_restarts: usize,
    pub max_iterations: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            n_restarts: 10,
            max_iterations: 300,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub partition: Partition,
    pub wcss: f64,
    /// Row-major `k x dims`.
    pub centroids: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// WCSS after each Lloyd iteration of the winning restart.
    pub wcss_trace: Vec<f64>,
}

struct Points {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl Points {
    fn new(m: &DMatrix<f64>) -> Self {
        let (n, d) = m.shape();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            data.extend(m.row(i).iter());
        }
        Self { n, d, data }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(d).enumerate() {
        let dist = sq_dist(p, c);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

fn plus_plus_init(pts: &Points, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * pts.d);
    let mut chosen = vec![false; pts.n];
    let first = rng.random_range(0..pts.n);
    chosen[first] = true;
    centroids.extend_from_slice(pts.row(first));
    let mut d2: Vec<f64> = (0..pts.n).map(|i| sq_dist(pts.row(i), pts.row(first))).collect();
    while centroids.len() < k * pts.d {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave the target just past the last weight.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // All remaining points coincide with a centroid.
            chosen.iter().position(|&c| !c).unwrap_or(0)
        };
        chosen[pick] = true;
        let start = centroids.len();
        centroids.extend_from_slice(pts.row(pick));
        let c = &centroids[start..];
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(pts.row(i), c));
        }
    }
    centroids
}

fn lloyd(pts: &Points, mut centroids: Vec<f64>, max_iterations: usize) -> KMeansResult {
    let (n, d) = (pts.n, pts.d);
    let k = centroids.len() / d;
    let mut assign = vec![usize::MAX; n];
    let mut dist = vec![0.0; n];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iterations {
        iterations += 1;
        let mut changed = false;
        for i in 0..n {
            let (j, dd) = nearest(pts.row(i), &centroids, d);
            if assign[i] != j {
                assign[i] = j;
                changed = true;
            }
            dist[i] = dd;
        }
        if !changed && iterations > 1 {
            converged = true;
            iterations -= 1;
            break;
        }
        // Empty clusters take the point farthest from its centroid.
        let mut sizes = vec![0usize; k];
        for &a in &assign {
            sizes[a] += 1;
        }
        for j in 0..k {
            if sizes[j] == 0 {
                let far = (0..n)
                    .filter(|&i| sizes[assign[i]] > 1)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    sizes[assign[i]] -= 1;
                    assign[i] = j;
                    sizes[j] = 1;
                    dist[i] = 0.0;
                }
            }
        }
        let mut sums = vec![0.0; k * d];
        for i in 0..n {
            let a = assign[i];
            for (s, x) in sums[a * d..(a + 1) * d].iter_mut().zip(pts.row(i)) {
                *s += x;
            }
        }
        for j in 0..k {
            if sizes[j] > 0 {
                for t in 0..d {
                    centroids[j * d + t] = sums[j * d + t] / sizes[j] as f64;
                }
            }
        }
        trace.push(total_wcss(pts, &centroids, &assign));
    }
    let wcss = total_wcss(pts, &centroids, &assign);
    KMeansResult {
        partition: Partition {
            labels: assign,
            n_clusters: k,
        },
        wcss,
        centroids,
        iterations,
        converged,
        wcss_trace: trace,
    }
}

fn total_wcss(pts: &Points, centroids: &[f64], assign: &[usize]) -> f64 {
    let d = pts.d;
    (0..pts.n)
        .map(|i| sq_dist(pts.row(i), &centroids[assign[i] * d..(assign[i] + 1) * d]))
        .sum()
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(EvalError::Invalid("k must be positive".into()));
    }
    if k > n {
        return Err(EvalError::KTooLarge { k, n });
    }
    Ok(())
}

/// Pick the lowest WCSS; ties go to the earlier candidate.
fn best_of(results: Vec<KMeansResult>) -> KMeansResult {
    results
        .into_iter()
        .reduce(|best, r| if r.wcss < best.wcss { r } else { best })
        .expect("at least one restart")
}

fn run_restarts(pts: &Points, k: usize, seed: u64, cfg: &KMeansConfig) -> Vec<KMeansResult> {
    (0..cfg.n_restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[k as u64, r as u64]));
            let init = plus_plus_init(pts, k, &mut rng);
            lloyd(pts, init, cfg.max_iterations)
        })
        .collect()
}

/// Lloyd's algorithm with k-means++ seeding, best of `n_restarts` by WCSS.
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64, cfg: &KMeansConfig) -> Result<KMeansResult> {
    check_k(points.nrows(), k)?;
    let pts = Points::new(points);
    Ok(best_of(run_restarts(&pts, k, seed, cfg)))
}

/// WCSS for each `k` in `ks`. From the second `k` on, the previous solution
/// plus its worst-served point is one of the restarts, so the curve cannot
/// increase.
pub fn elbow_curve(
    points: &DMatrix<f64>,
    ks: RangeInclusive<usize>,
    seed: u64,
    cfg: &KMeansConfig,
) -> Result<Vec<(usize, f64)>> {
    check_k(points.nrows(), *ks.start())?;
    check_k(points.nrows(), *ks.end())?;
    let pts = Points::new(points);
    let mut curve = Vec::new();
    let mut prev: Option<KMeansResult> = None;
    for k in ks {
        let mut results = run_restarts(&pts, k, seed, cfg);
        if let Some(p) = &prev {
            let far = (0..pts.n)
                .map(|i| (i, nearest(pts.row(i), &p.centroids, pts.d).1))
                .fold((0, f64::NEG_INFINITY), |b, x| if x.1 > b.1 { x } else { b });
            let mut init = p.centroids.clone();
            init.extend_from_slice(pts.row(far.0));
            results.push(lloyd(&pts, init, cfg.max_iterations));
        }
        let best = best_of(results);
        curve.push((k, best.wcss));
        prev = Some(best);
    }
    Ok(curve)
}

#[derive(Debug, Clone)]
pub struct Pca {
    /// `n_items x n_components` scores.
    pub embedding: DMatrix<f64>,
    /// `n_components x n_features` loadings.
    pub components: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub mean: Vec<f64>,
}

impl Pca {
    /// Map the embedding back to feature space.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut out = &self.embedding * &self.components;
        for mut row in out.row_iter_mut() {
            for (x, m) in row.iter_mut().zip(&self.mean) {
                *x += m;
            }
        }
        out
    }
}

/// Project column-centered data onto the top right singular vectors. Each
/// component's sign makes its largest-magnitude loading positive.
pub fn pca(m: &DMatrix<f64>, n_components: usize) -> Result<Pca> {
    let (rows, cols) = m.shape();
    if n_components == 0 || n_components > rows.min(cols) {
        return Err(EvalError::ComponentCount {
            requested: n_components,
            rows,
            cols,
        });
    }
    let mean: Vec<f64> = m.column_iter().map(|c| c.mean()).collect();
    let mut centered = m.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let svd = centered.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));

    let mut components = DMatrix::zeros(n_components, cols);
    let mut singular_values = Vec::with_capacity(n_components);
    for (out, &src) in order.iter().take(n_components).enumerate() {
        let row = v_t.row(src);
        let lead = row
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |b, (i, &x)| if x.abs() > b.1.abs() { (i, x) } else { b });
        let sign = if lead.1 < 0.0 { -1.0 } else { 1.0 };
        for j in 0..cols {
            components[(out, j)] = sign * row[j];
        }
        singular_values.push(svd.singular_values[src]);
    }
    let embedding = centered * components.transpose();
    Ok(Pca {
        embedding,
        components,
        singular_values,
        mean,
    })
}

/// Library-size normalize, `log2(x + 1)`, and lay out as cells x genes.
pub fn log_normalized_cells(m: &CountMatrix) -> Result<DMatrix<f64>> {
    let (norm, _) = normalize(m, NormalizationMode::LibrarySizeLog2)?;
    let mut out = DMatrix::zeros(m.n_cells(), m.n_genes());
    for (g, c, v) in norm.entries() {
        out[(c, g)] = v;
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupSummary {
    pub group: usize,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub ci95: (f64, f64),
    /// False for single-member groups, whose interval collapses to the mean.
    pub ci_defined: bool,
}

/// Mean, sample SD and Student-t 95% interval per group.
pub fn group_summary(values: &[f64], groups: &Partition) -> Result<Vec<GroupSummary>> {
    if values.len() != groups.len() {
        return Err(EvalError::LengthMismatch(values.len(), groups.len()));
    }
    let mut members = vec![Vec::new(); groups.n_clusters()];
    for (&v, &g) in values.iter().zip(groups.labels()) {
        members[g].push(v);
    }
    members
        .iter()
        .enumerate()
        .map(|(group, xs)| {
            if xs.is_empty() {
                return Err(EvalError::EmptyGroup(group));
            }
            let n = xs.len();
            let mean = xs.iter().sum::<f64>() / n as f64;
            if n == 1 {
                return Ok(GroupSummary {
                    group,
                    n,
                    mean,
                    sd: 0.0,
                    ci95: (mean, mean),
                    ci_defined: false,
                });
            }
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
                .map_err(|e| EvalError::Invalid(e.to_string()))?
                .inverse_cdf(0.975);
            let half = t * sd / (n as f64).sqrt();
            Ok(GroupSummary {
                group,
                n,
                mean,
                sd,
                ci95: (mean - half, mean + half),
                ci_defined: true,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct WelchT {
    pub t: f64,
    /// Welch-Satterthwaite degrees of freedom; NaN when both variances are 0.
    pub df: f64,
    /// Both samples have zero variance; `t` is 0 or an infinite sentinel.
    pub degenerate: bool,
}

/// Welch's unequal-variance t statistic for `mean(a) - mean(b)`.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchT> {
    for xs in [a, b] {
        if xs.len() < 2 {
            return Err(EvalError::InsufficientData {
                needed: 2,
                got: xs.len(),
            });
        }
    }
    let stats = |xs: &[f64]| {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    let diff = ma - mb;
    if se2 == 0.0 {
        let t = if diff == 0.0 { 0.0 } else { diff.signum() * f64::INFINITY };
        return Ok(WelchT {
            t,
            df: f64::NAN,
            degenerate: true,
        });
    }
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(WelchT {
        t: diff / se2.sqrt(),
        df,
        degenerate: false,
    })
}
