//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Run with `cargo test -p scrmf-cli --test acceptance`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use scrmf_cli::{cmd_pipeline, Overrides, PipelineInputs, RunConfig, RunReport};
use scrmf_core::eval_metrics::{ari, nmi, Partition};
use scrmf_core::forest_impute::{
    impute, train_forest, ForestConfig, ImputationResult, Mtry, PredictorView, StopReason,
};
use scrmf_core::simulate::{calibrate_dropout, simulate, SimConfig, SimOutput, CALIBRATION_TOLERANCE};
use scrmf_core::zinb_dropout::{detect_dropouts, fit_zinb, posterior_from_params, EmConfig};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// The simulation used for the quality, stopping-rule and determinism
/// criteria: droplet-like depth (about one count per gene per cell) and
/// clearly separated groups.
fn acceptance_sim(seed: u64) -> SimConfig {
    SimConfig {
        libsize_mu: 7.0,
        de_prob: 0.2,
        de_factor_sd: 0.8,
        seed,
        ..SimConfig::default()
    }
}

fn acceptance_run_config(seed: u64) -> RunConfig {
    let cfg = RunConfig {
        simulate: acceptance_sim(seed),
        ..RunConfig::default()
    };
    cfg.resolve(&Overrides {
        seed: Some(seed),
        ..Overrides::default()
    })
    .expect("acceptance config is valid")
}

// ---------------------------------------------------------------------------
// 1. posterior formula
// ---------------------------------------------------------------------------

fn posterior_formula() -> Outcome {
    let cases = [
        (0.0, 2.0, 0.3, 1.0),
        (1.0, 2.0, 0.3, 0.0),
        (0.5, 1.0, 0.5, 1.0 / 3.0),
    ];
    let mut worst: f64 = 0.0;
    for (theta, r, p, want) in cases {
        worst = worst.max((posterior_from_params(theta, r, p) - want).abs());
    }
    Outcome::new(worst <= 1e-12, format!("max abs error {worst:.1e} (tol 1e-12)"))
}

// ---------------------------------------------------------------------------
// 2. EM recovery
// ---------------------------------------------------------------------------

fn zinb_sample(rng: &mut impl Rng, n: usize, theta: f64, r: f64, mu: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < theta {
                return 0.0;
            }
            let lambda = Gamma::new(r, mu / r).unwrap().sample(rng);
            if lambda <= 0.0 {
                0.0
            } else {
                Poisson::new(lambda).unwrap().sample(rng)
            }
        })
        .collect()
}

fn em_recovery() -> Outcome {
    let cfg = EmConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut err_sum = 0.0;
    let mut worst_drop: f64 = 0.0;
    let mut steps = 0;
    for _ in 0..50 {
        let xs = zinb_sample(&mut rng, 500, 0.3, 2.0, 5.0);
        let fit = match fit_zinb(&xs, &cfg) {
            Ok(f) => f,
            Err(e) => return Outcome::new(false, format!("fit failed: {e}")),
        };
        err_sum += (fit.theta - 0.3).abs();
        for w in fit.ll_trace.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
            steps += 1;
        }
    }
    let mean_err = err_sum / 50.0;
    Outcome::new(
        mean_err <= 0.1 && worst_drop <= 0.0,
        format!(
            "mean |theta - 0.3| = {mean_err:.4} (need <= 0.1); largest log-likelihood decrease over {steps} EM steps = {worst_drop:.2e} (need <= 0)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. metric oracles
// ---------------------------------------------------------------------------

/// All set partitions of `n` items as restricted growth strings.
fn partitions(n: usize) -> Vec<Vec<usize>> {
    fn grow(prefix: &mut Vec<usize>, max: usize, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for b in 0..=max + 1 {
            prefix.push(b);
            grow(prefix, max.max(b), n, out);
            prefix.pop();
        }
    }
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    grow(&mut vec![0], 0, n, &mut out);
    out
}

/// ARI from pair agreement counts over every unordered pair.
fn brute_ari(u: &[usize], v: &[usize]) -> f64 {
    let (mut a, mut b, mut c, mut d) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..u.len() {
        for j in i + 1..u.len() {
            match (u[i] == u[j], v[i] == v[j]) {
                (true, true) => a += 1.0,
                (true, false) => b += 1.0,
                (false, true) => c += 1.0,
                (false, false) => d += 1.0,
            }
        }
    }
    let den = (a + b) * (b + d) + (a + c) * (c + d);
    if den == 0.0 {
        1.0
    } else {
        2.0 * (a * d - b * c) / den
    }
}

fn metric_oracles() -> Outcome {
    use rayon::prelude::*;
    let mut worst: f64 = 0.0;
    let mut pairs = 0usize;
    for n in 2..=8 {
        let parts: Vec<Partition> = partitions(n).into_iter().map(Partition::new).collect();
        let (w, p) = parts
            .par_iter()
            .map(|u| {
                let mut w: f64 = 0.0;
                for v in &parts {
                    let got = ari(u, v).unwrap();
                    w = w.max((got - brute_ari(u.labels(), v.labels())).abs());
                }
                (w, parts.len())
            })
            .reduce(|| (0.0, 0), |a, b| (a.0.max(b.0), a.1 + b.1));
        worst = worst.max(w);
        pairs += p;
    }
    let p = |v: &[usize]| Partition::new(v.to_vec());
    let nmi_same = nmi(&p(&[0, 0, 1, 1, 2, 2]), &p(&[2, 2, 0, 0, 1, 1])).unwrap();
    let nmi_indep = nmi(&p(&[0, 0, 1, 1]), &p(&[0, 1, 0, 1])).unwrap();
    let ari_half = ari(&p(&[0, 0, 1, 1]), &p(&[0, 1, 0, 1])).unwrap();
    let pass = worst <= 1e-12
        && (nmi_same - 1.0).abs() <= 1e-12
        && nmi_indep.abs() <= 1e-12
        && (ari_half + 0.5).abs() <= 1e-12;
    Outcome::new(
        pass,
        format!(
            "ARI vs pair counting over {pairs} partition pairs (n <= 8): max error {worst:.1e}; NMI identical = {nmi_same}, independent = {nmi_indep}; ari([0,0,1,1],[0,1,0,1]) = {ari_half}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. mask safety and scope
// ---------------------------------------------------------------------------

fn chao1_target(obs: &SimOutput, cell: usize) -> usize {
    let m = &obs.observed;
    let (mut f1, mut f2, mut zeros) = (0usize, 0usize, 0usize);
    for g in 0..m.n_genes() {
        match m.get(g, cell) {
            v if v == 0.0 => zeros += 1,
            v if v == 1.0 => f1 += 1,
            v if v == 2.0 => f2 += 1,
            _ => {}
        }
    }
    let gap = if f2 > 0 {
        (f1 * f1) as f64 / (2.0 * f2 as f64)
    } else {
        (f1 * f1.saturating_sub(1)) as f64 / 2.0
    };
    (gap.round() as usize).min(zeros)
}

fn mask_scope_one(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sim_cfg = SimConfig {
        n_genes: rng.random_range(60..=140),
        n_cells: rng.random_range(40..=100),
        libsize_mu: rng.random_range(5.5..8.0),
        de_prob: 0.2,
        de_factor_sd: 0.8,
        seed,
        ..SimConfig::default()
    };
    let target = rng.random_range(0.6..0.85);
    let sim_cfg = calibrate_dropout(&sim_cfg, target).map_err(|e| e.to_string())?;
    let sim = simulate(&sim_cfg).map_err(|e| e.to_string())?;
    let x = &sim.observed;
    let (_, mask) = detect_dropouts(x, None, &EmConfig::default()).map_err(|e| e.to_string())?;

    let flags = mask.flags_per_cell();
    for c in 0..x.n_cells() {
        let want = chao1_target(&sim, c);
        if flags[c] != want {
            return Err(format!("seed {seed}: cell {c} has {} flags, expected {want}", flags[c]));
        }
    }
    let positions = mask.positions();
    for &(g, c) in &positions {
        if x.get(g, c) != 0.0 {
            return Err(format!("seed {seed}: flagged nonzero at ({g},{c})"));
        }
    }
    let cfg = ForestConfig {
        seed,
        ..ForestConfig::default()
    };
    let res = impute(x, &mask, &cfg).map_err(|e| e.to_string())?;
    let flagged: HashSet<(usize, usize)> = positions.iter().copied().collect();
    for g in 0..x.n_genes() {
        for c in 0..x.n_cells() {
            let (before, after) = (x.get(g, c), res.imputed.get(g, c));
            if after < 0.0 {
                return Err(format!("seed {seed}: negative output at ({g},{c})"));
            }
            if before.to_bits() != after.to_bits() && !flagged.contains(&(g, c)) {
                return Err(format!("seed {seed}: unflagged entry ({g},{c}) changed"));
            }
        }
    }
    Ok(positions.len())
}

fn mask_safety() -> Outcome {
    let mut flagged = 0;
    for seed in 100..120 {
        match mask_scope_one(seed) {
            Ok(n) => flagged += n,
            Err(e) => return Outcome::new(false, e),
        }
    }
    Outcome::new(
        true,
        format!("20 seeds, {flagged} flagged entries: all zeros of X, per-cell counts = min(Chao1 gap, zeros), output changed only there, none negative"),
    )
}

// ---------------------------------------------------------------------------
// 5. forest correctness
// ---------------------------------------------------------------------------

enum OracleNode {
    Leaf(f64),
    Split(usize, f64, Box<OracleNode>, Box<OracleNode>),
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sse(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum()
}

/// Exhaustive CART: every midpoint of every feature, child SSEs recomputed
/// from scratch; near-ties keep the earlier candidate.
fn oracle_build(x: &[Vec<f64>], y: &[f64], idx: &[usize], min_leaf: usize) -> OracleNode {
    let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let parent = sse(&ys);
    if idx.len() < 2 * min_leaf || ys.iter().all(|&v| v == ys[0]) {
        return OracleNode::Leaf(mean(&ys));
    }
    let mut best: Option<(f64, usize, f64)> = None;
    for f in 0..x[0].len() {
        let mut vals: Vec<f64> = idx.iter().map(|&i| x[i][f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let t = 0.5 * (w[0] + w[1]);
            let left: Vec<f64> = idx.iter().filter(|&&i| x[i][f] <= t).map(|&i| y[i]).collect();
            let right: Vec<f64> = idx.iter().filter(|&&i| x[i][f] > t).map(|&i| y[i]).collect();
            if left.len() < min_leaf || right.len() < min_leaf {
                continue;
            }
            let gain = parent - sse(&left) - sse(&right);
            if best.is_none_or(|b| gain > b.0 + 1e-10 * parent) {
                best = Some((gain, f, t));
            }
        }
    }
    match best {
        Some((gain, f, t)) if gain > 1e-12 * parent => {
            let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x[i][f] <= t);
            OracleNode::Split(
                f,
                t,
                Box::new(oracle_build(x, y, &l, min_leaf)),
                Box::new(oracle_build(x, y, &r, min_leaf)),
            )
        }
        _ => OracleNode::Leaf(mean(&ys)),
    }
}

fn oracle_predict(node: &OracleNode, row: &[f64]) -> f64 {
    match node {
        OracleNode::Leaf(v) => *v,
        OracleNode::Split(f, t, l, r) => {
            if row[*f] <= *t {
                oracle_predict(l, row)
            } else {
                oracle_predict(r, row)
            }
        }
    }
}

fn single_tree(p: usize, min_leaf: usize) -> ForestConfig {
    ForestConfig {
        ntree: 1,
        mtry: Mtry::Fixed(p),
        min_node_size: min_leaf,
        bootstrap: false,
        ..ForestConfig::default()
    }
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..p)
                .map(|_| {
                    if rng.random::<f64>() < 0.33 {
                        0.0
                    } else {
                        rng.random_range(-1.0..5.0)
                    }
                })
                .collect()
        })
        .collect()
}

fn forest_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);

    // interpolation
    let mut interp_fail = 0;
    for case in 0..10 {
        let n = rng.random_range(10..=50);
        let p = rng.random_range(1..=5);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| rng.random_range(0.0..10.0)).collect())
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let data = PredictorView::transpose_rows(&rows);
        let view = PredictorView::new(&data, n).unwrap();
        let forest = train_forest(&view, &y, &single_tree(p, 1), case).unwrap();
        interp_fail += rows
            .iter()
            .zip(&y)
            .filter(|(r, &t)| forest.predict_row(r).unwrap() != t)
            .count();
    }

    // oracle
    let mut worst: f64 = 0.0;
    for case in 0..60 {
        let n = rng.random_range(5..=50);
        let p = rng.random_range(1..=6);
        let min_leaf = [1, 2, 5][case % 3];
        let rows = random_rows(&mut rng, n, p);
        let y: Vec<f64> = rows
            .iter()
            .map(|r| r[0] * 1.5 - r[p - 1] + rng.random_range(-1.0..1.0))
            .collect();
        let data = PredictorView::transpose_rows(&rows);
        let view = PredictorView::new(&data, n).unwrap();
        let forest = train_forest(&view, &y, &single_tree(p, min_leaf), case as u64).unwrap();
        let idx: Vec<usize> = (0..n).collect();
        let oracle = oracle_build(&rows, &y, &idx, min_leaf);
        let probes = random_rows(&mut rng, 30, p);
        for row in rows.iter().chain(&probes) {
            let got = forest.predict_row(row).unwrap();
            let want = oracle_predict(&oracle, row);
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
        }
    }

    // constant response
    let rows = random_rows(&mut rng, 40, 3);
    let data = PredictorView::transpose_rows(&rows);
    let view = PredictorView::new(&data, 40).unwrap();
    let forest = train_forest(&view, &[2.5; 40], &ForestConfig::default(), 3).unwrap();

    let pass = interp_fail == 0 && worst <= 1e-12 && forest.oob_error == 0.0;
    Outcome::new(
        pass,
        format!(
            "interpolation misses {interp_fail}; max relative deviation from exhaustive CART over 60 instances {worst:.1e}; constant-response OOB error {}",
            forest.oob_error
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. imputation quality
// ---------------------------------------------------------------------------

fn quality_runs() -> Result<Vec<RunReport>, String> {
    SEEDS
        .iter()
        .map(|&seed| {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let t = Instant::now();
            let r = cmd_pipeline(&acceptance_run_config(seed), &PipelineInputs::default(), dir.path())
                .map_err(|e| format!("seed {seed}: {e}"))?;
            let m = &r.metrics;
            println!(
                "    seed {seed}: sparsity {:.4}, flagged {}, rmse {:.4} vs baseline {:.4}, ARI {:.4} -> {:.4}, OOB {:?}, stop {} ({:.1}s)",
                m.sparsity.unwrap_or(f64::NAN),
                m.n_flagged.unwrap_or(0),
                m.masked_rmse.unwrap_or(f64::NAN),
                m.baseline_rmse.unwrap_or(f64::NAN),
                m.ari_before.unwrap_or(f64::NAN),
                m.ari_after.unwrap_or(f64::NAN),
                m.oob_trace.as_deref().unwrap_or(&[]),
                m.stop_reason.as_deref().unwrap_or("?"),
                t.elapsed().as_secs_f64()
            );
            Ok(r)
        })
        .collect()
}

fn imputation_quality(runs: &[RunReport]) -> Outcome {
    let reductions: Vec<f64> = runs
        .iter()
        .map(|r| 1.0 - r.metrics.masked_rmse.unwrap() / r.metrics.baseline_rmse.unwrap())
        .collect();
    let ari_gain: Vec<f64> = runs
        .iter()
        .map(|r| r.metrics.ari_after.unwrap() - r.metrics.ari_before.unwrap())
        .collect();
    let calibrated = runs
        .iter()
        .all(|r| (r.metrics.sparsity.unwrap() - 0.8).abs() <= 0.02);
    let (red, gain) = (median(&reductions), median(&ari_gain));
    Outcome::new(
        calibrated && red >= 0.20 && gain >= 0.0,
        format!(
            "1000x800, 5 seeds: median masked RMSE reduction {:.1}% (need >= 20%); median ARI after - before {gain:+.4} (need >= 0); sparsity within 0.80 +/- 0.02: {calibrated}",
            100.0 * red
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. stopping rule
// ---------------------------------------------------------------------------

/// Replays the stopping rule from the recorded traces.
fn check_stop(res: &ImputationResult, cfg: &ForestConfig) -> Result<(), String> {
    for (t, d) in res.deltas.iter().enumerate() {
        let re = ImputationResult::delta_between(&res.iterates[t], &res.iterates[t + 1]);
        if (re - d).abs() > 1e-12 {
            return Err(format!("delta {} recomputes to {re}, reported {d}", t + 1));
        }
    }
    let n = res.deltas.len();
    let mut expect = (StopReason::MaxIterations, n);
    for t in 1..n {
        if res.deltas[t] > res.deltas[t - 1] {
            expect = (StopReason::DeltaIncreased, t);
            break;
        }
        if res.oob_trace[t - 1] - res.oob_trace[t] <= cfg.oob_tolerance {
            expect = (StopReason::OobStalled, t);
            break;
        }
    }
    if expect.0 == StopReason::MaxIterations && n != cfg.max_iterations {
        return Err(format!("ran {n} passes without a stop condition (max {})", cfg.max_iterations));
    }
    if expect.0 != StopReason::MaxIterations && expect.1 + 1 != n {
        return Err("loop continued past a stop condition".into());
    }
    if (res.stop_reason, res.returned_iteration) != expect {
        return Err(format!(
            "recorded {:?} at pass {}, rule gives {:?} at pass {}",
            res.stop_reason, res.returned_iteration, expect.0, expect.1
        ));
    }
    Ok(())
}

fn stopping_rule(quality: &[RunReport]) -> Outcome {
    let mut reasons = Vec::new();
    let mut decreased = 0;
    let mut traces = Vec::new();
    for &seed in &SEEDS {
        let sim_cfg = match calibrate_dropout(&acceptance_sim(seed), 0.8) {
            Ok(c) => c,
            Err(e) => return Outcome::new(false, e.to_string()),
        };
        let sim = simulate(&sim_cfg).unwrap();
        let (_, mask) = detect_dropouts(&sim.observed, None, &EmConfig::default()).unwrap();
        for (ntree, max_iterations) in [(100, 2), (10, 5)] {
            let cfg = ForestConfig {
                ntree,
                max_iterations,
                seed,
                ..ForestConfig::default()
            };
            let res = impute(&sim.observed, &mask, &cfg).unwrap();
            if let Err(e) = check_stop(&res, &cfg) {
                return Outcome::new(false, format!("seed {seed}, ntree {ntree}: {e}"));
            }
            reasons.push(format!("{:?}", res.stop_reason));
            if ntree == 100 {
                if res.oob_trace.len() >= 2 && res.oob_trace[1] < res.oob_trace[0] {
                    decreased += 1;
                }
                traces.push(format!("{:.4}->{:.4}", res.oob_trace[0], res.oob_trace.get(1).copied().unwrap_or(f64::NAN)));
            }
        }
    }
    // The pipeline reports were produced by the same loop at the default ntree.
    for r in quality {
        let oob = r.metrics.oob_trace.as_deref().unwrap_or(&[]);
        let deltas = r.metrics.deltas.as_deref().unwrap_or(&[]);
        if oob.len() != deltas.len() || r.metrics.stop_reason.is_none() {
            return Outcome::new(false, "pipeline report lacks a stop reason or trace");
        }
    }
    let small = quality
        .iter()
        .filter(|r| {
            let o = r.metrics.oob_trace.as_deref().unwrap_or(&[]);
            o.len() >= 2 && o[1] < o[0]
        })
        .count();
    println!("    info: at the default ntree=10 the mean OOB error decreased 1->2 in {small}/5 seeds (not gated: with 10 trees the sign is unstable across seeds)");
    reasons.sort();
    reasons.dedup();
    Outcome::new(
        decreased >= 4,
        format!(
            "delta traces match snapshots to 1e-12 and recorded stop reasons replay ({}); mean OOB error decreased 1->2 in {decreased}/5 seeds at ntree=100 (need >= 4): {}",
            reasons.join(", "),
            traces.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. determinism
// ---------------------------------------------------------------------------

fn pipeline_bytes(threads: usize, dir: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let mut cfg = acceptance_run_config(42);
    cfg.simulate.n_genes = 300;
    cfg.simulate.n_cells = 240;
    cfg.simulate.seed = 42;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| e.to_string())?;
    pool.install(|| cmd_pipeline(&cfg, &PipelineInputs::default(), dir))
        .map_err(|e| e.to_string())?;
    let read = |name: &str| fs::read(dir.join(name)).map_err(|e| e.to_string());
    Ok((read("imputed.mtx")?, read("report.json")?))
}

fn determinism() -> Outcome {
    let mut outputs = Vec::new();
    for threads in [1, 1, 8, 8] {
        let dir = tempfile::tempdir().unwrap();
        match pipeline_bytes(threads, dir.path()) {
            Ok(o) => outputs.push((threads, o)),
            Err(e) => return Outcome::new(false, e),
        }
    }
    let (_, first) = &outputs[0];
    let same = outputs.iter().all(|(_, o)| o == first);
    Outcome::new(
        same,
        format!(
            "300x240 pipeline, two runs each at 1 and 8 threads: imputed.mtx ({} bytes) and report.json ({} bytes) identical: {same}",
            first.0.len(),
            first.1.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. simulator calibration
// ---------------------------------------------------------------------------

fn calibration() -> Outcome {
    let probs = [0.20, 0.35, 0.45];
    let mut worst_sparsity: f64 = 0.0;
    let mut worst_z: f64 = 0.0;
    let mut runs = 0;
    for &seed in &SEEDS {
        for base in [SimConfig { seed, ..SimConfig::default() }, acceptance_sim(seed)] {
            let cfg = match calibrate_dropout(&base, 0.8) {
                Ok(c) => c,
                Err(e) => return Outcome::new(false, format!("seed {seed}: {e}")),
            };
            let sim = simulate(&cfg).unwrap();
            worst_sparsity = worst_sparsity.max((sim.observed.sparsity() - 0.8).abs());
            let n = sim.labels.len() as f64;
            for (k, &p) in probs.iter().enumerate() {
                let count = sim.labels.iter().filter(|&&l| l == k).count() as f64;
                let z = (count - n * p).abs() / (n * p * (1.0 - p)).sqrt();
                worst_z = worst_z.max(z);
            }
            runs += 1;
        }
    }
    Outcome::new(
        worst_sparsity <= CALIBRATION_TOLERANCE && worst_z <= 3.0,
        format!(
            "{runs} calibrations of 1000x800 to 0.80: max |sparsity - 0.80| = {worst_sparsity:.4} (need <= 0.02); max group-size deviation {worst_z:.2} sigma (need <= 3)"
        ),
    )
}

// ---------------------------------------------------------------------------

fn report(id: usize, name: &str, start: Instant, o: &Outcome) -> bool {
    println!(
        "{} criterion {id} ({name}): {} [{:.1}s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        start.elapsed().as_secs_f64()
    );
    o.pass
}

fn main() {
    // Libtest flags such as --nocapture or a name filter are accepted and ignored.
    let mut ok = true;
    let timed = |f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        (f(), t)
    };

    let (o, t) = timed(&posterior_formula);
    ok &= report(1, "dropout posterior formula", t, &o);
    let (o, t) = timed(&em_recovery);
    ok &= report(2, "EM recovery", t, &o);
    let (o, t) = timed(&metric_oracles);
    ok &= report(3, "metric oracles", t, &o);
    let (o, t) = timed(&mask_safety);
    ok &= report(4, "mask safety and scope", t, &o);
    let (o, t) = timed(&forest_correctness);
    ok &= report(5, "forest correctness", t, &o);

    let t = Instant::now();
    let quality = quality_runs();
    match &quality {
        Ok(runs) => ok &= report(6, "imputation quality", t, &imputation_quality(runs)),
        Err(e) => ok &= report(6, "imputation quality", t, &Outcome::new(false, e.clone())),
    }
    let t = Instant::now();
    let runs = quality.as_deref().unwrap_or(&[]);
    ok &= report(7, "stopping rule", t, &stopping_rule(runs));

    let (o, t) = timed(&determinism);
    ok &= report(8, "determinism across threads", t, &o);
    let (o, t) = timed(&calibration);
    ok &= report(9, "simulator calibration", t, &o);

    if !ok {
        std::process::exit(1);
    }
}
