use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use scrmf_core::eval_metrics::{
    ari, elbow_curve, kmeans, log_normalized_cells, nmi, pca, KMeansConfig, Partition,
};
use scrmf_core::forest_impute::{impute, ImputationResult};
use scrmf_core::matrix_io::{
    read_labels, read_matrix, read_pattern, sidecar_path, write_labels, write_matrix, write_pattern,
    CountMatrix, MatrixFormat,
};
use scrmf_core::simulate::{calibrate_dropout, simulate, SimOutput};
use scrmf_core::zinb_dropout::{detect_dropouts, DropoutMask, GeneFits, StratumLabels};

use crate::config::{EvalSection, RunConfig};
use crate::report::{write_file, Metrics, RunReport, StageFailure, Timings};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn read_counts(path: &Path) -> Result<CountMatrix> {
    log::info!("reading {}", path.display());
    Ok(read_matrix(path, MatrixFormat::from_path(path))?)
}

/// Writes `<name>.mtx` and its name sidecars; records all three.
fn write_counts(m: &CountMatrix, out_dir: &Path, name: &str, report: &mut RunReport) -> Result<()> {
    let path = out_dir.join(format!("{name}.mtx"));
    write_matrix(m, &path, MatrixFormat::MatrixMarket)?;
    report.artifact_paths.push(format!("{name}.mtx"));
    for kind in ["genes", "cells"] {
        let side = sidecar_path(&path, kind);
        report
            .artifact_paths
            .push(side.file_name().unwrap().to_string_lossy().into_owned());
    }
    Ok(())
}

fn write_text(out_dir: &Path, name: &str, text: &str, report: &mut RunReport) -> Result<()> {
    write_file(&out_dir.join(name), text)?;
    report.artifact_paths.push(name.to_string());
    Ok(())
}

fn finish(report: &RunReport, timings: &mut Timings, out_dir: &Path) -> Result<()> {
    report.write(out_dir)?;
    timings.write(out_dir)?;
    log::info!("report written to {}", out_dir.join(crate::report::REPORT_FILE).display());
    Ok(())
}

fn load_partition(path: &Path, n_cells: usize) -> Result<Partition> {
    let labels = read_labels(path)?;
    if labels.len() != n_cells {
        return Err(CliError::Io(format!(
            "{}: {} labels for {n_cells} cells",
            path.display(),
            labels.len()
        )));
    }
    Ok(Partition::from_labels(&labels))
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn run_simulation(cfg: &RunConfig, metrics: &mut Metrics) -> Result<SimOutput> {
    let sim_cfg = match cfg.calibrate.target_sparsity {
        Some(t) => calibrate_dropout(&cfg.simulate, t)?,
        None => cfg.simulate.clone(),
    };
    let out = simulate(&sim_cfg)?;
    let mut sizes = vec![0usize; sim_cfg.group_probs.len()];
    for &l in &out.labels {
        sizes[l] += 1;
    }
    metrics.n_genes = Some(out.observed.n_genes());
    metrics.n_cells = Some(out.observed.n_cells());
    metrics.sparsity = Some(out.observed.sparsity());
    metrics.truth_sparsity = Some(out.truth.sparsity());
    metrics.dropout_mid = Some(sim_cfg.dropout_mid);
    metrics.group_sizes = Some(sizes);
    Ok(out)
}

fn write_simulation(sim: &SimOutput, cfg: &RunConfig, out_dir: &Path, report: &mut RunReport) -> Result<()> {
    write_counts(&sim.truth, out_dir, "truth", report)?;
    write_counts(&sim.observed, out_dir, "observed", report)?;
    write_labels(out_dir.join("labels.txt"), &sim.labels)?;
    report.artifact_paths.push("labels.txt".into());
    write_text(out_dir, "config.toml", &cfg.to_toml(), report)
}

pub fn cmd_simulate(cfg: &RunConfig, out_dir: &Path) -> Result<RunReport> {
    let mut report = RunReport::new("simulate", cfg);
    let mut timings = Timings::new("simulate");
    let sim = timings.stage("simulate", || run_simulation(cfg, &mut report.metrics))?;
    timings.stage("write", || write_simulation(&sim, cfg, out_dir, &mut report))?;
    finish(&report, &mut timings, out_dir)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// detect
// ---------------------------------------------------------------------------

fn run_detection(
    m: &CountMatrix,
    strata: Option<&StratumLabels>,
    cfg: &RunConfig,
    report: &mut RunReport,
) -> Result<(GeneFits, DropoutMask)> {
    let (fits, mask) = detect_dropouts(m, strata, &cfg.detect.em_config())?;
    let n_zeros = m.n_genes() * m.n_cells() - m.nnz();
    let n_flagged = mask.n_masked();
    let mut status = BTreeMap::new();
    for (_, _, fit) in fits.iter() {
        let key = serde_json::to_value(fit.status)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        *status.entry(key).or_insert(0usize) += 1;
    }
    let r = &mut report.metrics;
    r.n_genes = Some(m.n_genes());
    r.n_cells = Some(m.n_cells());
    r.sparsity = Some(m.sparsity());
    r.n_zeros = Some(n_zeros);
    r.n_flagged = Some(n_flagged);
    r.flagged_fraction = Some(n_flagged as f64 / (m.n_genes() * m.n_cells()) as f64);
    r.stratified = Some(strata.is_some_and(|s| s.n_strata() > 1));
    r.fit_status_counts = Some(status);
    if n_zeros == 0 {
        report.warnings.push("matrix has no zeros; the dropout mask is empty".into());
    } else if n_flagged == 0 {
        report
            .warnings
            .push("no zeros were flagged (every per-cell target is 0)".into());
    }
    Ok((fits, mask))
}

fn write_detection(m: &CountMatrix, mask: &DropoutMask, out_dir: &Path, report: &mut RunReport) -> Result<()> {
    let (n_genes, n_cells) = m.shape();
    write_pattern(out_dir.join("mask.mtx"), n_genes, n_cells, &mask.positions())?;
    report.artifact_paths.push("mask.mtx".into());

    let genes = m.gene_names();
    let cells = m.cell_names();
    let mut post = String::from("gene\tcell\tposterior\n");
    for &(g, c, d) in mask.posteriors() {
        let _ = writeln!(post, "{}\t{}\t{d}", genes[g], cells[c]);
    }
    write_text(out_dir, "posteriors.tsv", &post, report)?;

    let zeros = m.zeros_per_cell();
    let flagged = mask.flags_per_cell();
    let mut targets = String::from("cell\tzeros\ttarget\tflagged\n");
    for c in 0..n_cells {
        let _ = writeln!(
            targets,
            "{}\t{}\t{}\t{}",
            cells[c],
            zeros[c],
            mask.targets()[c],
            flagged[c]
        );
    }
    write_text(out_dir, "targets.tsv", &targets, report)
}

pub fn cmd_detect(cfg: &RunConfig, matrix: &Path, strata: Option<&Path>, out_dir: &Path) -> Result<RunReport> {
    let mut report = RunReport::new("detect", cfg);
    let mut timings = Timings::new("detect");
    report.inputs.insert("matrix".into(), matrix.display().to_string());
    let m = timings.stage("read", || read_counts(matrix))?;
    let strata = match strata {
        Some(p) => {
            report.inputs.insert("strata".into(), p.display().to_string());
            let part = load_partition(p, m.n_cells())?;
            Some(StratumLabels::new(part.labels().to_vec())?)
        }
        None => None,
    };
    let (_, mask) = timings.stage("detect", || run_detection(&m, strata.as_ref(), cfg, &mut report))?;
    timings.stage("write", || write_detection(&m, &mask, out_dir, &mut report))?;
    finish(&report, &mut timings, out_dir)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// impute
// ---------------------------------------------------------------------------

fn run_imputation(m: &CountMatrix, mask: &DropoutMask, cfg: &RunConfig, report: &mut RunReport) -> Result<ImputationResult> {
    let res = impute(m, mask, &cfg.impute)?;
    let r = &mut report.metrics;
    r.n_flagged = Some(res.masked_positions.len());
    r.deltas = Some(res.deltas.clone());
    r.oob_trace = Some(res.oob_trace.clone());
    r.stop_reason = serde_json::to_value(res.stop_reason)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string));
    r.iterations_run = Some(res.iterations_run);
    r.returned_iteration = Some(res.returned_iteration);
    if res.masked_positions.is_empty() {
        report.warnings.push("mask is empty; output equals input".into());
    }
    Ok(res)
}

fn write_imputation(res: &ImputationResult, out_dir: &Path, report: &mut RunReport) -> Result<()> {
    write_counts(&res.imputed, out_dir, "imputed", report)?;
    let mut trace = String::from("iteration\tdelta\toob_error\n");
    for (t, (d, o)) in res.deltas.iter().zip(&res.oob_trace).enumerate() {
        let _ = writeln!(trace, "{}\t{d}\t{o}", t + 1);
    }
    write_text(out_dir, "trace.tsv", &trace, report)
}

pub fn cmd_impute(cfg: &RunConfig, matrix: &Path, mask_path: &Path, out_dir: &Path) -> Result<RunReport> {
    let mut report = RunReport::new("impute", cfg);
    let mut timings = Timings::new("impute");
    report.inputs.insert("matrix".into(), matrix.display().to_string());
    report.inputs.insert("mask".into(), mask_path.display().to_string());
    let m = timings.stage("read", || read_counts(matrix))?;
    let (shape, positions) = read_pattern(mask_path)?;
    if shape != m.shape() {
        return Err(CliError::Io(format!(
            "mask shape {shape:?} does not match matrix shape {:?}",
            m.shape()
        )));
    }
    let mask = DropoutMask::from_positions(shape.0, shape.1, &positions)?;
    let res = timings.stage("impute", || run_imputation(&m, &mask, cfg, &mut report))?;
    timings.stage("write", || write_imputation(&res, out_dir, &mut report))?;
    finish(&report, &mut timings, out_dir)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub struct EvalOutcome {
    pub partition: Partition,
    pub wcss: f64,
    pub ari: Option<f64>,
    pub nmi: Option<f64>,
    pub elbow: Vec<(usize, f64)>,
}

/// Log-normalize, PCA, k-means, and score against `labels` when given.
pub fn evaluate(
    m: &CountMatrix,
    labels: Option<&Partition>,
    e: &EvalSection,
    seed: u64,
    warnings: &mut Vec<String>,
) -> Result<EvalOutcome> {
    let x = log_normalized_cells(m)?;
    let max_comp = m.n_cells().min(m.n_genes());
    let n_comp = e.n_components.min(max_comp);
    if n_comp < e.n_components {
        warnings.push(format!(
            "using {n_comp} principal components; the matrix supports at most {max_comp}"
        ));
    }
    let emb = pca(&x, n_comp)?.embedding;
    let km_cfg = KMeansConfig {
        n_restarts: e.n_restarts,
        max_iterations: e.max_kmeans_iterations,
    };
    let km = kmeans(&emb, e.k, seed, &km_cfg)?;
    let hi = e.elbow_max.min(m.n_cells());
    let elbow = if e.elbow_min <= hi {
        elbow_curve(&emb, e.elbow_min..=hi, seed, &km_cfg)?
    } else {
        Vec::new()
    };
    let (ari_v, nmi_v) = match labels {
        Some(l) => (Some(ari(&km.partition, l)?), Some(nmi(&km.partition, l)?)),
        None => (None, None),
    };
    Ok(EvalOutcome {
        partition: km.partition,
        wcss: km.wcss,
        ari: ari_v,
        nmi: nmi_v,
        elbow,
    })
}

fn write_eval(outcome: &EvalOutcome, out_dir: &Path, suffix: &str, report: &mut RunReport) -> Result<()> {
    let mut elbow = String::from("k\twcss\n");
    for (k, w) in &outcome.elbow {
        let _ = writeln!(elbow, "{k}\t{w}");
    }
    write_text(out_dir, &format!("elbow{suffix}.tsv"), &elbow, report)?;
    let name = format!("clusters{suffix}.txt");
    write_labels(out_dir.join(&name), outcome.partition.labels())?;
    report.artifact_paths.push(name);
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, matrix: &Path, labels: &Path, out_dir: &Path) -> Result<RunReport> {
    let mut report = RunReport::new("eval", cfg);
    let mut timings = Timings::new("eval");
    report.inputs.insert("matrix".into(), matrix.display().to_string());
    report.inputs.insert("labels".into(), labels.display().to_string());
    let m = timings.stage("read", || read_counts(matrix))?;
    let part = load_partition(labels, m.n_cells())?;
    let outcome = timings.stage("eval", || {
        evaluate(&m, Some(&part), &cfg.eval, cfg.seed, &mut report.warnings)
    })?;
    let r = &mut report.metrics;
    r.n_genes = Some(m.n_genes());
    r.n_cells = Some(m.n_cells());
    r.ari = outcome.ari;
    r.nmi = outcome.nmi;
    r.wcss = Some(outcome.wcss);
    r.elbow = Some(outcome.elbow.clone());
    timings.stage("write", || write_eval(&outcome, out_dir, "", &mut report))?;
    finish(&report, &mut timings, out_dir)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

/// Optional pre-existing inputs; without `matrix` the pipeline simulates.
#[derive(Debug, Clone, Default)]
pub struct PipelineInputs {
    pub matrix: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub truth: Option<PathBuf>,
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let sse: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sse / a.len() as f64).sqrt()
}

fn pipeline_stages(
    cfg: &RunConfig,
    inputs: &PipelineInputs,
    out_dir: &Path,
    report: &mut RunReport,
    timings: &mut Timings,
    stage: &mut &'static str,
) -> Result<()> {
    *stage = "load";
    let (observed, truth, labels) = match &inputs.matrix {
        Some(path) => {
            report.inputs.insert("matrix".into(), path.display().to_string());
            let observed = timings.stage("read", || read_counts(path))?;
            let truth = match &inputs.truth {
                Some(t) => {
                    report.inputs.insert("truth".into(), t.display().to_string());
                    let truth = read_counts(t)?;
                    if truth.shape() != observed.shape() {
                        return Err(CliError::Io(format!(
                            "truth shape {:?} does not match matrix shape {:?}",
                            truth.shape(),
                            observed.shape()
                        )));
                    }
                    Some(truth)
                }
                None => None,
            };
            let labels = match &inputs.labels {
                Some(l) => {
                    report.inputs.insert("labels".into(), l.display().to_string());
                    Some(load_partition(l, observed.n_cells())?)
                }
                None => None,
            };
            report.metrics.n_genes = Some(observed.n_genes());
            report.metrics.n_cells = Some(observed.n_cells());
            report.metrics.sparsity = Some(observed.sparsity());
            (observed, truth, labels)
        }
        None => {
            *stage = "simulate";
            let sim = timings.stage("simulate", || run_simulation(cfg, &mut report.metrics))?;
            timings.stage("write_simulation", || write_simulation(&sim, cfg, out_dir, report))?;
            let labels = Partition::new(sim.labels.clone());
            (sim.observed, Some(sim.truth), Some(labels))
        }
    };

    *stage = "detect";
    let strata = match (&labels, cfg.detect.stratify_by_labels) {
        (Some(l), true) => Some(StratumLabels::new(l.labels().to_vec())?),
        (None, true) => {
            return Err(CliError::Config("stratified detection needs cell labels".into()));
        }
        _ => None,
    };
    let (_, mask) = timings.stage("detect", || run_detection(&observed, strata.as_ref(), cfg, report))?;
    timings.stage("write_detection", || write_detection(&observed, &mask, out_dir, report))?;

    *stage = "impute";
    let res = timings.stage("impute", || run_imputation(&observed, &mask, cfg, report))?;
    timings.stage("write_imputation", || write_imputation(&res, out_dir, report))?;

    if let Some(truth) = &truth {
        if let Some(init) = res.iterates.first() {
            let target: Vec<f64> = res.masked_positions.iter().map(|&(g, c)| truth.get(g, c)).collect();
            let imputed: Vec<f64> = res
                .masked_positions
                .iter()
                .map(|&(g, c)| res.imputed.get(g, c))
                .collect();
            report.metrics.masked_rmse = Some(rmse(&imputed, &target));
            report.metrics.baseline_rmse = Some(rmse(init, &target));
        }
    }

    *stage = "eval";
    if let Some(labels) = &labels {
        let before = timings.stage("eval_before", || {
            evaluate(&observed, Some(labels), &cfg.eval, cfg.seed, &mut report.warnings)
        })?;
        let after = timings.stage("eval_after", || {
            evaluate(&res.imputed, Some(labels), &cfg.eval, cfg.seed, &mut report.warnings)
        })?;
        if let Some(truth) = &truth {
            let t = timings.stage("eval_truth", || {
                evaluate(truth, Some(labels), &cfg.eval, cfg.seed, &mut Vec::new())
            })?;
            report.metrics.ari_truth = t.ari;
        }
        write_eval(&before, out_dir, "_before", report)?;
        write_eval(&after, out_dir, "_after", report)?;
        let r = &mut report.metrics;
        r.ari_before = before.ari;
        r.ari_after = after.ari;
        r.nmi_before = before.nmi;
        r.nmi_after = after.nmi;
    } else {
        report
            .warnings
            .push("no cell labels; clustering metrics skipped".into());
    }
    Ok(())
}

pub fn cmd_pipeline(cfg: &RunConfig, inputs: &PipelineInputs, out_dir: &Path) -> Result<RunReport> {
    let mut report = RunReport::new("pipeline", cfg);
    let mut timings = Timings::new("pipeline");
    let mut stage = "load";
    match pipeline_stages(cfg, inputs, out_dir, &mut report, &mut timings, &mut stage) {
        Ok(()) => {
            finish(&report, &mut timings, out_dir)?;
            Ok(report)
        }
        Err(e) => {
            // Keep what was written and record where it stopped.
            report.error = Some(StageFailure {
                stage: stage.to_string(),
                message: e.to_string(),
            });
            let _ = finish(&report, &mut timings, out_dir);
            Err(e)
        }
    }
}
