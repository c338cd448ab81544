//! Command-line front end: `simulate`, `detect`, `impute`, `eval` and the
//! end-to-end `pipeline`. Each command writes its artifacts plus a JSON
//! report into `--out-dir`.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use scrmf_core::eval_metrics::EvalError;
use scrmf_core::forest_impute::ForestError;
use scrmf_core::matrix_io::MatrixError;
use scrmf_core::simulate::SimError;
use scrmf_core::zinb_dropout::ZinbError;
use thiserror::Error;

pub use commands::{cmd_detect, cmd_eval, cmd_impute, cmd_pipeline, cmd_simulate, PipelineInputs};
pub use config::{Overrides, RunConfig};
pub use report::RunReport;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<MatrixError> for CliError {
    fn from(e: MatrixError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ZinbError> for CliError {
    fn from(e: ZinbError) -> Self {
        match e {
            ZinbError::InvalidStrata(_) => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<ForestError> for CliError {
    fn from(e: ForestError) -> Self {
        match e {
            ForestError::Config(_) => CliError::Config(e.to_string()),
            ForestError::Matrix(m) => m.into(),
            ForestError::MaskShape { .. } | ForestError::MaskOnNonzero { .. } => {
                CliError::Io(e.to_string())
            }
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Matrix(m) => m.into(),
            EvalError::KTooLarge { .. } | EvalError::ComponentCount { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) | SimError::UnreachableTarget { .. } => CliError::Config(e.to_string()),
            SimError::Matrix(m) => m.into(),
            SimError::NoConvergence { .. } => CliError::Numeric(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "scrmf", version, about = "ZINB dropout detection and random-forest imputation for single-cell counts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores). Results do not depend on it.
    #[arg(long, env = "SCRMF_THREADS", default_value_t = 0)]
    pub threads: usize,
    #[arg(long, default_value = "scrmf-out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ForestFlags {
    #[arg(long)]
    pub ntree: Option<usize>,
    /// Candidate predictors per split (default: floor(sqrt(p))).
    #[arg(long)]
    pub mtry: Option<usize>,
    #[arg(long)]
    pub min_node_size: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Round imputed values to integers when the input is integral.
    #[arg(long)]
    pub round_counts: bool,
    /// Cap imputed values at each gene's observed maximum.
    #[arg(long)]
    pub winsorize: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalFlags {
    /// Number of k-means clusters.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub elbow_min: Option<usize>,
    #[arg(long)]
    pub elbow_max: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic count matrix with known groups and dropouts.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        target_sparsity: Option<f64>,
    },
    /// Fit per-gene ZINB models and flag likely dropout zeros.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        matrix: PathBuf,
        /// One label per cell; fits are made per label.
        #[arg(long)]
        strata: Option<PathBuf>,
    },
    /// Impute flagged entries with iterative random forests.
    Impute {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        matrix: PathBuf,
        /// Pattern Matrix Market file of flagged positions.
        #[arg(long)]
        mask: PathBuf,
        #[command(flatten)]
        forest: ForestFlags,
    },
    /// Cluster cells (PCA + k-means) and score against labels.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Simulate (or load), detect, impute and evaluate before and after.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Use this observed matrix instead of simulating.
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Pre-dropout counts for RMSE scoring.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        target_sparsity: Option<f64>,
        /// Fit ZINB models per label group.
        #[arg(long)]
        stratify: bool,
        #[command(flatten)]
        forest: ForestFlags,
        #[command(flatten)]
        eval: EvalFlags,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Simulate { common, .. }
            | Command::Detect { common, .. }
            | Command::Impute { common, .. }
            | Command::Eval { common, .. }
            | Command::Pipeline { common, .. } => common,
        }
    }
}

fn overrides(cmd: &Command) -> Overrides {
    let mut o = Overrides {
        seed: cmd.common().seed,
        ..Overrides::default()
    };
    let forest = |o: &mut Overrides, f: &ForestFlags| {
        o.ntree = f.ntree;
        o.mtry = f.mtry;
        o.min_node_size = f.min_node_size;
        o.max_iterations = f.max_iterations;
        o.round_counts = f.round_counts;
        o.winsorize = f.winsorize;
    };
    let eval = |o: &mut Overrides, e: &EvalFlags| {
        o.k = e.k;
        o.elbow_min = e.elbow_min;
        o.elbow_max = e.elbow_max;
    };
    match cmd {
        Command::Simulate { target_sparsity, .. } => o.target_sparsity = *target_sparsity,
        Command::Detect { .. } => {}
        Command::Impute { forest: f, .. } => forest(&mut o, f),
        Command::Eval { eval: e, .. } => eval(&mut o, e),
        Command::Pipeline {
            target_sparsity,
            stratify,
            forest: f,
            eval: e,
            ..
        } => {
            o.target_sparsity = *target_sparsity;
            o.stratify_by_labels = *stratify;
            forest(&mut o, f);
            eval(&mut o, e);
        }
    }
    o
}

/// Resolve configuration, size the worker pool and dispatch.
pub fn run(cli: Cli) -> Result<RunReport, CliError> {
    let common = cli.command.common().clone();
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.resolve(&overrides(&cli.command))?;
    std::fs::create_dir_all(&common.out_dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", common.out_dir.display())))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let out = common.out_dir.as_path();
    pool.install(|| match cli.command {
        Command::Simulate { .. } => cmd_simulate(&cfg, out),
        Command::Detect { matrix, strata, .. } => cmd_detect(&cfg, &matrix, strata.as_deref(), out),
        Command::Impute { matrix, mask, .. } => cmd_impute(&cfg, &matrix, &mask, out),
        Command::Eval { matrix, labels, .. } => cmd_eval(&cfg, &matrix, &labels, out),
        Command::Pipeline {
            matrix,
            labels,
            truth,
            ..
        } => cmd_pipeline(
            &cfg,
            &PipelineInputs {
                matrix,
                labels,
                truth,
            },
            out,
        ),
    })
}
