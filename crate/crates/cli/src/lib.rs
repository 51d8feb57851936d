//! Command-line driver: training, prediction, cross validation, weight
//! reports, empirical Bayes fits and the conjugacy check suite.

pub mod config;
pub mod cv;
pub mod report;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use mkl_core::bayes::fit_bayes;
use mkl_core::conjcheck::{run_conjugate_suite, SuiteOptions};
use mkl_core::io::{read_dataset_file, read_matrix_file, write_bayes_trace, write_fit_trace, CsvOptions};
use mkl_core::regfam::Family;
use mkl_core::solver::{fit, LossSpec};
use mkl_core::MklError;

use config::ExperimentConfig;
use cv::{cell_spec, run_cv, Metric};
use report::{weight_report, GroupKey, Metadata, ModelFile};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] MklError),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{failed} of {total} conjugacy checks failed")]
    CheckFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Core(MklError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
    }

    /// 1 bad input, 2 numerical failure, 3 failed checks.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::Numerical(_) => 2,
            CliError::CheckFailed { .. } => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mkl", version, about = "Multiple kernel learning with kernel-weight and block-norm regularizers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and write it with its iteration trace.
    Train(TrainArgs),
    /// Score new rows with a trained model.
    Predict(PredictArgs),
    /// Repeated k-fold cross validation over the C (and lambda) grid.
    Cv(CvArgs),
    /// Summarize the kernel weights of a model.
    Weights(WeightsArgs),
    /// Empirical Bayes fit by MacKay updates.
    Bayes(BayesArgs),
    /// Compare numeric and analytic conjugates for every regularizer family.
    CheckConjugate(CheckArgs),
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// Training data CSV, replacing the one in the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Regularizer family, e.g. block_one_norm or elastic_net.
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Regularization constant.
    #[arg(long = "c")]
    pub c: Option<f64>,
    /// Loss: squared or logistic.
    #[arg(long)]
    pub loss: Option<String>,
    /// Noise variance for the squared loss.
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Select C (and lambda) by cross validation first.
    #[arg(long)]
    pub select: bool,
    #[arg(long, default_value = "model.json")]
    pub out: PathBuf,
    #[arg(long, default_value = "trace.csv")]
    pub trace: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Rows to score; a `y` column, if present, is used to report the metric.
    #[arg(long)]
    pub data: PathBuf,
    /// Cross-kernel rows for each precomputed kernel, in bank order.
    #[arg(long = "rows")]
    pub rows: Vec<PathBuf>,
    #[arg(long)]
    pub no_header: bool,
    /// Scores CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Full report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WeightsArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated grouping keys: family, parameter.
    #[arg(long, default_value = "family,parameter", value_delimiter = ',')]
    pub group_by: Vec<GroupKey>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BayesArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, default_value = "model.json")]
    pub out: PathBuf,
    #[arg(long, default_value = "trace.csv")]
    pub trace: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only check this family (e.g. elastic_net).
    #[arg(long)]
    pub family: Option<String>,
    /// Points per coordinate for 1-D scans.
    #[arg(long)]
    pub points: Option<usize>,
    /// Points per coordinate for joint scans.
    #[arg(long)]
    pub joint_points: Option<usize>,
    /// Report JSON; stdout summary only when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Cv(a) => cross_validate(a),
        Command::Weights(a) => weights(a),
        Command::Bayes(a) => bayes(a),
        Command::CheckConjugate(a) => check(a),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, CliError> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(MklError::from)?;
    s.push('\n');
    Ok(s)
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), CliError> {
        if let Some(d) = &self.data {
            cfg.data.path = d.clone();
        }
        if self.family.is_some() || self.p.is_some() || self.q.is_some() || self.lambda.is_some() || self.c.is_some() {
            let mut raw = serde_json::to_value(cfg.regularizer).map_err(MklError::from)?;
            if let Some(f) = &self.family {
                if *f != raw["family"] {
                    raw["params"] = serde_json::json!({});
                }
                raw["family"] = f.as_str().into();
            }
            for (k, v) in [("p", self.p), ("q", self.q), ("lambda", self.lambda)] {
                if let Some(v) = v {
                    raw["params"][k] = v.into();
                }
            }
            if let Some(c) = self.c {
                raw["C"] = c.into();
            }
            cfg.regularizer = serde_json::from_value(raw).map_err(|e| CliError::Config(format!("regularizer flags: {e}")))?;
        }
        match self.loss.as_deref() {
            None => {}
            Some("logistic") => cfg.loss = LossSpec::Logistic,
            Some("squared") => {
                if !matches!(cfg.loss, LossSpec::Squared { .. }) {
                    cfg.loss = LossSpec::Squared { sigma2: 1.0 };
                }
            }
            Some(other) => return Err(CliError::Config(format!("unknown loss '{other}' (use squared or logistic)"))),
        }
        if let Some(s) = self.sigma2 {
            match &mut cfg.loss {
                LossSpec::Squared { sigma2 } => *sigma2 = s,
                LossSpec::Logistic => return Err(CliError::Config("--sigma2 applies to the squared loss only".into())),
            }
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()
    }
}

fn labels_of(ds: &mkl_core::io::Dataset) -> Result<DVector<f64>, CliError> {
    ds.labels.clone().ok_or_else(|| CliError::Config("training data has no label column".into()))
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    a.overrides.apply(&mut cfg)?;
    let ds = cfg.read_data()?;
    let y = labels_of(&ds)?;
    let bank = cfg.kernels.build(&ds.features)?;
    let mut spec = cfg.regularizer;
    let mut cv_score = None;
    if a.select || cfg.select {
        let report = run_cv(&bank.bank, &y, &spec, &cfg.loss, &cfg.fit, &cfg.cv, cfg.seed)?;
        spec = cell_spec(&spec, report.selected.c, report.selected.lambda)?;
        cv_score = Some(report.selected.mean);
        eprint!("{}", report.table());
    }
    let (model, trace) = fit(&bank.bank, &y, &spec, &cfg.loss, &cfg.fit)?;
    let model = if bank.bank.iter().any(|g| g.descriptor().is_some()) { model.with_training(ds.features)? } else { model };
    let metadata = Metadata {
        seed: cfg.seed,
        selected_c: Some(spec.c),
        selected_lambda: match spec.family {
            Family::ElasticNet { lambda } => Some(lambda),
            _ => None,
        },
        cv_score,
        outer_iterations: trace.records.len(),
        converged: trace.converged,
        clamped: trace.clamped.clone(),
        nll: None,
    };
    let file = ModelFile::new(model, bank.labels, metadata);
    write_file(&a.out, file.to_json()?.as_bytes())?;
    let mut w = create(&a.trace)?;
    write_fit_trace(&mut w, &trace)?;
    w.flush().map_err(|e| CliError::io(&a.trace, e))?;
    println!(
        "trained {} kernels ({} nonzero) in {} outer iterations{}",
        file.model.weights.len(),
        file.model.weights.active().len(),
        trace.records.len(),
        if trace.converged { "" } else { ", not converged" }
    );
    Ok(())
}

fn predict(a: PredictArgs) -> Result<(), CliError> {
    let file = ModelFile::load(&a.model)?;
    let ds = read_dataset_file(&a.data, CsvOptions { has_header: !a.no_header, require_labels: false })?;
    let rows = a.rows.iter().map(|p| read_matrix_file(p)).collect::<mkl_core::Result<Vec<_>>>()?;
    let scores = file.model.predict_with(&ds.features, &rows)?;
    let mut out = String::from("score\n");
    for s in scores.iter() {
        out.push_str(&format!("{s}\n"));
    }
    match &a.out {
        Some(p) => write_file(p, out.as_bytes())?,
        None => print!("{out}"),
    }
    if let Some(y) = &ds.labels {
        let metric = Metric::for_loss(&file.model.loss);
        let v = metric.score(y.as_slice(), scores.as_slice());
        eprintln!("{}: {v}", format!("{metric:?}").to_lowercase());
    }
    Ok(())
}

fn cross_validate(a: CvArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(f) = a.folds {
        cfg.cv.folds = f;
    }
    if let Some(r) = a.repeats {
        cfg.cv.repeats = r;
    }
    a.overrides.apply(&mut cfg)?;
    let ds = cfg.read_data()?;
    let y = labels_of(&ds)?;
    let bank = cfg.kernels.build(&ds.features)?;
    let report = run_cv(&bank.bank, &y, &cfg.regularizer, &cfg.loss, &cfg.fit, &cfg.cv, cfg.seed)?;
    print!("{}", report.table());
    if let Some(p) = &a.out {
        write_file(p, to_json(&report)?.as_bytes())?;
    }
    Ok(())
}

fn weights(a: WeightsArgs) -> Result<(), CliError> {
    let file = ModelFile::load(&a.model)?;
    let report = weight_report(&file, &a.group_by);
    let json = to_json(&report)?;
    match &a.out {
        Some(p) => {
            write_file(p, json.as_bytes())?;
            println!("{} of {} kernels nonzero, total weight {}", report.nonzero, report.kernels.len(), report.total_weight);
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn bayes(a: BayesArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(d) = a.data {
        cfg.data.path = d;
    }
    if let Some(s) = a.sigma2 {
        cfg.bayes.sigma2 = s;
    }
    if let Some(m) = a.max_iter {
        cfg.bayes.max_iter = m;
    }
    if let Some(t) = a.tol {
        cfg.bayes.tol = t;
    }
    cfg.validate()?;
    let ds = cfg.read_data()?;
    let y = labels_of(&ds)?;
    let bank = cfg.kernels.build(&ds.features)?;
    let (state, model) = fit_bayes(&bank.bank, &y, cfg.bayes.sigma2, &cfg.bayes.options())?;
    let model = if bank.bank.iter().any(|g| g.descriptor().is_some()) { model.with_training(ds.features)? } else { model };
    let metadata = Metadata {
        seed: cfg.seed,
        outer_iterations: state.iterations,
        converged: state.converged,
        nll: state.nll_trace.last().copied(),
        ..Metadata::default()
    };
    let file = ModelFile::new(model, bank.labels, metadata);
    write_file(&a.out, file.to_json()?.as_bytes())?;
    let mut w = create(&a.trace)?;
    write_bayes_trace(&mut w, &state)?;
    w.flush().map_err(|e| CliError::io(&a.trace, e))?;
    if state.unstable {
        eprintln!("warning: the marginal likelihood kept decreasing; the best visited weights were kept");
    }
    println!(
        "bayes fit: {} of {} kernels nonzero after {} iterations, nll {}",
        file.model.weights.active().len(),
        file.model.weights.len(),
        state.iterations,
        file.metadata.nll.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn check(a: CheckArgs) -> Result<(), CliError> {
    if !(a.tolerance > 0.0) {
        return Err(CliError::Config(format!("tolerance must be positive, got {}", a.tolerance)));
    }
    let mut opts = SuiteOptions { tolerance: a.tolerance, samples: a.samples, seed: a.seed, family: a.family, ..SuiteOptions::default() };
    if let Some(p) = a.points {
        opts.grid.points = p;
    }
    if let Some(p) = a.joint_points {
        opts.grid.joint_points = p;
    }
    let reports = run_conjugate_suite(&opts)?;
    if reports.is_empty() {
        return Err(CliError::Config(format!("no family matches '{}'", opts.family.unwrap_or_default())));
    }
    for r in &reports {
        println!("{:<32} {:<9} max rel err {:.3e}  {}", r.family, r.direction, r.max_rel_error, if r.passed { "PASS" } else { "FAIL" });
    }
    if let Some(p) = &a.out {
        write_file(p, to_json(&reports)?.as_bytes())?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::CheckFailed { failed, total: reports.len() });
    }
    Ok(())
}
