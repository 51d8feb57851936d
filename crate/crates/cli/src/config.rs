//! Experiment configuration and kernel-bank construction.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mkl_core::bayes::BayesOptions;
use mkl_core::gram::{
    build_gram, build_multitask_bank, build_overlap_linear_kernels, DataMatrix, GramMatrix, KernelBank, KernelDescriptor,
    KernelKind, Normalization,
};
use mkl_core::io::{read_dataset_file, read_matrix_file, CsvOptions, Dataset};
use mkl_core::regfam::RegularizerSpec;
use mkl_core::solver::{FitOptions, LossSpec};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub kernels: KernelsConfig,
    pub regularizer: RegularizerSpec,
    #[serde(default = "default_loss")]
    pub loss: LossSpec,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default)]
    pub bayes: BayesConfig,
    #[serde(default)]
    pub seed: u64,
    /// Pick C (and lambda for elastic net) by cross validation before training.
    #[serde(default)]
    pub select: bool,
}

fn default_loss() -> LossSpec {
    LossSpec::Squared { sigma2: 1.0 }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    #[serde(default = "yes")]
    pub header: bool,
}

fn yes() -> bool {
    true
}

/// One family with a list of bandwidths; linear kernels take none.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    pub kind: String,
    #[serde(default)]
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultitaskConfig {
    pub tasks: usize,
    pub base: KernelDescriptor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecomputedKernel {
    pub path: PathBuf,
    #[serde(default)]
    pub label: Option<String>,
}

/// Sources of candidate kernels. Everything listed is concatenated in the
/// order grid, explicit, overlap groups, multi-task, precomputed.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelsConfig {
    #[serde(default)]
    pub normalize: Normalization,
    /// Factorial construction: every grid entry on every feature set.
    #[serde(default)]
    pub grid: Vec<GridEntry>,
    #[serde(default)]
    pub feature_sets: Vec<Vec<usize>>,
    #[serde(default)]
    pub explicit: Vec<KernelDescriptor>,
    #[serde(default)]
    pub overlap_groups: Vec<Vec<usize>>,
    #[serde(default)]
    pub multitask: Option<MultitaskConfig>,
    #[serde(default)]
    pub precomputed: Vec<PrecomputedKernel>,
    /// Another JSON file with the same layout; its paths are relative to itself.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub c_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub folds: usize,
    pub repeats: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            c_grid: vec![1e-4, 1e-3, 1e-2, 0.1, 1.0, 10.0],
            lambda_grid: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            folds: 4,
            repeats: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BayesConfig {
    pub sigma2: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for BayesConfig {
    fn default() -> Self {
        let o = BayesOptions::default();
        Self { sigma2: 1.0, max_iter: o.max_iter, tol: o.tol }
    }
}

impl BayesConfig {
    pub fn options(&self) -> BayesOptions {
        BayesOptions { max_iter: self.max_iter, tol: self.tol }
    }
}

/// A resolved bank with display labels for every kernel.
pub struct Bank {
    pub bank: KernelBank,
    pub labels: Vec<String>,
}

impl ExperimentConfig {
    /// Parse and validate; relative paths are resolved against the config's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: ExperimentConfig = parse_json(&text, path)?;
        let dir = parent(path);
        cfg.data.path = dir.join(&cfg.data.path);
        cfg.kernels.resolve(&dir)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.loss.validate()?;
        let cv = &self.cv;
        if cv.c_grid.is_empty() {
            return Err(CliError::Config("cv.c_grid must not be empty".into()));
        }
        if let Some(c) = cv.c_grid.iter().find(|c| !(**c > 0.0) || !c.is_finite()) {
            return Err(CliError::Config(format!("cv.c_grid entries must be positive, got {c}")));
        }
        if cv.lambda_grid.is_empty() {
            return Err(CliError::Config("cv.lambda_grid must not be empty".into()));
        }
        if let Some(l) = cv.lambda_grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(CliError::Config(format!("cv.lambda_grid entries must lie in [0, 1], got {l}")));
        }
        if cv.folds < 2 {
            return Err(CliError::Config(format!("cv.folds must be at least 2, got {}", cv.folds)));
        }
        if cv.repeats < 1 {
            return Err(CliError::Config("cv.repeats must be at least 1".into()));
        }
        if !(self.bayes.sigma2 > 0.0) {
            return Err(CliError::Config(format!("bayes.sigma2 must be positive, got {}", self.bayes.sigma2)));
        }
        self.kernels.check_nonempty()
    }

    pub fn read_data(&self) -> Result<Dataset, CliError> {
        Ok(read_dataset_file(&self.data.path, CsvOptions { has_header: self.data.header, require_labels: true })?)
    }
}

pub fn parent(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// serde_json with the line and column in the message.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T, CliError> {
    serde_json::from_str(text).map_err(|e| {
        CliError::Config(format!("{}: line {}, column {}: {}", path.display(), e.line(), e.column(), strip_position(&e)))
    })
}

fn strip_position(e: &serde_json::Error) -> String {
    let s = e.to_string();
    match s.rfind(" at line ") {
        Some(i) => s[..i].to_string(),
        None => s,
    }
}

impl KernelsConfig {
    fn resolve(&mut self, dir: &Path) -> Result<(), CliError> {
        for p in &mut self.precomputed {
            p.path = dir.join(&p.path);
        }
        if let Some(m) = self.manifest.take() {
            let path = dir.join(m);
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            let mut inner: KernelsConfig = parse_json(&text, &path)?;
            inner.resolve(&parent(&path))?;
            self.merge(inner);
        }
        Ok(())
    }

    fn merge(&mut self, other: KernelsConfig) {
        if self.normalize == Normalization::None {
            self.normalize = other.normalize;
        }
        self.grid.extend(other.grid);
        if self.feature_sets.is_empty() {
            self.feature_sets = other.feature_sets;
        }
        self.explicit.extend(other.explicit);
        self.overlap_groups.extend(other.overlap_groups);
        if self.multitask.is_none() {
            self.multitask = other.multitask;
        }
        self.precomputed.extend(other.precomputed);
    }

    fn check_nonempty(&self) -> Result<(), CliError> {
        for g in &self.grid {
            if g.kind != "linear" && g.gamma.is_empty() {
                return Err(CliError::Config(format!("kernels.grid entry '{}' has an empty gamma list", g.kind)));
            }
        }
        if self.feature_sets.iter().any(Vec::is_empty) {
            return Err(CliError::Config("kernels.feature_sets entries must not be empty".into()));
        }
        let any = !self.grid.is_empty()
            || !self.explicit.is_empty()
            || !self.overlap_groups.is_empty()
            || self.multitask.is_some()
            || !self.precomputed.is_empty();
        if !any {
            return Err(CliError::Config("kernels: no kernels configured".into()));
        }
        Ok(())
    }

    /// Descriptors from the factorial grid, in family-major order.
    pub fn grid_descriptors(&self) -> Result<Vec<KernelDescriptor>, CliError> {
        let sets: Vec<Option<Vec<usize>>> =
            if self.feature_sets.is_empty() { vec![None] } else { self.feature_sets.iter().cloned().map(Some).collect() };
        let mut out = Vec::new();
        for g in &self.grid {
            let kinds: Vec<KernelKind> = match g.kind.as_str() {
                "linear" => vec![KernelKind::Linear],
                "gaussian" => g.gamma.iter().map(|&gamma| KernelKind::Gaussian { gamma }).collect(),
                "chi2" => g.gamma.iter().map(|&gamma| KernelKind::Chi2 { gamma }).collect(),
                other => return Err(CliError::Config(format!("unknown kernel kind '{other}'"))),
            };
            for kind in kinds {
                for set in &sets {
                    let mut d = KernelDescriptor::new(kind).with_normalization(self.normalize);
                    d.features = set.clone();
                    out.push(d);
                }
            }
        }
        Ok(out)
    }

    pub fn build(&self, data: &DataMatrix) -> Result<Bank, CliError> {
        let mut grams: Vec<GramMatrix> = Vec::new();
        let mut labels = Vec::new();
        let mut push = |g: GramMatrix, label: String| {
            grams.push(g);
            labels.push(label);
        };
        for d in self.grid_descriptors()?.iter().chain(&self.explicit) {
            push(build_gram(data, d)?, d.label());
        }
        if !self.overlap_groups.is_empty() {
            let bank = build_overlap_linear_kernels(data, &self.overlap_groups)?;
            for g in bank.iter() {
                let label = g.descriptor().map(KernelDescriptor::label).unwrap_or_default();
                push(g.clone(), label);
            }
        }
        if let Some(mt) = &self.multitask {
            let bank = build_multitask_bank(&mt.base, data, mt.tasks)?;
            for g in bank.iter() {
                let label = g.descriptor().map(KernelDescriptor::label).unwrap_or_default();
                push(g.clone(), label);
            }
        }
        for p in &self.precomputed {
            let m = read_matrix_file(&p.path)?;
            let label = p.label.clone().unwrap_or_else(|| p.path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
            push(GramMatrix::from_entries(m, None)?, label);
        }
        Ok(Bank { bank: KernelBank::new(grams)?, labels })
    }
}
