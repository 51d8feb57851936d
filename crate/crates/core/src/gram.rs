//! Kernel evaluation, Gram matrices and kernel banks.
//!
//! Every Gram matrix is stored dense. Entries are produced by a single
//! routine shared with the cross-Gram path used at prediction time, so
//! evaluating a trained model on its own training points reproduces the
//! training Gram bit for bit.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MklError, Result};
use crate::regfam::KernelWeights;

/// Relative tolerance used when validating symmetry of a Gram matrix.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Smallest eigenvalue may dip to `-PSD_TOL * lambda_max`.
pub const PSD_TOL: f64 = 1e-8;

/// Sample features (row-major) with optional task labels.
///
/// Task labels are zero-based here; the CSV reader converts the one-based
/// `task` column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMatrix {
    nrows: usize,
    ncols: usize,
    values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tasks: Option<Vec<usize>>,
}

impl DataMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let ncols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * ncols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != ncols {
                return Err(MklError::Dimension(format!(
                    "row {i} has {} columns, expected {ncols}",
                    row.len()
                )));
            }
            values.extend_from_slice(row);
        }
        Self::from_flat(rows.len(), ncols, values)
    }

    pub fn from_flat(nrows: usize, ncols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != nrows * ncols {
            return Err(MklError::Dimension(format!(
                "{} values for a {nrows}x{ncols} matrix",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(MklError::InvalidData(format!(
                "non-finite feature at row {}, column {}",
                pos / ncols.max(1),
                pos % ncols.max(1)
            )));
        }
        Ok(Self { nrows, ncols, values, tasks: None })
    }

    /// Attach zero-based task labels, one per row.
    pub fn with_tasks(mut self, tasks: Vec<usize>) -> Result<Self> {
        if tasks.len() != self.nrows {
            return Err(MklError::Dimension(format!(
                "{} task labels for {} samples",
                tasks.len(),
                self.nrows
            )));
        }
        self.tasks = Some(tasks);
        Ok(self)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn tasks(&self) -> Option<&[usize]> {
        self.tasks.as_deref()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Rows selected by index, keeping task labels.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut values = Vec::with_capacity(idx.len() * self.ncols);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Self {
            nrows: idx.len(),
            ncols: self.ncols,
            values,
            tasks: self.tasks.as_ref().map(|t| idx.iter().map(|&i| t[i]).collect()),
        }
    }

    fn check_nonnegative(&self, features: Option<&[usize]>) -> Result<()> {
        for i in 0..self.nrows {
            let row = self.row(i);
            let bad = match features {
                Some(cols) => cols.iter().any(|&c| row[c] < 0.0),
                None => row.iter().any(|&v| v < 0.0),
            };
            if bad {
                return Err(MklError::InvalidData(format!(
                    "chi2 kernel needs nonnegative features; row {i} has a negative entry"
                )));
            }
        }
        Ok(())
    }
}

/// Kernel family and its bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelKind {
    Linear,
    /// `exp(-sum (q_j - q'_j)^2 / (2 gamma^2))`
    Gaussian { gamma: f64 },
    /// `exp(-gamma^2 sum (q_j - q'_j)^2 / (q_j + q'_j))`
    Chi2 { gamma: f64 },
}

impl KernelKind {
    pub fn family_name(&self) -> &'static str {
        match self {
            KernelKind::Linear => "linear",
            KernelKind::Gaussian { .. } => "gaussian",
            KernelKind::Chi2 { .. } => "chi2",
        }
    }

    pub fn gamma(&self) -> Option<f64> {
        match *self {
            KernelKind::Linear => None,
            KernelKind::Gaussian { gamma } | KernelKind::Chi2 { gamma } => Some(gamma),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    /// `K_ij / sqrt(K_ii K_jj)`
    Diagonal,
    /// Rescale so that `trace(K) = N` on the training set.
    Trace,
}

/// Everything needed to recompute a kernel on new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelDescriptor {
    #[serde(flatten)]
    pub kind: KernelKind,
    /// Zero-based feature columns; `None` uses every column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<usize>>,
    /// Restrict to pairs where both samples belong to this zero-based task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<usize>,
    #[serde(default, skip_serializing_if = "is_default_norm")]
    pub normalize: Normalization,
}

fn is_default_norm(n: &Normalization) -> bool {
    *n == Normalization::None
}

impl KernelDescriptor {
    pub fn new(kind: KernelKind) -> Self {
        Self { kind, features: None, task: None, normalize: Normalization::None }
    }

    pub fn linear() -> Self {
        Self::new(KernelKind::Linear)
    }

    pub fn gaussian(gamma: f64) -> Self {
        Self::new(KernelKind::Gaussian { gamma })
    }

    pub fn chi2(gamma: f64) -> Self {
        Self::new(KernelKind::Chi2 { gamma })
    }

    pub fn with_features(mut self, features: Vec<usize>) -> Self {
        self.features = Some(features);
        self
    }

    pub fn with_task(mut self, task: usize) -> Self {
        self.task = Some(task);
        self
    }

    pub fn with_normalization(mut self, normalize: Normalization) -> Self {
        self.normalize = normalize;
        self
    }

    /// Short human-readable label, e.g. `gaussian(gamma=0.5)[0,2]@task1`.
    pub fn label(&self) -> String {
        let mut s = match self.kind.gamma() {
            Some(g) => format!("{}(gamma={g})", self.kind.family_name()),
            None => self.kind.family_name().to_string(),
        };
        if let Some(f) = &self.features {
            let cols: Vec<String> = f.iter().map(usize::to_string).collect();
            s.push_str(&format!("[{}]", cols.join(",")));
        }
        if let Some(t) = self.task {
            s.push_str(&format!("@task{}", t + 1));
        }
        s
    }

    fn validate(&self, data: &DataMatrix) -> Result<()> {
        match self.kind {
            KernelKind::Gaussian { gamma } | KernelKind::Chi2 { gamma } if !(gamma > 0.0) => {
                return Err(MklError::InvalidParameter(format!(
                    "kernel bandwidth must be positive, got {gamma}"
                )));
            }
            _ => {}
        }
        if let Some(f) = &self.features {
            if f.is_empty() {
                return Err(MklError::InvalidParameter("empty feature subset".into()));
            }
            if let Some(&c) = f.iter().find(|&&c| c >= data.ncols()) {
                return Err(MklError::InvalidParameter(format!(
                    "feature index {c} out of range for {} columns",
                    data.ncols()
                )));
            }
        }
        if matches!(self.kind, KernelKind::Chi2 { .. }) {
            data.check_nonnegative(self.features.as_deref())?;
        }
        if self.task.is_some() && data.tasks().is_none() {
            return Err(MklError::InvalidData("task-masked kernel needs task labels".into()));
        }
        Ok(())
    }

    fn raw(&self, a: &[f64], b: &[f64]) -> f64 {
        let cols = self.features.as_deref();
        match self.kind {
            KernelKind::Linear => fold_pairs(a, b, cols, |x, y| x * y),
            KernelKind::Gaussian { gamma } => {
                (-fold_pairs(a, b, cols, |x, y| (x - y) * (x - y)) / (2.0 * gamma * gamma)).exp()
            }
            KernelKind::Chi2 { gamma } => {
                (-gamma * gamma * fold_pairs(a, b, cols, chi2_term)).exp()
            }
        }
    }
}

fn fold_pairs(a: &[f64], b: &[f64], cols: Option<&[usize]>, f: impl Fn(f64, f64) -> f64) -> f64 {
    match cols {
        Some(cols) => cols.iter().map(|&c| f(a[c], b[c])).sum(),
        None => a.iter().zip(b).map(|(&x, &y)| f(x, y)).sum(),
    }
}

// 0/0 bins (both histograms empty) contribute nothing.
fn chi2_term(x: f64, y: f64) -> f64 {
    let s = x + y;
    if s == 0.0 {
        0.0
    } else {
        (x - y) * (x - y) / s
    }
}

fn check_pair(q: &[f64], q2: &[f64], gamma: f64) -> Result<()> {
    if q.len() != q2.len() {
        return Err(MklError::Dimension(format!("vector lengths {} and {}", q.len(), q2.len())));
    }
    if !(gamma > 0.0) {
        return Err(MklError::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    Ok(())
}

/// Gaussian RBF kernel `exp(-||q - q'||^2 / (2 gamma^2))`.
pub fn gaussian_kernel(q: &[f64], q2: &[f64], gamma: f64) -> Result<f64> {
    check_pair(q, q2, gamma)?;
    Ok(KernelDescriptor::gaussian(gamma).raw(q, q2))
}

/// Chi-squared kernel on nonnegative histograms.
pub fn chi2_kernel(q: &[f64], q2: &[f64], gamma: f64) -> Result<f64> {
    check_pair(q, q2, gamma)?;
    if q.iter().chain(q2).any(|&v| v < 0.0) {
        return Err(MklError::InvalidData("chi2 kernel needs nonnegative entries".into()));
    }
    Ok(KernelDescriptor::chi2(gamma).raw(q, q2))
}

/// Plain inner product.
pub fn linear_kernel(q: &[f64], q2: &[f64]) -> Result<f64> {
    if q.len() != q2.len() {
        return Err(MklError::Dimension(format!("vector lengths {} and {}", q.len(), q2.len())));
    }
    Ok(KernelDescriptor::linear().raw(q, q2))
}

/// One candidate kernel evaluated on the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    entries: DMatrix<f64>,
    descriptor: Option<KernelDescriptor>,
    scale: f64,
}

impl GramMatrix {
    /// Wrap a precomputed matrix. Checks shape, finiteness and symmetry.
    pub fn from_entries(entries: DMatrix<f64>, descriptor: Option<KernelDescriptor>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(MklError::Dimension(format!(
                "Gram matrix must be square, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(MklError::InvalidData("non-finite Gram entry".into()));
        }
        let n = entries.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (entries[(i, j)], entries[(j, i)]);
                if (a - b).abs() > SYMMETRY_TOL * a.abs().max(1.0) {
                    return Err(MklError::InvalidData(format!(
                        "Gram matrix not symmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(Self { entries, descriptor, scale: 1.0 })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    /// Descriptor used to compute this matrix; `None` for precomputed input
    /// without metadata.
    pub fn descriptor(&self) -> Option<&KernelDescriptor> {
        self.descriptor.as_ref()
    }

    /// Multiplicative factor applied after masking (trace normalization).
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Extreme eigenvalues `(min, max)`.
    pub fn eigen_range(&self) -> (f64, f64) {
        let eig = SymmetricEigen::new(self.entries.clone()).eigenvalues;
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (min, max)
    }

    /// PSD up to `-PSD_TOL * lambda_max`.
    pub fn is_psd(&self) -> bool {
        if self.n() == 0 {
            return true;
        }
        let (min, max) = self.eigen_range();
        min >= -PSD_TOL * max.max(0.0)
    }
}

/// Evaluate `desc` on every pair of rows of `data`.
pub fn build_gram(data: &DataMatrix, desc: &KernelDescriptor) -> Result<GramMatrix> {
    desc.validate(data)?;
    let n = data.nrows();
    let diag: Vec<f64> = match desc.normalize {
        Normalization::Diagonal => (0..n).map(|i| desc.raw(data.row(i), data.row(i))).collect(),
        _ => Vec::new(),
    };
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i..n)
                .map(|j| {
                    let (di, dj) = if diag.is_empty() { (1.0, 1.0) } else { (diag[i], diag[j]) };
                    entry(desc, data.row(i), data.row(j), di, dj, data.tasks().map(|t| (t[i], t[j])))
                })
                .collect()
        })
        .collect();
    let mut entries = DMatrix::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (k, v) in row.into_iter().enumerate() {
            entries[(i, i + k)] = v;
            entries[(i + k, i)] = v;
        }
    }
    let mut scale = 1.0;
    if desc.normalize == Normalization::Trace {
        let tr = entries.trace();
        if tr > 0.0 {
            scale = n as f64 / tr;
            entries *= scale;
        }
    }
    Ok(GramMatrix { entries, descriptor: Some(desc.clone()), scale })
}

fn entry(
    desc: &KernelDescriptor,
    a: &[f64],
    b: &[f64],
    diag_a: f64,
    diag_b: f64,
    tasks: Option<(usize, usize)>,
) -> f64 {
    if let (Some(t), Some((ta, tb))) = (desc.task, tasks) {
        if ta != t || tb != t {
            return 0.0;
        }
    }
    let k = desc.raw(a, b);
    if desc.normalize == Normalization::Diagonal {
        let denom = (diag_a * diag_b).sqrt();
        if denom > 0.0 {
            k / denom
        } else {
            0.0
        }
    } else {
        k
    }
}

/// Kernel rows between new points and the training set (`n_new x n_train`),
/// computed exactly as `build_gram` computes training entries.
pub fn cross_gram(
    desc: &KernelDescriptor,
    scale: f64,
    train: &DataMatrix,
    new: &DataMatrix,
) -> Result<DMatrix<f64>> {
    desc.validate(train)?;
    desc.validate(new)?;
    if train.ncols() != new.ncols() {
        return Err(MklError::Dimension(format!(
            "new data has {} features, training data {}",
            new.ncols(),
            train.ncols()
        )));
    }
    let diag = |d: &DataMatrix| -> Vec<f64> {
        match desc.normalize {
            Normalization::Diagonal => (0..d.nrows()).map(|i| desc.raw(d.row(i), d.row(i))).collect(),
            _ => vec![1.0; d.nrows()],
        }
    };
    let (dn, dt) = (diag(new), diag(train));
    let rows: Vec<Vec<f64>> = (0..new.nrows())
        .into_par_iter()
        .map(|i| {
            (0..train.nrows())
                .map(|j| {
                    let tasks = match (new.tasks(), train.tasks()) {
                        (Some(a), Some(b)) => Some((a[i], b[j])),
                        _ => None,
                    };
                    let v = entry(desc, new.row(i), train.row(j), dn[i], dt[j], tasks);
                    if desc.normalize == Normalization::Trace {
                        v * scale
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    Ok(DMatrix::from_fn(new.nrows(), train.nrows(), |i, j| rows[i][j]))
}

/// M candidate Gram matrices of identical size.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    grams: Vec<GramMatrix>,
}

impl KernelBank {
    pub fn new(grams: Vec<GramMatrix>) -> Result<Self> {
        let first = grams
            .first()
            .ok_or_else(|| MklError::InvalidParameter("kernel bank needs at least one kernel".into()))?;
        let n = first.n();
        if let Some((m, g)) = grams.iter().enumerate().find(|(_, g)| g.n() != n) {
            return Err(MklError::Dimension(format!(
                "kernel {m} is {}x{}, expected {n}x{n}",
                g.n(),
                g.n()
            )));
        }
        Ok(Self { grams })
    }

    /// Bank of raw matrices without descriptors.
    pub fn from_matrices(mats: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::new(mats.into_iter().map(|k| GramMatrix::from_entries(k, None)).collect::<Result<_>>()?)
    }

    /// Number of kernels M.
    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    /// Number of samples N.
    pub fn n(&self) -> usize {
        self.grams[0].n()
    }

    pub fn get(&self, m: usize) -> &GramMatrix {
        &self.grams[m]
    }

    pub fn iter(&self) -> impl Iterator<Item = &GramMatrix> {
        self.grams.iter()
    }

    pub fn matrices(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.grams.iter().map(GramMatrix::entries)
    }

    /// Same bank with every matrix multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            grams: self
                .grams
                .iter()
                .map(|g| GramMatrix { entries: &g.entries * c, descriptor: g.descriptor.clone(), scale: g.scale * c })
                .collect(),
        }
    }

    /// Restrict every matrix to the given rows and columns (training folds).
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> DMatrixBank {
        DMatrixBank(
            self.grams
                .iter()
                .map(|g| DMatrix::from_fn(rows.len(), cols.len(), |i, j| g.entries[(rows[i], cols[j])]))
                .collect(),
        )
    }
}

/// Rectangular slices of a bank, e.g. test-vs-train kernel rows.
#[derive(Debug, Clone)]
pub struct DMatrixBank(pub Vec<DMatrix<f64>>);

/// Linear kernels on (possibly overlapping) feature groups.
pub fn build_overlap_linear_kernels(data: &DataMatrix, groups: &[Vec<usize>]) -> Result<KernelBank> {
    if groups.is_empty() {
        return Err(MklError::InvalidParameter("no feature groups given".into()));
    }
    let grams = groups
        .iter()
        .enumerate()
        .map(|(m, g)| {
            if g.is_empty() {
                return Err(MklError::InvalidParameter(format!("feature group {m} is empty")));
            }
            build_gram(data, &KernelDescriptor::linear().with_features(g.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    KernelBank::new(grams)
}

/// Bank of `n_tasks + 1` kernels: one task-masked copy of the base kernel per
/// task, followed by the unmasked base kernel shared by all tasks.
pub fn build_multitask_bank(base: &KernelDescriptor, data: &DataMatrix, n_tasks: usize) -> Result<KernelBank> {
    if n_tasks == 0 {
        return Err(MklError::InvalidParameter("need at least one task".into()));
    }
    if base.task.is_some() {
        return Err(MklError::InvalidParameter("base kernel must not be task-masked".into()));
    }
    let tasks = data
        .tasks()
        .ok_or_else(|| MklError::InvalidData("multi-task bank needs task labels".into()))?;
    if let Some(&t) = tasks.iter().find(|&&t| t >= n_tasks) {
        return Err(MklError::InvalidData(format!("task label {} out of range 1..={n_tasks}", t + 1)));
    }
    let shared = build_gram(data, base)?;
    let mut grams = Vec::with_capacity(n_tasks + 1);
    for t in 0..n_tasks {
        let mut entries = shared.entries.clone();
        for i in 0..data.nrows() {
            for j in 0..data.nrows() {
                if tasks[i] != t || tasks[j] != t {
                    entries[(i, j)] = 0.0;
                }
            }
        }
        grams.push(GramMatrix { entries, descriptor: Some(base.clone().with_task(t)), scale: shared.scale });
    }
    grams.push(shared);
    KernelBank::new(grams)
}

/// `sigma2 * I + sum_m d_m K_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedKernel {
    pub entries: DMatrix<f64>,
    pub weights: KernelWeights,
    pub sigma2: f64,
}

pub fn combine(bank: &KernelBank, d: &KernelWeights, sigma2: f64) -> Result<CombinedKernel> {
    if d.len() != bank.len() {
        return Err(MklError::Dimension(format!("{} weights for {} kernels", d.len(), bank.len())));
    }
    if let Some(w) = d.iter().find(|&&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(MklError::InvalidParameter(format!("kernel weight must be finite and nonnegative, got {w}")));
    }
    if !(sigma2 >= 0.0) {
        return Err(MklError::InvalidParameter(format!("noise variance must be nonnegative, got {sigma2}")));
    }
    let n = bank.n();
    let mut entries = DMatrix::from_diagonal_element(n, n, sigma2);
    for (w, k) in d.iter().zip(bank.matrices()) {
        if *w != 0.0 {
            entries += k * *w;
        }
    }
    Ok(CombinedKernel { entries, weights: d.clone(), sigma2 })
}
