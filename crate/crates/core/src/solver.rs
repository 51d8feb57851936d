//! Alternating minimization for kernel-weight regularized MKL.
//!
//! The f-step learns with a fixed combination `sum_m d_m K_m`, the d-step
//! takes the closed-form minimizing weights for the current block norms.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MklError, Result};
use crate::gram::{cross_gram, DataMatrix, KernelBank, KernelDescriptor};
use crate::regfam::{self, BlockNorms, Family, KernelWeights, RegularizerSpec, Side, PRUNE_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    /// `(y - z)^2 / (2 sigma2)`
    Squared { sigma2: f64 },
    /// `log(1 + exp(-y z))`, labels in {-1, +1}
    Logistic,
}

impl LossSpec {
    pub fn squared(sigma2: f64) -> Result<Self> {
        let l = LossSpec::Squared { sigma2 };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossSpec::Squared { sigma2 } if !(sigma2 > 0.0) || !sigma2.is_finite() => {
                Err(MklError::InvalidParameter(format!("sigma2 must be positive, got {sigma2}")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, LossSpec::Logistic)
    }

    pub fn value(&self, y: f64, z: f64) -> f64 {
        match *self {
            LossSpec::Squared { sigma2 } => (y - z) * (y - z) / (2.0 * sigma2),
            LossSpec::Logistic => softplus(-y * z),
        }
    }

    pub fn total(&self, y: &DVector<f64>, z: &DVector<f64>) -> f64 {
        y.iter().zip(z.iter()).map(|(&a, &b)| self.value(a, b)).sum()
    }

    fn check_labels(&self, y: &DVector<f64>) -> Result<()> {
        if let Some(v) = y.iter().find(|v| !v.is_finite()) {
            return Err(MklError::InvalidData(format!("non-finite label {v}")));
        }
        if self.is_classification() {
            if let Some(v) = y.iter().find(|&&v| v != 1.0 && v != -1.0) {
                return Err(MklError::InvalidData(format!("logistic loss needs labels -1/+1, got {v}")));
            }
        }
        Ok(())
    }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub max_outer: usize,
    /// Stop when `max |d_new - d| <= weight_tol`.
    pub weight_tol: f64,
    pub fit_bias: bool,
    pub newton_tol: f64,
    pub max_newton: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_outer: 200, weight_tol: 1e-6, fit_bias: true, newton_tol: 1e-8, max_newton: 100 }
    }
}

/// Output of one fixed-weight learning step.
#[derive(Debug, Clone)]
pub struct FStep {
    pub alpha: DVector<f64>,
    pub bias: f64,
    /// `x_m = d_m^2 alpha' K_m alpha`
    pub norms: BlockNorms,
    /// `sum_m d_m K_m alpha + b` on the training points.
    pub fitted: DVector<f64>,
    pub inner_iterations: usize,
}

fn combined(bank: &KernelBank, d: &KernelWeights, active: &[usize]) -> DMatrix<f64> {
    let n = bank.n();
    let mut k = DMatrix::zeros(n, n);
    for &m in active {
        k += bank.get(m).entries() * d[m];
    }
    k
}

/// Learn with the fixed combination `sum_m d_m K_m`.
pub fn f_step(
    bank: &KernelBank,
    d: &KernelWeights,
    loss: &LossSpec,
    c: f64,
    y: &DVector<f64>,
    opts: &FitOptions,
    warm: Option<(&DVector<f64>, f64)>,
) -> Result<FStep> {
    check_inputs(bank, d, loss, c, y)?;
    let active = d.active();
    let kbar = combined(bank, d, &active);
    let (alpha, bias, inner_iterations) = match *loss {
        LossSpec::Squared { sigma2 } => {
            let (a, b) = squared_step(&kbar, c * sigma2, y, opts.fit_bias)?;
            (a, b, 1)
        }
        LossSpec::Logistic => logistic_step(&kbar, c, y, opts, warm)?,
    };
    let (norms, fitted) = expand(bank, d, &active, &alpha, bias);
    Ok(FStep { alpha, bias, norms, fitted, inner_iterations })
}

fn check_inputs(bank: &KernelBank, d: &KernelWeights, loss: &LossSpec, c: f64, y: &DVector<f64>) -> Result<()> {
    if d.len() != bank.len() {
        return Err(MklError::Dimension(format!("{} weights for {} kernels", d.len(), bank.len())));
    }
    if y.len() != bank.n() {
        return Err(MklError::Dimension(format!("{} labels for kernels of size {}", y.len(), bank.n())));
    }
    if !(c > 0.0) || !c.is_finite() {
        return Err(MklError::InvalidParameter(format!("C must be positive, got {c}")));
    }
    loss.validate()?;
    loss.check_labels(y)
}

/// Per-kernel norms and fitted values, computed kernel by kernel so that
/// prediction from kernel rows reproduces them exactly.
pub(crate) fn expand(bank: &KernelBank, d: &KernelWeights, active: &[usize], alpha: &DVector<f64>, bias: f64) -> (BlockNorms, DVector<f64>) {
    let n = bank.n();
    let mut x = vec![0.0; bank.len()];
    let mut fitted = DVector::zeros(n);
    for &m in active {
        let ka = bank.get(m).entries() * alpha;
        x[m] = d[m] * d[m] * alpha.dot(&ka).max(0.0);
        fitted += ka * d[m];
    }
    fitted.add_scalar_mut(bias);
    (BlockNorms::from_vec_unchecked(x), fitted)
}

/// `(K + ridge I) alpha = y - b 1`, with `b` chosen so that `1' alpha = 0`.
fn squared_step(kbar: &DMatrix<f64>, ridge: f64, y: &DVector<f64>, fit_bias: bool) -> Result<(DVector<f64>, f64)> {
    let n = y.len();
    let mut a = kbar.clone();
    for i in 0..n {
        a[(i, i)] += ridge;
    }
    let ch = a.cholesky().ok_or_else(|| MklError::Singular("combined kernel plus ridge is not positive definite".into()))?;
    let u = ch.solve(y);
    if !fit_bias {
        return Ok((u, 0.0));
    }
    let v = ch.solve(&DVector::from_element(n, 1.0));
    let b = u.sum() / v.sum();
    Ok((u - v * b, b))
}

/// Newton's method on the stationarity system
/// `g + C alpha = 0`, `1'g = 0` with `g_i = dl/dz_i` and `z = K alpha + b`.
fn logistic_step(
    kbar: &DMatrix<f64>,
    c: f64,
    y: &DVector<f64>,
    opts: &FitOptions,
    warm: Option<(&DVector<f64>, f64)>,
) -> Result<(DVector<f64>, f64, usize)> {
    let n = y.len();
    let dim = if opts.fit_bias { n + 1 } else { n };
    let (mut alpha, mut bias) = match warm {
        Some((a, b)) if a.len() == n => (a.clone(), if opts.fit_bias { b } else { 0.0 }),
        _ => (DVector::zeros(n), 0.0),
    };
    let jitter = 1e-10 * kbar.trace().max(1.0);
    let phi = |alpha: &DVector<f64>, bias: f64| -> (f64, DVector<f64>) {
        let ka = kbar * alpha;
        let z = ka.add_scalar(bias);
        let v = LossSpec::Logistic.total(y, &z) + 0.5 * c * alpha.dot(&ka);
        (v, z)
    };
    let (mut value, mut z) = phi(&alpha, bias);
    for it in 0..=opts.max_newton {
        let g = DVector::from_fn(n, |i, _| -y[i] * sigmoid(-y[i] * z[i]));
        let w = DVector::from_fn(n, |i, _| sigmoid(z[i]) * sigmoid(-z[i]));
        let mut f = DVector::zeros(dim);
        for i in 0..n {
            f[i] = g[i] + c * alpha[i];
        }
        if opts.fit_bias {
            f[n] = g.sum();
        }
        let residual = f.amax();
        if residual <= opts.newton_tol {
            return Ok((alpha, bias, it));
        }
        if it == opts.max_newton {
            return Err(MklError::NoConvergence { iterations: it, residual });
        }
        let mut jac = DMatrix::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                jac[(i, j)] = w[i] * kbar[(i, j)];
            }
            jac[(i, i)] += c + jitter;
            if opts.fit_bias {
                jac[(i, n)] = w[i];
            }
        }
        if opts.fit_bias {
            for j in 0..n {
                jac[(n, j)] = (0..n).map(|i| w[i] * kbar[(i, j)]).sum();
            }
            jac[(n, n)] = w.sum() + jitter;
        }
        let step = jac.lu().solve(&(-&f)).ok_or_else(|| MklError::Singular("logistic Newton system".into()))?;
        let da = step.rows(0, n).into_owned();
        let db = if opts.fit_bias { step[n] } else { 0.0 };
        // directional derivative of the objective: grad = [K f_alpha; f_b]
        let slope = (kbar * &f.rows(0, n)).dot(&da) + if opts.fit_bias { f[n] * db } else { 0.0 };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=30 {
            let na = &alpha + &da * t;
            let nb = bias + db * t;
            let (nv, nz) = phi(&na, nb);
            if nv <= value + 1e-4 * t * slope.min(0.0) {
                alpha = na;
                bias = nb;
                value = nv;
                z = nz;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(MklError::NoConvergence { iterations: it + 1, residual });
        }
    }
    unreachable!()
}

/// One outer iteration of `fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Kernel-weight objective at the current (f, d).
    pub objective: f64,
    pub max_weight_change: f64,
    pub inner_iterations: usize,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub records: Vec<TraceRecord>,
    pub converged: bool,
    /// Kernels whose weight was clamped at the block q-norm cap.
    pub clamped: Vec<usize>,
}

/// How the weights of a model were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ModelKind {
    Regularized { regularizer: RegularizerSpec },
    EmpiricalBayes { sigma2: f64 },
}

/// Descriptor and post-normalization scale of one kernel, if known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelInfo {
    pub descriptor: Option<KernelDescriptor>,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MklModel {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub weights: KernelWeights,
    pub kind: ModelKind,
    pub loss: LossSpec,
    pub kernels: Vec<KernelInfo>,
    /// Training-set scores as produced by the final f-step.
    pub fitted: Vec<f64>,
    /// Training inputs, needed to evaluate kernels at new points.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<DataMatrix>,
    /// SHA-256 of the training inputs, checked before kernels are evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

impl MklModel {
    pub(crate) fn from_step(bank: &KernelBank, d: KernelWeights, step: &FStep, kind: ModelKind, loss: LossSpec) -> Self {
        Self {
            alpha: step.alpha.iter().copied().collect(),
            bias: step.bias,
            weights: d,
            kind,
            loss,
            kernels: bank.iter().map(|g| KernelInfo { descriptor: g.descriptor().cloned(), scale: g.scale() }).collect(),
            fitted: step.fitted.iter().copied().collect(),
            training: None,
            fingerprint: None,
        }
    }

    pub fn with_training(mut self, data: DataMatrix) -> Result<Self> {
        if data.nrows() != self.alpha.len() {
            return Err(MklError::Dimension(format!(
                "training data has {} rows, model {}",
                data.nrows(),
                self.alpha.len()
            )));
        }
        self.fingerprint = Some(crate::io::fingerprint(&data));
        self.training = Some(data);
        Ok(self)
    }

    pub fn alpha(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.alpha)
    }

    pub fn regularizer(&self) -> Option<&RegularizerSpec> {
        match &self.kind {
            ModelKind::Regularized { regularizer } => Some(regularizer),
            ModelKind::EmpiricalBayes { .. } => None,
        }
    }

    /// `f_m = d_m K_m alpha` on the training points.
    pub fn components(&self, bank: &KernelBank) -> Result<Vec<DVector<f64>>> {
        self.check_bank(bank)?;
        let alpha = self.alpha();
        Ok(bank.matrices().zip(self.weights.iter()).map(|(k, &w)| if w > 0.0 { k * &alpha * w } else { DVector::zeros(alpha.len()) }).collect())
    }

    /// `x_m = d_m^2 alpha' K_m alpha`
    pub fn block_norms(&self, bank: &KernelBank) -> Result<BlockNorms> {
        self.check_bank(bank)?;
        Ok(expand(bank, &self.weights, &self.weights.active(), &self.alpha(), self.bias).0)
    }

    fn check_bank(&self, bank: &KernelBank) -> Result<()> {
        if bank.len() != self.weights.len() || bank.n() != self.alpha.len() {
            return Err(MklError::Dimension(format!(
                "model has {} kernels on {} points, bank {} on {}",
                self.weights.len(),
                self.alpha.len(),
                bank.len(),
                bank.n()
            )));
        }
        Ok(())
    }

    /// Scores from kernel rows `rows[m]` (`n_new x n_train`) of every kernel.
    pub fn predict_rows(&self, rows: &[DMatrix<f64>]) -> Result<DVector<f64>> {
        if rows.len() != self.weights.len() {
            return Err(MklError::Dimension(format!("{} kernel row blocks for {} kernels", rows.len(), self.weights.len())));
        }
        let n_new = rows.first().map_or(0, |r| r.nrows());
        let alpha = self.alpha();
        let mut out = DVector::zeros(n_new);
        for m in self.weights.active() {
            let r = &rows[m];
            if r.nrows() != n_new || r.ncols() != alpha.len() {
                return Err(MklError::Dimension(format!(
                    "kernel {m} rows are {}x{}, expected {n_new}x{}",
                    r.nrows(),
                    r.ncols(),
                    alpha.len()
                )));
            }
            out += r * &alpha * self.weights[m];
        }
        out.add_scalar_mut(self.bias);
        Ok(out)
    }

    /// Scores at new inputs, evaluating every active kernel against the
    /// stored training data.
    pub fn predict(&self, new: &DataMatrix) -> Result<DVector<f64>> {
        self.predict_with(new, &[])
    }

    /// Like `predict`, with cross-Gram rows supplied for the kernels that
    /// have no descriptor (in bank order, one block per such kernel).
    pub fn predict_with(&self, new: &DataMatrix, precomputed: &[DMatrix<f64>]) -> Result<DVector<f64>> {
        let missing = self.kernels.iter().filter(|k| k.descriptor.is_none()).count();
        if precomputed.len() != missing {
            return Err(MklError::InvalidParameter(format!(
                "{missing} precomputed kernel(s) need cross-Gram rows, {} given",
                precomputed.len()
            )));
        }
        let n_new = new.nrows();
        let n_train = self.alpha.len();
        let active = self.weights.active();
        let needs_data = active.iter().any(|&m| self.kernels[m].descriptor.is_some());
        let train = match (&self.training, needs_data) {
            (Some(t), true) => {
                if let Some(fp) = &self.fingerprint {
                    if *fp != crate::io::fingerprint(t) {
                        return Err(MklError::InvalidData("stored training data does not match the model fingerprint".into()));
                    }
                }
                Some(t)
            }
            (None, true) => {
                return Err(MklError::InvalidParameter("model carries no training data; supply kernel rows".into()))
            }
            _ => None,
        };
        let mut supplied = precomputed.iter();
        let mut rows = Vec::with_capacity(self.kernels.len());
        for (m, info) in self.kernels.iter().enumerate() {
            let block = match &info.descriptor {
                None => supplied.next().expect("counted above").clone(),
                Some(desc) if active.contains(&m) => cross_gram(desc, info.scale, train.expect("checked above"), new)?,
                Some(_) => DMatrix::zeros(n_new, n_train),
            };
            rows.push(block);
        }
        self.predict_rows(&rows)
    }
}

/// Starting weights: uniform `1/M`, the fixed weights of families that
/// have them, and a feasible point for Ivanov balls with `p < 1`.
fn initial_weights(family: Family, m: usize) -> KernelWeights {
    match family {
        f if f.fixed_weights() => KernelWeights::uniform(m, 1.0),
        Family::LpNormIvanov { p } if p < 1.0 => KernelWeights::uniform(m, (m as f64).powf(-1.0 / p)),
        _ => KernelWeights::uniform(m, 1.0 / m as f64),
    }
}

/// Alternate f-steps and closed-form weight updates until the weights settle.
pub fn fit(
    bank: &KernelBank,
    y: &DVector<f64>,
    spec: &RegularizerSpec,
    loss: &LossSpec,
    opts: &FitOptions,
) -> Result<(MklModel, FitTrace)> {
    let spec = match spec.side {
        Side::KernelWeight => *spec,
        Side::BlockNorm => regfam::conjugate_pair(spec),
    };
    spec.family.validate()?;
    let family = spec.family;
    let c = spec.c;
    let m = bank.len();
    let mut d = initial_weights(family, m);
    let mut step = f_step(bank, &d, loss, c, y, opts, None)?;
    let mut trace = FitTrace::default();
    let mut previous = f64::INFINITY;
    for it in 1..=opts.max_outer {
        let objective = loss.total(y, &step.fitted) + 0.5 * c * regfam::weighted_objective(family, &step.norms, &d);
        if family.has_convex_h() && objective > previous + 1e-9 * previous.abs().max(1.0) {
            return Err(MklError::Oscillation { iteration: it, increase: objective - previous });
        }
        previous = objective;
        let next = if family.fixed_weights() {
            d.clone()
        } else {
            let ws = regfam::optimal_weights(&spec, &step.norms)?;
            for k in ws.clamped {
                if !trace.clamped.contains(&k) {
                    trace.clamped.push(k);
                }
            }
            let mut w = ws.weights.into_vec();
            // pruned kernels stay off
            for (wm, &dm) in w.iter_mut().zip(d.iter()) {
                if dm == 0.0 || *wm < PRUNE_THRESHOLD {
                    *wm = 0.0;
                }
            }
            KernelWeights::from_vec_unchecked(w)
        };
        let change = next.max_abs_diff(&d);
        trace.records.push(TraceRecord {
            iteration: it,
            objective,
            max_weight_change: change,
            inner_iterations: step.inner_iterations,
            weights: d.to_vec(),
        });
        if change <= opts.weight_tol {
            trace.converged = true;
            break;
        }
        d = next;
        step = f_step(bank, &d, loss, c, y, opts, Some((&step.alpha, step.bias)))?;
    }
    let model = MklModel::from_step(bank, d, &step, ModelKind::Regularized { regularizer: spec }, *loss);
    Ok((model, trace))
}

/// `sum_i l(y_i, score_i) + C g(x)` for a regularized model.
pub fn block_norm_objective(model: &MklModel, bank: &KernelBank, y: &DVector<f64>) -> Result<f64> {
    let spec = model
        .regularizer()
        .ok_or_else(|| MklError::InvalidParameter("block-norm objective needs a regularized model".into()))?;
    if y.len() != model.fitted.len() {
        return Err(MklError::Dimension(format!("{} labels for {} training points", y.len(), model.fitted.len())));
    }
    let x = model.block_norms(bank)?;
    let g = regfam::g_value(&regfam::RegularizerSpec { side: Side::BlockNorm, ..*spec }, &x)?;
    let fitted = DVector::from_column_slice(&model.fitted);
    Ok(model.loss.total(y, &fitted) + spec.c * g)
}
