//! Numerical oracles for the kernel-weight / block-norm correspondence.
//!
//! Everything here is computed by brute force (grid scans with local zoom)
//! or by a generic convex solver, never from the closed forms in `regfam`,
//! so the two can be checked against each other.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MklError, Result};
use crate::gram::KernelBank;
use crate::regfam::{self, BlockNorms, Family, KernelWeights};

/// Log-spaced scan followed by linear zoom rounds around the best point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    /// Points per coordinate for separable (1-D) scans.
    pub points: usize,
    /// Points per coordinate for joint scans (nested, one level per coordinate).
    pub joint_points: usize,
    pub refine_rounds: usize,
    pub refine_points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { lo: 1e-6, hi: 1e6, points: 4001, joint_points: 201, refine_rounds: 4, refine_points: 101 }
    }
}

impl GridSpec {
    fn axis(&self, n: usize) -> Vec<f64> {
        let (a, b) = (self.lo.log10(), self.hi.log10());
        (0..n).map(|k| 10f64.powf(a + (b - a) * k as f64 / (n - 1) as f64)).collect()
    }
}

/// Whether the conjugate is an infimum (concave `h~`) or a stationary
/// maximum (block q-norm, where `h~` is convex).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extremum {
    Min,
    Max,
}

impl Extremum {
    fn better(self, a: f64, b: f64) -> bool {
        match self {
            Extremum::Min => a < b,
            Extremum::Max => a > b,
        }
    }

    pub fn for_family(family: Family) -> Self {
        if matches!(family, Family::BlockQNorm { .. }) {
            Extremum::Max
        } else {
            Extremum::Min
        }
    }
}

/// A regularizer supplied as a callable, either per coordinate or jointly.
pub enum Regularizer<'a> {
    Separable(&'a (dyn Fn(f64) -> f64 + Sync)),
    Joint(&'a (dyn Fn(&[f64]) -> f64 + Sync)),
}

struct ScanResult {
    value: f64,
    arg: f64,
    /// Best point sits on the upper end of the initial grid.
    at_upper_edge: bool,
}

/// Brute-force extremum of `f` over `axis`, zooming into the bracket around
/// the incumbent. Non-finite values (outside the domain) are skipped.
fn scan(f: &dyn Fn(f64) -> f64, axis: Vec<f64>, ext: Extremum, grid: &GridSpec) -> Option<ScanResult> {
    let upper = *axis.last()?;
    let mut axis = axis;
    let mut best: Option<(f64, f64)> = None;
    for round in 0..=grid.refine_rounds {
        let mut round_best: Option<(f64, usize)> = None;
        for (i, &t) in axis.iter().enumerate() {
            let v = f(t);
            if v.is_finite() && round_best.map_or(true, |(b, _)| ext.better(v, b)) {
                round_best = Some((v, i));
            }
        }
        let (v, i) = round_best?;
        if best.map_or(true, |(b, _)| !ext.better(b, v)) {
            best = Some((v, axis[i]));
        }
        if round == grid.refine_rounds {
            break;
        }
        let lo = axis[i.saturating_sub(1)];
        let hi = axis[(i + 1).min(axis.len() - 1)];
        if hi <= lo {
            break;
        }
        let n = grid.refine_points.max(2);
        let mut next: Vec<f64> = (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect();
        // keep the incumbent exactly on the grid
        next.push(axis[i]);
        next.sort_by(|a, b| a.partial_cmp(b).unwrap());
        next.dedup();
        axis = next;
    }
    let (value, arg) = best?;
    Some(ScanResult { value, arg, at_upper_edge: arg >= upper })
}

/// Joint extremum as nested 1-D scans, one coordinate per level. Partial
/// minimization keeps convexity, so each level is a 1-D convex scan.
fn scan_joint(f: &dyn Fn(&[f64]) -> f64, axis: &[f64], dim: usize, ext: Extremum, grid: &GridSpec) -> Option<ScanResult> {
    let mut prefix = Vec::with_capacity(dim);
    scan_nested(f, axis, dim, &mut prefix, ext, grid)
}

fn scan_nested(
    f: &dyn Fn(&[f64]) -> f64,
    axis: &[f64],
    dim: usize,
    prefix: &mut Vec<f64>,
    ext: Extremum,
    grid: &GridSpec,
) -> Option<ScanResult> {
    if prefix.len() + 1 == dim {
        let point = std::cell::RefCell::new(prefix.clone());
        point.borrow_mut().push(0.0);
        let leaf = |t: f64| {
            let mut p = point.borrow_mut();
            p[dim - 1] = t;
            f(&p)
        };
        return scan(&leaf, axis.to_vec(), ext, grid);
    }
    let shared = std::cell::RefCell::new(prefix.clone());
    let inner = |t: f64| {
        let mut p = shared.borrow().clone();
        p.push(t);
        scan_nested(f, axis, dim, &mut p, ext, grid).map_or(f64::NAN, |r| r.value)
    };
    let outer = scan(&inner, axis.to_vec(), ext, grid)?;
    prefix.push(outer.arg);
    let at_best = scan_nested(f, axis, dim, prefix, ext, grid);
    prefix.pop();
    let at_best = at_best?;
    Some(ScanResult { value: outer.value, arg: outer.arg, at_upper_edge: outer.at_upper_edge || at_best.at_upper_edge })
}

/// `g(x) = 1/2 ext_y (x'y + h(1/y))` by grid search over `y > 0`.
pub fn numeric_conjugate_g(h: &Regularizer<'_>, x: &BlockNorms, grid: &GridSpec, ext: Extremum) -> Result<f64> {
    let none = || MklError::Unbounded("h is +inf on the whole grid".into());
    match h {
        Regularizer::Separable(h) => {
            let mut total = 0.0;
            for &xm in x.iter() {
                let f = |y: f64| xm * y + h(1.0 / y);
                let mut best = scan(&f, grid.axis(grid.points), ext, grid).ok_or_else(none)?.value;
                // y -> inf, i.e. d = 0, is admissible when the norm vanishes
                if xm == 0.0 && ext == Extremum::Min {
                    let at_zero = h(0.0);
                    if at_zero.is_finite() && at_zero < best {
                        best = at_zero;
                    }
                }
                total += 0.5 * best;
            }
            Ok(total)
        }
        Regularizer::Joint(h) => {
            let m = x.len();
            let f = |y: &[f64]| {
                let inv: Vec<f64> = y.iter().map(|v| 1.0 / v).collect();
                x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() + h(&inv)
            };
            let mut best = scan_joint(&f, &grid.axis(grid.joint_points), m, ext, grid).ok_or_else(none)?.value;
            if ext == Extremum::Min && x.iter().all(|&v| v == 0.0) {
                let at_zero = h(&vec![0.0; m]);
                if at_zero.is_finite() && at_zero < best {
                    best = at_zero;
                }
            }
            Ok(0.5 * best)
        }
    }
}

/// `h(d) = -2 g*(1/(2d))` with `g*(y) = ext_x (x'y - g(x))` over `x >= 0`.
pub fn numeric_conjugate_h(g: &Regularizer<'_>, d: &KernelWeights, grid: &GridSpec, ext: Extremum) -> Result<f64> {
    if let Some(v) = d.iter().find(|v| **v <= 0.0) {
        return Err(MklError::InvalidParameter(format!("kernel weights must be positive, got {v}")));
    }
    let axis = |n: usize| {
        let mut a = vec![0.0];
        a.extend(grid.axis(n));
        a
    };
    let unbounded = || MklError::Unbounded("inner minimum reached the upper grid edge".into());
    match g {
        Regularizer::Separable(g) => {
            let mut total = 0.0;
            for &dm in d.iter() {
                let f = |x: f64| x / (2.0 * dm) - g(x);
                let r = scan(&f, axis(grid.points), ext, grid).ok_or_else(unbounded)?;
                if r.at_upper_edge {
                    return Err(unbounded());
                }
                total += -2.0 * r.value;
            }
            Ok(total)
        }
        Regularizer::Joint(g) => {
            let f = |x: &[f64]| x.iter().zip(d.iter()).map(|(xm, dm)| xm / (2.0 * dm)).sum::<f64>() - g(x);
            let r = scan_joint(&f, &axis(grid.joint_points), d.len(), ext, grid).ok_or_else(unbounded)?;
            if r.at_upper_edge {
                return Err(unbounded());
            }
            Ok(-2.0 * r.value)
        }
    }
}

/// Numeric `g` for a built-in family, from its analytic `h` only.
pub fn family_numeric_g(family: Family, x: &BlockNorms, grid: &GridSpec) -> Result<f64> {
    let ext = Extremum::for_family(family);
    if family.is_separable() {
        let h = move |d: f64| family.h_scalar(d);
        numeric_conjugate_g(&Regularizer::Separable(&h), x, grid, ext)
    } else {
        let h = move |d: &[f64]| regfam::h_of(family, d);
        numeric_conjugate_g(&Regularizer::Joint(&h), x, grid, ext)
    }
}

/// Numeric `h` for a built-in family, from its analytic `g` only.
pub fn family_numeric_h(family: Family, d: &KernelWeights, grid: &GridSpec) -> Result<f64> {
    let ext = Extremum::for_family(family);
    if family.is_separable() {
        let g = move |x: f64| family.g_scalar(x);
        numeric_conjugate_h(&Regularizer::Separable(&g), d, grid, ext)
    } else {
        let g = move |x: &[f64]| regfam::g_of(family, x).unwrap_or(f64::NAN);
        numeric_conjugate_h(&Regularizer::Joint(&g), d, grid, ext)
    }
}

/// Dual of the wedge d-problem and the weights recovered from it.
#[derive(Debug, Clone, PartialEq)]
pub struct WedgeSolution {
    /// `g(x) = sup_eta sum_m sqrt((1 + eta_{m-1} - eta_m) x_m)`.
    pub value: f64,
    /// Multipliers `eta_1 .. eta_{M-1}`.
    pub eta: Vec<f64>,
    /// Minimizer of `sum x_m/d_m + d_m` over the monotone cone.
    pub weights: Vec<f64>,
    /// Relative gap between `sum x/d + d` and `2 g`; zero at the optimum.
    pub kkt_residual: f64,
    pub iterations: usize,
}

const WEDGE_LINK_TOL: f64 = 1e-7;
const WEDGE_TOL: f64 = 1e-6;

/// Solve the wedge dual by a log-barrier Newton ascent over `eta >= 0`
/// (with `1 + eta_{m-1} - eta_m >= 0` kept strictly feasible).
pub fn wedge_g_numeric(x: &BlockNorms) -> Result<WedgeSolution> {
    let m = x.len();
    if m <= 1 {
        let value = x.first().map_or(0.0, |v| v.sqrt());
        return Ok(WedgeSolution { value, eta: vec![], weights: vec![value], kkt_residual: 0.0, iterations: 0 }
            .truncate_to(m));
    }
    let n = m - 1;
    let sx: Vec<f64> = x.iter().map(|v| v.sqrt()).collect();
    let scale = 1.0 + sx.iter().copied().fold(0.0, f64::max);
    let slack = |eta: &[f64], k: usize| -> f64 {
        let prev = if k > 0 { eta[k - 1] } else { 0.0 };
        let next = if k < n { eta[k] } else { 0.0 };
        1.0 + prev - next
    };
    let phi = |eta: &[f64], mu: f64| -> f64 {
        if eta.iter().any(|&e| e <= 0.0) {
            return f64::NEG_INFINITY;
        }
        let mut v = mu * eta.iter().map(|e| e.ln()).sum::<f64>();
        for k in 0..m {
            let s = slack(eta, k);
            if s <= 0.0 {
                return f64::NEG_INFINITY;
            }
            v += sx[k] * s.sqrt();
            if x[k] == 0.0 {
                v += mu * s.ln();
            }
        }
        v
    };

    let mut eta = vec![0.5; n];
    let mut mu = 0.1 * scale;
    let mu_final = 1e-13 * scale;
    let mut iterations = 0;
    loop {
        for _ in 0..100 {
            iterations += 1;
            let s: Vec<f64> = (0..m).map(|k| slack(&eta, k)).collect();
            let d1: Vec<f64> = (0..m)
                .map(|k| sx[k] / (2.0 * s[k].sqrt()) + if x[k] == 0.0 { mu / s[k] } else { 0.0 })
                .collect();
            let d2: Vec<f64> = (0..m)
                .map(|k| -sx[k] / (4.0 * s[k].powf(1.5)) - if x[k] == 0.0 { mu / (s[k] * s[k]) } else { 0.0 })
                .collect();
            let grad = DVector::from_fn(n, |i, _| -d1[i] + d1[i + 1] + mu / eta[i]);
            let mut neg_h = DMatrix::zeros(n, n);
            for i in 0..n {
                neg_h[(i, i)] = -(d2[i] + d2[i + 1]) + mu / (eta[i] * eta[i]);
                if i + 1 < n {
                    neg_h[(i, i + 1)] = d2[i + 1];
                    neg_h[(i + 1, i)] = d2[i + 1];
                }
            }
            let step = match neg_h.clone().cholesky() {
                Some(ch) => ch.solve(&grad),
                None => grad.clone(),
            };
            let decrement = grad.dot(&step);
            if decrement <= 1e-16 * scale {
                break;
            }
            // fraction to the boundary of eta > 0 and slack > 0
            let mut t_max: f64 = 1.0;
            for i in 0..n {
                if step[i] < 0.0 {
                    t_max = t_max.min(-0.99 * eta[i] / step[i]);
                }
            }
            for k in 0..m {
                let ds = if k > 0 { step[k - 1] } else { 0.0 } - if k < n { step[k] } else { 0.0 };
                if ds < 0.0 {
                    t_max = t_max.min(-0.99 * s[k] / ds);
                }
            }
            let base = phi(&eta, mu);
            let mut t = t_max;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = eta.iter().zip(step.iter()).map(|(e, d)| e + t * d).collect();
                if phi(&trial, mu) >= base + 1e-4 * t * decrement {
                    eta = trial;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if mu <= mu_final {
            break;
        }
        mu = (mu * 0.1).max(mu_final);
    }

    let value: f64 = (0..m).map(|k| sx[k] * slack(&eta, k).max(0.0).sqrt()).sum();
    let weights = wedge_weights_from_dual(x, &eta);
    let primal: f64 = x
        .iter()
        .zip(&weights)
        .map(|(&xm, &dm)| if dm > 0.0 { xm / dm + dm } else if xm == 0.0 { 0.0 } else { f64::INFINITY })
        .sum();
    let kkt_residual = (primal - 2.0 * value).abs() / (2.0 * value).max(1.0);
    if !(kkt_residual <= WEDGE_TOL) {
        return Err(MklError::NoConvergence { iterations, residual: kkt_residual });
    }
    Ok(WedgeSolution { value, eta, weights, kkt_residual, iterations })
}

impl WedgeSolution {
    fn truncate_to(mut self, m: usize) -> Self {
        self.weights.truncate(m);
        self
    }
}

/// Map wedge multipliers to weights: `d_m = sqrt(x_m / s_m)` pooled over
/// runs tied together by a positive multiplier. Zero norms take their
/// run's pooled value (zero if the whole run is zero).
fn wedge_weights_from_dual(x: &[f64], eta: &[f64]) -> Vec<f64> {
    let m = x.len();
    let n = m - 1;
    let mut d = vec![0.0; m];
    let mut start = 0;
    while start < m {
        let mut end = start;
        while end < n && eta[end] > WEDGE_LINK_TOL {
            end += 1;
        }
        let mut sum_x = 0.0;
        let mut sum_s = 0.0;
        for k in start..=end {
            let prev = if k > 0 { eta[k - 1] } else { 0.0 };
            let next = if k < n { eta[k] } else { 0.0 };
            sum_x += x[k];
            sum_s += (1.0 + prev - next).max(0.0);
        }
        let pooled = if sum_x > 0.0 && sum_s > 0.0 { (sum_x / sum_s).sqrt() } else { 0.0 };
        for v in &mut d[start..=end] {
            *v = pooled;
        }
        start = end + 1;
    }
    // absorb round-off so the result lies in the monotone cone
    for k in 1..m {
        if d[k] > d[k - 1] {
            d[k] = d[k - 1];
        }
    }
    d
}

/// Minimizer of `sum x_m/d_m + d_m` over `d_1 >= ... >= d_M >= 0`.
pub fn wedge_weight_step(x: &BlockNorms) -> Result<KernelWeights> {
    let sol = wedge_g_numeric(x)?;
    Ok(KernelWeights::from_vec_unchecked(sol.weights))
}

/// `f_bar' (sum d_m K_m)^+ f_bar` and its optimal split `f_m = d_m K_m (sum d K)^+ f_bar`.
#[derive(Debug, Clone)]
pub struct VariationalNorm {
    pub value: f64,
    pub parts: Vec<DVector<f64>>,
    /// `(sum d_m K_m)^+ f_bar`
    pub alpha: DVector<f64>,
}

/// Singular values below this fraction of the largest count as zero.
pub const PINV_RTOL: f64 = 1e-10;

pub fn variational_norm(bank: &KernelBank, d: &KernelWeights, fbar: &DVector<f64>) -> Result<VariationalNorm> {
    if d.len() != bank.len() || fbar.len() != bank.n() {
        return Err(MklError::Dimension(format!(
            "{} weights / {} values for {} kernels of size {}",
            d.len(),
            fbar.len(),
            bank.len(),
            bank.n()
        )));
    }
    let active = d.active();
    let n = bank.n();
    let mut a = DMatrix::zeros(n, n);
    for &m in &active {
        a += bank.get(m).entries() * d[m];
    }
    let pinv = pseudo_inverse(&a);
    let alpha = &pinv * fbar;
    let residual = (&a * &alpha - fbar).norm();
    if residual > 1e-8 * fbar.norm().max(1.0) {
        return Err(MklError::OutOfRange(residual));
    }
    let parts = (0..bank.len())
        .map(|m| {
            if active.contains(&m) {
                bank.get(m).entries() * &alpha * d[m]
            } else {
                DVector::zeros(n)
            }
        })
        .collect();
    Ok(VariationalNorm { value: fbar.dot(&alpha), parts, alpha })
}

pub(crate) fn pseudo_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let inv = eig.eigenvalues.map(|v| if v.abs() > PINV_RTOL * top && top > 0.0 { 1.0 / v } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Box for `eta = log d` in the Bayes block-norm problem.
pub const ETA_MIN: f64 = -40.0;
pub const ETA_MAX: f64 = 40.0;

#[derive(Debug, Clone)]
pub struct BayesG {
    /// `g(x) = 1/2 inf_eta (sum x_m e^-eta_m + log|sigma2 I + sum e^eta_m K_m|)`.
    pub value: f64,
    pub eta: Vec<f64>,
    /// Some coordinate ended on the `[ETA_MIN, ETA_MAX]` box.
    pub clamped: bool,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Block-norm regularizer of the marginal-likelihood model, by projected
/// Newton on the convex problem in `eta = log d`.
pub fn bayes_g_numeric(bank: &KernelBank, sigma2: f64, x: &BlockNorms) -> Result<BayesG> {
    if !(sigma2 > 0.0) {
        return Err(MklError::InvalidParameter(format!("sigma2 must be positive, got {sigma2}")));
    }
    if x.len() != bank.len() {
        return Err(MklError::Dimension(format!("{} norms for {} kernels", x.len(), bank.len())));
    }
    let m = bank.len();
    let n = bank.n();
    let objective = |eta: &[f64]| -> Option<f64> {
        let mut kbar = DMatrix::from_diagonal_element(n, n, sigma2);
        for (k, e) in bank.matrices().zip(eta) {
            kbar += k * e.exp();
        }
        let ch = kbar.cholesky()?;
        let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Some(x.iter().zip(eta).map(|(xm, e)| xm * (-e).exp()).sum::<f64>() + logdet)
    };
    let derivatives = |eta: &[f64]| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mut kbar = DMatrix::from_diagonal_element(n, n, sigma2);
        for (k, e) in bank.matrices().zip(eta) {
            kbar += k * e.exp();
        }
        let ch = kbar.cholesky().ok_or_else(|| MklError::NotPositiveDefinite("combined kernel".into()))?;
        let z: Vec<DMatrix<f64>> = bank.matrices().map(|k| ch.solve(k)).collect();
        let mut grad = DVector::zeros(m);
        let mut hess = DMatrix::zeros(m, m);
        for i in 0..m {
            let (ei, emi) = (eta[i].exp(), (-eta[i]).exp());
            let ti = z[i].trace();
            grad[i] = -x[i] * emi + ei * ti;
            hess[(i, i)] = x[i] * emi + ei * ti;
            for j in 0..m {
                let cross = z[i].component_mul(&z[j].transpose()).sum();
                hess[(i, j)] -= ei * eta[j].exp() * cross;
            }
        }
        Ok((grad, hess))
    };
    let bound = |eta: &[f64], g: &DVector<f64>, i: usize| {
        (eta[i] <= ETA_MIN && g[i] > 0.0) || (eta[i] >= ETA_MAX && g[i] < 0.0)
    };

    // with x_m = 0 the objective increases in eta_m, so the infimum is the bound
    let mut eta: Vec<f64> = x.iter().map(|&v| if v == 0.0 { ETA_MIN } else { 0.0 }).collect();
    let mut value = objective(&eta).ok_or_else(|| MklError::NotPositiveDefinite("combined kernel".into()))?;
    let mut grad_norm = f64::INFINITY;
    for it in 1..=200 {
        let (grad, hess) = derivatives(&eta)?;
        let free: Vec<usize> = (0..m).filter(|&i| !bound(&eta, &grad, i)).collect();
        grad_norm = free.iter().map(|&i| grad[i] * grad[i]).sum::<f64>().sqrt();
        if grad_norm <= 1e-7 {
            let clamped = eta.iter().any(|&e| e <= ETA_MIN || e >= ETA_MAX);
            return Ok(BayesG { value: 0.5 * value, eta, clamped, grad_norm, iterations: it });
        }
        let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| hess[(free[a], free[b])]);
        let gf = DVector::from_fn(free.len(), |a, _| grad[free[a]]);
        let mut damping = 0.0;
        let dir = loop {
            let mut h = hf.clone();
            for a in 0..free.len() {
                h[(a, a)] += damping;
            }
            if let Some(ch) = h.cholesky() {
                break ch.solve(&gf);
            }
            damping = if damping == 0.0 { 1e-10 * (1.0 + hf.diagonal().amax()) } else { damping * 10.0 };
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let mut trial = eta.clone();
            for (a, &i) in free.iter().enumerate() {
                trial[i] = (eta[i] - t * dir[a]).clamp(ETA_MIN, ETA_MAX);
            }
            let expected: f64 = free.iter().map(|&i| grad[i] * (trial[i] - eta[i])).sum();
            if let Some(v) = objective(&trial) {
                if v <= value + 1e-4 * expected || (v <= value && expected.abs() < 1e-300) {
                    eta = trial;
                    value = v;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    if grad_norm <= 1e-7 {
        let clamped = eta.iter().any(|&e| e <= ETA_MIN || e >= ETA_MAX);
        return Ok(BayesG { value: 0.5 * value, eta, clamped, grad_norm, iterations: 200 });
    }
    Err(MklError::NoConvergence { iterations: 200, residual: grad_norm })
}

/// Result of checking one family in one direction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConjugateReport {
    pub family: String,
    /// `g_from_h` (numeric conjugate of analytic h vs analytic g) or `h_from_g`.
    pub direction: String,
    pub samples: Vec<Vec<f64>>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub grid: GridSpec,
}

impl ConjugateReport {
    fn new(family: Family, direction: &str, samples: Vec<Vec<f64>>, pairs: Vec<(f64, f64)>, tolerance: f64, grid: GridSpec) -> Self {
        let (analytic, numeric): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let max_rel_error = analytic.iter().zip(&numeric).map(|(&a, &b)| relative_error(a, b)).fold(0.0, f64::max);
        Self {
            family: family.to_string(),
            direction: direction.to_string(),
            samples,
            analytic,
            numeric,
            max_rel_error,
            tolerance,
            passed: max_rel_error <= tolerance,
            grid,
        }
    }
}

/// `|a - b| / |a|`, falling back to the absolute error when `a` is zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    if !a.is_finite() || !b.is_finite() {
        return f64::INFINITY;
    }
    let scale = a.abs();
    if scale < 1e-12 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub tolerance: f64,
    pub samples: usize,
    pub seed: u64,
    pub grid: GridSpec,
    /// Only run families whose name (e.g. `elastic_net`) matches.
    pub family: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { tolerance: 1e-3, samples: 100, seed: 0, grid: GridSpec::default(), family: None }
    }
}

/// Families exercised by the check suite.
pub fn suite_families() -> Vec<Family> {
    vec![
        Family::BlockOneNorm,
        Family::LpNormTikhonov { p: 0.5 },
        Family::LpNormTikhonov { p: 1.0 },
        Family::LpNormTikhonov { p: 2.0 },
        Family::LpNormTikhonov { p: 3.0 },
        Family::UniformWeight,
        Family::BlockQNorm { q: 3.0 },
        Family::BlockQNorm { q: 4.0 },
        Family::ElasticNet { lambda: 0.2 },
        Family::ElasticNet { lambda: 0.5 },
        Family::ElasticNet { lambda: 0.8 },
        Family::LpNormIvanov { p: 1.0 },
        Family::LpNormIvanov { p: 2.0 },
        Family::MultiTaskIvanov,
        Family::Wedge,
    ]
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// Sample kernel weights inside the family's domain.
fn sample_weights(family: Family, m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match family {
        Family::UniformWeight => (0..m).map(|_| log_uniform(rng, 1e-2, 1.0)).collect(),
        Family::BlockQNorm { .. } => (0..m).map(|_| log_uniform(rng, 1e-1, 10.0)).collect(),
        Family::ElasticNet { lambda } => {
            let hi = if lambda > 0.0 { (0.95 / lambda).min(10.0) } else { 10.0 };
            (0..m).map(|_| log_uniform(rng, 1e-2, hi)).collect()
        }
        Family::LpNormIvanov { p } => {
            let d: Vec<f64> = (0..m).map(|_| log_uniform(rng, 1e-2, 1.0)).collect();
            let norm = d.iter().map(|v| v.powf(p)).sum::<f64>().powf(1.0 / p);
            let shrink = rng.gen_range(0.1..1.0);
            d.iter().map(|v| v / norm * shrink).collect()
        }
        Family::MultiTaskIvanov => sample_weights(Family::LpNormIvanov { p: 1.0 }, m, rng),
        _ => (0..m).map(|_| log_uniform(rng, 1e-2, 10.0)).collect(),
    }
}

/// Check every family in both directions at random points.
pub fn run_conjugate_suite(opts: &SuiteOptions) -> Result<Vec<ConjugateReport>> {
    let families: Vec<Family> = suite_families()
        .into_iter()
        .filter(|f| opts.family.as_deref().map_or(true, |name| f.name() == name || f.to_string() == name))
        .collect();
    let mut reports = Vec::new();
    for (fi, family) in families.into_iter().enumerate() {
        let m = if family.is_separable() { 3 } else { 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(fi as u64 * 7919));
        let xs: Vec<Vec<f64>> = (0..opts.samples).map(|_| (0..m).map(|_| log_uniform(&mut rng, 1e-2, 1e2)).collect()).collect();
        let g_pairs = xs
            .par_iter()
            .map(|x| {
                let bn = BlockNorms::new(x.clone())?;
                Ok((regfam::g_of(family, x)?, family_numeric_g(family, &bn, &opts.grid)?))
            })
            .collect::<Result<Vec<_>>>()?;
        reports.push(ConjugateReport::new(family, "g_from_h", xs, g_pairs, opts.tolerance, opts.grid));

        // the wedge g has no closed form; its h-side check would nest a
        // solver inside every grid point
        if family == Family::Wedge {
            continue;
        }
        let ds: Vec<Vec<f64>> = (0..opts.samples).map(|_| sample_weights(family, m, &mut rng)).collect();
        let h_pairs = ds
            .par_iter()
            .map(|d| {
                let kw = KernelWeights::new(d.clone())?;
                Ok((regfam::h_of(family, d), family_numeric_h(family, &kw, &opts.grid)?))
            })
            .collect::<Result<Vec<_>>>()?;
        reports.push(ConjugateReport::new(family, "h_from_g", ds, h_pairs, opts.tolerance, opts.grid));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn x(v: &[f64]) -> BlockNorms {
        BlockNorms::new(v.to_vec()).unwrap()
    }

    fn w(v: &[f64]) -> KernelWeights {
        KernelWeights::new(v.to_vec()).unwrap()
    }

    #[test]
    fn conjugate_g_examples() {
        let grid = GridSpec::default();
        let h = |d: f64| d;
        let v = numeric_conjugate_g(&Regularizer::Separable(&h), &x(&[4.0]), &grid, Extremum::Min).unwrap();
        assert!((v - 2.0).abs() < 1e-4);

        let ind = |d: f64| if (0.0..=1.0).contains(&d) { 0.0 } else { f64::INFINITY };
        let v = numeric_conjugate_g(&Regularizer::Separable(&ind), &x(&[3.0]), &grid, Extremum::Min).unwrap();
        assert!((v - 1.5).abs() < 1e-9);

        for f in suite_families() {
            let v = family_numeric_g(f, &x(&[0.0, 0.0]), &grid).unwrap();
            assert!(v.abs() < 1e-6, "{f}: {v}");
        }
    }

    #[test]
    fn conjugate_g_all_infinite() {
        let never = |_: f64| f64::INFINITY;
        let r = numeric_conjugate_g(&Regularizer::Separable(&never), &x(&[1.0]), &GridSpec::default(), Extremum::Min);
        assert!(matches!(r, Err(MklError::Unbounded(_))));
    }

    #[test]
    fn conjugate_h_examples() {
        let grid = GridSpec::default();
        let g = |x: f64| x.sqrt();
        let v = numeric_conjugate_h(&Regularizer::Separable(&g), &w(&[3.0]), &grid, Extremum::Min).unwrap();
        assert!((v - 3.0).abs() < 1e-3);

        let half = |x: f64| x / 2.0;
        let v = numeric_conjugate_h(&Regularizer::Separable(&half), &w(&[0.7]), &grid, Extremum::Min).unwrap();
        assert_eq!(v, 0.0);

        let v = family_numeric_h(Family::ElasticNet { lambda: 0.5 }, &w(&[1.0]), &grid).unwrap();
        assert!((v - 0.5).abs() < 1e-3);
    }

    #[test]
    fn conjugate_h_unbounded() {
        // g(x) = x/2 with d > 1: x (1/(2d) - 1/2) decreases without bound
        let half = |x: f64| x / 2.0;
        let r = numeric_conjugate_h(&Regularizer::Separable(&half), &w(&[2.0]), &GridSpec::default(), Extremum::Min);
        assert!(matches!(r, Err(MklError::Unbounded(_))));
    }

    #[test]
    fn wedge_single_kernel() {
        let s = wedge_g_numeric(&x(&[4.0])).unwrap();
        assert_eq!(s.value, 2.0);
        assert!(s.eta.is_empty());
        assert_eq!(&*wedge_weight_step(&x(&[4.0])).unwrap(), &[2.0]);
    }

    #[test]
    fn wedge_nonincreasing_input() {
        let s = wedge_g_numeric(&x(&[4.0, 1.0])).unwrap();
        assert!((s.value - 3.0).abs() < 1e-9);
        assert!(s.eta[0] < 1e-7);
        // ascent direction at eta = 0 is (d2 - d1)/2 = -1/2 <= 0
        let d = wedge_weight_step(&x(&[4.0, 1.0])).unwrap();
        assert!((d[0] - 2.0).abs() < 1e-6 && (d[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn wedge_increasing_input() {
        let s = wedge_g_numeric(&x(&[1.0, 4.0])).unwrap();
        // the cone constraint binds, so g exceeds the unconstrained sqrt(1) + sqrt(4)
        assert!(s.value > 3.0);
        // 1-D scan over eta_1 in [0, 1]
        let mut best = f64::NEG_INFINITY;
        for k in 0..=1_000_000 {
            let e = k as f64 / 1_000_000.0;
            best = best.max((1.0 - e).sqrt() + (4.0 * (1.0 + e)).sqrt());
        }
        assert!((s.value - best).abs() < 1e-8, "{} vs {best}", s.value);
        let d = wedge_weight_step(&x(&[1.0, 4.0])).unwrap();
        assert!((d[0] - d[1]).abs() < 1e-9);
        // 2-D grid over monotone pairs
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 1..=400 {
            for j in 1..=i {
                let (d1, d2) = (i as f64 * 0.01, j as f64 * 0.01);
                let v = 1.0 / d1 + d1 + 4.0 / d2 + d2;
                if v < best.0 {
                    best = (v, d1, d2);
                }
            }
        }
        assert!((d[0] - best.1).abs() < 0.01 && (d[1] - best.2).abs() < 0.01);
    }

    #[test]
    fn wedge_zero_norms() {
        // trailing zero: already monotone
        let d = wedge_weight_step(&x(&[4.0, 0.0])).unwrap();
        assert!((d[0] - 2.0).abs() < 1e-6);
        assert_eq!(d[1], 0.0);
        // leading zero pools with the next kernel: d1 = d2 = sqrt(2)
        let s = wedge_g_numeric(&x(&[0.0, 4.0])).unwrap();
        assert!((s.value - 2.0 * 2f64.sqrt()).abs() < 1e-6);
        assert!((s.weights[0] - 2f64.sqrt()).abs() < 1e-5);
        assert!((s.weights[1] - 2f64.sqrt()).abs() < 1e-5);
        let s = wedge_g_numeric(&x(&[0.0, 0.0, 0.0])).unwrap();
        assert_eq!(s.value, 0.0);
        assert_eq!(s.weights, vec![0.0; 3]);
    }

    #[test]
    fn variational_single_kernel() {
        let k = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let bank = KernelBank::from_matrices(vec![k.clone()]).unwrap();
        let f = DVector::from_vec(vec![1.0, -2.0]);
        let v = variational_norm(&bank, &w(&[1.0]), &f).unwrap();
        assert!((&v.parts[0] - &f).norm() < 1e-12);
        let direct = f.dot(&(k.try_inverse().unwrap() * &f));
        assert!((v.value - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn variational_identity_pair() {
        let bank = KernelBank::from_matrices(vec![DMatrix::identity(3, 3), DMatrix::identity(3, 3)]).unwrap();
        let f = DVector::from_vec(vec![1.0, 2.0, -0.5]);
        let v = variational_norm(&bank, &w(&[1.0, 1.0]), &f).unwrap();
        for p in &v.parts {
            assert!((p - &f / 2.0).norm() < 1e-14);
        }
        assert!((v.value - f.norm_squared() / 2.0).abs() < 1e-14);
    }

    #[test]
    fn variational_out_of_range() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let bank = KernelBank::from_matrices(vec![k]).unwrap();
        let inside = DVector::from_vec(vec![2.0, 2.0]);
        assert!((variational_norm(&bank, &w(&[1.0]), &inside).unwrap().value - 4.0).abs() < 1e-12);
        let outside = DVector::from_vec(vec![1.0, -1.0]);
        assert!(matches!(variational_norm(&bank, &w(&[1.0]), &outside), Err(MklError::OutOfRange(_))));
    }

    #[test]
    fn bayes_g_scalar_matches_grid() {
        let bank = KernelBank::from_matrices(vec![DMatrix::from_element(1, 1, 1.0)]).unwrap();
        let r = bayes_g_numeric(&bank, 1.0, &x(&[1.0])).unwrap();
        let mut best = f64::INFINITY;
        for k in 0..=200_000 {
            let e = -10.0 + 20.0 * k as f64 / 200_000.0;
            best = best.min((-e as f64).exp() + (1.0 + e.exp()).ln());
        }
        assert!((r.value - 0.5 * best).abs() < 1e-9, "{} vs {}", r.value, 0.5 * best);
        assert!(r.grad_norm <= 1e-7);
        assert!(!r.clamped);
    }

    #[test]
    fn bayes_g_zero_norms() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let bank = KernelBank::from_matrices(vec![k]).unwrap();
        let sigma2 = 0.5;
        let r = bayes_g_numeric(&bank, sigma2, &x(&[0.0])).unwrap();
        assert!(r.clamped);
        assert_eq!(r.eta, vec![ETA_MIN]);
        assert!((r.value - sigma2.ln()).abs() < 1e-12);
    }

    #[test]
    fn suite_small_sample() {
        let opts = SuiteOptions { samples: 4, ..SuiteOptions::default() };
        let reports = run_conjugate_suite(&opts).unwrap();
        assert_eq!(reports.len(), 2 * suite_families().len() - 1);
        for r in &reports {
            assert!(r.passed, "{} {}: {} {:?} {:?} {:?}", r.family, r.direction, r.max_rel_error, r.samples, r.analytic, r.numeric);
            let max = r.analytic.iter().zip(&r.numeric).map(|(&a, &b)| relative_error(a, b)).fold(0.0, f64::max);
            assert_eq!(max, r.max_rel_error);
        }
    }

    #[test]
    fn variational_matches_constrained_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let mats: Vec<DMatrix<f64>> = (0..2)
                .map(|_| {
                    let b = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
                    &b * b.transpose() + DMatrix::identity(5, 5) * 0.1
                })
                .collect();
            let d = [rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0)];
            let f = DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0));
            // minimize f1'A1 f1 + (f-f1)'A2 (f-f1), A_m = K_m^-1 / d_m
            let a1 = mats[0].clone().try_inverse().unwrap() / d[0];
            let a2 = mats[1].clone().try_inverse().unwrap() / d[1];
            let f1 = (&a1 + &a2).try_inverse().unwrap() * (&a2 * &f);
            let f2 = &f - &f1;
            let oracle = f1.dot(&(&a1 * &f1)) + f2.dot(&(&a2 * &f2));
            let bank = KernelBank::from_matrices(mats).unwrap();
            let v = variational_norm(&bank, &w(&d), &f).unwrap();
            assert!((v.value - oracle).abs() <= 1e-6 * oracle);
            assert!((&v.parts[0] + &v.parts[1] - &f).norm() <= 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn wedge_matches_pooling(xs in prop::collection::vec(0.0f64..25.0, 1..6)) {
            let s = wedge_g_numeric(&x(&xs)).unwrap();
            let primal: f64 = xs.iter().zip(&s.weights).map(|(&a, &d)| if d > 0.0 { a / d + d } else { 0.0 }).sum();
            prop_assert!((primal - 2.0 * s.value).abs() <= 1e-6 * (2.0 * s.value).max(1.0));
            prop_assert!(s.weights.windows(2).all(|p| p[0] >= p[1]));
            prop_assert!(s.eta.iter().all(|&e| e >= 0.0));
        }

        #[test]
        fn bayes_g_concave(a in prop::collection::vec(0.0f64..5.0, 2), b in prop::collection::vec(0.0f64..5.0, 2)) {
            let k1 = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 1.0, 0.5, 0.2, 0.5, 1.0]);
            let k2 = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
            let bank = KernelBank::from_matrices(vec![k1, k2]).unwrap();
            let mid: Vec<f64> = a.iter().zip(&b).map(|(u, v)| 0.5 * (u + v)).collect();
            let g = |v: &[f64]| bayes_g_numeric(&bank, 0.3, &x(v)).unwrap().value;
            prop_assert!(g(&mid) >= 0.5 * (g(&a) + g(&b)) - 1e-6);
        }

        #[test]
        fn multitask_jensen_bound(norms in prop::collection::vec(0.01f64..5.0, 2..6), lambda in 0.01f64..0.99) {
            let (task, shared) = norms.split_at(norms.len() - 1);
            let n = task.len() as f64;
            let mean_sq = task.iter().map(|v| v * v).sum::<f64>() / n;
            let fm = shared[0];
            let lhs = mean_sq / lambda + fm * fm / (1.0 - lambda);
            let rhs = (mean_sq.sqrt() + fm).powi(2);
            prop_assert!(lhs >= rhs * (1.0 - 1e-12));
            // equality at (1 - lambda)/lambda = ||f_M|| / sqrt(mean)
            let lam_star = mean_sq.sqrt() / (mean_sq.sqrt() + fm);
            let at = mean_sq / lam_star + fm * fm / (1.0 - lam_star);
            prop_assert!((at - rhs).abs() <= 1e-9 * rhs);
        }
    }
}
