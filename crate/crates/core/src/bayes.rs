//! Empirical Bayes MKL: marginal likelihood of the Gaussian-process model
//! `y ~ N(0, sigma2 I + sum_m d_m K_m)` and MacKay's fixed-point updates.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{MklError, Result};
use crate::gram::{combine, KernelBank};
use crate::regfam::{BlockNorms, KernelWeights};
use crate::solver::{expand, FStep, LossSpec, MklModel, ModelKind};

/// Cholesky factor of `sigma2 I + sum d_m K_m`, kept with the matrix for refinement.
struct Factor {
    ch: Cholesky<f64, Dyn>,
    kbar: DMatrix<f64>,
}

impl Factor {
    /// Solve followed by one step of iterative refinement.
    fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let x = self.ch.solve(b);
        let r = b - &self.kbar * &x;
        x + self.ch.solve(&r)
    }

    fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let x = self.ch.solve(b);
        let r = b - &self.kbar * &x;
        x + self.ch.solve(&r)
    }
}

fn factor(bank: &KernelBank, d: &KernelWeights, sigma2: f64) -> Result<Factor> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(MklError::InvalidParameter(format!("sigma2 must be positive, got {sigma2}")));
    }
    let kbar = combine(bank, d, sigma2)?.entries;
    let ch = kbar
        .clone()
        .cholesky()
        .ok_or_else(|| MklError::NotPositiveDefinite("sigma2 I + sum d_m K_m (check the input Grams)".into()))?;
    Ok(Factor { ch, kbar })
}

fn log_det(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

fn check_y(bank: &KernelBank, y: &DVector<f64>) -> Result<()> {
    if y.len() != bank.n() {
        return Err(MklError::Dimension(format!("{} targets for kernels of size {}", y.len(), bank.n())));
    }
    Ok(())
}

/// `1/2 y' Kbar^-1 y + 1/2 log|Kbar|`, without the `N/2 log 2 pi` constant.
pub fn neg_log_marginal(bank: &KernelBank, d: &KernelWeights, sigma2: f64, y: &DVector<f64>) -> Result<f64> {
    check_y(bank, y)?;
    let f = factor(bank, d, sigma2)?;
    Ok(0.5 * y.dot(&f.solve_vec(y)) + 0.5 * log_det(&f.ch))
}

/// `log|sigma2 I + sum_m d_m K_m|`
pub fn bayes_h_value(bank: &KernelBank, d: &KernelWeights, sigma2: f64) -> Result<f64> {
    Ok(log_det(&factor(bank, d, sigma2)?.ch))
}

#[derive(Debug, Clone)]
pub struct MacKayStep {
    /// `f_m = d_m K_m Kbar^-1 y`
    pub parts: Vec<DVector<f64>>,
    /// `x_m = ||f_m||^2_{K_m} = d_m^2 alpha' K_m alpha`
    pub norms: BlockNorms,
    /// `Kbar^-1 y`
    pub alpha: DVector<f64>,
}

pub fn mackay_f_step(bank: &KernelBank, d: &KernelWeights, sigma2: f64, y: &DVector<f64>) -> Result<MacKayStep> {
    check_y(bank, y)?;
    let alpha = factor(bank, d, sigma2)?.solve_vec(y);
    let mut x = Vec::with_capacity(bank.len());
    let parts = bank
        .matrices()
        .zip(d.iter())
        .map(|(k, &w)| {
            if w > 0.0 {
                let ka = k * &alpha;
                x.push(w * w * alpha.dot(&ka).max(0.0));
                ka * w
            } else {
                x.push(0.0);
                DVector::zeros(alpha.len())
            }
        })
        .collect();
    Ok(MacKayStep { parts, norms: BlockNorms::new(x)?, alpha })
}

/// `d_m <- x_m / Tr(Kbar^-1 d_m K_m)`; zero weights stay zero.
pub fn mackay_d_step(bank: &KernelBank, d: &KernelWeights, sigma2: f64, x: &BlockNorms) -> Result<KernelWeights> {
    if x.len() != bank.len() {
        return Err(MklError::Dimension(format!("{} norms for {} kernels", x.len(), bank.len())));
    }
    let f = factor(bank, d, sigma2)?;
    let next = bank
        .matrices()
        .zip(d.iter().zip(x.iter()))
        .map(|(k, (&w, &xm))| {
            if w <= 0.0 || xm == 0.0 {
                return 0.0;
            }
            let tr = w * f.solve_mat(k).trace();
            if tr > 0.0 {
                xm / tr
            } else {
                0.0
            }
        })
        .collect();
    Ok(KernelWeights::from_vec_unchecked(next))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BayesOptions {
    pub max_iter: usize,
    /// Stop when `max |d_new - d| / max(1, max d) <= tol`.
    pub tol: f64,
}

impl Default for BayesOptions {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct BayesState {
    pub d: KernelWeights,
    pub sigma2: f64,
    pub parts: Vec<DVector<f64>>,
    pub norms: BlockNorms,
    /// Negative log marginal likelihood at every visited `d`.
    pub nll_trace: Vec<f64>,
    /// Weight snapshots matching `nll_trace`.
    pub weight_trace: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// The likelihood kept getting worse and the best state was returned.
    pub unstable: bool,
}

const NLL_INCREASE_TOL: f64 = 1e-6;
const MAX_INCREASES: usize = 5;

/// MacKay iterations from `d = 1/M`. The bias is not modelled.
pub fn fit_bayes(bank: &KernelBank, y: &DVector<f64>, sigma2: f64, opts: &BayesOptions) -> Result<(BayesState, MklModel)> {
    check_y(bank, y)?;
    let m = bank.len();
    let mut d = KernelWeights::uniform(m, 1.0 / m as f64);
    let mut nll_trace = Vec::new();
    let mut weight_trace = Vec::new();
    let mut best: Option<(f64, KernelWeights)> = None;
    let mut increases = 0;
    let mut converged = false;
    let mut unstable = false;
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        let nll = neg_log_marginal(bank, &d, sigma2, y)?;
        if !nll.is_finite() {
            return Err(MklError::NoConvergence { iterations: it, residual: nll });
        }
        if let Some(&prev) = nll_trace.last() {
            if nll > prev + NLL_INCREASE_TOL {
                increases += 1;
            } else {
                increases = 0;
            }
        }
        nll_trace.push(nll);
        weight_trace.push(d.to_vec());
        if best.as_ref().map_or(true, |(b, _)| nll < *b) {
            best = Some((nll, d.clone()));
        }
        if increases >= MAX_INCREASES {
            unstable = true;
            d = best.take().map(|(_, w)| w).unwrap_or(d);
            break;
        }
        let step = mackay_f_step(bank, &d, sigma2, y)?;
        let next = mackay_d_step(bank, &d, sigma2, &step.norms)?;
        let scale = d.iter().copied().fold(1.0, f64::max);
        let change = next.max_abs_diff(&d) / scale;
        d = next;
        if change <= opts.tol {
            converged = true;
            nll_trace.push(neg_log_marginal(bank, &d, sigma2, y)?);
            weight_trace.push(d.to_vec());
            break;
        }
    }
    let step = mackay_f_step(bank, &d, sigma2, y)?;
    let (norms, fitted) = expand(bank, &d, &d.active(), &step.alpha, 0.0);
    let fs = FStep { alpha: step.alpha.clone(), bias: 0.0, norms, fitted, inner_iterations: 0 };
    let model = MklModel::from_step(bank, d.clone(), &fs, ModelKind::EmpiricalBayes { sigma2 }, LossSpec::Squared { sigma2 });
    let state = BayesState {
        d,
        sigma2,
        parts: step.parts,
        norms: step.norms,
        nll_trace,
        weight_trace,
        iterations,
        converged,
        unstable,
    };
    Ok((state, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conjcheck::bayes_g_numeric;
    use nalgebra::DMatrix;
    use crate::gram::{build_gram, DataMatrix, KernelDescriptor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `f' K^-1 f` for symmetric positive definite `K`.
    fn quad_inv(k: &DMatrix<f64>, f: &DVector<f64>) -> f64 {
        f.dot(&k.clone().cholesky().unwrap().solve(f))
    }

    fn w(v: &[f64]) -> KernelWeights {
        KernelWeights::new(v.to_vec()).unwrap()
    }

    fn scalar_bank() -> KernelBank {
        KernelBank::from_matrices(vec![DMatrix::from_element(1, 1, 1.0)]).unwrap()
    }

    fn random_pd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &b * b.transpose() + DMatrix::identity(n, n) * 0.05
    }

    fn random_problem(seed: u64, n: usize, m: usize) -> (KernelBank, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = KernelBank::from_matrices((0..m).map(|_| random_pd(&mut rng, n)).collect()).unwrap();
        let y = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        (bank, y)
    }

    /// Zoomed 1-D minimization of `f` on `[lo, hi]`.
    fn scan_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let mut arg = lo;
        for _ in 0..8 {
            let n = 2000;
            let mut best = f64::INFINITY;
            for k in 0..=n {
                let t = lo + (hi - lo) * k as f64 / n as f64;
                let v = f(t);
                if v < best {
                    best = v;
                    arg = t;
                }
            }
            let h = (hi - lo) / n as f64;
            lo = (arg - h).max(lo);
            hi = arg + h;
        }
        arg
    }

    #[test]
    fn nll_examples() {
        let bank = scalar_bank();
        let zero = neg_log_marginal(&bank, &w(&[0.0]), 1.0, &DVector::zeros(1)).unwrap();
        assert_eq!(zero, 0.0);
        let v = neg_log_marginal(&bank, &w(&[1.0]), 1.0, &DVector::from_vec(vec![2.0])).unwrap();
        assert!((v - (1.0 + 0.5 * 2f64.ln())).abs() < 1e-14);
        assert!((v - 1.34657).abs() < 1e-5);
    }

    #[test]
    fn nll_rejects_bad_input() {
        let bank = scalar_bank();
        let y = DVector::from_vec(vec![1.0]);
        assert!(matches!(neg_log_marginal(&bank, &w(&[1.0]), 0.0, &y), Err(MklError::InvalidParameter(_))));
        let bad = KernelBank::from_matrices(vec![DMatrix::from_element(1, 1, -5.0)]).unwrap();
        assert!(matches!(neg_log_marginal(&bad, &w(&[1.0]), 1.0, &y), Err(MklError::NotPositiveDefinite(_))));
    }

    #[test]
    fn quadratic_upper_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for seed in 0..10 {
            let (bank, y) = random_problem(seed, 5, 3);
            let d = w(&[rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0)]);
            let sigma2 = rng.gen_range(0.2..2.0);
            let nll = neg_log_marginal(&bank, &d, sigma2, &y).unwrap();
            let h = bayes_h_value(&bank, &d, sigma2).unwrap();
            let bound = |parts: &[DVector<f64>]| {
                let sum = parts.iter().fold(DVector::zeros(5), |a, f| a + f);
                let mut v = (&y - sum).norm_squared() / (2.0 * sigma2) + 0.5 * h;
                for (m, f) in parts.iter().enumerate() {
                    v += 0.5 * quad_inv(bank.get(m).entries(), f) / d[m];
                }
                v
            };
            let arbitrary: Vec<DVector<f64>> = (0..3).map(|_| DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0))).collect();
            assert!(nll <= bound(&arbitrary) + 1e-12);
            let opt = mackay_f_step(&bank, &d, sigma2, &y).unwrap();
            let tight = bound(&opt.parts);
            assert!((tight - nll).abs() <= 1e-8 * nll.abs().max(1.0));
        }
    }

    #[test]
    fn f_step_examples() {
        let s = mackay_f_step(&scalar_bank(), &w(&[1.0]), 1.0, &DVector::from_vec(vec![2.0])).unwrap();
        assert!((s.parts[0][0] - 1.0).abs() < 1e-15);
        assert!((s.norms[0] - 1.0).abs() < 1e-15);
        let (bank, y) = random_problem(1, 4, 2);
        let s = mackay_f_step(&bank, &w(&[0.0, 0.0]), 0.7, &y).unwrap();
        assert!(s.parts.iter().all(|p| p.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn residual_identity() {
        for seed in 0..10 {
            let (bank, y) = random_problem(seed, 6, 3);
            let d = w(&[0.3, 1.2, 0.0]);
            let sigma2 = 0.4;
            let s = mackay_f_step(&bank, &d, sigma2, &y).unwrap();
            let lhs = &y - s.parts.iter().fold(DVector::zeros(6), |a, f| a + f);
            let rhs = &s.alpha * sigma2;
            assert!((&lhs - &rhs).norm() <= 1e-10 * rhs.norm());
        }
    }

    #[test]
    fn d_step_examples() {
        let bank = scalar_bank();
        let d = mackay_d_step(&bank, &w(&[1.0]), 1.0, &BlockNorms::new(vec![1.0]).unwrap()).unwrap();
        assert!((d[0] - 2.0).abs() < 1e-15);
        let d = mackay_d_step(&bank, &w(&[1.0]), 1.0, &BlockNorms::new(vec![0.0]).unwrap()).unwrap();
        assert_eq!(d[0], 0.0);
    }

    #[test]
    fn d_step_fixed_point() {
        let (bank, y) = random_problem(5, 6, 1);
        let sigma2 = 0.3;
        let nll = |t: f64| neg_log_marginal(&bank, &w(&[t]), sigma2, &y).unwrap();
        let rough = scan_min(nll, 1e-6, 20.0);
        // polish: bisection on a central-difference derivative
        let slope = |t: f64| (nll(t + 1e-5) - nll(t - 1e-5)) / 2e-5;
        let (mut lo, mut hi) = (rough * 0.9, rough * 1.1);
        assert!(slope(lo) < 0.0 && slope(hi) > 0.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if slope(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let star = 0.5 * (lo + hi);
        let s = mackay_f_step(&bank, &w(&[star]), sigma2, &y).unwrap();
        let next = mackay_d_step(&bank, &w(&[star]), sigma2, &s.norms).unwrap();
        assert!((next[0] - star).abs() <= 1e-8 * star.max(1.0), "{} vs {star}", next[0]);
    }

    #[test]
    fn fit_scalar_problem() {
        let (state, model) = fit_bayes(&scalar_bank(), &DVector::from_vec(vec![2.0]), 1.0, &BayesOptions::default()).unwrap();
        assert_eq!(state.weight_trace[0], vec![1.0]);
        assert!((state.weight_trace[1][0] - 2.0).abs() < 1e-15);
        let nll = |t: f64| 2.0 / (1.0 + t) + 0.5 * (1.0 + t).ln();
        let star = scan_min(nll, 0.0, 20.0);
        assert!((state.d[0] - star).abs() < 1e-4);
        assert!((state.d[0] - 3.0).abs() < 1e-4);
        assert!(state.converged && !state.unstable);
        assert_eq!(model.bias, 0.0);
        assert!((model.alpha[0] - 2.0 / (1.0 + state.d[0])).abs() < 1e-15);
    }

    #[test]
    fn zero_targets_switch_everything_off() {
        let (bank, _) = random_problem(2, 5, 3);
        let (state, _) = fit_bayes(&bank, &DVector::zeros(5), 0.5, &BayesOptions::default()).unwrap();
        assert!(state.d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_kernel_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 40;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
        let data = DataMatrix::from_rows(&rows).unwrap();
        let y = DVector::from_fn(n, |i, _| (1.5 * rows[i][0]).sin() + 0.1 * rng.gen_range(-1.0..1.0));
        let bank = KernelBank::new(vec![
            build_gram(&data, &KernelDescriptor::gaussian(0.7).with_features(vec![0])).unwrap(),
            build_gram(&data, &KernelDescriptor::gaussian(0.7).with_features(vec![1])).unwrap(),
        ])
        .unwrap();
        let sigma2 = 0.01;
        let (state, _) = fit_bayes(&bank, &y, sigma2, &BayesOptions::default()).unwrap();
        assert!(state.d[1] <= 1e-3 * state.d[0], "{:?}", state.d);
        // dense grid on the likelihood
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 1..=80 {
            for j in 0..=40 {
                let (a, b) = (i as f64 * 0.05, j as f64 * 0.005);
                let v = neg_log_marginal(&bank, &w(&[a, b]), sigma2, &y).unwrap();
                if v < best.0 {
                    best = (v, a, b);
                }
            }
        }
        assert_eq!(best.2, 0.0, "{:?}", best);
        assert!((state.d[0] - best.1).abs() <= 0.05, "{:?} vs {best:?}", state.d);
        let last = *state.nll_trace.last().unwrap();
        assert!(last <= best.0 + 1e-5 * best.0.abs(), "{last} vs {best:?}");
    }

    #[test]
    fn h_value_examples() {
        let (bank, _) = random_problem(3, 4, 2);
        let v = bayes_h_value(&bank, &w(&[0.0, 0.0]), 0.5).unwrap();
        assert!((v - 4.0 * 0.5f64.ln()).abs() < 1e-14);
        let v = bayes_h_value(&scalar_bank(), &w(&[1.0]), 1.0).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn h_is_concave(seed in 0u64..1000, a in prop::collection::vec(0.0f64..3.0, 3), b in prop::collection::vec(0.0f64..3.0, 3)) {
            let (bank, _) = random_problem(seed, 4, 3);
            let mid: Vec<f64> = a.iter().zip(&b).map(|(u, v)| 0.5 * (u + v)).collect();
            let h = |d: &[f64]| bayes_h_value(&bank, &w(d), 0.2).unwrap();
            prop_assert!(h(&mid) >= 0.5 * (h(&a) + h(&b)) - 1e-9);
        }

        #[test]
        fn decomposition_identity(seed in 0u64..1000, d in prop::collection::vec(0.0f64..3.0, 3), sigma2 in 0.1f64..2.0) {
            let (bank, y) = random_problem(seed, 5, 3);
            let d = w(&d);
            let s = mackay_f_step(&bank, &d, sigma2, &y).unwrap();
            let sum = s.parts.iter().fold(DVector::zeros(5), |acc, f| acc + f);
            let ratio: f64 = s.norms.iter().zip(d.iter()).map(|(&x, &dm)| if dm > 0.0 { x / dm } else { 0.0 }).sum();
            let bracket = (&y - sum).norm_squared() / (2.0 * sigma2) + 0.5 * ratio;
            let nll = neg_log_marginal(&bank, &d, sigma2, &y).unwrap();
            let rhs = bracket + 0.5 * bayes_h_value(&bank, &d, sigma2).unwrap();
            prop_assert!((nll - rhs).abs() <= 1e-8 * nll.abs().max(1.0));
        }

        #[test]
        fn g_side_consistency(seed in 0u64..1000, x in prop::collection::vec(0.01f64..5.0, 2), d in prop::collection::vec(0.01f64..5.0, 2)) {
            let (bank, _) = random_problem(seed, 4, 2);
            let sigma2 = 0.5;
            let xs = BlockNorms::new(x.clone()).unwrap();
            let g = bayes_g_numeric(&bank, sigma2, &xs).unwrap();
            let upper = |d: &[f64]| {
                0.5 * x.iter().zip(d).map(|(a, b)| a / b).sum::<f64>() + 0.5 * bayes_h_value(&bank, &w(d), sigma2).unwrap()
            };
            prop_assert!(upper(&d) >= g.value - 1e-9);
            let at: Vec<f64> = g.eta.iter().map(|e| e.exp()).collect();
            prop_assert!((upper(&at) - g.value).abs() <= 1e-5);
        }

        #[test]
        fn final_nll_not_worse(seed in 0u64..10_000) {
            let (bank, y) = random_problem(seed, 6, 3);
            let (state, _) = fit_bayes(&bank, &y, 0.3, &BayesOptions::default()).unwrap();
            prop_assert!(state.nll_trace.last().unwrap() <= &state.nll_trace[0]);
        }

        #[test]
        fn d_step_keeps_sign(seed in 0u64..1000, d in prop::collection::vec(0.0f64..3.0, 3)) {
            let (bank, y) = random_problem(seed, 4, 3);
            let d = w(&d);
            let s = mackay_f_step(&bank, &d, 0.3, &y).unwrap();
            let next = mackay_d_step(&bank, &d, 0.3, &s.norms).unwrap();
            for (a, b) in d.iter().zip(next.iter()) {
                prop_assert!(*b >= 0.0);
                if *a == 0.0 {
                    prop_assert_eq!(*b, 0.0);
                }
            }
        }
    }
}
