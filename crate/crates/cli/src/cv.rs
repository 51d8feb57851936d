//! Repeated k-fold cross validation over the C (and elastic-net lambda) grid.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mkl_core::gram::KernelBank;
use mkl_core::regfam::{Family, RegularizerSpec};
use mkl_core::solver::{fit, FitOptions, LossSpec, MklModel};
use mkl_core::MklError;

use crate::config::CvConfig;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Rmse,
}

impl Metric {
    pub fn for_loss(loss: &LossSpec) -> Self {
        if loss.is_classification() {
            Metric::Accuracy
        } else {
            Metric::Rmse
        }
    }

    /// Accuracy thresholds scores at 0.
    pub fn score(self, y: &[f64], pred: &[f64]) -> f64 {
        let n = y.len() as f64;
        match self {
            Metric::Accuracy => {
                y.iter().zip(pred).filter(|(&a, &p)| (if p >= 0.0 { 1.0 } else { -1.0 }) == a).count() as f64 / n
            }
            Metric::Rmse => (y.iter().zip(pred).map(|(a, p)| (a - p) * (a - p)).sum::<f64>() / n).sqrt(),
        }
    }

    fn better(self, a: f64, b: f64) -> bool {
        match self {
            Metric::Accuracy => a > b,
            Metric::Rmse => a < b,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvCell {
    pub c: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// One score per (repeat, fold), repeat-major.
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    pub c: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub metric: Metric,
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Fold id of every sample, one vector per repeat.
    pub assignments: Vec<Vec<usize>>,
    pub cells: Vec<CvCell>,
    pub selected: Selection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn deal(rng: &mut ChaCha8Rng, y: &[f64], folds: usize, stratified: bool) -> Vec<usize> {
    let n = y.len();
    let mut out = vec![0; n];
    let groups: Vec<Vec<usize>> = if stratified {
        [-1.0, 1.0].iter().map(|&c| (0..n).filter(|&i| y[i] == c).collect()).collect()
    } else {
        vec![(0..n).collect()]
    };
    let mut next = 0;
    for mut g in groups {
        g.shuffle(rng);
        for i in g {
            out[i] = next % folds;
            next += 1;
        }
    }
    out
}

fn single_class_fold(y: &[f64], assign: &[usize], folds: usize) -> Option<usize> {
    (0..folds).find(|&f| {
        let mut classes = y.iter().zip(assign).filter(|(_, &a)| a == f).map(|(&v, _)| v > 0.0);
        match classes.next() {
            Some(first) => classes.all(|c| c == first),
            None => true,
        }
    })
}

/// Fold ids per repeat. Repeat `r` shuffles with seed `seed + r`; for
/// classification the deal is stratified and a fold holding a single class
/// is resampled once from an independent stream before giving up.
pub fn fold_assignments(
    y: &[f64],
    classification: bool,
    folds: usize,
    repeats: usize,
    seed: u64,
) -> Result<(Vec<Vec<usize>>, Vec<String>), CliError> {
    if folds < 2 || folds > y.len() {
        return Err(CliError::Config(format!("need 2 <= folds <= {} samples, got {folds}", y.len())));
    }
    let mut notes = Vec::new();
    let mut all = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
        let mut assign = deal(&mut rng, y, folds, classification);
        if classification {
            if let Some(f) = single_class_fold(y, &assign, folds) {
                notes.push(format!("repeat {}: fold {} held a single class, resampled", r + 1, f + 1));
                rng.set_stream(1);
                assign = deal(&mut rng, y, folds, classification);
                if let Some(f) = single_class_fold(y, &assign, folds) {
                    return Err(MklError::InvalidData(format!(
                        "repeat {}: fold {} still holds a single class after resampling; use fewer folds",
                        r + 1,
                        f + 1
                    ))
                    .into());
                }
            }
        }
        all.push(assign);
    }
    Ok((all, notes))
}

/// Grid cells in selection order: ascending C, then ascending lambda.
pub fn grid_cells(spec: &RegularizerSpec, cv: &CvConfig) -> Vec<(f64, Option<f64>)> {
    let mut cs = cv.c_grid.clone();
    cs.sort_by(f64::total_cmp);
    cs.dedup();
    let lambdas: Vec<Option<f64>> = match spec.family {
        Family::ElasticNet { .. } => {
            let mut l = cv.lambda_grid.clone();
            l.sort_by(f64::total_cmp);
            l.dedup();
            l.into_iter().map(Some).collect()
        }
        _ => vec![None],
    };
    cs.iter().flat_map(|&c| lambdas.iter().map(move |&l| (c, l))).collect()
}

pub fn cell_spec(spec: &RegularizerSpec, c: f64, lambda: Option<f64>) -> Result<RegularizerSpec, MklError> {
    let family = match (spec.family, lambda) {
        (Family::ElasticNet { .. }, Some(lambda)) => Family::ElasticNet { lambda },
        (f, _) => f,
    };
    RegularizerSpec::new(family, spec.side, c)
}

struct Split {
    train: Vec<usize>,
    val: Vec<usize>,
    bank: KernelBank,
    rows: Vec<DMatrix<f64>>,
    y: DVector<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn run_cv(
    bank: &KernelBank,
    y: &DVector<f64>,
    spec: &RegularizerSpec,
    loss: &LossSpec,
    opts: &FitOptions,
    cv: &CvConfig,
    seed: u64,
) -> Result<CvReport, CliError> {
    let metric = Metric::for_loss(loss);
    let ys = y.as_slice();
    let (assignments, notes) = fold_assignments(ys, loss.is_classification(), cv.folds, cv.repeats, seed)?;
    let mut splits = Vec::with_capacity(cv.folds * cv.repeats);
    for assign in &assignments {
        for f in 0..cv.folds {
            let train: Vec<usize> = (0..ys.len()).filter(|&i| assign[i] != f).collect();
            let val: Vec<usize> = (0..ys.len()).filter(|&i| assign[i] == f).collect();
            let sub = bank.submatrix(&train, &train);
            let rows = bank.submatrix(&val, &train).0;
            let y_train = DVector::from_iterator(train.len(), train.iter().map(|&i| ys[i]));
            splits.push(Split { bank: KernelBank::from_matrices(sub.0)?, rows, y: y_train, train, val });
        }
    }
    let mut cells = Vec::new();
    for (c, lambda) in grid_cells(spec, cv) {
        let cspec = cell_spec(spec, c, lambda)?;
        let mut scores = Vec::with_capacity(splits.len());
        let mut error = None;
        for s in &splits {
            match fit_and_score(s, &cspec, loss, opts, metric, ys) {
                Ok(v) => scores.push(v),
                Err(e) if e.is_numerical() => {
                    error = Some(format!("{} of {} training rows: {e}", s.train.len(), ys.len()));
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        let (mean, std) = if error.is_none() { mean_std(&scores) } else { (f64::NAN, f64::NAN) };
        cells.push(CvCell { c, lambda, scores, mean, std, error });
    }
    let mut best: Option<&CvCell> = None;
    for cell in cells.iter().filter(|c| c.error.is_none()) {
        if best.map_or(true, |b| metric.better(cell.mean, b.mean)) {
            best = Some(cell);
        }
    }
    let best = best.ok_or_else(|| CliError::Numerical("every cross-validation cell failed".into()))?;
    let selected = Selection { c: best.c, lambda: best.lambda, mean: best.mean };
    Ok(CvReport { metric, folds: cv.folds, repeats: cv.repeats, seed, assignments, cells, selected, notes })
}

fn fit_and_score(
    s: &Split,
    spec: &RegularizerSpec,
    loss: &LossSpec,
    opts: &FitOptions,
    metric: Metric,
    y: &[f64],
) -> Result<f64, MklError> {
    let (model, _): (MklModel, _) = fit(&s.bank, &s.y, spec, loss, opts)?;
    let pred = model.predict_rows(&s.rows)?;
    let truth: Vec<f64> = s.val.iter().map(|&i| y[i]).collect();
    Ok(metric.score(&truth, pred.as_slice()))
}

impl CvReport {
    /// Plain-text table, one line per grid cell.
    pub fn table(&self) -> String {
        let mut out = format!("metric: {:?} ({} x {}-fold)\n", self.metric, self.repeats, self.folds).to_lowercase();
        out.push_str(&format!("{:>10}  {:>7}  {:>12}  {:>12}\n", "C", "lambda", "mean", "std"));
        for c in &self.cells {
            let lambda = c.lambda.map_or("-".to_string(), |l| format!("{l}"));
            match &c.error {
                None => out.push_str(&format!("{:>10}  {:>7}  {:>12.6}  {:>12.6}\n", c.c, lambda, c.mean, c.std)),
                Some(e) => out.push_str(&format!("{:>10}  {:>7}  failed: {e}\n", c.c, lambda)),
            }
        }
        for n in &self.notes {
            out.push_str(&format!("note: {n}\n"));
        }
        let lambda = self.selected.lambda.map_or(String::new(), |l| format!(" lambda={l}"));
        out.push_str(&format!("selected: C={}{lambda} mean={:.6}\n", self.selected.c, self.selected.mean));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stratified_folds_balance_classes() {
        let y: Vec<f64> = (0..20).map(|i| if i < 8 { 1.0 } else { -1.0 }).collect();
        let (a, notes) = fold_assignments(&y, true, 4, 2, 3).unwrap();
        assert!(notes.is_empty());
        for assign in &a {
            for f in 0..4 {
                let pos = (0..20).filter(|&i| assign[i] == f && y[i] > 0.0).count();
                let neg = (0..20).filter(|&i| assign[i] == f && y[i] < 0.0).count();
                assert_eq!(pos, 2);
                assert_eq!(neg, 3);
            }
        }
        assert_ne!(a[0], a[1]);
        assert_eq!(a, fold_assignments(&y, true, 4, 2, 3).unwrap().0);
    }

    #[test]
    fn too_few_of_a_class_is_reported() {
        let y = vec![1.0, -1.0, -1.0, -1.0, -1.0, -1.0];
        let e = fold_assignments(&y, true, 3, 1, 0).unwrap_err();
        assert!(e.to_string().contains("single class"), "{e}");
    }

    #[test]
    fn metrics() {
        assert_eq!(Metric::Accuracy.score(&[1.0, -1.0, 1.0, -1.0], &[0.3, -2.0, -0.1, 0.0]), 0.5);
        assert!((Metric::Rmse.score(&[1.0, 2.0], &[2.0, 0.0]) - (2.5f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn lambda_grid_only_for_elastic_net() {
        let cv = CvConfig { c_grid: vec![1.0, 0.1], lambda_grid: vec![0.5, 0.0], ..CvConfig::default() };
        let en = RegularizerSpec::kernel_weight(Family::ElasticNet { lambda: 0.3 }, 1.0).unwrap();
        assert_eq!(grid_cells(&en, &cv), vec![(0.1, Some(0.0)), (0.1, Some(0.5)), (1.0, Some(0.0)), (1.0, Some(0.5))]);
        let b1 = RegularizerSpec::kernel_weight(Family::BlockOneNorm, 1.0).unwrap();
        assert_eq!(grid_cells(&b1, &cv), vec![(0.1, None), (1.0, None)]);
    }
}
