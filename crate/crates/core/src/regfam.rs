//! Regularizer families on both sides of the kernel-weight / block-norm
//! correspondence.
//!
//! A kernel-weight regularizer `h(d)` penalizes the combination weights; a
//! block-norm regularizer `g(x)` penalizes the squared RKHS norms
//! `x_m = ||f_m||^2`. The two are linked by
//! `g(x) = 1/2 inf_y (x'y + h(1/y))` and, at the optimum,
//! `d_m = (2 dg/dx_m)^-1`.

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::conjcheck;
use crate::error::{MklError, Result};

/// Weights below this are treated as exactly zero (kernel pruned).
pub const PRUNE_THRESHOLD: f64 = 1e-10;
/// Upper clamp for block q-norm weights when `x_m -> 0`.
pub const D_MAX: f64 = 1e8;

/// Nonnegative per-kernel scale factors `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KernelWeights(Vec<f64>);

impl KernelWeights {
    pub fn new(d: Vec<f64>) -> Result<Self> {
        if let Some(v) = d.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(MklError::InvalidParameter(format!(
                "kernel weights must be finite and nonnegative, got {v}"
            )));
        }
        Ok(Self(d))
    }

    pub fn uniform(m: usize, value: f64) -> Self {
        Self(vec![value; m])
    }

    /// No validation; callers must uphold nonnegativity.
    pub fn from_vec_unchecked(d: Vec<f64>) -> Self {
        Self(d)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Indices with `d_m > PRUNE_THRESHOLD`.
    pub fn active(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&m| self.0[m] > PRUNE_THRESHOLD).collect()
    }

    /// Zero out entries below the prune threshold.
    pub fn pruned(mut self) -> Self {
        for v in &mut self.0 {
            if *v < PRUNE_THRESHOLD {
                *v = 0.0;
            }
        }
        self
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl Deref for KernelWeights {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Squared block norms `x_m = ||f_m||^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockNorms(Vec<f64>);

impl BlockNorms {
    pub fn new(x: Vec<f64>) -> Result<Self> {
        if let Some(v) = x.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(MklError::InvalidParameter(format!(
                "block norms must be finite and nonnegative, got {v}"
            )));
        }
        Ok(Self(x))
    }

    pub(crate) fn from_vec_unchecked(x: Vec<f64>) -> Self {
        Self(x)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for BlockNorms {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Regularizer family and its shape parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    /// `h = sum d`, `g = sum sqrt(x)` (group lasso).
    BlockOneNorm,
    /// `h = sum d^p / p`.
    LpNormTikhonov { p: f64 },
    /// `sum d^p <= 1`.
    LpNormIvanov { p: f64 },
    /// `d in [0,1]^M`, `g = sum x / 2`.
    UniformWeight,
    /// `g = sum x^(q/2) / q` with `q > 2`.
    BlockQNorm { q: f64 },
    /// `g = sum (1-lambda) sqrt(x) + lambda x / 2`.
    ElasticNet { lambda: f64 },
    /// `h = sum d` on the monotone cone `d_1 >= ... >= d_M >= 0`.
    Wedge,
    /// `sum d <= 1` with the multi-task kernel bank; `g = (sum sqrt(x))^2 / 2`.
    MultiTaskIvanov,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::BlockOneNorm => "block_one_norm",
            Family::LpNormTikhonov { .. } => "lp_norm_tikhonov",
            Family::LpNormIvanov { .. } => "lp_norm_ivanov",
            Family::UniformWeight => "uniform_weight",
            Family::BlockQNorm { .. } => "block_q_norm",
            Family::ElasticNet { .. } => "elastic_net",
            Family::Wedge => "wedge",
            Family::MultiTaskIvanov => "multi_task_ivanov",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Family::LpNormTikhonov { p } | Family::LpNormIvanov { p } if !(p > 0.0) || !p.is_finite() => {
                Err(MklError::InvalidParameter(format!("p must be positive, got {p}")))
            }
            Family::BlockQNorm { q } if !(q > 2.0) || !q.is_finite() => {
                Err(MklError::InvalidParameter(format!("block q-norm needs q > 2, got {q}")))
            }
            Family::ElasticNet { lambda } if !(0.0..=1.0).contains(&lambda) => {
                Err(MklError::InvalidParameter(format!("elastic-net lambda must lie in [0,1], got {lambda}")))
            }
            _ => Ok(()),
        }
    }

    /// Elastic net at its endpoints is exactly block 1-norm / uniform weight.
    fn canonical(self) -> Family {
        match self {
            Family::ElasticNet { lambda } if lambda == 0.0 => Family::BlockOneNorm,
            Family::ElasticNet { lambda } if lambda == 1.0 => Family::UniformWeight,
            Family::MultiTaskIvanov => Family::LpNormIvanov { p: 1.0 },
            f => f,
        }
    }

    /// Block-norm exponent `q = 2p/(1+p)` for the lp-norm families.
    pub fn block_q(&self) -> Option<f64> {
        match *self {
            Family::LpNormTikhonov { p } | Family::LpNormIvanov { p } => Some(2.0 * p / (1.0 + p)),
            Family::MultiTaskIvanov => Some(1.0),
            Family::BlockQNorm { q } => Some(q),
            Family::BlockOneNorm => Some(1.0),
            Family::UniformWeight => Some(2.0),
            _ => None,
        }
    }

    /// `h` and `g` split into per-kernel terms.
    pub fn is_separable(&self) -> bool {
        !matches!(self, Family::LpNormIvanov { .. } | Family::Wedge | Family::MultiTaskIvanov)
    }

    /// Convex, nondecreasing `h`: the kernel-weight problem is jointly convex
    /// and alternating minimization descends monotonically.
    pub fn has_convex_h(&self) -> bool {
        match *self {
            Family::BlockQNorm { .. } => false,
            Family::LpNormTikhonov { p } => p >= 1.0,
            Family::LpNormIvanov { p } => p >= 1.0,
            _ => true,
        }
    }

    /// `d` does not depend on `x` (uniform combination).
    pub fn fixed_weights(&self) -> bool {
        matches!(self.canonical(), Family::UniformWeight)
    }

    /// Per-kernel `h(d)` for separable families.
    pub fn h_scalar(&self, d: f64) -> f64 {
        match self.canonical() {
            Family::BlockOneNorm => d,
            Family::LpNormTikhonov { p } => d.powf(p) / p,
            Family::UniformWeight => {
                if d <= 1.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Family::BlockQNorm { q } => -((q - 2.0) / q) * d.powf(-q / (q - 2.0)),
            Family::ElasticNet { lambda } => {
                if lambda * d >= 1.0 {
                    f64::INFINITY
                } else {
                    (1.0 - lambda).powi(2) * d / (1.0 - lambda * d)
                }
            }
            f => panic!("{} is not separable", f.name()),
        }
    }

    /// Per-kernel `g(x)` for separable families.
    pub fn g_scalar(&self, x: f64) -> f64 {
        match self.canonical() {
            Family::BlockOneNorm => x.sqrt(),
            Family::LpNormTikhonov { p } => (1.0 + p) / (2.0 * p) * x.powf(p / (1.0 + p)),
            Family::UniformWeight => x / 2.0,
            Family::BlockQNorm { q } => x.powf(q / 2.0) / q,
            Family::ElasticNet { lambda } => (1.0 - lambda) * x.sqrt() + lambda / 2.0 * x,
            f => panic!("{} is not separable", f.name()),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Family::LpNormTikhonov { p } | Family::LpNormIvanov { p } => write!(f, "{}(p={p})", self.name()),
            Family::BlockQNorm { q } => write!(f, "{}(q={q})", self.name()),
            Family::ElasticNet { lambda } => write!(f, "{}(lambda={lambda})", self.name()),
            _ => f.write_str(self.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// `h(d)`
    KernelWeight,
    /// `g(x)`
    BlockNorm,
}

impl Side {
    fn name(self) -> &'static str {
        match self {
            Side::KernelWeight => "kernel_weight",
            Side::BlockNorm => "block_norm",
        }
    }

    fn flip(self) -> Side {
        match self {
            Side::KernelWeight => Side::BlockNorm,
            Side::BlockNorm => Side::KernelWeight,
        }
    }
}

/// One regularizer: family, which side of the duality, and constant `C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct RegularizerSpec {
    pub family: Family,
    pub side: Side,
    pub c: f64,
}

impl RegularizerSpec {
    pub fn new(family: Family, side: Side, c: f64) -> Result<Self> {
        family.validate()?;
        if !(c > 0.0) || !c.is_finite() {
            return Err(MklError::InvalidParameter(format!("C must be positive, got {c}")));
        }
        Ok(Self { family, side, c })
    }

    pub fn kernel_weight(family: Family, c: f64) -> Result<Self> {
        Self::new(family, Side::KernelWeight, c)
    }

    pub fn block_norm(family: Family, c: f64) -> Result<Self> {
        Self::new(family, Side::BlockNorm, c)
    }

    pub fn with_c(self, c: f64) -> Result<Self> {
        Self::new(self.family, self.side, c)
    }

    fn expect_side(&self, side: Side) -> Result<()> {
        if self.side != side {
            return Err(MklError::WrongSide { expected: side.name(), got: self.side.name() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct RawParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawSpec {
    family: String,
    #[serde(default)]
    params: RawParams,
    #[serde(default = "default_side")]
    side: Side,
    #[serde(rename = "C", default = "default_c")]
    c: f64,
}

fn default_side() -> Side {
    Side::KernelWeight
}

fn default_c() -> f64 {
    1.0
}

impl TryFrom<RawSpec> for RegularizerSpec {
    type Error = MklError;

    fn try_from(raw: RawSpec) -> Result<Self> {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| MklError::InvalidParameter(format!("family {} needs params.{name}", raw.family)))
        };
        let family = match raw.family.as_str() {
            "block_one_norm" => Family::BlockOneNorm,
            "lp_norm_tikhonov" => Family::LpNormTikhonov { p: need(raw.params.p, "p")? },
            "lp_norm_ivanov" => Family::LpNormIvanov { p: need(raw.params.p, "p")? },
            "uniform_weight" => Family::UniformWeight,
            "block_q_norm" => Family::BlockQNorm { q: need(raw.params.q, "q")? },
            "elastic_net" => Family::ElasticNet { lambda: need(raw.params.lambda, "lambda")? },
            "wedge" => Family::Wedge,
            "multi_task_ivanov" => Family::MultiTaskIvanov,
            other => return Err(MklError::InvalidParameter(format!("unknown regularizer family '{other}'"))),
        };
        RegularizerSpec::new(family, raw.side, raw.c)
    }
}

impl From<RegularizerSpec> for RawSpec {
    fn from(spec: RegularizerSpec) -> Self {
        let mut params = RawParams::default();
        match spec.family {
            Family::LpNormTikhonov { p } | Family::LpNormIvanov { p } => params.p = Some(p),
            Family::BlockQNorm { q } => params.q = Some(q),
            Family::ElasticNet { lambda } => params.lambda = Some(lambda),
            _ => {}
        }
        RawSpec { family: spec.family.name().to_string(), params, side: spec.side, c: spec.c }
    }
}

/// Kernel-weight regularizer `h(d)`; `+inf` outside the family's domain.
pub fn h_value(spec: &RegularizerSpec, d: &KernelWeights) -> Result<f64> {
    spec.expect_side(Side::KernelWeight)?;
    Ok(h_of(spec.family, d))
}

pub(crate) fn h_of(family: Family, d: &[f64]) -> f64 {
    match family.canonical() {
        Family::LpNormIvanov { p } => {
            // the normalized closed form lands on the boundary up to rounding
            if d.iter().map(|v| v.powf(p)).sum::<f64>() <= 1.0 + 1e-12 {
                0.0
            } else {
                f64::INFINITY
            }
        }
        Family::Wedge => {
            if d.windows(2).all(|w| w[0] >= w[1]) {
                d.iter().sum()
            } else {
                f64::INFINITY
            }
        }
        f => d.iter().map(|&v| f.h_scalar(v)).sum(),
    }
}

/// Block-norm regularizer `g(x)`.
pub fn g_value(spec: &RegularizerSpec, x: &BlockNorms) -> Result<f64> {
    spec.expect_side(Side::BlockNorm)?;
    g_of(spec.family, x)
}

pub(crate) fn g_of(family: Family, x: &[f64]) -> Result<f64> {
    Ok(match family.canonical() {
        Family::LpNormIvanov { p } => {
            0.5 * x.iter().map(|v| v.powf(p / (1.0 + p))).sum::<f64>().powf((1.0 + p) / p)
        }
        Family::Wedge => conjcheck::wedge_g_numeric(&BlockNorms::new(x.to_vec())?)?.value,
        f => x.iter().map(|&v| f.g_scalar(v)).sum(),
    })
}

/// Minimizing weights `d = argmin_d sum x_m/d_m + h(d)` with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStep {
    pub weights: KernelWeights,
    /// Kernels whose weight hit `D_MAX` (block q-norm with vanishing norm).
    pub clamped: Vec<usize>,
}

/// Closed-form optimal kernel weights for given squared block norms.
///
/// Zero norms give zero weight (the `0/0 = 0` convention), except for the
/// uniform family (always 1) and block q-norm (clamped at `D_MAX`).
pub fn optimal_weights(spec: &RegularizerSpec, x: &BlockNorms) -> Result<WeightStep> {
    optimal_weights_for(spec.family, x)
}

pub(crate) fn optimal_weights_for(family: Family, x: &BlockNorms) -> Result<WeightStep> {
    let mut clamped = Vec::new();
    let d: Vec<f64> = match family.canonical() {
        Family::BlockOneNorm => x.iter().map(|v| v.sqrt()).collect(),
        Family::LpNormTikhonov { p } => x.iter().map(|v| v.powf(1.0 / (1.0 + p))).collect(),
        Family::LpNormIvanov { p } => {
            let denom = x.iter().map(|v| v.powf(p / (1.0 + p))).sum::<f64>().powf(1.0 / p);
            if denom > 0.0 {
                x.iter().map(|v| v.powf(1.0 / (1.0 + p)) / denom).collect()
            } else {
                // every norm vanished: any feasible point is optimal
                vec![(x.len() as f64).powf(-1.0 / p); x.len()]
            }
        }
        Family::UniformWeight => vec![1.0; x.len()],
        Family::BlockQNorm { q } => x
            .iter()
            .enumerate()
            .map(|(m, v)| {
                let d = v.powf((2.0 - q) / 2.0);
                if d > D_MAX {
                    clamped.push(m);
                    D_MAX
                } else {
                    d
                }
            })
            .collect(),
        Family::ElasticNet { lambda } => x
            .iter()
            .map(|v| {
                let n = v.sqrt();
                if n == 0.0 {
                    0.0
                } else {
                    n / ((1.0 - lambda) + lambda * n)
                }
            })
            .collect(),
        Family::Wedge => return Ok(WeightStep { weights: conjcheck::wedge_weight_step(x)?, clamped }),
        Family::MultiTaskIvanov => unreachable!("canonicalized"),
    };
    Ok(WeightStep { weights: KernelWeights(d), clamped })
}

/// The same family viewed from the other side of the duality.
pub fn conjugate_pair(spec: &RegularizerSpec) -> RegularizerSpec {
    RegularizerSpec { side: spec.side.flip(), ..*spec }
}

/// `sum x_m / d_m + h(d)` with `0/0 = 0` and `x/0 = inf`.
pub fn weighted_objective(family: Family, x: &[f64], d: &[f64]) -> f64 {
    let ratio: f64 = x
        .iter()
        .zip(d)
        .map(|(&xm, &dm)| {
            if dm > 0.0 {
                xm / dm
            } else if xm == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .sum();
    ratio + h_of(family, d)
}
