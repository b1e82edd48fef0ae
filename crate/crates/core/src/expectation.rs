//! Evaluators of the two-point expectation `F(k_xy; k_xx, k_xx) = E[phi(u) phi(v)]`, where
//! `(u, v)` is a zero-mean Gaussian pair with equal variances `k_xx` and covariance `k_xy`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lookup::{GridSpec, LookupTable};
use crate::nonlinearity::Nonlinearity;

/// Shared interface for the kernel recurrence. Implementations must be safe to share
/// between threads.
pub trait GaussianExpectation: Sync {
    fn nonlinearity(&self) -> Nonlinearity;

    fn pair(&self, k_xy: f64, k_xx: f64) -> Result<f64>;

    /// `E[phi(u)^2]` for `u ~ N(0, k_xx)`.
    fn diagonal(&self, k_xx: f64) -> Result<f64> {
        self.pair(k_xx, k_xx)
    }

    /// Largest variance the evaluator accepts.
    fn max_variance(&self) -> f64 {
        f64::INFINITY
    }
}

impl GaussianExpectation for LookupTable {
    fn nonlinearity(&self) -> Nonlinearity {
        LookupTable::nonlinearity(self)
    }

    fn pair(&self, k_xy: f64, k_xx: f64) -> Result<f64> {
        self.interpolate(k_xy, k_xx)
    }

    fn diagonal(&self, k_xx: f64) -> Result<f64> {
        LookupTable::diagonal(self, k_xx)
    }

    fn max_variance(&self) -> f64 {
        self.s_max()
    }
}

/// Clamp `x` into `[-1, 1]` when it overshoots by at most `1e-12`. Larger overshoots are
/// left alone so the caller's bound check can report them.
pub(crate) fn clamp_unit(x: f64) -> f64 {
    const SLACK: f64 = 1e-12;
    if x > 1.0 && x <= 1.0 + SLACK {
        1.0
    } else if x < -1.0 && x >= -1.0 - SLACK {
        -1.0
    } else {
        x
    }
}

/// Closed-form ReLU expectation (the degree-one arc-cosine kernel):
/// `F = sqrt(k_xx k_yy) / (2 pi) * (sin t + (pi - t) cos t)` with `cos t = k_xy / sqrt(k_xx k_yy)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct AnalyticRelu;

impl AnalyticRelu {
    pub fn general(k_xy: f64, k_xx: f64, k_yy: f64) -> Result<f64> {
        if !(k_xx > 0.0 && k_yy > 0.0) || !k_xx.is_finite() || !k_yy.is_finite() {
            return Err(Error::Input(format!(
                "analytic ReLU step needs positive variances, got {k_xx} and {k_yy}"
            )));
        }
        let norm = (k_xx * k_yy).sqrt();
        let cos = clamp_unit(k_xy / norm);
        if !(-1.0..=1.0).contains(&cos) {
            return Err(Error::Input(format!(
                "|k_xy| <= sqrt(k_xx k_yy) violated (k_xy = {k_xy}, k_xx = {k_xx}, k_yy = {k_yy})"
            )));
        }
        let theta = cos.acos();
        Ok(norm / (2.0 * PI) * (theta.sin() + (PI - theta) * cos))
    }
}

impl GaussianExpectation for AnalyticRelu {
    fn nonlinearity(&self) -> Nonlinearity {
        Nonlinearity::Relu
    }

    fn pair(&self, k_xy: f64, k_xx: f64) -> Result<f64> {
        if k_xx == 0.0 && k_xy == 0.0 {
            return Ok(0.0);
        }
        Self::general(k_xy, k_xx, k_xx)
    }

    fn diagonal(&self, k_xx: f64) -> Result<f64> {
        if !(k_xx >= 0.0) {
            return Err(Error::Input(format!("negative variance {k_xx}")));
        }
        Ok(k_xx / 2.0)
    }
}

/// Direct evaluation of the expectation by a tensor-product trapezoid rule on the standard
/// normal weight, truncated at `|z| <= 9`.
///
/// For an integrand analytic in a strip the trapezoid error decays like `exp(-2 pi d / h)`.
/// `tanh(sqrt(s) z)` has poles at distance `pi / (2 sqrt(s))`, so the step shrinks as
/// `1 / sqrt(s)` to hold the error near round-off. ReLU has a kink and only gets `O(h^2)`;
/// use [`AnalyticRelu`] for it.
#[derive(Debug, Clone, Copy)]
pub struct DirectQuadrature {
    phi: Nonlinearity,
    step_scale: f64,
}

impl DirectQuadrature {
    pub const Z_MAX: f64 = 9.0;
    pub const MAX_STEP: f64 = 0.25;
    pub const DEFAULT_STEP_SCALE: f64 = 0.3;

    pub fn new(phi: Nonlinearity) -> Self {
        DirectQuadrature {
            phi,
            step_scale: Self::DEFAULT_STEP_SCALE,
        }
    }

    /// Step is `min(MAX_STEP, step_scale / sqrt(s))`; smaller is more accurate.
    pub fn with_step_scale(phi: Nonlinearity, step_scale: f64) -> Result<Self> {
        if !(step_scale > 0.0) || !step_scale.is_finite() {
            return Err(Error::Parameter(format!(
                "step scale must be positive, got {step_scale}"
            )));
        }
        Ok(DirectQuadrature { phi, step_scale })
    }

    /// Nodes and normalized weights for `E[g(z)]`, `z ~ N(0, 1)`, resolved for variance `s`.
    pub fn rule(&self, s: f64) -> (Vec<f64>, Vec<f64>) {
        let h = if s > 0.0 {
            (self.step_scale / s.sqrt()).min(Self::MAX_STEP)
        } else {
            Self::MAX_STEP
        };
        let n = (Self::Z_MAX / h).ceil() as i64;
        let nodes: Vec<f64> = (-n..=n).map(|k| k as f64 * h).collect();
        let mut weights: Vec<f64> = nodes.iter().map(|z| (-0.5 * z * z).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        (nodes, weights)
    }

    /// `E[g(z)]` for `z ~ N(0, 1)` using the rule for variance `s`.
    pub fn integrate<F: Fn(f64) -> f64>(&self, s: f64, g: F) -> f64 {
        let (nodes, weights) = self.rule(s);
        nodes.iter().zip(&weights).map(|(&z, &w)| w * g(z)).sum()
    }
}

impl GaussianExpectation for DirectQuadrature {
    fn nonlinearity(&self) -> Nonlinearity {
        self.phi
    }

    fn pair(&self, k_xy: f64, k_xx: f64) -> Result<f64> {
        if !(k_xx >= 0.0) || !k_xx.is_finite() {
            return Err(Error::Input(format!("invalid variance {k_xx}")));
        }
        if k_xx == 0.0 {
            return Ok(self.phi.zero_moment());
        }
        let c = clamp_unit(k_xy / k_xx);
        if !(-1.0..=1.0).contains(&c) {
            return Err(Error::Input(format!(
                "|k_xy| <= k_xx violated (k_xy = {k_xy}, k_xx = {k_xx})"
            )));
        }
        if c == 1.0 {
            return self.diagonal(k_xx);
        }
        let sd = k_xx.sqrt();
        let r = (1.0 - c * c).sqrt();
        let phi = self.phi;
        let (nodes, weights) = self.rule(k_xx);
        let mut total = 0.0;
        for (&z1, &w1) in nodes.iter().zip(&weights) {
            let a = phi.apply(sd * z1);
            if a == 0.0 {
                continue;
            }
            let inner: f64 = nodes
                .iter()
                .zip(&weights)
                .map(|(&z2, &w2)| w2 * phi.apply(sd * (c * z1 + r * z2)))
                .sum();
            total += w1 * a * inner;
        }
        Ok(total)
    }

    fn diagonal(&self, k_xx: f64) -> Result<f64> {
        if !(k_xx >= 0.0) || !k_xx.is_finite() {
            return Err(Error::Input(format!("invalid variance {k_xx}")));
        }
        let sd = k_xx.sqrt();
        Ok(self.integrate(k_xx, |z| self.phi.apply(sd * z).powi(2)))
    }
}

/// Which evaluator to use for kernel matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatorKind {
    /// Bilinear lookup into a cached quadrature table.
    #[default]
    Table,
    /// Closed form for ReLU, [`DirectQuadrature`] otherwise. Exact but slow for tanh
    /// kernel matrices.
    Direct,
}

/// Any of the evaluators behind one type, chosen at run time.
#[derive(Debug, Clone)]
pub enum Evaluator {
    Table(LookupTable),
    AnalyticRelu,
    Direct(DirectQuadrature),
}

impl Evaluator {
    /// The table variant is loaded from, or built into, the cache directory.
    pub fn build(phi: Nonlinearity, kind: EvaluatorKind, grid: &GridSpec) -> Result<Self> {
        Ok(match kind {
            EvaluatorKind::Table => Evaluator::Table(crate::lookup::cache::load_or_build(phi, grid)?),
            EvaluatorKind::Direct => Self::direct(phi),
        })
    }

    /// The most accurate evaluator available for `phi`.
    pub fn direct(phi: Nonlinearity) -> Self {
        match phi {
            Nonlinearity::Relu => Evaluator::AnalyticRelu,
            _ => Evaluator::Direct(DirectQuadrature::new(phi)),
        }
    }

    fn inner(&self) -> &dyn GaussianExpectation {
        match self {
            Evaluator::Table(t) => t,
            Evaluator::AnalyticRelu => &AnalyticRelu,
            Evaluator::Direct(d) => d,
        }
    }
}

impl GaussianExpectation for Evaluator {
    fn nonlinearity(&self) -> Nonlinearity {
        self.inner().nonlinearity()
    }

    fn pair(&self, k_xy: f64, k_xx: f64) -> Result<f64> {
        match self {
            Evaluator::Table(t) => t.interpolate(k_xy, k_xx),
            Evaluator::AnalyticRelu => AnalyticRelu.pair(k_xy, k_xx),
            Evaluator::Direct(d) => d.pair(k_xy, k_xx),
        }
    }

    fn diagonal(&self, k_xx: f64) -> Result<f64> {
        self.inner().diagonal(k_xx)
    }

    fn max_variance(&self) -> f64 {
        self.inner().max_variance()
    }
}
