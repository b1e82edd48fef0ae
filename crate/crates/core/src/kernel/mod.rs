//! The NNGP kernel: base covariance, layer recurrence and the objects built from it.
//!
//! Every input is assumed rescaled to `|x|^2 = d_in`, so at each layer all points share a
//! single variance `q_l` and the recurrence only needs `(k_xy, q_l)`.

mod matrix;
mod profile;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expectation::{AnalyticRelu, GaussianExpectation};
use crate::nonlinearity::Nonlinearity;

pub use matrix::{build_kernel_matrix, KernelMatrix};
pub use profile::{
    analytic_relu_profile, angular_profile, circle_embedding, degree_grid, sample_prior,
    AngularProfile, PRIOR_JITTER,
};

/// Relative tolerance for the equal-variance precondition.
pub const EQUAL_VARIANCE_TOLERANCE: f64 = 1e-9;

/// Default observation noise added to the training block.
pub const DEFAULT_NOISE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkHyperparams {
    pub depth: usize,
    pub sigma_w2: f64,
    pub sigma_b2: f64,
    pub phi: Nonlinearity,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    DEFAULT_NOISE
}

impl NetworkHyperparams {
    pub fn new(depth: usize, sigma_w2: f64, sigma_b2: f64, phi: Nonlinearity) -> Result<Self> {
        let hp = NetworkHyperparams {
            depth,
            sigma_w2,
            sigma_b2,
            phi,
            noise: DEFAULT_NOISE,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn with_noise(mut self, noise: f64) -> Result<Self> {
        self.noise = noise;
        self.validate()?;
        Ok(self)
    }

    /// Weight variance zero is accepted (a bias-only network); both variances zero is not,
    /// since the kernel would vanish identically.
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Parameter("depth >= 1 violated".into()));
        }
        for (name, v) in [
            ("sigma_w2", self.sigma_w2),
            ("sigma_b2", self.sigma_b2),
            ("noise", self.noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Parameter(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.sigma_w2 == 0.0 && self.sigma_b2 == 0.0 {
            return Err(Error::Parameter(
                "sigma_w2 and sigma_b2 are both zero; the kernel vanishes".into(),
            ));
        }
        Ok(())
    }

    /// Short label such as `relu-20-1.45-0.28`.
    pub fn label(&self) -> String {
        format!(
            "{}-{}-{}-{}",
            self.phi, self.depth, self.sigma_w2, self.sigma_b2
        )
    }
}

/// `sigma_b2 + sigma_w2 * (x . x') / d_in`.
pub fn base_kernel(x: &[f64], y: &[f64], hp: &NetworkHyperparams) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Input(format!(
            "input dimensions differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Input("inputs must have dimension >= 1".into()));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok(hp.sigma_b2 + hp.sigma_w2 * dot / x.len() as f64)
}

/// One application of the layer recurrence, `sigma_b2 + sigma_w2 * F(k_xy; k_xx, k_yy)`.
pub fn step_kernel<E: GaussianExpectation + ?Sized>(
    k_xy: f64,
    k_xx: f64,
    k_yy: f64,
    hp: &NetworkHyperparams,
    expectation: &E,
) -> Result<f64> {
    let scale = k_xx.abs().max(k_yy.abs()).max(f64::MIN_POSITIVE);
    if (k_xx - k_yy).abs() > EQUAL_VARIANCE_TOLERANCE * scale {
        return Err(Error::Invariant(format!(
            "marginal variances differ (k_xx = {k_xx}, k_yy = {k_yy}); inputs must share one norm"
        )));
    }
    Ok(hp.sigma_b2 + hp.sigma_w2 * expectation.pair(k_xy, k_xx)?)
}

/// Closed-form ReLU step for arbitrary marginal variances.
pub fn analytic_relu_step(k_xy: f64, k_xx: f64, k_yy: f64, hp: &NetworkHyperparams) -> Result<f64> {
    Ok(hp.sigma_b2 + hp.sigma_w2 * AnalyticRelu::general(k_xy, k_xx, k_yy)?)
}

/// Shared per-layer variances `q_0..=q_L` starting from `q0`.
///
/// Fails with a range error naming the layer whose input variance leaves the evaluator's
/// domain.
pub fn layer_variances<E: GaussianExpectation + ?Sized>(
    q0: f64,
    hp: &NetworkHyperparams,
    expectation: &E,
) -> Result<Vec<f64>> {
    let mut q = Vec::with_capacity(hp.depth + 1);
    q.push(q0);
    for layer in 1..=hp.depth {
        let prev = q[layer - 1];
        if prev > expectation.max_variance() {
            return Err(Error::Range(format!(
                "variance {prev} entering layer {layer} exceeds the evaluator limit {}; \
                 rebuild the table with a larger s_max",
                expectation.max_variance()
            )));
        }
        let next = hp.sigma_b2 + hp.sigma_w2 * expectation.diagonal(prev)?;
        if !next.is_finite() {
            return Err(Error::Numerical(format!("non-finite variance at layer {layer}")));
        }
        q.push(next);
    }
    Ok(q)
}

/// Runs a base covariance through layers `1..=L` given the shared variances from
/// [`layer_variances`]. Covariances are clamped into `[-q, q]` before each step.
pub(crate) fn propagate<E: GaussianExpectation + ?Sized>(
    k0: f64,
    q: &[f64],
    hp: &NetworkHyperparams,
    expectation: &E,
) -> Result<f64> {
    let mut k = k0;
    for &prev in &q[..q.len() - 1] {
        k = hp.sigma_b2 + hp.sigma_w2 * expectation.pair(k.clamp(-prev, prev), prev)?;
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expectation::DirectQuadrature;
    use std::f64::consts::PI;

    fn hp(phi: Nonlinearity, sw2: f64, sb2: f64) -> NetworkHyperparams {
        NetworkHyperparams::new(1, sw2, sb2, phi).unwrap()
    }

    #[test]
    fn base_kernel_cases() {
        let p = hp(Nonlinearity::Relu, 1.6, 0.1);
        let x = [1.0, -1.0, 1.0, 1.0];
        assert!((base_kernel(&x, &x, &p).unwrap() - 1.7).abs() < 1e-15);
        let y = [1.0, 1.0, 0.0, 0.0];
        assert_eq!(base_kernel(&x, &y, &p).unwrap(), 0.1);
        let bias_only = hp(Nonlinearity::Relu, 0.0, 0.4);
        assert_eq!(base_kernel(&x, &[3.0, 2.0, 1.0, 0.5], &bias_only).unwrap(), 0.4);
        assert!(matches!(
            base_kernel(&x, &[1.0], &p),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn step_kernel_cases() {
        let p = hp(Nonlinearity::Relu, 1.3, 0.2);
        let q = 2.5;
        let same = step_kernel(q, q, q, &p, &AnalyticRelu).unwrap();
        assert!((same - (0.2 + 1.3 * q / 2.0)).abs() < 1e-14);
        let ortho = step_kernel(0.0, q, q, &p, &AnalyticRelu).unwrap();
        assert!((ortho - (0.2 + 1.3 * q / (2.0 * PI))).abs() < 1e-14);
        let t = hp(Nonlinearity::Tanh, 1.0, 0.3);
        let zero = step_kernel(0.0, 0.0, 0.0, &t, &DirectQuadrature::new(Nonlinearity::Tanh));
        assert_eq!(zero.unwrap(), 0.3);
        assert!(matches!(
            step_kernel(0.1, 1.0, 1.1, &p, &AnalyticRelu),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn analytic_step_cases() {
        let p = hp(Nonlinearity::Relu, 1.0, 0.0);
        assert!((analytic_relu_step(4.0, 4.0, 4.0, &p).unwrap() - 2.0).abs() < 1e-15);
        assert!((analytic_relu_step(0.0, 4.0, 4.0, &p).unwrap() - 4.0 / (2.0 * PI)).abs() < 1e-15);
        assert!((analytic_relu_step(0.0, 4.0, 4.0, &p).unwrap() - 0.6366).abs() < 1e-4);
        assert!(analytic_relu_step(-1.0, 1.0, 1.0, &p).unwrap().abs() < 1e-15);
        assert!(matches!(
            analytic_relu_step(0.0, 0.0, 1.0, &p),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn hyperparameter_validation() {
        assert!(NetworkHyperparams::new(0, 1.0, 0.1, Nonlinearity::Relu).is_err());
        assert!(NetworkHyperparams::new(2, -1.0, 0.1, Nonlinearity::Relu).is_err());
        assert!(NetworkHyperparams::new(2, 1.0, f64::NAN, Nonlinearity::Relu).is_err());
        assert!(NetworkHyperparams::new(2, 0.0, 0.0, Nonlinearity::Relu).is_err());
        assert!(NetworkHyperparams::new(2, 0.0, 0.5, Nonlinearity::Relu).is_ok());
        let p = NetworkHyperparams::new(20, 1.45, 0.28, Nonlinearity::Relu).unwrap();
        assert_eq!(p.label(), "relu-20-1.45-0.28");
        assert!(p.with_noise(-1.0).is_err());
    }

    #[test]
    fn variance_sequence_reports_layer() {
        let mut p = hp(Nonlinearity::Relu, 4.0, 0.0);
        p.depth = 6;
        let grid = crate::lookup::build_grid(21, 11, 10, 15.0, 10.0).unwrap();
        let table = crate::lookup::populate(&grid, Nonlinearity::Relu).unwrap();
        // q doubles each layer: 1, 2, 4, 8, 16 -> the step into layer 5 is out of range.
        let err = layer_variances(1.0, &p, &table).unwrap_err();
        assert!(matches!(err, Error::Range(_)));
        assert!(err.to_string().contains("layer 5"), "{err}");
        let q = layer_variances(1.0, &p, &AnalyticRelu).unwrap();
        assert_eq!(q, vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0]);
    }
}
