use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::{analytic_relu_step, build_kernel_matrix, layer_variances, NetworkHyperparams};
use crate::error::{Error, Result};
use crate::expectation::GaussianExpectation;
use crate::linalg::cholesky_with_escalation;

/// Initial diagonal jitter for prior sampling; escalates tenfold on failure.
pub const PRIOR_JITTER: f64 = 1e-10;
const PRIOR_MAX_RETRIES: usize = 10;

/// `K^l(theta)` for two inputs at angle `theta` with `|x|^2 = |x'|^2 = d_in`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AngularProfile {
    pub thetas: Vec<f64>,
    /// `values[l][k]` is `K^l(thetas[k])` for `l = 0..=depth`.
    pub values: Vec<Vec<f64>>,
}

impl AngularProfile {
    pub fn depth(&self) -> usize {
        self.values.len() - 1
    }
}

/// `n` evenly spaced angles from 0 to pi inclusive (`n = 181` gives one-degree steps).
pub fn degree_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n)
            .map(|k| std::f64::consts::PI * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

fn check_thetas(thetas: &[f64]) -> Result<()> {
    if let Some(t) = thetas
        .iter()
        .find(|t| !(0.0..=std::f64::consts::PI).contains(*t))
    {
        return Err(Error::Input(format!("angle {t} outside [0, pi]")));
    }
    Ok(())
}

pub fn angular_profile<E: GaussianExpectation + ?Sized>(
    thetas: &[f64],
    hp: &NetworkHyperparams,
    expectation: &E,
) -> Result<AngularProfile> {
    hp.validate()?;
    check_thetas(thetas)?;
    let q = layer_variances(hp.sigma_b2 + hp.sigma_w2, hp, expectation)?;
    let mut values = Vec::with_capacity(hp.depth + 1);
    values.push(
        thetas
            .iter()
            .map(|t| hp.sigma_b2 + hp.sigma_w2 * t.cos())
            .collect::<Vec<_>>(),
    );
    for layer in 1..=hp.depth {
        let prev_q = q[layer - 1];
        let row = values[layer - 1]
            .iter()
            .map(|&k| {
                Ok(hp.sigma_b2
                    + hp.sigma_w2 * expectation.pair(k.clamp(-prev_q, prev_q), prev_q)?)
            })
            .collect::<Result<Vec<_>>>()?;
        values.push(row);
    }
    Ok(AngularProfile {
        thetas: thetas.to_vec(),
        values,
    })
}

/// The same profile from the closed-form ReLU step, iterated with per-point variances.
pub fn analytic_relu_profile(thetas: &[f64], hp: &NetworkHyperparams) -> Result<AngularProfile> {
    hp.validate()?;
    check_thetas(thetas)?;
    let mut q = hp.sigma_b2 + hp.sigma_w2;
    let mut values = vec![thetas
        .iter()
        .map(|t| hp.sigma_b2 + hp.sigma_w2 * t.cos())
        .collect::<Vec<_>>()];
    for layer in 1..=hp.depth {
        let row = values[layer - 1]
            .iter()
            .map(|&k| analytic_relu_step(k, q, q, hp))
            .collect::<Result<Vec<_>>>()?;
        q = analytic_relu_step(q, q, q, hp)?;
        values.push(row);
    }
    Ok(AngularProfile {
        thetas: thetas.to_vec(),
        values,
    })
}

/// Places angle `t` on the circle of radius `sqrt(2)` in the plane, so `|x|^2 = d_in = 2`.
pub fn circle_embedding(angles: &[f64]) -> DMatrix<f64> {
    let r = 2f64.sqrt();
    DMatrix::from_fn(angles.len(), 2, |i, j| {
        if j == 0 {
            r * angles[i].cos()
        } else {
            r * angles[i].sin()
        }
    })
}

/// Draws `n_draws` functions from the GP prior evaluated at the 1D inputs `angles`, embedded
/// with [`circle_embedding`]. Rows of the result are draws, columns are inputs.
pub fn sample_prior<E: GaussianExpectation + ?Sized>(
    angles: &[f64],
    hp: &NetworkHyperparams,
    expectation: &E,
    n_draws: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let n = angles.len();
    if n_draws == 0 || n == 0 {
        return Ok(DMatrix::zeros(n_draws, n));
    }
    let points = circle_embedding(angles);
    let k = build_kernel_matrix(&points, &DMatrix::zeros(0, 2), hp, expectation)?;
    let chol = cholesky_with_escalation(k.train(), PRIOR_JITTER, PRIOR_MAX_RETRIES)?;
    if chol.retries > 0 {
        log::info!("prior covariance needed jitter {:e}", chol.shift);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = DMatrix::from_fn(n, n_draws, |_, _| StandardNormal.sample(&mut rng));
    Ok((chol.factor.l() * noise).transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expectation::AnalyticRelu;
    use crate::nonlinearity::Nonlinearity;

    #[test]
    fn layer_zero_is_cosine() {
        let hp = NetworkHyperparams::new(3, 1.6, 0.1, Nonlinearity::Relu).unwrap();
        let thetas = degree_grid(181);
        assert_eq!(thetas.len(), 181);
        assert_eq!(thetas[180], std::f64::consts::PI);
        let p = angular_profile(&thetas, &hp, &AnalyticRelu).unwrap();
        assert_eq!(p.depth(), 3);
        for (k, t) in thetas.iter().enumerate() {
            assert!((p.values[0][k] - (0.1 + 1.6 * t.cos())).abs() < 1e-15);
        }
        let a = analytic_relu_profile(&thetas, &hp).unwrap();
        for l in 0..=3 {
            for k in 0..181 {
                assert!((a.values[l][k] - p.values[l][k]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn prior_shapes_and_determinism() {
        let hp = NetworkHyperparams::new(2, 1.8, 0.01, Nonlinearity::Relu).unwrap();
        let angles = [0.0, 0.5, 1.0];
        assert_eq!(sample_prior(&angles, &hp, &AnalyticRelu, 0, 1).unwrap().nrows(), 0);
        let a = sample_prior(&angles, &hp, &AnalyticRelu, 4, 9).unwrap();
        let b = sample_prior(&angles, &hp, &AnalyticRelu, 4, 9).unwrap();
        let c = sample_prior(&angles, &hp, &AnalyticRelu, 4, 10).unwrap();
        assert_eq!(a.shape(), (4, 3));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_out_of_range_angle() {
        let hp = NetworkHyperparams::new(1, 1.0, 0.0, Nonlinearity::Relu).unwrap();
        assert!(angular_profile(&[4.0], &hp, &AnalyticRelu).is_err());
    }
}
