//! Exact GP posterior from a kernel matrix, plus accuracy and calibration metrics.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::KernelMatrix;
use crate::linalg::cholesky_with_escalation;

/// Failed factorizations multiply the noise by ten, at most this many times.
pub const MAX_NOISE_RETRIES: usize = 10;

/// Negative predictive variances down to this value are treated as round-off.
pub const VARIANCE_ROUNDOFF: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorPrediction {
    /// `n_test x d_out`.
    pub mean: DMatrix<f64>,
    /// Predictive variance per test point, shared by all output components.
    pub variance: DVector<f64>,
    /// Observation noise after escalation.
    pub noise_used: f64,
    /// Number of variances clamped up to zero.
    pub clamped: usize,
}

/// Posterior mean `K_*D (K_DD + noise I)^-1 t` and variance
/// `K_** - K_*D (K_DD + noise I)^-1 K_*D^T` from one Cholesky factorization, shared by all
/// target columns.
pub fn posterior(k: &KernelMatrix, targets: &DMatrix<f64>, noise: f64) -> Result<PosteriorPrediction> {
    if targets.nrows() != k.n_train() {
        return Err(Error::Input(format!(
            "targets have {} rows, training block has {}",
            targets.nrows(),
            k.n_train()
        )));
    }
    let chol = cholesky_with_escalation(k.train(), noise, MAX_NOISE_RETRIES)?;
    if chol.retries > 0 {
        log::warn!(
            "Cholesky failed; observation noise raised from {noise:e} to {:e}",
            chol.shift
        );
    }
    let alpha = chol.factor.solve(targets);
    let mean = k.cross() * alpha;

    let mut v = k.cross().transpose();
    chol.factor.l_dirty().solve_lower_triangular_mut(&mut v);
    let mut clamped = 0;
    let mut worst = 0.0f64;
    let variance = DVector::from_fn(k.n_test(), |i, _| {
        let raw = k.test_diag()[i] - v.column(i).norm_squared();
        if raw < 0.0 {
            clamped += 1;
            worst = worst.min(raw);
            0.0
        } else {
            raw
        }
    });
    if worst < -VARIANCE_ROUNDOFF {
        log::warn!("predictive variance as low as {worst:e} clamped to zero");
    }
    Ok(PosteriorPrediction {
        mean,
        variance,
        noise_used: chol.shift,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub mse: f64,
    pub accuracy: f64,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in row.into_iter().enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

/// Mean squared error over all entries and argmax accuracy.
pub fn evaluate(mean: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<Metrics> {
    if mean.shape() != targets.shape() {
        return Err(Error::Input(format!(
            "prediction shape {:?} does not match target shape {:?}",
            mean.shape(),
            targets.shape()
        )));
    }
    if mean.is_empty() {
        return Err(Error::Input("no predictions to evaluate".into()));
    }
    let mse = (mean - targets).norm_squared() / mean.len() as f64;
    let correct = (0..mean.nrows())
        .filter(|&i| {
            argmax(mean.row(i).iter().copied()) == argmax(targets.row(i).iter().copied())
        })
        .count();
    Ok(Metrics {
        mse,
        accuracy: correct as f64 / mean.nrows() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationBin {
    /// Mean predictive variance in the bin.
    pub predicted: f64,
    /// Mean per-entry squared error in the bin.
    pub realized: f64,
}

/// Sorts test points by predictive variance and averages consecutive groups of `bin_size`.
/// A final partial group forms its own bin.
pub fn calibration_bins(
    pred: &PosteriorPrediction,
    targets: &DMatrix<f64>,
    bin_size: usize,
) -> Result<Vec<CalibrationBin>> {
    if bin_size == 0 {
        return Err(Error::Parameter("bin_size >= 1 violated".into()));
    }
    if pred.mean.shape() != targets.shape() || pred.variance.len() != targets.nrows() {
        return Err(Error::Input("prediction and target shapes differ".into()));
    }
    let d_out = targets.ncols().max(1) as f64;
    let mut order: Vec<usize> = (0..targets.nrows()).collect();
    order.sort_by(|&a, &b| pred.variance[a].total_cmp(&pred.variance[b]));
    Ok(order
        .chunks(bin_size)
        .map(|chunk| {
            let n = chunk.len() as f64;
            let predicted = chunk.iter().map(|&i| pred.variance[i]).sum::<f64>() / n;
            let realized = chunk
                .iter()
                .map(|&i| (pred.mean.row(i) - targets.row(i)).norm_squared() / d_out)
                .sum::<f64>()
                / n;
            CalibrationBin {
                predicted,
                realized,
            }
        })
        .collect())
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Input(format!(
            "need two equal-length series of at least 2 values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numerical(
            "correlation undefined for a constant series".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Pearson correlation between the predicted and realized columns of calibration bins.
pub fn calibration_correlation(bins: &[CalibrationBin]) -> Result<f64> {
    let p: Vec<f64> = bins.iter().map(|b| b.predicted).collect();
    let r: Vec<f64> = bins.iter().map(|b| b.realized).collect();
    pearson(&p, &r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kernel(train: &[f64], cross: &[f64], diag: &[f64]) -> KernelMatrix {
        let n = train.len().isqrt();
        let m = diag.len();
        KernelMatrix::from_blocks(
            DMatrix::from_row_slice(n, n, train),
            DMatrix::from_row_slice(m, n, cross),
            DVector::from_column_slice(diag),
            1,
        )
        .unwrap()
    }

    #[test]
    fn two_point_hand_solution() {
        let k = kernel(&[2.0, 1.0, 1.0, 2.0], &[1.0, 1.0], &[2.0]);
        let t = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let p = posterior(&k, &t, 0.0).unwrap();
        assert!(p.mean[(0, 0)].abs() < 1e-15);
        assert!((p.variance[0] - (2.0 - 2.0 / 3.0)).abs() < 1e-14);
        assert_eq!(p.noise_used, 0.0);
    }

    #[test]
    fn interpolates_training_point() {
        let k = kernel(&[1.5], &[1.5], &[1.5]);
        let t = DMatrix::from_row_slice(1, 3, &[0.9, -0.1, -0.1]);
        let p = posterior(&k, &t, 1e-12).unwrap();
        for j in 0..3 {
            assert!((p.mean[(0, j)] - t[(0, j)]).abs() < 1e-11);
        }
        assert!(p.variance[0] < 1e-11);
    }

    #[test]
    fn uncorrelated_test_returns_prior() {
        let k = kernel(&[3.0, 0.0, 0.0, 3.0], &[0.0, 0.0], &[1.7]);
        let t = DMatrix::from_column_slice(2, 1, &[0.4, 0.2]);
        let p = posterior(&k, &t, 1e-10).unwrap();
        assert_eq!(p.mean[(0, 0)], 0.0);
        assert_eq!(p.variance[0], 1.7);
    }

    #[test]
    fn singular_block_escalates_noise() {
        let k = kernel(&[1.0, 1.0, 1.0, 1.0], &[1.0, 1.0], &[1.0]);
        let t = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let p = posterior(&k, &t, 0.0).unwrap();
        assert!(p.noise_used > 0.0);
        assert!((p.mean[(0, 0)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn metrics_on_encodings() {
        let mut targets = DMatrix::from_element(2, 10, -0.1);
        targets[(0, 3)] = 0.9;
        targets[(1, 7)] = 0.9;
        let exact = evaluate(&targets, &targets).unwrap();
        assert_eq!(exact.mse, 0.0);
        assert_eq!(exact.accuracy, 1.0);
        let zeros = evaluate(&DMatrix::zeros(2, 10), &targets).unwrap();
        assert!((zeros.mse - 0.09).abs() < 1e-15);
        // All-zero rows tie everywhere and resolve to class 0, which is never the label.
        assert_eq!(zeros.accuracy, 0.0);
        assert!(evaluate(&DMatrix::zeros(2, 9), &targets).is_err());
        assert_eq!(argmax([1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn calibration_bins_cases() {
        let targets = DMatrix::from_row_slice(4, 2, &[0.9, -0.1, -0.1, 0.9, 0.9, -0.1, -0.1, 0.9]);
        let pred = PosteriorPrediction {
            mean: DMatrix::from_row_slice(4, 2, &[0.5, 0.0, 0.0, 0.9, 0.9, 0.1, 0.2, 0.2]),
            variance: DVector::from_column_slice(&[0.4, 0.1, 0.3, 0.2]),
            noise_used: 0.0,
            clamped: 0,
        };
        let one = calibration_bins(&pred, &targets, 4).unwrap();
        assert_eq!(one.len(), 1);
        let mse = evaluate(&pred.mean, &targets).unwrap().mse;
        assert!((one[0].realized - mse).abs() < 1e-15);
        assert!((one[0].predicted - 0.25).abs() < 1e-15);
        let pairs = calibration_bins(&pred, &targets, 2).unwrap();
        // Sorted by variance: points 1, 3 then 2, 0.
        assert!((pairs[0].predicted - 0.15).abs() < 1e-15);
        assert!((pairs[1].predicted - 0.35).abs() < 1e-15);
        assert_eq!(calibration_bins(&pred, &targets, 3).unwrap().len(), 2);
        assert!(calibration_bins(&pred, &targets, 0).is_err());
    }

    #[test]
    fn pearson_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }
}
