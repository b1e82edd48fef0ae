//! Monte-Carlo check of the infinite-width limit: sample finite random networks and compare
//! their output covariance with the NNGP kernel.
//!
//! Two samplers are provided. [`Sampler::Explicit`] draws every weight matrix. The default
//! [`Sampler::Marginal`] uses the fact that, given the post-activations `Phi` (points x
//! units) of one layer, each unit of the next layer is an independent Gaussian vector over
//! the points with covariance `sigma_b2 * 1 1^T + sigma_w2 / N * Phi Phi^T`. Drawing those
//! vectors directly has the same joint law across layers and costs `O(N P)` per layer
//! instead of `O(N^2)`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::NetworkHyperparams;
use crate::nonlinearity::Nonlinearity;

pub const DEFAULT_SHARDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    #[default]
    Marginal,
    Explicit,
}

/// How a single network's contribution to the kernel estimate is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// `z^L_1(x) z^L_1(x')` for one output unit.
    #[default]
    OutputProduct,
    /// `sigma_b2 + sigma_w2 / N_L * sum_n phi(z_n(x)) phi(z_n(x'))`, the conditional
    /// expectation of the output product given the last hidden layer. Same mean, lower
    /// variance.
    Conditional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelEstimate {
    pub mean: DMatrix<f64>,
    /// Jackknife standard error over shards; NaN with fewer than two shards.
    pub std_error: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormalityStats {
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteNetSample {
    pub widths: Vec<usize>,
    pub n_networks: usize,
    pub seed: u64,
    pub sampler: Sampler,
    pub output_product: KernelEstimate,
    pub conditional: KernelEstimate,
    /// Moments of the sampled output `z^L_1` at each point.
    pub normality: Vec<NormalityStats>,
}

impl FiniteNetSample {
    pub fn estimate(&self, estimator: Estimator) -> &KernelEstimate {
        match estimator {
            Estimator::OutputProduct => &self.output_product,
            Estimator::Conditional => &self.conditional,
        }
    }
}

/// Lower factor `F` with `F F^T = cov`: Cholesky when it succeeds, otherwise the
/// eigen-decomposition with negative eigenvalues clipped to zero (covariances are
/// singular whenever a layer is narrower than the number of points).
pub fn psd_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = Cholesky::new(cov.clone()) {
        return ch.unpack();
    }
    let eig = SymmetricEigen::new(cov.clone());
    let mut f = eig.eigenvectors;
    for (k, mut col) in f.column_iter_mut().enumerate() {
        col *= eig.eigenvalues[k].max(0.0).sqrt();
    }
    f
}

fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn activate(z: &mut DMatrix<f64>, phi: Nonlinearity, layer: usize) -> Result<()> {
    for v in z.iter_mut() {
        *v = phi.apply(*v);
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite activation at layer {layer}"
            )));
        }
    }
    Ok(())
}

/// `sigma_b2 * 1 1^T + sigma_w2 / n * Phi Phi^T`.
fn next_covariance(phi_out: &DMatrix<f64>, hp: &NetworkHyperparams) -> DMatrix<f64> {
    let n = phi_out.ncols() as f64;
    let mut cov = phi_out * phi_out.transpose() * (hp.sigma_w2 / n);
    cov.add_scalar_mut(hp.sigma_b2);
    cov
}

/// One network: returns the last hidden post-activations (points x units) and the output.
fn sample_network(
    points: &DMatrix<f64>,
    base_factor: &DMatrix<f64>,
    hp: &NetworkHyperparams,
    widths: &[usize],
    sampler: Sampler,
    rng: &mut ChaCha8Rng,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let p = points.nrows();
    let mut post = match sampler {
        Sampler::Marginal => base_factor * standard_normal(rng, p, widths[0]),
        Sampler::Explicit => {
            let d = points.ncols() as f64;
            let w = standard_normal(rng, widths[0], points.ncols()) * (hp.sigma_w2 / d).sqrt();
            let b = standard_normal(rng, 1, widths[0]) * hp.sigma_b2.sqrt();
            let mut z = points * w.transpose();
            for mut row in z.row_iter_mut() {
                row += &b;
            }
            z
        }
    };
    activate(&mut post, hp.phi, 1)?;
    for (layer, &n) in widths.iter().enumerate().skip(1) {
        post = match sampler {
            Sampler::Marginal => psd_factor(&next_covariance(&post, hp)) * standard_normal(rng, p, n),
            Sampler::Explicit => {
                let fan_in = post.ncols() as f64;
                let w = standard_normal(rng, n, post.ncols()) * (hp.sigma_w2 / fan_in).sqrt();
                let b = standard_normal(rng, 1, n) * hp.sigma_b2.sqrt();
                let mut z = &post * w.transpose();
                for mut row in z.row_iter_mut() {
                    row += &b;
                }
                z
            }
        };
        activate(&mut post, hp.phi, layer + 1)?;
    }
    let output = match sampler {
        Sampler::Marginal => psd_factor(&next_covariance(&post, hp)) * standard_normal(rng, p, 1),
        Sampler::Explicit => {
            let fan_in = post.ncols() as f64;
            let w = standard_normal(rng, post.ncols(), 1) * (hp.sigma_w2 / fan_in).sqrt();
            let b: f64 = rng.sample::<f64, _>(StandardNormal) * hp.sigma_b2.sqrt();
            (&post * w).add_scalar(b)
        }
    };
    Ok((post, output.column(0).into_owned()))
}

struct ShardSums {
    count: usize,
    output_product: DMatrix<f64>,
    conditional: DMatrix<f64>,
    /// `moments[(p, k)] = sum z_p^(k+1)` for `k = 0..4`.
    moments: DMatrix<f64>,
}

fn run_shard(
    points: &DMatrix<f64>,
    base_factor: &DMatrix<f64>,
    hp: &NetworkHyperparams,
    widths: &[usize],
    sampler: Sampler,
    seed: u64,
    shard: usize,
    count: usize,
) -> Result<ShardSums> {
    let p = points.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shard as u64);
    let mut sums = ShardSums {
        count,
        output_product: DMatrix::zeros(p, p),
        conditional: DMatrix::zeros(p, p),
        moments: DMatrix::zeros(p, 4),
    };
    for _ in 0..count {
        let (post, z) = sample_network(points, base_factor, hp, widths, sampler, &mut rng)?;
        sums.output_product += &z * z.transpose();
        sums.conditional += next_covariance(&post, hp);
        for (i, &v) in z.iter().enumerate() {
            let mut power = v;
            for k in 0..4 {
                sums.moments[(i, k)] += power;
                power *= v;
            }
        }
    }
    Ok(sums)
}

/// Mean and leave-one-shard-out jackknife standard error of per-network estimates.
fn jackknife(shards: &[(usize, &DMatrix<f64>)]) -> KernelEstimate {
    let total: usize = shards.iter().map(|s| s.0).sum();
    let (rows, cols) = shards[0].1.shape();
    let mut sum = DMatrix::zeros(rows, cols);
    for (_, s) in shards {
        sum += *s;
    }
    let mean = &sum / total as f64;
    let g = shards.iter().filter(|s| s.0 > 0).count();
    if g < 2 {
        return KernelEstimate {
            mean,
            std_error: DMatrix::from_element(rows, cols, f64::NAN),
        };
    }
    let leave_out: Vec<DMatrix<f64>> = shards
        .iter()
        .filter(|s| s.0 > 0)
        .map(|(n, s)| (&sum - *s) / (total - n) as f64)
        .collect();
    let mut centre = DMatrix::zeros(rows, cols);
    for l in &leave_out {
        centre += l;
    }
    centre /= g as f64;
    let mut var = DMatrix::zeros(rows, cols);
    for l in &leave_out {
        var += (l - &centre).map(|v| v * v);
    }
    var *= (g - 1) as f64 / g as f64;
    KernelEstimate {
        mean,
        std_error: var.map(f64::sqrt),
    }
}

/// Samples `n_networks` random networks with hidden widths `widths` (one per layer, or a
/// single width used for every layer) and estimates the output covariance over `points`
/// (rows). Networks are split into [`DEFAULT_SHARDS`] shards, each with its own RNG stream
/// derived from `seed`, so results do not depend on the thread count.
pub fn sample_empirical_kernel(
    points: &DMatrix<f64>,
    hp: &NetworkHyperparams,
    widths: &[usize],
    n_networks: usize,
    seed: u64,
    sampler: Sampler,
) -> Result<FiniteNetSample> {
    hp.validate()?;
    let widths: Vec<usize> = match widths.len() {
        1 => vec![widths[0]; hp.depth],
        n if n == hp.depth => widths.to_vec(),
        n => {
            return Err(Error::Parameter(format!(
                "got {n} widths for depth {}",
                hp.depth
            )))
        }
    };
    if widths.contains(&0) {
        return Err(Error::Parameter("widths >= 1 violated".into()));
    }
    if n_networks == 0 {
        return Err(Error::Parameter("network count >= 1 violated".into()));
    }
    if points.nrows() == 0 || points.ncols() == 0 {
        return Err(Error::Input("need at least one point of dimension >= 1".into()));
    }

    let d = points.ncols() as f64;
    let mut base = points * points.transpose() * (hp.sigma_w2 / d);
    base.add_scalar_mut(hp.sigma_b2);
    let base_factor = psd_factor(&base);

    let shards = DEFAULT_SHARDS.min(n_networks);
    let counts: Vec<usize> = (0..shards)
        .map(|s| n_networks / shards + usize::from(s < n_networks % shards))
        .collect();
    let sums = counts
        .par_iter()
        .enumerate()
        .map(|(s, &count)| run_shard(points, &base_factor, hp, &widths, sampler, seed, s, count))
        .collect::<Result<Vec<_>>>()?;

    let op: Vec<(usize, &DMatrix<f64>)> = sums.iter().map(|s| (s.count, &s.output_product)).collect();
    let cond: Vec<(usize, &DMatrix<f64>)> = sums.iter().map(|s| (s.count, &s.conditional)).collect();
    let mut moments = DMatrix::<f64>::zeros(points.nrows(), 4);
    for s in &sums {
        moments += &s.moments;
    }
    moments /= n_networks as f64;
    let normality = moments
        .row_iter()
        .map(|m| {
            let (m1, m2, m3, m4) = (m[0], m[1], m[2], m[3]);
            let var = m2 - m1 * m1;
            let c3 = m3 - 3.0 * m1 * m2 + 2.0 * m1.powi(3);
            let c4 = m4 - 4.0 * m1 * m3 + 6.0 * m1 * m1 * m2 - 3.0 * m1.powi(4);
            NormalityStats {
                skewness: c3 / var.powf(1.5),
                excess_kurtosis: c4 / (var * var) - 3.0,
            }
        })
        .collect();

    Ok(FiniteNetSample {
        widths,
        n_networks,
        seed,
        sampler,
        output_product: jackknife(&op),
        conditional: jackknife(&cond),
        normality,
    })
}

/// Skewness and excess kurtosis of the sampled outputs at each point.
pub fn gaussianity_check(
    points: &DMatrix<f64>,
    hp: &NetworkHyperparams,
    width: usize,
    n_networks: usize,
    seed: u64,
) -> Result<Vec<NormalityStats>> {
    Ok(sample_empirical_kernel(points, hp, &[width], n_networks, seed, Sampler::Marginal)?.normality)
}

/// Largest absolute entrywise difference.
pub fn max_abs_deviation(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points() -> DMatrix<f64> {
        let s = 2f64.sqrt();
        DMatrix::from_row_slice(3, 2, &[s, 0.0, 0.0, s, -1.0, 1.0])
    }

    #[test]
    fn psd_factor_handles_singular() {
        let v = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, -1.0]);
        let cov = &v * v.transpose();
        let f = psd_factor(&cov);
        assert!((&f * f.transpose() - &cov).amax() < 1e-12);
    }

    #[test]
    fn seed_determinism() {
        let hp = NetworkHyperparams::new(2, 1.5, 0.1, Nonlinearity::Tanh).unwrap();
        let a = sample_empirical_kernel(&points(), &hp, &[8], 50, 3, Sampler::Marginal).unwrap();
        let b = sample_empirical_kernel(&points(), &hp, &[8], 50, 3, Sampler::Marginal).unwrap();
        let c = sample_empirical_kernel(&points(), &hp, &[8], 50, 4, Sampler::Marginal).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.output_product.mean, c.output_product.mean);
        let m = &a.output_product.mean;
        assert_eq!(m, &m.transpose());
        assert!((0..3).all(|i| m[(i, i)] > 0.0));
    }

    #[test]
    fn bias_only_network() {
        let hp = NetworkHyperparams::new(2, 0.0, 0.4, Nonlinearity::Relu).unwrap();
        let s = sample_empirical_kernel(&points(), &hp, &[4], 20_000, 1, Sampler::Marginal).unwrap();
        assert!(s.conditional.mean.iter().all(|&v| (v - 0.4).abs() < 1e-12));
        let op = &s.output_product;
        for (m, se) in op.mean.iter().zip(op.std_error.iter()) {
            assert!((m - 0.4).abs() < 5.0 * se, "{m} +- {se}");
        }
        // Outputs are pure Gaussian bias draws, identical at every point.
        for st in &s.normality {
            assert!(st.excess_kurtosis.abs() < 0.2);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let hp = NetworkHyperparams::new(2, 1.0, 0.1, Nonlinearity::Relu).unwrap();
        assert!(sample_empirical_kernel(&points(), &hp, &[4, 4, 4], 10, 0, Sampler::Marginal).is_err());
        assert!(sample_empirical_kernel(&points(), &hp, &[0], 10, 0, Sampler::Marginal).is_err());
        assert!(sample_empirical_kernel(&points(), &hp, &[4], 0, 0, Sampler::Marginal).is_err());
    }

    #[test]
    fn few_networks_use_fewer_shards() {
        let hp = NetworkHyperparams::new(1, 1.0, 0.1, Nonlinearity::Relu).unwrap();
        let s = sample_empirical_kernel(&points(), &hp, &[4], 1, 0, Sampler::Explicit).unwrap();
        assert!(s.output_product.std_error[(0, 0)].is_nan());
        let s = sample_empirical_kernel(&points(), &hp, &[4], 3, 0, Sampler::Explicit).unwrap();
        assert!(s.output_product.std_error[(0, 0)].is_finite());
    }
}
