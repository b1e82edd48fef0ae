//! Mean-field diagnostics of the kernel recurrence: the variance and correlation fixed
//! points, the slope of the correlation map, and accuracy sweeps over `(sigma_w2, sigma_b2)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Subset;
use crate::error::{Error, Result};
use crate::expectation::GaussianExpectation;
use crate::gp::{evaluate, posterior};
use crate::kernel::{build_kernel_matrix, NetworkHyperparams};
use crate::nonlinearity::Nonlinearity;

pub const MAX_ITERATIONS: usize = 10_000;
/// Variances above this count as divergence for evaluators without a range limit.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
/// Finite-difference step for the slope of the correlation map.
pub const SLOPE_STEP: f64 = 1e-5;
/// `|chi1 - 1|` below this is labelled critical and gets an infinite depth scale.
pub const CRITICAL_TOLERANCE: f64 = 1e-4;
/// `c*` within this of one counts as the ordered fixed point.
pub const ORDERED_TOLERANCE: f64 = 1e-6;
/// Smallest variance at which the correlation map is evaluated.
pub const VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Ordered,
    Chaotic,
    Bounded,
    Unbounded,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Ordered => "ordered",
            Phase::Chaotic => "chaotic",
            Phase::Bounded => "bounded",
            Phase::Unbounded => "unbounded",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceFixedPoint {
    /// Last iterate; the fixed point when `converged`.
    pub q: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The iteration left the evaluator's range or exceeded [`DIVERGENCE_LIMIT`].
    pub diverged: bool,
}

impl VarianceFixedPoint {
    pub fn q_star(&self) -> Option<f64> {
        (self.converged && !self.diverged).then_some(self.q)
    }
}

/// Iterates `q <- sigma_b2 + sigma_w2 * E[phi(u)^2]`, `u ~ N(0, q)`, from
/// `q0 = sigma_b2 + sigma_w2` until `|dq| < 1e-10 * max(q, 1)`.
pub fn variance_fixed_point<E: GaussianExpectation + ?Sized>(
    hp: &NetworkHyperparams,
    expectation: &E,
) -> Result<VarianceFixedPoint> {
    let limit = expectation.max_variance().min(DIVERGENCE_LIMIT);
    let mut q = hp.sigma_b2 + hp.sigma_w2;
    for iterations in 1..=MAX_ITERATIONS {
        if q > limit {
            return Ok(VarianceFixedPoint {
                q,
                iterations,
                converged: false,
                diverged: true,
            });
        }
        let next = hp.sigma_b2 + hp.sigma_w2 * expectation.diagonal(q)?;
        let done = (next - q).abs() < 1e-10 * next.max(1.0);
        q = next;
        if done {
            return Ok(VarianceFixedPoint {
                q,
                iterations,
                converged: true,
                diverged: q > limit,
            });
        }
    }
    Ok(VarianceFixedPoint {
        q,
        iterations: MAX_ITERATIONS,
        converged: false,
        diverged: false,
    })
}

/// `c <- (sigma_b2 + sigma_w2 * F(q c, q)) / q`.
pub fn correlation_map<E: GaussianExpectation + ?Sized>(
    c: f64,
    q: f64,
    hp: &NetworkHyperparams,
    expectation: &E,
) -> Result<f64> {
    let q = q.max(VARIANCE_FLOOR);
    Ok((hp.sigma_b2 + hp.sigma_w2 * expectation.pair(q * c, q)?) / q)
}

/// Slope of the correlation map at `c`; one-sided (second order) at `c = 1`, centred
/// elsewhere.
pub fn correlation_slope<E: GaussianExpectation + ?Sized>(
    c: f64,
    q: f64,
    hp: &NetworkHyperparams,
    expectation: &E,
) -> Result<f64> {
    let h = SLOPE_STEP;
    let m = |c: f64| correlation_map(c, q, hp, expectation);
    if c + h > 1.0 {
        Ok((3.0 * m(1.0)? - 4.0 * m(1.0 - h)? + m(1.0 - 2.0 * h)?) / (2.0 * h))
    } else {
        Ok((m(c + h)? - m(c - h)?) / (2.0 * h))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseDiagnostics {
    pub sigma_w2: f64,
    pub sigma_b2: f64,
    pub q_star: Option<f64>,
    pub c_star: Option<f64>,
    /// Slope of the correlation map at `c = 1`; the critical line is `chi1 = 1`.
    pub chi1: f64,
    /// Slope of the correlation map at `c*`.
    pub chi_c_star: Option<f64>,
    /// Depth scale `-1 / ln(chi)` using the slope at the stable fixed point.
    pub xi: f64,
    pub critical: bool,
    pub phase: Phase,
}

/// Runs both fixed-point iterations and labels the phase: ReLU by finiteness of `q*`,
/// other nonlinearities by whether `c* = 1`.
pub fn diagnose<E: GaussianExpectation + ?Sized>(
    hp: &NetworkHyperparams,
    expectation: &E,
) -> Result<PhaseDiagnostics> {
    let vfp = variance_fixed_point(hp, expectation)?;
    let relu = expectation.nonlinearity() == Nonlinearity::Relu;
    // Beyond the fixed point the last in-range iterate still fixes the slope for ReLU,
    // whose correlation map does not depend on q.
    let q_eval = vfp.q.min(expectation.max_variance());

    if hp.sigma_w2 == 0.0 {
        return Ok(PhaseDiagnostics {
            sigma_w2: 0.0,
            sigma_b2: hp.sigma_b2,
            q_star: vfp.q_star(),
            c_star: Some(1.0),
            chi1: 0.0,
            chi_c_star: Some(0.0),
            xi: 0.0,
            critical: false,
            phase: if relu { Phase::Bounded } else { Phase::Ordered },
        });
    }

    let chi1 = correlation_slope(1.0, q_eval, hp, expectation)?;
    let critical = (chi1 - 1.0).abs() < CRITICAL_TOLERANCE;

    let collapsed = vfp.q < VARIANCE_FLOOR;
    let c_star = if vfp.diverged {
        None
    } else if collapsed || chi1 < 1.0 {
        // Stable at c = 1: every pair of inputs converges to full correlation.
        Some(1.0)
    } else {
        Some(iterate_correlation(q_eval, hp, expectation)?)
    };
    let chi_c_star = match c_star {
        Some(c) if c >= 1.0 - ORDERED_TOLERANCE => Some(chi1),
        Some(c) => Some(correlation_slope(c, q_eval, hp, expectation)?),
        None => None,
    };
    let xi = match chi_c_star {
        _ if critical => f64::INFINITY,
        Some(chi) if chi > 0.0 && chi < 1.0 => -1.0 / chi.ln(),
        _ => f64::INFINITY,
    };
    let phase = if relu {
        if vfp.diverged {
            Phase::Unbounded
        } else {
            Phase::Bounded
        }
    } else if c_star.is_some_and(|c| c < 1.0 - ORDERED_TOLERANCE) {
        Phase::Chaotic
    } else {
        Phase::Ordered
    };
    Ok(PhaseDiagnostics {
        sigma_w2: hp.sigma_w2,
        sigma_b2: hp.sigma_b2,
        q_star: vfp.q_star(),
        c_star,
        chi1,
        chi_c_star,
        xi,
        critical,
        phase,
    })
}

/// Iterates the correlation map from `c = 0.5` until `|dc| < 1e-12`.
pub fn iterate_correlation<E: GaussianExpectation + ?Sized>(
    q: f64,
    hp: &NetworkHyperparams,
    expectation: &E,
) -> Result<f64> {
    let mut c = 0.5;
    for _ in 0..MAX_ITERATIONS {
        let next = correlation_map(c, q, hp, expectation)?.clamp(-1.0, 1.0);
        if (next - c).abs() < 1e-12 {
            return Ok(next);
        }
        c = next;
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CriticalPoint {
    pub sigma_b2: f64,
    /// `None` when `chi1 - 1` does not change sign over the bracket.
    pub sigma_w2: Option<f64>,
}

/// Bisects `chi1(sigma_w2) = 1` over `bracket` for each bias variance, to `1e-6` in `chi1`.
pub fn critical_line<E: GaussianExpectation + ?Sized>(
    sb2_grid: &[f64],
    bracket: (f64, f64),
    expectation: &E,
) -> Result<Vec<CriticalPoint>> {
    let (lo0, hi0) = bracket;
    if !(lo0 > 0.0 && hi0 > lo0) {
        return Err(Error::Parameter(format!(
            "bracket must satisfy 0 < lo < hi, got ({lo0}, {hi0})"
        )));
    }
    sb2_grid
        .iter()
        .map(|&sb2| {
            let chi = |sw2: f64| -> Result<f64> {
                let hp = NetworkHyperparams {
                    depth: 1,
                    sigma_w2: sw2,
                    sigma_b2: sb2,
                    phi: expectation.nonlinearity(),
                    noise: 0.0,
                };
                Ok(diagnose(&hp, expectation)?.chi1 - 1.0)
            };
            let (mut lo, mut hi) = (lo0, hi0);
            let (g_lo, g_hi) = (chi(lo)?, chi(hi)?);
            if g_lo.signum() == g_hi.signum() {
                log::warn!("no critical point in [{lo}, {hi}] at sigma_b2 = {sb2}");
                return Ok(CriticalPoint {
                    sigma_b2: sb2,
                    sigma_w2: None,
                });
            }
            let rising = g_hi > 0.0;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let g = chi(mid)?;
                if g.abs() < 1e-6 || hi - lo < 1e-12 {
                    return Ok(CriticalPoint {
                        sigma_b2: sb2,
                        sigma_w2: Some(mid),
                    });
                }
                if (g > 0.0) == rising {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Ok(CriticalPoint {
                sigma_b2: sb2,
                sigma_w2: Some(0.5 * (lo + hi)),
            })
        })
        .collect()
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub sigma_w2: f64,
    pub sigma_b2: f64,
    /// `None` when the cell failed; see `error`.
    pub accuracy: Option<f64>,
    pub mse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapSweep {
    pub phi: Nonlinearity,
    pub depth: usize,
    pub sw2_grid: Vec<f64>,
    pub sb2_grid: Vec<f64>,
    /// Row-major over `sw2_grid` then `sb2_grid`.
    pub cells: Vec<SweepCell>,
}

impl HeatmapSweep {
    /// Best accuracy; the first cell in row-major order wins ties.
    pub fn argmax(&self) -> Option<&SweepCell> {
        let mut best: Option<&SweepCell> = None;
        for cell in &self.cells {
            if let Some(a) = cell.accuracy {
                if best.is_none_or(|b| a > b.accuracy.unwrap()) {
                    best = Some(cell);
                }
            }
        }
        best
    }

    pub fn cell(&self, i_w: usize, i_b: usize) -> &SweepCell {
        &self.cells[i_w * self.sb2_grid.len() + i_b]
    }
}

/// Fits the GP on `train` and scores `eval` for every `(sigma_w2, sigma_b2)` cell, reusing
/// one expectation evaluator. Failed cells are recorded and the sweep continues.
#[allow(clippy::too_many_arguments)]
pub fn heatmap_sweep<E: GaussianExpectation + ?Sized>(
    train: &Subset,
    eval: &Subset,
    depth: usize,
    noise: f64,
    sw2_grid: &[f64],
    sb2_grid: &[f64],
    expectation: &E,
) -> Result<HeatmapSweep> {
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Input("sweep needs non-empty train and evaluation sets".into()));
    }
    let phi = expectation.nonlinearity();
    let jobs: Vec<(f64, f64)> = sw2_grid
        .iter()
        .flat_map(|&w| sb2_grid.iter().map(move |&b| (w, b)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(sigma_w2, sigma_b2)| {
            let run = || -> Result<(f64, f64)> {
                let hp = NetworkHyperparams::new(depth, sigma_w2, sigma_b2, phi)?
                    .with_noise(noise)?;
                let k = build_kernel_matrix(&train.inputs, &eval.inputs, &hp, expectation)?;
                let pred = posterior(&k, &train.targets, hp.noise)?;
                let m = evaluate(&pred.mean, &eval.targets)?;
                Ok((m.accuracy, m.mse))
            };
            match run() {
                Ok((accuracy, mse)) => SweepCell {
                    sigma_w2,
                    sigma_b2,
                    accuracy: Some(accuracy),
                    mse: Some(mse),
                    error: None,
                },
                Err(e) => {
                    log::info!("sweep cell ({sigma_w2}, {sigma_b2}) failed: {e}");
                    SweepCell {
                        sigma_w2,
                        sigma_b2,
                        accuracy: None,
                        mse: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    Ok(HeatmapSweep {
        phi,
        depth,
        sw2_grid: sw2_grid.to_vec(),
        sb2_grid: sb2_grid.to_vec(),
        cells,
    })
}

/// Phase diagnostics for every `(sigma_w2, sigma_b2)` pair, row-major over `sw2_grid`.
pub fn phase_grid<E: GaussianExpectation + ?Sized>(
    sw2_grid: &[f64],
    sb2_grid: &[f64],
    expectation: &E,
) -> Result<Vec<PhaseDiagnostics>> {
    let jobs: Vec<(f64, f64)> = sw2_grid
        .iter()
        .flat_map(|&w| sb2_grid.iter().map(move |&b| (w, b)))
        .collect();
    jobs.par_iter()
        .map(|&(sigma_w2, sigma_b2)| {
            let hp = NetworkHyperparams {
                depth: 1,
                sigma_w2,
                sigma_b2,
                phi: expectation.nonlinearity(),
                noise: 0.0,
            };
            diagnose(&hp, expectation)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expectation::{AnalyticRelu, DirectQuadrature};

    fn hp(phi: Nonlinearity, sw2: f64, sb2: f64) -> NetworkHyperparams {
        NetworkHyperparams {
            depth: 1,
            sigma_w2: sw2,
            sigma_b2: sb2,
            phi,
            noise: 0.0,
        }
    }

    #[test]
    fn relu_variance_closed_form() {
        let v = variance_fixed_point(&hp(Nonlinearity::Relu, 1.9, 0.1), &AnalyticRelu).unwrap();
        assert!(v.converged);
        assert!((v.q_star().unwrap() - 2.0).abs() < 1e-6 * 2.0);
        let d = variance_fixed_point(&hp(Nonlinearity::Relu, 2.0, 0.1), &AnalyticRelu).unwrap();
        assert!(d.diverged || !d.converged);
        let b = variance_fixed_point(&hp(Nonlinearity::Relu, 0.0, 0.3), &AnalyticRelu).unwrap();
        assert_eq!(b.q_star(), Some(0.3));
    }

    #[test]
    fn tanh_variance_collapses_without_bias() {
        let t = DirectQuadrature::new(Nonlinearity::Tanh);
        let v = variance_fixed_point(&hp(Nonlinearity::Tanh, 0.8, 0.0), &t).unwrap();
        assert!(v.q < 1e-8, "{v:?}");
    }

    #[test]
    fn relu_critical_at_two() {
        let d = diagnose(&hp(Nonlinearity::Relu, 2.0, 0.0), &AnalyticRelu).unwrap();
        assert!((d.chi1 - 1.0).abs() < 3e-3, "{d:?}");
        let below = diagnose(&hp(Nonlinearity::Relu, 1.5, 0.2), &AnalyticRelu).unwrap();
        assert_eq!(below.phase, Phase::Bounded);
        assert_eq!(below.c_star, Some(1.0));
        assert!(below.xi.is_finite() && below.xi > 0.0);
        let above = diagnose(&hp(Nonlinearity::Relu, 2.5, 0.2), &AnalyticRelu).unwrap();
        assert_eq!(above.phase, Phase::Unbounded);
    }

    #[test]
    fn tanh_phases() {
        let t = DirectQuadrature::new(Nonlinearity::Tanh);
        let ordered = diagnose(&hp(Nonlinearity::Tanh, 0.5, 0.05), &t).unwrap();
        assert_eq!(ordered.phase, Phase::Ordered);
        assert_eq!(ordered.c_star, Some(1.0));
        let chaotic = diagnose(&hp(Nonlinearity::Tanh, 4.0, 0.05), &t).unwrap();
        assert_eq!(chaotic.phase, Phase::Chaotic);
        assert!(chaotic.c_star.unwrap() < 1.0);
        assert!(chaotic.chi1 > 1.0);
        assert!(chaotic.chi_c_star.unwrap() < 1.0);
        let bias_only = diagnose(&hp(Nonlinearity::Tanh, 0.0, 0.5), &t).unwrap();
        assert_eq!(
            (bias_only.c_star, bias_only.chi1, bias_only.xi),
            (Some(1.0), 0.0, 0.0)
        );
    }

    #[test]
    fn linspace_endpoints() {
        let g = linspace(0.1, 5.0, 30);
        assert_eq!(g.len(), 30);
        assert_eq!(g[0], 0.1);
        assert!((g[29] - 5.0).abs() < 1e-15);
    }
}
