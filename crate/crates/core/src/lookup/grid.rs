use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The five numbers that fully determine a quadrature grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Pre-activation samples per axis.
    pub n_g: usize,
    /// Variance grid points over `[0, s_max]`.
    pub n_v: usize,
    /// Correlation grid points strictly inside `(-1, 1)`.
    pub n_c: usize,
    pub u_max: f64,
    pub s_max: f64,
}

impl GridSpec {
    pub const DEFAULT_N_G: usize = 501;
    pub const DEFAULT_N_V: usize = 501;
    pub const DEFAULT_N_C: usize = 500;
    pub const DEFAULT_S_MAX: f64 = 100.0;

    /// Grid with `u_max = sqrt(2 s_max)`.
    pub fn new(n_g: usize, n_v: usize, n_c: usize, s_max: f64) -> Self {
        GridSpec {
            n_g,
            n_v,
            n_c,
            u_max: default_u_max(s_max),
            s_max,
        }
    }

    pub fn with_u_max(mut self, u_max: f64) -> Self {
        self.u_max = u_max;
        self
    }

    pub fn build(&self) -> Result<QuadratureGrid> {
        build_grid(self.n_g, self.n_v, self.n_c, self.u_max, self.s_max)
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::new(
            Self::DEFAULT_N_G,
            Self::DEFAULT_N_V,
            Self::DEFAULT_N_C,
            Self::DEFAULT_S_MAX,
        )
    }
}

pub fn default_u_max(s_max: f64) -> f64 {
    (2.0 * s_max).sqrt()
}

/// Fixed sampling grids for the pre-activation integral and the (variance, correlation)
/// table axes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    u: Vec<f64>,
    s: Vec<f64>,
    c: Vec<f64>,
    spec: GridSpec,
}

/// Builds linearly spaced grids. The `n_c` correlations sit at the centres of `n_c` equal
/// subintervals of `(-1, 1)`, so neither endpoint is on the grid.
pub fn build_grid(
    n_g: usize,
    n_v: usize,
    n_c: usize,
    u_max: f64,
    s_max: f64,
) -> Result<QuadratureGrid> {
    for (name, n) in [("n_g", n_g), ("n_v", n_v), ("n_c", n_c)] {
        if n < 2 {
            return Err(Error::Parameter(format!("{name} >= 2 violated ({name} = {n})")));
        }
    }
    for (name, v) in [("u_max", u_max), ("s_max", s_max)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::Parameter(format!(
                "{name} > 0 violated ({name} = {v})"
            )));
        }
    }
    if s_max >= u_max * u_max {
        return Err(Error::Parameter(format!(
            "s_max < u_max^2 violated (s_max = {s_max}, u_max^2 = {})",
            u_max * u_max
        )));
    }

    // Integer numerators keep u and c exactly antisymmetric under index reversal.
    let g_den = (n_g - 1) as f64;
    let u = (0..n_g)
        .map(|a| (2.0 * a as f64 - g_den) * (u_max / g_den))
        .collect();
    let s_step = s_max / (n_v - 1) as f64;
    let s = (0..n_v)
        .map(|i| if i == n_v - 1 { s_max } else { i as f64 * s_step })
        .collect();
    let c = (0..n_c)
        .map(|j| (2.0 * j as f64 + 1.0 - n_c as f64) / n_c as f64)
        .collect();

    Ok(QuadratureGrid {
        u,
        s,
        c,
        spec: GridSpec {
            n_g,
            n_v,
            n_c,
            u_max,
            s_max,
        },
    })
}

impl QuadratureGrid {
    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn u_max(&self) -> f64 {
        self.spec.u_max
    }

    pub fn s_max(&self) -> f64 {
        self.spec.s_max
    }

    pub fn u_step(&self) -> f64 {
        2.0 * self.spec.u_max / (self.spec.n_g - 1) as f64
    }

    pub fn s_step(&self) -> f64 {
        self.spec.s_max / (self.spec.n_v - 1) as f64
    }

    pub fn c_step(&self) -> f64 {
        2.0 / self.spec.n_c as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_grid_is_linear() {
        let g = build_grid(3, 2, 2, 2.0, 1.0).unwrap();
        assert_eq!(g.u(), &[-2.0, 0.0, 2.0]);
        assert_eq!(g.s(), &[0.0, 1.0]);
        assert_eq!(g.c(), &[-0.5, 0.5]);
    }

    #[test]
    fn rejects_variance_outside_sampling_box() {
        let err = build_grid(2, 2, 2, 1.0, 2.0).unwrap_err();
        assert!(err.to_string().contains("s_max < u_max^2"), "{err}");
        assert!(build_grid(2, 2, 2, 1.0, 1.0).is_err());
    }

    #[test]
    fn rejects_degenerate_counts_and_scales() {
        assert!(build_grid(1, 2, 2, 2.0, 1.0).is_err());
        assert!(build_grid(2, 1, 2, 2.0, 1.0).is_err());
        assert!(build_grid(2, 2, 1, 2.0, 1.0).is_err());
        assert!(build_grid(2, 2, 2, -2.0, 1.0).is_err());
        assert!(build_grid(2, 2, 2, 2.0, 0.0).is_err());
        assert!(build_grid(2, 2, 2, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn default_grid_invariants() {
        let spec = GridSpec::default();
        assert_eq!((spec.n_g, spec.n_v, spec.n_c), (501, 501, 500));
        assert!((spec.u_max - 10.0 * 2f64.sqrt()).abs() < 1e-12);
        let g = spec.build().unwrap();
        let u = g.u();
        assert_eq!(u.len(), 501);
        assert_eq!(u[250], 0.0);
        for a in 0..u.len() {
            assert_eq!(u[a], -u[u.len() - 1 - a]);
        }
        assert!(u.windows(2).all(|w| w[1] > w[0]));
        assert!(g.s().windows(2).all(|w| w[1] > w[0]));
        assert_eq!(g.s()[0], 0.0);
        assert_eq!(*g.s().last().unwrap(), 100.0);
        let c = g.c();
        assert!(c.windows(2).all(|w| w[1] > w[0]));
        assert!(c.iter().all(|v| v.abs() < 1.0));
        assert!((c[499] - 0.998).abs() < 1e-15);
        for j in 0..c.len() {
            assert_eq!(c[j], -c[c.len() - 1 - j]);
        }
    }
}
