use rayon::prelude::*;

use super::grid::QuadratureGrid;
use crate::error::{Error, Result};
use crate::nonlinearity::Nonlinearity;

/// Quadrature weights below `exp(-LOG_CUTOFF)` of the largest weight are dropped.
/// Their total contribution is far below one ulp of the normalizer.
const LOG_CUTOFF: f64 = 80.0;

/// Relative slack on the Cauchy-Schwarz check `|k_xy| <= k_xx`.
const CS_TOLERANCE: f64 = 1e-9;

/// Precomputed values of `E[phi(u) phi(v)]` for a zero-mean bivariate Gaussian with equal
/// marginal variance `s` and correlation `c`.
///
/// `f2d` is row-major over `(s_i, c_j)`. `f1d` holds the `c = 1` column (`E[phi(u)^2]`),
/// computed as its own 1D quadrature because the 2D Gaussian is singular there.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    grid: QuadratureGrid,
    phi: Nonlinearity,
    f1d: Vec<f64>,
    f2d: Vec<f64>,
}

impl LookupTable {
    pub(crate) fn from_parts(
        grid: QuadratureGrid,
        phi: Nonlinearity,
        f1d: Vec<f64>,
        f2d: Vec<f64>,
    ) -> Result<Self> {
        let spec = grid.spec();
        if f1d.len() != spec.n_v || f2d.len() != spec.n_v * spec.n_c {
            return Err(Error::Input(format!(
                "table payload has {} + {} values, grid needs {} + {}",
                f1d.len(),
                f2d.len(),
                spec.n_v,
                spec.n_v * spec.n_c
            )));
        }
        Ok(LookupTable {
            grid,
            phi,
            f1d,
            f2d,
        })
    }

    pub fn grid(&self) -> &QuadratureGrid {
        &self.grid
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.phi
    }

    pub fn f1d(&self) -> &[f64] {
        &self.f1d
    }

    pub fn f2d(&self) -> &[f64] {
        &self.f2d
    }

    #[inline]
    pub fn f2d_at(&self, i: usize, j: usize) -> f64 {
        self.f2d[i * self.grid.spec().n_c + j]
    }

    pub fn s_max(&self) -> f64 {
        self.grid.s_max()
    }

    /// `E[phi(u)^2]` for `u ~ N(0, k_xx)` by linear interpolation of the diagonal table.
    pub fn diagonal(&self, k_xx: f64) -> Result<f64> {
        let (i, w) = self.variance_cell(k_xx)?;
        Ok((1.0 - w) * self.f1d[i] + w * self.f1d[i + 1])
    }

    /// Bilinear interpolation of `F(k_xy; k_xx, k_xx)` at `s = k_xx`, `c = k_xy / k_xx`.
    ///
    /// The `c = 1` column is the diagonal table, so correlations above the last interior
    /// grid point interpolate linearly toward it. Below the first interior point, odd
    /// nonlinearities use `F(s, -1) = -F(s, 1)`; others clamp to the first column.
    pub fn interpolate(&self, k_xy: f64, k_xx: f64) -> Result<f64> {
        let (i, w) = self.variance_cell(k_xx)?;
        if k_xx == 0.0 {
            if k_xy != 0.0 {
                return Err(Error::Input(format!(
                    "covariance {k_xy} with zero variance violates |k_xy| <= k_xx"
                )));
            }
            return Ok(self.phi.zero_moment());
        }
        if !k_xy.is_finite() || k_xy.abs() > k_xx * (1.0 + CS_TOLERANCE) {
            return Err(Error::Input(format!(
                "|k_xy| <= k_xx violated (k_xy = {k_xy}, k_xx = {k_xx})"
            )));
        }
        let c = (k_xy / k_xx).clamp(-1.0, 1.0);
        let lo = self.row_at(i, c);
        if w == 0.0 {
            return Ok(lo);
        }
        Ok((1.0 - w) * lo + w * self.row_at(i + 1, c))
    }

    fn variance_cell(&self, k_xx: f64) -> Result<(usize, f64)> {
        let s_max = self.grid.s_max();
        if !(k_xx >= 0.0) {
            return Err(Error::Input(format!(
                "variance must be non-negative and finite, got {k_xx}"
            )));
        }
        if k_xx > s_max {
            return Err(Error::Range(format!(
                "variance {k_xx} exceeds table s_max = {s_max}; rebuild the table with a larger s_max"
            )));
        }
        let n_v = self.grid.spec().n_v;
        let t = k_xx / self.grid.s_step();
        let i = (t.floor() as usize).min(n_v - 2);
        Ok((i, (t - i as f64).clamp(0.0, 1.0)))
    }

    fn row_at(&self, i: usize, c: f64) -> f64 {
        let n_c = self.grid.spec().n_c;
        let cs = self.grid.c();
        let row = &self.f2d[i * n_c..(i + 1) * n_c];
        let (c_first, c_last) = (cs[0], cs[n_c - 1]);
        if c >= c_last {
            let w = (c - c_last) / (1.0 - c_last);
            return (1.0 - w) * row[n_c - 1] + w * self.f1d[i];
        }
        if c <= c_first {
            if self.phi.is_odd() {
                let w = (c_first - c) / (c_first + 1.0);
                return (1.0 - w) * row[0] - w * self.f1d[i];
            }
            return row[0];
        }
        let t = (c - c_first) / self.grid.c_step();
        let j = (t.floor() as usize).min(n_c - 2);
        let w = t - j as f64;
        (1.0 - w) * row[j] + w * row[j + 1]
    }
}

/// Fills the lookup table for `phi` on `grid` with the ratio-of-sums Gaussian quadrature
///
/// ```text
/// F_ij = sum_ab phi(u_a) phi(u_b) w_ab / sum_ab w_ab,
/// w_ab = exp(-(u_a^2 + u_b^2 - 2 c_j u_a u_b) / (2 s_i (1 - c_j^2)))
/// ```
///
/// and the analogous 1D sum for the `c = 1` column. Row `s = 0` is set to `phi(0)^2`.
pub fn populate(grid: &QuadratureGrid, phi: Nonlinearity) -> Result<LookupTable> {
    let u = grid.u();
    let phi_u: Vec<f64> = u.iter().map(|&x| phi.apply(x)).collect();
    if let Some(a) = phi_u.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "{phi}({}) is not finite at grid point u[{a}]",
            u[a]
        )));
    }
    let zero = phi.zero_moment();
    if !zero.is_finite() {
        return Err(Error::Numerical(format!("{phi}(0)^2 is not finite")));
    }

    let spec = grid.spec();
    let rows: Vec<(f64, Vec<f64>)> = grid
        .s()
        .par_iter()
        .map(|&s| {
            if s == 0.0 {
                (zero, vec![zero; spec.n_c])
            } else {
                (diagonal_quadrature(u, &phi_u, s), correlation_row(grid, &phi_u, s))
            }
        })
        .collect();

    let mut f1d = Vec::with_capacity(spec.n_v);
    let mut f2d = Vec::with_capacity(spec.n_v * spec.n_c);
    for (i, (d, row)) in rows.into_iter().enumerate() {
        if !d.is_finite() || row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite quadrature result at s[{i}] = {}",
                grid.s()[i]
            )));
        }
        f1d.push(d);
        f2d.extend(row);
    }
    LookupTable::from_parts(grid.clone(), phi, f1d, f2d)
}

fn diagonal_quadrature(u: &[f64], phi_u: &[f64], s: f64) -> f64 {
    let u_min2 = u.iter().map(|x| x * x).fold(f64::INFINITY, f64::min);
    let (mut num, mut den) = (0.0, 0.0);
    for (x, p) in u.iter().zip(phi_u) {
        let w = (-(x * x - u_min2) / (2.0 * s)).exp();
        num += p * p * w;
        den += w;
    }
    num / den
}

/// One variance row of the 2D table.
///
/// For a fixed pre-activation `u_a` the weights along `b` form a discretized Gaussian in
/// `u_b` centred at `c u_a` with variance `s (1 - c^2)`, so consecutive ratios are
/// geometric: each step costs two multiplications instead of an `exp`. Walking outward
/// from the peak keeps every running value below one. The grid is symmetric under
/// `u -> -u`, so row `a` also yields row `-a`, and the pass at `+c` also yields `-c`.
fn correlation_row(grid: &QuadratureGrid, phi_u: &[f64], s: f64) -> Vec<f64> {
    let u = grid.u();
    let cs = grid.c();
    let n_g = u.len();
    let n_c = cs.len();
    let h = grid.u_step();
    let u_max = grid.u_max();
    let u_min2 = u.iter().map(|x| x * x).fold(f64::INFINITY, f64::min);

    let mut row = vec![0.0; n_c];
    // Mirror pairs (j, n_c - 1 - j); j starts at the non-negative half.
    for j in n_c / 2..n_c {
        let c = cs[j];
        let var = s * (1.0 - c * c);
        let g = (-h * h / var).exp();
        let (mut num_pos, mut num_neg, mut den) = (0.0, 0.0, 0.0);

        for a in n_g / 2..n_g {
            let ma = n_g - 1 - a;
            let row_log = -(u[a] * u[a] - u_min2) / (2.0 * s);
            if row_log < -LOG_CUTOFF {
                break;
            }
            let mu = c * u[a];
            let b0 = (((mu + u_max) / h).round() as usize).min(n_g - 1);
            let d0 = u[b0] - mu;
            let t0 = (row_log - d0 * d0 / (2.0 * var)).exp();
            let floor = (-LOG_CUTOFF).exp();

            let (mut s1, mut s2, mut s3) = (t0, phi_u[b0] * t0, phi_u[n_g - 1 - b0] * t0);

            let mut t = t0;
            let mut r = (-(2.0 * h * d0 + h * h) / (2.0 * var)).exp();
            for b in b0 + 1..n_g {
                t *= r;
                if t < floor {
                    break;
                }
                r *= g;
                s1 += t;
                s2 += phi_u[b] * t;
                s3 += phi_u[n_g - 1 - b] * t;
            }

            let mut t = t0;
            let mut r = ((2.0 * h * d0 - h * h) / (2.0 * var)).exp();
            for b in (0..b0).rev() {
                t *= r;
                if t < floor {
                    break;
                }
                r *= g;
                s1 += t;
                s2 += phi_u[b] * t;
                s3 += phi_u[n_g - 1 - b] * t;
            }

            // s1, s2, s3 are the row-a sums of w, phi_b w, phi_{-b} w at +c. Row -a at +c
            // has weights mirrored in b; row a at -c likewise; row -a at -c equals row a at +c.
            if ma == a {
                den += s1;
                num_pos += phi_u[a] * s2;
                num_neg += phi_u[a] * s3;
            } else {
                den += 2.0 * s1;
                num_pos += phi_u[a] * s2 + phi_u[ma] * s3;
                num_neg += phi_u[a] * s3 + phi_u[ma] * s2;
            }
        }
        row[j] = num_pos / den;
        row[n_c - 1 - j] = num_neg / den;
    }
    row
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lookup::grid::build_grid;

    /// Direct double sum with one `exp` per grid pair.
    fn brute_force_entry(u: &[f64], phi: Nonlinearity, s: f64, c: f64) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        let det = s * s * (1.0 - c * c);
        for &ua in u {
            for &ub in u {
                let q = (s * ua * ua + s * ub * ub - 2.0 * s * c * ua * ub) / det;
                let w = (-0.5 * q).exp();
                num += phi.apply(ua) * phi.apply(ub) * w;
                den += w;
            }
        }
        num / den
    }

    fn brute_force_diagonal(u: &[f64], phi: Nonlinearity, s: f64) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for &x in u {
            let w = (-x * x / (2.0 * s)).exp();
            num += phi.apply(x).powi(2) * w;
            den += w;
        }
        num / den
    }

    #[test]
    fn matches_direct_double_sum() {
        for (n_g, n_c) in [(41, 8), (40, 7)] {
            let grid = build_grid(n_g, 6, n_c, 6.0, 10.0).unwrap();
            for phi in [Nonlinearity::Relu, Nonlinearity::Tanh] {
                let table = populate(&grid, phi).unwrap();
                for (i, &s) in grid.s().iter().enumerate().skip(1) {
                    let d = brute_force_diagonal(grid.u(), phi, s);
                    assert!((table.f1d()[i] - d).abs() <= 1e-12 * d.abs().max(1e-3));
                    for (j, &c) in grid.c().iter().enumerate() {
                        let want = brute_force_entry(grid.u(), phi, s, c);
                        let got = table.f2d_at(i, j);
                        assert!(
                            (got - want).abs() <= 1e-11 * table.f1d()[i],
                            "{phi} s={s} c={c}: {got} vs {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn zero_variance_row_is_deterministic() {
        let grid = build_grid(21, 4, 6, 4.0, 3.0).unwrap();
        let table = populate(&grid, Nonlinearity::Tanh).unwrap();
        assert_eq!(table.f1d()[0], 0.0);
        assert!((0..6).all(|j| table.f2d_at(0, j) == 0.0));
        assert_eq!(table.interpolate(0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn interpolation_errors() {
        let grid = build_grid(21, 4, 6, 4.0, 3.0).unwrap();
        let table = populate(&grid, Nonlinearity::Relu).unwrap();
        assert!(matches!(table.interpolate(1.0, 3.5), Err(Error::Range(_))));
        assert!(matches!(table.interpolate(2.0, 1.0), Err(Error::Input(_))));
        assert!(matches!(table.interpolate(0.1, 0.0), Err(Error::Input(_))));
        assert!(matches!(table.interpolate(0.0, -1.0), Err(Error::Input(_))));
        assert!(matches!(table.interpolate(f64::NAN, 1.0), Err(Error::Input(_))));
        // At the top of the range and right on the diagonal.
        assert!(table.interpolate(3.0, 3.0).is_ok());
        assert!(table.interpolate(-3.0, 3.0).is_ok());
    }

    #[test]
    fn interpolation_reproduces_grid_nodes() {
        let grid = build_grid(31, 5, 6, 5.0, 4.0).unwrap();
        let table = populate(&grid, Nonlinearity::Tanh).unwrap();
        for (i, &s) in grid.s().iter().enumerate() {
            for (j, &c) in grid.c().iter().enumerate() {
                let got = table.interpolate(c * s, s).unwrap();
                assert!((got - table.f2d_at(i, j)).abs() < 1e-14);
            }
            assert!((table.interpolate(s, s).unwrap() - table.f1d()[i]).abs() < 1e-14);
            assert!((table.interpolate(-s, s).unwrap() + table.f1d()[i]).abs() < 1e-14);
        }
    }
}
