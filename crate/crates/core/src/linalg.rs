use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Diagonal shift used when the caller asks to escalate from zero.
pub const ESCALATION_FLOOR: f64 = 1e-10;

/// Multiplier applied to the diagonal shift after each failed factorization.
pub const ESCALATION_FACTOR: f64 = 10.0;

/// Cholesky factor of `A + shift * I` together with the shift that finally worked.
pub struct ShiftedCholesky {
    pub factor: Cholesky<f64, Dyn>,
    pub shift: f64,
    pub retries: usize,
}

/// Factors `a + shift * I`, multiplying `shift` by ten after every failure, at most
/// `max_retries` times. A zero initial shift escalates from [`ESCALATION_FLOOR`].
pub fn cholesky_with_escalation(
    a: &DMatrix<f64>,
    initial_shift: f64,
    max_retries: usize,
) -> Result<ShiftedCholesky> {
    if !a.is_square() {
        return Err(Error::Input(format!(
            "cannot factor a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    if !(initial_shift >= 0.0) || !initial_shift.is_finite() {
        return Err(Error::Input(format!(
            "diagonal shift must be finite and non-negative, got {initial_shift}"
        )));
    }
    let mut shift = initial_shift;
    for retries in 0..=max_retries {
        let mut shifted = a.clone();
        if shift > 0.0 {
            for i in 0..a.nrows() {
                shifted[(i, i)] += shift;
            }
        }
        if let Some(factor) = Cholesky::new(shifted) {
            return Ok(ShiftedCholesky {
                factor,
                shift,
                retries,
            });
        }
        if retries < max_retries {
            shift = if shift == 0.0 {
                ESCALATION_FLOOR
            } else {
                shift * ESCALATION_FACTOR
            };
            log::debug!("Cholesky failed; retrying with diagonal shift {shift:e}");
        }
    }
    Err(Error::Numerical(format!(
        "Cholesky factorization failed after {max_retries} retries (final diagonal shift {shift:e})"
    )))
}
