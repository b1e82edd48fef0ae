use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{layer_variances, propagate, NetworkHyperparams, EQUAL_VARIANCE_TOLERANCE};
use crate::error::{Error, Result};
use crate::expectation::GaussianExpectation;

/// The blocks of `K^L` needed for exact GP prediction: the full training block, the
/// test-by-train cross block and the test diagonal. Test-test off-diagonals are never formed.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    train: DMatrix<f64>,
    cross: DMatrix<f64>,
    test_diag: DVector<f64>,
    layer: usize,
    train_ids: Vec<usize>,
    test_ids: Vec<usize>,
}

impl KernelMatrix {
    /// Assembles a kernel from explicit blocks, checking shapes, symmetry (`1e-12`
    /// relative) and strictly positive diagonals. Ids default to `0..n_train` and
    /// `n_train..n_train + n_test`.
    pub fn from_blocks(
        train: DMatrix<f64>,
        cross: DMatrix<f64>,
        test_diag: DVector<f64>,
        layer: usize,
    ) -> Result<Self> {
        let n = train.nrows();
        if !train.is_square() {
            return Err(Error::Input(format!(
                "training block is {}x{}, expected square",
                n,
                train.ncols()
            )));
        }
        if cross.ncols() != n || cross.nrows() != test_diag.len() {
            return Err(Error::Input(format!(
                "cross block is {}x{}, expected {}x{n}",
                cross.nrows(),
                cross.ncols(),
                test_diag.len()
            )));
        }
        let scale = train.amax().max(f64::MIN_POSITIVE);
        for i in 0..n {
            if !(train[(i, i)] > 0.0) {
                return Err(Error::Invariant(format!(
                    "training diagonal entry {i} is {}, expected > 0",
                    train[(i, i)]
                )));
            }
            for j in 0..i {
                if (train[(i, j)] - train[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::Invariant(format!(
                        "training block not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if let Some(i) = test_diag.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::Invariant(format!(
                "test diagonal entry {i} is {}, expected > 0",
                test_diag[i]
            )));
        }
        let m = test_diag.len();
        Ok(KernelMatrix {
            train,
            cross,
            test_diag,
            layer,
            train_ids: (0..n).collect(),
            test_ids: (n..n + m).collect(),
        })
    }

    pub fn with_ids(mut self, train_ids: Vec<usize>, test_ids: Vec<usize>) -> Result<Self> {
        if train_ids.len() != self.n_train() || test_ids.len() != self.n_test() {
            return Err(Error::Input("id lists do not match block sizes".into()));
        }
        self.train_ids = train_ids;
        self.test_ids = test_ids;
        Ok(self)
    }

    pub fn train(&self) -> &DMatrix<f64> {
        &self.train
    }

    /// `n_test x n_train`.
    pub fn cross(&self) -> &DMatrix<f64> {
        &self.cross
    }

    pub fn test_diag(&self) -> &DVector<f64> {
        &self.test_diag
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn train_ids(&self) -> &[usize] {
        &self.train_ids
    }

    pub fn test_ids(&self) -> &[usize] {
        &self.test_ids
    }

    pub fn n_train(&self) -> usize {
        self.train.nrows()
    }

    pub fn n_test(&self) -> usize {
        self.test_diag.len()
    }
}

/// Squared norm divided by dimension for each row; all must agree.
fn shared_norm(sets: &[&DMatrix<f64>]) -> Result<f64> {
    let d = sets[0].ncols();
    let mut reference: Option<f64> = None;
    for set in sets {
        if set.ncols() != d {
            return Err(Error::Input(format!(
                "input dimensions differ: {} vs {}",
                d,
                set.ncols()
            )));
        }
        for (i, row) in set.row_iter().enumerate() {
            let v = row.norm_squared() / d as f64;
            match reference {
                None => reference = Some(v),
                Some(r) if (v - r).abs() > EQUAL_VARIANCE_TOLERANCE * r.max(v) => {
                    return Err(Error::Invariant(format!(
                        "row {i} has |x|^2/d = {v}, expected {r}; preprocess inputs to a common norm"
                    )));
                }
                _ => {}
            }
        }
    }
    reference.ok_or_else(|| Error::Input("no input points".into()))
}

/// Builds `K^L` over training rows `train` and test rows `test` (points are rows).
///
/// Only the lower triangle of the training block is computed and then mirrored. Entries
/// within a layer are independent and are evaluated in parallel.
pub fn build_kernel_matrix<E: GaussianExpectation + ?Sized>(
    train: &DMatrix<f64>,
    test: &DMatrix<f64>,
    hp: &NetworkHyperparams,
    expectation: &E,
) -> Result<KernelMatrix> {
    hp.validate()?;
    if train.nrows() == 0 {
        return Err(Error::Input("training set is empty".into()));
    }
    if train.ncols() == 0 {
        return Err(Error::Input("inputs must have dimension >= 1".into()));
    }
    let sets: Vec<&DMatrix<f64>> = if test.nrows() > 0 {
        vec![train, test]
    } else {
        vec![train]
    };
    let norm = shared_norm(&sets)?;
    let d = train.ncols() as f64;
    let q0 = hp.sigma_b2 + hp.sigma_w2 * norm;
    let q = layer_variances(q0, hp, expectation)?;
    let q_last = q[hp.depth];
    if !(q_last > 0.0) {
        return Err(Error::Invariant(format!(
            "final-layer variance {q_last} is not positive"
        )));
    }

    let n = train.nrows();
    let m = test.nrows();
    let base = |dot: f64| hp.sigma_b2 + hp.sigma_w2 * dot / d;

    let gram_train = train * train.transpose();
    let mut k_train = DMatrix::<f64>::zeros(n, n);
    // Column j of the (symmetric) result holds entries i >= j.
    k_train
        .as_mut_slice()
        .par_chunks_mut(n)
        .enumerate()
        .try_for_each(|(j, column)| -> Result<()> {
            column[j] = q_last;
            for i in j + 1..n {
                column[i] = propagate(base(gram_train[(i, j)]), &q, hp, expectation)?;
            }
            Ok(())
        })?;
    for j in 0..n {
        for i in j + 1..n {
            k_train[(j, i)] = k_train[(i, j)];
        }
    }

    let mut k_cross = DMatrix::<f64>::zeros(m, n);
    if m > 0 {
        let gram_cross = test * train.transpose();
        k_cross
            .as_mut_slice()
            .par_chunks_mut(m)
            .enumerate()
            .try_for_each(|(j, column)| -> Result<()> {
                for (i, out) in column.iter_mut().enumerate() {
                    *out = propagate(base(gram_cross[(i, j)]), &q, hp, expectation)?;
                }
                Ok(())
            })?;
    }

    Ok(KernelMatrix {
        train: k_train,
        cross: k_cross,
        test_diag: DVector::from_element(m, q_last),
        layer: hp.depth,
        train_ids: (0..n).collect(),
        test_ids: (n..n + m).collect(),
    })
}
