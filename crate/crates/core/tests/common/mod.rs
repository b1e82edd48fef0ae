#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use nalgebra::DMatrix;
use nngp::data::{self, Dataset, SplitSizes};
use nngp::lookup::cache;
use nngp::{GridSpec, LookupTable, Nonlinearity};

/// Table cache shared by every test binary, under the cargo target directory.
pub fn cache_dir() -> PathBuf {
    match std::env::var_os(cache::CACHE_DIR_ENV) {
        Some(dir) => PathBuf::from(dir),
        None => Path::new(env!("CARGO_TARGET_TMPDIR")).join("nngp-cache"),
    }
}

pub fn default_table(phi: Nonlinearity) -> &'static LookupTable {
    static RELU: OnceLock<LookupTable> = OnceLock::new();
    static TANH: OnceLock<LookupTable> = OnceLock::new();
    let cell = match phi {
        Nonlinearity::Relu => &RELU,
        Nonlinearity::Tanh => &TANH,
    };
    cell.get_or_init(|| cache::load_or_build_in(&cache_dir(), phi, &GridSpec::default()).unwrap())
}

pub fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

pub fn mnist_images() -> PathBuf {
    mnist_dir().join("mnist10k-images-idx3-ubyte.gz")
}

pub fn mnist_labels() -> PathBuf {
    mnist_dir().join("mnist10k-labels-idx1-ubyte.gz")
}

/// Seed-0 shuffle of the bundled digits into 1000 train, 1000 validation, 8000 test.
pub fn mnist_1k() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| {
        let raw = data::load_mnist_idx(&mnist_images(), &mnist_labels()).unwrap();
        data::preprocess(&raw, data::NUM_CLASSES, SplitSizes::new(1000, 1000, 8000), 0).unwrap()
    })
}

/// Symmetric positive definite `n x n` matrix from a flat list of entries.
pub fn spd_from(entries: &[f64], n: usize, ridge: f64) -> DMatrix<f64> {
    let a = DMatrix::from_iterator(n, n, entries.iter().copied().cycle().take(n * n));
    let mut k = &a * a.transpose() / n as f64;
    for i in 0..n {
        k[(i, i)] += ridge;
    }
    k
}

/// Dense inverse-based posterior, used as an oracle.
pub fn brute_force_posterior(
    k_train: &DMatrix<f64>,
    k_cross: &DMatrix<f64>,
    test_diag: &[f64],
    targets: &DMatrix<f64>,
    noise: f64,
) -> (DMatrix<f64>, Vec<f64>) {
    let n = k_train.nrows();
    let inv = (k_train + DMatrix::identity(n, n) * noise).try_inverse().unwrap();
    let mean = k_cross * &inv * targets;
    let var = (0..k_cross.nrows())
        .map(|i| {
            let row = k_cross.row(i);
            test_diag[i] - (&row * &inv * row.transpose())[(0, 0)]
        })
        .collect();
    (mean, var)
}

/// `E[phi(u) phi(v)]` by the ratio-of-sums rule on the table's own pre-activation grid, at
/// any (s, c).
pub fn ratio_of_sums(u: &[f64], phi: Nonlinearity, s: f64, c: f64) -> f64 {
    let det = s * (1.0 - c * c);
    let (mut num, mut den) = (0.0, 0.0);
    for &a in u {
        let pa = phi.apply(a);
        for &b in u {
            let w = (-(a * a - 2.0 * c * a * b + b * b) / (2.0 * det)).exp();
            num += w * pa * phi.apply(b);
            den += w;
        }
    }
    num / den
}
