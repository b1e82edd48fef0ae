use nalgebra::DMatrix;
use nngp::data::random_constant_norm_points;
use nngp::kernel::{build_kernel_matrix, NetworkHyperparams};
use nngp::mc::{gaussianity_check, sample_empirical_kernel, KernelEstimate, Sampler};
use nngp::{Evaluator, Nonlinearity};

fn within_se(est: &KernelEstimate, want: &DMatrix<f64>, k: f64) {
    for i in 0..want.nrows() {
        for j in 0..want.ncols() {
            let (m, se) = (est.mean[(i, j)], est.std_error[(i, j)]);
            assert!((m - want[(i, j)]).abs() <= k * se, "({i}, {j}): {m} vs {} (se {se})", want[(i, j)]);
        }
    }
}

#[test]
fn one_hidden_layer_is_unbiased() {
    let x = random_constant_norm_points(4, 6, 2).unwrap();
    for phi in [Nonlinearity::Tanh, Nonlinearity::Relu] {
        let hp = NetworkHyperparams::new(1, 1.5, 0.1, phi).unwrap();
        let want = build_kernel_matrix(&x, &DMatrix::zeros(0, 6), &hp, &Evaluator::direct(phi))
            .unwrap()
            .train()
            .clone();
        let s = sample_empirical_kernel(&x, &hp, &[3], 100_000, 9, Sampler::Marginal).unwrap();
        within_se(&s.output_product, &want, 5.0);
        within_se(&s.conditional, &want, 5.0);
    }
}

#[test]
fn samplers_agree() {
    let x = random_constant_norm_points(3, 5, 4).unwrap();
    let hp = NetworkHyperparams::new(2, 1.8, 0.2, Nonlinearity::Tanh).unwrap();
    let a = sample_empirical_kernel(&x, &hp, &[8], 40_000, 1, Sampler::Marginal).unwrap();
    let b = sample_empirical_kernel(&x, &hp, &[8], 40_000, 2, Sampler::Explicit).unwrap();
    for (ea, eb) in [(&a.conditional, &b.conditional), (&a.output_product, &b.output_product)] {
        for i in 0..3 {
            for j in 0..3 {
                let se = ea.std_error[(i, j)].hypot(eb.std_error[(i, j)]);
                let diff = ea.mean[(i, j)] - eb.mean[(i, j)];
                assert!(diff.abs() <= 5.0 * se, "({i}, {j}): diff {diff}, se {se}");
            }
        }
    }
}

#[test]
fn empirical_kernel_is_symmetric_with_positive_diagonal() {
    let x = random_constant_norm_points(5, 7, 0).unwrap();
    let hp = NetworkHyperparams::new(3, 1.5, 0.1, Nonlinearity::Relu).unwrap();
    let s = sample_empirical_kernel(&x, &hp, &[4, 9, 2], 2, 3, Sampler::Explicit).unwrap();
    for e in [&s.output_product, &s.conditional] {
        assert_eq!(e.mean, e.mean.transpose());
        assert!(e.mean.diagonal().iter().all(|&v| v > 0.0));
    }
}

#[test]
fn wide_tanh_outputs_are_gaussian() {
    let x = random_constant_norm_points(3, 8, 1).unwrap();
    let hp = NetworkHyperparams::new(2, 1.5, 0.1, Nonlinearity::Tanh).unwrap();
    for s in gaussianity_check(&x, &hp, 4096, 100_000, 5).unwrap() {
        assert!(s.excess_kurtosis.abs() < 0.1, "{s:?}");
    }
}

#[test]
fn single_relu_unit_is_not_gaussian() {
    let x = random_constant_norm_points(3, 8, 1).unwrap();
    let hp = NetworkHyperparams::new(1, 2.0, 0.0, Nonlinearity::Relu).unwrap();
    for s in gaussianity_check(&x, &hp, 1, 100_000, 5).unwrap() {
        // Standard error of the excess kurtosis is about sqrt(24 / M) ~ 0.015.
        assert!(s.excess_kurtosis > 1.0, "{s:?}");
    }
}

#[test]
fn bias_only_outputs_are_gaussian() {
    let x = random_constant_norm_points(2, 4, 1).unwrap();
    let hp = NetworkHyperparams::new(3, 0.0, 0.7, Nonlinearity::Relu).unwrap();
    for s in gaussianity_check(&x, &hp, 2, 100_000, 5).unwrap() {
        assert!(s.skewness.abs() < 0.05 && s.excess_kurtosis.abs() < 0.1, "{s:?}");
    }
}
