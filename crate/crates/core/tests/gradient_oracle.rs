//! Backprop gradients checked against central finite differences.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repudiate_core::data::{synth_gaussian, Dataset, ImageShape, MiniBatchSpec};
use repudiate_core::model::{init_params, loss_and_grad, ModelSpec, ParamVector};

const H: f64 = 1e-5;
/// Components smaller than this are compared on an absolute scale.
const MAGNITUDE_FLOOR: f64 = 1e-4;

fn finite_difference(p: &ParamVector, spec: &ModelSpec, batch: &MiniBatchSpec, ds: &Dataset, wd: f64) -> Vec<f64> {
    (0..p.len())
        .map(|j| {
            let mut plus = p.clone();
            plus.as_mut_slice()[j] += H;
            let mut minus = p.clone();
            minus.as_mut_slice()[j] -= H;
            let lp = loss_and_grad(&plus, spec, batch, ds, wd).unwrap().0;
            let lm = loss_and_grad(&minus, spec, batch, ds, wd).unwrap().0;
            (lp - lm) / (2.0 * H)
        })
        .collect()
}

fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(MAGNITUDE_FLOOR))
        .fold(0.0, f64::max)
}

fn random_case(seed: u64) -> (ModelSpec, ParamVector, MiniBatchSpec, Dataset, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..6);
    let c = rng.random_range(2..5);
    let spec = if rng.random_bool(0.5) {
        ModelSpec::logreg(d, c).unwrap()
    } else {
        let hidden = (0..rng.random_range(1..3)).map(|_| rng.random_range(1..7));
        ModelSpec::mlp(std::iter::once(d).chain(hidden).chain(std::iter::once(c)).collect()).unwrap()
    };
    let ds = synth_gaussian(12, d, c, seed, 1.5).unwrap();
    let mut params = init_params(&spec, seed);
    params.as_mut_slice().iter_mut().for_each(|v| *v *= 3.0);
    let b = rng.random_range(1..=8);
    let indices = rand::seq::index::sample(&mut rng, 12, b).into_vec();
    let wd = if rng.random_bool(0.5) { 0.0 } else { 0.01 };
    (spec, params, MiniBatchSpec::unflipped(indices), ds, wd)
}

#[test]
fn randomized_logreg_and_mlp_cases() {
    let mut worst = 0.0f64;
    for seed in 0..200 {
        let (spec, p, batch, ds, wd) = random_case(seed);
        let (_, grad) = loss_and_grad(&p, &spec, &batch, &ds, wd).unwrap();
        let err = max_relative_error(grad.as_slice(), &finite_difference(&p, &spec, &batch, &ds, wd));
        worst = worst.max(err);
        assert!(err < 1e-5, "seed {seed}: relative error {err:e} for {:?}", spec.arch());
    }
    eprintln!("worst relative error over 200 cases: {worst:e}");
}

#[test]
fn small_cnn_with_flips() {
    let shape = ImageShape { height: 6, width: 5, channels: 2 };
    let spec = ModelSpec::small_cnn(shape, vec![3, 2], 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 6;
    let features: Vec<f64> = (0..n * shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ds = Dataset::new(features, vec![0, 1, 2, 0, 1, 2], shape.len(), 3, Some(shape)).unwrap();
    let p = init_params(&spec, 4);
    let batch = MiniBatchSpec::new(vec![4, 0, 2], vec![true, false, true]).unwrap();
    let (_, grad) = loss_and_grad(&p, &spec, &batch, &ds, 0.001).unwrap();
    let err = max_relative_error(grad.as_slice(), &finite_difference(&p, &spec, &batch, &ds, 0.001));
    assert!(err < 1e-5, "relative error {err:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Two-class logistic regression: the weight gradient of a single sample is
    /// exactly (sigmoid(w.x + b) - y) x.
    #[test]
    fn binary_logreg_closed_form(
        w in prop::collection::vec(-3.0f64..3.0, 3),
        bias in -1.0f64..1.0,
        x in prop::collection::vec(-2.0f64..2.0, 3),
        y in 0u16..2,
    ) {
        let spec = ModelSpec::logreg(3, 2).unwrap();
        let ds = Dataset::new(x.clone(), vec![y], 3, 2, None).unwrap();
        let mut values = w.clone();
        values.push(bias);
        let p = ParamVector::new(values).unwrap();
        let (_, grad) = loss_and_grad(&p, &spec, &MiniBatchSpec::unflipped(vec![0]), &ds, 0.0).unwrap();
        let z: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + bias;
        let s = 1.0 / (1.0 + (-z).exp());
        for k in 0..3 {
            let expected = (s - f64::from(y)) * x[k];
            prop_assert!((grad.as_slice()[k] - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn gradients_are_deterministic(seed in 0u64..1000) {
        let (spec, p, batch, ds, wd) = random_case(seed);
        let a = loss_and_grad(&p, &spec, &batch, &ds, wd).unwrap();
        let b = loss_and_grad(&p, &spec, &batch, &ds, wd).unwrap();
        prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
        prop_assert_eq!(a.1, b.1);
    }
}
