//! Shared helpers for the integration suites.

use hacd_core::autodiff::Tensor;
use hacd_core::rng::Rng;

#[allow(dead_code)]
pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.normal()).collect();
    Tensor::from_vec(shape.to_vec(), values).unwrap()
}

#[allow(dead_code)]
pub fn random_param(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.normal()).collect();
    Tensor::param(shape.to_vec(), values).unwrap()
}

#[allow(dead_code)]
pub fn assert_all_close(actual: &[f64], expected: &[f64], tol: f64, what: &str) {
    assert_eq!(actual.len(), expected.len(), "{}: length", what);
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        assert!(
            (a - e).abs() <= tol,
            "{}: index {} differs: {} vs {} (|diff| = {:e})",
            what,
            i,
            a,
            e,
            (a - e).abs()
        );
    }
}
