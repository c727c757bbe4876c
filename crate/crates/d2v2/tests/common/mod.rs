//! Shared test utilities: the central-difference gradient oracle and small
//! helpers. The oracle only ever evaluates the forward pass, so it stays
//! independent of the backward implementation it checks.

use d2v2::tensor::Tensor;

/// Central finite differences: for every element of every parameter,
/// (f(p+h) - f(p-h)) / 2h evaluated through the provided forward closure.
pub fn finite_diff_grads<F>(params: &[Tensor<f64>], h: f64, f: F) -> Vec<Tensor<f64>>
where
    F: Fn(&[Tensor<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut grad = Tensor::zeros(params[pi].shape().to_vec());
        for ei in 0..params[pi].numel() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[ei] += h;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[ei] -= h;
            grad.data_mut()[ei] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grads.push(grad);
    }
    grads
}

/// Worst-case relative disagreement between analytic and numeric gradients.
/// The denominator is floored at 1e-4, which turns the check into an
/// absolute tolerance of 1e-8 for near-zero gradients (well above the
/// ~1e-10 noise floor of central differences in f64).
pub fn max_rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data().iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

/// Deterministic pseudo-random values in [-1, 1] for test tensors.
pub fn pseudo_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        data.push(((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0);
    }
    Tensor::new(shape.to_vec(), data)
}
