//! Central finite-difference checks for analytic gradients.

use rand::{Rng, SeedableRng};

use crate::autograd::Var;
use crate::tensor::Tensor;

/// Worst-case agreement between analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per input: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub relative_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares the gradient of `sum(proj ⊙ f(inputs))` for a fixed random
/// projection against central differences with step `step`.
///
/// Scalar-valued functions use an implicit projection of 1.
pub fn gradient_check(
    inputs: &[Tensor<f64>],
    f: impl Fn(&[Var<f64>]) -> Var<f64>,
    step: f64,
) -> GradCheckReport {
    let vars: Vec<Var<f64>> = inputs.iter().cloned().map(Var::parameter).collect();
    let out = f(&vars);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    let proj: Vec<f64> = if out.value().numel() == 1 {
        vec![1.0]
    } else {
        (0..out.value().numel())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect()
    };
    let projected =
        |y: &Tensor<f64>| -> f64 { y.data().iter().zip(&proj).map(|(a, b)| a * b).sum() };

    let proj_var = Var::constant(Tensor::from_vec(out.shape(), proj.clone()));
    let loss = crate::ops::mul(&out, &proj_var);
    let grads = loss.backward();

    let mut relative_errors = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(&vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let perturbed: Vec<Var<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let mut t = t.clone();
                        if i == k {
                            t.data_mut()[j] += delta;
                        }
                        Var::constant(t)
                    })
                    .collect();
                projected(f(&perturbed).value())
            };
            *slot = (eval(step) - eval(-step)) / (2.0 * step);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        relative_errors.push(if denom < 1e-12 { diff } else { diff / denom });
    }
    GradCheckReport { relative_errors }
}

/// Panics when any input's relative error exceeds `tol`.
pub fn check_gradients(inputs: &[Tensor<f64>], f: impl Fn(&[Var<f64>]) -> Var<f64>, tol: f64) {
    let report = gradient_check(inputs, f, 1e-6);
    for (i, e) in report.relative_errors.iter().enumerate() {
        assert!(
            *e < tol,
            "input {i}: relative gradient error {e:e} exceeds {tol:e}"
        );
    }
}
