//! Finite-difference gradient oracle.
//!
//! Every differentiable forward in this crate is validated against central
//! finite differences in 64-bit arithmetic. The checker treats the forward
//! as a black-box scalar function of a list of input arrays, so it works
//! for single tape ops and for whole model heads alike.

use super::params::{ParameterStore, TapeSession};
use super::tape::TensorId;
use super::NnError;
use ndarray::Array2;
use std::collections::BTreeMap;

/// Central-difference step used throughout the gradient contract.
pub const FD_STEP: f64 = 1e-5;
/// Maximum allowed relative error between analytic and numeric gradients.
pub const FD_REL_TOL: f64 = 1e-4;

/// Numeric gradient of `f` with respect to `inputs[which]`, leaving all
/// other inputs untouched. `f` must be deterministic.
pub fn fd_gradient(
    f: &mut dyn FnMut(&[Array2<f64>]) -> f64,
    inputs: &[Array2<f64>],
    which: usize,
    step: f64,
) -> Array2<f64> {
    let mut work: Vec<Array2<f64>> = inputs.to_vec();
    let shape = inputs[which].raw_dim();
    let mut grad = Array2::<f64>::zeros(shape);
    for row in 0..grad.nrows() {
        for col in 0..grad.ncols() {
            let original = work[which][(row, col)];
            work[which][(row, col)] = original + step;
            let plus = f(&work);
            work[which][(row, col)] = original - step;
            let minus = f(&work);
            work[which][(row, col)] = original;
            grad[(row, col)] = (plus - minus) / (2.0 * step);
        }
    }
    grad
}

/// Worst relative discrepancy between two gradients, with a floor so that
/// near-zero entries compare absolutely.
pub fn max_rel_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    assert_eq!(analytic.raw_dim(), numeric.raw_dim(), "gradient shapes must match");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Compares analytic parameter gradients of a scalar loss against central
/// finite differences, parameter by parameter.
///
/// `build` constructs the loss on a fresh eval-mode session (dropout is
/// therefore inactive, as the gradient contract requires) and is re-invoked
/// for every perturbed copy of the store. Returns the worst relative error
/// per parameter that received a gradient.
pub fn parameter_gradient_errors(
    store: &ParameterStore,
    build: &mut dyn FnMut(&mut TapeSession) -> Result<TensorId, NnError>,
    step: f64,
) -> Result<BTreeMap<String, f64>, NnError> {
    let mut sess = TapeSession::new(store, false, 0);
    let loss = build(&mut sess)?;
    let analytic = sess.gradients(loss);

    let mut eval = |perturbed: &ParameterStore| -> Result<f64, NnError> {
        let mut sess = TapeSession::new(perturbed, false, 0);
        let loss = build(&mut sess)?;
        Ok(sess.tape.value(loss)[(0, 0)])
    };

    let mut errors = BTreeMap::new();
    for (name, grad) in &analytic {
        let base = store.get(name)?.clone();
        let mut numeric = Array2::<f64>::zeros(grad.raw_dim());
        for row in 0..numeric.nrows() {
            for col in 0..numeric.ncols() {
                let mut plus = base.clone();
                plus[(row, col)] += step;
                let mut store_plus = store.clone();
                store_plus.set(name, plus)?;

                let mut minus = base.clone();
                minus[(row, col)] -= step;
                let mut store_minus = store.clone();
                store_minus.set(name, minus)?;

                numeric[(row, col)] =
                    (eval(&store_plus)? - eval(&store_minus)?) / (2.0 * step);
            }
        }
        errors.insert(name.clone(), max_rel_error(grad, &numeric));
    }
    Ok(errors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn recovers_quadratic_gradient() {
        // f(x) = sum(x^2) has gradient 2x.
        let x = array![[0.5, -1.25], [2.0, 0.1]];
        let mut f = |inputs: &[Array2<f64>]| inputs[0].iter().map(|v| v * v).sum();
        let numeric = fd_gradient(&mut f, &[x.clone()], 0, FD_STEP);
        let analytic = x.mapv(|v| 2.0 * v);
        assert!(max_rel_error(&analytic, &numeric) <= 1e-8);
    }

    #[test]
    fn flags_wrong_gradient() {
        let x = array![[1.0, 2.0]];
        let mut f = |inputs: &[Array2<f64>]| inputs[0].iter().map(|v| v * v).sum();
        let numeric = fd_gradient(&mut f, &[x.clone()], 0, FD_STEP);
        let wrong = x.mapv(|v| 3.0 * v);
        assert!(max_rel_error(&wrong, &numeric) > 0.1);
    }
}
