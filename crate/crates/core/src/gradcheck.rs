//! Central finite-difference gradient checking.
//!
//! Used by the unit tests of every differentiable block and by the
//! acceptance suite. The numeric side never touches the reverse-mode
//! code path, so agreement between the two is a real oracle.

/// Central finite difference: df/dx_i ~ (f(x+h e_i) - f(x-h e_i)) / 2h.
pub fn finite_difference<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Symmetric relative error with an absolute floor so that near-zero
/// gradient pairs do not blow up the ratio.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Largest elementwise relative error between two gradient vectors.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Check every named parameter of a model against central differences.
/// `loss` runs a full forward pass over a parameter store and returns a
/// scalar; `analytic` is the reverse-mode gradient keyed by name.
/// Returns the worst relative error over all checked entries.
pub fn check_model_params(
    store: &crate::nn::ParamStore,
    names: &[String],
    analytic: &std::collections::BTreeMap<String, ndarray::Array2<f64>>,
    step: f64,
    loss: impl Fn(&crate::nn::ParamStore) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for name in names {
        let dim = store.get(name).dim();
        let grad = analytic
            .get(name)
            .unwrap_or_else(|| panic!("no analytic gradient for {name}"));
        for i in 0..dim.0 {
            for j in 0..dim.1 {
                let orig = store.get(name)[[i, j]];
                probe.get_mut(name)[[i, j]] = orig + step;
                let plus = loss(&probe);
                probe.get_mut(name)[[i, j]] = orig - step;
                let minus = loss(&probe);
                probe.get_mut(name)[[i, j]] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                worst = worst.max(relative_error(grad[[i, j]], numeric));
            }
        }
    }
    worst
}
