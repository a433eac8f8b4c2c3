//! Minimal dense neural-network toolkit: matrices, a reverse-mode tape,
//! feed-forward networks and the Adam update rule. Everything is `f64` so
//! gradients can be checked against central finite differences.

mod adam;
mod graph;
mod matrix;
mod mlp;

pub use adam::Adam;
pub use graph::{sigmoid, softplus, Gradients, Graph, Var};
pub use matrix::Matrix;
pub use mlp::{Activation, BoundMlp, Dropout, Linear, Mlp};

/// Central finite-difference gradient of `f` with respect to every entry of
/// the parameter list exposed by `params_mut`.
pub fn finite_difference<T>(
    model: &mut T,
    params_mut: impl Fn(&mut T) -> Vec<&mut Matrix>,
    f: impl Fn(&T) -> f64,
    h: f64,
) -> Vec<Matrix> {
    let shapes: Vec<(usize, usize)> = params_mut(model).iter().map(|m| m.shape()).collect();
    let mut out: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
    for (pi, &(r, c)) in shapes.iter().enumerate() {
        for k in 0..r * c {
            let orig = params_mut(model)[pi].data()[k];
            params_mut(model)[pi].data_mut()[k] = orig + h;
            let plus = f(model);
            params_mut(model)[pi].data_mut()[k] = orig - h;
            let minus = f(model);
            params_mut(model)[pi].data_mut()[k] = orig;
            out[pi].data_mut()[k] = (plus - minus) / (2.0 * h);
        }
    }
    out
}

/// Largest violation of `|a - b| <= atol + rtol * max(|a|, |b|)` across all entries,
/// reported as the ratio to the allowed tolerance (<= 1 means within tolerance).
pub fn gradient_mismatch(analytic: &[Matrix], numeric: &[Matrix], rtol: f64, atol: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let allowed = atol + rtol * x.abs().max(y.abs());
            worst = worst.max((x - y).abs() / allowed);
        }
    }
    worst
}
