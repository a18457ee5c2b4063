//! Single-sample logistic loss `log(1 + exp(-y <w, x>))` with labels in {-1, +1}.

use crate::vector::ModelVector;

fn margin(w: &ModelVector, x: &[f64], y: f64) -> f64 {
    y * w.as_slice().iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
}

/// `log(1 + exp(-m))` without overflow.
fn softplus_neg(m: f64) -> f64 {
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(super) fn loss(w: &ModelVector, x: &[f64], y: f64) -> f64 {
    softplus_neg(margin(w, x, y))
}

pub(super) fn gradient(w: &ModelVector, x: &[f64], y: f64) -> ModelVector {
    let coef = -y * sigmoid(-margin(w, x, y));
    x.iter().map(|xi| coef * xi).collect::<Vec<_>>().into()
}

/// Per-sample smoothness bound: the Hessian is `s(1-s) x x^T` with `s(1-s) <= 1/4`.
pub(super) fn smoothness(x: &[f64]) -> f64 {
    0.25 * x.iter().map(|v| v * v).sum::<f64>()
}

pub(super) fn label_probability(teacher: &[f64], x: &[f64]) -> f64 {
    sigmoid(teacher.iter().zip(x).map(|(a, b)| a * b).sum())
}
