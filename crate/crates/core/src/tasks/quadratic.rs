//! `f(w; b) = (c/2) ||w - b||^2`, one center `b` per sample.

use crate::vector::ModelVector;

pub(super) fn loss(curvature: f64, w: &ModelVector, center: &[f64]) -> f64 {
    let dist_sq: f64 = w
        .as_slice()
        .iter()
        .zip(center)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    0.5 * curvature * dist_sq
}

pub(super) fn gradient(curvature: f64, w: &ModelVector, center: &[f64]) -> ModelVector {
    w.as_slice()
        .iter()
        .zip(center)
        .map(|(a, b)| curvature * (a - b))
        .collect::<Vec<_>>()
        .into()
}
