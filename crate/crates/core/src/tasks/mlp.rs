//! One-hidden-layer tanh network with a scalar linear output and squared loss.
//!
//! Parameter layout: `[W1 (HIDDEN x m, row-major), b1 (HIDDEN), w2 (HIDDEN), b2]`.

use crate::vector::ModelVector;

pub const HIDDEN: usize = 8;

pub fn param_dim(input_dim: usize) -> usize {
    HIDDEN * input_dim + 2 * HIDDEN + 1
}

struct Forward {
    act: [f64; HIDDEN],
    out: f64,
}

fn forward(w: &[f64], x: &[f64]) -> Forward {
    let m = x.len();
    let (w1, rest) = w.split_at(HIDDEN * m);
    let (b1, rest) = rest.split_at(HIDDEN);
    let (w2, b2) = rest.split_at(HIDDEN);
    let mut act = [0.0; HIDDEN];
    let mut out = b2[0];
    for h in 0..HIDDEN {
        let row = &w1[h * m..(h + 1) * m];
        let z: f64 = b1[h] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        act[h] = z.tanh();
        out += w2[h] * act[h];
    }
    Forward { act, out }
}

pub(super) fn predict(w: &[f64], x: &[f64]) -> f64 {
    forward(w, x).out
}

pub(super) fn loss(w: &ModelVector, x: &[f64], y: f64) -> f64 {
    let r = forward(w.as_slice(), x).out - y;
    0.5 * r * r
}

pub(super) fn gradient(w: &ModelVector, x: &[f64], y: f64) -> ModelVector {
    let m = x.len();
    let params = w.as_slice();
    let fwd = forward(params, x);
    let r = fwd.out - y;
    let w2 = &params[HIDDEN * m + HIDDEN..HIDDEN * m + 2 * HIDDEN];

    let mut grad = vec![0.0; params.len()];
    let (g_w1, rest) = grad.split_at_mut(HIDDEN * m);
    let (g_b1, rest) = rest.split_at_mut(HIDDEN);
    let (g_w2, g_b2) = rest.split_at_mut(HIDDEN);
    for h in 0..HIDDEN {
        let dz = r * w2[h] * (1.0 - fwd.act[h] * fwd.act[h]);
        for (g, xi) in g_w1[h * m..(h + 1) * m].iter_mut().zip(x) {
            *g = dz * xi;
        }
        g_b1[h] = dz;
        g_w2[h] = r * fwd.act[h];
    }
    g_b2[0] = r;
    grad.into()
}
