//! Elementwise activations and the softmax used by classifier heads.

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// x * sigmoid(x), applied in place.
pub fn silu(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v *= sigmoid(*v);
    }
}

/// d/dx silu given the *pre-activation* input; multiplies `dy` in place.
pub fn silu_backward(pre: &[f64], dy: &mut [f64]) {
    for (d, &x) in dy.iter_mut().zip(pre) {
        let s = sigmoid(x);
        *d *= s * (1.0 + x * (1.0 - s));
    }
}

pub fn relu(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub fn relu_backward(pre: &[f64], dy: &mut [f64]) {
    for (d, &x) in dy.iter_mut().zip(pre) {
        if x <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
