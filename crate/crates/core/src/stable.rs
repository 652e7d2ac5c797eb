//! Overflow-free scalar kernels for the logistic model.

/// `log(1 + e^z)` via the branch `max(z, 0) + log1p(e^{-|z|})`.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Logistic sigmoid `1 / (1 + e^{-z})`, evaluated without overflow for either sign.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log sigmoid(z) = -softplus(-z)`.
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

/// `sigmoid(z) * sigmoid(-z)`, the Bernoulli variance at logit `z`.
///
/// Evaluated as `exp(-|z|) * sigmoid(|z|)^2`, which keeps full relative
/// precision in the tails where `1 - sigmoid(z)` would cancel.
#[inline]
pub fn bernoulli_variance(z: f64) -> f64 {
    let a = z.abs();
    let s = sigmoid(a);
    (-a).exp() * s * s
}
