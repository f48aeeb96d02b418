use crate::error::{Error, Result};

/// Probabilities are clamped into `[P_EPS, 1 - P_EPS]` before any log.
pub const P_EPS: f64 = 1e-7;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inverse-frequency weighted BCE plus `lambda` times focal BCE, each a mean
/// over the experts of one sample. Returns the loss and its gradient with
/// respect to the logits `z` (where `p = sigmoid(z)`).
///
/// `y` may be soft; the focal factor uses `p_t = y p + (1 - y)(1 - p)`. The
/// gradient is zero wherever the clamp is active, matching the clamped loss.
pub fn hybrid_loss(z: &[f64], y: &[f64], freqs: &[f64], lambda: f64, gamma: f64) -> Result<(f64, Vec<f64>)> {
    let n = z.len();
    if y.len() != n || freqs.len() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            actual: if y.len() != n { y.len() } else { freqs.len() },
        });
    }
    if n == 0 {
        return Err(Error::Empty("hybrid loss over zero experts"));
    }
    if let Some(expert) = freqs.iter().position(|&f| f <= 0.0) {
        return Err(Error::ZeroFrequency { expert });
    }
    let inv_n = 1.0 / n as f64;
    let (mut expert, mut focal) = (0.0, 0.0);
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let raw = sigmoid(z[i]);
        let p = raw.clamp(P_EPS, 1.0 - P_EPS);
        let clamped = p != raw;
        let yi = y[i];
        let bce = -(yi * p.ln() + (1.0 - yi) * (1.0 - p).ln());
        let pt = yi * p + (1.0 - yi) * (1.0 - p);
        let q = 1.0 - pt;
        let modulate = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
        expert += bce / freqs[i];
        focal += modulate * bce;
        if clamped {
            continue;
        }
        let dp_dz = p * (1.0 - p);
        let dbce_dz = p - yi;
        let dpt_dz = (2.0 * yi - 1.0) * dp_dz;
        let dmod_dz = if gamma == 0.0 { 0.0 } else { -gamma * q.powf(gamma - 1.0) * dpt_dz };
        grad[i] = inv_n * (dbce_dz / freqs[i] + lambda * (dmod_dz * bce + modulate * dbce_dz));
    }
    Ok((expert / n as f64 + lambda * (focal / n as f64), grad))
}
