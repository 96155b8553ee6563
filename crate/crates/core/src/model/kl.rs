use crate::error::{Error, Result};

/// Additive smoothing applied to the gaze target before renormalizing.
pub const KL_EPS: f64 = 1e-8;

/// `(h + eps) / Σ (h + eps)`.
pub fn smooth_target(h: &[f64], eps: f64) -> Vec<f64> {
    let total: f64 = h.iter().map(|v| v + eps).sum();
    h.iter().map(|v| (v + eps) / total).collect()
}

/// `D(A ‖ H') = Σ A_i ln(A_i / H'_i)` with zero-mass `A_i` terms contributing nothing.
pub fn kl_regularizer(attn: &[f64], gaze: &[f64], eps: f64) -> Result<f64> {
    if attn.len() != gaze.len() {
        return Err(Error::Shape(format!(
            "attention distribution has {} entries, gaze distribution {}",
            attn.len(),
            gaze.len()
        )));
    }
    let target = smooth_target(gaze, eps);
    let d: f64 = attn
        .iter()
        .zip(&target)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, h)| a * (a / h).ln())
        .sum();
    Ok(d.max(0.0))
}

/// `∂D/∂A_i = ln(A_i / H'_i) + 1` (zero where `A_i = 0`).
pub fn kl_gradient(attn: &[f64], gaze: &[f64], eps: f64) -> Vec<f64> {
    let target = smooth_target(gaze, eps);
    attn.iter()
        .zip(&target)
        .map(|(&a, &h)| if a > 0.0 { (a / h).ln() + 1.0 } else { 0.0 })
        .collect()
}
