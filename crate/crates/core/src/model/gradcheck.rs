//! Central finite-difference gradient checking.

use serde::Serialize;

use super::network::{backward, forward, SampleInput};
use super::{ModelConfig, ModelParams, ParamSet};
use crate::error::Result;

/// Denominator floor so that gradients that are zero up to round-off do not
/// produce huge relative errors.
pub const REL_ERR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub n: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.params.extend(other.params);
    }
}

/// Compares `analytic` against central differences of `loss` around `p`,
/// element by element for every tensor.
pub fn finite_difference_check<P, F>(p: &P, analytic: &P, step: f64, mut loss: F) -> Result<GradCheckReport>
where
    P: ParamSet + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    let mut work = p.clone();
    let grads = analytic.views();
    let mut out = Vec::with_capacity(grads.len());
    for (ti, gv) in grads.iter().enumerate() {
        let mut check = ParamCheck { name: gv.name.clone(), n: gv.data.len(), max_rel_err: 0.0, max_abs_err: 0.0 };
        for j in 0..gv.data.len() {
            let orig = work.views()[ti].data[j];
            work.views_mut()[ti].data[j] = orig + step;
            let up = loss(&work)?;
            work.views_mut()[ti].data[j] = orig - step;
            let down = loss(&work)?;
            work.views_mut()[ti].data[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = gv.data[j];
            check.max_rel_err = check.max_rel_err.max(relative_error(a, numeric));
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
        }
        out.push(check);
    }
    Ok(GradCheckReport { step, params: out })
}

/// Mean over the batch of `CE + λ·KL`.
pub fn batch_objective(params: &ModelParams, cfg: &ModelConfig, batch: &[SampleInput], lambda: f64) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        let f = forward(params, cfg, s)?;
        total += f.ce + lambda * f.kl;
    }
    Ok(total / batch.len() as f64)
}

/// Analytic gradient of [`batch_objective`].
pub fn batch_gradient(params: &ModelParams, cfg: &ModelConfig, batch: &[SampleInput], lambda: f64) -> Result<ModelParams> {
    let mut g = ModelParams::zeros(cfg);
    let b = batch.len() as f64;
    for s in batch {
        let f = forward(params, cfg, s)?;
        backward(params, cfg, s, &f, 1.0 / b, lambda / b, &mut g)?;
    }
    g.check_finite()?;
    Ok(g)
}

pub fn check_model_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[SampleInput],
    lambda: f64,
    step: f64,
) -> Result<GradCheckReport> {
    let g = batch_gradient(params, cfg, batch, lambda)?;
    finite_difference_check(params, &g, step, |p| batch_objective(p, cfg, batch, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-12, -1e-12) < 1e-3);
    }
}
