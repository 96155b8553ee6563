use serde::{Deserialize, Serialize};

use super::kl::{kl_regularizer, KL_EPS};
use crate::error::{Error, Result};
use crate::linalg::{log_softmax, Mat};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kl: f64,
    pub cosine: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(ce: f64, kl: f64, cosine: f64, lambda: f64) -> Self {
        LossBreakdown { ce, kl, cosine, total: ce + lambda * kl + cosine }
    }

    /// Component-wise mean; `total` is recomputed from the means.
    pub fn mean(items: &[LossBreakdown], lambda: f64) -> Self {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let ce = items.iter().map(|l| l.ce).sum::<f64>() / n;
        let kl = items.iter().map(|l| l.kl).sum::<f64>() / n;
        let cosine = items.iter().map(|l| l.cosine).sum::<f64>() / n;
        LossBreakdown::new(ce, kl, cosine, lambda)
    }
}

/// Mean token cross-entropy plus `lambda` times the mean KL over every
/// (frame, block) attention distribution, plus the cosine term.
pub fn loss_total(
    logits: &Mat,
    targets: &[usize],
    attn_distributions: &[Vec<f64>],
    gaze_distributions: &[Vec<f64>],
    lambda: f64,
    cosine: f64,
) -> Result<LossBreakdown> {
    if logits.rows != targets.len() {
        return Err(Error::Shape(format!("{} logit rows for {} targets", logits.rows, targets.len())));
    }
    if attn_distributions.len() != gaze_distributions.len() {
        return Err(Error::Shape(format!(
            "{} attention distributions for {} gaze distributions",
            attn_distributions.len(),
            gaze_distributions.len()
        )));
    }
    let mut ce = 0.0;
    for (k, &t) in targets.iter().enumerate() {
        if t >= logits.cols {
            return Err(Error::Shape(format!("target token {t} outside vocabulary")));
        }
        ce -= log_softmax(logits.row(k))[t];
    }
    ce /= targets.len().max(1) as f64;
    let mut kl = 0.0;
    for (a, h) in attn_distributions.iter().zip(gaze_distributions) {
        kl += kl_regularizer(a, h, KL_EPS)?;
    }
    if !attn_distributions.is_empty() {
        kl /= attn_distributions.len() as f64;
    }
    Ok(LossBreakdown::new(ce, kl, cosine, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_zero_drops_kl() {
        let l = LossBreakdown::new(1.5, 0.7, 0.0, 0.0);
        assert_eq!(l.total, 1.5);
        let l = LossBreakdown::new(1.5, 0.7, 0.25, 0.0);
        assert_eq!(l.total, 1.75);
    }

    #[test]
    fn arithmetic_example() {
        let l = LossBreakdown::new(2.0, 0.01, 0.0, 100.0);
        assert_eq!(l.total, 3.0);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Mat::zeros(3, 8);
        let l = loss_total(&logits, &[0, 3, 7], &[], &[], 100.0, 0.0).unwrap();
        assert!((l.ce - 8f64.ln()).abs() < 1e-12);
        assert_eq!(l.kl, 0.0);
    }

    #[test]
    fn count_mismatch_rejected() {
        let logits = Mat::zeros(2, 4);
        assert!(loss_total(&logits, &[0], &[], &[], 1.0, 0.0).is_err());
        assert!(loss_total(&logits, &[0, 1], &[vec![1.0]], &[], 1.0, 0.0).is_err());
    }

    #[test]
    fn monotone_in_lambda() {
        let logits = Mat::zeros(1, 4);
        let a = vec![vec![0.7, 0.3]];
        let h = vec![vec![0.2, 0.8]];
        let mut last = f64::NEG_INFINITY;
        for lambda in [0.0, 0.1, 1.0, 10.0, 100.0, 1000.0] {
            let l = loss_total(&logits, &[1], &a, &h, lambda, 0.0).unwrap();
            assert!(l.total >= last);
            last = l.total;
        }
    }
}
