//! Finite-difference gradient check of a configured run on a micro-batch.

use super::config::{QueryMode, RunConfig};
use super::prep::{build_sample, gaze_overlay, QuerySource};
use super::train::prepare_split;
use crate::error::{Error, Result};
use crate::model::{check_model_gradients, finite_difference_check, GradCheckReport, ModelParams};
use crate::pseudo::{cosine_loss, cosine_loss_and_grad, compose_pseudo_overlay, CosineEmbedder, PseudoGazeNet};
use crate::synth::generate_sample;

/// Checks every trainable parameter of `cfg` on the first `n_samples`
/// synthetic samples for `cfg.seed`. In pseudo mode the pseudo-gaze network
/// is checked against the cosine objective as well.
pub fn grad_check(cfg: &RunConfig, n_samples: usize, step: f64) -> Result<GradCheckReport> {
    cfg.validate()?;
    if n_samples == 0 {
        return Err(Error::Param("gradient check needs at least one sample".into()));
    }
    let mc = cfg.model_config();
    cfg.data.validate()?;
    let samples: Vec<_> = (0..n_samples as u64).map(|i| generate_sample(&cfg.data, cfg.seed, i)).collect();
    let gaze = prepare_split(cfg, &samples)?;
    let net = (cfg.query_mode == QueryMode::Pseudo)
        .then(|| PseudoGazeNet::init(cfg.data.channels, cfg.pseudo.c1, cfg.pseudo.c2, cfg.seed ^ 0x9e0d));
    let source = QuerySource::for_training(cfg, net.as_ref());
    let owned = samples
        .iter()
        .zip(&gaze)
        .map(|(s, g)| build_sample(cfg, s, g.as_deref(), source, &[]))
        .collect::<Result<Vec<_>>>()?;
    let batch: Vec<_> = owned.iter().map(|o| o.input()).collect();
    let params = ModelParams::init(&mc, cfg.seed);
    let mut report = check_model_gradients(&params, &mc, &batch, cfg.lambda, step)?;

    if let Some(net) = &net {
        let emb = CosineEmbedder::new(mc.grid, params.embed_rgb.clone());
        let pairs = samples
            .iter()
            .zip(&gaze)
            .map(|(s, g)| {
                let fg = &g.as_ref().expect("pseudo mode prepares gaze")[0];
                Ok((&s.frames[0], gaze_overlay(cfg, &s.frames[0], fg)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / pairs.len() as f64;
        let mut g = net.zeros_like();
        for (img, truth) in &pairs {
            cosine_loss_and_grad(net, img, truth, cfg.overlay_alpha, &emb, scale, &mut g)?;
        }
        let pseudo = finite_difference_check(net, &g, step, |n| {
            let mut total = 0.0;
            for (img, truth) in &pairs {
                total += scale * cosine_loss(&compose_pseudo_overlay(n, img, cfg.overlay_alpha)?, truth, &emb)?;
            }
            Ok(total)
        })?;
        report.merge(pseudo);
    }
    Ok(report)
}
