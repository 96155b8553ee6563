//! Training loop and checkpoint I/O for one configured run.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{QueryMode, RunConfig};
use super::prep::{build_sample, gaze_overlay, heatmap_target, prepare_gaze, FrameGaze, QuerySource};
use crate::error::{Error, Result};
use crate::model::{
    assign_tensors, backward, forward, load_checkpoint, save_checkpoint, LossBreakdown, ModelParams, Optimizer, OptimizerKind,
    ParamSet,
};
use crate::pseudo::{cosine_loss_and_grad, mse_loss_and_grad, CosineEmbedder, PseudoGazeNet};
use crate::synth::{generate, read_dataset, SynthDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config_hash: String,
    pub seed: u64,
    /// Pixel MSE per pseudo-net pretraining step.
    pub pseudo_pretrain: Vec<f64>,
    pub steps: Vec<StepLog>,
    /// `(step, teacher-forced loss on the validation split)`.
    pub validation: Vec<(usize, LossBreakdown)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub config: RunConfig,
    pub params: ModelParams,
    pub pseudo: Option<PseudoGazeNet>,
    pub log: TrainLog,
}

/// Loads `data_dir` when configured, otherwise generates the synthetic set for `cfg.seed`.
pub fn load_data(cfg: &RunConfig) -> Result<SynthDataset> {
    match &cfg.data_dir {
        Some(d) => {
            let ds = read_dataset(Path::new(d))?;
            if ds.config != cfg.data {
                return Err(Error::Config(format!("dataset at {d} was generated with a different data config")));
            }
            Ok(ds)
        }
        None => generate(&cfg.data, cfg.seed),
    }
}

pub fn prepare_split(cfg: &RunConfig, samples: &[crate::synth::SynthSample]) -> Result<Vec<Option<Vec<FrameGaze>>>> {
    let needs_gaze = cfg.model != super::config::ModelKind::Base;
    samples.iter().map(|s| if needs_gaze { prepare_gaze(cfg, s).map(Some) } else { Ok(None) }).collect()
}

fn non_finite(step: usize, what: &str) -> Error {
    Error::numeric("loss", format!("non-finite {what} at step {step}"))
}

fn pretrain_pseudo(cfg: &RunConfig, data: &SynthDataset, gaze: &[Option<Vec<FrameGaze>>], log: &mut TrainLog) -> Result<PseudoGazeNet> {
    let p = &cfg.pseudo;
    let mut net = PseudoGazeNet::init(cfg.data.channels, p.c1, p.c2, cfg.seed ^ 0x9e0d);
    let mut opt = Optimizer::new(OptimizerKind::adam(p.lr), None);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e0e);
    let frames: Vec<(usize, usize)> =
        (0..data.train.len()).flat_map(|i| (0..cfg.data.tau_o).map(move |f| (i, f))).collect();
    for step in 0..p.pretrain_steps {
        let batch: Vec<&(usize, usize)> = frames.choose_multiple(&mut rng, p.batch_size.min(frames.len())).collect();
        let mut g = net.zeros_like();
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for &&(i, f) in &batch {
            let fg = &gaze[i].as_ref().expect("gaze prepared")[f];
            let target = heatmap_target(cfg, fg)?;
            loss += scale * mse_loss_and_grad(&net, &data.train[i].frames[f], &target, scale, &mut g)?;
        }
        if !loss.is_finite() {
            return Err(non_finite(step, "pseudo-gaze pretraining loss"));
        }
        opt.update(&mut net, &g);
        log.pseudo_pretrain.push(loss);
    }
    Ok(net)
}

/// Teacher-forced loss over a split with the given query source.
pub fn split_loss(
    cfg: &RunConfig,
    params: &ModelParams,
    samples: &[crate::synth::SynthSample],
    gaze: &[Option<Vec<FrameGaze>>],
    source: QuerySource,
) -> Result<LossBreakdown> {
    let mc = cfg.model_config();
    let mut items = Vec::with_capacity(samples.len());
    for (s, g) in samples.iter().zip(gaze) {
        let owned = build_sample(cfg, s, g.as_deref(), source, &[])?;
        let f = forward(params, &mc, &owned.input())?;
        items.push(LossBreakdown::new(f.ce, f.kl, 0.0, cfg.lambda));
    }
    Ok(LossBreakdown::mean(&items, cfg.lambda))
}

pub fn train(cfg: &RunConfig, data: &SynthDataset) -> Result<Trained> {
    cfg.validate()?;
    let mc = cfg.model_config();
    let mut params = ModelParams::init(&mc, cfg.seed);
    let mut log = TrainLog { config_hash: cfg.train_hash(), seed: cfg.seed, ..TrainLog::default() };
    let gaze = prepare_split(cfg, &data.train)?;
    let val_gaze = if cfg.train.log_every > 0 { prepare_split(cfg, &data.val)? } else { Vec::new() };

    let mut pseudo = if cfg.query_mode == QueryMode::Pseudo { Some(pretrain_pseudo(cfg, data, &gaze, &mut log)?) } else { None };
    let mut pseudo_opt = Optimizer::new(OptimizerKind::adam(cfg.pseudo.lr), None);

    let clip = (cfg.train.clip > 0.0).then_some(cfg.train.clip);
    let mut opt = Optimizer::new(cfg.optimizer(), clip);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut cursor = order.len();
    let bsz = cfg.train.batch_size.min(data.train.len());

    for step in 0..cfg.train.steps {
        let mut batch = Vec::with_capacity(bsz);
        while batch.len() < bsz {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let b = batch.len() as f64;
        let mut g = ModelParams::zeros(&mc);
        let mut items = Vec::with_capacity(batch.len());
        let mut pg = pseudo.as_ref().map(|n| n.zeros_like());
        let embedder = pseudo.as_ref().map(|_| CosineEmbedder::new(mc.grid, params.embed_rgb.clone()));
        let source = QuerySource::for_training(cfg, pseudo.as_ref());
        for &i in &batch {
            let s = &data.train[i];
            let owned = build_sample(cfg, s, gaze[i].as_deref(), source, &[])?;
            let input = owned.input();
            let fwd = forward(&params, &mc, &input)?;
            backward(&params, &mc, &input, &fwd, 1.0 / b, cfg.lambda / b, &mut g)?;
            let mut cosine = 0.0;
            if let (Some(net), Some(pg), Some(emb)) = (pseudo.as_ref(), pg.as_mut(), embedder.as_ref()) {
                let f = step % cfg.data.tau_o;
                let fg = &gaze[i].as_ref().expect("gaze prepared")[f];
                let truth = gaze_overlay(cfg, &s.frames[f], fg)?;
                cosine = cosine_loss_and_grad(net, &s.frames[f], &truth, cfg.overlay_alpha, emb, 1.0 / b, pg)?;
            }
            items.push(LossBreakdown::new(fwd.ce, fwd.kl, cosine, cfg.lambda));
        }
        let loss = LossBreakdown::mean(&items, cfg.lambda);
        if !loss.total.is_finite() {
            return Err(non_finite(step, "training loss"));
        }
        g.check_finite()?;
        let grad_norm = opt.update(&mut params, &g);
        if let (Some(net), Some(pg)) = (pseudo.as_mut(), pg.as_ref()) {
            pseudo_opt.update(net, pg);
        }
        log.steps.push(StepLog { step, loss, grad_norm });
        if cfg.train.log_every > 0 && (step + 1) % cfg.train.log_every == 0 && !data.val.is_empty() {
            let source = QuerySource::for_training(cfg, pseudo.as_ref());
            log.validation.push((step + 1, split_loss(cfg, &params, &data.val, &val_gaze, source)?));
        }
    }
    params.check_finite()?;
    Ok(Trained { config: cfg.clone(), params, pseudo, log })
}

/// Writes the checkpoint (model and pseudo-net tensors) and `train_log.json`.
pub fn save_trained(t: &Trained, dir: &Path) -> Result<()> {
    let mut views = t.params.views();
    if let Some(net) = &t.pseudo {
        views.extend(net.views());
    }
    save_checkpoint(dir, t.config.seed, &t.config.train_hash(), serde_json::to_value(t.config.training_view())?, &views)?;
    std::fs::write(dir.join("train_log.json"), serde_json::to_string_pretty(&t.log)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCheckpoint {
    pub config_hash: String,
    pub seed: u64,
    pub params: ModelParams,
    pub pseudo: Option<PseudoGazeNet>,
}

/// Loads a checkpoint for `cfg`, refusing it when the training hashes differ.
pub fn load_trained(dir: &Path, cfg: &RunConfig) -> Result<LoadedCheckpoint> {
    let (manifest, tensors) = load_checkpoint(dir)?;
    let want = cfg.train_hash();
    if manifest.config_hash != want {
        return Err(Error::HashMismatch { checkpoint: manifest.config_hash, config: want });
    }
    let mc = cfg.model_config();
    let mut params = ModelParams::zeros(&mc);
    assign_tensors(params.views_mut(), &tensors)?;
    let pseudo = if cfg.query_mode == QueryMode::Pseudo {
        let mut net = PseudoGazeNet::zeros(cfg.data.channels, cfg.pseudo.c1, cfg.pseudo.c2);
        assign_tensors(net.views_mut(), &tensors)?;
        Some(net)
    } else {
        None
    };
    Ok(LoadedCheckpoint { config_hash: manifest.config_hash, seed: manifest.seed, params, pseudo })
}
