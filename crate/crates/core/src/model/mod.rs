//! The toy gaze-regularized predictor: patch embedding, gaze-query attention
//! blocks regularized toward gaze distributions, pooled time-embedded frame
//! features and a small autoregressive token decoder.

mod attention;
mod checkpoint;
mod decoder;
mod embed;
mod gradcheck;
mod kl;
mod loss;
mod network;
mod optim;

pub use attention::{attention_from_qk, gaze_attention_block, AttentionOutput, BlockParams};
pub use checkpoint::{assign_tensors, load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_FORMAT};
pub use decoder::{pool_and_decode, DecoderParams};
pub use embed::{embed_patches, patchify, sinusoidal_positions, unpatchify_into, FeatureMap, FeatureSource};
pub use gradcheck::{
    batch_gradient, batch_objective, check_model_gradients, finite_difference_check, relative_error, GradCheckReport, ParamCheck,
    REL_ERR_FLOOR,
};
pub use kl::{kl_gradient, kl_regularizer, smooth_target, KL_EPS};
pub use loss::{loss_total, LossBreakdown};
pub use network::{backward, forward, greedy_decode, FrameInput, SampleForward, SampleInput};
pub use optim::{Optimizer, OptimizerKind};
pub(crate) use embed::embed_matrix;
pub use decoder::argmax as argmax_index;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::patch::PatchGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid: PatchGrid,
    pub channels: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Gaze-regularized attention blocks; 0 gives the base model.
    pub n_blocks: usize,
    pub tau_o: usize,
    /// Output tokens per sample (anticipation steps times tokens per step).
    pub out_len: usize,
    pub vocab: usize,
    pub ctx_dim: usize,
    pub hidden_dim: usize,
    /// Append quantized gaze-cell embeddings to the decoder context.
    pub gaze_text: bool,
    pub init_scale: f64,
}

impl ModelConfig {
    pub fn n_tokens(&self) -> usize {
        self.grid.n_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.grid.patch_w * self.grid.patch_h * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn pool_in(&self) -> usize {
        self.tau_o * self.d_model * if self.gaze_text { 2 } else { 1 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.tau_o == 0 || self.out_len == 0 || self.vocab < 2 {
            return bad("tau_o, out_len must be positive and vocab >= 2");
        }
        if self.ctx_dim == 0 || self.hidden_dim == 0 || self.channels == 0 {
            return bad("ctx_dim, hidden_dim and channels must be positive");
        }
        if self.gaze_text && self.n_blocks > 0 {
            return bad("gaze-in-text input runs without attention blocks");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in x out`.
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Linear { w: Mat::zeros(n_in, n_out), b: vec![0.0; n_out] }
    }
}

/// Every trainable tensor of the model (also used as the gradient container).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embed_rgb: Linear,
    pub embed_gaze: Linear,
    pub blocks: Vec<BlockParams>,
    /// `tau_o x d_model`.
    pub time_emb: Mat,
    /// `(N + 1) x d_model`; the last row encodes "no gaze". Empty unless gaze-text.
    pub gaze_text_emb: Mat,
    pub decoder: DecoderParams,
}

/// Named view of one parameter tensor.
pub struct ParamView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamViewMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

/// A collection of named tensors, in a fixed order.
pub trait ParamSet {
    fn views(&self) -> Vec<ParamView<'_>>;
    fn views_mut(&mut self) -> Vec<ParamViewMut<'_>>;
}

impl ParamSet for ModelParams {
    fn views(&self) -> Vec<ParamView<'_>> {
        ModelParams::views(self)
    }

    fn views_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        ModelParams::views_mut(self)
    }
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (p, d, n) = (cfg.patch_dim(), cfg.d_model, cfg.n_tokens());
        ModelParams {
            embed_rgb: Linear::zeros(p, d),
            embed_gaze: if cfg.n_blocks > 0 { Linear::zeros(p, d) } else { Linear::zeros(0, 0) },
            blocks: (0..cfg.n_blocks).map(|_| BlockParams::zeros(d)).collect(),
            time_emb: Mat::zeros(cfg.tau_o, d),
            gaze_text_emb: if cfg.gaze_text { Mat::zeros(n + 1, d) } else { Mat::zeros(0, 0) },
            decoder: DecoderParams::zeros(cfg),
        }
    }

    /// Seeded Gaussian initialization scaled by `init_scale / sqrt(fan_in)`; biases start at zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut p = ModelParams::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for view in p.views_mut() {
            if view.name.ends_with(".b") || view.shape.len() < 2 {
                continue;
            }
            let is_table = view.name.ends_with("_emb");
            let fan_in = if is_table { view.shape[1] } else { view.shape[0] };
            let std = cfg.init_scale / (fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            view.data.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        p
    }

    pub fn views(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        push_linear(&mut out, "embed_rgb", &self.embed_rgb);
        if !self.embed_gaze.w.data.is_empty() {
            push_linear(&mut out, "embed_gaze", &self.embed_gaze);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, m) in [("wq", &b.wq), ("wk", &b.wk), ("wv", &b.wv), ("wo", &b.wo)] {
                out.push(ParamView { name: format!("blocks.{i}.{n}"), shape: vec![m.rows, m.cols], data: &m.data });
            }
            out.push(ParamView { name: format!("blocks.{i}.query_ctx"), shape: vec![b.query_ctx.len()], data: &b.query_ctx });
        }
        out.push(ParamView { name: "time_emb".into(), shape: vec![self.time_emb.rows, self.time_emb.cols], data: &self.time_emb.data });
        if !self.gaze_text_emb.data.is_empty() {
            out.push(ParamView {
                name: "gaze_text_emb".into(),
                shape: vec![self.gaze_text_emb.rows, self.gaze_text_emb.cols],
                data: &self.gaze_text_emb.data,
            });
        }
        let d = &self.decoder;
        push_linear(&mut out, "decoder.pool", &d.pool);
        for (n, m) in [("decoder.ctx_w", &d.ctx_w), ("decoder.tok_emb", &d.tok_emb), ("decoder.pos_emb", &d.pos_emb)] {
            out.push(ParamView { name: n.into(), shape: vec![m.rows, m.cols], data: &m.data });
        }
        out.push(ParamView { name: "decoder.hidden.b".into(), shape: vec![d.hidden_b.len()], data: &d.hidden_b });
        push_linear(&mut out, "decoder.out", &d.out);
        out
    }

    pub fn views_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut out = Vec::new();
        push_linear_mut(&mut out, "embed_rgb", &mut self.embed_rgb);
        if !self.embed_gaze.w.data.is_empty() {
            push_linear_mut(&mut out, "embed_gaze", &mut self.embed_gaze);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (n, m) in [("wq", &mut b.wq), ("wk", &mut b.wk), ("wv", &mut b.wv), ("wo", &mut b.wo)] {
                out.push(ParamViewMut { name: format!("blocks.{i}.{n}"), shape: vec![m.rows, m.cols], data: &mut m.data });
            }
            out.push(ParamViewMut {
                name: format!("blocks.{i}.query_ctx"),
                shape: vec![b.query_ctx.len()],
                data: &mut b.query_ctx,
            });
        }
        let te = &mut self.time_emb;
        out.push(ParamViewMut { name: "time_emb".into(), shape: vec![te.rows, te.cols], data: &mut te.data });
        if !self.gaze_text_emb.data.is_empty() {
            let g = &mut self.gaze_text_emb;
            out.push(ParamViewMut { name: "gaze_text_emb".into(), shape: vec![g.rows, g.cols], data: &mut g.data });
        }
        let d = &mut self.decoder;
        push_linear_mut(&mut out, "decoder.pool", &mut d.pool);
        for (n, m) in [("decoder.ctx_w", &mut d.ctx_w), ("decoder.tok_emb", &mut d.tok_emb), ("decoder.pos_emb", &mut d.pos_emb)] {
            out.push(ParamViewMut { name: n.into(), shape: vec![m.rows, m.cols], data: &mut m.data });
        }
        out.push(ParamViewMut { name: "decoder.hidden.b".into(), shape: vec![d.hidden_b.len()], data: &mut d.hidden_b });
        push_linear_mut(&mut out, "decoder.out", &mut d.out);
        out
    }

    pub fn n_scalars(&self) -> usize {
        self.views().iter().map(|v| v.data.len()).sum()
    }

    pub fn zero_(&mut self) {
        for v in self.views_mut() {
            v.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// First non-finite tensor, if any.
    pub fn check_finite(&self) -> Result<()> {
        for v in self.views() {
            if v.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric(v.name, "non-finite value"));
            }
        }
        Ok(())
    }
}

fn push_linear<'a>(out: &mut Vec<ParamView<'a>>, name: &str, l: &'a Linear) {
    out.push(ParamView { name: format!("{name}.w"), shape: vec![l.w.rows, l.w.cols], data: &l.w.data });
    out.push(ParamView { name: format!("{name}.b"), shape: vec![l.b.len()], data: &l.b });
}

fn push_linear_mut<'a>(out: &mut Vec<ParamViewMut<'a>>, name: &str, l: &'a mut Linear) {
    out.push(ParamViewMut { name: format!("{name}.w"), shape: vec![l.w.rows, l.w.cols], data: &mut l.w.data });
    out.push(ParamViewMut { name: format!("{name}.b"), shape: vec![l.b.len()], data: &mut l.b });
}
