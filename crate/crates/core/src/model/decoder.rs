//! Pooling stand-in for the resampler and the token decoder.

use super::embed::FeatureMap;
use super::{Linear, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::linalg::{vecmat, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// Concatenated per-frame features -> fixed-size context.
    pub pool: Linear,
    /// `ctx_dim x hidden`.
    pub ctx_w: Mat,
    /// `(vocab + 1) x hidden`; the last row is the start token.
    pub tok_emb: Mat,
    /// `out_len x hidden`.
    pub pos_emb: Mat,
    pub hidden_b: Vec<f64>,
    pub out: Linear,
}

impl DecoderParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        DecoderParams {
            pool: Linear::zeros(cfg.pool_in(), cfg.ctx_dim),
            ctx_w: Mat::zeros(cfg.ctx_dim, cfg.hidden_dim),
            tok_emb: Mat::zeros(cfg.vocab + 1, cfg.hidden_dim),
            pos_emb: Mat::zeros(cfg.out_len, cfg.hidden_dim),
            hidden_b: vec![0.0; cfg.hidden_dim],
            out: Linear::zeros(cfg.hidden_dim, cfg.vocab),
        }
    }

    pub fn start_token(&self) -> usize {
        self.tok_emb.rows - 1
    }
}

pub(crate) fn context(p: &DecoderParams, z: &[f64]) -> Vec<f64> {
    let mut c = vecmat(z, &p.pool.w);
    for (v, b) in c.iter_mut().zip(&p.pool.b) {
        *v = (*v + b).tanh();
    }
    c
}

/// Hidden state and logits for output slot `k` given the previous token.
pub(crate) fn step(p: &DecoderParams, ctx_proj: &[f64], prev: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let h: Vec<f64> = ctx_proj
        .iter()
        .zip(p.tok_emb.row(prev))
        .zip(p.pos_emb.row(k))
        .zip(&p.hidden_b)
        .map(|(((c, t), q), b)| (c + t + q + b).tanh())
        .collect();
    let mut logits = vecmat(&h, &p.out.w);
    for (l, b) in logits.iter_mut().zip(&p.out.b) {
        *l += b;
    }
    (h, logits)
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean-pools each frame's tokens, adds that frame's time embedding,
/// concatenates the frames, projects to the context and greedily decodes
/// `out_len` tokens. Returns `out_len x vocab` logits.
pub fn pool_and_decode(frames: &[FeatureMap], params: &ModelParams, cfg: &ModelConfig) -> Result<Mat> {
    if frames.len() != cfg.tau_o {
        return Err(Error::Shape(format!("expected {} frames, got {}", cfg.tau_o, frames.len())));
    }
    if cfg.gaze_text {
        return Err(Error::Config("gaze-in-text decoding needs gaze cells; use the network forward".into()));
    }
    let mut z = Vec::with_capacity(cfg.pool_in());
    for (f, fm) in frames.iter().enumerate() {
        let m = fm.tokens.col_means();
        z.extend(m.iter().zip(params.time_emb.row(f)).map(|(a, b)| a + b));
    }
    let dec = &params.decoder;
    let ctx = context(dec, &z);
    let ctx_proj = vecmat(&ctx, &dec.ctx_w);
    let mut out = Mat::zeros(cfg.out_len, cfg.vocab);
    let mut prev = dec.start_token();
    for k in 0..cfg.out_len {
        let (_, logits) = step(dec, &ctx_proj, prev, k);
        prev = argmax(&logits);
        out.row_mut(k).copy_from_slice(&logits);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::embed::FeatureSource;
    use crate::patch::PatchGrid;

    fn cfg() -> ModelConfig {
        ModelConfig {
            grid: PatchGrid::new(4, 4, 8, 8).unwrap(),
            channels: 1,
            d_model: 16,
            heads: 1,
            n_blocks: 2,
            tau_o: 5,
            out_len: 6,
            vocab: 32,
            ctx_dim: 16,
            hidden_dim: 16,
            gaze_text: false,
            init_scale: 1.0,
        }
    }

    fn frames(c: &ModelConfig, scale: f64) -> Vec<FeatureMap> {
        (0..c.tau_o)
            .map(|f| FeatureMap {
                tokens: Mat::from_vec(16, 16, (0..256).map(|i| scale * ((i * 7 + f * 13) % 11) as f64 / 11.0).collect()),
                source: FeatureSource::Rgb,
            })
            .collect()
    }

    #[test]
    fn zero_network_gives_uniform_logits() {
        let c = cfg();
        let out = pool_and_decode(&frames(&c, 0.0), &ModelParams::zeros(&c), &c).unwrap();
        assert_eq!((out.rows, out.cols), (6, 32));
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frame_order_matters() {
        let c = cfg();
        let p = ModelParams::init(&c, 1);
        let f = frames(&c, 1.0);
        let mut g = f.clone();
        g.swap(0, 3);
        assert_ne!(pool_and_decode(&f, &p, &c).unwrap(), pool_and_decode(&g, &p, &c).unwrap());
    }

    #[test]
    fn frame_count_checked() {
        let c = cfg();
        let mut f = frames(&c, 1.0);
        f.pop();
        assert!(pool_and_decode(&f, &ModelParams::zeros(&c), &c).is_err());
    }
}
