//! Per-sample forward and reverse-mode passes through the whole model.

use super::attention::{block_backward, block_forward, BlockCache};
use super::decoder::{argmax, context, step};
use super::embed::{embed_matrix, sinusoidal_positions};
use super::kl::{kl_gradient, kl_regularizer, KL_EPS};
use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::linalg::{log_softmax, matmul_tn_acc, outer_acc, softmax, vecmat, Mat};

pub struct FrameInput<'a> {
    /// `N x P` patchified RGB frame (keys and values).
    pub rgb: &'a Mat,
    /// `N x P` patchified query image; the RGB frame when absent.
    pub query: Option<&'a Mat>,
    /// Gaze distribution over patches, the KL target.
    pub gaze: Option<&'a [f64]>,
    /// Quantized gaze cell for gaze-in-text input (`N` means no gaze).
    pub gaze_cell: Option<usize>,
}

pub struct SampleInput<'a> {
    pub frames: Vec<FrameInput<'a>>,
    pub targets: &'a [usize],
}

struct FrameCache {
    blocks: Vec<BlockCache>,
}

struct Encoded {
    frames: Vec<FrameCache>,
    z: Vec<f64>,
    ctx: Vec<f64>,
    ctx_proj: Vec<f64>,
}

pub struct SampleForward {
    pub ce: f64,
    /// Mean KL over (frame, block) pairs that have a gaze target.
    pub kl: f64,
    /// `out_len x vocab`, teacher forced.
    pub logits: Mat,
    /// Attention distributions indexed `[frame][block]`.
    pub attn: Vec<Vec<Vec<f64>>>,
    enc: Encoded,
    hidden: Vec<Vec<f64>>,
    kl_terms: usize,
}

fn check_input(cfg: &ModelConfig, input: &SampleInput) -> Result<()> {
    if input.frames.len() != cfg.tau_o {
        return Err(Error::Shape(format!("expected {} frames, got {}", cfg.tau_o, input.frames.len())));
    }
    let (n, p) = (cfg.n_tokens(), cfg.patch_dim());
    for f in &input.frames {
        if f.rgb.rows != n || f.rgb.cols != p {
            return Err(Error::Shape(format!("frame patches {}x{}, expected {n}x{p}", f.rgb.rows, f.rgb.cols)));
        }
        if let Some(q) = f.query {
            if q.rows != n || q.cols != p {
                return Err(Error::Shape("query patches do not match the frame".into()));
            }
        }
        if let Some(g) = f.gaze {
            if g.len() != n {
                return Err(Error::Shape(format!("gaze distribution has {} entries, expected {n}", g.len())));
            }
        }
        if cfg.gaze_text && f.gaze_cell.map_or(true, |c| c > n) {
            return Err(Error::Shape("gaze-in-text input needs a gaze cell per frame".into()));
        }
    }
    Ok(())
}

fn encode(params: &ModelParams, cfg: &ModelConfig, input: &SampleInput) -> Result<Encoded> {
    check_input(cfg, input)?;
    let pos = sinusoidal_positions(cfg.n_tokens(), cfg.d_model);
    let mut frames = Vec::with_capacity(cfg.tau_o);
    let mut z = Vec::with_capacity(cfg.pool_in());
    for (f, fin) in input.frames.iter().enumerate() {
        let mut h = embed_matrix(fin.rgb, &params.embed_rgb, &pos);
        let mut cache = FrameCache { blocks: Vec::with_capacity(cfg.n_blocks) };
        if cfg.n_blocks > 0 {
            let u = embed_matrix(fin.query.unwrap_or(fin.rgb), &params.embed_gaze, &pos);
            for bp in &params.blocks {
                let bc = block_forward(bp, &u, &h, cfg.heads);
                h = bc.h_out.clone();
                cache.blocks.push(bc);
            }
        }
        let m = h.col_means();
        z.extend(m.iter().zip(params.time_emb.row(f)).map(|(a, b)| a + b));
        frames.push(cache);
    }
    if cfg.gaze_text {
        for fin in &input.frames {
            z.extend_from_slice(params.gaze_text_emb.row(fin.gaze_cell.unwrap_or(cfg.n_tokens())));
        }
    }
    let ctx = context(&params.decoder, &z);
    let ctx_proj = vecmat(&ctx, &params.decoder.ctx_w);
    Ok(Encoded { frames, z, ctx, ctx_proj })
}

fn attn_of(enc: &Encoded) -> Vec<Vec<Vec<f64>>> {
    enc.frames.iter().map(|f| f.blocks.iter().map(|b| b.dist.clone()).collect()).collect()
}

/// Teacher-forced forward pass.
pub fn forward(params: &ModelParams, cfg: &ModelConfig, input: &SampleInput) -> Result<SampleForward> {
    if input.targets.len() != cfg.out_len {
        return Err(Error::Shape(format!("{} targets, expected {}", input.targets.len(), cfg.out_len)));
    }
    let enc = encode(params, cfg, input)?;
    let dec = &params.decoder;
    let mut logits = Mat::zeros(cfg.out_len, cfg.vocab);
    let mut hidden = Vec::with_capacity(cfg.out_len);
    let mut ce = 0.0;
    let mut prev = dec.start_token();
    for (k, &t) in input.targets.iter().enumerate() {
        if t >= cfg.vocab {
            return Err(Error::Shape(format!("target token {t} outside vocabulary")));
        }
        let (h, l) = step(dec, &enc.ctx_proj, prev, k);
        ce -= log_softmax(&l)[t];
        logits.row_mut(k).copy_from_slice(&l);
        hidden.push(h);
        prev = t;
    }
    ce /= cfg.out_len as f64;

    let mut kl = 0.0;
    let mut kl_terms = 0;
    for (fc, fin) in enc.frames.iter().zip(&input.frames) {
        if let Some(g) = fin.gaze {
            for b in &fc.blocks {
                kl += kl_regularizer(&b.dist, g, KL_EPS)?;
                kl_terms += 1;
            }
        }
    }
    if kl_terms > 0 {
        kl /= kl_terms as f64;
    }
    let attn = attn_of(&enc);
    Ok(SampleForward { ce, kl, logits, attn, enc, hidden, kl_terms })
}

/// Greedy decoding; returns predicted tokens and the attention distributions.
pub fn greedy_decode(params: &ModelParams, cfg: &ModelConfig, input: &SampleInput) -> Result<(Vec<usize>, Vec<Vec<Vec<f64>>>)> {
    let enc = encode(params, cfg, input)?;
    let dec = &params.decoder;
    let mut prev = dec.start_token();
    let mut out = Vec::with_capacity(cfg.out_len);
    for k in 0..cfg.out_len {
        let (_, l) = step(dec, &enc.ctx_proj, prev, k);
        prev = argmax(&l);
        out.push(prev);
    }
    Ok((out, attn_of(&enc)))
}

/// Accumulates `ce_scale * ∂CE/∂θ + kl_scale * ∂KL/∂θ` into `g`.
pub fn backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    input: &SampleInput,
    fwd: &SampleForward,
    ce_scale: f64,
    kl_scale: f64,
    g: &mut ModelParams,
) -> Result<()> {
    let dec = &params.decoder;
    let gd = &mut g.decoder;
    let hd = cfg.hidden_dim;
    let mut d_ctx_proj = vec![0.0; hd];
    let inv_t = ce_scale / cfg.out_len as f64;
    let mut prev = dec.start_token();
    for (k, &t) in input.targets.iter().enumerate() {
        let mut dl = softmax(fwd.logits.row(k));
        dl[t] -= 1.0;
        dl.iter_mut().for_each(|v| *v *= inv_t);
        let h = &fwd.hidden[k];
        outer_acc(h, &dl, &mut gd.out.w);
        for (b, d) in gd.out.b.iter_mut().zip(&dl) {
            *b += d;
        }
        let dh: Vec<f64> = (0..hd).map(|i| crate::linalg::dot(dec.out.w.row(i), &dl)).collect();
        let dpre: Vec<f64> = dh.iter().zip(h).map(|(d, h)| d * (1.0 - h * h)).collect();
        for (i, &v) in dpre.iter().enumerate() {
            d_ctx_proj[i] += v;
            gd.tok_emb.data[prev * hd + i] += v;
            gd.pos_emb.data[k * hd + i] += v;
            gd.hidden_b[i] += v;
        }
        prev = t;
    }

    let enc = &fwd.enc;
    outer_acc(&enc.ctx, &d_ctx_proj, &mut gd.ctx_w);
    let d_ctx: Vec<f64> = (0..cfg.ctx_dim).map(|i| crate::linalg::dot(dec.ctx_w.row(i), &d_ctx_proj)).collect();
    let d_ctx_pre: Vec<f64> = d_ctx.iter().zip(&enc.ctx).map(|(d, c)| d * (1.0 - c * c)).collect();
    outer_acc(&enc.z, &d_ctx_pre, &mut gd.pool.w);
    for (b, d) in gd.pool.b.iter_mut().zip(&d_ctx_pre) {
        *b += d;
    }
    let d_z: Vec<f64> = (0..enc.z.len()).map(|i| crate::linalg::dot(dec.pool.w.row(i), &d_ctx_pre)).collect();

    let d = cfg.d_model;
    let n = cfg.n_tokens();
    if cfg.gaze_text {
        let off = cfg.tau_o * d;
        for (f, fin) in input.frames.iter().enumerate() {
            let cell = fin.gaze_cell.unwrap_or(n);
            for (gv, dv) in g.gaze_text_emb.row_mut(cell).iter_mut().zip(&d_z[off + f * d..off + (f + 1) * d]) {
                *gv += dv;
            }
        }
    }

    let kl_term_scale = if fwd.kl_terms > 0 { kl_scale / fwd.kl_terms as f64 } else { 0.0 };
    for (f, (fc, fin)) in enc.frames.iter().zip(&input.frames).enumerate() {
        let dz = &d_z[f * d..(f + 1) * d];
        for (gv, dv) in g.time_emb.row_mut(f).iter_mut().zip(dz) {
            *gv += dv;
        }
        // mean over rows
        let mut d_h = Mat::zeros(n, d);
        let inv_n = 1.0 / n as f64;
        for r in 0..n {
            for (x, dv) in d_h.row_mut(r).iter_mut().zip(dz) {
                *x = dv * inv_n;
            }
        }
        if cfg.n_blocks > 0 {
            let mut d_u = Mat::zeros(n, d);
            for (bi, bc) in fc.blocks.iter().enumerate().rev() {
                let d_dist = match fin.gaze {
                    Some(gz) if kl_term_scale != 0.0 => {
                        let mut gr = kl_gradient(&bc.dist, gz, KL_EPS);
                        gr.iter_mut().for_each(|v| *v *= kl_term_scale);
                        Some(gr)
                    }
                    _ => None,
                };
                d_h = block_backward(&params.blocks[bi], bc, &d_h, d_dist.as_deref(), cfg.heads, &mut g.blocks[bi], &mut d_u);
            }
            let xq = fin.query.unwrap_or(fin.rgb);
            matmul_tn_acc(xq, &d_u, &mut g.embed_gaze.w);
            for (b, s) in g.embed_gaze.b.iter_mut().zip(d_u.col_sums()) {
                *b += s;
            }
        }
        matmul_tn_acc(fin.rgb, &d_h, &mut g.embed_rgb.w);
        for (b, s) in g.embed_rgb.b.iter_mut().zip(d_h.col_sums()) {
            *b += s;
        }
    }
    Ok(())
}
