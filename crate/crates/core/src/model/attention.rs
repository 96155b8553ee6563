//! Gaze-query cross-attention: queries from gaze-bearing tokens, keys and
//! values from RGB tokens.
//!
//! Each query row is offset by a content-pooled summary of all query tokens
//! (`c = Σ softmax(U w)_i U_i`), so every row can see where the gaze
//! highlight sits before scoring keys.

use super::embed::{FeatureMap, FeatureSource};
use crate::error::{Error, Result};
use crate::linalg::{dot, matmul, matmul_nt, matmul_tn, matmul_tn_acc, softmax, softmax_rows, softmax_rows_backward, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    /// Scores query tokens for the pooled query context.
    pub query_ctx: Vec<f64>,
}

impl BlockParams {
    pub fn zeros(d: usize) -> Self {
        BlockParams {
            wq: Mat::zeros(d, d),
            wk: Mat::zeros(d, d),
            wv: Mat::zeros(d, d),
            wo: Mat::zeros(d, d),
            query_ctx: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `N_q x D`: `A V` with heads concatenated.
    pub values_out: Mat,
    /// `N_q x N_k`, averaged over heads.
    pub attn_weights: Mat,
    /// Mean of `attn_weights` over query rows.
    pub attn_distribution: Vec<f64>,
}

/// Scaled dot-product attention per head. Returns per-head weights and the
/// concatenated head outputs.
pub fn attention_from_qk(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> (Vec<Mat>, Mat) {
    let d = q.cols;
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut weights = Vec::with_capacity(heads);
    let mut out = Mat::zeros(q.rows, v.cols);
    let dv = v.cols / heads;
    for h in 0..heads {
        let (qh, kh, vh) = (q.cols_slice(h * dk, dk), k.cols_slice(h * dk, dk), v.cols_slice(h * dv, dv));
        let mut s = matmul_nt(&qh, &kh);
        s.data.iter_mut().for_each(|x| *x *= scale);
        let a = softmax_rows(&s);
        out.set_cols(h * dv, &matmul(&a, &vh));
        weights.push(a);
    }
    (weights, out)
}

/// Mean over heads and query rows.
pub(crate) fn reduce_distribution(weights: &[Mat]) -> Vec<f64> {
    let n_k = weights[0].cols;
    let mut dist = vec![0.0; n_k];
    let denom = (weights.len() * weights[0].rows) as f64;
    for a in weights {
        for r in 0..a.rows {
            for (d, v) in dist.iter_mut().zip(a.row(r)) {
                *d += v;
            }
        }
    }
    dist.iter_mut().for_each(|v| *v /= denom);
    dist
}

pub(crate) struct BlockCache {
    pub u: Mat,
    pub h_in: Mat,
    pub pool: Vec<f64>,
    pub q_in: Mat,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    pub weights: Vec<Mat>,
    pub o: Mat,
    pub h_out: Mat,
    pub dist: Vec<f64>,
}

pub(crate) fn query_input(p: &BlockParams, u: &Mat) -> (Vec<f64>, Mat) {
    let scores: Vec<f64> = (0..u.rows).map(|i| dot(u.row(i), &p.query_ctx)).collect();
    let pool = softmax(&scores);
    let mut ctx = vec![0.0; u.cols];
    for (i, &w) in pool.iter().enumerate() {
        for (c, x) in ctx.iter_mut().zip(u.row(i)) {
            *c += w * x;
        }
    }
    let mut q_in = u.clone();
    q_in.add_row_vec(&ctx);
    (pool, q_in)
}

/// One block: `H_out = H_in + Attn(Q(U), K(H_in), V(H_in)) Wo`.
pub(crate) fn block_forward(p: &BlockParams, u: &Mat, h_in: &Mat, heads: usize) -> BlockCache {
    let (pool, q_in) = query_input(p, u);
    let q = matmul(&q_in, &p.wq);
    let k = matmul(h_in, &p.wk);
    let v = matmul(h_in, &p.wv);
    let (weights, o) = attention_from_qk(&q, &k, &v, heads);
    let mut h_out = matmul(&o, &p.wo);
    h_out.add_assign(h_in);
    let dist = reduce_distribution(&weights);
    BlockCache { u: u.clone(), h_in: h_in.clone(), pool, q_in, q, k, v, weights, o, h_out, dist }
}

/// Backpropagates `d_out` (and `d_dist`, the gradient w.r.t. the attention
/// distribution) through one block. Accumulates parameter gradients into
/// `g`, query-token gradients into `d_u`, and returns the gradient w.r.t. `h_in`.
pub(crate) fn block_backward(
    p: &BlockParams,
    c: &BlockCache,
    d_out: &Mat,
    d_dist: Option<&[f64]>,
    heads: usize,
    g: &mut BlockParams,
    d_u: &mut Mat,
) -> Mat {
    let u_rows = c.q_in.rows;
    let d = c.q.cols;
    let dk = d / heads;
    let dv = c.v.cols / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let mut d_h = d_out.clone();
    matmul_tn_acc(&c.o, d_out, &mut g.wo);
    let d_o = matmul_nt(d_out, &p.wo);

    let mut d_q = Mat::zeros(c.q.rows, d);
    let mut d_k = Mat::zeros(c.k.rows, d);
    let mut d_v = Mat::zeros(c.v.rows, c.v.cols);
    let dist_scale = 1.0 / (heads * u_rows) as f64;
    for h in 0..heads {
        let a = &c.weights[h];
        let d_oh = d_o.cols_slice(h * dv, dv);
        let vh = c.v.cols_slice(h * dv, dv);
        let qh = c.q.cols_slice(h * dk, dk);
        let kh = c.k.cols_slice(h * dk, dk);
        d_v.set_cols(h * dv, &matmul_tn(a, &d_oh));
        let mut d_a = matmul_nt(&d_oh, &vh);
        if let Some(dd) = d_dist {
            for r in 0..d_a.rows {
                for (x, g) in d_a.row_mut(r).iter_mut().zip(dd) {
                    *x += g * dist_scale;
                }
            }
        }
        let mut d_s = softmax_rows_backward(a, &d_a);
        d_s.data.iter_mut().for_each(|x| *x *= scale);
        d_q.set_cols(h * dk, &matmul(&d_s, &kh));
        d_k.set_cols(h * dk, &matmul_tn(&d_s, &qh));
    }

    matmul_tn_acc(&c.q_in, &d_q, &mut g.wq);
    let d_qin = matmul_nt(&d_q, &p.wq);
    matmul_tn_acc(&c.h_in, &d_k, &mut g.wk);
    d_h.add_assign(&matmul_nt(&d_k, &p.wk));
    matmul_tn_acc(&c.h_in, &d_v, &mut g.wv);
    d_h.add_assign(&matmul_nt(&d_v, &p.wv));

    // q_in = U + 1 ctxᵀ, ctx = Σ pool_i U_i, pool = softmax(U w)
    d_u.add_assign(&d_qin);
    let d_ctx = d_qin.col_sums();
    let d_pool: Vec<f64> = (0..u_rows).map(|i| dot(c.u.row(i), &d_ctx)).collect();
    for i in 0..u_rows {
        for (du, dc) in d_u.row_mut(i).iter_mut().zip(&d_ctx) {
            *du += c.pool[i] * dc;
        }
    }
    let s = dot(&c.pool, &d_pool);
    for i in 0..u_rows {
        let d_score = c.pool[i] * (d_pool[i] - s);
        for (gw, x) in g.query_ctx.iter_mut().zip(c.u.row(i)) {
            *gw += d_score * x;
        }
        for (du, w) in d_u.row_mut(i).iter_mut().zip(&p.query_ctx) {
            *du += d_score * w;
        }
    }
    d_h
}

/// Standalone block evaluation on feature maps (no residual, no output projection).
pub fn gaze_attention_block(
    q_feat: &FeatureMap,
    kv_feat: &FeatureMap,
    p: &BlockParams,
    heads: usize,
) -> Result<AttentionOutput> {
    if kv_feat.source != FeatureSource::Rgb {
        return Err(Error::Param("keys and values must come from RGB features".into()));
    }
    if q_feat.tokens.cols != kv_feat.tokens.cols || q_feat.tokens.cols != p.wq.rows {
        return Err(Error::Shape("query/key feature widths differ".into()));
    }
    if heads == 0 || q_feat.tokens.cols % heads != 0 {
        return Err(Error::Shape("feature width must be a multiple of heads".into()));
    }
    for (name, m) in [("q_feat", &q_feat.tokens), ("kv_feat", &kv_feat.tokens)] {
        if !m.all_finite() {
            return Err(Error::numeric(name, "non-finite input"));
        }
    }
    let (_, q_in) = query_input(p, &q_feat.tokens);
    let q = matmul(&q_in, &p.wq);
    let k = matmul(&kv_feat.tokens, &p.wk);
    let v = matmul(&kv_feat.tokens, &p.wv);
    let (weights, values_out) = attention_from_qk(&q, &k, &v, heads);
    let attn_distribution = reduce_distribution(&weights);
    let mut attn_weights = Mat::zeros(q.rows, k.rows);
    for a in &weights {
        attn_weights.add_assign(a);
    }
    attn_weights.data.iter_mut().for_each(|x| *x /= heads as f64);
    Ok(AttentionOutput { values_out, attn_weights, attn_distribution })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fm(rows: usize, cols: usize, data: Vec<f64>, source: FeatureSource) -> FeatureMap {
        FeatureMap { tokens: Mat::from_vec(rows, cols, data), source }
    }

    fn identity_block(d: usize) -> BlockParams {
        let mut p = BlockParams::zeros(d);
        for m in [&mut p.wq, &mut p.wk, &mut p.wv, &mut p.wo] {
            for i in 0..d {
                m.data[i * d + i] = 1.0;
            }
        }
        p
    }

    #[test]
    fn single_key_passes_values_through() {
        let p = identity_block(2);
        let q = fm(3, 2, vec![1.0, -2.0, 0.5, 7.0, 3.0, 3.0], FeatureSource::GazeOverlaid);
        let kv = fm(1, 2, vec![0.25, -4.0], FeatureSource::Rgb);
        let out = gaze_attention_block(&q, &kv, &p, 1).unwrap();
        for r in 0..3 {
            assert_eq!(out.attn_weights.row(r), &[1.0]);
            assert_eq!(out.values_out.row(r), &[0.25, -4.0]);
        }
        assert_eq!(out.attn_distribution, vec![1.0]);
    }

    #[test]
    fn orthogonal_queries_give_uniform_rows() {
        let mut p = identity_block(2);
        p.query_ctx = vec![0.0, 0.0];
        // queries along x, keys along y; the pooled context is also along x
        let q = fm(2, 2, vec![1.0, 0.0, 3.0, 0.0], FeatureSource::Rgb);
        let kv = fm(3, 2, vec![0.0, 1.0, 0.0, -2.0, 0.0, 5.0], FeatureSource::Rgb);
        let out = gaze_attention_block(&q, &kv, &p, 1).unwrap();
        for v in &out.attn_weights.data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        for v in &out.attn_distribution {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_by_two_scores() {
        let s = 3f64.ln();
        let q = Mat::from_vec(2, 1, vec![s, 0.0]);
        let k = Mat::from_vec(2, 1, vec![1.0, 0.0]);
        let v = Mat::from_vec(2, 1, vec![1.0, 0.0]);
        let (w, o) = attention_from_qk(&q, &k, &v, 1);
        assert!((w[0].at(0, 0) - 0.75).abs() < 1e-12);
        assert!((w[0].at(0, 1) - 0.25).abs() < 1e-12);
        assert_eq!(w[0].row(1), &[0.5, 0.5]);
        assert!((o.at(0, 0) - 0.75).abs() < 1e-12);
        let dist = reduce_distribution(&w);
        assert!((dist[0] - 0.625).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_rgb_keys_and_non_finite_input() {
        let p = identity_block(2);
        let q = fm(1, 2, vec![1.0, 0.0], FeatureSource::GazeOverlaid);
        let kv = fm(1, 2, vec![1.0, 0.0], FeatureSource::PseudoOverlaid);
        assert!(matches!(gaze_attention_block(&q, &kv, &p, 1), Err(Error::Param(_))));
        let kv = fm(1, 2, vec![f64::NAN, 0.0], FeatureSource::Rgb);
        match gaze_attention_block(&q, &kv, &p, 1) {
            Err(Error::Numeric { name, .. }) => assert_eq!(name, "kv_feat"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn rows_are_stochastic(
            qd in prop::collection::vec(-30.0f64..30.0, 12),
            kd in prop::collection::vec(-30.0f64..30.0, 20),
            heads in prop::sample::select(vec![1usize, 2, 4]),
        ) {
            let q = Mat::from_vec(3, 4, qd);
            let k = Mat::from_vec(5, 4, kd);
            let (w, _) = attention_from_qk(&q, &k, &k, heads);
            for a in &w {
                for r in 0..a.rows {
                    prop_assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-7);
                    prop_assert!(a.row(r).iter().all(|&x| x >= 0.0));
                }
            }
            let d = reduce_distribution(&w);
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-7);
        }
    }
}
