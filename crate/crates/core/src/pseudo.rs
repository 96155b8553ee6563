//! Pseudo-gaze: a small convolutional encoder-decoder that predicts a gaze
//! heatmap from an RGB frame, plus the cosine supervision used to train it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{highlight_color, overlay, Heatmap, HeatmapKind};
use crate::image::Image;
use crate::linalg::Mat;
use crate::model::{embed_matrix, patchify, sinusoidal_positions, Linear, ParamSet, ParamView, ParamViewMut};
use crate::patch::PatchGrid;

/// A convolution (or transposed convolution) layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    /// Conv: `[c_out][c_in][k][k]`. Transposed: `[c_in][c_out][k][k]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl ConvLayer {
    fn zeros(c_in: usize, c_out: usize, k: usize) -> Self {
        ConvLayer { c_in, c_out, k, w: vec![0.0; c_in * c_out * k * k], b: vec![0.0; c_out] }
    }
}

/// Stride-2 conv (3x3, pad 1) and transposed-conv (4x4, pad 1) layers.
/// Feature maps are planar: `[c][y][x]`.
/// Output positions `o` with `0 <= 2*o + kk - 1 < len_in`, limited to `len_out`.
fn down_range(kk: usize, len_in: usize, len_out: usize) -> (usize, usize) {
    let lo = if kk == 0 { 1 } else { 0 };
    let hi = if len_in + 1 > kk { ((len_in + 1 - kk).div_ceil(2)).min(len_out) } else { 0 };
    (lo, hi.max(lo))
}

fn conv_down(l: &ConvLayer, x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (h / 2, w / 2);
    let k = l.k;
    let mut y = vec![0.0; l.c_out * ho * wo];
    for o in 0..l.c_out {
        let plane = &mut y[o * ho * wo..(o + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = l.b[o]);
        for i in 0..l.c_in {
            let xin = &x[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = down_range(ky, h, ho);
                for kx in 0..k {
                    let wt = l.w[((o * l.c_in + i) * k + ky) * k + kx];
                    let (ox0, ox1) = down_range(kx, w, wo);
                    for oy in oy0..oy1 {
                        let row = &xin[(oy * 2 + ky - 1) * w..];
                        let out = &mut plane[oy * wo + ox0..oy * wo + ox1];
                        for (v, ox) in out.iter_mut().zip(ox0..) {
                            *v += wt * row[ox * 2 + kx - 1];
                        }
                    }
                }
            }
        }
    }
    (y, ho, wo)
}

fn conv_down_backward(l: &ConvLayer, x: &[f64], h: usize, w: usize, dy: &[f64], g: &mut ConvLayer) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let k = l.k;
    let mut dx = vec![0.0; x.len()];
    for o in 0..l.c_out {
        let dplane = &dy[o * ho * wo..(o + 1) * ho * wo];
        g.b[o] += dplane.iter().sum::<f64>();
        for i in 0..l.c_in {
            let xin = &x[i * h * w..(i + 1) * h * w];
            let dxin = &mut dx[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = down_range(ky, h, ho);
                for kx in 0..k {
                    let wi = ((o * l.c_in + i) * k + ky) * k + kx;
                    let wt = l.w[wi];
                    let (ox0, ox1) = down_range(kx, w, wo);
                    let mut gw = 0.0;
                    for oy in oy0..oy1 {
                        let base = (oy * 2 + ky - 1) * w + kx;
                        let drow = &dplane[oy * wo..oy * wo + ox1];
                        for ox in ox0..ox1 {
                            let d = drow[ox];
                            let xi = base + ox * 2 - 1;
                            gw += d * xin[xi];
                            dxin[xi] += d * wt;
                        }
                    }
                    g.w[wi] += gw;
                }
            }
        }
    }
    dx
}

/// Input positions `j` with `0 <= 2*j + kk - 1 < len_out`, limited to `len_in`.
fn up_range(kk: usize, len_in: usize, len_out: usize) -> (usize, usize) {
    let lo = if kk == 0 { 1 } else { 0 };
    let hi = if len_out + 1 > kk { ((len_out + 1 - kk).div_ceil(2)).min(len_in) } else { 0 };
    (lo, hi.max(lo))
}

fn conv_up(l: &ConvLayer, x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (h * 2, w * 2);
    let k = l.k;
    let mut y = vec![0.0; l.c_out * ho * wo];
    for o in 0..l.c_out {
        y[o * ho * wo..(o + 1) * ho * wo].iter_mut().for_each(|v| *v = l.b[o]);
    }
    for i in 0..l.c_in {
        let xin = &x[i * h * w..(i + 1) * h * w];
        for o in 0..l.c_out {
            let plane = &mut y[o * ho * wo..(o + 1) * ho * wo];
            for ky in 0..k {
                let (iy0, iy1) = up_range(ky, h, ho);
                for kx in 0..k {
                    let wt = l.w[((i * l.c_out + o) * k + ky) * k + kx];
                    let (ix0, ix1) = up_range(kx, w, wo);
                    for iy in iy0..iy1 {
                        let orow = &mut plane[(iy * 2 + ky - 1) * wo..];
                        let irow = &xin[iy * w..iy * w + ix1];
                        for ix in ix0..ix1 {
                            orow[ix * 2 + kx - 1] += wt * irow[ix];
                        }
                    }
                }
            }
        }
    }
    (y, ho, wo)
}

fn conv_up_backward(l: &ConvLayer, x: &[f64], h: usize, w: usize, dy: &[f64], g: &mut ConvLayer) -> Vec<f64> {
    let (ho, wo) = (h * 2, w * 2);
    let k = l.k;
    let mut dx = vec![0.0; x.len()];
    for o in 0..l.c_out {
        g.b[o] += dy[o * ho * wo..(o + 1) * ho * wo].iter().sum::<f64>();
    }
    for i in 0..l.c_in {
        let xin = &x[i * h * w..(i + 1) * h * w];
        let dxin = &mut dx[i * h * w..(i + 1) * h * w];
        for o in 0..l.c_out {
            let dplane = &dy[o * ho * wo..(o + 1) * ho * wo];
            for ky in 0..k {
                let (iy0, iy1) = up_range(ky, h, ho);
                for kx in 0..k {
                    let wi = ((i * l.c_out + o) * k + ky) * k + kx;
                    let wt = l.w[wi];
                    let (ix0, ix1) = up_range(kx, w, wo);
                    let mut gw = 0.0;
                    for iy in iy0..iy1 {
                        let drow = &dplane[(iy * 2 + ky - 1) * wo..];
                        for ix in ix0..ix1 {
                            let d = drow[ix * 2 + kx - 1];
                            gw += d * xin[iy * w + ix];
                            dxin[iy * w + ix] += d * wt;
                        }
                    }
                    g.w[wi] += gw;
                }
            }
        }
    }
    dx
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoGazeNet {
    pub down1: ConvLayer,
    pub down2: ConvLayer,
    pub up1: ConvLayer,
    pub up2: ConvLayer,
}

/// Activations kept for the backward pass.
pub struct PseudoCache {
    width: usize,
    height: usize,
    x: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    a3: Vec<f64>,
    /// Output heatmap, row-major.
    pub out: Vec<f64>,
}

impl PseudoGazeNet {
    /// `channels -> c1 -> c2 -> c1 -> 1`.
    pub fn zeros(channels: usize, c1: usize, c2: usize) -> Self {
        PseudoGazeNet {
            down1: ConvLayer::zeros(channels, c1, 3),
            down2: ConvLayer::zeros(c1, c2, 3),
            up1: ConvLayer::zeros(c2, c1, 4),
            up2: ConvLayer::zeros(c1, 1, 4),
        }
    }

    pub fn init(channels: usize, c1: usize, c2: usize, seed: u64) -> Self {
        let mut net = PseudoGazeNet::zeros(channels, c1, c2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in [&mut net.down1, &mut net.down2, &mut net.up1, &mut net.up2] {
            let fan_in = (l.c_in * l.k * l.k) as f64;
            let normal = Normal::new(0.0, 1.0 / fan_in.sqrt()).expect("finite std");
            l.w.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        net
    }

    pub fn channels(&self) -> usize {
        self.down1.c_in
    }

    pub fn forward(&self, img: &Image) -> Result<PseudoCache> {
        if img.width % 4 != 0 || img.height % 4 != 0 || img.width == 0 || img.height == 0 {
            return Err(Error::Shape(format!("image {}x{} is not divisible by 4", img.width, img.height)));
        }
        if img.channels != self.channels() {
            return Err(Error::Shape(format!("image has {} channels, net expects {}", img.channels, self.channels())));
        }
        let (w, h, c) = (img.width, img.height, img.channels);
        let mut x = vec![0.0; c * w * h];
        for (p, px) in img.data.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                x[ch * w * h + p] = 2.0 * v - 1.0;
            }
        }
        let (mut a1, h1, w1) = conv_down(&self.down1, &x, h, w);
        a1.iter_mut().for_each(|v| *v = v.tanh());
        let (mut a2, h2, w2) = conv_down(&self.down2, &a1, h1, w1);
        a2.iter_mut().for_each(|v| *v = v.tanh());
        let (mut a3, h3, w3) = conv_up(&self.up1, &a2, h2, w2);
        a3.iter_mut().for_each(|v| *v = v.tanh());
        let (mut out, _, _) = conv_up(&self.up2, &a3, h3, w3);
        out.iter_mut().for_each(|v| *v = logistic(*v));
        Ok(PseudoCache { width: w, height: h, x, a1, a2, a3, out })
    }

    /// Accumulates parameter gradients given `d_out`, the loss gradient w.r.t. the output map.
    pub fn backward(&self, c: &PseudoCache, d_out: &[f64], g: &mut PseudoGazeNet) {
        let (h, w) = (c.height, c.width);
        let d4: Vec<f64> = d_out.iter().zip(&c.out).map(|(d, y)| d * y * (1.0 - y)).collect();
        let d3 = conv_up_backward(&self.up2, &c.a3, h / 2, w / 2, &d4, &mut g.up2);
        let d3: Vec<f64> = d3.iter().zip(&c.a3).map(|(d, a)| d * (1.0 - a * a)).collect();
        let d2 = conv_up_backward(&self.up1, &c.a2, h / 4, w / 4, &d3, &mut g.up1);
        let d2: Vec<f64> = d2.iter().zip(&c.a2).map(|(d, a)| d * (1.0 - a * a)).collect();
        let d1 = conv_down_backward(&self.down2, &c.a1, h / 2, w / 2, &d2, &mut g.down2);
        let d1: Vec<f64> = d1.iter().zip(&c.a1).map(|(d, a)| d * (1.0 - a * a)).collect();
        conv_down_backward(&self.down1, &c.x, h, w, &d1, &mut g.down1);
    }

    pub fn zeros_like(&self) -> Self {
        PseudoGazeNet::zeros(self.channels(), self.down1.c_out, self.down2.c_out)
    }
}

impl ParamSet for PseudoGazeNet {
    fn views(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        for (name, l) in [("down1", &self.down1), ("down2", &self.down2), ("up1", &self.up1), ("up2", &self.up2)] {
            let (a, b) = if name.starts_with("down") { (l.c_out, l.c_in) } else { (l.c_in, l.c_out) };
            out.push(ParamView { name: format!("pseudo.{name}.w"), shape: vec![a, b, l.k, l.k], data: &l.w });
            out.push(ParamView { name: format!("pseudo.{name}.b"), shape: vec![l.c_out], data: &l.b });
        }
        out
    }

    fn views_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut out = Vec::new();
        for (name, l) in [("down1", &mut self.down1), ("down2", &mut self.down2), ("up1", &mut self.up1), ("up2", &mut self.up2)] {
            let (a, b) = if name.starts_with("down") { (l.c_out, l.c_in) } else { (l.c_in, l.c_out) };
            out.push(ParamViewMut { name: format!("pseudo.{name}.w"), shape: vec![a, b, l.k, l.k], data: &mut l.w });
            out.push(ParamViewMut { name: format!("pseudo.{name}.b"), shape: vec![l.c_out], data: &mut l.b });
        }
        out
    }
}

pub fn predict_heatmap(net: &PseudoGazeNet, img: &Image) -> Result<Heatmap> {
    let c = net.forward(img)?;
    Ok(Heatmap {
        width: img.width,
        height: img.height,
        values: c.out,
        frame_id: 0,
        kind: HeatmapKind::Continuous,
        excluded_samples: 0,
    })
}

pub fn compose_pseudo_overlay(net: &PseudoGazeNet, img: &Image, alpha: f64) -> Result<Image> {
    overlay(img, &predict_heatmap(net, img)?, alpha)
}

/// Frozen copy of the RGB patch embedder followed by a mean over patches.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineEmbedder {
    pub grid: PatchGrid,
    pub weights: Linear,
    positions: Mat,
}

impl CosineEmbedder {
    pub fn new(grid: PatchGrid, weights: Linear) -> Self {
        let positions = sinusoidal_positions(grid.n_patches(), weights.w.cols);
        CosineEmbedder { grid, weights, positions }
    }

    pub fn embed(&self, img: &Image) -> Result<Vec<f64>> {
        let x = patchify(img, &self.grid)?;
        if x.cols != self.weights.w.rows {
            return Err(Error::Shape(format!("patch width {} vs embedder input {}", x.cols, self.weights.w.rows)));
        }
        Ok(embed_matrix(&x, &self.weights, &self.positions).col_means())
    }

    /// Gradient of `embed` w.r.t. image pixels (channel-last) given `d_e`.
    fn embed_backward(&self, img: &Image, d_e: &[f64]) -> Vec<f64> {
        let n = self.grid.n_patches() as f64;
        let w = &self.weights.w;
        let per_patch: Vec<f64> = (0..w.rows).map(|p| crate::linalg::dot(w.row(p), d_e) / n).collect();
        let mut d_img = vec![0.0; img.data.len()];
        let (pw, ph, c) = (self.grid.patch_w, self.grid.patch_h, img.channels);
        for y in 0..self.grid.height() {
            for x in 0..self.grid.width() {
                let local = ((y % ph) * pw + x % pw) * c;
                for ch in 0..c {
                    d_img[img.idx(x, y, ch)] = per_patch[local + ch];
                }
            }
        }
        d_img
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `1 - cos(a, b)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numeric("cosine_embedding", "zero-norm embedding"));
    }
    let c = crate::linalg::dot(a, b) / (na * nb);
    Ok((1.0 - c).clamp(0.0, 2.0))
}

pub fn cosine_loss(pred_overlay: &Image, true_overlay: &Image, embedder: &CosineEmbedder) -> Result<f64> {
    if !pred_overlay.same_shape(true_overlay) {
        return Err(Error::Shape("overlays differ in shape".into()));
    }
    cosine_distance(&embedder.embed(pred_overlay)?, &embedder.embed(true_overlay)?)
}

/// Cosine loss of the pseudo overlay of `rgb` against `true_overlay`, with
/// gradients accumulated (times `scale`) into the pseudo-net only.
pub fn cosine_loss_and_grad(
    net: &PseudoGazeNet,
    rgb: &Image,
    true_overlay: &Image,
    alpha: f64,
    embedder: &CosineEmbedder,
    scale: f64,
    g: &mut PseudoGazeNet,
) -> Result<f64> {
    let cache = net.forward(rgb)?;
    let hm = Heatmap {
        width: rgb.width,
        height: rgb.height,
        values: cache.out.clone(),
        frame_id: 0,
        kind: HeatmapKind::Continuous,
        excluded_samples: 0,
    };
    let pred = overlay(rgb, &hm, alpha)?;
    let a = embedder.embed(&pred)?;
    let b = embedder.embed(true_overlay)?;
    let loss = cosine_distance(&a, &b)?;
    let (na, nb) = (norm(&a), norm(&b));
    let ab = crate::linalg::dot(&a, &b);
    // d(1 - a.b/(|a||b|))/da
    let d_a: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(ai, bi)| scale * -(bi / (na * nb) - ab * ai / (na * na * na * nb)))
        .collect();
    let d_img = embedder.embed_backward(&pred, &d_a);

    // pred = base + alpha*ĥ*(color - base), ĥ = y / max(y)
    let color = highlight_color(rgb.channels);
    let mut d_hat = vec![0.0; cache.out.len()];
    for (p, dh) in d_hat.iter_mut().enumerate() {
        let base = &rgb.data[p * rgb.channels..(p + 1) * rgb.channels];
        let dpx = &d_img[p * rgb.channels..(p + 1) * rgb.channels];
        *dh = alpha * dpx.iter().zip(base.iter().zip(&color)).map(|(d, (b, c))| d * (c - b)).sum::<f64>();
    }
    let max = hm.max();
    let (ax, ay) = hm.argmax();
    let arg = ay * hm.width + ax;
    let mut d_out: Vec<f64> = d_hat.iter().map(|d| d / max).collect();
    d_out[arg] -= d_hat.iter().zip(&cache.out).map(|(d, y)| d * y).sum::<f64>() / (max * max);
    net.backward(&cache, &d_out, g);
    Ok(loss)
}

/// Mean squared error of the predicted map against `target` (same size),
/// with gradients accumulated (times `scale`).
pub fn mse_loss_and_grad(net: &PseudoGazeNet, rgb: &Image, target: &[f64], scale: f64, g: &mut PseudoGazeNet) -> Result<f64> {
    let cache = net.forward(rgb)?;
    if target.len() != cache.out.len() {
        return Err(Error::Shape("target heatmap size differs from image".into()));
    }
    let n = target.len() as f64;
    let loss = cache.out.iter().zip(target).map(|(y, t)| (y - t) * (y - t)).sum::<f64>() / n;
    let d: Vec<f64> = cache.out.iter().zip(target).map(|(y, t)| scale * 2.0 * (y - t) / n).collect();
    net.backward(&cache, &d, g);
    Ok(loss)
}

/// Mean per-pixel binary cross-entropy against a `[0,1]` target map.
pub fn bce_loss_and_grad(net: &PseudoGazeNet, rgb: &Image, target: &[f64], scale: f64, g: &mut PseudoGazeNet) -> Result<f64> {
    let cache = net.forward(rgb)?;
    if target.len() != cache.out.len() {
        return Err(Error::Shape("target heatmap size differs from image".into()));
    }
    let n = target.len() as f64;
    let clamp = |y: f64| y.clamp(1e-12, 1.0 - 1e-12);
    let loss = cache.out.iter().zip(target).map(|(&y, t)| -(t * clamp(y).ln() + (1.0 - t) * (1.0 - clamp(y)).ln())).sum::<f64>() / n;
    let d: Vec<f64> = cache.out.iter().zip(target).map(|(&y, t)| scale * (clamp(y) - t) / (clamp(y) * (1.0 - clamp(y)) * n)).collect();
    net.backward(&cache, &d, g);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{finite_difference_check, Optimizer, OptimizerKind};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(w, h, c, (0..w * h * c).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn blob(w: usize, h: usize, cx: f64, cy: f64, s: f64) -> Vec<f64> {
        (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp()
            })
            .collect()
    }

    #[test]
    fn zero_network_is_constant_half() {
        let net = PseudoGazeNet::zeros(3, 8, 16);
        let h = predict_heatmap(&net, &random_image(16, 8, 3, 1)).unwrap();
        assert!(h.values.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn output_matches_input_shape() {
        let net = PseudoGazeNet::init(3, 8, 16, 0);
        let h = predict_heatmap(&net, &random_image(64, 64, 3, 2)).unwrap();
        assert_eq!((h.width, h.height, h.values.len()), (64, 64, 4096));
        assert!(h.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(matches!(predict_heatmap(&net, &random_image(30, 32, 3, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn overfits_a_single_pair() {
        let img = random_image(16, 16, 1, 3);
        let target = blob(16, 16, 5.0, 9.0, 2.5);
        let mut net = PseudoGazeNet::init(1, 8, 16, 0);
        let mut opt = Optimizer::new(OptimizerKind::adam(0.05), None);
        for _ in 0..50 {
            let mut g = net.zeros_like();
            mse_loss_and_grad(&net, &img, &target, 1.0, &mut g).unwrap();
            opt.update(&mut net, &g);
        }
        let out = predict_heatmap(&net, &img).unwrap();
        let mae = out.values.iter().zip(&target).map(|(a, b)| (a - b).abs()).sum::<f64>() / target.len() as f64;
        assert!(mae < 0.05, "mae {mae}");
    }

    #[test]
    fn pseudo_overlay_identities() {
        let img = random_image(8, 8, 3, 4);
        let net = PseudoGazeNet::init(3, 4, 4, 1);
        assert_eq!(compose_pseudo_overlay(&net, &img, 0.0).unwrap(), img);
        let h = predict_heatmap(&net, &img).unwrap();
        let out = compose_pseudo_overlay(&net, &img, 0.5).unwrap();
        let (x, y) = h.argmax();
        assert_ne!(out.get(x, y, 0), img.get(x, y, 0));
        assert_eq!(overlay(&img, &Heatmap::zeros(8, 8, 0, HeatmapKind::Continuous), 0.5).unwrap(), img);
    }

    #[test]
    fn cosine_examples() {
        assert!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap() < 1e-15);
        assert!(cosine_distance(&[1.0, 2.0], &[2.0, 4.0]).unwrap() < 1e-15);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 1.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 2.0);
        assert!(matches!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Numeric { .. })));
        let grid = PatchGrid::new(2, 2, 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear { w: Mat::from_vec(48, 6, (0..288).map(|_| rng.gen::<f64>() - 0.5).collect()), b: vec![0.1; 6] };
        let emb = CosineEmbedder::new(grid, lin);
        let img = random_image(8, 8, 3, 5);
        assert!(cosine_loss(&img, &img, &emb).unwrap().abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let grid = PatchGrid::new(2, 2, 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear { w: Mat::from_vec(48, 8, (0..384).map(|_| rng.gen::<f64>() - 0.5).collect()), b: vec![0.0; 8] };
        let emb = CosineEmbedder::new(grid, lin);
        let net = PseudoGazeNet::init(3, 4, 6, 0);
        let imgs: Vec<Image> = (0..2).map(|s| random_image(8, 8, 3, 10 + s)).collect();
        let truth: Vec<Image> = imgs
            .iter()
            .map(|im| {
                let h = Heatmap { values: blob(8, 8, 2.0, 5.0, 1.5), ..Heatmap::zeros(8, 8, 0, HeatmapKind::Continuous) };
                overlay(im, &h, 0.6).unwrap()
            })
            .collect();
        let mut g = net.zeros_like();
        for (im, t) in imgs.iter().zip(&truth) {
            cosine_loss_and_grad(&net, im, t, 0.6, &emb, 0.5, &mut g).unwrap();
        }
        let rep = finite_difference_check(&net, &g, 1e-4, |n| {
            let mut s = 0.0;
            for (im, t) in imgs.iter().zip(&truth) {
                s += cosine_loss(&compose_pseudo_overlay(n, im, 0.6)?, t, &emb)?;
            }
            Ok(s / 2.0)
        })
        .unwrap();
        assert!(rep.max_rel_err() < 1e-4, "{:?}", rep);

        let target = blob(8, 8, 2.0, 5.0, 1.5);
        let mut g = net.zeros_like();
        mse_loss_and_grad(&net, &imgs[0], &target, 1.0, &mut g).unwrap();
        let rep = finite_difference_check(&net, &g, 1e-4, |n| {
            let y = predict_heatmap(n, &imgs[0])?.values;
            Ok(y.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 64.0)
        })
        .unwrap();
        assert!(rep.max_rel_err() < 1e-4, "{:?}", rep);
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(
            a in prop::collection::vec(-5.0f64..5.0, 6),
            b in prop::collection::vec(-5.0f64..5.0, 6),
            sa in 0.1f64..10.0,
            sb in 0.1f64..10.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let base = cosine_distance(&a, &b).unwrap();
            let a2: Vec<f64> = a.iter().map(|v| v * sa).collect();
            let b2: Vec<f64> = b.iter().map(|v| v * sb).collect();
            let scaled = cosine_distance(&a2, &b2).unwrap();
            prop_assert!((base - scaled).abs() < 1e-12);
            prop_assert!((0.0..=2.0).contains(&base));
        }
    }
}
