//! Gaussian gaze heatmaps, their binarized form, and gaze overlays.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::container::{self, GhmHeader, KIND_BINARY, KIND_CONTINUOUS};
use crate::error::{Error, Result};
use crate::gaze::AlignmentWindow;
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major, `width * height`.
    pub values: Vec<f64>,
    pub frame_id: i64,
    pub kind: HeatmapKind,
    /// Window samples skipped because they fell outside the frame.
    pub excluded_samples: usize,
}

impl Heatmap {
    pub fn zeros(width: usize, height: usize, frame_id: i64, kind: HeatmapKind) -> Self {
        Heatmap {
            width,
            height,
            values: vec![0.0; width * height],
            frame_id,
            kind,
            excluded_samples: 0,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Index of the first maximal pixel as `(x, y)`.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let kind = match self.kind {
            HeatmapKind::Continuous => KIND_CONTINUOUS,
            HeatmapKind::Binary => KIND_BINARY,
        };
        let header =
            GhmHeader { width: self.width as u32, height: self.height as u32, kind, reserved: 0 };
        container::write_ghm(w, header, &self.values)
    }

    pub fn read_from(r: &mut impl Read, frame_id: i64) -> Result<Self> {
        let (h, values) = container::read_ghm(r)?;
        let kind = match h.kind {
            KIND_CONTINUOUS => HeatmapKind::Continuous,
            KIND_BINARY => HeatmapKind::Binary,
            k => {
                return Err(Error::Container {
                    path: None,
                    msg: format!("kind {k} is not a heatmap"),
                })
            }
        };
        Ok(Heatmap {
            width: h.width as usize,
            height: h.height as usize,
            values,
            frame_id,
            kind,
            excluded_samples: 0,
        })
    }
}

/// Heatmap sigma used when none is configured: half the patch side.
pub fn default_sigma(patch_side_px: usize) -> f64 {
    patch_side_px as f64 / 2.0
}

/// Sum of unit-peak isotropic Gaussians at the window's in-bounds samples,
/// divided by the number of contributing samples.
pub fn gaussian_splat(
    window: &AlignmentWindow,
    width: usize,
    height: usize,
    sigma_px: f64,
) -> Result<Heatmap> {
    if !(sigma_px > 0.0) || !sigma_px.is_finite() {
        return Err(Error::Param(format!("sigma_px must be positive, got {sigma_px}")));
    }
    let mut h = Heatmap::zeros(width, height, window.frame_id, HeatmapKind::Continuous);
    let inv = 1.0 / (2.0 * sigma_px * sigma_px);
    let mut gx = vec![0.0; width];
    let mut gy = vec![0.0; height];
    let mut count = 0usize;
    for s in &window.selected {
        if !s.in_bounds(width, height) {
            h.excluded_samples += 1;
            continue;
        }
        count += 1;
        for (x, g) in gx.iter_mut().enumerate() {
            let d = x as f64 - s.x;
            *g = (-d * d * inv).exp();
        }
        for (y, g) in gy.iter_mut().enumerate() {
            let d = y as f64 - s.y;
            *g = (-d * d * inv).exp();
        }
        for (y, &wy) in gy.iter().enumerate() {
            let row = &mut h.values[y * width..(y + 1) * width];
            for (v, &wx) in row.iter_mut().zip(&gx) {
                *v += wx * wy;
            }
        }
    }
    if count > 1 {
        let inv_n = 1.0 / count as f64;
        h.values.iter_mut().for_each(|v| *v *= inv_n);
    }
    Ok(h)
}

/// Relative threshold: 1 where `value >= tau * max`, else 0.
pub fn binarize(h: &Heatmap, tau: f64) -> Result<Heatmap> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Param(format!("tau must lie in (0, 1], got {tau}")));
    }
    let mut out = Heatmap { kind: HeatmapKind::Binary, ..h.clone() };
    let max = h.max();
    if max <= 0.0 {
        out.values.iter_mut().for_each(|v| *v = 0.0);
        return Ok(out);
    }
    let cut = tau * max;
    for v in out.values.iter_mut() {
        *v = if *v >= cut { 1.0 } else { 0.0 };
    }
    Ok(out)
}

/// Highlight colour: full intensity on channel 0, zero elsewhere.
pub fn highlight_color(channels: usize) -> Vec<f64> {
    let mut c = vec![0.0; channels];
    if channels > 0 {
        c[0] = 1.0;
    }
    c
}

/// `h / max(h)`, or all zeros for an empty map.
pub fn normalized(h: &Heatmap) -> Vec<f64> {
    let max = h.max();
    if max > 0.0 {
        h.values.iter().map(|v| v / max).collect()
    } else {
        vec![0.0; h.values.len()]
    }
}

/// Blends `base` toward the highlight colour with per-pixel weight `alpha * weight`.
pub fn blend(base: &Image, weight: &[f64], alpha: f64) -> Image {
    let color = highlight_color(base.channels);
    let mut out = base.clone();
    for (px, &w) in out.data.chunks_exact_mut(base.channels).zip(weight) {
        let a = alpha * w;
        if a == 0.0 {
            continue;
        }
        for (v, &c) in px.iter_mut().zip(&color) {
            *v = (1.0 - a) * *v + a * c;
        }
    }
    out
}

/// Gaze-overlaid image: `(1 - alpha*ĥ) * base + alpha*ĥ * highlight`, with ĥ = h / max(h).
pub fn overlay(base: &Image, h: &Heatmap, alpha: f64) -> Result<Image> {
    if base.width != h.width || base.height != h.height {
        return Err(Error::Shape(format!(
            "image {}x{} vs heatmap {}x{}",
            base.width, base.height, h.width, h.height
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Param(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(blend(base, &normalized(h), alpha))
}
