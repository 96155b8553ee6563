use serde::{Deserialize, Serialize};

use super::Linear;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::linalg::{matmul, Mat};
use crate::patch::PatchGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Rgb,
    GazeOverlaid,
    PseudoOverlaid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// `N x D`, one row per patch.
    pub tokens: Mat,
    pub source: FeatureSource,
}

/// Flattens each patch (row, column, channel order) into one row of an `N x P` matrix.
pub fn patchify(img: &Image, grid: &PatchGrid) -> Result<Mat> {
    grid.check(img.width, img.height)?;
    let (pw, ph, c) = (grid.patch_w, grid.patch_h, img.channels);
    let mut out = Mat::zeros(grid.n_patches(), pw * ph * c);
    for j in 0..grid.n_v {
        for i in 0..grid.n_h {
            let row = out.row_mut(j * grid.n_h + i);
            for yy in 0..ph {
                let src = img.idx(i * pw, j * ph + yy, 0);
                row[yy * pw * c..(yy + 1) * pw * c].copy_from_slice(&img.data[src..src + pw * c]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`] for a single-channel map given as row-major pixels.
pub fn unpatchify_into(patches: &Mat, grid: &PatchGrid, channels: usize, out: &mut [f64]) {
    let (pw, ph, c) = (grid.patch_w, grid.patch_h, channels);
    let width = grid.width();
    for j in 0..grid.n_v {
        for i in 0..grid.n_h {
            let row = patches.row(j * grid.n_h + i);
            for yy in 0..ph {
                let dst = ((j * ph + yy) * width + i * pw) * c;
                out[dst..dst + pw * c].copy_from_slice(&row[yy * pw * c..(yy + 1) * pw * c]);
            }
        }
    }
}

/// Fixed sinusoidal positional table, `n x d`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Mat {
    let mut out = Mat::zeros(n, d);
    for pos in 0..n {
        for k in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            out.data[pos * d + k] = if k % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Token matrix from an already patchified image: `X W + b + positions`.
pub(crate) fn embed_matrix(patches: &Mat, weights: &Linear, positions: &Mat) -> Mat {
    let mut t = matmul(patches, &weights.w);
    t.add_row_vec(&weights.b);
    t.add_assign(positions);
    t
}

/// Linear patch embedding plus sinusoidal positions.
pub fn embed_patches(img: &Image, grid: &PatchGrid, weights: &Linear, source: FeatureSource) -> Result<FeatureMap> {
    let x = patchify(img, grid)?;
    if weights.w.rows != x.cols {
        return Err(Error::Shape(format!(
            "embedding expects {} values per patch, image gives {}",
            weights.w.rows, x.cols
        )));
    }
    let pos = sinusoidal_positions(grid.n_patches(), weights.w.cols);
    Ok(FeatureMap { tokens: embed_matrix(&x, weights, &pos), source })
}
