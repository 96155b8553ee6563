//! Per-patch gaze distributions: the regularizer's target.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::container::{self, GhmHeader, KIND_DISTRIBUTION};
use crate::error::{Error, Result};
use crate::heatmap::{Heatmap, HeatmapKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGrid {
    /// Horizontal patch count.
    pub n_h: usize,
    /// Vertical patch count.
    pub n_v: usize,
    pub patch_w: usize,
    pub patch_h: usize,
}

impl PatchGrid {
    pub fn new(n_h: usize, n_v: usize, patch_w: usize, patch_h: usize) -> Result<Self> {
        if n_h == 0 || n_v == 0 || patch_w == 0 || patch_h == 0 {
            return Err(Error::Shape("patch grid dimensions must be positive".into()));
        }
        Ok(PatchGrid { n_h, n_v, patch_w, patch_h })
    }

    /// Grid for an image of the given size, rejecting non-divisible shapes.
    pub fn for_image(width: usize, height: usize, n_h: usize, n_v: usize) -> Result<Self> {
        if n_h == 0 || n_v == 0 || width % n_h != 0 || height % n_v != 0 {
            return Err(Error::Shape(format!(
                "{width}x{height} image is not divisible into {n_h}x{n_v} patches"
            )));
        }
        PatchGrid::new(n_h, n_v, width / n_h, height / n_v)
    }

    pub fn n_patches(&self) -> usize {
        self.n_h * self.n_v
    }

    pub fn width(&self) -> usize {
        self.n_h * self.patch_w
    }

    pub fn height(&self) -> usize {
        self.n_v * self.patch_h
    }

    /// Row-major patch index of a pixel.
    pub fn patch_of(&self, x: usize, y: usize) -> usize {
        (y / self.patch_h) * self.n_h + x / self.patch_w
    }

    /// Patch containing a sub-pixel point, or `None` outside the image.
    pub fn patch_of_point(&self, x: f64, y: f64) -> Option<usize> {
        if x < 0.0 || y < 0.0 || x >= self.width() as f64 || y >= self.height() as f64 {
            return None;
        }
        Some(self.patch_of(x as usize, y as usize))
    }

    pub fn patch_center(&self, index: usize) -> (f64, f64) {
        let (i, j) = (index % self.n_h, index / self.n_h);
        (
            (i * self.patch_w) as f64 + (self.patch_w as f64 - 1.0) / 2.0,
            (j * self.patch_h) as f64 + (self.patch_h as f64 - 1.0) / 2.0,
        )
    }

    pub fn check(&self, width: usize, height: usize) -> Result<()> {
        if self.width() != width || self.height() != height {
            return Err(Error::Shape(format!(
                "{}x{} grid of {}x{} patches does not tile a {width}x{height} image",
                self.n_h, self.n_v, self.patch_w, self.patch_h
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    None,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeDistribution {
    pub probs: Vec<f64>,
    pub frame_id: i64,
    pub fallback: Fallback,
    /// Unnormalized per-patch pixel sums.
    pub mass: Vec<f64>,
}

impl GazeDistribution {
    pub fn uniform(n: usize, frame_id: i64) -> Self {
        GazeDistribution {
            probs: vec![1.0 / n as f64; n],
            frame_id,
            fallback: Fallback::Uniform,
            mass: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn distribution(h: &Heatmap, grid: &PatchGrid) -> Result<GazeDistribution> {
    grid.check(h.width, h.height)?;
    let n = grid.n_patches();
    let mut mass = vec![0.0; n];
    for y in 0..h.height {
        let row = &h.values[y * h.width..(y + 1) * h.width];
        let base = (y / grid.patch_h) * grid.n_h;
        for (x, &v) in row.iter().enumerate() {
            mass[base + x / grid.patch_w] += v;
        }
    }
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) {
        return Ok(GazeDistribution::uniform(n, h.frame_id));
    }
    let probs = mass.iter().map(|m| m / total).collect();
    Ok(GazeDistribution { probs, frame_id: h.frame_id, fallback: Fallback::None, mass })
}

/// Share of the binary heatmap's lit pixels inside each patch, row-major.
/// An all-zero map yields the flagged uniform fallback.
pub fn gaze_distribution(h: &Heatmap, grid: &PatchGrid) -> Result<GazeDistribution> {
    if h.kind != HeatmapKind::Binary {
        return Err(Error::Param("gaze_distribution expects a binary heatmap".into()));
    }
    distribution(h, grid)
}

/// Same contract as [`gaze_distribution`] with real-valued pixel weights.
pub fn distribution_from_continuous(h: &Heatmap, grid: &PatchGrid) -> Result<GazeDistribution> {
    if h.kind != HeatmapKind::Continuous {
        return Err(Error::Param("expected a continuous heatmap".into()));
    }
    if h.values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::Param("heatmap weights must be finite and non-negative".into()));
    }
    distribution(h, grid)
}

/// Merges `fx` x `fy` blocks of patches into one coarser patch each.
pub fn merge_patches(
    d: &GazeDistribution,
    grid: &PatchGrid,
    fx: usize,
    fy: usize,
) -> Result<(GazeDistribution, PatchGrid)> {
    if fx == 0 || fy == 0 || grid.n_h % fx != 0 || grid.n_v % fy != 0 {
        return Err(Error::Shape(format!("cannot merge {fx}x{fy} blocks of a {}x{} grid", grid.n_h, grid.n_v)));
    }
    let coarse = PatchGrid::new(grid.n_h / fx, grid.n_v / fy, grid.patch_w * fx, grid.patch_h * fy)?;
    let mut probs = vec![0.0; coarse.n_patches()];
    let mut mass = vec![0.0; coarse.n_patches()];
    for j in 0..grid.n_v {
        for i in 0..grid.n_h {
            let src = j * grid.n_h + i;
            let dst = (j / fy) * coarse.n_h + i / fx;
            probs[dst] += d.probs[src];
            mass[dst] += d.mass[src];
        }
    }
    Ok((GazeDistribution { probs, frame_id: d.frame_id, fallback: d.fallback, mass }, coarse))
}

/// JSON object keyed by frame id.
pub fn distributions_to_json(ds: &[GazeDistribution]) -> serde_json::Value {
    let map: BTreeMap<String, &Vec<f64>> =
        ds.iter().map(|d| (d.frame_id.to_string(), &d.probs)).collect();
    serde_json::to_value(map).expect("string keys")
}

pub fn write_distribution(w: &mut impl Write, d: &GazeDistribution) -> Result<()> {
    let header =
        GhmHeader { width: d.probs.len() as u32, height: 1, kind: KIND_DISTRIBUTION, reserved: 0 };
    container::write_ghm(w, header, &d.probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binary(w: usize, h: usize, ones: &[(usize, usize)]) -> Heatmap {
        let mut m = Heatmap::zeros(w, h, 3, HeatmapKind::Binary);
        for &(x, y) in ones {
            m.values[y * w + x] = 1.0;
        }
        m
    }

    #[test]
    fn counts_pixels_per_patch() {
        let grid = PatchGrid::for_image(4, 4, 2, 2).unwrap();
        let h = binary(4, 4, &[(0, 0), (1, 1), (3, 3)]);
        let d = gaze_distribution(&h, &grid).unwrap();
        // brute force: top-left holds 2 of 3 lit pixels, bottom-right 1
        let expect = [2.0 / 3.0, 0.0, 0.0, 1.0 / 3.0];
        for (p, e) in d.probs.iter().zip(expect) {
            assert!((p - e).abs() < 1e-15);
        }
        assert_eq!(d.fallback, Fallback::None);
        assert_eq!(d.frame_id, 3);
    }

    #[test]
    fn full_and_empty_maps_are_uniform() {
        let grid = PatchGrid::for_image(8, 4, 4, 2).unwrap();
        let all: Vec<(usize, usize)> = (0..4).flat_map(|y| (0..8).map(move |x| (x, y))).collect();
        let d = gaze_distribution(&binary(8, 4, &all), &grid).unwrap();
        assert!(d.probs.iter().all(|p| (p - 0.125).abs() < 1e-15));
        assert_eq!(d.fallback, Fallback::None);
        let d = gaze_distribution(&binary(8, 4, &[]), &grid).unwrap();
        assert!(d.probs.iter().all(|p| *p == 0.125));
        assert_eq!(d.fallback, Fallback::Uniform);
    }

    #[test]
    fn non_divisible_rejected() {
        assert!(PatchGrid::for_image(10, 8, 4, 2).is_err());
        let grid = PatchGrid::new(2, 2, 4, 4).unwrap();
        assert!(matches!(gaze_distribution(&binary(6, 8, &[]), &grid), Err(Error::Shape(_))));
    }

    #[test]
    fn continuous_constant_map_is_uniform() {
        let grid = PatchGrid::for_image(8, 8, 2, 2).unwrap();
        let mut h = Heatmap::zeros(8, 8, 0, HeatmapKind::Continuous);
        h.values.iter_mut().for_each(|v| *v = 0.3);
        let d = distribution_from_continuous(&h, &grid).unwrap();
        assert!(d.probs.iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn json_export_keys_by_frame() {
        let d = GazeDistribution::uniform(2, 42);
        let v = distributions_to_json(&[d]);
        assert_eq!(v["42"][0], 0.5);
    }

    proptest! {
        #[test]
        fn sums_to_one_and_merges_exactly(bits in prop::collection::vec(any::<bool>(), 64)) {
            let grid = PatchGrid::for_image(8, 8, 4, 4).unwrap();
            let ones: Vec<(usize, usize)> = bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| (i % 8, i / 8)).collect();
            let h = binary(8, 8, &ones);
            let d = gaze_distribution(&h, &grid).unwrap();
            prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let (merged, coarse) = merge_patches(&d, &grid, 1, 2).unwrap();
            let direct = gaze_distribution(&h, &coarse).unwrap();
            prop_assert_eq!(&merged.mass, &direct.mass);
            for (a, b) in merged.probs.iter().zip(&direct.probs) {
                prop_assert!((a - b).abs() <= 4.0 * f64::EPSILON);
            }
        }

        #[test]
        fn permuting_patches_permutes_probs(bits in prop::collection::vec(any::<bool>(), 64), a in 0usize..16, b in 0usize..16) {
            let grid = PatchGrid::for_image(8, 8, 4, 4).unwrap();
            let ones: Vec<(usize, usize)> = bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| (i % 8, i / 8)).collect();
            let h = binary(8, 8, &ones);
            let mut swapped = h.clone();
            let (ax, ay) = ((a % 4) * 2, (a / 4) * 2);
            let (bx, by) = ((b % 4) * 2, (b / 4) * 2);
            for dy in 0..2 {
                for dx in 0..2 {
                    swapped.values.swap((ay + dy) * 8 + ax + dx, (by + dy) * 8 + bx + dx);
                }
            }
            let d = gaze_distribution(&h, &grid).unwrap();
            let mut expect = d.probs.clone();
            expect.swap(a, b);
            prop_assert_eq!(gaze_distribution(&swapped, &grid).unwrap().probs, expect);
        }
    }
}
