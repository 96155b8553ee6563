//! Dense flow, forward/backward consistency occlusion checks and
//! occlusion-aware gaze aggregation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::gaze::{AlignMode, AlignmentWindow, FrameRef, GazeSample, GazeTrack};
use crate::image::Image;

pub const DEFAULT_EPSILON_PX: f64 = 20.0;
pub const DEFAULT_ETA: f64 = 0.60;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub fx: Vec<f64>,
    pub fy: Vec<f64>,
    pub src_frame: i64,
    pub dst_frame: i64,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize, src_frame: i64, dst_frame: i64) -> Self {
        FlowField {
            width,
            height,
            fx: vec![0.0; width * height],
            fy: vec![0.0; width * height],
            src_frame,
            dst_frame,
        }
    }

    pub fn uniform(width: usize, height: usize, dx: f64, dy: f64) -> Self {
        FlowField {
            width,
            height,
            fx: vec![dx; width * height],
            fy: vec![dy; width * height],
            src_frame: 0,
            dst_frame: 0,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.fx[i], self.fy[i])
    }

    pub fn same_grid(&self, other: &FlowField) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Finite everywhere and bounded by the image dimensions.
    pub fn validate(&self) -> Result<()> {
        let bound = self.width.max(self.height) as f64;
        for (name, plane) in [("fx", &self.fx), ("fy", &self.fy)] {
            if let Some(v) = plane.iter().find(|v| !v.is_finite() || v.abs() > bound) {
                return Err(Error::numeric(name, format!("flow value {v} out of range")));
            }
        }
        Ok(())
    }

    /// Flow at a sub-pixel location.
    pub fn sample(&self, x: f64, y: f64, sampling: Sampling) -> (f64, f64) {
        let cx = |v: f64| v.clamp(0.0, (self.width - 1) as f64);
        let cy = |v: f64| v.clamp(0.0, (self.height - 1) as f64);
        match sampling {
            Sampling::Nearest => self.at(cx(x).round() as usize, cy(y).round() as usize),
            Sampling::Bilinear => {
                let (x, y) = (cx(x), cy(y));
                let (x0, y0) = (x.floor() as usize, y.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
                let (ax, ay) = (x - x0 as f64, y - y0 as f64);
                let lerp = |p: &[f64]| {
                    let g = |xx: usize, yy: usize| p[yy * self.width + xx];
                    (1.0 - ay) * ((1.0 - ax) * g(x0, y0) + ax * g(x1, y0))
                        + ay * ((1.0 - ax) * g(x0, y1) + ax * g(x1, y1))
                };
                (lerp(&self.fx), lerp(&self.fy))
            }
        }
    }

    pub fn write_to(&self, w: &mut impl std::io::Write) -> Result<()> {
        container::write_gfl(w, self.width as u32, self.height as u32, &self.fx, &self.fy)
    }

    pub fn read_from(r: &mut impl std::io::Read, src_frame: i64, dst_frame: i64) -> Result<Self> {
        let (w, h, fx, fy) = container::read_gfl(r)?;
        Ok(FlowField { width: w as usize, height: h as usize, fx, fy, src_frame, dst_frame })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Nearest,
    Bilinear,
}

/// How the per-pixel forward/backward discrepancy is formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyRule {
    /// `|F_fwd(p)| - |F_bwd(p̂)|` per axis.
    #[default]
    MagnitudeDifference,
    /// `F_fwd(p) + F_bwd(p̂)` per axis, the usual round-trip residual.
    RoundTrip,
}

/// Per-block integer displacement minimizing the sum of absolute differences.
///
/// Ties prefer the smaller displacement magnitude, then smaller `(dy, dx)`
/// lexicographically. Candidate blocks must lie inside `dst`.
pub fn estimate_flow_blockmatch(src: &Image, dst: &Image, block: usize, search: usize) -> Result<FlowField> {
    if src.width != dst.width || src.height != dst.height {
        return Err(Error::Shape(format!(
            "flow inputs differ: {}x{} vs {}x{}",
            src.width, src.height, dst.width, dst.height
        )));
    }
    if block == 0 || search == 0 {
        return Err(Error::Param("block and search must be positive".into()));
    }
    let (a, b) = (src.to_gray(), dst.to_gray());
    let (w, h) = (src.width, src.height);
    let s = search as i64;

    // candidates in tie-break order
    let mut candidates: Vec<(i64, i64)> =
        (-s..=s).flat_map(|dy| (-s..=s).map(move |dx| (dx, dy))).collect();
    candidates.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));

    let mut flow = FlowField::zeros(w, h, 0, 0);
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let bw = block.min(w - bx);
            let bh = block.min(h - by);
            let mut best = (f64::INFINITY, 0i64, 0i64);
            for &(dx, dy) in &candidates {
                let (tx, ty) = (bx as i64 + dx, by as i64 + dy);
                if tx < 0 || ty < 0 || tx as usize + bw > w || ty as usize + bh > h {
                    continue;
                }
                let mut sad = 0.0;
                for yy in 0..bh {
                    let ra = (by + yy) * w + bx;
                    let rb = (ty as usize + yy) * w + tx as usize;
                    for xx in 0..bw {
                        sad += (a.data[ra + xx] - b.data[rb + xx]).abs();
                    }
                    if sad >= best.0 {
                        break;
                    }
                }
                if sad < best.0 {
                    best = (sad, dx, dy);
                }
            }
            for yy in by..by + bh {
                for xx in bx..bx + bw {
                    flow.fx[yy * w + xx] = best.1 as f64;
                    flow.fy[yy * w + xx] = best.2 as f64;
                }
            }
        }
    }
    Ok(flow)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Translated {
    pub x: f64,
    pub y: f64,
    pub clamped: bool,
}

/// Moves a point along the forward flow, clamping to the frame.
pub fn translate_pixel(x: f64, y: f64, flow: &FlowField, sampling: Sampling) -> Translated {
    let (fx, fy) = flow.sample(x, y, sampling);
    let (mut tx, mut ty) = (x + fx, y + fy);
    let max_x = (flow.width - 1) as f64;
    let max_y = (flow.height - 1) as f64;
    let clamped = tx < 0.0 || ty < 0.0 || tx > max_x || ty > max_y;
    tx = tx.clamp(0.0, max_x);
    ty = ty.clamp(0.0, max_y);
    Translated { x: tx, y: ty, clamped }
}

/// Per-axis forward/backward discrepancy at `(x, y)`.
pub fn consistency_distance(
    x: f64,
    y: f64,
    fwd: &FlowField,
    bwd: &FlowField,
    rule: ConsistencyRule,
    sampling: Sampling,
) -> (f64, f64) {
    let (fx, fy) = fwd.sample(x, y, sampling);
    let t = translate_pixel(x, y, fwd, sampling);
    let (bx, by) = bwd.sample(t.x, t.y, sampling);
    match rule {
        ConsistencyRule::MagnitudeDifference => (fx.abs() - bx.abs(), fy.abs() - by.abs()),
        ConsistencyRule::RoundTrip => (fx + bx, fy + by),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Major,
    Minor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionReport {
    pub eta_observed: f64,
    pub verdict: Verdict,
    pub epsilon_px: f64,
    pub eta_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionParams {
    pub epsilon_px: f64,
    pub eta_threshold: f64,
    #[serde(default)]
    pub rule: ConsistencyRule,
    #[serde(default)]
    pub sampling: Sampling,
}

impl Default for OcclusionParams {
    fn default() -> Self {
        OcclusionParams {
            epsilon_px: DEFAULT_EPSILON_PX,
            eta_threshold: DEFAULT_ETA,
            rule: ConsistencyRule::default(),
            sampling: Sampling::default(),
        }
    }
}

/// Share of pixels whose discrepancy norm exceeds epsilon; major when that
/// share exceeds the threshold.
pub fn occlusion_check(fwd: &FlowField, bwd: &FlowField, params: &OcclusionParams) -> Result<OcclusionReport> {
    if !fwd.same_grid(bwd) {
        return Err(Error::Shape(format!(
            "forward flow {}x{} vs backward {}x{}",
            fwd.width, fwd.height, bwd.width, bwd.height
        )));
    }
    let mut exceeding = 0usize;
    for y in 0..fwd.height {
        for x in 0..fwd.width {
            let (dx, dy) =
                consistency_distance(x as f64, y as f64, fwd, bwd, params.rule, params.sampling);
            if (dx * dx + dy * dy).sqrt() > params.epsilon_px {
                exceeding += 1;
            }
        }
    }
    let total = fwd.width * fwd.height;
    let eta_observed = if total == 0 { 0.0 } else { exceeding as f64 / total as f64 };
    let verdict = if eta_observed > params.eta_threshold { Verdict::Major } else { Verdict::Minor };
    Ok(OcclusionReport {
        eta_observed,
        verdict,
        epsilon_px: params.epsilon_px,
        eta_threshold: params.eta_threshold,
    })
}

/// Supplies `(forward earlier -> target, backward target -> earlier)` flows.
pub trait FlowProvider {
    fn flow_pair(&self, earlier: &FrameRef, target: &FrameRef) -> Result<(FlowField, FlowField)>;
}

impl<F> FlowProvider for F
where
    F: Fn(&FrameRef, &FrameRef) -> Result<(FlowField, FlowField)>,
{
    fn flow_pair(&self, earlier: &FrameRef, target: &FrameRef) -> Result<(FlowField, FlowField)> {
        self(earlier, target)
    }
}

/// Estimates flows with block matching on images loaded from the manifest paths.
#[derive(Debug, Clone)]
pub struct BlockMatchProvider {
    pub root: PathBuf,
    pub block: usize,
    pub search: usize,
}

impl FlowProvider for BlockMatchProvider {
    fn flow_pair(&self, earlier: &FrameRef, target: &FrameRef) -> Result<(FlowField, FlowField)> {
        let wrap = |e: Error| Error::Flow { src: earlier.frame_id, dst: target.frame_id, msg: e.to_string() };
        let a = container::load_image(&self.root.join(&earlier.image_path)).map_err(wrap)?;
        let b = container::load_image(&self.root.join(&target.image_path)).map_err(wrap)?;
        let mut fwd = estimate_flow_blockmatch(&a, &b, self.block, self.search).map_err(wrap)?;
        let mut bwd = estimate_flow_blockmatch(&b, &a, self.block, self.search).map_err(wrap)?;
        (fwd.src_frame, fwd.dst_frame) = (earlier.frame_id, target.frame_id);
        (bwd.src_frame, bwd.dst_frame) = (target.frame_id, earlier.frame_id);
        Ok((fwd, bwd))
    }
}

/// Reads precomputed `<src>_<dst>.gfl` files from a directory.
#[derive(Debug, Clone)]
pub struct FileFlowProvider {
    pub dir: PathBuf,
}

impl FileFlowProvider {
    fn load(&self, src: i64, dst: i64) -> Result<FlowField> {
        let path = self.dir.join(format!("{src}_{dst}.gfl"));
        let mut f = std::fs::File::open(&path)
            .map_err(|e| Error::Flow { src, dst, msg: format!("{}: {e}", path.display()) })?;
        FlowField::read_from(&mut f, src, dst)
            .map_err(|e| Error::Flow { src, dst, msg: e.to_string() })
    }
}

impl FlowProvider for FileFlowProvider {
    fn flow_pair(&self, earlier: &FrameRef, target: &FrameRef) -> Result<(FlowField, FlowField)> {
        Ok((self.load(earlier.frame_id, target.frame_id)?, self.load(target.frame_id, earlier.frame_id)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameCheck {
    pub frame_id: i64,
    pub samples: usize,
    pub report: OcclusionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionAggregation {
    pub window: AlignmentWindow,
    pub checks: Vec<FrameCheck>,
    pub dropped_samples: usize,
}

/// Aggregates the gaze samples of `[t - delta, t]`, dropping samples of
/// earlier frames with a major occlusion against `target` and moving the rest
/// into the target frame along the forward flow.
///
/// Each sample belongs to the latest frame at or before its timestamp (the
/// earliest window frame if none precedes it). Samples of the target frame
/// are kept untranslated.
pub fn aggregate_with_occlusion(
    track: &GazeTrack,
    frames: &[FrameRef],
    target: &FrameRef,
    delta_ms: i64,
    provider: &dyn FlowProvider,
    params: &OcclusionParams,
) -> Result<OcclusionAggregation> {
    let t = target.timestamp_ms;
    let lo = t - delta_ms.max(0);
    let mut earlier: Vec<&FrameRef> = frames
        .iter()
        .filter(|f| f.frame_id != target.frame_id && f.timestamp_ms >= lo && f.timestamp_ms < t)
        .collect();
    earlier.sort_by_key(|f| f.timestamp_ms);

    let start = track.samples.partition_point(|s| s.timestamp_ms < lo);
    let end = track.samples.partition_point(|s| s.timestamp_ms <= t);
    let in_window = &track.samples[start..end];

    // owner index into `earlier`, or None for the target frame
    let owner = |s: &GazeSample| -> Option<usize> {
        if s.timestamp_ms >= t || earlier.is_empty() {
            return None;
        }
        let k = earlier.partition_point(|f| f.timestamp_ms <= s.timestamp_ms);
        Some(k.saturating_sub(1))
    };

    let mut checks = Vec::new();
    let mut decisions: Vec<Option<(FlowField, bool)>> = vec![None; earlier.len()];
    for (k, frame) in earlier.iter().enumerate() {
        let n = in_window.iter().filter(|s| owner(s) == Some(k)).count();
        if n == 0 {
            continue;
        }
        let (fwd, bwd) = provider.flow_pair(frame, target)?;
        if fwd.width != target.width || fwd.height != target.height || !fwd.same_grid(&bwd) {
            return Err(Error::Flow {
                src: frame.frame_id,
                dst: target.frame_id,
                msg: "flow size does not match the target frame".into(),
            });
        }
        let report = occlusion_check(&fwd, &bwd, params)?;
        checks.push(FrameCheck { frame_id: frame.frame_id, samples: n, report });
        decisions[k] = Some((fwd, report.verdict == Verdict::Major));
    }

    let mut selected = Vec::with_capacity(in_window.len());
    let mut dropped = 0;
    for s in in_window {
        match owner(s) {
            None => selected.push(*s),
            Some(k) => match &decisions[k] {
                Some((_, true)) => dropped += 1,
                Some((fwd, false)) => {
                    let p = translate_pixel(s.x, s.y, fwd, params.sampling);
                    selected.push(GazeSample::new(s.timestamp_ms, p.x, p.y));
                }
                None => unreachable!("every owning frame was checked"),
            },
        }
    }
    Ok(OcclusionAggregation {
        window: AlignmentWindow {
            frame_id: target.frame_id,
            mode: AlignMode::Aggregated,
            delta_ms,
            selected,
        },
        checks,
        dropped_samples: dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> OcclusionParams {
        OcclusionParams::default()
    }

    #[test]
    fn translate_substitutes_flow() {
        let mut f = FlowField::zeros(32, 32, 0, 1);
        let i = 10 * 32 + 10;
        f.fx[i] = 3.0;
        f.fy[i] = -2.0;
        let t = translate_pixel(10.0, 10.0, &f, Sampling::Nearest);
        assert_eq!((t.x, t.y, t.clamped), (13.0, 8.0, false));
        let t = translate_pixel(4.0, 7.0, &FlowField::zeros(32, 32, 0, 1), Sampling::Nearest);
        assert_eq!((t.x, t.y, t.clamped), (4.0, 7.0, false));
        let t = translate_pixel(30.0, 1.0, &FlowField::uniform(32, 32, 5.0, -4.0), Sampling::Nearest);
        assert_eq!((t.x, t.y, t.clamped), (31.0, 0.0, true));
    }

    #[test]
    fn bilinear_sampling_interpolates() {
        let mut f = FlowField::zeros(2, 1, 0, 0);
        f.fx = vec![0.0, 4.0];
        assert_eq!(f.sample(0.25, 0.0, Sampling::Bilinear).0, 1.0);
        assert_eq!(f.sample(0.25, 0.0, Sampling::Nearest).0, 0.0);
    }

    #[test]
    fn magnitude_difference_cases() {
        let rule = ConsistencyRule::MagnitudeDifference;
        let fwd = FlowField::uniform(16, 16, 2.0, 1.0);
        let bwd = FlowField::uniform(16, 16, -2.0, -1.0);
        assert_eq!(consistency_distance(4.0, 4.0, &fwd, &bwd, rule, Sampling::Nearest), (0.0, 0.0));

        let fwd = FlowField::uniform(16, 16, 5.0, 0.0);
        let bwd = FlowField::zeros(16, 16, 0, 0);
        assert_eq!(consistency_distance(4.0, 4.0, &fwd, &bwd, rule, Sampling::Nearest).0, 5.0);

        let fwd = FlowField::uniform(16, 16, 2.0, 0.0);
        let bwd = FlowField::uniform(16, 16, -6.0, 0.0);
        assert_eq!(consistency_distance(4.0, 4.0, &fwd, &bwd, rule, Sampling::Nearest).0, -4.0);
        // the round-trip residual disagrees on the same pair
        let rt = consistency_distance(4.0, 4.0, &fwd, &bwd, ConsistencyRule::RoundTrip, Sampling::Nearest);
        assert_eq!(rt.0, -4.0);
        let fwd = FlowField::uniform(16, 16, 3.0, 0.0);
        let bwd = FlowField::uniform(16, 16, 3.0, 0.0);
        assert_eq!(consistency_distance(4.0, 4.0, &fwd, &bwd, rule, Sampling::Nearest).0, 0.0);
        assert_eq!(
            consistency_distance(4.0, 4.0, &fwd, &bwd, ConsistencyRule::RoundTrip, Sampling::Nearest).0,
            6.0
        );
    }

    #[test]
    fn zero_flow_is_minor() {
        let z = FlowField::zeros(8, 8, 0, 1);
        let r = occlusion_check(&z, &z, &params()).unwrap();
        assert_eq!(r.eta_observed, 0.0);
        assert_eq!(r.verdict, Verdict::Minor);
    }

    #[test]
    fn ten_of_sixteen_is_major() {
        let mut fwd = FlowField::zeros(4, 4, 0, 1);
        let bwd = FlowField::zeros(4, 4, 1, 0);
        for i in 0..10 {
            fwd.fx[i] = 3.0;
        }
        let p = OcclusionParams { epsilon_px: 2.0, ..params() };
        let r = occlusion_check(&fwd, &bwd, &p).unwrap();
        assert_eq!(r.eta_observed, 0.625);
        assert_eq!(r.verdict, Verdict::Major);
        let r = occlusion_check(&fwd, &bwd, &OcclusionParams { eta_threshold: 0.625, ..p }).unwrap();
        assert_eq!(r.verdict, Verdict::Minor);
    }

    #[test]
    fn mismatched_flows_rejected() {
        let a = FlowField::zeros(4, 4, 0, 1);
        let b = FlowField::zeros(4, 5, 1, 0);
        assert!(matches!(occlusion_check(&a, &b, &params()), Err(Error::Shape(_))));
    }

    #[test]
    fn blockmatch_identity_and_size_check() {
        let mut img = Image::zeros(16, 16, 1);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f64;
        }
        let f = estimate_flow_blockmatch(&img, &img, 4, 3).unwrap();
        assert!(f.fx.iter().chain(&f.fy).all(|v| *v == 0.0));
        let other = Image::zeros(8, 16, 1);
        assert!(matches!(estimate_flow_blockmatch(&img, &other, 4, 3), Err(Error::Shape(_))));
        assert!(estimate_flow_blockmatch(&img, &img, 0, 3).is_err());
    }

    #[test]
    fn blockmatch_flat_image_prefers_zero() {
        let img = Image::zeros(12, 12, 1);
        let f = estimate_flow_blockmatch(&img, &img, 4, 4).unwrap();
        assert!(f.fx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn flow_file_round_trip() {
        let mut f = FlowField::uniform(3, 2, 1.5, -2.0);
        f.fx[4] = 7.0;
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        let back = FlowField::read_from(&mut buf.as_slice(), 0, 0).unwrap();
        assert_eq!(back, f);
    }
}
