//! Preprocessing: gaze windows, heatmaps, patch distributions and the
//! per-frame matrices fed to the model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelKind, QueryMode, RunConfig};
use crate::error::Result;
use crate::flow::aggregate_with_occlusion;
use crate::gaze::{align_window, AlignMode, AlignmentWindow, GazeSample};
use crate::heatmap::{binarize, gaussian_splat, overlay, Heatmap};
use crate::image::Image;
use crate::linalg::Mat;
use crate::model::{patchify, FrameInput, SampleInput};
use crate::patch::{gaze_distribution, Fallback};
use crate::pseudo::{compose_pseudo_overlay, PseudoGazeNet};
use crate::synth::{sample_seed, SynthFlowProvider, SynthSample};

/// Gaze preprocessing for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGaze {
    pub window: AlignmentWindow,
    /// Patch distribution of the binarized heatmap.
    pub dist: Vec<f64>,
    pub fallback: bool,
    /// Patch holding the mean gaze point; `N` when the window is empty.
    pub cell: usize,
    pub dropped_samples: usize,
}

pub fn frame_window(cfg: &RunConfig, s: &SynthSample, f: usize) -> Result<(AlignmentWindow, usize)> {
    let frame = &s.frame_refs[f];
    let mode = match cfg.model {
        ModelKind::SingularGaze => AlignMode::Singular,
        _ => AlignMode::Aggregated,
    };
    if mode == AlignMode::Aggregated && cfg.occlusion {
        let provider = SynthFlowProvider { config: &cfg.data, sample: s };
        let agg = aggregate_with_occlusion(&s.gaze, &s.frame_refs, frame, cfg.delta_ms, &provider, &cfg.occlusion_params())?;
        return Ok((agg.window, agg.dropped_samples));
    }
    let w = align_window(&s.gaze, frame, mode, cfg.delta_ms)
        .unwrap_or_else(|e| AlignmentWindow::empty(e.frame_id, mode, cfg.delta_ms));
    Ok((w, 0))
}

pub fn frame_heatmap(cfg: &RunConfig, window: &AlignmentWindow) -> Result<Heatmap> {
    gaussian_splat(window, cfg.data.width(), cfg.data.height(), cfg.sigma())
}

pub fn prepare_gaze(cfg: &RunConfig, s: &SynthSample) -> Result<Vec<FrameGaze>> {
    let grid = cfg.data.grid();
    let n = grid.n_patches();
    (0..s.frames.len())
        .map(|f| {
            let (window, dropped_samples) = frame_window(cfg, s, f)?;
            let hm = frame_heatmap(cfg, &window)?;
            let d = gaze_distribution(&binarize(&hm, cfg.binarize_tau)?, &grid)?;
            let inb: Vec<&GazeSample> =
                window.selected.iter().filter(|g| g.in_bounds(cfg.data.width(), cfg.data.height())).collect();
            let cell = if inb.is_empty() {
                n
            } else {
                let k = inb.len() as f64;
                let (mx, my) = inb.iter().fold((0.0, 0.0), |(x, y), g| (x + g.x, y + g.y));
                grid.patch_of_point(mx / k, my / k).unwrap_or(n)
            };
            Ok(FrameGaze { window, dist: d.probs, fallback: d.fallback == Fallback::Uniform, cell, dropped_samples })
        })
        .collect()
}

/// `h / max(h)` as the pseudo-net's regression target.
pub fn heatmap_target(cfg: &RunConfig, fg: &FrameGaze) -> Result<Vec<f64>> {
    Ok(crate::heatmap::normalized(&frame_heatmap(cfg, &fg.window)?))
}

pub fn gaze_overlay(cfg: &RunConfig, img: &Image, fg: &FrameGaze) -> Result<Image> {
    overlay(img, &frame_heatmap(cfg, &fg.window)?, cfg.overlay_alpha)
}

/// Where the attention queries come from for one pass.
#[derive(Clone, Copy)]
pub enum QuerySource<'a> {
    Rgb,
    Overlay,
    Pseudo(&'a PseudoGazeNet),
}

impl<'a> QuerySource<'a> {
    /// Pseudo mode trains on the current pseudo-net overlays once the net exists.
    pub fn for_training(cfg: &RunConfig, pseudo: Option<&'a PseudoGazeNet>) -> QuerySource<'a> {
        match (cfg.query_mode, pseudo) {
            (QueryMode::Rgb | QueryMode::GazeText, _) => QuerySource::Rgb,
            (QueryMode::Pseudo, Some(net)) => QuerySource::Pseudo(net),
            _ => QuerySource::Overlay,
        }
    }

    pub fn for_eval(cfg: &RunConfig, pseudo: Option<&'a PseudoGazeNet>) -> QuerySource<'a> {
        match (cfg.query_mode, pseudo) {
            (QueryMode::Overlay, _) => QuerySource::Overlay,
            (QueryMode::Pseudo, Some(net)) => QuerySource::Pseudo(net),
            _ => QuerySource::Rgb,
        }
    }
}

/// Model-ready matrices for one sample.
pub struct OwnedSample {
    pub rgb: Vec<Mat>,
    pub query: Vec<Option<Mat>>,
    pub gaze: Vec<Option<Vec<f64>>>,
    pub cells: Vec<usize>,
    pub targets: Vec<usize>,
}

impl OwnedSample {
    pub fn input(&self) -> SampleInput<'_> {
        SampleInput {
            frames: (0..self.rgb.len())
                .map(|f| FrameInput {
                    rgb: &self.rgb[f],
                    query: self.query[f].as_ref(),
                    gaze: self.gaze[f].as_deref(),
                    gaze_cell: Some(self.cells[f]),
                })
                .collect(),
            targets: &self.targets,
        }
    }
}

pub fn targets(cfg: &RunConfig, s: &SynthSample) -> Vec<usize> {
    match cfg.task {
        super::config::Task::FuturePrediction => s.future_tokens.clone(),
        super::config::Task::ActivityUnderstanding => s.current_tokens.clone(),
    }
}

/// Per-frame corruption draws, shared across corruption levels so that the
/// corrupted frame sets are nested as `p` grows.
pub fn corruption_mask(seed: u64, index: u64, frames: usize, p: f64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed ^ 0xC0_22_u64, index));
    (0..frames).map(|_| rng.gen::<f64>() < p).collect()
}

pub fn build_sample(
    cfg: &RunConfig,
    s: &SynthSample,
    gaze: Option<&[FrameGaze]>,
    source: QuerySource,
    corrupt: &[bool],
) -> Result<OwnedSample> {
    let grid = cfg.data.grid();
    let n = grid.n_patches();
    let blocks = cfg.uses_blocks();
    let mut out = OwnedSample {
        rgb: Vec::with_capacity(s.frames.len()),
        query: Vec::with_capacity(s.frames.len()),
        gaze: Vec::with_capacity(s.frames.len()),
        cells: Vec::with_capacity(s.frames.len()),
        targets: targets(cfg, s),
    };
    for (f, img) in s.frames.iter().enumerate() {
        let fg = gaze.map(|g| &g[f]);
        let dropped = corrupt.get(f).copied().unwrap_or(false);
        out.rgb.push(patchify(img, &grid)?);
        let q = match (blocks, source, fg) {
            (false, _, _) | (true, QuerySource::Rgb, _) => None,
            (true, _, _) if dropped => None,
            (true, QuerySource::Overlay, Some(fg)) => Some(patchify(&gaze_overlay(cfg, img, fg)?, &grid)?),
            (true, QuerySource::Overlay, None) => None,
            (true, QuerySource::Pseudo(net), _) => {
                Some(patchify(&compose_pseudo_overlay(net, img, cfg.overlay_alpha)?, &grid)?)
            }
        };
        out.query.push(q);
        out.gaze.push(if blocks { fg.map(|g| g.dist.clone()) } else { None });
        out.cells.push(match fg {
            Some(g) if !dropped => g.cell,
            _ => n,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn cfg() -> RunConfig {
        RunConfig { data: SynthConfig { n_train: 3, n_val: 0, n_test: 1, ..SynthConfig::default() }, ..RunConfig::default() }
    }

    #[test]
    fn aggregated_window_covers_delta() {
        let c = cfg();
        let ds = generate(&c.data, 0).unwrap();
        let g = prepare_gaze(&c, &ds.train[0]).unwrap();
        assert_eq!(g.len(), 5);
        // 200 ms at 30 Hz: samples at 800..=1000 ms -> 7 samples
        assert_eq!(g[0].window.selected.len(), 7);
        for fg in &g {
            assert!((fg.dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let s = RunConfig { model: ModelKind::SingularGaze, ..c };
        let g = prepare_gaze(&s, &ds.train[0]).unwrap();
        assert_eq!(g[2].window.selected.len(), 1);
        assert_eq!(g[2].window.selected[0].timestamp_ms, 3000);
    }

    #[test]
    fn zero_jitter_distribution_peaks_on_signal() {
        let mut c = cfg();
        c.data.gaze_jitter_px = 0.0;
        let ds = generate(&c.data, 0).unwrap();
        for s in &ds.train {
            let g = prepare_gaze(&c, s).unwrap();
            for (f, fg) in g.iter().enumerate() {
                let best = crate::model::argmax_index(&fg.dist);
                assert_eq!(best, s.signal_patches[f]);
                assert_eq!(fg.cell, s.signal_patches[f]);
            }
        }
    }

    #[test]
    fn corruption_sets_are_nested() {
        for idx in 0..50 {
            let lo = corruption_mask(3, idx, 5, 0.2);
            let hi = corruption_mask(3, idx, 5, 0.6);
            assert!(lo.iter().zip(&hi).all(|(a, b)| !a || *b));
            assert!(corruption_mask(3, idx, 5, 1.0).iter().all(|&b| b));
            assert!(corruption_mask(3, idx, 5, 0.0).iter().all(|&b| !b));
        }
    }

    #[test]
    fn corrupted_frames_fall_back_to_rgb_queries() {
        let c = cfg();
        let ds = generate(&c.data, 0).unwrap();
        let s = &ds.train[0];
        let g = prepare_gaze(&c, s).unwrap();
        let all = build_sample(&c, s, Some(&g), QuerySource::Overlay, &[]).unwrap();
        assert!(all.query.iter().all(|q| q.is_some()));
        let mask = [true, false, true, false, false];
        let some = build_sample(&c, s, Some(&g), QuerySource::Overlay, &mask).unwrap();
        for (q, m) in some.query.iter().zip(mask) {
            assert_eq!(q.is_none(), m);
        }
        assert_eq!(some.gaze, all.gaze);
    }
}
