//! Synthetic planted-signal task: a low-noise glyph moves across a grid of
//! noisy distractor glyphs while simulated gaze follows it. Future tokens
//! name the glyph class and where it will be, so locating the signal (which
//! gaze makes easy) is what the model has to learn.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::flow::{FlowField, FlowProvider};
use crate::gaze::{FrameRef, GazeSample, GazeTrack};
use crate::image::Image;
use crate::patch::PatchGrid;

pub const VOCAB: usize = 32;
pub const WORD_TABLE_VERSION: u32 = 1;
/// Offsets of the row and column token ranges.
pub const ROW_BASE: usize = 8;
pub const COL_BASE: usize = 16;
pub const TOKENS_PER_STEP: usize = 3;
const GLYPH: usize = 6;

/// Token id -> word, used to render sequences for ROUGE-L.
pub const WORDS: [&str; VOCAB] = [
    "cross", "box", "plus", "stripes", "bars", "slash", "block", "checker", //
    "top", "upper", "lower", "bottom", "row4", "row5", "row6", "row7", //
    "left", "midleft", "midright", "right", "col4", "col5", "col6", "col7", //
    "pad0", "pad1", "pad2", "pad3", "pad4", "pad5", "pad6", "pad7",
];

pub fn render_tokens(tokens: &[usize]) -> Vec<&'static str> {
    tokens.iter().map(|&t| WORDS.get(t).copied().unwrap_or("<unk>")).collect()
}

const GLYPHS: [[&str; GLYPH]; 8] = [
    ["#....#", ".#..#.", "..##..", "..##..", ".#..#.", "#....#"],
    ["######", "#....#", "#....#", "#....#", "#....#", "######"],
    ["..##..", "..##..", "######", "######", "..##..", "..##.."],
    ["######", "......", "######", "......", "######", "......"],
    ["#.#.#.", "#.#.#.", "#.#.#.", "#.#.#.", "#.#.#.", "#.#.#."],
    ["....##", "...##.", "..##..", ".##...", "##....", "#....."],
    ["......", ".####.", ".####.", ".####.", ".####.", "......"],
    ["##..##", "##..##", "..##..", "..##..", "##..##", "##..##"],
];

fn glyph_on(class: usize, gx: usize, gy: usize) -> bool {
    GLYPHS[class][gy].as_bytes()[gx] == b'#'
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_h: usize,
    pub n_v: usize,
    pub patch_px: usize,
    pub channels: usize,
    pub n_classes: usize,
    pub tau_o: usize,
    pub tau_a: usize,
    /// Background level and glyph contrast.
    pub background: f64,
    pub contrast: f64,
    /// Half-width of the uniform noise on the signal glyph; below contrast / 2.
    pub signal_noise: f64,
    /// Gaussian noise on distractor glyphs.
    pub distractor_noise: f64,
    pub gaze_jitter_px: f64,
    /// Probability that a gaze sample is a saccade to a nearby point.
    pub saccade_p: f64,
    /// Saccade reach in units of the jitter.
    pub saccade_scale: f64,
    pub gaze_rate_hz: f64,
    pub frame_interval_ms: i64,
    /// Probability that a future step's tokens are replaced by random ones.
    pub rule_noise: f64,
    /// Patches the signal advances per frame (row-major, wrapping).
    pub motion_step: usize,
    /// Seeds the class permutation applied to future class tokens.
    pub motion_seed: u64,
    pub occlusion_p: f64,
    pub occlusion_coverage: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_h: 4,
            n_v: 4,
            patch_px: 8,
            channels: 3,
            n_classes: 4,
            tau_o: 5,
            tau_a: 2,
            background: 0.2,
            contrast: 0.6,
            signal_noise: 0.1,
            distractor_noise: 0.3,
            gaze_jitter_px: 3.0,
            saccade_p: 0.15,
            saccade_scale: 4.0,
            gaze_rate_hz: 30.0,
            frame_interval_ms: 1000,
            rule_noise: 0.1,
            motion_step: 1,
            motion_seed: 0,
            occlusion_p: 0.0,
            occlusion_coverage: 0.7,
            n_train: 2048,
            n_val: 256,
            n_test: 512,
        }
    }
}

impl SynthConfig {
    pub fn grid(&self) -> PatchGrid {
        PatchGrid { n_h: self.n_h, n_v: self.n_v, patch_w: self.patch_px, patch_h: self.patch_px }
    }

    pub fn width(&self) -> usize {
        self.n_h * self.patch_px
    }

    pub fn height(&self) -> usize {
        self.n_v * self.patch_px
    }

    pub fn n_patches(&self) -> usize {
        self.n_h * self.n_v
    }

    pub fn out_len(&self) -> usize {
        self.tau_a * TOKENS_PER_STEP
    }

    /// Capture time of frame `f`.
    pub fn frame_time(&self, f: usize) -> i64 {
        self.frame_interval_ms * (f as i64 + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_h == 0 || self.n_v == 0 || self.n_h > 8 || self.n_v > 8 {
            return bad(format!("grid {}x{} must lie within 1..=8 per side", self.n_h, self.n_v));
        }
        if self.patch_px < GLYPH {
            return bad(format!("patch_px {} is smaller than the {GLYPH}px glyphs", self.patch_px));
        }
        if self.n_classes < 2 || self.n_classes > GLYPHS.len() {
            return bad(format!("n_classes must lie in 2..={}", GLYPHS.len()));
        }
        if self.tau_o == 0 || self.tau_a == 0 || self.channels == 0 {
            return bad("tau_o, tau_a and channels must be positive".into());
        }
        if !(self.signal_noise >= 0.0 && self.signal_noise < self.contrast / 2.0) {
            return bad("signal_noise must lie in [0, contrast/2)".into());
        }
        if !(self.background >= 0.0 && self.background + self.contrast <= 1.0 && self.contrast > 0.0) {
            return bad("background + contrast must fit in [0, 1]".into());
        }
        for (name, p) in [("saccade_p", self.saccade_p), ("rule_noise", self.rule_noise), ("occlusion_p", self.occlusion_p)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.occlusion_coverage) {
            return bad("occlusion_coverage must lie in [0, 1)".into());
        }
        if self.distractor_noise < 0.0 || self.gaze_jitter_px < 0.0 || self.saccade_scale < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        if !(self.gaze_rate_hz > 0.0) || self.frame_interval_ms <= 0 {
            return bad("gaze rate and frame interval must be positive".into());
        }
        if self.motion_step == 0 {
            return bad("motion_step must be positive".into());
        }
        Ok(())
    }

    /// Class permutation used by the motion rule.
    pub fn class_map(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.n_classes).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(self.motion_seed));
        perm
    }

    /// Signal patch at frame `f` (or at future step `f >= tau_o`).
    pub fn signal_patch(&self, start: usize, f: usize) -> usize {
        (start + f * self.motion_step) % self.n_patches()
    }

    /// Noise-free tokens for a future or current step at patch `p`.
    pub fn step_tokens(&self, class: usize, p: usize) -> [usize; TOKENS_PER_STEP] {
        [class, ROW_BASE + p / self.n_h, COL_BASE + p % self.n_h]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x as f64 && y >= self.y as f64 && x < (self.x + self.w) as f64 && y < (self.y + self.h) as f64
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

/// An occluder that enters frame `frame` from outside the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionEvent {
    pub frame: usize,
    pub rect: Rect,
    /// Occluder displacement from the previous frame, in pixels.
    pub velocity: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub index: u64,
    pub frames: Vec<Image>,
    pub frame_refs: Vec<FrameRef>,
    pub gaze: GazeTrack,
    pub signal_class: usize,
    pub signal_start: usize,
    /// Signal patch per frame.
    pub signal_patches: Vec<usize>,
    pub future_tokens: Vec<usize>,
    pub current_tokens: Vec<usize>,
    pub occlusion: Option<OcclusionEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub seed: u64,
    pub train: Vec<SynthSample>,
    pub val: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl SynthDataset {
    pub fn split(&self, s: Split) -> &[SynthSample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Per-sample RNG seed derived from the dataset seed and the global sample index.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn q32(v: f64) -> f64 {
    v as f32 as f64
}

fn occluder_rect(width: usize, height: usize, coverage: f64, rng: &mut ChaCha8Rng) -> Rect {
    let target = coverage * (width * height) as f64;
    let aspect: f64 = rng.gen_range(0.8..1.25);
    let w = ((target * aspect).sqrt().round() as usize).clamp(1, width);
    let h = ((target / w as f64).round() as usize).clamp(1, height);
    let x = rng.gen_range(0..=width - w);
    let y = rng.gen_range(0..=height - h);
    Rect { x, y, w, h }
}

pub fn generate_sample(cfg: &SynthConfig, seed: u64, index: u64) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, index));
    let grid = cfg.grid();
    let (w, h, n) = (cfg.width(), cfg.height(), cfg.n_patches());
    let class = rng.gen_range(0..cfg.n_classes);
    let start = rng.gen_range(0..n);
    let distractors: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.n_classes)).collect();
    let dnoise = Normal::new(0.0, cfg.distractor_noise.max(1e-300)).expect("finite sigma");
    let off = (cfg.patch_px - GLYPH) / 2;

    let signal_patches: Vec<usize> = (0..cfg.tau_o).map(|f| cfg.signal_patch(start, f)).collect();
    let mut frames = Vec::with_capacity(cfg.tau_o);
    for &sp in &signal_patches {
        let mut img = Image::zeros(w, h, cfg.channels);
        for p in 0..n {
            let (px, py) = ((p % cfg.n_h) * cfg.patch_px, (p / cfg.n_h) * cfg.patch_px);
            let (cls, signal) = if p == sp { (class, true) } else { (distractors[p], false) };
            for ly in 0..cfg.patch_px {
                for lx in 0..cfg.patch_px {
                    let on = lx >= off && ly >= off && lx < off + GLYPH && ly < off + GLYPH && glyph_on(cls, lx - off, ly - off);
                    let base = cfg.background + if on { cfg.contrast } else { 0.0 };
                    let noise = if signal {
                        if cfg.signal_noise > 0.0 { rng.gen_range(-cfg.signal_noise..=cfg.signal_noise) } else { 0.0 }
                    } else if cfg.distractor_noise > 0.0 {
                        dnoise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    let v = q32((base + noise).clamp(0.0, 1.0));
                    for c in 0..cfg.channels {
                        img.set(px + lx, py + ly, c, v);
                    }
                }
            }
        }
        frames.push(img);
    }

    let occlusion = if cfg.tau_o > 1 && rng.gen::<f64>() < cfg.occlusion_p {
        let frame = rng.gen_range(1..cfg.tau_o);
        let rect = occluder_rect(w, h, cfg.occlusion_coverage, &mut rng);
        let velocity = ((w + rect.w) as f64, 0.0);
        for y in rect.y..rect.y + rect.h {
            for x in rect.x..rect.x + rect.w {
                for c in 0..cfg.channels {
                    frames[frame].set(x, y, c, 0.5);
                }
            }
        }
        Some(OcclusionEvent { frame, rect, velocity })
    } else {
        None
    };

    let map = cfg.class_map();
    let last = cfg.tau_o - 1;
    let mut future_tokens = Vec::with_capacity(cfg.out_len());
    for j in 1..=cfg.tau_a {
        let p = cfg.signal_patch(start, last + j);
        let mut t = cfg.step_tokens(map[class], p);
        if rng.gen::<f64>() < cfg.rule_noise {
            t = [rng.gen_range(0..cfg.n_classes), ROW_BASE + rng.gen_range(0..cfg.n_v), COL_BASE + rng.gen_range(0..cfg.n_h)];
        }
        future_tokens.extend_from_slice(&t);
    }
    let current_tokens = signal_patches.iter().flat_map(|&p| cfg.step_tokens(class, p)).collect();

    let jitter = Normal::new(0.0, cfg.gaze_jitter_px.max(1e-300)).expect("finite sigma");
    let reach = cfg.saccade_scale * cfg.gaze_jitter_px;
    let t_end = cfg.frame_time(last);
    let mut samples = Vec::new();
    for i in 0.. {
        let t = (i as f64 * 1000.0 / cfg.gaze_rate_hz).round() as i64;
        if t > t_end {
            break;
        }
        let f = ((t + cfg.frame_interval_ms - 1) / cfg.frame_interval_ms - 1).clamp(0, last as i64) as usize;
        let (cx, cy) = grid.patch_center(signal_patches[f]);
        let (dx, dy) = if rng.gen::<f64>() < cfg.saccade_p {
            if reach > 0.0 { (rng.gen_range(-reach..=reach), rng.gen_range(-reach..=reach)) } else { (0.0, 0.0) }
        } else if cfg.gaze_jitter_px > 0.0 {
            (jitter.sample(&mut rng), jitter.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        samples.push(GazeSample::new(t, q32(cx + dx), q32(cy + dy)));
    }
    let gaze = GazeTrack { samples, rate_hz: cfg.gaze_rate_hz, duplicates_collapsed: 0 };

    let frame_refs = (0..cfg.tau_o)
        .map(|f| FrameRef {
            frame_id: f as i64,
            timestamp_ms: cfg.frame_time(f),
            image_path: format!("s{index:06}_f{f}.ghm"),
            width: w,
            height: h,
        })
        .collect();
    SynthSample {
        index,
        frames,
        frame_refs,
        gaze,
        signal_class: class,
        signal_start: start,
        signal_patches,
        future_tokens,
        current_tokens,
        occlusion,
    }
}

/// Deterministic dataset: sample `i` of the concatenated train/val/test
/// sequence depends only on `(config, seed, i)`.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    cfg.validate()?;
    let total = cfg.n_train + cfg.n_val + cfg.n_test;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(total.max(1));
    let chunk = total.div_ceil(workers.max(1)).max(1);
    let mut all: Vec<SynthSample> = Vec::with_capacity(total);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..total)
            .step_by(chunk)
            .map(|lo| {
                let hi = (lo + chunk).min(total);
                s.spawn(move || (lo..hi).map(|i| generate_sample(cfg, seed, i as u64)).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            all.extend(h.join().expect("generator thread"));
        }
    });
    let test = all.split_off(cfg.n_train + cfg.n_val);
    let val = all.split_off(cfg.n_train);
    Ok(SynthDataset { config: cfg.clone(), seed, train: all, val, test })
}

/// Token-accuracy ceiling of the predictor that knows the signal location
/// and class, by enumeration over every (start patch, class) and every
/// rule outcome.
pub fn bayes_ceiling(cfg: &SynthConfig) -> Result<f64> {
    Ok(ceiling_by_kind(cfg)?.iter().sum::<f64>() / TOKENS_PER_STEP as f64)
}

/// Per-token-kind ceilings: `[class, row, column]`.
pub fn ceiling_by_kind(cfg: &SynthConfig) -> Result<[f64; TOKENS_PER_STEP]> {
    cfg.validate()?;
    if cfg.n_patches() > 16 || cfg.n_classes > 8 {
        return Err(Error::Config("bayes_ceiling enumerates at most 16 patches and 8 classes".into()));
    }
    let map = cfg.class_map();
    let ranges = [(0, cfg.n_classes), (ROW_BASE, cfg.n_v), (COL_BASE, cfg.n_h)];
    let mut acc = [0.0; TOKENS_PER_STEP];
    let mut cases = 0usize;
    for start in 0..cfg.n_patches() {
        for class in 0..cfg.n_classes {
            for j in 1..=cfg.tau_a {
                let p = cfg.signal_patch(start, cfg.tau_o - 1 + j);
                let rule = cfg.step_tokens(map[class], p);
                for (k, &(base, size)) in ranges.iter().enumerate() {
                    // P(token = v) over the rule-noise outcomes; the optimal guess takes the max.
                    let mut probs: BTreeMap<usize, f64> = BTreeMap::new();
                    *probs.entry(rule[k]).or_default() += 1.0 - cfg.rule_noise;
                    for v in 0..size {
                        *probs.entry(base + v).or_default() += cfg.rule_noise / size as f64;
                    }
                    acc[k] += probs.values().copied().fold(0.0, f64::max);
                }
                cases += 1;
            }
        }
    }
    Ok(acc.map(|a| a / cases as f64))
}

fn patch_pixels(img: &Image, grid: &PatchGrid, p: usize) -> Vec<f64> {
    let (px, py) = ((p % grid.n_h) * grid.patch_w, (p / grid.n_h) * grid.patch_h);
    let mut v = Vec::with_capacity(grid.patch_w * grid.patch_h);
    for y in 0..grid.patch_h {
        for x in 0..grid.patch_w {
            v.push(img.get(px + x, py + y, 0));
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbePatch {
    Signal,
    Random { seed: u64 },
}

/// Nearest-centroid probe from last-frame patch pixels to the future class
/// tokens. Returns the class-token accuracy on `test`.
pub fn probe_accuracy(cfg: &SynthConfig, train: &[SynthSample], test: &[SynthSample], which: ProbePatch) -> f64 {
    let grid = cfg.grid();
    let dim = cfg.patch_px * cfg.patch_px;
    let mut rng = ChaCha8Rng::seed_from_u64(match which {
        ProbePatch::Random { seed } => seed,
        ProbePatch::Signal => 0,
    });
    let mut pick = |s: &SynthSample| match which {
        ProbePatch::Signal => s.signal_patches[cfg.tau_o - 1],
        ProbePatch::Random { .. } => rng.gen_range(0..cfg.n_patches()),
    };
    let mut sums = vec![vec![0.0; dim]; cfg.n_classes];
    let mut counts = vec![0usize; cfg.n_classes];
    for s in train {
        let x = patch_pixels(&s.frames[cfg.tau_o - 1], &grid, pick(s));
        for j in 0..cfg.tau_a {
            let c = s.future_tokens[j * TOKENS_PER_STEP];
            counts[c] += 1;
            sums[c].iter_mut().zip(&x).for_each(|(a, b)| *a += b);
        }
    }
    let centroids: Vec<Vec<f64>> =
        sums.iter().zip(&counts).map(|(s, &n)| s.iter().map(|v| v / n.max(1) as f64).collect()).collect();
    let (mut hit, mut total) = (0usize, 0usize);
    for s in test {
        let x = patch_pixels(&s.frames[cfg.tau_o - 1], &grid, pick(s));
        let mut best = (f64::INFINITY, 0);
        for (c, m) in centroids.iter().enumerate() {
            if counts[c] == 0 {
                continue;
            }
            let d: f64 = m.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        for j in 0..cfg.tau_a {
            hit += (s.future_tokens[j * TOKENS_PER_STEP] == best.1) as usize;
            total += 1;
        }
    }
    hit as f64 / total.max(1) as f64
}

/// Ground-truth flows between two frames of one sample.
pub fn sample_flows(cfg: &SynthConfig, s: &SynthSample, src: usize, dst: usize) -> (FlowField, FlowField) {
    let grid = cfg.grid();
    let (w, h) = (cfg.width(), cfg.height());
    let mut fwd = FlowField::zeros(w, h, src as i64, dst as i64);
    let mut bwd = FlowField::zeros(w, h, dst as i64, src as i64);
    let (pa, pb) = (s.signal_patches[src], s.signal_patches[dst]);
    let (ax, ay) = grid.patch_center(pa);
    let (bx, by) = grid.patch_center(pb);
    let (dx, dy) = (bx - ax, by - ay);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if grid.patch_of(x, y) == pa {
                fwd.fx[i] = dx;
                fwd.fy[i] = dy;
            }
            if grid.patch_of(x, y) == pb {
                bwd.fx[i] = -dx;
                bwd.fy[i] = -dy;
            }
        }
    }
    if let Some(ev) = s.occlusion.filter(|e| e.frame == dst && src < dst) {
        for y in 0..h {
            for x in 0..w {
                if ev.rect.contains(x as f64, y as f64) {
                    bwd.fx[y * w + x] = -ev.velocity.0;
                    bwd.fy[y * w + x] = -ev.velocity.1;
                }
            }
        }
    }
    (fwd, bwd)
}

/// Serves ground-truth flows for one synthetic sample (frame ids are frame indices).
pub struct SynthFlowProvider<'a> {
    pub config: &'a SynthConfig,
    pub sample: &'a SynthSample,
}

impl FlowProvider for SynthFlowProvider<'_> {
    fn flow_pair(&self, earlier: &FrameRef, target: &FrameRef) -> Result<(FlowField, FlowField)> {
        let n = self.sample.frames.len() as i64;
        for id in [earlier.frame_id, target.frame_id] {
            if id < 0 || id >= n {
                return Err(Error::Flow { src: earlier.frame_id, dst: target.frame_id, msg: format!("no frame {id}") });
            }
        }
        Ok(sample_flows(self.config, self.sample, earlier.frame_id as usize, target.frame_id as usize))
    }
}

/// A two-frame scene for occlusion tests: smooth texture under a pure pan,
/// with an occluder entering from outside the frame.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionScene {
    pub earlier: Image,
    pub target: Image,
    pub fwd: FlowField,
    pub bwd: FlowField,
    pub occluder: Option<Rect>,
    pub pan: (f64, f64),
}

impl OcclusionScene {
    /// Fraction of target pixels covered by the occluder.
    pub fn coverage(&self) -> f64 {
        self.occluder.map_or(0.0, |r| r.area() as f64 / (self.target.width * self.target.height) as f64)
    }
}

pub fn occlusion_scene(width: usize, height: usize, coverage: f64, pan: (f64, f64), seed: u64) -> OcclusionScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64)> =
        (0..4).map(|_| (rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4), rng.gen_range(0.0..std::f64::consts::TAU))).collect();
    let tex = |x: f64, y: f64| 0.5 + waves.iter().map(|(a, b, p)| (a * x + b * y + p).sin()).sum::<f64>() / 8.0;
    let occluder = (coverage > 0.0).then(|| occluder_rect(width, height, coverage, &mut rng));
    let velocity = (width as f64 + occluder.map_or(0.0, |r| r.w as f64), 0.0);
    let mut earlier = Image::zeros(width, height, 1);
    let mut target = Image::zeros(width, height, 1);
    let mut fwd = FlowField::uniform(width, height, pan.0, pan.1);
    let mut bwd = FlowField::uniform(width, height, -pan.0, -pan.1);
    (fwd.src_frame, fwd.dst_frame, bwd.src_frame, bwd.dst_frame) = (0, 1, 1, 0);
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f64, y as f64);
            earlier.set(x, y, 0, tex(xf, yf));
            let covered = occluder.is_some_and(|r| r.contains(xf, yf));
            target.set(x, y, 0, if covered { 0.05 } else { tex(xf - pan.0, yf - pan.1) });
            if covered {
                bwd.fx[y * width + x] = -velocity.0;
                bwd.fy[y * width + x] = -velocity.1;
            }
        }
    }
    OcclusionScene { earlier, target, fwd, bwd, occluder, pan }
}

#[derive(Serialize, Deserialize)]
struct SampleIndex {
    index: u64,
    frames: Vec<FrameRef>,
    gaze_csv: String,
    signal_class: usize,
    signal_start: usize,
    signal_patches: Vec<usize>,
    future_tokens: Vec<usize>,
    current_tokens: Vec<usize>,
    occlusion: Option<OcclusionEvent>,
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    word_table_version: u32,
    words: Vec<String>,
    seed: u64,
    config: SynthConfig,
    train: Vec<SampleIndex>,
    val: Vec<SampleIndex>,
    test: Vec<SampleIndex>,
}

/// Writes frames as GHM1 image containers, one gaze CSV per sample and `index.json`.
pub fn write_dataset(ds: &SynthDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let write_split = |samples: &[SynthSample]| -> Result<Vec<SampleIndex>> {
        let mut out = Vec::with_capacity(samples.len());
        for s in samples {
            for (img, r) in s.frames.iter().zip(&s.frame_refs) {
                container::save_image(&dir.join(&r.image_path), img)?;
            }
            let gaze_csv = format!("s{:06}.csv", s.index);
            fs::write(dir.join(&gaze_csv), s.gaze.to_csv())?;
            out.push(SampleIndex {
                index: s.index,
                frames: s.frame_refs.clone(),
                gaze_csv,
                signal_class: s.signal_class,
                signal_start: s.signal_start,
                signal_patches: s.signal_patches.clone(),
                future_tokens: s.future_tokens.clone(),
                current_tokens: s.current_tokens.clone(),
                occlusion: s.occlusion,
            });
        }
        Ok(out)
    };
    let index = DatasetIndex {
        word_table_version: WORD_TABLE_VERSION,
        words: WORDS.iter().map(|w| w.to_string()).collect(),
        seed: ds.seed,
        config: ds.config.clone(),
        train: write_split(&ds.train)?,
        val: write_split(&ds.val)?,
        test: write_split(&ds.test)?,
    };
    fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<SynthDataset> {
    let index: DatasetIndex = serde_json::from_slice(&fs::read(dir.join("index.json"))?)?;
    if index.word_table_version != WORD_TABLE_VERSION {
        return Err(Error::Config(format!("dataset word table v{} unsupported", index.word_table_version)));
    }
    let load = |entries: Vec<SampleIndex>| -> Result<Vec<SynthSample>> {
        entries
            .into_iter()
            .map(|e| {
                let frames =
                    e.frames.iter().map(|r| container::load_image(&dir.join(&r.image_path))).collect::<Result<Vec<_>>>()?;
                let gaze = crate::gaze::parse_gaze_csv(&fs::read(dir.join(&e.gaze_csv))?)?;
                Ok(SynthSample {
                    index: e.index,
                    frames,
                    frame_refs: e.frames,
                    gaze: GazeTrack { rate_hz: index.config.gaze_rate_hz, ..gaze },
                    signal_class: e.signal_class,
                    signal_start: e.signal_start,
                    signal_patches: e.signal_patches,
                    future_tokens: e.future_tokens,
                    current_tokens: e.current_tokens,
                    occlusion: e.occlusion,
                })
            })
            .collect()
    };
    Ok(SynthDataset {
        config: index.config.clone(),
        seed: index.seed,
        train: load(index.train)?,
        val: load(index.val)?,
        test: load(index.test)?,
    })
}
