//! Run configuration: one JSON document plus `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{ConsistencyRule, OcclusionParams, Sampling, DEFAULT_EPSILON_PX, DEFAULT_ETA};
use crate::model::{ModelConfig, OptimizerKind};
use crate::synth::{SynthConfig, TOKENS_PER_STEP, VOCAB};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    FuturePrediction,
    ActivityUnderstanding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Base,
    SingularGaze,
    AggregatedGaze,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryMode {
    Overlay,
    Pseudo,
    Rgb,
    OverlayTrainRgbTest,
    GazeText,
}

impl QueryMode {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown query mode {s:?}")))
    }

    pub fn name(&self) -> &'static str {
        match self {
            QueryMode::Overlay => "overlay",
            QueryMode::Pseudo => "pseudo",
            QueryMode::Rgb => "rgb",
            QueryMode::OverlayTrainRgbTest => "overlay-train-rgb-test",
            QueryMode::GazeText => "gaze-text",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerChoice,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip: f64,
    pub init_scale: f64,
    /// Evaluate teacher-forced loss on the eval split every this many steps (0 = never).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            batch_size: 32,
            optimizer: OptimizerChoice::Adam,
            lr: 3e-3,
            momentum: 0.9,
            clip: 0.0,
            init_scale: 1.0,
            log_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoConfig {
    pub c1: usize,
    pub c2: usize,
    pub pretrain_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig { c1: 8, c2: 16, pretrain_steps: 1000, batch_size: 16, lr: 2e-2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: Task,
    pub model: ModelKind,
    pub query_mode: QueryMode,
    pub lambda: f64,
    pub n_blocks: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ctx_dim: usize,
    pub hidden_dim: usize,
    pub delta_ms: i64,
    pub occlusion: bool,
    pub epsilon_px: f64,
    pub eta: f64,
    /// Heatmap sigma in pixels; `None` uses half the patch side.
    pub sigma_px: Option<f64>,
    /// Relative threshold for the binary heatmap behind the gaze distribution.
    pub binarize_tau: f64,
    pub overlay_alpha: f64,
    /// Per-frame probability of dropping the gaze overlay at evaluation.
    pub corruption_p: f64,
    pub rouge_beta: f64,
    pub data: SynthConfig,
    pub train: TrainConfig,
    pub pseudo: PseudoConfig,
    pub seed: u64,
    /// Seeds averaged by sweeps and multi-seed evaluation.
    pub seeds: Vec<u64>,
    /// Sweep worker threads; 0 uses the available parallelism.
    pub workers: usize,
    pub data_dir: Option<String>,
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::FuturePrediction,
            model: ModelKind::AggregatedGaze,
            query_mode: QueryMode::Overlay,
            lambda: 100.0,
            n_blocks: 2,
            heads: 1,
            d_model: 16,
            ctx_dim: 32,
            hidden_dim: 32,
            delta_ms: 200,
            occlusion: true,
            epsilon_px: DEFAULT_EPSILON_PX,
            eta: DEFAULT_ETA,
            sigma_px: None,
            binarize_tau: 0.5,
            overlay_alpha: 0.6,
            corruption_p: 0.0,
            rouge_beta: 1.0,
            data: SynthConfig::default(),
            train: TrainConfig::default(),
            pseudo: PseudoConfig::default(),
            seed: 0,
            seeds: vec![0, 1, 2],
            workers: 1,
            data_dir: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_json(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides; dotted keys reach nested tables and
    /// values parse as JSON, falling back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for s in sets {
            let s = s.as_ref();
            let (key, raw) = s.split_once('=').ok_or_else(|| Error::Config(format!("override {s:?} lacks '='")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut cur = &mut v;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = cur
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not inside a table")))?;
                if !obj.contains_key(*part) {
                    return Err(Error::Config(format!("unknown config key {key:?}")));
                }
                if i + 1 == parts.len() {
                    obj.insert(part.to_string(), value.clone());
                    break;
                }
                cur = obj.get_mut(*part).expect("checked above");
            }
        }
        serde_json::from_value(v).map_err(|e| Error::Config(format!("override: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.data.validate()?;
        if self.model == ModelKind::Base {
            if self.lambda != 0.0 {
                return bad("model=base forbids lambda > 0");
            }
            if self.query_mode != QueryMode::Rgb {
                return bad("model=base takes no gaze inputs; use query_mode=rgb");
            }
        }
        if self.model == ModelKind::AggregatedGaze && self.delta_ms <= 0 {
            return bad("aggregated_gaze requires delta_ms > 0");
        }
        if self.query_mode == QueryMode::GazeText && self.lambda != 0.0 {
            return bad("gaze-text input runs without the attention regularizer; set lambda=0");
        }
        if self.uses_blocks() && self.n_blocks == 0 {
            return bad("gaze models need n_blocks >= 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.corruption_p) {
            return bad("corruption_p must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.overlay_alpha) {
            return bad("overlay_alpha must lie in [0, 1]");
        }
        if !(self.binarize_tau > 0.0 && self.binarize_tau <= 1.0) {
            return bad("binarize_tau must lie in (0, 1]");
        }
        if self.sigma_px.is_some_and(|s| !(s > 0.0)) {
            return bad("sigma_px must be positive");
        }
        if !(self.rouge_beta > 0.0) {
            return bad("rouge_beta must be positive");
        }
        if self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return bad("batch_size and lr must be positive");
        }
        if self.data.n_train == 0 {
            return bad("training split is empty");
        }
        if self.query_mode == QueryMode::Pseudo && (self.data.width() % 4 != 0 || self.data.height() % 4 != 0) {
            return bad("pseudo-gaze needs image sides divisible by 4");
        }
        if self.task == Task::ActivityUnderstanding && self.query_mode == QueryMode::GazeText {
            return bad("gaze-text is only wired for future prediction");
        }
        self.model_config().validate()
    }

    /// Whether the model carries gaze attention blocks.
    pub fn uses_blocks(&self) -> bool {
        self.model != ModelKind::Base && self.query_mode != QueryMode::GazeText
    }

    pub fn model_config(&self) -> ModelConfig {
        let out_len = match self.task {
            Task::FuturePrediction => self.data.out_len(),
            Task::ActivityUnderstanding => self.data.tau_o * TOKENS_PER_STEP,
        };
        ModelConfig {
            grid: self.data.grid(),
            channels: self.data.channels,
            d_model: self.d_model,
            heads: self.heads,
            n_blocks: if self.uses_blocks() { self.n_blocks } else { 0 },
            tau_o: self.data.tau_o,
            out_len,
            vocab: VOCAB,
            ctx_dim: self.ctx_dim,
            hidden_dim: self.hidden_dim,
            gaze_text: self.query_mode == QueryMode::GazeText,
            init_scale: self.train.init_scale,
        }
    }

    pub fn optimizer(&self) -> OptimizerKind {
        match self.train.optimizer {
            OptimizerChoice::Adam => OptimizerKind::adam(self.train.lr),
            OptimizerChoice::Sgd => OptimizerKind::Sgd { lr: self.train.lr, momentum: self.train.momentum },
        }
    }

    pub fn occlusion_params(&self) -> OcclusionParams {
        OcclusionParams {
            epsilon_px: self.epsilon_px,
            eta_threshold: self.eta,
            rule: ConsistencyRule::MagnitudeDifference,
            sampling: Sampling::Nearest,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma_px.unwrap_or_else(|| crate::heatmap::default_sigma(self.data.patch_px))
    }

    /// The configuration as training sees it: evaluation-only settings are
    /// reset so that one checkpoint serves every evaluation variant.
    pub fn training_view(&self) -> RunConfig {
        let mut c = self.clone();
        c.corruption_p = 0.0;
        c.rouge_beta = 1.0;
        c.seeds = Vec::new();
        c.workers = 0;
        c.data_dir = None;
        c.out_dir = None;
        if c.query_mode == QueryMode::OverlayTrainRgbTest {
            c.query_mode = QueryMode::Overlay;
        }
        c
    }

    /// SHA-256 of the canonical JSON of [`RunConfig::training_view`].
    pub fn train_hash(&self) -> String {
        let json = serde_json::to_string(&self.training_view()).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
