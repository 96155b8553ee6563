//! Multi-seed runs and one-axis ablation sweeps.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::{evaluate_params, evaluate_trained, merge_reports, EvalReport};
use super::train::{load_data, save_trained, train, Trained};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::synth::{Split, SynthDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    NBlocks,
    DeltaMs,
    QueryMode,
    TauO,
    TauA,
    OverlaySize,
    CorruptionP,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 8] = [
        SweepAxis::Lambda,
        SweepAxis::NBlocks,
        SweepAxis::DeltaMs,
        SweepAxis::QueryMode,
        SweepAxis::TauO,
        SweepAxis::TauA,
        SweepAxis::OverlaySize,
        SweepAxis::CorruptionP,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::NBlocks => "n_blocks",
            SweepAxis::DeltaMs => "delta_ms",
            SweepAxis::QueryMode => "query_mode",
            SweepAxis::TauO => "tau_o",
            SweepAxis::TauA => "tau_a",
            SweepAxis::OverlaySize => "overlay_size",
            SweepAxis::CorruptionP => "corruption_p",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep axis {s:?}")))
    }

    /// Config key that the axis overrides.
    pub fn key(&self) -> &'static str {
        match self {
            SweepAxis::TauO => "data.tau_o",
            SweepAxis::TauA => "data.tau_a",
            SweepAxis::OverlaySize => "sigma_px",
            a => a.name(),
        }
    }

    pub fn apply(&self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let cfg = base.with_overrides(&[format!("{}={}", self.key(), value)])?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Trains and evaluates over a seed set, reusing datasets and trained models
/// whenever the training-relevant part of the config repeats.
#[derive(Default)]
pub struct Runner {
    data: Mutex<HashMap<(String, u64), Arc<SynthDataset>>>,
    models: Mutex<HashMap<(String, u64), Arc<Trained>>>,
    pub split: Option<Split>,
}

impl Runner {
    pub fn new() -> Self {
        Runner::default()
    }

    fn split(&self) -> Split {
        self.split.unwrap_or(Split::Test)
    }

    pub fn dataset(&self, cfg: &RunConfig, seed: u64) -> Result<Arc<SynthDataset>> {
        let key = (serde_json::to_string(&(&cfg.data, &cfg.data_dir))?, seed);
        if let Some(d) = self.data.lock().expect("data cache").get(&key) {
            return Ok(d.clone());
        }
        let mut c = cfg.clone();
        c.seed = seed;
        let d = Arc::new(load_data(&c)?);
        self.data.lock().expect("data cache").insert(key, d.clone());
        Ok(d)
    }

    pub fn trained(&self, cfg: &RunConfig, seed: u64) -> Result<Arc<Trained>> {
        let mut c = cfg.clone();
        c.seed = seed;
        let key = (c.train_hash(), seed);
        if let Some(t) = self.models.lock().expect("model cache").get(&key) {
            return Ok(t.clone());
        }
        let data = self.dataset(&c, seed)?;
        let t = Arc::new(train(&c, &data)?);
        if let Some(out) = &c.out_dir {
            save_trained(&t, &Path::new(out).join(format!("{}-seed{seed}", &key.0[..12])))?;
        }
        self.models.lock().expect("model cache").insert(key, t.clone());
        Ok(t)
    }

    pub fn evaluate_seed(&self, cfg: &RunConfig, seed: u64) -> Result<EvalReport> {
        let t = self.trained(cfg, seed)?;
        let data = self.dataset(cfg, seed)?;
        let mut c = cfg.clone();
        c.seed = seed;
        evaluate_trained(&t, &c, &data, self.split())
    }

    /// Mean report over `cfg.seeds`.
    pub fn evaluate(&self, cfg: &RunConfig) -> Result<EvalReport> {
        let reports = cfg.seeds.iter().map(|&s| self.evaluate_seed(cfg, s)).collect::<Result<Vec<_>>>()?;
        merge_reports(&reports)
    }

    /// Mean report over `cfg.seeds` with freshly initialized (untrained) weights.
    pub fn evaluate_init(&self, cfg: &RunConfig) -> Result<EvalReport> {
        let mut reports = Vec::new();
        for &seed in &cfg.seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            let params = ModelParams::init(&c.model_config(), seed);
            let data = self.dataset(&c, seed)?;
            let t = self.trained_pseudo_only(&c)?;
            reports.push(evaluate_params(&c, seed, &params, t.as_ref(), &data, self.split())?);
        }
        merge_reports(&reports)
    }

    fn trained_pseudo_only(&self, cfg: &RunConfig) -> Result<Option<crate::pseudo::PseudoGazeNet>> {
        if cfg.query_mode != super::config::QueryMode::Pseudo {
            return Ok(None);
        }
        Ok(self.trained(cfg, cfg.seed)?.pseudo.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

const CSV_HEADER: &str =
    "axis,value,query_mode,n_samples,token_accuracy,sequence_exact_match,rouge_l_precision,rouge_l_recall,rouge_l_f,ce,kl,cosine,total,kl_to_gaze,error";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            let mut cells = vec![csv_field(&row.axis), csv_field(&row.value)];
            match &row.report {
                Some(r) => {
                    cells.push(r.query_mode.clone());
                    cells.push(r.n_samples.to_string());
                    for v in [
                        r.token_accuracy,
                        r.sequence_exact_match,
                        r.rouge_l.precision,
                        r.rouge_l.recall,
                        r.rouge_l.f,
                        r.mean_loss.ce,
                        r.mean_loss.kl,
                        r.mean_loss.cosine,
                        r.mean_loss.total,
                    ] {
                        cells.push(format!("{v}"));
                    }
                    cells.push(r.kl_to_gaze.map(|k| k.to_string()).unwrap_or_default());
                }
                None => cells.extend(std::iter::repeat(String::new()).take(12)),
            }
            cells.push(csv_field(row.error.as_deref().unwrap_or("")));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// One train+evaluate per value over the shared seed set. Failing values
/// produce a row with `error` set; the remaining values still run.
pub fn sweep(runner: &Runner, base: &RunConfig, axis: SweepAxis, values: &[String]) -> SweepTable {
    let slots: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; values.len()]);
    let next = Mutex::new(0usize);
    let run_one = |i: usize| {
        let value = &values[i];
        let result = axis.apply(base, value).and_then(|cfg| runner.evaluate(&cfg));
        let (report, error) = match result {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        slots.lock().expect("sweep table")[i] =
            Some(SweepRow { axis: axis.name().to_string(), value: value.clone(), report, error });
    };
    let workers = base.workers.max(1).min(values.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("sweep cursor");
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= values.len() {
                    break;
                }
                run_one(i);
            });
        }
    });
    SweepTable { rows: slots.into_inner().expect("sweep table").into_iter().flatten().collect() }
}
