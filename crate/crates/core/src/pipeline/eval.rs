//! Evaluation: greedy decoding, token accuracy, exact match and ROUGE-L.

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::prep::{build_sample, corruption_mask, gaze_overlay, QuerySource};
use super::train::{prepare_split, Trained};
use crate::error::{Error, Result};
use crate::model::{forward, greedy_decode, kl_regularizer, LossBreakdown, ModelParams, ParamSet, KL_EPS};
use crate::pseudo::{compose_pseudo_overlay, cosine_loss, CosineEmbedder, PseudoGazeNet};
use crate::synth::{render_tokens, Split, SynthDataset};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based ROUGE-L with `F = (1 + β²)PR / (R + β²P)`.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T], beta: f64) -> Result<RougeScore> {
    if reference.is_empty() {
        return Err(Error::Param("ROUGE-L needs a non-empty reference".into()));
    }
    if candidate.is_empty() {
        return Ok(RougeScore::default());
    }
    let l = lcs_len(candidate, reference) as f64;
    let precision = l / candidate.len() as f64;
    let recall = l / reference.len() as f64;
    let b2 = beta * beta;
    let f = if precision == 0.0 && recall == 0.0 { 0.0 } else { (1.0 + b2) * precision * recall / (recall + b2 * precision) };
    Ok(RougeScore { precision, recall, f })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub token_accuracy: f64,
    pub sequence_exact_match: f64,
    pub rouge_l_f: f64,
    pub kl_to_gaze: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub query_mode: String,
    pub corruption_p: f64,
    pub split: Split,
    pub n_samples: usize,
    pub token_accuracy: f64,
    pub sequence_exact_match: f64,
    pub rouge_l: RougeScore,
    pub mean_loss: LossBreakdown,
    /// Mean `D_KL(A || H)` over frames and blocks; absent without gaze blocks.
    pub kl_to_gaze: Option<f64>,
    pub per_seed: Vec<SeedMetrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Parameters as they come back from an f32 checkpoint.
pub fn quantized<P: ParamSet + Clone>(p: &P) -> P {
    let mut q = p.clone();
    for v in q.views_mut() {
        v.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
    }
    q
}

pub fn evaluate_params(
    cfg: &RunConfig,
    seed: u64,
    params: &ModelParams,
    pseudo: Option<&PseudoGazeNet>,
    data: &SynthDataset,
    split: Split,
) -> Result<EvalReport> {
    let mc = cfg.model_config();
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(Error::Config(format!("{split:?} split is empty")));
    }
    let gaze = prepare_split(cfg, samples)?;
    let source = QuerySource::for_eval(cfg, pseudo);
    let embedder = pseudo.map(|_| CosineEmbedder::new(mc.grid, params.embed_rgb.clone()));
    let (mut hits, mut tokens, mut exact) = (0usize, 0usize, 0usize);
    let mut rouge = RougeScore::default();
    let mut losses = Vec::with_capacity(samples.len());
    let (mut kl_sum, mut kl_n) = (0.0, 0usize);
    for (s, g) in samples.iter().zip(&gaze) {
        let mask = corruption_mask(seed, s.index, s.frames.len(), cfg.corruption_p);
        let owned = build_sample(cfg, s, g.as_deref(), source, &mask)?;
        let input = owned.input();
        let (pred, attn) = greedy_decode(params, &mc, &input)?;
        let fwd = forward(params, &mc, &input)?;
        let mut cosine = 0.0;
        if let (Some(net), Some(emb), Some(g)) = (pseudo, embedder.as_ref(), g.as_ref()) {
            for (f, img) in s.frames.iter().enumerate() {
                let pred_ov = compose_pseudo_overlay(net, img, cfg.overlay_alpha)?;
                cosine += cosine_loss(&pred_ov, &gaze_overlay(cfg, img, &g[f])?, emb)?;
            }
            cosine /= s.frames.len() as f64;
        }
        losses.push(LossBreakdown::new(fwd.ce, fwd.kl, cosine, cfg.lambda));
        if let Some(g) = g {
            for (fa, fg) in attn.iter().zip(g) {
                for a in fa {
                    kl_sum += kl_regularizer(a, &fg.dist, KL_EPS)?;
                    kl_n += 1;
                }
            }
        }
        let target = &owned.targets;
        let h = pred.iter().zip(target).filter(|(a, b)| a == b).count();
        hits += h;
        tokens += target.len();
        exact += (h == target.len()) as usize;
        let r = rouge_l(&render_tokens(&pred), &render_tokens(target), cfg.rouge_beta)?;
        rouge.precision += r.precision;
        rouge.recall += r.recall;
        rouge.f += r.f;
    }
    let n = samples.len() as f64;
    rouge.precision /= n;
    rouge.recall /= n;
    rouge.f /= n;
    let token_accuracy = hits as f64 / tokens as f64;
    let sequence_exact_match = exact as f64 / n;
    let kl_to_gaze = (kl_n > 0).then(|| kl_sum / kl_n as f64);
    Ok(EvalReport {
        config_hash: cfg.train_hash(),
        query_mode: cfg.query_mode.name().to_string(),
        corruption_p: cfg.corruption_p,
        split,
        n_samples: samples.len(),
        token_accuracy,
        sequence_exact_match,
        rouge_l: rouge,
        mean_loss: LossBreakdown::mean(&losses, cfg.lambda),
        kl_to_gaze,
        per_seed: vec![SeedMetrics { seed, token_accuracy, sequence_exact_match, rouge_l_f: rouge.f, kl_to_gaze }],
    })
}

/// Evaluates a freshly trained run exactly as its checkpoint would be evaluated.
pub fn evaluate_trained(t: &Trained, eval_cfg: &RunConfig, data: &SynthDataset, split: Split) -> Result<EvalReport> {
    if t.config.train_hash() != eval_cfg.train_hash() {
        return Err(Error::HashMismatch { checkpoint: t.config.train_hash(), config: eval_cfg.train_hash() });
    }
    let params = quantized(&t.params);
    let pseudo = t.pseudo.as_ref().map(quantized);
    evaluate_params(eval_cfg, t.config.seed, &params, pseudo.as_ref(), data, split)
}

/// Mean over per-seed reports; `per_seed` rows are concatenated.
pub fn merge_reports(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or_else(|| Error::Param("no reports to merge".into()))?;
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let kl = if reports.iter().all(|r| r.kl_to_gaze.is_some()) {
        Some(mean(&|r| r.kl_to_gaze.unwrap_or(0.0)))
    } else {
        None
    };
    Ok(EvalReport {
        config_hash: first.config_hash.clone(),
        query_mode: first.query_mode.clone(),
        corruption_p: first.corruption_p,
        split: first.split,
        n_samples: reports.iter().map(|r| r.n_samples).sum(),
        token_accuracy: mean(&|r| r.token_accuracy),
        sequence_exact_match: mean(&|r| r.sequence_exact_match),
        rouge_l: RougeScore {
            precision: mean(&|r| r.rouge_l.precision),
            recall: mean(&|r| r.rouge_l.recall),
            f: mean(&|r| r.rouge_l.f),
        },
        mean_loss: LossBreakdown {
            ce: mean(&|r| r.mean_loss.ce),
            kl: mean(&|r| r.mean_loss.kl),
            cosine: mean(&|r| r.mean_loss.cosine),
            total: mean(&|r| r.mean_loss.total),
        },
        kl_to_gaze: kl,
        per_seed: reports.iter().flat_map(|r| r.per_seed.clone()).collect(),
    })
}
