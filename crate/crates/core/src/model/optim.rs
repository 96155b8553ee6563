//! First-order optimizers over [`ModelParams`].

use serde::{Deserialize, Serialize};

use super::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr, .. } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }
}

/// Optimizer state: flat first and second moment buffers in `views()` order.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// Optional global gradient-norm clip.
    pub clip: Option<f64>,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, clip: Option<f64>) -> Self {
        Optimizer { kind, clip, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update with gradients `g`. Returns the pre-clip gradient norm.
    pub fn update<P: ParamSet>(&mut self, params: &mut P, g: &P) -> f64 {
        let n: usize = params.views().iter().map(|v| v.data.len()).sum();
        if self.m.len() != n {
            self.m = vec![0.0; n];
            self.v = vec![0.0; n];
        }
        let norm = g.views().iter().flat_map(|v| v.data.iter()).map(|x| x * x).sum::<f64>().sqrt();
        let gs = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let grads = g.views();
        let mut off = 0;
        for (pv, gv) in params.views_mut().into_iter().zip(grads) {
            let m = &mut self.m[off..off + pv.data.len()];
            let v = &mut self.v[off..off + pv.data.len()];
            off += pv.data.len();
            match self.kind {
                OptimizerKind::Sgd { lr, momentum } => {
                    for ((p, &gr), mi) in pv.data.iter_mut().zip(gv.data).zip(m.iter_mut()) {
                        *mi = momentum * *mi + gr * gs;
                        *p -= lr * *mi;
                    }
                }
                OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((p, &gr), mi), vi) in pv.data.iter_mut().zip(gv.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let gr = gr * gs;
                        *mi = beta1 * *mi + (1.0 - beta1) * gr;
                        *vi = beta2 * *vi + (1.0 - beta2) * gr * gr;
                        *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};
    use crate::patch::PatchGrid;

    fn cfg() -> ModelConfig {
        ModelConfig {
            grid: PatchGrid::new(2, 2, 2, 2).unwrap(),
            channels: 1,
            d_model: 4,
            heads: 1,
            n_blocks: 0,
            tau_o: 1,
            out_len: 1,
            vocab: 2,
            ctx_dim: 2,
            hidden_dim: 2,
            gaze_text: false,
            init_scale: 1.0,
        }
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let c = cfg();
        let mut p = ModelParams::zeros(&c);
        let mut g = ModelParams::zeros(&c);
        g.time_emb.data[0] = 2.0;
        let mut opt = Optimizer::new(OptimizerKind::Sgd { lr: 0.5, momentum: 0.0 }, None);
        opt.update(&mut p, &g);
        assert_eq!(p.time_emb.data[0], -1.0);
        assert_eq!(p.time_emb.data[1], 0.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let c = cfg();
        let mut p = ModelParams::zeros(&c);
        let mut g = ModelParams::zeros(&c);
        g.time_emb.data[0] = 123.0;
        g.time_emb.data[1] = -0.001;
        let mut opt = Optimizer::new(OptimizerKind::Adam { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 0.0 }, None);
        opt.update(&mut p, &g);
        assert!((p.time_emb.data[0] + 0.01).abs() < 1e-12);
        assert!((p.time_emb.data[1] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn clip_scales_the_gradient() {
        let c = cfg();
        let mut p = ModelParams::zeros(&c);
        let mut g = ModelParams::zeros(&c);
        g.time_emb.data[0] = 3.0;
        g.time_emb.data[1] = 4.0;
        let mut opt = Optimizer::new(OptimizerKind::Sgd { lr: 1.0, momentum: 0.0 }, Some(1.0));
        let norm = opt.update(&mut p, &g);
        assert_eq!(norm, 5.0);
        assert!((p.time_emb.data[0] + 0.6).abs() < 1e-12);
        assert!((p.time_emb.data[1] + 0.8).abs() < 1e-12);
    }
}
