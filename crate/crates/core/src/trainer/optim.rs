//! AdamW with decoupled weight decay, global-norm clipping and the learning
//! rate schedule.

use serde::{Deserialize, Serialize};

use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup over `warmup_fraction` of the steps, then cosine decay
    /// to `min_lr_ratio` of the peak.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
        }
    }
}

/// Learning rate at step `t` of `total` (0-based).
pub fn learning_rate(
    peak: f64,
    schedule: LrSchedule,
    t: usize,
    total: usize,
    warmup_fraction: f64,
    min_lr_ratio: f64,
) -> f64 {
    match schedule {
        LrSchedule::Constant => peak,
        LrSchedule::Cosine => {
            let warmup = ((total as f64) * warmup_fraction).ceil() as usize;
            if t < warmup {
                return peak * (t + 1) as f64 / warmup as f64;
            }
            let span = total.saturating_sub(warmup).max(1) as f64;
            let progress = ((t - warmup) as f64 / span).min(1.0);
            let floor = peak * min_lr_ratio;
            floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor in
/// [`ModelParams::params_mut`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &mut ModelParams<f32>) -> Self {
        let sizes: Vec<usize> = params.params_mut().iter().map(|p| p.numel()).collect();
        AdamW {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Clips the accumulated gradients, applies one update and returns the
    /// pre-clip global gradient norm. Weight decay applies to matrices only.
    pub fn update(&mut self, params: &mut ModelParams<f32>, lr: f64) -> f64 {
        let c = self.config;
        let mut sq = 0.0f64;
        for p in params.params_mut() {
            sq += p
                .grad
                .data()
                .iter()
                .map(|&g| (g as f64) * (g as f64))
                .sum::<f64>();
        }
        let norm = sq.sqrt();
        let clip = if c.grad_clip > 0.0 && norm > c.grad_clip {
            c.grad_clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, m), v) in params
            .params_mut()
            .into_iter()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let decay = if p.value.shape().len() >= 2 {
                c.weight_decay
            } else {
                0.0
            };
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = grads[i] as f64 * clip;
                let mi = c.beta1 * m[i] as f64 + (1.0 - c.beta1) * g;
                let vi = c.beta2 * v[i] as f64 + (1.0 - c.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let w = values[i] as f64;
                values[i] = (w - lr * (mhat / (vhat.sqrt() + c.eps) + decay * w)) as f32;
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn cosine_shape() {
        let lr = |t| learning_rate(1.0, LrSchedule::Cosine, t, 100, 0.02, 0.1);
        assert_eq!(lr(0), 0.5);
        assert_eq!(lr(1), 1.0);
        assert!((lr(2) - 1.0).abs() < 1e-12);
        assert!((lr(99) - 0.1).abs() < 1e-3);
        assert!(lr(50) < lr(30));
        assert_eq!(
            learning_rate(0.3, LrSchedule::Constant, 7, 10, 0.02, 0.1),
            0.3
        );
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = ModelConfig {
            n_layers: 1,
            dim: 4,
            n_heads: 1,
            vocab: 3,
            max_context: 4,
            ffn_hidden: 4,
        };
        let mut p = ModelParams::<f32>::init(cfg, 0).unwrap();
        let before = p.flat_values();
        for q in p.params_mut() {
            q.grad.data_mut().iter_mut().for_each(|g| *g = 1e-3);
        }
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                grad_clip: 0.0,
                ..AdamWConfig::default()
            },
            &mut p,
        );
        opt.update(&mut p, 0.01);
        // bias-corrected first step is lr · sign(g)
        for (a, b) in before.iter().zip(p.flat_values()) {
            assert!(((a - b) - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn clipping_bounds_update() {
        let cfg = ModelConfig {
            n_layers: 1,
            dim: 4,
            n_heads: 1,
            vocab: 3,
            max_context: 4,
            ffn_hidden: 4,
        };
        let mut p = ModelParams::<f32>::init(cfg, 0).unwrap();
        for q in p.params_mut() {
            q.grad.data_mut().iter_mut().for_each(|g| *g = 100.0);
        }
        let mut opt = AdamW::new(AdamWConfig::default(), &mut p);
        let norm = opt.update(&mut p, 0.01);
        assert!(norm > 1.0);
        assert!(p.is_finite());
    }
}
