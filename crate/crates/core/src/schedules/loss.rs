//! Weighted sum of shared-head cross entropies over the active exits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    backward, forward_with_tape, head_backward, head_forward, DropMask, HiddenStates, ModelParams,
    TokenBatch,
};
use crate::nn::Scalar;

use super::early_exit::EarlyExitLossSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    /// Block index; its exit reads `x[layer + 1]`.
    pub layer: usize,
    pub weight: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    /// Only layers with non-zero weight, ascending.
    pub layers: Vec<LayerLoss>,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn total_f64(&self) -> f64 {
        self.total.to_f64_lossy()
    }
}

fn check_weights(weights: &[f64], n_layers: usize) -> Result<()> {
    if weights.len() != n_layers {
        return Err(Error::Shape(format!(
            "{} exit weights for {n_layers} layers",
            weights.len()
        )));
    }
    Ok(())
}

/// `J = Σ_l w_l · CE(g(x[l+1]), targets)`. Only layers with `w_l > 0` are
/// unembedded.
pub fn total_loss_weighted<T: Scalar>(
    params: &ModelParams<T>,
    hidden: &HiddenStates<T>,
    targets: &[u32],
    weights: &[f64],
) -> Result<LossBreakdown<T>> {
    check_weights(weights, params.config.n_layers)?;
    let mut total = T::zero();
    let mut layers = Vec::new();
    for (l, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        let out = head_forward(params, hidden.x[l + 1].data(), targets)?;
        total = total + T::from_f64_lossy(w) * out.loss;
        layers.push(LayerLoss {
            layer: l,
            weight: w,
            loss: out.loss.to_f64_lossy(),
        });
    }
    Ok(LossBreakdown { total, layers })
}

/// Total early-exit loss at step `t` of `schedule`.
pub fn total_loss<T: Scalar>(
    params: &ModelParams<T>,
    hidden: &HiddenStates<T>,
    targets: &[u32],
    t: usize,
    schedule: &EarlyExitLossSchedule,
) -> Result<LossBreakdown<T>> {
    total_loss_weighted(params, hidden, targets, &schedule.weights(t))
}

/// Forward, weighted exit losses and full backward pass. Gradients are
/// accumulated into `params`; the caller zeroes them beforehand.
pub fn loss_and_grad<T: Scalar>(
    params: &mut ModelParams<T>,
    batch: &TokenBatch,
    targets: &[u32],
    drop_mask: &DropMask,
    weights: &[f64],
) -> Result<LossBreakdown<T>> {
    let n_layers = params.config.n_layers;
    check_weights(weights, n_layers)?;
    let (hidden, tape) = forward_with_tape(params, batch, drop_mask)?;
    let mut exit_grads: Vec<Option<Vec<T>>> = vec![None; n_layers + 1];
    let mut total = T::zero();
    let mut layers = Vec::new();
    for (l, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        let x = hidden.x[l + 1].data();
        let out = head_forward(params, x, targets)?;
        let loss = out.loss;
        total = total + T::from_f64_lossy(w) * loss;
        layers.push(LayerLoss {
            layer: l,
            weight: w,
            loss: loss.to_f64_lossy(),
        });
        exit_grads[l + 1] = Some(head_backward(params, x, targets, out, T::from_f64_lossy(w)));
    }
    backward(params, &tape, &exit_grads)?;
    Ok(LossBreakdown { total, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_train, ModelConfig};
    use crate::schedules::early_exit::ExitCurriculum;

    fn setup(n_layers: usize) -> (ModelParams<f64>, TokenBatch, Vec<u32>) {
        let cfg = ModelConfig {
            n_layers,
            dim: 8,
            n_heads: 2,
            vocab: 11,
            max_context: 8,
            ffn_hidden: 12,
        };
        let p = ModelParams::<f64>::init(cfg, 5).unwrap();
        let tokens: Vec<u32> = (0..10).map(|i| (i * 7 % 11) as u32).collect();
        let batch = TokenBatch::new(2, 5, tokens.clone()).unwrap();
        let targets: Vec<u32> = tokens.iter().map(|t| (t + 1) % 11).collect();
        (p, batch, targets)
    }

    #[test]
    fn zero_scale_is_plain_lm_loss() {
        let (p, batch, targets) = setup(3);
        let h = forward_train(&p, &batch, &DropMask::none(3, 2)).unwrap();
        let s = EarlyExitLossSchedule::disabled(10, 3);
        let j = total_loss(&p, &h, &targets, 0, &s).unwrap();
        let last = head_forward(&p, h.x[3].data(), &targets).unwrap().loss;
        assert!((j.total - last).abs() < 1e-15);
        assert_eq!(j.layers.len(), 1);
    }

    #[test]
    fn two_layer_weights_by_hand() {
        // L = 2, e_scale = 1: e = [0, 1 + 0] so the normalized weights are [0, 1]
        let (p, batch, targets) = setup(2);
        let h = forward_train(&p, &batch, &DropMask::none(2, 2)).unwrap();
        let s = EarlyExitLossSchedule::new(1.0, ExitCurriculum::All, 10, 2).unwrap();
        assert_eq!(s.weights(0), vec![0.0, 1.0]);
        let j = total_loss(&p, &h, &targets, 0, &s).unwrap();
        let l1 = head_forward(&p, h.x[2].data(), &targets).unwrap().loss;
        assert!((j.total - l1).abs() < 1e-15);

        // L = 3: e = [0, 1, 2 + 1] so [0, 1/4, 3/4]
        let (p, batch, targets) = setup(3);
        let h = forward_train(&p, &batch, &DropMask::none(3, 2)).unwrap();
        let s = EarlyExitLossSchedule::new(1.0, ExitCurriculum::All, 10, 3).unwrap();
        let j = total_loss(&p, &h, &targets, 0, &s).unwrap();
        let l1 = head_forward(&p, h.x[2].data(), &targets).unwrap().loss;
        let l2 = head_forward(&p, h.x[3].data(), &targets).unwrap().loss;
        assert!((j.total - (0.25 * l1 + 0.75 * l2)).abs() < 1e-14);
    }

    #[test]
    fn disabled_layer_does_not_matter() {
        let (p, batch, targets) = setup(3);
        let mut h = forward_train(&p, &batch, &DropMask::none(3, 2)).unwrap();
        let s = EarlyExitLossSchedule::new(1.0, ExitCurriculum::Rotational { dilation: 2 }, 10, 3)
            .unwrap();
        // t = 1 enables only layer 1
        let before = total_loss(&p, &h, &targets, 1, &s).unwrap();
        h.x[1].data_mut().iter_mut().for_each(|x| *x += 3.0);
        h.x[3].data_mut().iter_mut().for_each(|x| *x *= -2.0);
        let after = total_loss(&p, &h, &targets, 1, &s).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn loss_and_grad_matches_forward_loss() {
        let (mut p, batch, targets) = setup(3);
        let w = [0.2, 0.3, 0.5];
        let h = forward_train(&p, &batch, &DropMask::none(3, 2)).unwrap();
        let j0 = total_loss_weighted(&p, &h, &targets, &w).unwrap();
        let j1 = loss_and_grad(&mut p, &batch, &targets, &DropMask::none(3, 2), &w).unwrap();
        assert!((j0.total - j1.total).abs() < 1e-15);
        assert!(p.flat_grads().iter().any(|g| *g != 0.0));
    }
}
