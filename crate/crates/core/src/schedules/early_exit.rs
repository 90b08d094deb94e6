//! Early-exit loss scales and curricula.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which layers' exit losses are active at a given step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExitCurriculum {
    /// Every `R`-th layer, rotating by one layer each step.
    Rotational { dilation: usize },
    /// Last layer first, then one more layer downward every `T/(2L)` steps.
    Gradual,
    /// Every layer at every step.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyExitLossSchedule {
    pub e_scale: f64,
    pub curriculum: ExitCurriculum,
    pub total_steps: usize,
    pub n_layers: usize,
    /// Also enable the last layer on every rotational step.
    #[serde(default)]
    pub rotation_keeps_last: bool,
}

impl EarlyExitLossSchedule {
    pub fn new(
        e_scale: f64,
        curriculum: ExitCurriculum,
        total_steps: usize,
        n_layers: usize,
    ) -> Result<Self> {
        let s = EarlyExitLossSchedule {
            e_scale,
            curriculum,
            total_steps,
            n_layers,
            rotation_keeps_last: false,
        };
        s.validate()?;
        Ok(s)
    }

    /// Plain language-model loss on the last layer only.
    pub fn disabled(total_steps: usize, n_layers: usize) -> Self {
        EarlyExitLossSchedule {
            e_scale: 0.0,
            curriculum: ExitCurriculum::All,
            total_steps,
            n_layers,
            rotation_keeps_last: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.e_scale) {
            return Err(Error::Config(format!(
                "e_scale {} outside [0, 1]",
                self.e_scale
            )));
        }
        if self.n_layers < 1 || self.total_steps < 1 {
            return Err(Error::Config(
                "early-exit schedule needs layers and steps".into(),
            ));
        }
        if let ExitCurriculum::Rotational { dilation } = self.curriculum {
            if dilation < 1 || dilation > self.n_layers {
                return Err(Error::Config(format!(
                    "rotation dilation {dilation} outside 1..={}",
                    self.n_layers
                )));
            }
        }
        Ok(())
    }

    pub fn enabled(&self, t: usize, layer: usize) -> bool {
        curriculum(t, layer, self)
    }

    /// `ẽ(t, l)` for every layer.
    pub fn weights(&self, t: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.n_layers)
            .map(|l| {
                if self.enabled(t, l) {
                    exit_scale_e(l, self.n_layers, self.e_scale)
                } else {
                    0.0
                }
            })
            .collect();
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            return raw.iter().map(|&w| w / total).collect();
        }
        // Every enabled scale is zero (e.g. only layer 0 enabled): the
        // deepest enabled layer carries the whole loss.
        let deepest = (0..self.n_layers)
            .rev()
            .find(|&l| self.enabled(t, l))
            .unwrap_or(self.n_layers - 1);
        let mut w = vec![0.0; self.n_layers];
        w[deepest] = 1.0;
        w
    }
}

/// Unnormalized exit scale `e(l)`: `e_scale · l(l+1)/2` below the last layer,
/// `(L-1) + e_scale · (L-2)(L-1)/2` at the last layer.
pub fn exit_scale_e(layer: usize, n_layers: usize, e_scale: f64) -> f64 {
    let tri = |n: usize| (n * (n + 1) / 2) as f64;
    if layer + 1 < n_layers {
        e_scale * tri(layer)
    } else {
        let last = n_layers - 1;
        last as f64
            + if last == 0 {
                0.0
            } else {
                e_scale * tri(last - 1)
            }
    }
}

/// `C(t, l)`: whether layer `l`'s exit loss is active at step `t`.
pub fn curriculum(t: usize, layer: usize, schedule: &EarlyExitLossSchedule) -> bool {
    let n = schedule.n_layers;
    match schedule.curriculum {
        ExitCurriculum::All => true,
        ExitCurriculum::Rotational { dilation } => {
            layer % dilation == t % dilation || (schedule.rotation_keeps_last && layer + 1 == n)
        }
        ExitCurriculum::Gradual => {
            let unlocked = t.saturating_mul(2 * n) / schedule.total_steps;
            layer + unlocked >= n - 1
        }
    }
}

pub fn normalized_exit_scale(t: usize, layer: usize, schedule: &EarlyExitLossSchedule) -> f64 {
    schedule.weights(t)[layer]
}
