//! Layer dropout rates: `p(l, t) = S(t) · D(l) · p_max`.

use std::f64::consts::LN_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DropMask;

/// How the dropout rate scales over training steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeCurriculum {
    /// `S(t) = 1`, for finetuning and continual pretraining.
    Constant,
    /// `S(t) = 2^{t/(T-1)} - 1`, for pretraining from scratch.
    Exponential,
}

/// How the dropout rate scales across depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerProfile {
    /// `D(l) = 2^{l/(L-1)} - 1`: zero at the first layer, one at the last.
    Exponential,
    /// `D(l) = 1`: the same rate at every layer.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSchedule {
    pub p_max: f64,
    pub time_curriculum: TimeCurriculum,
    pub layer_profile: LayerProfile,
    pub total_steps: usize,
    pub n_layers: usize,
    pub seed: u64,
}

impl DropoutSchedule {
    pub fn new(
        p_max: f64,
        time_curriculum: TimeCurriculum,
        total_steps: usize,
        n_layers: usize,
        seed: u64,
    ) -> Result<Self> {
        let s = DropoutSchedule {
            p_max,
            time_curriculum,
            layer_profile: LayerProfile::Exponential,
            total_steps,
            n_layers,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    /// No layer is ever dropped.
    pub fn disabled(total_steps: usize, n_layers: usize) -> Self {
        DropoutSchedule {
            p_max: 0.0,
            time_curriculum: TimeCurriculum::Constant,
            layer_profile: LayerProfile::Exponential,
            total_steps,
            n_layers,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_max) {
            return Err(Error::Config(format!(
                "p_max {} outside [0, 1]",
                self.p_max
            )));
        }
        if self.total_steps < 1 {
            return Err(Error::Config(
                "dropout schedule needs at least one step".into(),
            ));
        }
        if self.n_layers < 1 {
            return Err(Error::Config(
                "dropout schedule needs at least one layer".into(),
            ));
        }
        Ok(())
    }

    pub fn layer_scale(&self, layer: usize) -> f64 {
        match self.layer_profile {
            LayerProfile::Exponential => layer_scale_d(layer, self.n_layers),
            LayerProfile::Uniform => 1.0,
        }
    }

    /// Dropout probability of `layer` at step `t`.
    pub fn rate(&self, layer: usize, t: usize) -> Result<f64> {
        Ok(time_scale_s(t, self.total_steps, self.time_curriculum)?
            * self.layer_scale(layer)
            * self.p_max)
    }

    /// Mean rate across layers at step `t`.
    pub fn mean_rate(&self, t: usize) -> Result<f64> {
        let mut sum = 0.0;
        for l in 0..self.n_layers {
            sum += self.rate(l, t)?;
        }
        Ok(sum / self.n_layers as f64)
    }
}

/// Per-layer scale `D(l) = e^{l·ln2/(L-1)} - 1`. A single-layer model has
/// no depth to scale over and gets `D(0) = 0`.
pub fn layer_scale_d(layer: usize, n_layers: usize) -> f64 {
    if n_layers < 2 {
        return 0.0;
    }
    (layer as f64 * LN_2 / (n_layers - 1) as f64).exp() - 1.0
}

/// Per-step scale `S(t)`. With a single step the exponential curriculum is
/// already at its final value.
pub fn time_scale_s(t: usize, total_steps: usize, curriculum: TimeCurriculum) -> Result<f64> {
    if t >= total_steps {
        return Err(Error::Config(format!(
            "step {t} outside schedule of {total_steps} steps"
        )));
    }
    Ok(match curriculum {
        TimeCurriculum::Constant => 1.0,
        TimeCurriculum::Exponential if total_steps == 1 => 1.0,
        TimeCurriculum::Exponential => (t as f64 * LN_2 / (total_steps - 1) as f64).exp() - 1.0,
    })
}

pub fn dropout_rate(layer: usize, t: usize, schedule: &DropoutSchedule) -> Result<f64> {
    schedule.rate(layer, t)
}

/// Samples which `(layer, sample)` pairs skip their block at step `t`.
///
/// Each entry is an independent Bernoulli draw with probability
/// `p(l, t)`. The generator is ChaCha keyed on `seed` with stream `t`, so
/// the mask is a pure function of `(seed, t, layer, sample)`.
pub fn sample_drop_mask(
    schedule: &DropoutSchedule,
    t: usize,
    batch_size: usize,
) -> Result<DropMask> {
    let rates = (0..schedule.n_layers)
        .map(|l| schedule.rate(l, t))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    rng.set_stream(t as u64);
    Ok(DropMask::from_fn(schedule.n_layers, batch_size, |l, _| {
        let u: f64 = rng.random();
        u < rates[l]
    }))
}
