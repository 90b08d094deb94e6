//! Deterministic CPU training loop: sampled layer dropout, early-exit loss,
//! AdamW, periodic per-layer evaluation and checkpoints.

mod data;
mod optim;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, TokenBatch};
use crate::probe::layer_perplexities;
use crate::schedules::{
    loss_and_grad, sample_drop_mask, DropoutSchedule, EarlyExitLossSchedule, LayerLoss,
    LayerProfile, TimeCurriculum,
};

pub use data::Batcher;
pub use optim::{learning_rate, AdamW, AdamWConfig, LrSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub context_len: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_fraction: f64,
    pub min_lr_ratio: f64,
    /// Doubles the peak learning rate whenever layer dropout is active.
    pub scale_lr_with_dropout: bool,
    pub seed: u64,
    pub dropout: DropoutSchedule,
    pub early_exit: EarlyExitLossSchedule,
    /// Evaluate and checkpoint every this many steps; 0 means only at the end.
    pub eval_every: usize,
    pub optimizer: AdamWConfig,
}

impl TrainConfig {
    /// Plain language-model training: no layer dropout, last-layer loss only.
    pub fn baseline(model: &ModelConfig, steps: usize, seed: u64) -> Self {
        TrainConfig {
            steps,
            batch_size: 8,
            context_len: model.max_context,
            learning_rate: 3e-3,
            lr_schedule: LrSchedule::Cosine,
            warmup_fraction: 0.02,
            min_lr_ratio: 0.1,
            scale_lr_with_dropout: true,
            seed,
            dropout: DropoutSchedule::disabled(steps, model.n_layers),
            early_exit: EarlyExitLossSchedule::disabled(steps, model.n_layers),
            eval_every: 0,
            optimizer: AdamWConfig::default(),
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        model.validate()?;
        if self.steps < 1 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.context_len < 1 || self.context_len > model.max_context {
            return Err(Error::Config(format!(
                "context_len {} outside 1..={}",
                self.context_len, model.max_context
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config(format!(
                "min_lr_ratio {} outside [0, 1]",
                self.min_lr_ratio
            )));
        }
        self.dropout.validate()?;
        self.early_exit.validate()?;
        for (what, steps, layers) in [
            ("dropout", self.dropout.total_steps, self.dropout.n_layers),
            (
                "early_exit",
                self.early_exit.total_steps,
                self.early_exit.n_layers,
            ),
        ] {
            if steps != self.steps || layers != model.n_layers {
                return Err(Error::Config(format!(
                    "{what} schedule is for {steps} steps × {layers} layers, run is {} × {}",
                    self.steps, model.n_layers
                )));
            }
        }
        Ok(())
    }

    pub fn peak_lr(&self) -> f64 {
        if self.scale_lr_with_dropout && self.dropout.p_max > 0.0 {
            2.0 * self.learning_rate
        } else {
            self.learning_rate
        }
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        learning_rate(
            self.peak_lr(),
            self.lr_schedule,
            t,
            self.steps,
            self.warmup_fraction,
            self.min_lr_ratio,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub enabled_layers: Vec<usize>,
    pub layer_losses: Vec<LayerLoss>,
    /// Scheduled dropout rate averaged over layers.
    pub mean_dropout: f64,
    /// Fraction of `(layer, sample)` pairs actually dropped.
    pub dropped_fraction: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Exit index `l`: perplexity of `unembed(x[l])`.
    pub layer: usize,
    pub perplexity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    /// `step,loss,lr,enabled_layers,mean_dropout`; enabled layers are
    /// space-separated.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,loss,lr,enabled_layers,mean_dropout")?;
        for r in &self.steps {
            let layers: Vec<String> = r.enabled_layers.iter().map(|l| l.to_string()).collect();
            writeln!(
                w,
                "{},{},{},{},{}",
                r.step,
                r.loss,
                r.lr,
                layers.join(" "),
                r.mean_dropout
            )?;
        }
        Ok(())
    }

    /// One `{"step", "layer", "perplexity"}` object per line.
    pub fn write_eval_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.evals {
            serde_json::to_writer(&mut w, e)?;
            writeln!(w)?;
        }
        Ok(())
    }

    /// Per-layer perplexities from the last evaluation, indexed by exit.
    pub fn final_perplexities(&self) -> Vec<f64> {
        let Some(last) = self.evals.last().map(|e| e.step) else {
            return Vec::new();
        };
        let mut v: Vec<&EvalRecord> = self.evals.iter().filter(|e| e.step == last).collect();
        v.sort_by_key(|e| e.layer);
        v.into_iter().map(|e| e.perplexity).collect()
    }
}

/// One optimizer step at iteration `t`: sample the drop mask, weight the
/// exit losses, backpropagate and update.
pub fn train_step(
    params: &mut ModelParams<f32>,
    opt: &mut AdamW,
    batch: &TokenBatch,
    targets: &[u32],
    t: usize,
    config: &TrainConfig,
) -> Result<StepRecord> {
    let mask = sample_drop_mask(&config.dropout, t, batch.batch_size)?;
    let weights = config.early_exit.weights(t);
    params.zero_grad();
    let breakdown = match loss_and_grad(params, batch, targets, &mask, &weights) {
        Ok(b) => b,
        Err(Error::NonFinite(_)) => {
            return Err(Error::Diverged {
                step: t,
                loss: f64::NAN,
            })
        }
        Err(e) => return Err(e),
    };
    let loss = breakdown.total_f64();
    if !loss.is_finite() {
        return Err(Error::Diverged { step: t, loss });
    }
    let lr = config.lr_at(t);
    let grad_norm = opt.update(params, lr);
    if !grad_norm.is_finite() || !params.is_finite() {
        return Err(Error::Diverged { step: t, loss });
    }
    let n_layers = params.config.n_layers;
    let dropped = (0..n_layers).map(|l| mask.layer_rate(l)).sum::<f64>() / n_layers as f64;
    Ok(StepRecord {
        step: t,
        loss,
        lr,
        enabled_layers: breakdown.layers.iter().map(|l| l.layer).collect(),
        layer_losses: breakdown.layers,
        mean_dropout: config.dropout.mean_rate(t)?,
        dropped_fraction: dropped,
        grad_norm,
    })
}

/// Trains from a fresh seeded init for `config.steps` steps. When
/// `heldout` is given, per-layer perplexities are evaluated every
/// `eval_every` steps and at the end. When `out_dir` is given, a checkpoint
/// is written at each evaluation point (`step_XXXXXX.lskp`) and at the end
/// (`final.lskp`), together with `train_log.csv` and `eval.jsonl`.
pub fn train_run(
    train_tokens: &[u32],
    heldout: Option<&[u32]>,
    model: ModelConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(ModelParams<f32>, TrainLog)> {
    config.validate(&model)?;
    let mut params = ModelParams::<f32>::init(model, config.seed)?;
    let mut opt = AdamW::new(config.optimizer, &mut params);
    let mut batcher = Batcher::new(
        train_tokens,
        config.context_len,
        config.batch_size,
        config.seed,
    )?;
    let mut log = TrainLog::default();
    let configs = serde_json::json!({ "train": config });
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    for t in 0..config.steps {
        let (batch, targets) = batcher.next_batch();
        log.steps.push(train_step(
            &mut params,
            &mut opt,
            &batch,
            &targets,
            t,
            config,
        )?);
        let done = t + 1;
        let last = done == config.steps;
        let periodic = config.eval_every > 0 && done % config.eval_every == 0;
        if !(last || periodic) {
            continue;
        }
        if let Some(tokens) = heldout {
            let ppl = layer_perplexities(&params, tokens, config.context_len)?;
            log.evals.extend(
                ppl.into_iter()
                    .enumerate()
                    .map(|(layer, perplexity)| EvalRecord {
                        step: done,
                        layer,
                        perplexity,
                    }),
            );
        }
        if let Some(dir) = out_dir {
            if periodic {
                save_checkpoint(&params, &configs, &dir.join(format!("step_{done:06}.lskp")))?;
            }
            if last {
                save_checkpoint(&params, &configs, &dir.join("final.lskp"))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        log.write_csv(std::io::BufWriter::new(std::fs::File::create(
            dir.join("train_log.csv"),
        )?))?;
        log.write_eval_jsonl(std::io::BufWriter::new(std::fs::File::create(
            dir.join("eval.jsonl"),
        )?))?;
    }
    Ok((params, log))
}

/// Training-loss curves of two equal-mean dropout configurations: the same
/// rate at every layer versus the exponential depth profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutProfileAblation {
    pub const_rate: f64,
    pub exp_p_max: f64,
    pub const_loss: Vec<f64>,
    pub exp_loss: Vec<f64>,
}

impl DropoutProfileAblation {
    /// `step,const_loss,exp_loss`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,const_loss,exp_loss")?;
        for (t, (c, e)) in self.const_loss.iter().zip(&self.exp_loss).enumerate() {
            writeln!(w, "{t},{c},{e}")?;
        }
        Ok(())
    }
}

/// Runs `base` twice with constant-in-time layer dropout: once with the
/// exponential depth profile at `p_max`, once with a uniform rate equal to
/// that profile's layer mean.
pub fn dropout_profile_ablation(
    train_tokens: &[u32],
    model: ModelConfig,
    base: &TrainConfig,
    p_max: f64,
) -> Result<DropoutProfileAblation> {
    let exp = DropoutSchedule {
        p_max,
        time_curriculum: TimeCurriculum::Constant,
        layer_profile: LayerProfile::Exponential,
        total_steps: base.steps,
        n_layers: model.n_layers,
        seed: base.dropout.seed,
    };
    let const_rate = exp.mean_rate(0)?;
    let uniform = DropoutSchedule {
        p_max: const_rate,
        layer_profile: LayerProfile::Uniform,
        ..exp
    };
    let run = |dropout: DropoutSchedule| -> Result<Vec<f64>> {
        let cfg = TrainConfig { dropout, ..*base };
        let (_, log) = train_run(train_tokens, None, model, &cfg, None)?;
        Ok(log.steps.iter().map(|s| s.loss).collect())
    };
    Ok(DropoutProfileAblation {
        const_rate,
        exp_p_max: p_max,
        const_loss: run(uniform)?,
        exp_loss: run(exp)?,
    })
}

/// Two runs on the same data and seed, evaluated per layer on `heldout`.
#[derive(Debug, Clone)]
pub struct PairedRuns {
    pub a: (ModelParams<f32>, TrainLog),
    pub b: (ModelParams<f32>, TrainLog),
}

pub fn paired_runs(
    train_tokens: &[u32],
    heldout: &[u32],
    model: ModelConfig,
    a: &TrainConfig,
    b: &TrainConfig,
) -> Result<PairedRuns> {
    Ok(PairedRuns {
        a: train_run(train_tokens, Some(heldout), model, a, None)?,
        b: train_run(train_tokens, Some(heldout), model, b, None)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::ExitCurriculum;

    fn model() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            dim: 16,
            n_heads: 2,
            vocab: 8,
            max_context: 8,
            ffn_hidden: 24,
        }
    }

    fn corpus(n: usize) -> Vec<u32> {
        (0..n).map(|i| ((i * 5 + i / 7) % 8) as u32).collect()
    }

    #[test]
    fn log_has_one_record_per_step() {
        let cfg = TrainConfig {
            batch_size: 2,
            ..TrainConfig::baseline(&model(), 50, 1)
        };
        let (_, log) = train_run(&corpus(200), Some(&corpus(40)), model(), &cfg, None).unwrap();
        assert_eq!(log.steps.len(), 50);
        assert!(log.steps.windows(2).all(|w| w[1].step == w[0].step + 1));
        assert_eq!(log.final_perplexities().len(), 3);
        let mut csv = Vec::new();
        log.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 51);
    }

    #[test]
    fn memorizes_two_token_corpus() {
        let tokens: Vec<u32> = (0..400).map(|i| (i % 2) as u32 + 3).collect();
        let cfg = TrainConfig {
            batch_size: 4,
            learning_rate: 1e-2,
            ..TrainConfig::baseline(&model(), 200, 3)
        };
        let (_, log) = train_run(&tokens, None, model(), &cfg, None).unwrap();
        let last = log.steps.last().unwrap().loss;
        assert!(last < 0.05, "{last}");
    }

    #[test]
    fn step_is_deterministic() {
        let m = model();
        let mut cfg = TrainConfig::baseline(&m, 10, 4);
        cfg.dropout = DropoutSchedule::new(0.5, TimeCurriculum::Constant, 10, 2, 7).unwrap();
        cfg.early_exit =
            EarlyExitLossSchedule::new(1.0, ExitCurriculum::Rotational { dilation: 2 }, 10, 2)
                .unwrap();
        let run = || {
            let mut p = ModelParams::<f32>::init(m, 4).unwrap();
            let mut opt = AdamW::new(cfg.optimizer, &mut p);
            let mut b = Batcher::new(&corpus(100), 8, 3, 4).unwrap();
            let (x, y) = b.next_batch();
            let r = train_step(&mut p, &mut opt, &x, &y, 3, &cfg).unwrap();
            (p, r)
        };
        let (p1, r1) = run();
        let (p2, r2) = run();
        assert_eq!(p1, p2);
        assert_eq!(r1, r2);
        assert_eq!(cfg.peak_lr(), 2.0 * cfg.learning_rate);
    }

    #[test]
    fn disabled_recipe_matches_plain_loss() {
        let m = model();
        let cfg = TrainConfig::baseline(&m, 5, 2);
        let mut p = ModelParams::<f32>::init(m, 2).unwrap();
        let mut opt = AdamW::new(cfg.optimizer, &mut p);
        let mut b = Batcher::new(&corpus(100), 8, 2, 2).unwrap();
        let (x, y) = b.next_batch();
        let h = crate::model::forward_train(&p, &x, &crate::model::DropMask::none(2, 2)).unwrap();
        let plain = crate::model::head_forward(&p, h.x[2].data(), &y)
            .unwrap()
            .loss as f64;
        let r = train_step(&mut p, &mut opt, &x, &y, 0, &cfg).unwrap();
        assert_eq!(r.loss, plain);
        assert_eq!(r.enabled_layers, vec![1]);
        assert_eq!(r.dropped_fraction, 0.0);
    }

    #[test]
    fn validation() {
        let m = model();
        let mut cfg = TrainConfig::baseline(&m, 5, 0);
        cfg.context_len = 9;
        assert!(cfg.validate(&m).is_err());
        let mut cfg = TrainConfig::baseline(&m, 5, 0);
        cfg.dropout.total_steps = 6;
        assert!(cfg.validate(&m).is_err());
        let cfg = TrainConfig::baseline(&m, 5, 0);
        assert!(train_run(&corpus(8), None, m, &cfg, None).is_err());
    }

    #[test]
    fn profile_ablation_has_equal_means() {
        let m = model();
        let cfg = TrainConfig {
            batch_size: 2,
            ..TrainConfig::baseline(&m, 6, 0)
        };
        let a = dropout_profile_ablation(&corpus(100), m, &cfg, 0.4).unwrap();
        // L = 2: D = [0, 1], mean 0.5
        assert!((a.const_rate - 0.2).abs() < 1e-12);
        assert_eq!(a.const_loss.len(), 6);
        assert_eq!(a.exp_loss.len(), 6);
        let mut csv = Vec::new();
        a.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 7);
    }
}
