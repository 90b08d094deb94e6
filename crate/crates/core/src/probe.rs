//! Layer-wise unembedding probes and per-layer perplexity.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cache::KvqCache;
use crate::error::{Error, Result};
use crate::model::{
    forward_step, forward_step_layers, forward_train, head_forward, unembed, DropMask, ModelParams,
    TokenBatch,
};
use crate::nn::{argmax, Scalar};
use crate::tokenizer::EOT;

/// Mean next-token cross entropy of every exit `x[0..=L]` over `tokens`,
/// split into non-overlapping windows of at most `context_len` inputs.
pub fn layer_losses<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    context_len: usize,
) -> Result<Vec<f64>> {
    if tokens.len() < 2 {
        return Err(Error::Empty("evaluation corpus"));
    }
    if context_len == 0 || context_len > params.config.max_context {
        return Err(Error::Config(format!(
            "eval context {context_len} outside 1..={}",
            params.config.max_context
        )));
    }
    let n_layers = params.config.n_layers;
    let mut sums = vec![0.0f64; n_layers + 1];
    let mut count = 0usize;
    let mut start = 0;
    while start + 1 < tokens.len() {
        let len = context_len.min(tokens.len() - 1 - start);
        let inputs = &tokens[start..start + len];
        let targets = &tokens[start + 1..start + len + 1];
        let hidden = forward_train(
            params,
            &TokenBatch::single(inputs),
            &DropMask::none(n_layers, 1),
        )?;
        for (l, sum) in sums.iter_mut().enumerate() {
            let out = head_forward(params, hidden.x[l].data(), targets)?;
            *sum += out.loss.to_f64_lossy() * len as f64;
        }
        count += len;
        start += len;
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}

/// Perplexity of every exit `x[0..=L]`; index `l` unembeds `x[l]`.
pub fn layer_perplexities<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    context_len: usize,
) -> Result<Vec<f64>> {
    Ok(layer_losses(params, tokens, context_len)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// `exp(mean CE(unembed(x[layer]), next token))` over `tokens`, using the
/// model's full context per window.
pub fn perplexity_at_layer<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    layer: usize,
) -> Result<f64> {
    if layer > params.config.n_layers {
        return Err(Error::Config(format!(
            "layer {layer} outside 0..={}",
            params.config.n_layers
        )));
    }
    Ok(layer_perplexities(params, tokens, params.config.max_context)?[layer])
}

/// Exit predictions for one generated token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerwisePrediction {
    /// Argmax of `unembed(x[l])` for `l = 1..=L`.
    pub per_layer: Vec<u32>,
    pub final_token: u32,
    /// Smallest `l` such that every exit from `l` to `L` predicts the final token.
    pub earliest_stable_layer: usize,
    /// Smallest `l` whose exit predicts the final token.
    pub first_correct_layer: usize,
}

impl LayerwisePrediction {
    fn from_layers(per_layer: Vec<u32>) -> Self {
        let n = per_layer.len();
        let final_token = per_layer[n - 1];
        let mut stable = n;
        while stable > 1 && per_layer[stable - 2] == final_token {
            stable -= 1;
        }
        let first = per_layer
            .iter()
            .position(|&t| t == final_token)
            .expect("last layer matches itself")
            + 1;
        LayerwisePrediction {
            per_layer,
            final_token,
            earliest_stable_layer: stable,
            first_correct_layer: first,
        }
    }
}

/// Greedy full-model generation of up to `n_tokens` tokens (stopping after
/// end-of-text), recording every layer's exit prediction per token.
pub fn layerwise_predictions<T: Scalar>(
    params: &ModelParams<T>,
    prompt: &[u32],
    n_tokens: usize,
) -> Result<Vec<LayerwisePrediction>> {
    let Some((&last, head)) = prompt.split_last() else {
        return Err(Error::Empty("prompt"));
    };
    let cfg = params.config;
    if prompt.len() + n_tokens.saturating_sub(1) > cfg.max_context {
        return Err(Error::ContextOverflow {
            needed: prompt.len() + n_tokens - 1,
            max: cfg.max_context,
        });
    }
    let mut cache = KvqCache::new(&cfg);
    if !head.is_empty() {
        forward_step(params, head, &mut cache, cfg.n_layers)?;
    }
    let mut pending = last;
    let mut out = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let states = forward_step_layers(params, &[pending], &mut cache)?;
        let per_layer: Vec<u32> = states[1..]
            .iter()
            .map(|x| argmax(&unembed(params, x.data())) as u32)
            .collect();
        let p = LayerwisePrediction::from_layers(per_layer);
        pending = p.final_token;
        out.push(p);
        if pending == EOT {
            break;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub n_layers: usize,
    pub n_tokens: usize,
    pub mean_earliest_stable_layer: f64,
    pub mean_first_correct_layer: f64,
}

pub fn summarize(predictions: &[LayerwisePrediction], n_layers: usize) -> Result<ProbeSummary> {
    if predictions.is_empty() {
        return Err(Error::Empty("probe predictions"));
    }
    let n = predictions.len() as f64;
    Ok(ProbeSummary {
        n_layers,
        n_tokens: predictions.len(),
        mean_earliest_stable_layer: predictions
            .iter()
            .map(|p| p.earliest_stable_layer as f64)
            .sum::<f64>()
            / n,
        mean_first_correct_layer: predictions
            .iter()
            .map(|p| p.first_correct_layer as f64)
            .sum::<f64>()
            / n,
    })
}

/// Long-format CSV: `token_index,layer,predicted_token_id,is_final_prediction`.
pub fn write_probe_csv<W: Write>(predictions: &[LayerwisePrediction], mut w: W) -> Result<()> {
    writeln!(
        w,
        "token_index,layer,predicted_token_id,is_final_prediction"
    )?;
    for (i, p) in predictions.iter().enumerate() {
        for (l, &t) in p.per_layer.iter().enumerate() {
            writeln!(w, "{i},{},{t},{}", l + 1, t == p.final_token)?;
        }
    }
    Ok(())
}
