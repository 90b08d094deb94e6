//! Incremental inference through a [`KvqCache`]. Every kernel here works one
//! row at a time with a fixed summation order, so a position's activations
//! do not depend on how many positions are processed per call.

use std::ops::Range;

use crate::cache::KvqCache;
use crate::error::{Error, Result};
use crate::nn::linalg::vec_mat;
use crate::nn::ops::{rms_norm_row, silu, softmax_in_place};
use crate::nn::{Scalar, Tensor};

use super::params::{LayerParams, ModelParams};
use super::train::check_tokens;

/// Shared exit head: `lm_head · rms_norm(x, final_norm)`.
pub fn unembed<T: Scalar>(params: &ModelParams<T>, x: &[T]) -> Vec<T> {
    let mut z = vec![T::zero(); x.len()];
    rms_norm_row(x, params.final_norm.value.data(), &mut z);
    let mut logits = vec![T::zero(); params.config.vocab];
    vec_mat(&z, params.lm_head.value.data(), &mut logits);
    logits
}

/// Runs block `layer` over `rows` (positions `start..start + n`), appending
/// their keys and values to the cache and replacing `rows` with the block
/// output.
fn block_step<T: Scalar>(
    lp: &LayerParams<T>,
    layer: usize,
    params: &ModelParams<T>,
    rows: &mut [T],
    start: usize,
    cache: &mut KvqCache<T>,
) -> Result<()> {
    let cfg = params.config;
    let (d, hid, nh, hd) = (cfg.dim, cfg.ffn_hidden, cfg.n_heads, cfg.head_dim());
    let n = rows.len() / d;
    let mut a = vec![T::zero(); d];
    let mut qs = vec![T::zero(); n * d];
    let mut k = vec![T::zero(); d];
    let mut v = vec![T::zero(); d];
    for r in 0..n {
        let pos = start + r;
        rms_norm_row(&rows[r * d..(r + 1) * d], lp.attn_norm.value.data(), &mut a);
        let q = &mut qs[r * d..(r + 1) * d];
        vec_mat(&a, lp.wq.value.data(), q);
        vec_mat(&a, lp.wk.value.data(), &mut k);
        vec_mat(&a, lp.wv.value.data(), &mut v);
        for (qh, kh) in q.chunks_exact_mut(hd).zip(k.chunks_exact_mut(hd)) {
            cache.rope().apply(qh, pos);
            cache.rope().apply(kh, pos);
        }
        cache.push_kv(layer, &k, &v)?;
    }

    let scale = T::from_usize_lossy(hd).sqrt().recip();
    let mut attn = vec![T::zero(); d];
    let mut proj = vec![T::zero(); d];
    let mut b = vec![T::zero(); d];
    let mut gate = vec![T::zero(); hid];
    let mut up = vec![T::zero(); hid];
    let mut scores = Vec::with_capacity(start + n);
    for r in 0..n {
        let pos = start + r;
        let keys = cache.layer_keys(layer, pos + 1);
        let values = cache.layer_values(layer, pos + 1);
        attn.iter_mut().for_each(|x| *x = T::zero());
        for h in 0..nh {
            let q = &qs[r * d + h * hd..r * d + (h + 1) * hd];
            scores.clear();
            for j in 0..=pos {
                let kj = &keys[j * d + h * hd..j * d + (h + 1) * hd];
                let mut dot = T::zero();
                for (&x, &y) in q.iter().zip(kj) {
                    dot = dot + x * y;
                }
                scores.push(dot * scale);
            }
            softmax_in_place(&mut scores);
            let out = &mut attn[h * hd..(h + 1) * hd];
            for (j, &p) in scores.iter().enumerate() {
                let vj = &values[j * d + h * hd..j * d + (h + 1) * hd];
                for (o, &x) in out.iter_mut().zip(vj) {
                    *o = *o + p * x;
                }
            }
        }
        let x = &mut rows[r * d..(r + 1) * d];
        vec_mat(&attn, lp.wo.value.data(), &mut proj);
        x.iter_mut().zip(&proj).for_each(|(a, &p)| *a = *a + p);
        rms_norm_row(x, lp.ffn_norm.value.data(), &mut b);
        vec_mat(&b, lp.w_gate.value.data(), &mut gate);
        vec_mat(&b, lp.w_up.value.data(), &mut up);
        for (g, &u) in gate.iter_mut().zip(&up) {
            *g = silu(*g) * u;
        }
        vec_mat(&gate, lp.w_down.value.data(), &mut proj);
        x.iter_mut().zip(&proj).for_each(|(a, &p)| *a = *a + p);
    }
    cache.add_units(n as u64);
    Ok(())
}

fn check_exit_layer(exit_layer: usize, n_layers: usize) -> Result<()> {
    if exit_layer == 0 || exit_layer > n_layers {
        return Err(Error::Config(format!(
            "exit layer {exit_layer} outside 1..={n_layers}"
        )));
    }
    Ok(())
}

/// Validates a step and gathers the embeddings of `new_tokens`. Returns the
/// first new position and the rows.
fn embed_step<T: Scalar>(
    params: &ModelParams<T>,
    new_tokens: &[u32],
    cache: &KvqCache<T>,
    exit_layer: usize,
) -> Result<(usize, Vec<T>)> {
    let cfg = params.config;
    check_exit_layer(exit_layer, cfg.n_layers)?;
    check_tokens(new_tokens, cfg.vocab)?;
    let start = cache.valid_len(0);
    if let Some(l) = (1..exit_layer).find(|&l| cache.valid_len(l) != start) {
        return Err(Error::Cache(format!(
            "layer {l} holds {} positions, layer 0 holds {start}",
            cache.valid_len(l)
        )));
    }
    let n = new_tokens.len();
    if start + n > cfg.max_context {
        return Err(Error::ContextOverflow {
            needed: start + n,
            max: cfg.max_context,
        });
    }
    let d = cfg.dim;
    let emb = params.token_embedding.value.data();
    let mut rows = Vec::with_capacity(n * d);
    for &t in new_tokens {
        let t = t as usize;
        rows.extend_from_slice(&emb[t * d..(t + 1) * d]);
    }
    Ok((start, rows))
}

/// Feeds `new_tokens` through blocks `0..exit_layer` only, appending their
/// K/V and recording each new position's hidden state at the exit layer.
/// Returns `x[exit_layer]` for the new positions.
pub fn forward_step<T: Scalar>(
    params: &ModelParams<T>,
    new_tokens: &[u32],
    cache: &mut KvqCache<T>,
    exit_layer: usize,
) -> Result<Tensor<T>> {
    let (start, mut rows) = embed_step(params, new_tokens, cache, exit_layer)?;
    for (l, lp) in params.layers.iter().enumerate().take(exit_layer) {
        block_step(lp, l, params, &mut rows, start, cache)?;
    }
    let out = Tensor::from_vec(&[new_tokens.len(), params.config.dim], rows)?;
    out.ensure_finite("hidden state")?;
    cache.record_exit_states(exit_layer, start, out.data());
    Ok(out)
}

/// Full-depth step that also returns every intermediate state:
/// `x[0..=L]`, each `[new_tokens × dim]`. Bitwise identical to
/// [`forward_step`] with `exit_layer = L` for the final state.
pub fn forward_step_layers<T: Scalar>(
    params: &ModelParams<T>,
    new_tokens: &[u32],
    cache: &mut KvqCache<T>,
) -> Result<Vec<Tensor<T>>> {
    let n_layers = params.config.n_layers;
    let shape = [new_tokens.len(), params.config.dim];
    let (start, mut rows) = embed_step(params, new_tokens, cache, n_layers)?;
    let mut states = vec![Tensor::from_vec(&shape, rows.clone())?];
    for (l, lp) in params.layers.iter().enumerate() {
        block_step(lp, l, params, &mut rows, start, cache)?;
        states.push(Tensor::from_vec(&shape, rows.clone())?);
    }
    let last = states.last().expect("at least the embedding");
    last.ensure_finite("hidden state")?;
    cache.record_exit_states(n_layers, start, last.data());
    Ok(states)
}

/// Resumes blocks `exit_layer..L` for `positions` from their cached exit
/// states, appending those layers' K/V. Returns `x[L]` for the positions.
pub fn forward_remainder<T: Scalar>(
    params: &ModelParams<T>,
    cache: &mut KvqCache<T>,
    exit_layer: usize,
    positions: Range<usize>,
) -> Result<Tensor<T>> {
    let cfg = params.config;
    check_exit_layer(exit_layer, cfg.n_layers)?;
    let d = cfg.dim;
    let mut rows = Vec::with_capacity(positions.len() * d);
    for pos in positions.clone() {
        match cache.exit_state(pos) {
            Some(s) if cache.exit_layer() == exit_layer => rows.extend_from_slice(s),
            _ => return Err(Error::MissingExitState(pos)),
        }
    }
    if let Some(l) = (exit_layer..cfg.n_layers).find(|&l| cache.valid_len(l) != positions.start) {
        return Err(Error::Cache(format!(
            "layer {l} holds {} positions, remainder starts at {}",
            cache.valid_len(l),
            positions.start
        )));
    }
    for (l, lp) in params.layers.iter().enumerate().skip(exit_layer) {
        block_step(lp, l, params, &mut rows, positions.start, cache)?;
    }
    let out = Tensor::from_vec(&[positions.len(), d], rows)?;
    out.ensure_finite("hidden state")?;
    Ok(out)
}
