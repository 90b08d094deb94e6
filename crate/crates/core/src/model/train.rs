//! Batched training forward pass with per-sample layer dropout, and the
//! matching hand-derived backward pass.

use crate::error::{Error, Result};
use crate::nn::linalg::{gemm, matmul, matmul_nt, matmul_nt_acc, matmul_tn_acc, View, ViewMut};
use crate::nn::ops::{
    cross_entropy_unchecked, rms_norm_row, rms_norm_row_backward, silu, silu_grad, softmax_in_place,
};
use crate::nn::{Rope, Scalar, Tensor};

use super::config::ModelConfig;
use super::params::{LayerParams, ModelParams};

/// `batch_size` windows of `seq_len` token ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub tokens: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch_size: usize, seq_len: usize, tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() != batch_size * seq_len {
            return Err(Error::Shape(format!(
                "batch of {batch_size}×{seq_len} needs {} tokens, got {}",
                batch_size * seq_len,
                tokens.len()
            )));
        }
        Ok(TokenBatch {
            batch_size,
            seq_len,
            tokens,
        })
    }

    pub fn single(tokens: &[u32]) -> Self {
        TokenBatch {
            batch_size: 1,
            seq_len: tokens.len(),
            tokens: tokens.to_vec(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.tokens.len()
    }
}

/// Per-layer, per-sample skip decisions. `true` means the block's residual
/// contribution is dropped for that sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropMask {
    n_layers: usize,
    batch: usize,
    bits: Vec<bool>,
}

impl DropMask {
    pub fn none(n_layers: usize, batch: usize) -> Self {
        DropMask {
            n_layers,
            batch,
            bits: vec![false; n_layers * batch],
        }
    }

    pub fn all(n_layers: usize, batch: usize) -> Self {
        DropMask {
            n_layers,
            batch,
            bits: vec![true; n_layers * batch],
        }
    }

    pub fn from_fn(n_layers: usize, batch: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(n_layers * batch);
        for l in 0..n_layers {
            for b in 0..batch {
                bits.push(f(l, b));
            }
        }
        DropMask {
            n_layers,
            batch,
            bits,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn is_dropped(&self, layer: usize, sample: usize) -> bool {
        self.bits[layer * self.batch + sample]
    }

    pub fn set(&mut self, layer: usize, sample: usize, dropped: bool) {
        self.bits[layer * self.batch + sample] = dropped;
    }

    pub fn layer(&self, layer: usize) -> &[bool] {
        &self.bits[layer * self.batch..(layer + 1) * self.batch]
    }

    /// Fraction of samples dropped at `layer`.
    pub fn layer_rate(&self, layer: usize) -> f64 {
        let row = self.layer(layer);
        row.iter().filter(|&&d| d).count() as f64 / row.len().max(1) as f64
    }
}

/// `x[0]` is the token embedding, `x[l + 1]` the output of block `l`.
/// Each tensor has shape `[batch, seq, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates<T = f32> {
    pub x: Vec<Tensor<T>>,
}

impl<T: Scalar> HiddenStates<T> {
    pub fn n_layers(&self) -> usize {
        self.x.len() - 1
    }

    /// Hidden state after `layer` blocks for flat row `row` (`sample·seq + pos`).
    pub fn row(&self, layer: usize, row: usize) -> &[T] {
        self.x[layer].row(row)
    }
}

/// Activations a block saves for its backward pass. Rows cover only the
/// samples that executed the block.
#[derive(Debug, Clone)]
pub struct BlockTape<T> {
    kept: Vec<usize>,
    x_in: Vec<T>,
    inv1: Vec<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    o: Vec<T>,
    h: Vec<T>,
    inv2: Vec<T>,
    b: Vec<T>,
    gate: Vec<T>,
    up: Vec<T>,
    act: Vec<T>,
}

/// Everything needed to run [`backward`] after [`forward_with_tape`].
#[derive(Debug, Clone)]
pub struct ForwardTape<T> {
    batch: TokenBatch,
    blocks: Vec<Option<BlockTape<T>>>,
}

pub(crate) fn check_tokens(tokens: &[u32], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= vocab) {
        Some(&token) => Err(Error::TokenOutOfRange { token, vocab }),
        None => Ok(()),
    }
}

/// Forward over a batch returning every layer's hidden state.
pub fn forward_train<T: Scalar>(
    params: &ModelParams<T>,
    batch: &TokenBatch,
    drop_mask: &DropMask,
) -> Result<HiddenStates<T>> {
    forward_with_tape(params, batch, drop_mask).map(|(h, _)| h)
}

pub fn forward_with_tape<T: Scalar>(
    params: &ModelParams<T>,
    batch: &TokenBatch,
    drop_mask: &DropMask,
) -> Result<(HiddenStates<T>, ForwardTape<T>)> {
    let cfg = params.config;
    let (bsz, seq, d) = (batch.batch_size, batch.seq_len, cfg.dim);
    if seq > cfg.max_context {
        return Err(Error::ContextOverflow {
            needed: seq,
            max: cfg.max_context,
        });
    }
    if drop_mask.n_layers() != cfg.n_layers || drop_mask.batch() != bsz {
        return Err(Error::Shape(format!(
            "drop mask is {}×{}, model needs {}×{}",
            drop_mask.n_layers(),
            drop_mask.batch(),
            cfg.n_layers,
            bsz
        )));
    }
    check_tokens(&batch.tokens, cfg.vocab)?;

    let emb = params.token_embedding.value.data();
    let mut x0 = Vec::with_capacity(batch.n_rows() * d);
    for &t in &batch.tokens {
        let t = t as usize;
        x0.extend_from_slice(&emb[t * d..(t + 1) * d]);
    }
    let shape = [bsz, seq, d];
    let mut xs = vec![Tensor::from_vec(&shape, x0)?];
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    let rope = Rope::<T>::new(cfg.head_dim(), seq.max(1));
    let sample_len = seq * d;

    for (l, lp) in params.layers.iter().enumerate() {
        let prev = xs.last().expect("embedding present").data();
        let kept: Vec<usize> = (0..bsz).filter(|&b| !drop_mask.is_dropped(l, b)).collect();
        let mut next = prev.to_vec();
        if kept.is_empty() {
            blocks.push(None);
        } else {
            let mut x_in = Vec::with_capacity(kept.len() * sample_len);
            for &b in &kept {
                x_in.extend_from_slice(&prev[b * sample_len..(b + 1) * sample_len]);
            }
            let (out, tape) = block_forward(lp, &cfg, &rope, x_in, kept, seq);
            for (j, &b) in tape.kept.iter().enumerate() {
                next[b * sample_len..(b + 1) * sample_len]
                    .copy_from_slice(&out[j * sample_len..(j + 1) * sample_len]);
            }
            blocks.push(Some(tape));
        }
        let t = Tensor::from_vec(&shape, next)?;
        t.ensure_finite("hidden state")?;
        xs.push(t);
    }
    Ok((
        HiddenStates { x: xs },
        ForwardTape {
            batch: batch.clone(),
            blocks,
        },
    ))
}

fn rms_rows<T: Scalar>(x: &[T], gain: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let n = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(n);
    for r in 0..n {
        inv.push(rms_norm_row(
            &x[r * d..(r + 1) * d],
            gain,
            &mut out[r * d..(r + 1) * d],
        ));
    }
    (out, inv)
}

fn rope_rows<T: Scalar>(rope: &Rope<T>, x: &mut [T], cfg: &ModelConfig, seq: usize, inverse: bool) {
    let (d, hd) = (cfg.dim, cfg.head_dim());
    for (r, row) in x.chunks_exact_mut(d).enumerate() {
        let pos = r % seq;
        for head in row.chunks_exact_mut(hd) {
            if inverse {
                rope.apply_transpose(head, pos);
            } else {
                rope.apply(head, pos);
            }
        }
    }
}

fn block_forward<T: Scalar>(
    lp: &LayerParams<T>,
    cfg: &ModelConfig,
    rope: &Rope<T>,
    x_in: Vec<T>,
    kept: Vec<usize>,
    seq: usize,
) -> (Vec<T>, BlockTape<T>) {
    let (d, hid, nh, hd) = (cfg.dim, cfg.ffn_hidden, cfg.n_heads, cfg.head_dim());
    let n = x_in.len() / d;
    let n_seq = kept.len();

    let (a, inv1) = rms_rows(&x_in, lp.attn_norm.value.data(), d);
    let mut q = vec![T::zero(); n * d];
    let mut k = vec![T::zero(); n * d];
    let mut v = vec![T::zero(); n * d];
    matmul(&a, lp.wq.value.data(), &mut q, n, d, d);
    matmul(&a, lp.wk.value.data(), &mut k, n, d, d);
    matmul(&a, lp.wv.value.data(), &mut v, n, d, d);
    rope_rows(rope, &mut q, cfg, seq, false);
    rope_rows(rope, &mut k, cfg, seq, false);

    let scale = T::from_usize_lossy(hd).sqrt().recip();
    let mut probs = vec![T::zero(); n_seq * nh * seq * seq];
    let mut o = vec![T::zero(); n * d];
    for s in 0..n_seq {
        for h in 0..nh {
            let off = s * seq * d + h * hd;
            let pbase = (s * nh + h) * seq * seq;
            let p = &mut probs[pbase..pbase + seq * seq];
            gemm(
                scale,
                View::strided(&q, off, seq, hd, d, 1),
                View::strided(&k, off, seq, hd, d, 1).t(),
                T::zero(),
                ViewMut::new(p, seq, seq),
            );
            for i in 0..seq {
                let row = &mut p[i * seq..(i + 1) * seq];
                softmax_in_place(&mut row[..=i]);
                row[i + 1..].iter_mut().for_each(|x| *x = T::zero());
            }
            gemm(
                T::one(),
                View::new(p, seq, seq),
                View::strided(&v, off, seq, hd, d, 1),
                T::zero(),
                ViewMut::strided(&mut o, off, seq, hd, d, 1),
            );
        }
    }

    let mut h = x_in.clone();
    gemm(
        T::one(),
        View::new(&o, n, d),
        View::new(lp.wo.value.data(), d, d),
        T::one(),
        ViewMut::new(&mut h, n, d),
    );
    let (b, inv2) = rms_rows(&h, lp.ffn_norm.value.data(), d);
    let mut gate = vec![T::zero(); n * hid];
    let mut up = vec![T::zero(); n * hid];
    matmul(&b, lp.w_gate.value.data(), &mut gate, n, d, hid);
    matmul(&b, lp.w_up.value.data(), &mut up, n, d, hid);
    let act: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
    let mut out = h.clone();
    gemm(
        T::one(),
        View::new(&act, n, hid),
        View::new(lp.w_down.value.data(), hid, d),
        T::one(),
        ViewMut::new(&mut out, n, d),
    );

    let tape = BlockTape {
        kept,
        x_in,
        inv1,
        a,
        q,
        k,
        v,
        probs,
        o,
        h,
        inv2,
        b,
        gate,
        up,
        act,
    };
    (out, tape)
}

/// Backward through one block. Accumulates weight gradients into `lp` and
/// returns the gradient with respect to the block input rows.
fn block_backward<T: Scalar>(
    lp: &mut LayerParams<T>,
    cfg: &ModelConfig,
    rope: &Rope<T>,
    t: &BlockTape<T>,
    d_out: &[T],
    seq: usize,
) -> Vec<T> {
    let (d, hid, nh, hd) = (cfg.dim, cfg.ffn_hidden, cfg.n_heads, cfg.head_dim());
    let n = t.x_in.len() / d;
    let n_seq = t.kept.len();

    // FFN
    let mut d_act = vec![T::zero(); n * hid];
    matmul_nt(d_out, lp.w_down.value.data(), &mut d_act, n, d, hid);
    matmul_tn_acc(&t.act, d_out, lp.w_down.grad.data_mut(), n, hid, d);
    let mut d_gate = vec![T::zero(); n * hid];
    let mut d_up = vec![T::zero(); n * hid];
    for i in 0..n * hid {
        d_gate[i] = d_act[i] * t.up[i] * silu_grad(t.gate[i]);
        d_up[i] = d_act[i] * silu(t.gate[i]);
    }
    matmul_tn_acc(&t.b, &d_gate, lp.w_gate.grad.data_mut(), n, d, hid);
    matmul_tn_acc(&t.b, &d_up, lp.w_up.grad.data_mut(), n, d, hid);
    let mut d_b = vec![T::zero(); n * d];
    matmul_nt(&d_gate, lp.w_gate.value.data(), &mut d_b, n, hid, d);
    matmul_nt_acc(&d_up, lp.w_up.value.data(), &mut d_b, n, hid, d);

    let mut d_h = d_out.to_vec();
    {
        let gain = lp.ffn_norm.value.data();
        let dgain = lp.ffn_norm.grad.data_mut();
        for r in 0..n {
            let span = r * d..(r + 1) * d;
            rms_norm_row_backward(
                &t.h[span.clone()],
                gain,
                t.inv2[r],
                &d_b[span.clone()],
                &mut d_h[span],
                dgain,
            );
        }
    }

    // attention output projection
    let mut d_o = vec![T::zero(); n * d];
    matmul_nt(&d_h, lp.wo.value.data(), &mut d_o, n, d, d);
    matmul_tn_acc(&t.o, &d_h, lp.wo.grad.data_mut(), n, d, d);

    // attention core
    let scale = T::from_usize_lossy(hd).sqrt().recip();
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let mut dp = vec![T::zero(); seq * seq];
    for s in 0..n_seq {
        for h in 0..nh {
            let off = s * seq * d + h * hd;
            let pbase = (s * nh + h) * seq * seq;
            let p = &t.probs[pbase..pbase + seq * seq];
            gemm(
                T::one(),
                View::strided(&d_o, off, seq, hd, d, 1),
                View::strided(&t.v, off, seq, hd, d, 1).t(),
                T::zero(),
                ViewMut::new(&mut dp, seq, seq),
            );
            gemm(
                T::one(),
                View::new(p, seq, seq).t(),
                View::strided(&d_o, off, seq, hd, d, 1),
                T::zero(),
                ViewMut::strided(&mut dv, off, seq, hd, d, 1),
            );
            for i in 0..seq {
                let prow = &p[i * seq..(i + 1) * seq];
                let drow = &mut dp[i * seq..(i + 1) * seq];
                let mut dot = T::zero();
                for j in 0..=i {
                    dot = dot + prow[j] * drow[j];
                }
                for j in 0..seq {
                    drow[j] = if j <= i {
                        prow[j] * (drow[j] - dot)
                    } else {
                        T::zero()
                    };
                }
            }
            gemm(
                scale,
                View::new(&dp, seq, seq),
                View::strided(&t.k, off, seq, hd, d, 1),
                T::zero(),
                ViewMut::strided(&mut dq, off, seq, hd, d, 1),
            );
            gemm(
                scale,
                View::new(&dp, seq, seq).t(),
                View::strided(&t.q, off, seq, hd, d, 1),
                T::zero(),
                ViewMut::strided(&mut dk, off, seq, hd, d, 1),
            );
        }
    }
    rope_rows(rope, &mut dq, cfg, seq, true);
    rope_rows(rope, &mut dk, cfg, seq, true);

    matmul_tn_acc(&t.a, &dq, lp.wq.grad.data_mut(), n, d, d);
    matmul_tn_acc(&t.a, &dk, lp.wk.grad.data_mut(), n, d, d);
    matmul_tn_acc(&t.a, &dv, lp.wv.grad.data_mut(), n, d, d);
    let mut d_a = vec![T::zero(); n * d];
    matmul_nt(&dq, lp.wq.value.data(), &mut d_a, n, d, d);
    matmul_nt_acc(&dk, lp.wk.value.data(), &mut d_a, n, d, d);
    matmul_nt_acc(&dv, lp.wv.value.data(), &mut d_a, n, d, d);

    let mut d_x = d_h;
    let gain = lp.attn_norm.value.data();
    let dgain = lp.attn_norm.grad.data_mut();
    for r in 0..n {
        let span = r * d..(r + 1) * d;
        rms_norm_row_backward(
            &t.x_in[span.clone()],
            gain,
            t.inv1[r],
            &d_a[span.clone()],
            &mut d_x[span],
            dgain,
        );
    }
    d_x
}

/// Backpropagates exit-head gradients through the blocks into every
/// parameter. `exit_grads[l]` is `∂J/∂x[l]` coming from the shared head (or
/// `None` when layer `l` contributes no loss this step).
pub fn backward<T: Scalar>(
    params: &mut ModelParams<T>,
    tape: &ForwardTape<T>,
    exit_grads: &[Option<Vec<T>>],
) -> Result<()> {
    let cfg = params.config;
    let (seq, d) = (tape.batch.seq_len, cfg.dim);
    if exit_grads.len() != cfg.n_layers + 1 {
        return Err(Error::Shape(format!(
            "expected {} exit gradients, got {}",
            cfg.n_layers + 1,
            exit_grads.len()
        )));
    }
    let n_rows = tape.batch.n_rows();
    let mut dx = exit_grads[cfg.n_layers]
        .clone()
        .unwrap_or_else(|| vec![T::zero(); n_rows * d]);
    let rope = Rope::<T>::new(cfg.head_dim(), seq.max(1));
    let sample_len = seq * d;
    for l in (0..cfg.n_layers).rev() {
        if let Some(bt) = &tape.blocks[l] {
            let mut d_out = Vec::with_capacity(bt.kept.len() * sample_len);
            for &b in &bt.kept {
                d_out.extend_from_slice(&dx[b * sample_len..(b + 1) * sample_len]);
            }
            let d_in = block_backward(&mut params.layers[l], &cfg, &rope, bt, &d_out, seq);
            for (j, &b) in bt.kept.iter().enumerate() {
                dx[b * sample_len..(b + 1) * sample_len]
                    .copy_from_slice(&d_in[j * sample_len..(j + 1) * sample_len]);
            }
        }
        if let Some(g) = &exit_grads[l] {
            dx.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
        }
    }
    let grad = params.token_embedding.grad.data_mut();
    for (r, &tok) in tape.batch.tokens.iter().enumerate() {
        let t = tok as usize;
        for (g, &v) in grad[t * d..(t + 1) * d]
            .iter_mut()
            .zip(&dx[r * d..(r + 1) * d])
        {
            *g = *g + v;
        }
    }
    Ok(())
}

/// Shared exit head applied to a block of rows: final norm, LM head, and
/// softmax/cross-entropy statistics against next-token targets.
pub struct HeadOutput<T> {
    /// Mean cross entropy over all rows.
    pub loss: T,
    z: Vec<T>,
    inv: Vec<T>,
    probs: Vec<T>,
}

pub fn head_forward<T: Scalar>(
    params: &ModelParams<T>,
    x: &[T],
    targets: &[u32],
) -> Result<HeadOutput<T>> {
    let cfg = params.config;
    let (d, vocab) = (cfg.dim, cfg.vocab);
    let n = x.len() / d;
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "{} target ids for {n} rows",
            targets.len()
        )));
    }
    check_tokens(targets, vocab)?;
    let (z, inv) = rms_rows(x, params.final_norm.value.data(), d);
    let mut logits = vec![T::zero(); n * vocab];
    matmul(&z, params.lm_head.value.data(), &mut logits, n, d, vocab);
    let mut total = T::zero();
    for (r, &tgt) in targets.iter().enumerate() {
        let row = &mut logits[r * vocab..(r + 1) * vocab];
        total = total + cross_entropy_unchecked(row, tgt as usize);
        softmax_in_place(row);
    }
    let loss = total / T::from_usize_lossy(n.max(1));
    if !loss.is_finite() {
        return Err(Error::NonFinite("exit head loss"));
    }
    Ok(HeadOutput {
        loss,
        z,
        inv,
        probs: logits,
    })
}

/// Gradient of `weight · loss` with respect to the head input rows;
/// accumulates head parameter gradients.
pub fn head_backward<T: Scalar>(
    params: &mut ModelParams<T>,
    x: &[T],
    targets: &[u32],
    out: HeadOutput<T>,
    weight: T,
) -> Vec<T> {
    let cfg = params.config;
    let (d, vocab) = (cfg.dim, cfg.vocab);
    let n = x.len() / d;
    let mut dlogits = out.probs;
    let scale = weight / T::from_usize_lossy(n.max(1));
    for (r, &tgt) in targets.iter().enumerate() {
        let row = &mut dlogits[r * vocab..(r + 1) * vocab];
        row[tgt as usize] = row[tgt as usize] - T::one();
        row.iter_mut().for_each(|g| *g = *g * scale);
    }
    matmul_tn_acc(
        &out.z,
        &dlogits,
        params.lm_head.grad.data_mut(),
        n,
        d,
        vocab,
    );
    let mut dz = vec![T::zero(); n * d];
    matmul_nt(&dlogits, params.lm_head.value.data(), &mut dz, n, vocab, d);
    let mut dx = vec![T::zero(); n * d];
    let gain = params.final_norm.value.data();
    let dgain = params.final_norm.grad.data_mut();
    for r in 0..n {
        let span = r * d..(r + 1) * d;
        rms_norm_row_backward(
            &x[span.clone()],
            gain,
            out.inv[r],
            &dz[span.clone()],
            &mut dx[span],
            dgain,
        );
    }
    dx
}
