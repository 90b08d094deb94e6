//! Numeric kernels shared by training and inference.

use crate::error::{Error, Result};

use super::scalar::Scalar;

/// Epsilon inside the RMS normalization square root.
pub const RMS_EPS: f64 = 1e-5;

fn check_finite<T: Scalar>(xs: &[T], what: &'static str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable in-place softmax (max subtraction).
pub fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    let inv = sum.recip();
    xs.iter_mut().for_each(|x| *x = *x * inv);
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax logits"));
    }
    check_finite(logits, "softmax input")?;
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// `log Σ exp(x)`, computed as `max + ln(1 + Σ_{i≠argmax} exp(x_i − max))`
/// so a dominant logit keeps full relative precision.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let (max, rest) = lse_parts(xs);
    max + rest.ln_1p()
}

/// `(max, Σ_{i≠argmax} e^{x_i − max})`.
fn lse_parts<T: Scalar>(xs: &[T]) -> (T, T) {
    let am = argmax(xs);
    let max = xs[am];
    let mut rest = T::zero();
    for (i, &x) in xs.iter().enumerate() {
        if i != am {
            rest = rest + (x - max).exp();
        }
    }
    (max, rest)
}

pub fn log_softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::Empty("log_softmax logits"));
    }
    check_finite(logits, "log_softmax input")?;
    let (max, rest) = lse_parts(logits);
    let tail = rest.ln_1p();
    Ok(logits.iter().map(|&x| (x - max) - tail).collect())
}

/// `−log softmax(logits)[target]`.
pub fn cross_entropy<T: Scalar>(logits: &[T], target: usize) -> Result<T> {
    if target >= logits.len() {
        return Err(Error::TokenOutOfRange {
            token: target as u32,
            vocab: logits.len(),
        });
    }
    check_finite(logits, "cross_entropy logits")?;
    Ok(cross_entropy_unchecked(logits, target))
}

#[inline]
pub(crate) fn cross_entropy_unchecked<T: Scalar>(logits: &[T], target: usize) -> T {
    let (max, rest) = lse_parts(logits);
    (max - logits[target]) + rest.ln_1p()
}

/// RMS normalization of a single vector.
pub fn rms_norm<T: Scalar>(x: &[T], gain: &[T]) -> Result<Vec<T>> {
    if x.len() != gain.len() {
        return Err(Error::Shape(format!(
            "rms_norm: x has {} elements, gain has {}",
            x.len(),
            gain.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Empty("rms_norm input"));
    }
    check_finite(x, "rms_norm input")?;
    let mut out = vec![T::zero(); x.len()];
    rms_norm_row(x, gain, &mut out);
    Ok(out)
}

/// Writes the normalized row into `out` and returns `1 / rms(x)`.
#[inline]
pub(crate) fn rms_norm_row<T: Scalar>(x: &[T], gain: &[T], out: &mut [T]) -> T {
    let mut ms = T::zero();
    for &v in x {
        ms = ms + v * v;
    }
    ms = ms / T::from_usize_lossy(x.len());
    let inv = (ms + T::from_f64_lossy(RMS_EPS)).sqrt().recip();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = g * v * inv;
    }
    inv
}

/// Backward of [`rms_norm_row`]: accumulates into `dx` and `dgain`.
#[inline]
pub(crate) fn rms_norm_row_backward<T: Scalar>(
    x: &[T],
    gain: &[T],
    inv: T,
    dy: &[T],
    dx: &mut [T],
    dgain: &mut [T],
) {
    let n = T::from_usize_lossy(x.len());
    let mut dot = T::zero();
    for ((&v, &g), &d) in x.iter().zip(gain).zip(dy) {
        dot = dot + g * d * v;
    }
    let coef = inv * inv * inv * dot / n;
    for i in 0..x.len() {
        dgain[i] = dgain[i] + dy[i] * x[i] * inv;
        dx[i] = dx[i] + gain[i] * dy[i] * inv - x[i] * coef;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Rotary position tables for interleaved `(2i, 2i+1)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Rope<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

pub const ROPE_BASE: f64 = 10_000.0;

impl<T: Scalar> Rope<T> {
    pub fn new(head_dim: usize, max_positions: usize) -> Self {
        assert!(
            head_dim.is_multiple_of(2),
            "rotary embedding needs an even head dim"
        );
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for pos in 0..max_positions {
            for i in 0..half {
                let freq = ROPE_BASE.powf(-(2.0 * i as f64) / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(T::from_f64_lossy(angle.cos()));
                sin.push(T::from_f64_lossy(angle.sin()));
            }
        }
        Rope { half, cos, sin }
    }

    /// Rotates one head slice in place for position `pos`.
    #[inline]
    pub fn apply(&self, head: &mut [T], pos: usize) {
        let base = pos * self.half;
        for i in 0..self.half {
            let (c, s) = (self.cos[base + i], self.sin[base + i]);
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * c - b * s;
            head[2 * i + 1] = a * s + b * c;
        }
    }

    /// Transpose of [`Rope::apply`], used to backpropagate through it.
    #[inline]
    pub fn apply_transpose(&self, head: &mut [T], pos: usize) {
        let base = pos * self.half;
        for i in 0..self.half {
            let (c, s) = (self.cos[base + i], self.sin[base + i]);
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * c + b * s;
            head[2 * i + 1] = -a * s + b * c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform() {
        let p = softmax(&[0.0f64; 4]).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_saturates_without_overflow() {
        let p = softmax(&[1000.0f64, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p[1].abs() < 1e-12);
        let p32 = softmax(&[1000.0f32, 0.0]).unwrap();
        assert!((p32[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_of_log_weights() {
        let p = softmax(&[1.0f64.ln(), 3.0f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax(&[0.0f32, f32::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let ce = cross_entropy(&[0.0f64; 8], 3).unwrap();
        assert!((ce - 8f64.ln()).abs() < 1e-12);

        // ln(1 + 2e^-10)
        let expect = (2.0 * (-10f64).exp()).ln_1p();
        let ce = cross_entropy(&[10.0f64, 0.0, 0.0], 0).unwrap();
        assert!((ce - expect).abs() < 1e-15);
        assert!((ce - 9.08e-5).abs() < 1e-7);
        let ce32 = cross_entropy(&[10.0f32, 0.0, 0.0], 0).unwrap();
        assert!(((ce32 as f64) - expect).abs() / expect < 1e-5);

        // 10 + ln(1 + 2e^-10)
        let ce = cross_entropy(&[0.0f64, 10.0, 0.0], 0).unwrap();
        assert!((ce - (10.0 + expect)).abs() < 1e-12);
        assert!((ce - 10.0001).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        assert!(matches!(
            cross_entropy(&[0.0f32, 1.0], 2),
            Err(Error::TokenOutOfRange { token: 2, vocab: 2 })
        ));
    }

    #[test]
    fn rms_norm_cases() {
        let y = rms_norm(&[1.0f64; 6], &[1.0; 6]).unwrap();
        for v in y {
            assert!((v - 1.0 / (1.0 + RMS_EPS).sqrt()).abs() < 1e-15);
            assert!((v - 1.0).abs() < 1e-5);
        }
        let y = rms_norm(&[3.0f64, 4.0], &[1.0, 1.0]).unwrap();
        let denom = (12.5 + RMS_EPS).sqrt();
        assert!((y[0] - 3.0 / denom).abs() < 1e-15);
        assert!((y[0] - 0.8485).abs() < 1e-4);
        assert!((y[1] - 1.1314).abs() < 1e-4);
        let y = rms_norm(&[3.0f32, 4.0], &[0.0, 0.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn rms_norm_shape_mismatch() {
        assert!(rms_norm(&[1.0f32, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f32; 5]), 0);
    }

    #[test]
    fn rope_is_orthogonal() {
        let rope = Rope::<f64>::new(8, 16);
        let orig: Vec<f64> = (0..8).map(|i| i as f64 - 2.5).collect();
        let mut v = orig.clone();
        rope.apply(&mut v, 11);
        let n0: f64 = orig.iter().map(|x| x * x).sum();
        let n1: f64 = v.iter().map(|x| x * x).sum();
        assert!((n0 - n1).abs() < 1e-12);
        rope.apply_transpose(&mut v, 11);
        for (a, b) in v.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut p0 = orig.clone();
        rope.apply(&mut p0, 0);
        assert_eq!(p0, orig);
    }

    #[test]
    fn rms_backward_matches_finite_difference() {
        let x = [0.3f64, -1.2, 0.7, 2.0];
        let g = [1.1f64, 0.9, -0.5, 1.3];
        let dy = [0.2f64, -0.4, 1.0, 0.1];
        let loss = |x: &[f64], g: &[f64]| -> f64 {
            let y = rms_norm(x, g).unwrap();
            y.iter().zip(&dy).map(|(a, b)| a * b).sum()
        };
        let mut y = [0.0; 4];
        let inv = rms_norm_row(&x, &g, &mut y);
        let mut dx = [0.0; 4];
        let mut dg = [0.0; 4];
        rms_norm_row_backward(&x, &g, inv, &dy, &mut dx, &mut dg);
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&xp, &g) - loss(&xm, &g)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-8, "dx[{i}]");
            let mut gp = g;
            let mut gm = g;
            gp[i] += h;
            gm[i] -= h;
            let fd = (loss(&x, &gp) - loss(&x, &gm)) / (2.0 * h);
            assert!((fd - dg[i]).abs() < 1e-8, "dg[{i}]");
        }
    }
}
