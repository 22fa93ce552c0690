//! Fused multi-head scaled dot-product attention.
//!
//! Masked key positions are skipped outright rather than added as `-inf`, so
//! a query row's result never depends on keys it cannot see, not even through
//! floating-point summation order.

use std::sync::Arc;

use super::Real;
use crate::error::{Error, Result};

/// Shapes and visibility for one attention call over a batch of sequences.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub dim: usize,
    /// Row-major `q_len × k_len` visibility grid shared by the batch;
    /// `None` means every key is visible.
    pub allowed: Option<Arc<Vec<bool>>>,
}

impl AttentionSpec {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn visible(&self, i: usize, j: usize) -> bool {
        self.allowed
            .as_ref()
            .map_or(true, |a| a[i * self.k_len + j])
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "model dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.k_len == 0 {
            return Err(Error::contract("attention over zero keys"));
        }
        if let Some(a) = &self.allowed {
            if a.len() != self.q_len * self.k_len {
                return Err(Error::shape(
                    "attention mask",
                    &[a.len()],
                    &[self.q_len, self.k_len],
                ));
            }
            for i in 0..self.q_len {
                if !a[i * self.k_len..(i + 1) * self.k_len].iter().any(|&x| x) {
                    return Err(Error::FullyMaskedRow { row: i });
                }
            }
        }
        Ok(())
    }
}

/// Returns `(output, probabilities)`; probabilities are laid out
/// `[batch, heads, q_len, k_len]` with zeros at masked entries.
pub(crate) fn forward<T: Real>(
    spec: &AttentionSpec,
    q: &[T],
    k: &[T],
    v: &[T],
) -> (Vec<T>, Vec<T>) {
    let (d, dh) = (spec.dim, spec.head_dim());
    let (lq, lk) = (spec.q_len, spec.k_len);
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = vec![T::zero(); spec.batch * lq * d];
    let mut probs = vec![T::zero(); spec.batch * spec.heads * lq * lk];
    let mut scores = vec![T::zero(); lk];

    for b in 0..spec.batch {
        for h in 0..spec.heads {
            let off = h * dh;
            for i in 0..lq {
                let qi = &q[(b * lq + i) * d + off..][..dh];
                let mut max = T::neg_infinity();
                for j in 0..lk {
                    if !spec.visible(i, j) {
                        continue;
                    }
                    let kj = &k[(b * lk + j) * d + off..][..dh];
                    let s = dot(qi, kj) * scale;
                    scores[j] = s;
                    if s > max {
                        max = s;
                    }
                }
                let p = &mut probs[((b * spec.heads + h) * lq + i) * lk..][..lk];
                let mut sum = T::zero();
                for j in 0..lk {
                    if spec.visible(i, j) {
                        p[j] = (scores[j] - max).exp();
                        sum += p[j];
                    }
                }
                let oi = &mut out[(b * lq + i) * d + off..][..dh];
                for j in 0..lk {
                    if !spec.visible(i, j) {
                        continue;
                    }
                    p[j] /= sum;
                    let vj = &v[(b * lk + j) * d + off..][..dh];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += p[j] * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

pub(crate) fn backward<T: Real>(
    spec: &AttentionSpec,
    g: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    needs: [bool; 3],
) -> [Option<Vec<T>>; 3] {
    let (d, dh) = (spec.dim, spec.head_dim());
    let (lq, lk) = (spec.q_len, spec.k_len);
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); lk];

    for b in 0..spec.batch {
        for h in 0..spec.heads {
            let off = h * dh;
            for i in 0..lq {
                let gi = &g[(b * lq + i) * d + off..][..dh];
                let p = &probs[((b * spec.heads + h) * lq + i) * lk..][..lk];
                let mut weighted = T::zero();
                for j in 0..lk {
                    if !spec.visible(i, j) {
                        continue;
                    }
                    let vj = &v[(b * lk + j) * d + off..][..dh];
                    dp[j] = dot(gi, vj);
                    weighted += p[j] * dp[j];
                    let dvj = &mut dv[(b * lk + j) * d + off..][..dh];
                    for (o, &x) in dvj.iter_mut().zip(gi) {
                        *o += p[j] * x;
                    }
                }
                let qi = &q[(b * lq + i) * d + off..][..dh];
                for j in 0..lk {
                    if !spec.visible(i, j) {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    let kj = &k[(b * lk + j) * d + off..][..dh];
                    let dqi = &mut dq[(b * lq + i) * d + off..][..dh];
                    for (o, &x) in dqi.iter_mut().zip(kj) {
                        *o += ds * x;
                    }
                    let dkj = &mut dk[(b * lk + j) * d + off..][..dh];
                    for (o, &x) in dkj.iter_mut().zip(qi) {
                        *o += ds * x;
                    }
                }
            }
        }
    }
    let pick = |flag: bool, buf: Vec<T>| flag.then_some(buf);
    [pick(needs[0], dq), pick(needs[1], dk), pick(needs[2], dv)]
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}
