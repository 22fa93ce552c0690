//! Parameterized building blocks. Layers hold only [`ParamId`]s, so the same
//! layer runs against an `f32` store or its `f64` shadow.

use std::sync::Arc;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::tensor::{AttentionSpec, ParamId, ParamStore, Real, Tape, Tensor, Var};

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(-bound..bound) as f32)
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Repeats each row of a `[b × d]` tensor `n` times → `[b·n × d]`.
pub fn repeat_rows<T: Real>(tape: &mut Tape<T>, x: Var, n: usize) -> Result<Var> {
    let b = tape.value(x).rows();
    let idx: Vec<usize> = (0..b).flat_map(|r| std::iter::repeat(r).take(n)).collect();
    tape.gather_rows(x, &idx)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(&[fan_in, fan_out], bound, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    /// Weights and bias start at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Two linear layers with a GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims.0, dims.1, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims.1, dims.2, rng),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, T::lit(Self::EPS))
    }
}

/// Query/key/value/output projections of one multi-head attention layer.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, rng),
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, rng),
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, rng),
            heads,
        }
    }

    /// `q_in` is `[batch·q_len × D]`, `kv_in` is `[batch·k_len × D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        q_in: Var,
        kv_in: Var,
        batch: usize,
        q_len: usize,
        k_len: usize,
        allowed: Option<Arc<Vec<bool>>>,
    ) -> Result<Var> {
        let q = self.wq.forward(tape, q_in)?;
        let k = self.wk.forward(tape, kv_in)?;
        let v = self.wv.forward(tape, kv_in)?;
        let spec = AttentionSpec {
            batch,
            heads: self.heads,
            q_len,
            k_len,
            dim: self.wq.fan_out,
            allowed,
        };
        let a = tape.attention(q, k, v, spec)?;
        self.wo.forward(tape, a)
    }
}

/// Pre-norm transformer block: masked self-attention then a GELU MLP,
/// each wrapped in a residual.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), (dim, ff_dim, dim), rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        batch: usize,
        len: usize,
        allowed: Option<Arc<Vec<bool>>>,
        dropout: f64,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let h = self.norm1.forward(tape, x)?;
        let mut a = self.attn.forward(tape, h, h, batch, len, len, allowed)?;
        if let Some(mut r) = rng.as_deref_mut() {
            a = tape.dropout(a, dropout, &mut r);
        }
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, x)?;
        let mut m = self.mlp.forward(tape, h)?;
        if let Some(mut r) = rng {
            m = tape.dropout(m, dropout, &mut r);
        }
        tape.add(x, m)
    }
}

/// Single cross-attention layer with a residual onto the queries.
///
/// Keys are put in a canonical order before attending, which makes the
/// result bitwise independent of how the key rows were stored.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub norm_q: Norm,
    pub norm_kv: Norm,
    pub attn: Attention,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm_q: Norm::new(store, &format!("{name}.norm_q"), dim),
            norm_kv: Norm::new(store, &format!("{name}.norm_kv"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
        }
    }

    /// `queries` is `[batch·q_len × D]`, `keys` is `[batch·k_len × D]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        queries: Var,
        keys: Var,
        batch: usize,
        q_len: usize,
        k_len: usize,
    ) -> Result<Var> {
        if k_len == 0 {
            return Err(Error::contract("cross-attention needs at least one key"));
        }
        let order = canonical_order(tape.value(keys), batch, k_len);
        let keys = tape.gather_rows(keys, &order)?;
        let q = self.norm_q.forward(tape, queries)?;
        let kv = self.norm_kv.forward(tape, keys)?;
        let a = self.attn.forward(tape, q, kv, batch, q_len, k_len, None)?;
        tape.add(queries, a)
    }
}

/// Per-sequence lexicographic order of rows, ties by storage position.
fn canonical_order<T: Real>(x: &Tensor<T>, batch: usize, len: usize) -> Vec<usize> {
    let cols = x.cols();
    let mut out = Vec::with_capacity(batch * len);
    for b in 0..batch {
        let mut idx: Vec<usize> = (b * len..(b + 1) * len).collect();
        idx.sort_by(|&i, &j| {
            let (ri, rj) = (&x.data()[i * cols..][..cols], &x.data()[j * cols..][..cols]);
            ri.iter()
                .zip(rj)
                .map(|(a, c)| a.as_f64().total_cmp(&c.as_f64()))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(i.cmp(&j))
        });
        out.extend(idx);
    }
    out
}

/// Feature-wise modulation `(1 + γ(e)) ⊙ q + β(e)` with independent,
/// zero-initialized γ and β projections.
#[derive(Clone, Debug)]
pub struct Film {
    pub gamma: Linear,
    pub beta: Linear,
}

impl Film {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: Linear::zeroed(store, &format!("{name}.gamma"), dim, dim),
            beta: Linear::zeroed(store, &format!("{name}.beta"), dim, dim),
        }
    }

    /// `q` is `[batch·n × D]`; `ego` is `[batch × D]`, one row per sequence.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, q: Var, ego: Var, n: usize) -> Result<Var> {
        let g = self.gamma.forward(tape, ego)?;
        let b = self.beta.forward(tape, ego)?;
        let g = repeat_rows(tape, g, n)?;
        let b = repeat_rows(tape, b, n)?;
        film_apply(tape, q, g, b)
    }
}

/// `(1 + γ) ⊙ q + β` for same-shaped `q`, `γ`, `β`.
pub fn film_apply<T: Real>(tape: &mut Tape<T>, q: Var, gamma: Var, beta: Var) -> Result<Var> {
    let qg = tape.mul(q, gamma)?;
    let s = tape.add(q, qg)?;
    tape.add(s, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn film_hand_example() {
        let mut tape = Tape::<f64>::detached();
        let q = tape.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let g = tape.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::new(&[1, 2], vec![0.5, -1.0]).unwrap());
        let out = film_apply(&mut tape, q, g, b).unwrap();
        assert_eq!(tape.data(out), &[2.5, 1.0]);
    }

    #[test]
    fn film_starts_as_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let film = Film::new(&mut store, "film", 4);
        assert_ne!(film.gamma.w, film.beta.w);
        let mut tape = Tape::new(&store);
        let qd: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = tape.constant(Tensor::new(&[3, 4], qd.clone()).unwrap());
        let e = tape.constant(Tensor::new(&[1, 4], vec![0.3, -2.0, 1.0, 5.0]).unwrap());
        let out = film.forward(&mut tape, q, e, 3).unwrap();
        assert_eq!(tape.data(out), &qd[..]);
    }

    fn cross_setup(k_len: usize) -> (ParamStore, CrossAttention, Vec<f32>, Vec<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let ca = CrossAttention::new(&mut store, "ca", 8, 2, &mut rng);
        let q = (0..3 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k = (0..k_len * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (store, ca, q, k)
    }

    #[test]
    fn single_key_gets_all_weight() {
        let (store, ca, q, k) = cross_setup(1);
        let mut tape = Tape::new(&store);
        let qv = tape.constant(Tensor::new(&[3, 8], q).unwrap());
        let kv = tape.constant(Tensor::new(&[1, 8], k).unwrap());
        let out = ca.forward(&mut tape, qv, kv, 1, 3, 1).unwrap();
        // With one key every query reads the same projected value row.
        let kn = ca.norm_kv.forward(&mut tape, kv).unwrap();
        let v = ca.attn.wv.forward(&mut tape, kn).unwrap();
        let o = ca.attn.wo.forward(&mut tape, v).unwrap();
        let o = repeat_rows(&mut tape, o, 3).unwrap();
        let expect = tape.add(qv, o).unwrap();
        for (a, b) in tape.data(out).iter().zip(tape.data(expect)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn key_order_does_not_matter() {
        let (store, ca, q, k) = cross_setup(5);
        let run = |perm: &[usize]| {
            let mut tape = Tape::new(&store);
            let mut kd = Vec::new();
            for &p in perm {
                kd.extend_from_slice(&k[p * 8..(p + 1) * 8]);
            }
            let qv = tape.constant(Tensor::new(&[3, 8], q.clone()).unwrap());
            let kv = tape.constant(Tensor::new(&[5, 8], kd).unwrap());
            let out = ca.forward(&mut tape, qv, kv, 1, 3, 5).unwrap();
            tape.data(out).to_vec()
        };
        assert_eq!(run(&[0, 1, 2, 3, 4]), run(&[3, 1, 4, 0, 2]));
        let dup = |perm: &[usize]| {
            let mut tape = Tape::new(&store);
            let mut kd = Vec::new();
            for &p in perm {
                kd.extend_from_slice(&k[p * 8..(p + 1) * 8]);
            }
            let qv = tape.constant(Tensor::new(&[3, 8], q.clone()).unwrap());
            let kv = tape.constant(Tensor::new(&[4, 8], kd).unwrap());
            let out = ca.forward(&mut tape, qv, kv, 1, 3, 4).unwrap();
            tape.data(out).to_vec()
        };
        assert_eq!(dup(&[0, 0, 1, 2]), dup(&[1, 0, 2, 0]));
    }

    #[test]
    fn zero_keys_is_a_contract_error() {
        let (store, ca, q, _) = cross_setup(1);
        let mut tape = Tape::new(&store);
        let qv = tape.constant(Tensor::new(&[3, 8], q).unwrap());
        let kv = tape.constant(Tensor::<f32>::zeros(&[0, 8]));
        assert!(matches!(
            ca.forward(&mut tape, qv, kv, 1, 3, 0),
            Err(Error::Contract(_))
        ));
    }
}
