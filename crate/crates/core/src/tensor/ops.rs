use rand::Rng;

use super::attention::{self, AttentionSpec};
use super::tape::{gelu, Op};
use super::{softmax_rows, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

impl<'p, T: Real> Tape<'p, T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(src.shape(), data).expect("shape preserved");
        self.push(t, op)
    }

    /// `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.data(a), false, self.data(b), false, T::zero(), &mut out);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, m, k, n }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<usize> {
        let cols = self.value(a).cols();
        if self.value(row).numel() != cols {
            return Err(Error::shape(op, self.shape(a), self.shape(row)));
        }
        Ok(cols)
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.check_row("add_row", a, row)?;
        let r = self.data(row);
        let mut data = self.data(a).to_vec();
        for chunk in data.chunks_mut(cols) {
            for (d, &x) in chunk.iter_mut().zip(r) {
                *d += x;
            }
        }
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::AddRow { a, row }))
    }

    /// Multiplies every row of `a` elementwise by a row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.check_row("mul_row", a, row)?;
        let r = self.data(row);
        let mut data = self.data(a).to_vec();
        for chunk in data.chunks_mut(cols) {
            for (d, &x) in chunk.iter_mut().zip(r) {
                *d *= x;
            }
        }
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::MulRow { a, row }))
    }

    /// Scales row `i` of `a` by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let rows = self.value(a).rows();
        if self.value(s).numel() != rows {
            return Err(Error::shape("scale_rows", self.shape(a), self.shape(s)));
        }
        let cols = self.value(a).cols();
        let sv = self.data(s);
        let mut data = self.data(a).to_vec();
        for (chunk, &f) in data.chunks_mut(cols).zip(sv) {
            for d in chunk {
                *d *= f;
            }
        }
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::ScaleRows { a, s }))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, T::ln, Op::Log(a))
    }

    pub fn powf(&mut self, a: Var, p: T) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let data = softmax_rows(src.data(), src.cols())?;
        let t = Tensor::new(src.shape(), data)?;
        Ok(self.push(t, Op::Softmax(a)))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let cols = src.cols();
        let mut data = Vec::with_capacity(src.numel());
        for (r, row) in src.data().chunks(cols).enumerate() {
            let max = row
                .iter()
                .copied()
                .fold(T::neg_infinity(), |m, v| if v > m { v } else { m });
            if max == T::neg_infinity() {
                return Err(Error::FullyMaskedRow { row: r });
            }
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            data.extend(row.iter().map(|&x| x - lse));
        }
        let t = Tensor::new(src.shape(), data)?;
        Ok(self.push(t, Op::LogSoftmax(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::lit(self.value(a).numel() as f64);
        let s = self.data(a).iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Rows of the 2-D view of `a` at `idx` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let (rows, cols) = (src.rows(), src.cols());
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::contract(format!(
                    "gather_rows index {i} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(src.row(i));
        }
        let t = Tensor::new(&[idx.len(), cols], data)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Stacks 2-D tensors with a common column count.
    pub fn concat_rows(&mut self, vs: &[Var]) -> Result<Var> {
        let first = vs
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in vs {
            let t = self.value(v);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", self.shape(*first), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(t, Op::ConcatRows(vs.to_vec())))
    }

    /// Elements at flat indices, as a 1-D tensor.
    pub fn select(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let src = self.data(a);
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            data.push(*src.get(i).ok_or_else(|| {
                Error::contract(format!("select index {i} out of range {}", src.len()))
            })?);
        }
        let t = Tensor::new(&[idx.len()], data)?;
        Ok(self.push(
            t,
            Op::Select {
                a,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let cols = self.check_row("layer_norm", x, gamma)?;
        self.check_row("layer_norm", x, beta)?;
        let src = self.value(x);
        let (gv, bv) = (self.data(gamma), self.data(beta));
        let nf = T::lit(cols as f64);
        let mut xhat = Vec::with_capacity(src.numel());
        let mut rstd = Vec::with_capacity(src.rows());
        let mut out = Vec::with_capacity(src.numel());
        for row in src.data().chunks(cols) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for ((&v, &g), &b) in row.iter().zip(gv).zip(bv) {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g + b);
            }
        }
        let t = Tensor::new(src.shape(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Multi-head attention; `q` is `[batch·q_len × dim]`, `k`/`v` are
    /// `[batch·k_len × dim]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        spec.validate()?;
        let qs = [spec.batch * spec.q_len, spec.dim];
        let ks = [spec.batch * spec.k_len, spec.dim];
        if self.shape(q) != qs {
            return Err(Error::shape("attention q", self.shape(q), &qs));
        }
        for t in [k, v] {
            if self.shape(t) != ks {
                return Err(Error::shape("attention k/v", self.shape(t), &ks));
            }
        }
        let (out, probs) = attention::forward(&spec, self.data(q), self.data(k), self.data(v));
        let t = Tensor::new(&qs, out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
        ))
    }

    /// Forward value is `hard`; the gradient passes to `soft` unchanged.
    pub fn straight_through(&mut self, hard: Tensor<T>, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::shape("straight_through", hard.shape(), self.shape(soft)));
        }
        Ok(self.push(hard, Op::StraightThrough { soft }))
    }

    /// Elementwise smooth-L1 with threshold `delta`.
    pub fn huber(&mut self, a: Var, delta: T) -> Var {
        let half = T::lit(0.5);
        self.unary(
            a,
            move |x| {
                if x.abs() < delta {
                    half * x * x
                } else {
                    delta * (x.abs() - half * delta)
                }
            },
            Op::Huber { a, delta },
        )
    }

    /// Means over consecutive groups of `group` rows.
    pub fn group_mean(&mut self, a: Var, group: usize) -> Result<Var> {
        let src = self.value(a);
        let (rows, cols) = (src.rows(), src.cols());
        if group == 0 || rows % group != 0 {
            return Err(Error::contract(format!(
                "group_mean: {rows} rows not divisible into groups of {group}"
            )));
        }
        let inv = T::one() / T::lit(group as f64);
        let mut data = vec![T::zero(); rows / group * cols];
        for (r, row) in src.data().chunks(cols).enumerate() {
            let dst = &mut data[(r / group) * cols..][..cols];
            for (d, &x) in dst.iter_mut().zip(row) {
                *d += x * inv;
            }
        }
        let t = Tensor::new(&[rows / group, cols], data)?;
        Ok(self.push(t, Op::GroupMean { a, group }))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl Rng) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let scale = T::lit(1.0 / (1.0 - rate));
        let keep: Vec<T> = (0..self.value(a).numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let data = zip_map(self.data(a), &keep, |x, m| x * m);
        let t = Tensor::new(self.shape(a), data).expect("shape preserved");
        self.push(t, Op::Dropout { a, keep })
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
