use std::borrow::Cow;
use std::collections::HashMap;

use super::attention::{self, AttentionSpec};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T> {
    Leaf,
    Param,
    Constant,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        a: Var,
        row: Var,
    },
    MulRow {
        a: Var,
        row: Var,
    },
    ScaleRows {
        a: Var,
        s: Var,
    },
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, T),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Select {
        a: Var,
        idx: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<T>,
    },
    StraightThrough {
        soft: Var,
    },
    Huber {
        a: Var,
        delta: T,
    },
    GroupMean {
        a: Var,
        group: usize,
    },
    Reshape(Var),
    Dropout {
        a: Var,
        keep: Vec<T>,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param | Constant => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            AddRow { a, row } | MulRow { a, row } => vec![*a, *row],
            ScaleRows { a, s } => vec![*a, *s],
            Scale(a, _) | AddScalar(a) | Gelu(a) | Relu(a) | Exp(a) | Log(a) | Powf(a, _) => {
                vec![*a]
            }
            Softmax(a) | LogSoftmax(a) | Sum(a) | Mean(a) | Reshape(a) => vec![*a],
            GatherRows { a, .. } | Select { a, .. } | Huber { a, .. } | GroupMean { a, .. } => {
                vec![*a]
            }
            Dropout { a, .. } => vec![*a],
            ConcatRows(vs) => vs.clone(),
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            StraightThrough { soft } => vec![*soft],
        }
    }
}

struct Node<'p, T: Real> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations in execution order so gradients can be replayed backwards.
///
/// Nodes are appended as ops run, so every node's parents precede it. A tape
/// borrows the parameter store it reads from; call [`Tape::backward`] to get
/// [`Gradients`], then [`Gradients::accumulate_into`] once the tape is dropped.
pub struct Tape<'p, T: Real = f32> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<'p, T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    /// A tape with no parameter store; inputs come from [`Tape::leaf`].
    pub fn detached() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.data(v)[0]
    }

    /// Input tensor; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs = tensor.requires_grad();
        self.nodes.push(Node {
            value: Cow::Owned(tensor),
            op: Op::Leaf,
            needs_grad: needs,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input tensor that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(tensor),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter from the attached store. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self
            .params
            .expect("tape has no parameter store attached");
        let tensor = store.get(id);
        self.nodes.push(Node {
            value: Cow::Borrowed(tensor),
            op: Op::Param,
            needs_grad: tensor.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                }
                Op::Constant => {}
                op => self.backward_op(op, i, &g, &mut grads),
            }
        }

        let mut params = Vec::new();
        for (&id, &v) in &self.param_vars {
            if self.nodes[v.0].needs_grad {
                let n = self.nodes[v.0].value.numel();
                let g = grads
                    .get_mut(v.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![T::zero(); n]);
                params.push((id, g));
            }
        }
        params.sort_by_key(|(id, _)| *id);
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.needs_grad)
            .map(|(i, n)| {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![T::zero(); n.value.numel()]);
                (i, g)
            })
            .collect();
        Ok(Gradients { params, leaves })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_op(&self, op: &Op<T>, out: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.as_ref();
        let out_val = self.nodes[out].value.as_ref();
        match op {
            Op::Leaf | Op::Param | Op::Constant => unreachable!(),
            Op::MatMul { a, b, m, k, n } => {
                if self.needs(*a) {
                    let ga = buf(grads, *a, m * k);
                    // ∂a = g·bᵀ
                    T::gemm(*m, *n, *k, g, false, val(*b).data(), true, T::one(), ga);
                }
                if self.needs(*b) {
                    let gb = buf(grads, *b, k * n);
                    // ∂b = aᵀ·g
                    T::gemm(*k, *m, *n, val(*a).data(), true, g, false, T::one(), gb);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        add_into(buf(grads, *v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(buf(grads, *a, g.len()), g);
                }
                if self.needs(*b) {
                    for (d, &x) in buf(grads, *b, g.len()).iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if self.needs(*a) {
                    for ((d, &x), &y) in buf(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                }
                if self.needs(*b) {
                    for ((d, &x), &y) in buf(grads, *b, g.len()).iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                }
            }
            Op::AddRow { a, row } => {
                let cols = val(*row).numel();
                if self.needs(*a) {
                    add_into(buf(grads, *a, g.len()), g);
                }
                if self.needs(*row) {
                    let gr = buf(grads, *row, cols);
                    for chunk in g.chunks(cols) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::MulRow { a, row } => {
                let rv = val(*row).data();
                let cols = rv.len();
                if self.needs(*a) {
                    let ga = buf(grads, *a, g.len());
                    for (dst, src) in ga.chunks_mut(cols).zip(g.chunks(cols)) {
                        for ((d, &x), &r) in dst.iter_mut().zip(src).zip(rv) {
                            *d += x * r;
                        }
                    }
                }
                if self.needs(*row) {
                    let av = val(*a).data();
                    let gr = buf(grads, *row, cols);
                    for (src, arow) in g.chunks(cols).zip(av.chunks(cols)) {
                        for ((d, &x), &y) in gr.iter_mut().zip(src).zip(arow) {
                            *d += x * y;
                        }
                    }
                }
            }
            Op::ScaleRows { a, s } => {
                let sv = val(*s).data();
                let cols = g.len() / sv.len();
                if self.needs(*a) {
                    let ga = buf(grads, *a, g.len());
                    for ((dst, src), &f) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(sv) {
                        for (d, &x) in dst.iter_mut().zip(src) {
                            *d += x * f;
                        }
                    }
                }
                if self.needs(*s) {
                    let av = val(*a).data();
                    let gs = buf(grads, *s, sv.len());
                    for ((d, src), arow) in gs.iter_mut().zip(g.chunks(cols)).zip(av.chunks(cols))
                    {
                        *d += src.iter().zip(arow).map(|(&x, &y)| x * y).sum();
                    }
                }
            }
            Op::Scale(a, c) => {
                for (d, &x) in buf(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += x * *c;
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                add_into(buf(grads, *a, g.len()), g);
            }
            Op::Gelu(a) => {
                let av = val(*a).data();
                for ((d, &x), &gv) in buf(grads, *a, g.len()).iter_mut().zip(av).zip(g) {
                    *d += gv * gelu_grad(x);
                }
            }
            Op::Relu(a) => {
                let av = val(*a).data();
                for ((d, &x), &gv) in buf(grads, *a, g.len()).iter_mut().zip(av).zip(g) {
                    if x > T::zero() {
                        *d += gv;
                    }
                }
            }
            Op::Exp(a) => {
                let yv = out_val.data();
                for ((d, &y), &gv) in buf(grads, *a, g.len()).iter_mut().zip(yv).zip(g) {
                    *d += gv * y;
                }
            }
            Op::Log(a) => {
                let av = val(*a).data();
                for ((d, &x), &gv) in buf(grads, *a, g.len()).iter_mut().zip(av).zip(g) {
                    *d += gv / x;
                }
            }
            Op::Powf(a, p) => {
                let av = val(*a).data();
                for ((d, &x), &gv) in buf(grads, *a, g.len()).iter_mut().zip(av).zip(g) {
                    if x != T::zero() || *p >= T::one() {
                        *d += gv * *p * x.powf(*p - T::one());
                    }
                }
            }
            Op::Softmax(a) => {
                let y = out_val.data();
                let cols = out_val.cols();
                let ga = buf(grads, *a, g.len());
                for ((dst, yr), gr) in ga.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((d, &p), &q) in dst.iter_mut().zip(yr).zip(gr) {
                        *d += p * (q - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = out_val.data();
                let cols = out_val.cols();
                let ga = buf(grads, *a, g.len());
                for ((dst, yr), gr) in ga.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols))
                {
                    let total: T = gr.iter().copied().sum();
                    for ((d, &ly), &q) in dst.iter_mut().zip(yr).zip(gr) {
                        *d += q - ly.exp() * total;
                    }
                }
            }
            Op::Sum(a) => {
                let n = val(*a).numel();
                for d in buf(grads, *a, n).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(a) => {
                let n = val(*a).numel();
                let s = g[0] / T::lit(n as f64);
                for d in buf(grads, *a, n).iter_mut() {
                    *d += s;
                }
            }
            Op::GatherRows { a, idx } => {
                let av = val(*a);
                let cols = av.cols();
                let ga = buf(grads, *a, av.numel());
                for (r, &src) in idx.iter().enumerate() {
                    add_into(
                        &mut ga[src * cols..(src + 1) * cols],
                        &g[r * cols..(r + 1) * cols],
                    );
                }
            }
            Op::ConcatRows(vs) => {
                let mut off = 0;
                for v in vs {
                    let n = val(*v).numel();
                    if self.needs(*v) {
                        add_into(buf(grads, *v, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Select { a, idx } => {
                let n = val(*a).numel();
                let ga = buf(grads, *a, n);
                for (&i, &gv) in idx.iter().zip(g) {
                    ga[i] += gv;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = val(*gamma).data();
                let cols = gam.len();
                let nf = T::lit(cols as f64);
                if self.needs(*gamma) {
                    let gg = buf(grads, *gamma, cols);
                    for (gr, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((d, &q), &h) in gg.iter_mut().zip(gr).zip(xr) {
                            *d += q * h;
                        }
                    }
                }
                if self.needs(*beta) {
                    let gb = buf(grads, *beta, cols);
                    for gr in g.chunks(cols) {
                        add_into(gb, gr);
                    }
                }
                if self.needs(*x) {
                    let gx = buf(grads, *x, g.len());
                    let mut dxhat = vec![T::zero(); cols];
                    for (((dst, gr), xr), &rs) in gx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(xhat.chunks(cols))
                        .zip(rstd)
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for (((dh, &q), &gm), &h) in
                            dxhat.iter_mut().zip(gr).zip(gam).zip(xr)
                        {
                            *dh = q * gm;
                            m1 += *dh;
                            m2 += *dh * h;
                        }
                        m1 /= nf;
                        m2 /= nf;
                        for ((d, &dh), &h) in dst.iter_mut().zip(&dxhat).zip(xr) {
                            *d += rs * (dh - m1 - h * m2);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                let grads_qkv = attention::backward(
                    spec,
                    g,
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    probs,
                    [self.needs(*q), self.needs(*k), self.needs(*v)],
                );
                for (var, gv) in [q, k, v].into_iter().zip(grads_qkv) {
                    if let Some(gv) = gv {
                        add_into(buf(grads, *var, gv.len()), &gv);
                    }
                }
            }
            Op::StraightThrough { soft } => {
                add_into(buf(grads, *soft, g.len()), g);
            }
            Op::Huber { a, delta } => {
                let av = val(*a).data();
                for ((d, &x), &gv) in buf(grads, *a, g.len()).iter_mut().zip(av).zip(g) {
                    let slope = if x.abs() < *delta {
                        x
                    } else {
                        *delta * x.signum()
                    };
                    *d += gv * slope;
                }
            }
            Op::GroupMean { a, group } => {
                let av = val(*a);
                let cols = av.cols();
                let inv = T::one() / T::lit(*group as f64);
                let ga = buf(grads, *a, av.numel());
                for (gi, grow) in g.chunks(cols).enumerate() {
                    for r in 0..*group {
                        let row = gi * group + r;
                        for (d, &x) in ga[row * cols..(row + 1) * cols].iter_mut().zip(grow) {
                            *d += x * inv;
                        }
                    }
                }
            }
            Op::Dropout { a, keep } => {
                for ((d, &x), &m) in buf(grads, *a, g.len()).iter_mut().zip(g).zip(keep) {
                    *d += x * m;
                }
            }
        }
    }
}

fn buf<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(0.797_884_560_802_865_4);
    let u = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(0.797_884_560_802_865_4);
    let u = c * (x + T::lit(0.044715) * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0 * 0.044715) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

/// Result of [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    params: Vec<(ParamId, Vec<T>)>,
    leaves: Vec<(usize, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a [`Tape::leaf`] that requires grad.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves
            .iter()
            .find(|(i, _)| *i == v.0)
            .map(|(_, g)| g.as_slice())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    /// Adds into each parameter's gradient buffer. Every trainable tensor in
    /// the store ends up with a buffer; ones the loss never reached stay zero.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, g) in &self.params {
            store.get_mut(*id).accumulate_grad(g)?;
        }
        for t in store.tensors_mut() {
            if t.requires_grad() {
                t.ensure_grad();
            }
        }
        Ok(())
    }
}
