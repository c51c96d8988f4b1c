use crate::error::{Result, TensorError};
use crate::kernels::{axis_split, gemm_acc, inverse_perm, permute};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnKind {
    Neg,
    Tanh,
    Sigmoid,
    Relu,
    Square,
    Sqrt,
    Exp,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    AddConst(Var),
    MulConst(Var, f64),
    Unary(UnKind, Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        a: Var,
        axis: usize,
        mean: bool,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Normalize {
        a: Var,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Define-by-run computation record.
///
/// Nodes are appended in evaluation order, so the node list is always a valid
/// topological order of the graph. One tape serves one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward root with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Drops all accumulated leaf gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    // ---- elementwise binary ------------------------------------------------

    fn bcast_of(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(Bcast::Same)
        } else if self.value(b).numel() == 1 {
            Ok(Bcast::Scalar)
        } else if sa.len() >= 2 && sb.len() == 1 && sb[0] == sa[sa.len() - 1] {
            Ok(Bcast::Row)
        } else {
            Err(TensorError::shape(op, sa, sb))
        }
    }

    fn binary(&mut self, op: &'static str, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let bcast = self.bcast_of(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let width = bv.len();
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let data: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bcast {
                    Bcast::Same => bv[i],
                    Bcast::Scalar => bv[0],
                    Bcast::Row => bv[i % width],
                };
                f(x, y)
            })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary { kind, a, b, bcast }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", BinKind::Div, a, b)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x + c).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::AddConst(a), rg)
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::MulConst(a, c), rg)
    }

    // ---- elementwise unary -------------------------------------------------

    fn unary(&mut self, kind: UnKind, a: Var) -> Var {
        let v = self.value(a);
        let f = |x: f64| match kind {
            UnKind::Neg => -x,
            UnKind::Tanh => x.tanh(),
            UnKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            UnKind::Relu => x.max(0.0),
            UnKind::Square => x * x,
            UnKind::Sqrt => x.sqrt(),
            UnKind::Exp => x.exp(),
        };
        let data = v.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Unary(kind, a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnKind::Neg, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnKind::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnKind::Relu, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnKind::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnKind::Sqrt, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnKind::Exp, a)
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
            false,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Batched `[B×m×k] · [B×k×n] → [B×m×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::shape("bmm", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            gemm_acc(
                &ad[t * m * k..(t + 1) * m * k],
                &bd[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
                false,
                false,
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            value,
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(TensorError::dim("mean", "empty tensor"));
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let op = if mean { "mean_axis" } else { "sum_axis" };
        if axis >= shape.len() {
            return Err(TensorError::dim(op, format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        if n == 0 {
            return Err(TensorError::dim(op, "empty axis"));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / n as f64;
            out.iter_mut().for_each(|x| *x *= inv);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SumAxis { a, axis, mean }, rg))
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Averages over `axis`, removing it from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    // ---- softmax / normalisation -------------------------------------------

    /// Softmax along `axis` with max-subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, None)
    }

    /// Softmax along `axis` restricted to entries where `mask` is true.
    ///
    /// `mask` has one entry per element of `a`. Masked-out entries are exactly
    /// zero in the output; every softmax lane needs at least one selected entry.
    pub fn softmax_masked(&mut self, a: Var, axis: usize, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(TensorError::dim(
                "softmax_masked",
                format!("mask of {} for {} elements", mask.len(), self.value(a).numel()),
            ));
        }
        self.softmax_impl(a, axis, Some(mask))
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::dim("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        if n == 0 {
            return Err(TensorError::dim("softmax", "empty axis"));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        let keep = |idx: usize| mask.map_or(true, |m| m[idx]);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    if keep(at(j)) {
                        mx = mx.max(src[at(j)]);
                    }
                }
                if mx == f64::NEG_INFINITY {
                    return Err(TensorError::dim("softmax", "lane with no selected entries"));
                }
                let mut total = 0.0;
                for j in 0..n {
                    if keep(at(j)) {
                        let e = (src[at(j)] - mx).exp();
                        out[at(j)] = e;
                        total += e;
                    }
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax { a, axis }, rg))
    }

    /// Normalises each lane of the last axis to zero mean and unit variance.
    pub fn normalize_last(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| TensorError::dim("normalize", "scalar input"))?;
        if n == 0 {
            return Err(TensorError::dim("normalize", "empty axis"));
        }
        let src = self.value(a).data();
        let rows = src.len() / n;
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, x) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (x - mu) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Normalize { a, inv_std }, rg))
    }

    // ---- shape manipulation ------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::dim(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let (data, out_shape) = permute(self.value(a).data(), shape, perm);
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::dim("transpose", "needs at least two axes"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let w = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Keeps indices `start..end` of `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(TensorError::dim(
                "slice",
                format!("range {start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let w = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&src[from..from + w * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = w;
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Slice { a, axis, start }, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates `d root / d leaf` into every gradient-requiring leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::Contract(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((idx, g));
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        for (idx, g) in leaf_grads {
            let shape = self.nodes[idx].value.shape().to_vec();
            self.nodes[idx].grad = Some(Tensor::new(shape, g)?);
        }
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, bcast } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let width = bv.len();
                let ridx = |i: usize| match bcast {
                    Bcast::Same => i,
                    Bcast::Scalar => 0,
                    Bcast::Row => i % width,
                };
                acc(*a, &mut |ga| {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += match kind {
                            BinKind::Add | BinKind::Sub => *gi,
                            BinKind::Mul => gi * bv[ridx(i)],
                            BinKind::Div => gi / bv[ridx(i)],
                        };
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, gi) in g.iter().enumerate() {
                        let y = bv[ridx(i)];
                        gb[ridx(i)] += match kind {
                            BinKind::Add => *gi,
                            BinKind::Sub => -gi,
                            BinKind::Mul => gi * av[i],
                            BinKind::Div => -gi * av[i] / (y * y),
                        };
                    }
                });
            }
            Op::AddConst(a) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
            }),
            Op::MulConst(a, c) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * c);
            }),
            Op::Unary(kind, a) => {
                let xv = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        let d = match kind {
                            UnKind::Neg => -1.0,
                            UnKind::Tanh => 1.0 - out[i] * out[i],
                            UnKind::Sigmoid => out[i] * (1.0 - out[i]),
                            UnKind::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnKind::Square => 2.0 * xv[i],
                            UnKind::Sqrt => 0.5 / out[i],
                            UnKind::Exp => out[i],
                        };
                        ga[i] += g[i] * d;
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, &mut |ga| gemm_acc(g, bv, ga, *m, *n, *k, false, true));
                acc(*b, &mut |gb| gemm_acc(av, g, gb, *k, *m, *n, true, false));
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let (sa, sb, sg) = (m * k, k * n, m * n);
                acc(*a, &mut |ga| {
                    for t in 0..*batch {
                        gemm_acc(
                            &g[t * sg..(t + 1) * sg],
                            &bv[t * sb..(t + 1) * sb],
                            &mut ga[t * sa..(t + 1) * sa],
                            *m,
                            *n,
                            *k,
                            false,
                            true,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for t in 0..*batch {
                        gemm_acc(
                            &av[t * sa..(t + 1) * sa],
                            &g[t * sg..(t + 1) * sg],
                            &mut gb[t * sb..(t + 1) * sb],
                            *k,
                            *m,
                            *n,
                            true,
                            false,
                        );
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let c = g[0] / nodes[a.0].value.numel() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += c));
            }
            Op::SumAxis { a, axis, mean } => {
                let (outer, n, inner) = axis_split(nodes[a.0].value.shape(), *axis);
                let scale = if *mean { 1.0 / n as f64 } else { 1.0 };
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                ga[(o * n + j) * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let (outer, n, inner) = axis_split(nodes[a.0].value.shape(), *axis);
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| out[at(j)] * g[at(j)]).sum();
                            for j in 0..n {
                                ga[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Normalize { a, inv_std } => {
                let n = *nodes[a.0].value.shape().last().unwrap_or(&1);
                acc(*a, &mut |ga| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let span = r * n..(r + 1) * n;
                        let gr = &g[span.clone()];
                        let yr = &out[span.clone()];
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for (j, dst) in ga[span].iter_mut().enumerate() {
                            *dst += is * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
            }),
            Op::Permute(a, perm) => {
                let inv = inverse_perm(perm);
                let (back, _) = permute(g, node.value.shape(), &inv);
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(&back).for_each(|(x, gi)| *x += gi);
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.shape()[*axis];
                    let off = offset;
                    acc(*p, &mut |gp| {
                        for o in 0..outer {
                            let src = (o * total + off) * inner;
                            let dst = o * w * inner;
                            for q in 0..w * inner {
                                gp[dst + q] += g[src + q];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, n, inner) = axis_split(nodes[a.0].value.shape(), *axis);
                let w = node.value.shape()[*axis];
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * w * inner;
                        for q in 0..w * inner {
                            ga[dst + q] += g[src + q];
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_dot() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let r = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let col = t.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let d = t.matmul(r, col).unwrap();
        assert_eq!(t.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(err, TensorError::shape("matmul", &[2, 3], &[2, 3]));
        assert!(err.to_string().contains("[2, 3] and [2, 3]"));
    }

    #[test]
    fn softmax_uniform_and_shift() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let s = t.softmax(x, 0).unwrap();
        for v in t.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        for c in [-50.0, 0.0, 3.25, 700.0] {
            let x = t.constant(Tensor::vector(vec![c, c + 2f64.ln()]));
            let s = t.softmax(x, 0).unwrap();
            let d = t.value(s).data();
            assert!((d[0] - 1.0 / 3.0).abs() < 1e-12, "{c}: {d:?}");
            assert!((d[1] - 2.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_empty_axis_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[0]));
        assert!(matches!(t.softmax(x, 0), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn masked_softmax_zeroes_unselected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![2.0, 1.0, 0.0, -1.0]));
        let s = t.softmax_masked(x, 0, &[true, true, false, false]).unwrap();
        let d = t.value(s).data().to_vec();
        assert_eq!(d[2], 0.0);
        assert_eq!(d[3], 0.0);
        assert!((d[0] + d[1] - 1.0).abs() < 1e-15);
        // gradient does not leak into unselected logits
        let w = t.constant(Tensor::vector(vec![1.0, -2.0, 5.0, 7.0]));
        let p = t.mul(s, w).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        let g = t.grad(x).unwrap().data();
        assert_eq!(g[2], 0.0);
        assert_eq!(g[3], 0.0);
        assert!((g[0] + g[1]).abs() < 1e-15);
    }

    #[test]
    fn elementwise_basics() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let th = t.tanh(z);
        assert_eq!(t.value(th).item(), 0.0);
        let v = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let m = t.mean(v).unwrap();
        assert_eq!(t.value(m).item(), 2.0);

        let x = t.param(Tensor::vector(vec![3.0]));
        let sq = t.square(x);
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = t.square(x);
        let l = t.sum(sq);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let c = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = t.mul(x, c).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_contract() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = t.square(x);
        assert!(matches!(t.backward(sq), Err(TensorError::Contract(_))));
        let l = t.sum(sq);
        t.backward(l).unwrap();
        assert!(matches!(t.backward(l), Err(TensorError::Contract(_))));
        t.zero_grad();
        assert!(t.grad(x).is_none());
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn broadcast_rules() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let row = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = t.constant(Tensor::scalar(2.0));
        let bad = t.constant(Tensor::zeros(&[2]));
        let r = t.add(a, row).unwrap();
        assert_eq!(t.value(r).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let r2 = t.add(r, s).unwrap();
        assert_eq!(t.value(r2).data()[0], 3.0);
        assert!(matches!(t.add(a, bad), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn permute_concat_slice_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        let xt = t.transpose(x).unwrap();
        assert_eq!(t.shape(xt), &[3, 2]);
        assert_eq!(t.value(xt).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let c = t.concat(&[x, x], 1).unwrap();
        assert_eq!(t.value(c).data(), &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 3.0, 4.0, 5.0]);
        let s = t.slice(c, 1, 2, 4).unwrap();
        assert_eq!(t.value(s).data(), &[2.0, 0.0, 5.0, 3.0]);
        let r = t.sum_axis(x, 0).unwrap();
        assert_eq!(t.value(r).data(), &[3.0, 5.0, 7.0]);
        let r = t.mean_axis(x, 1).unwrap();
        assert_eq!(t.value(r).data(), &[1.0, 4.0]);
    }
}
