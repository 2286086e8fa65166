use super::{Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Patch extraction geometry over a channels-last `[T, F, C]` input.
///
/// Produces a `[out_t * out_f, kt * kf * C]` matrix whose columns are ordered
/// `(dt, df, c)`. Out-of-range taps read zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Unfold2d {
    pub in_t: usize,
    pub in_f: usize,
    pub channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad_before: (usize, usize),
    pub out_t: usize,
    pub out_f: usize,
}

impl Unfold2d {
    /// "Same" padding: `out = ceil(in / stride)`, with any odd padding on the
    /// trailing edge.
    pub fn same(
        in_t: usize,
        in_f: usize,
        channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Self {
        let axis = |len: usize, k: usize, s: usize| {
            let out = len.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(len);
            (out, total / 2)
        };
        let (out_t, pad_t) = axis(in_t, kernel.0, stride.0);
        let (out_f, pad_f) = axis(in_f, kernel.1, stride.1);
        Self {
            in_t,
            in_f,
            channels,
            kernel,
            stride,
            pad_before: (pad_t, pad_f),
            out_t,
            out_f,
        }
    }

    pub fn out_cols(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.channels
    }

    /// Visits every (output offset, input offset) pair of `channels`-long runs.
    fn for_each_run(&self, mut visit: impl FnMut(usize, usize)) {
        let c = self.channels;
        let cols = self.out_cols();
        for ot in 0..self.out_t {
            for of in 0..self.out_f {
                let row = (ot * self.out_f + of) * cols;
                for dt in 0..self.kernel.0 {
                    let it = (ot * self.stride.0 + dt) as isize - self.pad_before.0 as isize;
                    if it < 0 || it as usize >= self.in_t {
                        continue;
                    }
                    for df in 0..self.kernel.1 {
                        let jf = (of * self.stride.1 + df) as isize - self.pad_before.1 as isize;
                        if jf < 0 || jf as usize >= self.in_f {
                            continue;
                        }
                        let src = (it as usize * self.in_f + jf as usize) * c;
                        let dst = row + (dt * self.kernel.1 + df) * c;
                        visit(dst, src);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    BroadcastAdd(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    SoftmaxLastDim(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Sqrt(Var),
    Neg(Var),
    Scale(Var, f64),
    Unfold(Var, Unfold2d),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::BroadcastAdd(a, b) => vec![*a, *b],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { input, .. }
            | Op::Reshape(input)
            | Op::Transpose(input)
            | Op::Relu(input)
            | Op::Tanh(input)
            | Op::Sigmoid(input)
            | Op::Exp(input)
            | Op::Log(input)
            | Op::SoftmaxLastDim(input)
            | Op::Sum(input)
            | Op::Mean(input)
            | Op::Square(input)
            | Op::Sqrt(input)
            | Op::Neg(input)
            | Op::Scale(input, _)
            | Op::Unfold(input, _) => vec![*input],
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Arena-backed computation record.
///
/// Nodes are appended in evaluation order; a node's inputs always have
/// smaller indices, which is what lets [`Graph::backward`] run as a single
/// reverse sweep.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    kinks: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            kinks: 0xcbf2_9ce4_8422_2325,
        }
    }

    /// Hash of which ReLU inputs were positive so far. Two evaluations of
    /// the same function with equal signatures lie on the same linear piece
    /// of every ReLU.
    pub fn activation_signature(&self) -> u64 {
        self.kinks
    }

    /// Trainable input: gradients are collected for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded primitive applications that take part in backward.
    pub fn record_len(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad && !matches!(n.op, Op::Leaf))
            .count()
    }

    /// Gradient from the last [`Graph::backward`], if `v` received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let data = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), data.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, requires_grad, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        self.same_shape(name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.record(out, op))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&p| f(p)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.record(out, op)
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_map("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_map("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_map("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            (m, k, n),
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
        );
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.record(out, Op::MatMul(a, b)))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *inputs.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (p, q))| i == axis || p == q);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.record(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                reason: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.record(
            out,
            Op::Slice {
                input: a,
                axis,
                start,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.record(out, Op::Reshape(a)))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                reason: format!("expects a matrix, got {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        Ok(self.record(out, Op::Transpose(a)))
    }

    /// Adds a vector (`[n]` or `[1, n]`) to every length-`n` row of `x`.
    pub fn broadcast_add(&mut self, x: Var, v: Var) -> Result<Var, TensorError> {
        let (sx, sv) = (self.shape(x), self.shape(v));
        let n = *sx.last().unwrap_or(&0);
        let vec_like = match sv {
            [m] => *m == n,
            [1, m] => *m == n,
            _ => false,
        };
        if !vec_like {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_add",
                left: sx.to_vec(),
                right: sv.to_vec(),
            });
        }
        let bias = self.value(v).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(bias).for_each(|(p, q)| *p += q);
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.record(out, Op::BroadcastAdd(x, v)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // FNV-1a over the on/off state of every unit, in evaluation order
        self.kinks = self.nodes[a.index()]
            .value
            .data()
            .iter()
            .fold(self.kinks, |h, &p| {
                (h ^ u64::from(p > 0.0)).wrapping_mul(0x0100_0000_01b3)
            });
        self.map(a, |p| p.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |p| p * p, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.map(a, |p| -p, Op::Neg(a))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, |p| p * factor, Op::Scale(a, factor))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = *x.shape().last().expect("rank >= 1");
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.record(out, Op::SoftmaxLastDim(a))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.record(Tensor::scalar(total), Op::Sum(a))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let total: f64 = x.data().iter().sum();
        let mean = total / x.numel() as f64;
        self.record(Tensor::scalar(mean), Op::Mean(a))
    }

    /// Patch matrix for convolution as a matmul; see [`Unfold2d`].
    pub fn unfold(&mut self, a: Var, geom: Unfold2d) -> Result<Var, TensorError> {
        let expected = [geom.in_t, geom.in_f, geom.channels];
        if self.shape(a) != expected {
            return Err(TensorError::ShapeMismatch {
                op: "unfold",
                left: self.shape(a).to_vec(),
                right: expected.to_vec(),
            });
        }
        let c = geom.channels;
        let src = self.value(a).data();
        let mut data = vec![0.0; geom.out_t * geom.out_f * geom.out_cols()];
        geom.for_each_run(|dst, s| data[dst..dst + c].copy_from_slice(&src[s..s + c]));
        let out = Tensor::new(vec![geom.out_t * geom.out_f, geom.out_cols()], data)?;
        Ok(self.record(out, Op::Unfold(a, geom)))
    }

    /// Reverse sweep from a single-element output. Gradients accumulate
    /// additively into every node on a path to a trainable leaf; previous
    /// gradients are discarded.
    pub fn backward(&mut self, output: Var) -> Result<(), TensorError> {
        let out = &self.nodes[output.0];
        if out.value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: out.value.shape().to_vec(),
            });
        }
        if !out.requires_grad {
            return Err(TensorError::NoGradPath);
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; numel]);
        f(slot, &self.nodes);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        let out = Var(i);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, |d, _| add_into(d, g));
                self.accumulate(b, |d, _| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(a, |d, _| add_into(d, g));
                self.accumulate(b, |d, _| d.iter_mut().zip(g).for_each(|(p, q)| *p -= q));
            }
            Op::Mul(a, b) => {
                self.accumulate(a, |d, n| {
                    for ((p, q), y) in d.iter_mut().zip(g).zip(n[b.0].value.data()) {
                        *p += q * y;
                    }
                });
                self.accumulate(b, |d, n| {
                    for ((p, q), x) in d.iter_mut().zip(g).zip(n[a.0].value.data()) {
                        *p += q * x;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n_cols = self.shape(b)[1];
                // dA = G B^T, dB = A^T G
                self.accumulate(a, |d, n| {
                    gemm_acc(
                        (m, n_cols, k),
                        g,
                        (n_cols, 1),
                        n[b.0].value.data(),
                        (1, n_cols),
                        d,
                    )
                });
                self.accumulate(b, |d, n| {
                    gemm_acc(
                        (k, m, n_cols),
                        n[a.0].value.data(),
                        (1, k),
                        g,
                        (n_cols, 1),
                        d,
                    )
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = self.shape(out).to_vec();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.shape(v)[axis] * inner;
                    self.accumulate(v, |d, _| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut d[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.shape(input).to_vec();
                let len = self.shape(out)[axis];
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                self.accumulate(input, |d, _| {
                    for o in 0..outer {
                        let base = (o * in_shape[axis] + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        add_into(&mut d[base..base + len * inner], src);
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(a, |d, _| add_into(d, g)),
            Op::Transpose(a) => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                self.accumulate(a, |d, _| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::BroadcastAdd(x, v) => {
                let n = self.value(v).numel();
                self.accumulate(x, |d, _| add_into(d, g));
                self.accumulate(v, |d, _| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Relu(a) => self.accumulate(a, |d, n| {
                for ((p, q), x) in d.iter_mut().zip(g).zip(n[a.0].value.data()) {
                    if *x > 0.0 {
                        *p += q;
                    }
                }
            }),
            Op::Tanh(a) => self.accumulate(a, |d, n| {
                for ((p, q), y) in d.iter_mut().zip(g).zip(n[i].value.data()) {
                    *p += q * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(a) => self.accumulate(a, |d, n| {
                for ((p, q), y) in d.iter_mut().zip(g).zip(n[i].value.data()) {
                    *p += q * y * (1.0 - y);
                }
            }),
            Op::Exp(a) => self.accumulate(a, |d, n| {
                for ((p, q), y) in d.iter_mut().zip(g).zip(n[i].value.data()) {
                    *p += q * y;
                }
            }),
            Op::Log(a) => self.accumulate(a, |d, n| {
                for ((p, q), x) in d.iter_mut().zip(g).zip(n[a.0].value.data()) {
                    *p += q / x;
                }
            }),
            Op::Square(a) => self.accumulate(a, |d, n| {
                for ((p, q), x) in d.iter_mut().zip(g).zip(n[a.0].value.data()) {
                    *p += 2.0 * q * x;
                }
            }),
            Op::Sqrt(a) => self.accumulate(a, |d, n| {
                for ((p, q), y) in d.iter_mut().zip(g).zip(n[i].value.data()) {
                    *p += q / (2.0 * y);
                }
            }),
            Op::Neg(a) => self.accumulate(a, |d, _| {
                d.iter_mut().zip(g).for_each(|(p, q)| *p -= q);
            }),
            Op::Scale(a, factor) => self.accumulate(a, |d, _| {
                d.iter_mut().zip(g).for_each(|(p, q)| *p += q * factor);
            }),
            Op::SoftmaxLastDim(a) => {
                let n = *self.shape(a).last().expect("rank >= 1");
                self.accumulate(a, |d, nodes| {
                    let y = nodes[i].value.data();
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for ((p, q), s) in drow.iter_mut().zip(grow).zip(yrow) {
                            *p += s * (q - dot);
                        }
                    }
                });
            }
            Op::Sum(a) => self.accumulate(a, |d, _| d.iter_mut().for_each(|p| *p += g[0])),
            Op::Mean(a) => {
                let n = self.value(a).numel() as f64;
                self.accumulate(a, |d, _| d.iter_mut().for_each(|p| *p += g[0] / n));
            }
            Op::Unfold(a, geom) => {
                let c = geom.channels;
                self.accumulate(a, |d, _| {
                    geom.for_each_run(|dst, s| add_into(&mut d[s..s + c], &g[dst..dst + c]));
                });
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for p in row.iter_mut() {
        *p = (*p - max).exp();
        total += *p;
    }
    row.iter_mut().for_each(|p| *p /= total);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(p, q)| *p += q);
}

/// `c = a * b` for row/column-strided operands.
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
) {
    gemm_beta((m, k, n), a, a_strides, b, b_strides, c, 0.0);
}

/// `c += a * b`.
fn gemm_acc(
    dims: (usize, usize, usize),
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
) {
    gemm_beta(dims, a, a_strides, b, b_strides, c, 1.0);
}

fn gemm_beta(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every index reachable through the
    // given dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::matrix(rows).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.constant(mat(&[vec![1.0], vec![1.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax_lastdim(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1000.0, 1000.0, -1000.0]));
        let y = g.softmax_lastdim(x);
        let d = g.value(y).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let xx = g.mul(x, x).unwrap();
        let y = g.sum(xx);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_constant_output() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let y = g.square(c);
        assert_eq!(g.backward(y), Err(TensorError::NoGradPath));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = g.square(x);
        assert!(matches!(g.backward(y), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let _ = g.square(c);
        assert_eq!(g.record_len(), 0);
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let _ = g.mul(x, c).unwrap();
        assert_eq!(g.record_len(), 1);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"),
            "{msg}"
        );
        let m = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(m, m).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn fan_out_gradients_add_up() {
        // y = x*x + 3x through two consumers of x.
        let build = |g: &mut Graph, x: Var, both: (bool, bool)| {
            let mut terms = Vec::new();
            if both.0 {
                let sq = g.mul(x, x).unwrap();
                terms.push(g.sum(sq));
            }
            if both.1 {
                let tx = g.scale(x, 3.0);
                terms.push(g.sum(tx));
            }
            if terms.len() == 2 {
                g.add(terms[0], terms[1]).unwrap()
            } else {
                terms[0]
            }
        };
        let point = Tensor::vector(vec![0.5, -1.5, 2.0]);
        let grad_of = |which| {
            let mut g = Graph::new();
            let x = g.leaf(point.clone());
            let y = build(&mut g, x, which);
            g.backward(y).unwrap();
            g.grad(x).unwrap().into_data()
        };
        let both = grad_of((true, true));
        let first = grad_of((true, false));
        let second = grad_of((false, true));
        for i in 0..3 {
            assert!((both[i] - (first[i] + second[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn same_padding_geometry() {
        let u = Unfold2d::same(61, 257, 1, (3, 3), (1, 3));
        assert_eq!((u.out_t, u.out_f), (61, 86));
        assert_eq!(u.pad_before, (1, 0));
        let mut f = 257;
        for expected in [86, 29, 10, 4] {
            f = Unfold2d::same(1, f, 1, (3, 3), (1, 3)).out_f;
            assert_eq!(f, expected);
        }
    }

    #[test]
    fn unfold_center_tap_is_identity() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(f64::from).collect();
        let x = g.constant(Tensor::new(vec![3, 2, 2], data.clone()).unwrap());
        let geom = Unfold2d::same(3, 2, 2, (3, 3), (1, 1));
        let p = g.unfold(x, geom).unwrap();
        let v = g.value(p);
        assert_eq!(v.shape(), &[6, 18]);
        // centre tap (dt=1, df=1) occupies columns 8..10
        for (row, chunk) in v.rows().enumerate() {
            assert_eq!(&chunk[8..10], &data[row * 2..row * 2 + 2]);
        }
    }
}
