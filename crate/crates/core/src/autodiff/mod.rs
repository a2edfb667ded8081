//! Reverse-mode automatic differentiation over [`Tensor4`] values.
//!
//! A [`Graph`] is a Wengert tape: every operation appends a node whose inputs
//! are strictly earlier nodes, so the tape is acyclic by construction and
//! [`Graph::backward`] visits each node once in reverse insertion order. A
//! fresh graph is built for every forward pass.

pub mod conv;
pub mod gradcheck;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{numel, Dims, Tensor4};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Conv2d { x: Var, kernel: Var, bias: Var, stride: usize, pad: usize },
    Relu(Var),
    AvgPool { x: Var, k: usize },
    SpatialMean(Var),
    BatchMean(Var),
    Sum(Var),
    Linear { x: Var, weight: Var, bias: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Binary { kind: BinaryKind, a: Var, b: Var },
    Square(Var),
    Sqrt(Var),
    Scale { x: Var, s: f64 },
    AddScalar(Var),
    GatherBatch { x: Var, idx: Vec<usize> },
    ConcatBatch { a: Var, b: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor4,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (parameter or activation under test).
    pub fn leaf(&mut self, value: Tensor4) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input: data, labels-derived masks, or statistics
    /// received from another device.
    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.nodes[v.0].value.dims()
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|n| n.value.grad())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// FNV-1a hash of the sign pattern of every ReLU input on the tape. Two
    /// forward passes with equal signatures lie on the same linear piece of
    /// every ReLU.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                for &v in self.value(x).data() {
                    h ^= u64::from(v > 0.0);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    fn push(&mut self, value: Tensor4, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor4, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::State(format!("variable {} does not belong to this graph", v.0)))
        }
    }

    // ---- network layers ---------------------------------------------------

    /// `kernel` is `(c_out, c_in, kh, kw)`, `bias` is `(1, c_out, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        for v in [x, kernel, bias] {
            self.check(v)?;
        }
        let out = conv::conv2d_forward(self.value(x), self.value(kernel), self.value(bias).data(), stride, pad)?;
        Ok(self.push_op(out, Op::Conv2d { x, kernel, bias, stride, pad }, &[x, kernel, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let mut out = self.value(x).clone();
        out.clear_grad();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        Ok(self.push_op(out, Op::Relu(x), &[x]))
    }

    /// Non-overlapping `k x k` average pooling (trailing rows/columns that do
    /// not fill a window are dropped).
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        self.check(x)?;
        let [b, c, h, w] = self.dims(x);
        if k == 0 || k > h || k > w {
            return Err(shape_err!("pool window {k} does not fit {h}x{w}"));
        }
        let (ho, wo) = (h / k, w / k);
        let src = self.value(x);
        let mut out = Tensor4::zeros([b, c, ho, wo]);
        let inv = 1.0 / (k * k) as f64;
        for bi in 0..b {
            for ci in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for i in 0..k {
                            for j in 0..k {
                                acc += src.at(bi, ci, oh * k + i, ow * k + j);
                            }
                        }
                        out.set(bi, ci, oh, ow, acc * inv);
                    }
                }
            }
        }
        Ok(self.push_op(out, Op::AvgPool { x, k }, &[x]))
    }

    /// Mean over the spatial axes: `(B, C, H, W) -> (B, C, 1, 1)`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let [b, c, h, w] = self.dims(x);
        let hw = h * w;
        let data: Vec<f64> =
            self.value(x).data().chunks(hw).map(|s| s.iter().sum::<f64>() / hw as f64).collect();
        let out = Tensor4::from_vec([b, c, 1, 1], data)?;
        Ok(self.push_op(out, Op::SpatialMean(x), &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.spatial_mean(x)
    }

    /// Mean over the batch axis: `(B, C, H, W) -> (1, C, H, W)`.
    pub fn batch_mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let [b, c, h, w] = self.dims(x);
        let item = c * h * w;
        let mut data = vec![0.0; item];
        for chunk in self.value(x).data().chunks(item) {
            data.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
        }
        data.iter_mut().for_each(|a| *a /= b as f64);
        let out = Tensor4::from_vec([1, c, h, w], data)?;
        Ok(self.push_op(out, Op::BatchMean(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().sum();
        Ok(self.push_op(Tensor4::scalar(s), Op::Sum(x), &[x]))
    }

    /// Fully connected layer on the flattened `(C, H, W)` features of each
    /// batch entry. `weight` is `(out, features, 1, 1)`, `bias` `(1, out, 1, 1)`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        for v in [x, weight, bias] {
            self.check(v)?;
        }
        let xv = self.value(x);
        let (b, f) = (xv.batch(), xv.item_len());
        let wv = self.value(weight);
        let [o, wf, wh, ww] = wv.dims();
        if wf * wh * ww != f {
            return Err(shape_err!("linear weight {:?} does not accept {f} features", wv.dims()));
        }
        let bv = self.value(bias);
        if bv.len() != o {
            return Err(shape_err!("linear bias has {} entries for {o} outputs", bv.len()));
        }
        let mut data: Vec<f64> = (0..b).flat_map(|_| bv.data().iter().copied()).collect();
        conv::gemm(b, f, o, xv.data(), (f, 1), wv.data(), (1, f), 1.0, &mut data);
        let out = Tensor4::from_vec([b, o, 1, 1], data)?;
        Ok(self.push_op(out, Op::Linear { x, weight, bias }, &[x, weight, bias]))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let lv = self.value(logits);
        let (b, k) = (lv.batch(), lv.item_len());
        if labels.len() != b {
            return Err(shape_err!("{} labels for a batch of {b}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (i, row) in lv.data().chunks(k).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            for (j, v) in row.iter().enumerate() {
                probs[i * k + j] = (v - log_z).exp();
            }
            loss += log_z - row[labels[i]];
        }
        let out = Tensor4::scalar(loss / b as f64);
        let op = Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.push_op(out, op, &[logits]))
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (da, db) = (self.dims(a), self.dims(b));
        let out_dims = broadcast_dims(da, db)?;
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = if da == db {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut data = vec![0.0; numel(out_dims)];
            for_each_broadcast(out_dims, da, db, |o, ia, ib| data[o] = f(av[ia], bv[ib]));
            data
        };
        let out = Tensor4::from_vec(out_dims, data)?;
        Ok(self.push_op(out, Op::Binary { kind, a, b }, &[a, b]))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Square root. The derivative at exactly zero is taken as zero so that
    /// degenerate statistics stay finite under backpropagation.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Op::Scale { x, s }, |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check(x)?;
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let out = Tensor4::from_vec(src.dims(), data)?;
        Ok(self.push_op(out, op, &[x]))
    }

    // ---- batch reshuffling ------------------------------------------------

    /// Rows `idx` of `x` along the batch axis (repeats allowed).
    pub fn gather_batch(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.check(x)?;
        if idx.is_empty() {
            return Err(shape_err!("empty batch selection"));
        }
        let out = self.value(x).select_batch(idx)?;
        Ok(self.push_op(out, Op::GatherBatch { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn concat_batch(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = Tensor4::stack(&[self.value(a), self.value(b)])?;
        Ok(self.push_op(out, Op::ConcatBatch { a, b }, &[a, b]))
    }

    // ---- backward ---------------------------------------------------------

    /// Backpropagates from the scalar `loss`, leaving `d loss / d node` in the
    /// gradient buffer of every node that depends on a leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::State(format!("loss must be scalar, got {:?}", self.dims(loss))));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.clear_grad();
            if let (true, Some(g)) = (node.requires_grad, g) {
                node.value.set_grad(g)?;
            }
        }
        for node in &mut self.nodes[n..] {
            node.value.clear_grad();
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Conv2d { x, kernel, bias, stride, pad } => {
                let (dx, dk, db) = conv::conv2d_backward(self.value(*x), self.value(*kernel), g, *stride, *pad)?;
                self.accumulate(grads, *x, |a| add_into(a, &dx));
                self.accumulate(grads, *kernel, |a| add_into(a, &dk));
                self.accumulate(grads, *bias, |a| add_into(a, &db));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |a| {
                    for ((a, &v), &gi) in a.iter_mut().zip(xv).zip(g) {
                        if v > 0.0 {
                            *a += gi;
                        }
                    }
                });
            }
            Op::AvgPool { x, k } => {
                let [b, c, h, w] = self.dims(*x);
                let [_, _, ho, wo] = out.dims();
                let inv = 1.0 / (k * k) as f64;
                self.accumulate(grads, *x, |a| {
                    for p in 0..b * c {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let gv = g[(p * ho + oh) * wo + ow] * inv;
                                for ii in 0..*k {
                                    let row = (p * h + oh * k + ii) * w + ow * k;
                                    a[row..row + k].iter_mut().for_each(|v| *v += gv);
                                }
                            }
                        }
                    }
                });
            }
            Op::SpatialMean(x) => {
                let [_, _, h, w] = self.dims(*x);
                let hw = h * w;
                self.accumulate(grads, *x, |a| {
                    for (chunk, &gi) in a.chunks_mut(hw).zip(g) {
                        let s = gi / hw as f64;
                        chunk.iter_mut().for_each(|v| *v += s);
                    }
                });
            }
            Op::BatchMean(x) => {
                let b = self.dims(*x)[0];
                self.accumulate(grads, *x, |a| {
                    for chunk in a.chunks_mut(g.len()) {
                        chunk.iter_mut().zip(g).for_each(|(v, gi)| *v += gi / b as f64);
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |a| a.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Linear { x, weight, bias } => {
                let xv = self.value(*x);
                let wv = self.value(*weight);
                let (b, f) = (xv.batch(), xv.item_len());
                let o = wv.batch();
                // dx = g * W ; dW = g^T * x ; db = column sums of g
                self.accumulate(grads, *x, |a| conv::gemm(b, o, f, g, (o, 1), wv.data(), (f, 1), 1.0, a));
                self.accumulate(grads, *weight, |a| conv::gemm(o, b, f, g, (1, o), xv.data(), (f, 1), 1.0, a));
                self.accumulate(grads, *bias, |a| {
                    for row in g.chunks(o) {
                        add_into(a, row);
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.value(*logits).item_len();
                let s = g[0] / labels.len() as f64;
                self.accumulate(grads, *logits, |a| {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            a[r * k + j] += s * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
            Op::Binary { kind, a, b } => self.backprop_binary(*kind, *a, *b, out.dims(), g, grads),
            Op::Square(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |a| {
                    a.iter_mut().zip(xv).zip(g).for_each(|((a, &v), &gi)| *a += 2.0 * v * gi)
                });
            }
            Op::Sqrt(x) => {
                let yv = out.data();
                self.accumulate(grads, *x, |a| {
                    for ((a, &y), &gi) in a.iter_mut().zip(yv).zip(g) {
                        if y > 0.0 {
                            *a += 0.5 * gi / y;
                        }
                    }
                });
            }
            Op::Scale { x, s } => {
                self.accumulate(grads, *x, |a| a.iter_mut().zip(g).for_each(|(a, gi)| *a += s * gi));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, |a| add_into(a, g)),
            Op::GatherBatch { x, idx } => {
                let item = out.item_len();
                self.accumulate(grads, *x, |a| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut a[src * item..(src + 1) * item], &g[r * item..(r + 1) * item]);
                    }
                });
            }
            Op::ConcatBatch { a: first, b: second } => {
                let split = self.value(*first).len();
                self.accumulate(grads, *first, |a| add_into(a, &g[..split]));
                self.accumulate(grads, *second, |a| add_into(a, &g[split..]));
            }
        }
        Ok(())
    }

    fn backprop_binary(
        &self,
        kind: BinaryKind,
        a: Var,
        b: Var,
        out_dims: Dims,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (da, db) = (self.dims(a), self.dims(b));
        // Partial derivatives with respect to each operand at one output position.
        let partial = |x: f64, y: f64| -> (f64, f64) {
            match kind {
                BinaryKind::Add => (1.0, 1.0),
                BinaryKind::Sub => (1.0, -1.0),
                BinaryKind::Mul => (y, x),
                BinaryKind::Div => (1.0 / y, -x / (y * y)),
            }
        };
        self.accumulate(grads, a, |acc| {
            for_each_broadcast(out_dims, da, db, |o, ia, ib| acc[ia] += g[o] * partial(av[ia], bv[ib]).0)
        });
        self.accumulate(grads, b, |acc| {
            for_each_broadcast(out_dims, da, db, |o, ia, ib| acc[ib] += g[o] * partial(av[ia], bv[ib]).1)
        });
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
}

/// Output dims of an elementwise op where each axis is equal or 1 on either side.
pub fn broadcast_dims(a: Dims, b: Dims) -> Result<Dims> {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

fn strides(d: Dims, out: Dims) -> [usize; 4] {
    let full = [d[1] * d[2] * d[3], d[2] * d[3], d[3], 1];
    let mut s = [0; 4];
    for i in 0..4 {
        s[i] = if d[i] == out[i] { full[i] } else { 0 };
    }
    s
}

fn for_each_broadcast(out: Dims, da: Dims, db: Dims, mut f: impl FnMut(usize, usize, usize)) {
    let (sa, sb) = (strides(da, out), strides(db, out));
    let mut o = 0;
    for i0 in 0..out[0] {
        for i1 in 0..out[1] {
            for i2 in 0..out[2] {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..out[3] {
                    f(o, ba + i3 * sa[3], bb + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
}
