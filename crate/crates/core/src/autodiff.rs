//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built eagerly: every op computes its output value when it is
//! recorded, so node ids are already in topological order. [`Graph::backward`]
//! then sweeps the tape once in reverse. Only nodes that depend on a trainable
//! leaf ([`Graph::param`]) receive gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::params::ParameterSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sum(NodeId),
    MeanRows(NodeId),
    VarRows(NodeId),
    MaxRows { input: NodeId, argmax: Vec<usize> },
    Conv2d { input: NodeId, kernel: NodeId, bias: NodeId },
    MaxPool2 { input: NodeId, argmax: Vec<usize> },
    SoftmaxXent {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Concat(Vec<NodeId>),
    Reshape(NodeId),
    Gather { table: NodeId, ids: Vec<usize> },
    Unfold { input: NodeId, width: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `node`; zeros when the loss does not depend on it.
    pub fn wrt(&self, node: NodeId) -> Tensor {
        let shape = self.shapes[node.0].clone();
        match &self.grads[node.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => {
                let n = shape.iter().product();
                Tensor::from_parts(shape, vec![0.0; n])
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(node: usize, op: &'static str, detail: String) -> Error {
    Error::Shape { node, op, detail }
}

/// True when `small` is a trailing suffix of `big`.
fn broadcasts(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let x = &self.nodes[a.0].value;
        let out = Tensor::from_parts(x.shape().to_vec(), x.values().iter().map(|&v| f(v)).collect());
        let rg = self.rg(&[a]);
        self.push(op, out, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(
                self.next_id(),
                "matmul",
                format!("{sa:?} x {sb:?}"),
            ));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * m..(p + 1) * m];
                for (o, &bj) in row.iter_mut().zip(brow) {
                    *o += aip * bj;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::from_parts(vec![n, m], out), rg))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcasts(sa, sb) {
            return Err(shape_err(self.next_id(), name, format!("{sa:?} with {sb:?}")));
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let nb = bv.len();
        let out: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        let shape = sa.to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, Tensor::from_parts(shape, out), rg))
    }

    /// `a + b`, with `b` broadcast over the leading dimensions of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product, broadcasting like [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), math::sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), math::tanh)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), math::exp)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softplus(a), math::softplus)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(a).values().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                node: self.next_id(),
                op: "log",
                detail: format!("argument {bad}"),
            });
        }
        Ok(self.unary(a, Op::Log(a), math::ln))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).values().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    fn rows_cols(&self, a: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err(self.next_id(), op, format!("expected rank 2, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Column means of an `[n, d]` tensor.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, d) = self.rows_cols(a, "mean_rows")?;
        let v = self.value(a).values();
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, x) in out.iter_mut().zip(&v[r * d..(r + 1) * d]) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::MeanRows(a), Tensor::from_parts(vec![d], out), rg))
    }

    /// Column population variances of an `[n, d]` tensor.
    pub fn var_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, d) = self.rows_cols(a, "var_rows")?;
        let v = self.value(a).values();
        let mean = column_means(v, n, d);
        let mut out = vec![0.0; d];
        for r in 0..n {
            for j in 0..d {
                let c = v[r * d + j] - mean[j];
                out[j] += c * c;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::VarRows(a), Tensor::from_parts(vec![d], out), rg))
    }

    /// Column maxima of an `[n, d]` tensor; ties go to the first row.
    pub fn max_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, d) = self.rows_cols(a, "max_rows")?;
        let v = self.value(a).values();
        let mut argmax = vec![0usize; d];
        let mut out = v[..d].to_vec();
        for r in 1..n {
            for j in 0..d {
                if v[r * d + j] > out[j] {
                    out[j] = v[r * d + j];
                    argmax[j] = r;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Op::MaxRows { input: a, argmax },
            Tensor::from_parts(vec![d], out),
            rg,
        ))
    }

    /// 3x3 convolution, stride 1, zero padding that keeps the spatial size.
    ///
    /// `input` is `[n, c_in, h, w]`, `kernel` is `[c_out, c_in, 3, 3]` and
    /// `bias` is `[c_out]`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let (si, sk, sb) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if si.len() != 4
            || sk.len() != 4
            || sk[1] != si[1]
            || sk[2] != 3
            || sk[3] != 3
            || sb != [sk[0]]
        {
            return Err(shape_err(
                self.next_id(),
                "conv2d",
                format!("input {si:?}, kernel {sk:?}, bias {sb:?}"),
            ));
        }
        let (n, ci, h, w) = (si[0], si[1], si[2], si[3]);
        let co = sk[0];
        let x = self.value(input).values();
        let k = self.value(kernel).values();
        let b = self.value(bias).values();
        let mut out = vec![0.0; n * co * h * w];
        for s in 0..n {
            for o in 0..co {
                let plane = &mut out[(s * co + o) * h * w..(s * co + o + 1) * h * w];
                plane.iter_mut().for_each(|v| *v = b[o]);
                for c in 0..ci {
                    let xin = &x[(s * ci + c) * h * w..(s * ci + c + 1) * h * w];
                    let kk = &k[(o * ci + c) * 9..(o * ci + c + 1) * 9];
                    for y in 0..h {
                        for xx in 0..w {
                            let mut acc = 0.0;
                            for dy in 0..3 {
                                let iy = y + dy;
                                if iy < 1 || iy > h {
                                    continue;
                                }
                                for dx in 0..3 {
                                    let ix = xx + dx;
                                    if ix < 1 || ix > w {
                                        continue;
                                    }
                                    acc += xin[(iy - 1) * w + ix - 1] * kk[dy * 3 + dx];
                                }
                            }
                            plane[y * w + xx] += acc;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
            Tensor::from_parts(vec![n, co, h, w], out),
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2 over `[n, c, h, w]`; odd edges are dropped
    /// and ties go to the first cell in row-major order.
    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let si = self.shape(input);
        if si.len() != 4 || si[2] < 2 || si[3] < 2 {
            return Err(shape_err(self.next_id(), "max_pool2", format!("input {si:?}")));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).values();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(
            Op::MaxPool2 { input, argmax },
            Tensor::from_parts(vec![n, c, oh, ow], out),
            rg,
        ))
    }

    /// Weighted sum of per-row softmax cross-entropies, as a `[1]` tensor.
    ///
    /// `logits` is `[n, v]`; `targets[r]` is the gold class of row `r` and
    /// `weights[r]` its weight (zero for ignored rows).
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<NodeId> {
        let (n, v) = self.rows_cols(logits, "softmax_cross_entropy")?;
        if targets.len() != n || weights.len() != n || targets.iter().any(|&t| t >= v) {
            return Err(shape_err(
                self.next_id(),
                "softmax_cross_entropy",
                format!("{n} rows of {v} classes, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        let l = self.value(logits).values();
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &l[r * v..(r + 1) * v];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = math::exp(x - m);
                z += *p;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= z;
            }
            if weights[r] != 0.0 {
                let lse = m + math::ln(z);
                loss += weights[r] * (lse - row[targets[r]]);
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(shape_err(self.next_id(), "concat", "no inputs".into()));
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(shape_err(
                    self.next_id(),
                    "concat",
                    format!("{s:?} does not stack with trailing {tail:?}"),
                ));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).values());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = self.rg(parts);
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::from_parts(shape, out), rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return Err(shape_err(
                self.next_id(),
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let out = Tensor::from_parts(shape.to_vec(), self.value(a).values().to_vec());
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), out, rg))
    }

    /// Row lookup: `table` is `[v, d]`, the result `[ids.len(), d]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.rows_cols(table, "gather")?;
        if ids.is_empty() || ids.iter().any(|&i| i >= v) {
            return Err(shape_err(self.next_id(), "gather", format!("ids {ids:?} into {v} rows")));
        }
        let t = self.value(table).values();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            Tensor::from_parts(vec![ids.len(), d], out),
            rg,
        ))
    }

    /// Sliding windows over the rows of `[t, d]`: row `i` of the result is the
    /// concatenation of input rows `i..i + width`.
    pub fn unfold(&mut self, input: NodeId, width: usize) -> Result<NodeId> {
        let (t, d) = self.rows_cols(input, "unfold")?;
        if width == 0 || width > t {
            return Err(shape_err(self.next_id(), "unfold", format!("width {width} over {t} rows")));
        }
        let x = self.value(input).values();
        let rows = t - width + 1;
        let mut out = Vec::with_capacity(rows * width * d);
        for i in 0..rows {
            out.extend_from_slice(&x[i * d..(i + width) * d]);
        }
        let rg = self.rg(&[input]);
        Ok(self.push(
            Op::Unfold { input, width },
            Tensor::from_parts(vec![rows, width * d], out),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.backward_with_seed(loss, 1.0)
    }

    /// Reverse sweep seeded with `d loss = seed`.
    pub fn backward_with_seed(&self, loss: NodeId, seed: f64) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss {
                node: loss.0,
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![seed]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        // Lazily allocated accumulator for an input, or None if it needs no gradient.
        macro_rules! acc {
            ($id:expr) => {{
                let id: NodeId = $id;
                if self.nodes[id.0].requires_grad {
                    let len = self.nodes[id.0].value.len();
                    Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }
        let out = node.value.values();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                if let Some(da) = acc!(*a) {
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &bv[p * m..(p + 1) * m];
                            let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            da[i * k + p] += s;
                        }
                    }
                }
                if let Some(db) = acc!(*b) {
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (d, &gj) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *d += aip * gj;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(da) = acc!(*a) {
                    for (d, &x) in da.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if let Some(db) = acc!(*b) {
                    let nb = db.len();
                    for (i, &x) in g.iter().enumerate() {
                        db[i % nb] += sign * x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                let nb = bv.len();
                if let Some(da) = acc!(*a) {
                    for (i, &x) in g.iter().enumerate() {
                        da[i] += x * bv[i % nb];
                    }
                }
                if let Some(db) = acc!(*b) {
                    for (i, &x) in g.iter().enumerate() {
                        db[i % nb] += x * av[i];
                    }
                }
            }
            Op::Relu(a) => {
                let xv = self.value(*a).values();
                if let Some(da) = acc!(*a) {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(da) = acc!(*a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(da) = acc!(*a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(da) = acc!(*a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * out[i];
                    }
                }
            }
            Op::Log(a) => {
                let xv = self.value(*a).values();
                if let Some(da) = acc!(*a) {
                    for i in 0..g.len() {
                        da[i] += g[i] / xv[i];
                    }
                }
            }
            Op::Softplus(a) => {
                let xv = self.value(*a).values();
                if let Some(da) = acc!(*a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * math::sigmoid(xv[i]);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = acc!(*a) {
                    for (d, &x) in da.iter_mut().zip(g) {
                        *d += c * x;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(da) = acc!(*a) {
                    for (d, &x) in da.iter_mut().zip(g) {
                        *d += x;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = acc!(*a) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanRows(a) => {
                let (n, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(da) = acc!(*a) {
                    for r in 0..n {
                        for j in 0..d {
                            da[r * d + j] += g[j] / n as f64;
                        }
                    }
                }
            }
            Op::VarRows(a) => {
                let (n, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let xv = self.value(*a).values();
                let mean = column_means(xv, n, d);
                if let Some(da) = acc!(*a) {
                    for r in 0..n {
                        for j in 0..d {
                            da[r * d + j] += g[j] * 2.0 * (xv[r * d + j] - mean[j]) / n as f64;
                        }
                    }
                }
            }
            Op::MaxRows { input, argmax } => {
                let d = self.shape(*input)[1];
                if let Some(da) = acc!(*input) {
                    for j in 0..d {
                        da[argmax[j] * d + j] += g[j];
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let si = self.shape(*input);
                let (n, ci, h, w) = (si[0], si[1], si[2], si[3]);
                let co = self.shape(*kernel)[0];
                let x = self.value(*input).values();
                let k = self.value(*kernel).values();
                if let Some(db) = acc!(*bias) {
                    for s in 0..n {
                        for o in 0..co {
                            let plane = &g[(s * co + o) * h * w..(s * co + o + 1) * h * w];
                            db[o] += plane.iter().sum::<f64>();
                        }
                    }
                }
                let conv_back = |dk: Option<&mut Vec<f64>>, dx: Option<&mut Vec<f64>>| {
                    let (mut dk, mut dx) = (dk, dx);
                    for s in 0..n {
                        for o in 0..co {
                            let gp = &g[(s * co + o) * h * w..(s * co + o + 1) * h * w];
                            for c in 0..ci {
                                let xb = (s * ci + c) * h * w;
                                let kb = (o * ci + c) * 9;
                                for y in 0..h {
                                    for xx in 0..w {
                                        let gv = gp[y * w + xx];
                                        if gv == 0.0 {
                                            continue;
                                        }
                                        for dy in 0..3 {
                                            let iy = y + dy;
                                            if iy < 1 || iy > h {
                                                continue;
                                            }
                                            for dxx in 0..3 {
                                                let ix = xx + dxx;
                                                if ix < 1 || ix > w {
                                                    continue;
                                                }
                                                let xi = xb + (iy - 1) * w + ix - 1;
                                                let ki = kb + dy * 3 + dxx;
                                                if let Some(dk) = dk.as_deref_mut() {
                                                    dk[ki] += gv * x[xi];
                                                }
                                                if let Some(dx) = dx.as_deref_mut() {
                                                    dx[xi] += gv * k[ki];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                };
                // Kernel and input accumulators live in distinct slots of `grads`.
                let need_k = self.nodes[kernel.0].requires_grad;
                let need_x = self.nodes[input.0].requires_grad;
                let mut dk_buf = if need_k {
                    Some(grads[kernel.0].take().unwrap_or_else(|| vec![0.0; k.len()]))
                } else {
                    None
                };
                let mut dx_buf = if need_x {
                    Some(grads[input.0].take().unwrap_or_else(|| vec![0.0; x.len()]))
                } else {
                    None
                };
                conv_back(dk_buf.as_mut(), dx_buf.as_mut());
                if let Some(b) = dk_buf {
                    grads[kernel.0] = Some(b);
                }
                if let Some(b) = dx_buf {
                    grads[input.0] = Some(b);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(da) = acc!(*input) {
                    for (i, &src) in argmax.iter().enumerate() {
                        da[src] += g[i];
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                weights,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                if let Some(dl) = acc!(*logits) {
                    for (r, (&t, &wr)) in targets.iter().zip(weights).enumerate() {
                        if wr == 0.0 {
                            continue;
                        }
                        let scale = g[0] * wr;
                        for j in 0..v {
                            let y = if j == t { 1.0 } else { 0.0 };
                            dl[r * v + j] += scale * (probs[r * v + j] - y);
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(dp) = acc!(p) {
                        for (d, &x) in dp.iter_mut().zip(&g[offset..offset + len]) {
                            *d += x;
                        }
                    }
                    offset += len;
                }
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(dt) = acc!(*table) {
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Unfold { input, width } => {
                let d = self.shape(*input)[1];
                let rows = node.value.shape()[0];
                if let Some(dx) = acc!(*input) {
                    for i in 0..rows {
                        let src = &g[i * width * d..(i + 1) * width * d];
                        for (dv, &x) in dx[i * d..(i + width) * d].iter_mut().zip(src) {
                            *dv += x;
                        }
                    }
                }
            }
        }
    }
}

fn column_means(v: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for j in 0..d {
            mean[j] += v[r * d + j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    mean
}

/// Compares reverse-mode gradients of `f` at `point` with central differences.
///
/// `f` receives a fresh graph and one parameter node per tensor of `point`,
/// in order, and returns a scalar node. The result is the maximum over all
/// coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &ParameterSet, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut g = Graph::new();
        let nodes = p.bind(&mut g);
        let out = f(&mut g, &nodes)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("grad_check objective {v}")));
        }
        Ok(v)
    };
    let mut g = Graph::new();
    let nodes = point.bind(&mut g);
    let out = f(&mut g, &nodes)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let analytic = point.gradients(&g.backward(out)?, &nodes);

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for t in 0..point.len() {
        for i in 0..point.tensor(t).len() {
            let x0 = point.tensor(t).values()[i];
            probe.tensor_mut(t).values_mut()[i] = x0 + eps;
            let up = eval(&probe)?;
            probe.tensor_mut(t).values_mut()[i] = x0 - eps;
            let down = eval(&probe)?;
            probe.tensor_mut(t).values_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.tensor(t).values()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
