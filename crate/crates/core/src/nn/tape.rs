//! Tape-based reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value. Parameter
//! leaves borrow their values from the [`ParamStore`] the tape was built
//! over, so recording a forward pass never copies weights. [`Tape::backward`]
//! walks the nodes in reverse once and returns gradients laid out like the
//! store.

use std::collections::HashMap;

use super::params::{Gradients, ParamRef, ParamStore};
use super::tensor::{Real, Tensor};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param(ParamRef),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Concat(Vec<NodeId>),
    Slice { src: NodeId, start: usize, len: usize },
    Reshape(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    L2Norm(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    Select { src: NodeId, index: usize },
    Conv2d { input: NodeId, kernel: NodeId, bias: NodeId, spec: ConvSpec },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::L2Norm(..) => "l2_norm",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Select { .. } => "select",
            Op::Conv2d { .. } => "conv2d",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    requires_grad: bool,
}

/// Computation tape over a borrowed parameter store.
pub struct Tape<'a, T: Real> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamRef, NodeId>,
    grad_partitions: Vec<bool>,
    nonfinite: Option<(usize, &'static str)>,
    consumed: bool,
}

impl<'a, T: Real> Tape<'a, T> {
    /// A tape that differentiates with respect to every partition.
    pub fn new(store: &'a ParamStore<T>) -> Self {
        let grad_partitions = vec![true; store.partitions().len()];
        Self::with_mask(store, grad_partitions)
    }

    /// A tape that only tracks gradients into the store's trainable partitions.
    /// Frozen branches of the graph are skipped during backward.
    pub fn trainable_only(store: &'a ParamStore<T>) -> Self {
        let mask = (0..store.partitions().len())
            .map(|i| store.is_trainable(i))
            .collect();
        Self::with_mask(store, mask)
    }

    fn with_mask(store: &'a ParamStore<T>, grad_partitions: Vec<bool>) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            param_nodes: HashMap::new(),
            grad_partitions,
            nonfinite: None,
            consumed: false,
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        let node = &self.nodes[id.0];
        match &node.op {
            Op::Param(r) => self.store.get(*r),
            _ => node.value.as_ref().expect("node without value"),
        }
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// First op that produced a NaN/Inf, if any.
    pub fn check_finite(&self) -> Result<(), NnError> {
        match self.nonfinite {
            None => Ok(()),
            Some((node, op)) => Err(NnError::NonFinite { op, node }),
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> NodeId {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Input, value, false)
    }

    /// Parameter leaf; repeated calls for the same tensor return the same node.
    pub fn param(&mut self, r: ParamRef) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&r) {
            return id;
        }
        let requires_grad = self.grad_partitions[r.partition];
        self.nodes.push(Node {
            op: Op::Param(r),
            value: None,
            requires_grad,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(r, id);
        id
    }

    pub fn param_named(&mut self, partition: &str, tensor: &str) -> NodeId {
        let r = self
            .store
            .lookup(partition, tensor)
            .unwrap_or_else(|| panic!("missing parameter {partition}/{tensor}"));
        self.param(r)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = av.matrix_dims();
        let (k2, m) = bv.matrix_dims();
        assert_eq!(
            k,
            k2,
            "matmul shape mismatch: {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let mut out = vec![T::zero(); n * m];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = ad[i * k + p];
                if x == T::zero() {
                    continue;
                }
                let brow = &bd[p * m..(p + 1) * m];
                for (o, &w) in orow.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a, b), Tensor::new(&[n, m], out), rg)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, what: &str) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(
            av.shape(),
            bv.shape(),
            "{what} shape mismatch: {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, |x, y| x + y, "add");
        let rg = self.rg(&[a, b]);
        self.push(Op::Add(a, b), v, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, |x, y| x - y, "sub");
        let rg = self.rg(&[a, b]);
        self.push(Op::Sub(a, b), v, rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, |x, y| x * y, "mul");
        let rg = self.rg(&[a, b]);
        self.push(Op::Mul(a, b), v, rg)
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let av = self.value(a);
        let v = Tensor::new(av.shape(), av.data().iter().map(|&x| x * s).collect());
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, s), v, rg)
    }

    /// Concatenates along the last axis; all parts must have the same row count.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).matrix_dims().0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).matrix_dims();
            assert_eq!(r, rows, "concat row mismatch: {} vs {}", r, rows);
            cols += c;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let v = self.value(p);
                let c = v.matrix_dims().1;
                out.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
            }
        }
        let rg = self.rg(parts);
        self.push(Op::Concat(parts.to_vec()), Tensor::new(&[rows, cols], out), rg)
    }

    /// Columns `start..start+len` of every row.
    pub fn slice(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(src);
        let (rows, cols) = v.matrix_dims();
        assert!(
            start + len <= cols,
            "slice {}..{} out of range for {} columns",
            start,
            start + len,
            cols
        );
        let mut out = Vec::with_capacity(rows * len);
        for i in 0..rows {
            out.extend_from_slice(&v.data()[i * cols + start..i * cols + start + len]);
        }
        let rg = self.rg(&[src]);
        self.push(Op::Slice { src, start, len }, Tensor::new(&[rows, len], out), rg)
    }

    pub fn reshape(&mut self, src: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(src);
        let n: usize = shape.iter().product();
        assert_eq!(n, v.len(), "reshape {:?} -> {:?}", v.shape(), shape);
        let t = Tensor::new(shape, v.data().to_vec());
        let rg = self.rg(&[src]);
        self.push(Op::Reshape(src), t, rg)
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(T) -> T) -> Tensor<T> {
        let av = self.value(a);
        Tensor::new(av.shape(), av.data().iter().map(|&x| f(x)).collect())
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.unary(a, |x| x.tanh());
        let rg = self.rg(&[a]);
        self.push(Op::Tanh(a), v, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.unary(a, sigmoid);
        let rg = self.rg(&[a]);
        self.push(Op::Sigmoid(a), v, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.unary(a, |x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(Op::Relu(a), v, rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (rows, cols) = av.matrix_dims();
        let mut out = Vec::with_capacity(av.len());
        for i in 0..rows {
            out.extend(softmax_row(&av.data()[i * cols..(i + 1) * cols]));
        }
        let t = Tensor::new(av.shape(), out);
        let rg = self.rg(&[a]);
        self.push(Op::Softmax(a), t, rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (rows, cols) = av.matrix_dims();
        let mut out = Vec::with_capacity(av.len());
        for i in 0..rows {
            out.extend(log_softmax_row(&av.data()[i * cols..(i + 1) * cols]));
        }
        let t = Tensor::new(av.shape(), out);
        let rg = self.rg(&[a]);
        self.push(Op::LogSoftmax(a), t, rg)
    }

    /// Euclidean norm of all elements, as a scalar.
    pub fn l2_norm(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_squares().sqrt();
        let rg = self.rg(&[a]);
        self.push(Op::L2Norm(a), Tensor::scalar(v), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let v = av.data().iter().copied().sum::<T>() / T::from_f64(av.len() as f64);
        let rg = self.rg(&[a]);
        self.push(Op::Mean(a), Tensor::scalar(v), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(v), rg)
    }

    /// Single element (flat index) as a scalar.
    pub fn select(&mut self, src: NodeId, index: usize) -> NodeId {
        let v = self.value(src);
        assert!(index < v.len(), "select index {} out of {}", index, v.len());
        let x = v.data()[index];
        let rg = self.rg(&[src]);
        self.push(Op::Select { src, index }, Tensor::scalar(x), rg)
    }

    /// Sum of scalar nodes.
    pub fn add_all(&mut self, terms: &[NodeId]) -> NodeId {
        assert!(!terms.is_empty(), "add_all of nothing");
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    /// Valid 2-D convolution. `input` is `[C, H, W]`, `kernel` is `[O, C, K, K]`,
    /// `bias` has `O` elements. Output is `[O, H', W']`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId, spec: ConvSpec) -> NodeId {
        let (iv, kv, bv) = (self.value(input), self.value(kernel), self.value(bias));
        let (c, h, w) = dims3(iv.shape(), "conv2d input");
        let ks = kv.shape();
        assert!(
            ks.len() == 4 && ks[1] == c && ks[2] == ks[3],
            "conv2d kernel {:?} incompatible with input {:?}",
            ks,
            iv.shape()
        );
        let (o, k) = (ks[0], ks[2]);
        assert_eq!(bv.len(), o, "conv2d bias needs {} values", o);
        assert!(h >= k && w >= k, "conv2d kernel larger than input");
        let s = spec.stride.max(1);
        let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
        let (id, kd) = (iv.data(), kv.data());
        let mut out = vec![T::zero(); o * oh * ow];
        for oc in 0..o {
            let b = bv.data()[oc];
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = b;
                    for ic in 0..c {
                        for dy in 0..k {
                            let irow = ic * h * w + (y * s + dy) * w + x * s;
                            let krow = ((oc * c + ic) * k + dy) * k;
                            for dx in 0..k {
                                acc += kd[krow + dx] * id[irow + dx];
                            }
                        }
                    }
                    out[(oc * oh + y) * ow + x] = acc;
                }
            }
        }
        let rg = self.rg(&[input, kernel, bias]);
        self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                spec,
            },
            Tensor::new(&[o, oh, ow], out),
            rg,
        )
    }

    /// Reverse pass from a scalar loss node. May be called once per tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>, NnError> {
        if self.consumed {
            return Err(NnError::BackwardTwice);
        }
        self.consumed = true;
        self.check_finite()?;
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads = self.store.zeros_like();
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::new(lv.shape(), vec![T::one()]));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match adj[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Input => {}
                Op::Param(r) => grads.get_mut(r).add_assign(&g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let (n, k) = av.matrix_dims();
                    let m = bv.matrix_dims().1;
                    let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                    if self.requires_grad(a) {
                        let mut da = vec![T::zero(); n * k];
                        for i in 0..n {
                            let grow = &gd[i * m..(i + 1) * m];
                            for p in 0..k {
                                let brow = &bd[p * m..(p + 1) * m];
                                da[i * k + p] = dot(grow, brow);
                            }
                        }
                        accumulate(&mut adj, a, Tensor::new(av.shape(), da));
                    }
                    if self.requires_grad(b) {
                        // accumulate in place: weights are shared across many steps
                        let slot = adj[b.0].get_or_insert_with(|| Tensor::zeros(bv.shape()));
                        let db = slot.data_mut();
                        for i in 0..n {
                            let grow = &gd[i * m..(i + 1) * m];
                            for p in 0..k {
                                let x = ad[i * k + p];
                                if x == T::zero() {
                                    continue;
                                }
                                for (d, &gv) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                    *d += x * gv;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.requires_grad(a) {
                        accumulate(&mut adj, a, g.clone());
                    }
                    if self.requires_grad(b) {
                        accumulate(&mut adj, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires_grad(a) {
                        accumulate(&mut adj, a, g.clone());
                    }
                    if self.requires_grad(b) {
                        let mut n = g;
                        n.scale_assign(-T::one());
                        accumulate(&mut adj, b, n);
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(a) {
                        let d = zip_map(&g, self.value(b), |x, y| x * y);
                        accumulate(&mut adj, a, d);
                    }
                    if self.requires_grad(b) {
                        let d = zip_map(&g, self.value(a), |x, y| x * y);
                        accumulate(&mut adj, b, d);
                    }
                }
                Op::Scale(a, s) => {
                    let mut d = g;
                    d.scale_assign(s);
                    accumulate(&mut adj, a, d);
                }
                Op::Concat(parts) => {
                    let rows = g.matrix_dims().0;
                    let total = g.matrix_dims().1;
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(p);
                        let c = pv.matrix_dims().1;
                        if self.requires_grad(p) {
                            let mut d = Vec::with_capacity(rows * c);
                            for i in 0..rows {
                                d.extend_from_slice(
                                    &g.data()[i * total + offset..i * total + offset + c],
                                );
                            }
                            accumulate(&mut adj, p, Tensor::new(pv.shape(), d));
                        }
                        offset += c;
                    }
                }
                Op::Slice { src, start, len } => {
                    let sv = self.value(src);
                    let (rows, cols) = sv.matrix_dims();
                    let mut d = vec![T::zero(); rows * cols];
                    for i in 0..rows {
                        d[i * cols + start..i * cols + start + len]
                            .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                    }
                    accumulate(&mut adj, src, Tensor::new(sv.shape(), d));
                }
                Op::Reshape(src) => {
                    let shape = self.value(src).shape().to_vec();
                    accumulate(&mut adj, src, Tensor::new(&shape, g.into_data()));
                }
                Op::Tanh(a) => {
                    let y = self.nodes[idx].value.as_ref().unwrap();
                    let d = zip_map(&g, y, |gv, yv| gv * (T::one() - yv * yv));
                    accumulate(&mut adj, a, d);
                }
                Op::Sigmoid(a) => {
                    let y = self.nodes[idx].value.as_ref().unwrap();
                    let d = zip_map(&g, y, |gv, yv| gv * yv * (T::one() - yv));
                    accumulate(&mut adj, a, d);
                }
                Op::Relu(a) => {
                    let d = zip_map(&g, self.value(a), |gv, x| {
                        if x > T::zero() {
                            gv
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut adj, a, d);
                }
                Op::Softmax(a) => {
                    let y = self.nodes[idx].value.as_ref().unwrap();
                    let (rows, cols) = y.matrix_dims();
                    let mut d = vec![T::zero(); rows * cols];
                    for i in 0..rows {
                        let yr = &y.data()[i * cols..(i + 1) * cols];
                        let gr = &g.data()[i * cols..(i + 1) * cols];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            d[i * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut adj, a, Tensor::new(y.shape(), d));
                }
                Op::LogSoftmax(a) => {
                    let y = self.nodes[idx].value.as_ref().unwrap();
                    let (rows, cols) = y.matrix_dims();
                    let mut d = vec![T::zero(); rows * cols];
                    for i in 0..rows {
                        let yr = &y.data()[i * cols..(i + 1) * cols];
                        let gr = &g.data()[i * cols..(i + 1) * cols];
                        let gsum: T = gr.iter().copied().sum();
                        for j in 0..cols {
                            d[i * cols + j] = gr[j] - yr[j].exp() * gsum;
                        }
                    }
                    accumulate(&mut adj, a, Tensor::new(y.shape(), d));
                }
                Op::L2Norm(a) => {
                    let norm = self.nodes[idx].value.as_ref().unwrap().item();
                    let av = self.value(a);
                    let gv = g.item();
                    let d = if norm > T::zero() {
                        av.data().iter().map(|&x| gv * x / norm).collect()
                    } else {
                        vec![T::zero(); av.len()]
                    };
                    accumulate(&mut adj, a, Tensor::new(av.shape(), d));
                }
                Op::Mean(a) => {
                    let av = self.value(a);
                    let v = g.item() / T::from_f64(av.len() as f64);
                    accumulate(&mut adj, a, Tensor::filled(av.shape(), v));
                }
                Op::Sum(a) => {
                    let av = self.value(a);
                    accumulate(&mut adj, a, Tensor::filled(av.shape(), g.item()));
                }
                Op::Select { src, index } => {
                    let sv = self.value(src);
                    let mut d = Tensor::zeros(sv.shape());
                    d.data_mut()[index] = g.item();
                    accumulate(&mut adj, src, d);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    spec,
                } => {
                    let (iv, kv) = (self.value(input), self.value(kernel));
                    let (c, h, w) = dims3(iv.shape(), "conv2d input");
                    let ks = kv.shape();
                    let (o, k) = (ks[0], ks[2]);
                    let s = spec.stride.max(1);
                    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
                    let (id, kd, gd) = (iv.data(), kv.data(), g.data());
                    let want_in = self.requires_grad(input);
                    let want_k = self.requires_grad(kernel);
                    let want_b = self.requires_grad(bias);
                    let mut di = vec![T::zero(); if want_in { id.len() } else { 0 }];
                    let mut dk = vec![T::zero(); if want_k { kd.len() } else { 0 }];
                    let mut db = vec![T::zero(); o];
                    for oc in 0..o {
                        for y in 0..oh {
                            for x in 0..ow {
                                let gv = gd[(oc * oh + y) * ow + x];
                                db[oc] += gv;
                                for ic in 0..c {
                                    for dy in 0..k {
                                        let irow = ic * h * w + (y * s + dy) * w + x * s;
                                        let krow = ((oc * c + ic) * k + dy) * k;
                                        for dx in 0..k {
                                            if want_k {
                                                dk[krow + dx] += gv * id[irow + dx];
                                            }
                                            if want_in {
                                                di[irow + dx] += gv * kd[krow + dx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if want_in {
                        let shape = iv.shape().to_vec();
                        accumulate(&mut adj, input, Tensor::new(&shape, di));
                    }
                    if want_k {
                        let shape = ks.to_vec();
                        accumulate(&mut adj, kernel, Tensor::new(&shape, dk));
                    }
                    if want_b {
                        let shape = self.value(bias).shape().to_vec();
                        accumulate(&mut adj, bias, Tensor::new(&shape, db));
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn dims3(shape: &[usize], what: &str) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "{what} must be [C, H, W], got {:?}", shape);
    (shape[0], shape[1], shape[2])
}

/// Dot product with independent partial sums so the loop vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = acc.iter().fold(T::zero(), |s, &v| s + v);
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

fn accumulate<T: Real>(adj: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut adj[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add_partition("a");
        s.add_partition("b");
        s.add_tensor("a", "w", Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        s.add_tensor("b", "v", Tensor::new(&[2, 1], vec![0.5, -1.0]));
        s
    }

    #[test]
    fn matmul_chain_gradients_by_hand() {
        let s = store();
        let mut t = Tape::new(&s);
        let x = t.input(Tensor::row(&[1.0, -1.0]));
        let w = t.param_named("a", "w");
        let v = t.param_named("b", "v");
        let h = t.matmul(x, w);
        let y = t.matmul(h, v);
        let loss = t.sum(y);
        assert_eq!(t.value(h).data(), &[-2.0, -2.0]);
        assert_eq!(t.value(loss).item(), 1.0);
        let g = t.backward(loss).unwrap();
        // dL/dW = x^T v^T, dL/dv = h^T
        assert_eq!(g.get(s.lookup("a", "w").unwrap()).data(), &[0.5, -1.0, -0.5, 1.0]);
        assert_eq!(g.get(s.lookup("b", "v").unwrap()).data(), &[-2.0, -2.0]);
    }

    #[test]
    fn trainable_only_skips_frozen_partitions() {
        let mut s = store();
        s.set_trainable(["b"]);
        let mut t = Tape::trainable_only(&s);
        let x = t.input(Tensor::row(&[1.0, -1.0]));
        let w = t.param_named("a", "w");
        let v = t.param_named("b", "v");
        assert!(!t.requires_grad(w));
        let h = t.matmul(x, w);
        let y = t.matmul(h, v);
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(s.lookup("a", "w").unwrap()).sum_squares(), 0.0);
        assert_eq!(g.get(s.lookup("b", "v").unwrap()).data(), &[-2.0, -2.0]);
    }

    #[test]
    fn repeated_param_is_one_node_with_summed_gradient() {
        let s = store();
        let mut t = Tape::new(&s);
        let v1 = t.param_named("b", "v");
        let v2 = t.param_named("b", "v");
        assert_eq!(v1, v2);
        let p = t.mul(v1, v2);
        let loss = t.sum(p);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(s.lookup("b", "v").unwrap()).data(), &[1.0, -2.0]);
    }

    #[test]
    fn backward_twice_and_non_scalar_rejected() {
        let s = store();
        let mut t = Tape::new(&s);
        let v = t.param_named("b", "v");
        assert!(matches!(t.backward(v), Err(NnError::NonScalarLoss(_))));
        assert!(matches!(t.backward(v), Err(NnError::BackwardTwice)));
    }

    #[test]
    fn non_finite_trapped_with_op_name() {
        let s = ParamStore::<f32>::new();
        let mut t = Tape::new(&s);
        let a = t.input(Tensor::row(&[1e30f32]));
        let b = t.mul(a, a);
        let c = t.tanh(b);
        let loss = t.sum(c);
        match t.backward(loss) {
            Err(NnError::NonFinite { op, node }) => {
                assert_eq!(op, "mul");
                assert_eq!(node, b.index());
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn matmul_with_zero_rows_skips_but_stays_exact() {
        let s = store();
        let mut t = Tape::new(&s);
        let x = t.input(Tensor::row(&[0.0, 2.0]));
        let w = t.param_named("a", "w");
        let y = t.matmul(x, w);
        assert_eq!(t.value(y).data(), &[6.0, 8.0]);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let p = softmax_row(&[1000.0f64, 1000.0, -1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((p[0] - 0.5).abs() < 1e-15);
        let lp = log_softmax_row(&[1.0f64, 2.0, 3.0]);
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut s = ParamStore::<f64>::new();
        s.add_partition("c");
        let k = s.add_tensor("c", "k", Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, -1.0]));
        let b = s.add_tensor("c", "b", Tensor::new(&[1], vec![0.5]));
        let mut t = Tape::new(&s);
        let img: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let x = t.input(Tensor::new(&[1, 3, 3], img));
        let kn = t.param(k);
        let bn = t.param(b);
        let y = t.conv2d(x, kn, bn, ConvSpec { stride: 1 });
        assert_eq!(t.value(y).shape(), &[1, 2, 2]);
        assert!(t.value(y).data().iter().all(|&v| v == -4.0 + 0.5));
    }
}
