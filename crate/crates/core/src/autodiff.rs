//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed when a
//! node is created, and [`Graph::backward`] walks the tape in reverse to
//! accumulate gradients. Nodes that do not depend on any parameter carry no
//! gradient and are skipped during the backward sweep.

use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::{self, gemm_into, ConvShape, MatRef, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Offset(Var),
    MulConst(Var, Tensor<S>),
    Relu(Var),
    Exp(Var),
    Softplus(Var),
    Square(Var),
    Clamp(Var, S, S),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Slice { x: Var, starts: Vec<usize> },
    Stack(Vec<Var>),
    MatMul(Var, Var),
    Transpose(Var),
    InverseSpd(Var),
    Symmetrize(Var),
    MatMulNt(Var, Var),
    ScaleCols(Var, Var),
    Diag(Var),
    Softmax(Var),
    WeightedSum { weights: Var, bases: Var },
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. a leaf, or `None` if the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Visits every (source, destination) flat index pair of a box slice.
fn for_each_slice_index(full: &[usize], starts: &[usize], out: &[usize], mut f: impl FnMut(usize, usize)) {
    let fs = strides(full);
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    for dst in 0..n {
        let src: usize = (0..rank).map(|a| (starts[a] + idx[a]) * fs[a]).sum();
        f(src, dst);
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < out[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -S::one())
    }

    /// `a + c` elementwise for a constant `c`.
    pub fn offset(&mut self, a: Var, c: S) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(&[a]);
        self.push(v, Op::Offset(a), ng)
    }

    /// Elementwise product with a constant tensor (masks, fixed noise).
    pub fn mul_const(&mut self, a: Var, c: Tensor<S>) -> Var {
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        let ng = self.ng(&[a]);
        self.push(v, Op::MulConst(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(S::zero()));
        let ng = self.ng(&[a]);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        let ng = self.ng(&[a]);
        self.push(v, Op::Exp(a), ng)
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        let ng = self.ng(&[a]);
        self.push(v, Op::Softplus(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(&[a]);
        self.push(v, Op::Square(a), ng)
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        let ng = self.ng(&[a]);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = S::lit(self.value(a).len() as f64);
        let v = Tensor::scalar(self.value(a).sum() / n);
        let ng = self.ng(&[a]);
        self.push(v, Op::Mean(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape);
        let ng = self.ng(&[a]);
        self.push(v, Op::Reshape(a), ng)
    }

    /// Box slice `x[starts[i] .. ends[i]]` along every axis.
    pub fn slice(&mut self, a: Var, starts: &[usize], ends: &[usize]) -> Var {
        let full = self.value(a).shape().to_vec();
        assert_eq!(full.len(), starts.len(), "slice rank mismatch");
        assert_eq!(full.len(), ends.len(), "slice rank mismatch");
        for ax in 0..full.len() {
            assert!(starts[ax] <= ends[ax] && ends[ax] <= full[ax], "slice out of range on axis {ax}");
        }
        let out: Vec<usize> = starts.iter().zip(ends).map(|(s, e)| e - s).collect();
        let src = self.value(a).data();
        let mut data = vec![S::zero(); out.iter().product()];
        for_each_slice_index(&full, starts, &out, |s, d| data[d] = src[s]);
        let ng = self.ng(&[a]);
        self.push(Tensor::new(&out, data), Op::Slice { x: a, starts: starts.to_vec() }, ng)
    }

    /// Row `i` of the leading axis, with that axis removed.
    pub fn select(&mut self, a: Var, i: usize) -> Var {
        let shape = self.value(a).shape().to_vec();
        let mut starts = vec![0; shape.len()];
        let mut ends = shape.clone();
        starts[0] = i;
        ends[0] = i + 1;
        let s = self.slice(a, &starts, &ends);
        self.reshape(s, &shape[1..])
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack of nothing");
        let inner = self.value(parts[0]).shape().to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(parts[0]).len());
        for p in parts {
            assert_eq!(self.value(*p).shape(), &inner[..], "stack shape mismatch");
            data.extend_from_slice(self.value(*p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let ng = self.ng(parts);
        self.push(Tensor::new(&shape, data), Op::Stack(parts.to_vec()), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose2();
        let ng = self.ng(&[a]);
        self.push(v, Op::Transpose(a), ng)
    }

    /// Inverse of a symmetric positive definite matrix.
    pub fn inverse_spd(&mut self, a: Var) -> crate::error::Result<Var> {
        self.inverse_spd_logdet(a).map(|(v, _)| v)
    }

    /// Like [`Graph::inverse_spd`], also returning `log det A` as a plain
    /// (untracked) value.
    pub fn inverse_spd_logdet(&mut self, a: Var) -> crate::error::Result<(Var, S)> {
        let (v, logdet) = linalg::spd_inverse_logdet(self.value(a))?;
        let ng = self.ng(&[a]);
        Ok((self.push(v, Op::InverseSpd(a), ng), logdet))
    }

    /// `(A + A^T) / 2`.
    pub fn symmetrize(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        linalg::symmetrize_in_place(&mut v);
        let ng = self.ng(&[a]);
        self.push(v, Op::Symmetrize(a), ng)
    }

    /// `A B^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul_nt inner dimension mismatch");
        let mut out = Tensor::zeros(&[m, n]);
        gemm_into(S::one(), MatRef::of(self.value(a)), MatRef::of(self.value(b)).t(), S::zero(), out.data_mut());
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMulNt(a, b), ng)
    }

    /// `X diag(v)`: scales column `j` of an `m x n` matrix by `v[j]`.
    pub fn scale_cols(&mut self, x: Var, v: Var) -> Var {
        let (m, n) = self.value(x).dims2();
        assert_eq!(self.value(v).len(), n, "scale_cols length mismatch");
        let xv = self.value(x).data();
        let vv = self.value(v).data();
        let data = (0..m * n).map(|i| xv[i] * vv[i % n]).collect();
        let ng = self.ng(&[x, v]);
        self.push(Tensor::new(&[m, n], data), Op::ScaleCols(x, v), ng)
    }

    /// Diagonal matrix from a vector.
    pub fn diag(&mut self, v: Var) -> Var {
        let n = self.value(v).len();
        let mut out = Tensor::zeros(&[n, n]);
        for (i, x) in self.value(v).data().iter().enumerate() {
            out.data_mut()[i * n + i] = *x;
        }
        let ng = self.ng(&[v]);
        self.push(out, Op::Diag(v), ng)
    }

    /// Softmax over all entries of a vector.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a).data();
        let m = x.iter().fold(S::neg_infinity(), |acc, v| acc.max(*v));
        let e: Vec<S> = x.iter().map(|v| (*v - m).exp()).collect();
        let z: S = e.iter().copied().sum();
        let v = Tensor::new(self.value(a).shape(), e.into_iter().map(|v| v / z).collect());
        let ng = self.ng(&[a]);
        self.push(v, Op::Softmax(a), ng)
    }

    /// `sum_c weights[c] * bases[c]` for `weights: [C]`, `bases: [C, ...]`.
    pub fn weighted_sum(&mut self, weights: Var, bases: Var) -> Var {
        let c = self.value(weights).len();
        let bshape = self.value(bases).shape().to_vec();
        assert_eq!(bshape[0], c, "weighted_sum basis count mismatch");
        let inner: usize = bshape[1..].iter().product();
        let mut out = Tensor::zeros(&bshape[1..]);
        let bd = self.value(bases).data();
        let wd = self.value(weights).data();
        for k in 0..c {
            for (o, b) in out.data_mut().iter_mut().zip(&bd[k * inner..(k + 1) * inner]) {
                *o += wd[k] * *b;
            }
        }
        let ng = self.ng(&[weights, bases]);
        self.push(out, Op::WeightedSum { weights, bases }, ng)
    }

    /// Fully connected layer: `x [N, I]`, `w [O, I]`, `b [O]` -> `[N, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, i) = self.value(x).dims2();
        let (o, i2) = self.value(w).dims2();
        assert_eq!(i, i2, "linear input width mismatch");
        let bias = self.value(b).data();
        let mut out = Tensor::from_fn(&[n, o], |k| bias[k % o]);
        gemm_into(S::one(), MatRef::of(self.value(x)), MatRef::of(self.value(w)).t(), S::one(), out.data_mut());
        let ng = self.ng(&[x, w, b]);
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    /// Same-padded stride-1 convolution: `x [B, C, H, W]`, `w [O, C, k, k]`, `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let cs = self.conv_shape(x, w);
        let out = tensor::conv2d_forward(&cs, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let ng = self.ng(&[x, w, b]);
        self.push(Tensor::new(&[cs.batch, cs.out_ch, cs.height, cs.width], out), Op::Conv2d { x, w, b }, ng)
    }

    fn conv_shape(&self, x: Var, w: Var) -> ConvShape {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        assert_eq!(xs.len(), 4, "conv input must be [B, C, H, W]");
        assert_eq!(ws.len(), 4, "conv weight must be [O, C, k, k]");
        assert_eq!(xs[1], ws[1], "conv channel mismatch");
        assert!(ws[2] == ws[3] && ws[2] % 2 == 1, "conv kernels must be square and odd");
        ConvShape { batch: xs[0], in_ch: xs[1], out_ch: ws[0], height: xs[2], width: xs[3], kernel: ws[2] }
    }

    pub fn maxpool2(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let (out, argmax) = tensor::maxpool2_forward(&s, self.value(x).data());
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&[s[0], s[1], s[2] / 2, s[3] / 2], out), Op::MaxPool2 { x, argmax }, ng)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let out = tensor::upsample2_forward(&s, self.value(x).data());
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&[s[0], s[1], 2 * s[2], 2 * s[3]], out), Op::Upsample2(x), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<S>>], v: Var) -> Option<&'g mut Tensor<S>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn backprop_node(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.scaled_add_assign(-S::one(), g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                if let Some(ga) = self.slot(grads, *a) {
                    zip_acc(ga, g, &bv, |g, x| g * x);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    zip_acc(gb, g, &av, |g, x| g * x);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.scaled_add_assign(*c, g);
                }
            }
            Op::Offset(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
            }
            Op::MulConst(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    zip_acc(ga, g, c, |g, m| g * m);
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    zip_acc(ga, g, y, |g, y| if y > S::zero() { g } else { S::zero() });
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    zip_acc(ga, g, y, |g, y| g * y);
                }
            }
            Op::Softplus(a) => {
                let x = self.value(*a).clone();
                if let Some(ga) = self.slot(grads, *a) {
                    zip_acc(ga, g, &x, |g, x| g * sigmoid(x));
                }
            }
            Op::Square(a) => {
                let x = self.value(*a).clone();
                if let Some(ga) = self.slot(grads, *a) {
                    zip_acc(ga, g, &x, |g, x| S::lit(2.0) * g * x);
                }
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let x = self.value(*a).clone();
                if let Some(ga) = self.slot(grads, *a) {
                    zip_acc(ga, g, &x, |g, x| if x >= lo && x <= hi { g } else { S::zero() });
                }
            }
            Op::Sum(a) => {
                let gv = g.item();
                if let Some(ga) = self.slot(grads, *a) {
                    for v in ga.data_mut() {
                        *v += gv;
                    }
                }
            }
            Op::Mean(a) => {
                let n = S::lit(self.value(*a).len() as f64);
                let gv = g.item() / n;
                if let Some(ga) = self.slot(grads, *a) {
                    for v in ga.data_mut() {
                        *v += gv;
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (d, s) in ga.data_mut().iter_mut().zip(g.data()) {
                        *d += *s;
                    }
                }
            }
            Op::Slice { x, starts } => {
                let full = self.value(*x).shape().to_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    let gd = gx.data_mut();
                    for_each_slice_index(&full, starts, y.shape(), |s, d| gd[s] += g.data()[d]);
                }
            }
            Op::Stack(parts) => {
                let n = y.len() / parts.len();
                for (k, p) in parts.iter().enumerate() {
                    if let Some(gp) = self.slot(grads, *p) {
                        for (d, s) in gp.data_mut().iter_mut().zip(&g.data()[k * n..(k + 1) * n]) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ar, br) = (MatRef::of(av), MatRef::of(bv));
                let (gm, gn) = g.dims2();
                let gr = MatRef::raw(g.data(), gm, gn);
                // Parents may coincide (A * A); accumulate through temporaries.
                if self.nodes[a.0].needs_grad {
                    let mut t = Tensor::zeros(av.shape());
                    gemm_into(S::one(), gr, br.t(), S::zero(), t.data_mut());
                    self.slot(grads, *a).unwrap().add_assign(&t);
                }
                if self.nodes[b.0].needs_grad {
                    let mut t = Tensor::zeros(bv.shape());
                    gemm_into(S::one(), ar.t(), gr, S::zero(), t.data_mut());
                    self.slot(grads, *b).unwrap().add_assign(&t);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (gm, gn) = g.dims2();
                let gr = MatRef::raw(g.data(), gm, gn);
                if self.nodes[a.0].needs_grad {
                    let mut t = Tensor::zeros(av.shape());
                    gemm_into(S::one(), gr, MatRef::of(bv), S::zero(), t.data_mut());
                    self.slot(grads, *a).unwrap().add_assign(&t);
                }
                if self.nodes[b.0].needs_grad {
                    let mut t = Tensor::zeros(bv.shape());
                    gemm_into(S::one(), gr.t(), MatRef::of(av), S::zero(), t.data_mut());
                    self.slot(grads, *b).unwrap().add_assign(&t);
                }
            }
            Op::Symmetrize(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let mut s = g.clone();
                    linalg::symmetrize_in_place(&mut s);
                    ga.add_assign(&s);
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(&g.transpose2());
                }
            }
            Op::InverseSpd(a) => {
                if self.nodes[a.0].needs_grad {
                    // dL/dA = -Y^T G Y^T with Y = A^{-1}.
                    let (n, _) = y.dims2();
                    let yr = MatRef::of(y);
                    let mut tmp = vec![S::zero(); n * n];
                    gemm_into(S::one(), yr.t(), MatRef::raw(g.data(), n, n), S::zero(), &mut tmp);
                    let ga = self.slot(grads, *a).unwrap();
                    gemm_into(-S::one(), MatRef::raw(&tmp, n, n), yr.t(), S::one(), ga.data_mut());
                }
            }
            Op::ScaleCols(x, v) => {
                let (m, n) = y.dims2();
                let xv = self.value(*x).clone();
                let vv = self.value(*v).clone();
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, d) in gx.data_mut().iter_mut().enumerate() {
                        *d += g.data()[i] * vv.data()[i % n];
                    }
                }
                if let Some(gv) = self.slot(grads, *v) {
                    let gvd = gv.data_mut();
                    for r in 0..m {
                        for c in 0..n {
                            gvd[c] += g.data()[r * n + c] * xv.data()[r * n + c];
                        }
                    }
                }
            }
            Op::Diag(v) => {
                let n = self.value(*v).len();
                if let Some(gv) = self.slot(grads, *v) {
                    for (i, d) in gv.data_mut().iter_mut().enumerate() {
                        *d += g.data()[i * n + i];
                    }
                }
            }
            Op::Softmax(a) => {
                let dotp = g.dot(y);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gv), yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += *yv * (*gv - dotp);
                    }
                }
            }
            Op::WeightedSum { weights, bases } => {
                let c = self.value(*weights).len();
                let inner = y.len();
                let bv = self.value(*bases).clone();
                let wv = self.value(*weights).clone();
                if let Some(gw) = self.slot(grads, *weights) {
                    for k in 0..c {
                        let s: S = bv.data()[k * inner..(k + 1) * inner].iter().zip(g.data()).map(|(b, g)| *b * *g).sum();
                        gw.data_mut()[k] += s;
                    }
                }
                if let Some(gb) = self.slot(grads, *bases) {
                    for k in 0..c {
                        for (d, gv) in gb.data_mut()[k * inner..(k + 1) * inner].iter_mut().zip(g.data()) {
                            *d += wv.data()[k] * *gv;
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, o) = y.dims2();
                let gr = MatRef::raw(g.data(), n, o);
                if self.nodes[x.0].needs_grad {
                    let wr = MatRef::of(self.value(*w));
                    let mut t = Tensor::zeros(self.value(*x).shape());
                    gemm_into(S::one(), gr, wr, S::zero(), t.data_mut());
                    self.slot(grads, *x).unwrap().add_assign(&t);
                }
                if self.nodes[w.0].needs_grad {
                    let xr = MatRef::of(self.value(*x));
                    let mut t = Tensor::zeros(self.value(*w).shape());
                    gemm_into(S::one(), gr.t(), xr, S::zero(), t.data_mut());
                    self.slot(grads, *w).unwrap().add_assign(&t);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for r in 0..n {
                        for (d, gv) in gb.data_mut().iter_mut().zip(&g.data()[r * o..(r + 1) * o]) {
                            *d += *gv;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b } => {
                let cs = self.conv_shape(*x, *w);
                let mut gx = self.nodes[x.0].needs_grad.then(|| Tensor::zeros(self.value(*x).shape()));
                let mut gw = self.nodes[w.0].needs_grad.then(|| Tensor::zeros(self.value(*w).shape()));
                let mut gb = self.nodes[b.0].needs_grad.then(|| Tensor::zeros(self.value(*b).shape()));
                tensor::conv2d_backward(
                    &cs,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                for (v, t) in [(*x, gx), (*w, gw), (*b, gb)] {
                    if let Some(t) = t {
                        self.slot(grads, v).unwrap().add_assign(&t);
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let gd = gx.data_mut();
                    for (gv, idx) in g.data().iter().zip(argmax) {
                        gd[*idx as usize] += *gv;
                    }
                }
            }
            Op::Upsample2(x) => {
                let s = self.value(*x).shape().to_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    tensor::upsample2_backward(&s, g.data(), gx.data_mut());
                }
            }
        }
    }
}

fn zip_acc<S: Scalar>(dst: &mut Tensor<S>, g: &Tensor<S>, other: &Tensor<S>, f: impl Fn(S, S) -> S) {
    for ((d, gv), o) in dst.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
        *d += f(*gv, *o);
    }
}

pub fn softplus<S: Scalar>(x: S) -> S {
    if x > S::lit(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse<S: Scalar>(y: S) -> S {
    if y > S::lit(20.0) {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of `d loss / d leaf` for every entry of every leaf.
    fn check(build: impl Fn(&mut Graph<f64>, &[Var]) -> Var, leaves: Vec<Tensor<f64>>, tol: f64) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let eval = |ls: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ls.iter().map(|t| g.param(t.clone())).collect();
            let l = build(&mut g, &vars);
            g.value(l).item()
        };
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            for e in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[e] += h;
                let mut minus = leaves.clone();
                minus[li].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grads.get(vars[li]).map(|t| t.data()[e]).unwrap_or(0.0);
                assert!((fd - an).abs() <= tol * (1.0 + fd.abs()), "leaf {li} entry {e}: fd {fd} vs analytic {an}");
            }
        }
    }

    fn t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    #[test]
    fn elementwise_ops() {
        check(
            |g, v| {
                let a = g.mul(v[0], v[1]);
                let b = g.sub(a, v[0]);
                let c = g.exp(b);
                let d = g.softplus(c);
                let e = g.square(d);
                let f = g.clamp(v[1], -0.2, 0.2);
                let h = g.add(e, f);
                let k = g.offset(h, 0.3);
                let m = g.mul_const(k, Tensor::new(&[2, 3], vec![1.0, 0.0, 2.0, -1.0, 0.5, 3.0]));
                g.mean(m)
            },
            vec![t(&[2, 3], 1), t(&[2, 3], 2)],
            1e-7,
        );
    }

    #[test]
    fn matrix_ops() {
        check(
            |g, v| {
                let at = g.transpose(v[0]);
                let spd = g.matmul(v[0], at);
                let eye = g.constant(Tensor::identity(3));
                let spd = g.add(spd, eye);
                let inv = g.inverse_spd(spd).unwrap();
                let p = g.matmul(inv, v[1]);
                let sc = g.scale_cols(p, v[2]);
                let d = g.diag(v[2]);
                let q = g.matmul(sc, d);
                let s = g.symmetrize(q);
                let sq = g.square(s);
                g.sum(sq)
            },
            vec![t(&[3, 3], 3), t(&[3, 3], 4), t(&[3], 5)],
            1e-6,
        );
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        check(
            |g, v| {
                let p = g.matmul_nt(v[0], v[1]);
                let q = g.matmul_nt(v[0], v[0]);
                let s = g.symmetrize(q);
                let a = g.add(p, s);
                let sq = g.square(a);
                g.sum(sq)
            },
            vec![t(&[3, 2], 15), t(&[3, 2], 16)],
            1e-7,
        );
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[3, 4], 17));
        let b = g.param(t(&[2, 4], 18));
        let x = g.matmul_nt(a, b);
        let bt = g.transpose(b);
        let y = g.matmul(a, bt);
        assert_eq!(g.value(x), g.value(y));
    }

    #[test]
    fn matmul_with_itself() {
        check(
            |g, v| {
                let p = g.matmul(v[0], v[0]);
                g.sum(p)
            },
            vec![t(&[3, 3], 9)],
            1e-7,
        );
    }

    #[test]
    fn structural_ops() {
        check(
            |g, v| {
                let sm = g.softmax(v[0]);
                let ws = g.weighted_sum(sm, v[1]);
                let r = g.reshape(ws, &[2, 2]);
                let s0 = g.select(v[1], 1);
                let st = g.stack(&[r, s0]);
                let sl = g.slice(st, &[0, 1, 0], &[2, 2, 2]);
                let sq = g.square(sl);
                g.sum(sq)
            },
            vec![t(&[3], 6), t(&[3, 2, 2], 7)],
            1e-7,
        );
    }

    #[test]
    fn network_ops() {
        check(
            |g, v| {
                let c = g.conv2d(v[0], v[1], v[2]);
                let r = g.relu(c);
                let p = g.maxpool2(r);
                let u = g.upsample2(p);
                let u = g.maxpool2(u);
                let f = g.reshape(u, &[2, 2 * 2 * 2]);
                let l = g.linear(f, v[3], v[4]);
                let sq = g.square(l);
                g.sum(sq)
            },
            vec![t(&[2, 3, 4, 4], 10), t(&[2, 3, 3, 3], 11), t(&[2], 12), t(&[5, 8], 13), t(&[5], 14)],
            1e-6,
        );
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut g = Graph::<f64>::new();
        let p = g.param(t(&[4], 1));
        let z = g.scale(p, 0.0);
        let s = g.sum(z);
        let c = g.offset(s, 3.0);
        let grads = g.backward(c);
        assert!(grads.get(p).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param(t(&[4], 1));
        let c = g.constant(t(&[4], 2));
        let m = g.mul(p, c);
        let s = g.sum(m);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), g.value(c));
    }

    #[test]
    fn softplus_round_trip() {
        for y in [1e-4f64, 0.1, 1.0, 5.0, 30.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }
}
