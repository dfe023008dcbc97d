use std::collections::HashMap;
use std::rc::Rc;

use rustfft::num_complex::Complex;

use super::kernels::{gemm, Mat};
use super::{ParamId, ParamStore, Tensor};
use crate::spectral::plan;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
    AddMid { a: Var, b: Var, p: usize, q: usize, r: usize },
    Scale(Var, f64),
    MulConst(Var, Rc<Vec<f64>>),
    RowAffine { a: Var, scale: Rc<Vec<f64>> },
    Gelu(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    Standardize { a: Var, rstd: Vec<f64>, skip: Option<Rc<Vec<bool>>> },
    Gather { a: Var, idx: Rc<Vec<usize>> },
    Concat { parts: Vec<Var>, outer: usize, blocks: Vec<usize> },
    Reshape(Var),
    SpectralScale { x: Var, gain: Var },
    Mse { pred: Var, target: Rc<Tensor> },
    GaussNll { mu: Var, logvar: Var, target: Rc<Tensor> },
    Sum(Var),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Per-row statistics saved by [`Graph::standardize`].
#[derive(Debug, Clone)]
pub struct RowStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Reverse-mode autodiff tape.
///
/// Every operation evaluates eagerly and records how to propagate gradients;
/// [`Graph::backward`] walks the record in reverse.
pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::detached()
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store: Some(store), nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    /// A graph without parameters, for pure functional use.
    pub fn detached() -> Self {
        Self { store: None, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.expect("param node without store").get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient can be queried after [`Graph::backward`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Parameter leaf; frozen parameters do not require gradients.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self.store.expect("Graph::param on a detached graph");
        let requires_grad = store.is_trainable(id);
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf, requires_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    // ---------------------------------------------------------------- ops

    /// Batched `a @ b` (or `a @ b^T` when `tb`). Leading axes are batch axes;
    /// either operand may have a single batch that is broadcast.
    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Var {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (ba, m, k) = split_mat(&ash);
        let (bb, r0, r1) = split_mat(&bsh);
        let (kb, n) = if tb { (r1, r0) } else { (r0, r1) };
        assert_eq!(k, kb, "matmul inner dims {ash:?} x {bsh:?} (tb={tb})");
        assert!(ba == bb || ba == 1 || bb == 1, "matmul batch {ash:?} x {bsh:?}");
        let batch = ba.max(bb);
        let mut out_shape = if ba >= bb { ash[..ash.len() - 2].to_vec() } else { bsh[..bsh.len() - 2].to_vec() };
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let bmat = |i: usize| {
                let off = if bb == 1 { 0 } else { i * k * n };
                let raw = &bv[off..off + k * n];
                if tb { Mat::row_major(raw, n, k).t() } else { Mat::row_major(raw, k, n) }
            };
            if bb == 1 {
                gemm(Mat::row_major(av, ba * m, k), bmat(0), &mut out[..ba * m * n], 0.0);
            } else {
                for i in 0..batch {
                    let off = if ba == 1 { 0 } else { i * m * k };
                    let am = Mat::row_major(&av[off..off + m * k], m, k);
                    gemm(am, bmat(i), &mut out[i * m * n..(i + 1) * m * n], 0.0);
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&out_shape, out), Op::MatMul { a, b, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_vec(av.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `bias` (shape `[R]`) along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let r = self.value(bias).len();
        let av = self.value(a);
        assert_eq!(av.last_dim(), r, "bias length");
        let bv = self.value(bias).data();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(r) {
            for (o, b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(out, Op::AddBias(a, bias), rg)
    }

    /// Multiplies by `gain` (shape `[R]`) along the last axis of `a`.
    pub fn mul_bias(&mut self, a: Var, gain: Var) -> Var {
        let r = self.value(gain).len();
        let av = self.value(a);
        assert_eq!(av.last_dim(), r, "gain length");
        let gv = self.value(gain).data();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(r) {
            for (o, g) in row.iter_mut().zip(gv) {
                *o *= g;
            }
        }
        let rg = self.rg(a) || self.rg(gain);
        self.push(out, Op::MulBias(a, gain), rg)
    }

    /// `a[p, q, r] + b[p, r]`: `b` is broadcast over the middle axis.
    pub fn add_mid(&mut self, a: Var, b: Var, p: usize, q: usize, r: usize) -> Var {
        assert_eq!(self.value(a).len(), p * q * r, "add_mid lhs");
        assert_eq!(self.value(b).len(), p * r, "add_mid rhs");
        let mut out = self.value(a).clone();
        let bv = self.value(b).data();
        for (pi, block) in out.data_mut().chunks_mut(q * r).enumerate() {
            let brow = &bv[pi * r..(pi + 1) * r];
            for row in block.chunks_mut(r) {
                for (o, x) in row.iter_mut().zip(brow) {
                    *o += x;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddMid { a, b, p, q, r }, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, a: Var, c: Rc<Vec<f64>>) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), c.len(), "mul_const length");
        let data = av.data().iter().zip(c.iter()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(av.shape(), data);
        let rg = self.rg(a);
        self.push(out, Op::MulConst(a, c), rg)
    }

    /// Viewing `a` as `[rows, inner]`, computes `a * scale[row] + shift[row]`
    /// with constant per-row coefficients.
    pub fn row_affine(&mut self, a: Var, scale: Rc<Vec<f64>>, shift: &[f64]) -> Var {
        let rows = scale.len();
        assert_eq!(shift.len(), rows);
        let av = self.value(a);
        assert_eq!(av.len() % rows, 0, "row_affine rows");
        let inner = av.len() / rows;
        let mut out = av.clone();
        for (r, row) in out.data_mut().chunks_mut(inner).enumerate() {
            for v in row {
                *v = *v * scale[r] + shift[r];
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::RowAffine { a, scale }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(out, Op::Softplus(a), rg)
    }

    /// Clamps to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(out, Op::Clamp(a, lo, hi), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let r = av.last_dim();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(r) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Normalizes every row of the last axis to zero mean and unit variance,
    /// `(x - mean) / sqrt(var + var_eps)` with population variance. Rows with
    /// `skip[row] == true` pass through unchanged (stats 0 / 1).
    pub fn standardize(
        &mut self,
        a: Var,
        var_eps: f64,
        skip: Option<Rc<Vec<bool>>>,
    ) -> (Var, RowStats) {
        let av = self.value(a);
        let r = av.last_dim();
        let rows = av.len() / r;
        if let Some(s) = &skip {
            assert_eq!(s.len(), rows, "standardize skip mask");
        }
        let mut out = av.clone();
        let mut stats = RowStats { mean: vec![0.0; rows], std: vec![1.0; rows] };
        let mut rstd = vec![1.0; rows];
        for (i, row) in out.data_mut().chunks_mut(r).enumerate() {
            if skip.as_ref().is_some_and(|s| s[i]) {
                continue;
            }
            let mean = row.iter().sum::<f64>() / r as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / r as f64;
            let sd = (var + var_eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) / sd;
            }
            stats.mean[i] = mean;
            stats.std[i] = sd;
            rstd[i] = 1.0 / sd;
        }
        let rg = self.rg(a);
        (self.push(out, Op::Standardize { a, rstd, skip }, rg), stats)
    }

    /// `out[i] = a[idx[i]]` over the flattened data, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, idx: Rc<Vec<usize>>, shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), idx.len(), "gather shape");
        let av = self.value(a).data();
        let data = idx.iter().map(|&i| av[i]).collect();
        let rg = self.rg(a);
        self.push(Tensor::from_vec(shape, data), Op::Gather { a, idx }, rg)
    }

    /// Permutes axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let shape = self.shape(a).to_vec();
        assert_eq!(perm.len(), shape.len());
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut in_strides = vec![1; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total: usize = shape.iter().product();
        let mut idx = Vec::with_capacity(total);
        let mut counter = vec![0usize; shape.len()];
        let mut offset = 0usize;
        for _ in 0..total {
            idx.push(offset);
            for ax in (0..counter.len()).rev() {
                counter[ax] += 1;
                offset += strides[ax];
                if counter[ax] < out_shape[ax] {
                    break;
                }
                offset -= strides[ax] * counter[ax];
                counter[ax] = 0;
            }
        }
        self.gather(a, Rc::new(idx), &out_shape)
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut blocks = Vec::with_capacity(parts.len());
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank");
            assert_eq!(&s[..axis], &first[..axis], "concat outer axes");
            assert_eq!(&s[axis + 1..], &first[axis + 1..], "concat inner axes");
            blocks.push(s[axis] * inner);
            total_axis += s[axis];
        }
        let block_sum: usize = blocks.iter().sum();
        let mut out = Vec::with_capacity(outer * block_sum);
        for o in 0..outer {
            for (&p, &blk) in parts.iter().zip(&blocks) {
                out.extend_from_slice(&self.value(p).data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = first;
        shape[axis] = total_axis;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(&shape, out), Op::Concat { parts: parts.to_vec(), outer, blocks }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    /// Real spectral scaling: every row `x[r, :]` of length `L` becomes
    /// `IFFT(FFT(x_r) * gain[r, :])`, where `gain` has `L/2 + 1` one-sided bins
    /// mirrored onto the negative frequencies.
    pub fn spectral_scale(&mut self, x: Var, gain: Var) -> Var {
        let len = self.value(x).last_dim();
        let bins = len / 2 + 1;
        let rows = self.value(x).len() / len;
        assert_eq!(self.value(gain).len(), rows * bins, "spectral gain shape");
        let mut out = self.value(x).clone();
        let gv = self.value(gain).data();
        spectral_rows(out.data_mut(), gv, len);
        let rg = self.rg(x) || self.rg(gain);
        self.push(out, Op::SpectralScale { x, gain }, rg)
    }

    /// Mean squared error against a constant target, as a `[1]` tensor.
    pub fn mse(&mut self, pred: Var, target: Rc<Tensor>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.len(), target.len(), "mse shape");
        let n = pv.len() as f64;
        let loss = pv.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
        let rg = self.rg(pred);
        self.push(Tensor::scalar(loss), Op::Mse { pred, target }, rg)
    }

    /// Mean Gaussian negative log-likelihood `1/2 ((t - mu)^2 / exp(v) + v)`
    /// (the constant `log(2 pi) / 2` is omitted).
    pub fn gaussian_nll(&mut self, mu: Var, logvar: Var, target: Rc<Tensor>) -> Var {
        let (mv, vv) = (self.value(mu), self.value(logvar));
        assert_eq!(mv.len(), target.len(), "nll mean shape");
        assert_eq!(vv.len(), target.len(), "nll logvar shape");
        let n = mv.len() as f64;
        let loss = mv
            .data()
            .iter()
            .zip(vv.data())
            .zip(target.data())
            .map(|((m, v), t)| 0.5 * ((t - m) * (t - m) * (-v).exp() + v))
            .sum::<f64>()
            / n;
        let rg = self.rg(mu) || self.rg(logvar);
        self.push(Tensor::scalar(loss), Op::GaussNll { mu, logvar, target }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(i, g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        let params = self.param_nodes.iter().map(|(&id, v)| (id, v.0)).collect();
        Gradients { leaves, params }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::MatMul { a, b, tb } => self.matmul_backward(*a, *b, *tb, g, grads),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = zip_map(g, bv, |x, y| x * y);
                    self.accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = zip_map(g, av, |x, y| x * y);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*bias) {
                    let bv = self.value(*bias);
                    let r = bv.len();
                    let mut d = vec![0.0; r];
                    for row in g.data().chunks(r) {
                        for (acc, x) in d.iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_vec(bv.shape(), d));
                }
            }
            Op::MulBias(a, gain) => {
                let gv = self.value(*gain);
                let r = gv.len();
                if self.rg(*a) {
                    let mut d = g.clone();
                    for row in d.data_mut().chunks_mut(r) {
                        for (x, w) in row.iter_mut().zip(gv.data()) {
                            *x *= w;
                        }
                    }
                    self.accumulate(grads, *a, d);
                }
                if self.rg(*gain) {
                    let av = self.value(*a);
                    let mut d = vec![0.0; r];
                    for (grow, arow) in g.data().chunks(r).zip(av.data().chunks(r)) {
                        for ((acc, x), y) in d.iter_mut().zip(grow).zip(arow) {
                            *acc += x * y;
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::from_vec(gv.shape(), d));
                }
            }
            Op::AddMid { a, b, p, q, r } => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let mut d = vec![0.0; p * r];
                    for (pi, block) in g.data().chunks(q * r).enumerate() {
                        let drow = &mut d[pi * r..(pi + 1) * r];
                        for row in block.chunks(*r) {
                            for (acc, x) in drow.iter_mut().zip(row) {
                                *acc += x;
                            }
                        }
                    }
                    let shape = self.shape(*b).to_vec();
                    self.accumulate(grads, *b, Tensor::from_vec(&shape, d));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::MulConst(a, c) => {
                let data = g.data().iter().zip(c.iter()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.shape(), data));
            }
            Op::RowAffine { a, scale } => {
                let inner = g.len() / scale.len();
                let mut d = g.clone();
                for (r, row) in d.data_mut().chunks_mut(inner).enumerate() {
                    for v in row {
                        *v *= scale[r];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let d = zip_map(g, self.value(*a), |x, y| x * gelu_grad(y));
                self.accumulate(grads, *a, d);
            }
            Op::Softplus(a) => {
                let d = zip_map(g, self.value(*a), |x, y| x * sigmoid(y));
                self.accumulate(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let d = zip_map(g, self.value(*a), |x, y| if y < *lo || y > *hi { 0.0 } else { x });
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let r = out.last_dim();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(r).zip(out.data().chunks(r)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for (x, y) in drow.iter_mut().zip(yrow) {
                        *x = y * (*x - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Standardize { a, rstd, skip } => {
                let r = out.last_dim();
                let mut d = g.clone();
                for (row, (drow, yrow)) in d.data_mut().chunks_mut(r).zip(out.data().chunks(r)).enumerate() {
                    if skip.as_ref().is_some_and(|s| s[row]) {
                        continue;
                    }
                    let mean_d = drow.iter().sum::<f64>() / r as f64;
                    let mean_dy = drow.iter().zip(yrow).map(|(x, y)| x * y).sum::<f64>() / r as f64;
                    for (x, y) in drow.iter_mut().zip(yrow) {
                        *x = rstd[row] * (*x - mean_d - y * mean_dy);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Gather { a, idx } => {
                let shape = self.shape(*a).to_vec();
                let mut d = Tensor::zeros(&shape);
                let dd = d.data_mut();
                for (&j, x) in idx.iter().zip(g.data()) {
                    dd[j] += x;
                }
                self.accumulate(grads, *a, d);
            }
            Op::Concat { parts, outer, blocks } => {
                let total: usize = blocks.iter().sum();
                let mut start = 0;
                for (&p, &blk) in parts.iter().zip(blocks) {
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(outer * blk);
                        for o in 0..*outer {
                            let base = o * total + start;
                            d.extend_from_slice(&g.data()[base..base + blk]);
                        }
                        let shape = self.shape(p).to_vec();
                        self.accumulate(grads, p, Tensor::from_vec(&shape, d));
                    }
                    start += blk;
                }
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(&shape));
            }
            Op::SpectralScale { x, gain } => self.spectral_backward(*x, *gain, g, grads),
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let scale = 2.0 * g.item() / pv.len() as f64;
                let d = zip_map(pv, target, |p, t| scale * (p - t));
                self.accumulate(grads, *pred, d);
            }
            Op::GaussNll { mu, logvar, target } => {
                let (mv, vv) = (self.value(*mu), self.value(*logvar));
                let scale = g.item() / mv.len() as f64;
                if self.rg(*mu) {
                    let data = mv
                        .data()
                        .iter()
                        .zip(vv.data())
                        .zip(target.data())
                        .map(|((m, v), t)| -scale * (t - m) * (-v).exp())
                        .collect();
                    self.accumulate(grads, *mu, Tensor::from_vec(mv.shape(), data));
                }
                if self.rg(*logvar) {
                    let data = mv
                        .data()
                        .iter()
                        .zip(vv.data())
                        .zip(target.data())
                        .map(|((m, v), t)| 0.5 * scale * (1.0 - (t - m) * (t - m) * (-v).exp()))
                        .collect();
                    self.accumulate(grads, *logvar, Tensor::from_vec(vv.shape(), data));
                }
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, tb: bool, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (av, bv) = (self.value(a), self.value(b));
        let (ba, m, k) = split_mat(av.shape());
        let (bb, r0, r1) = split_mat(bv.shape());
        let n = if tb { r0 } else { r1 };
        let batch = ba.max(bb);
        let gd = g.data();
        // op(B) for batch i as a strided view of shape [k, n]
        let opb = |i: usize| {
            let off = if bb == 1 { 0 } else { i * k * n };
            let raw = &bv.data()[off..off + k * n];
            if tb { Mat::row_major(raw, n, k).t() } else { Mat::row_major(raw, k, n) }
        };
        if self.rg(a) {
            let mut d = vec![0.0; ba * m * k];
            if bb == 1 {
                gemm(Mat::row_major(gd, ba * m, n), opb(0).t(), &mut d, 0.0);
            } else {
                for i in 0..batch {
                    let gi = Mat::row_major(&gd[i * m * n..(i + 1) * m * n], m, n);
                    let (off, beta) = if ba == 1 { (0, if i == 0 { 0.0 } else { 1.0 }) } else { (i * m * k, 0.0) };
                    gemm(gi, opb(i).t(), &mut d[off..off + m * k], beta);
                }
            }
            self.accumulate(grads, a, Tensor::from_vec(av.shape(), d));
        }
        if self.rg(b) {
            let mut d = vec![0.0; bb * k * n];
            let amat = |rows: usize, off: usize| Mat::row_major(&av.data()[off..off + rows * k], rows, k);
            if bb == 1 && ba >= 1 {
                let af = amat(ba * m, 0);
                let gf = Mat::row_major(gd, ba * m, n);
                if tb {
                    gemm(gf.t(), af, &mut d, 0.0);
                } else {
                    gemm(af.t(), gf, &mut d, 0.0);
                }
            } else {
                for i in 0..batch {
                    let ai = amat(m, if ba == 1 { 0 } else { i * m * k });
                    let gi = Mat::row_major(&gd[i * m * n..(i + 1) * m * n], m, n);
                    let dst = &mut d[i * k * n..(i + 1) * k * n];
                    if tb {
                        gemm(gi.t(), ai, dst, 0.0);
                    } else {
                        gemm(ai.t(), gi, dst, 0.0);
                    }
                }
            }
            self.accumulate(grads, b, Tensor::from_vec(bv.shape(), d));
        }
    }

    fn spectral_backward(&self, x: Var, gain: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (xv, gv) = (self.value(x), self.value(gain));
        let len = xv.last_dim();
        let bins = len / 2 + 1;
        if self.rg(x) {
            // The operator is symmetric: the adjoint applies the same gains.
            let mut d = g.clone();
            spectral_rows(d.data_mut(), gv.data(), len);
            self.accumulate(grads, x, d);
        }
        if self.rg(gain) {
            let (fwd, _) = plan(len);
            let mut xs = vec![Complex::default(); len];
            let mut gs = vec![Complex::default(); len];
            let mut scratch = vec![Complex::default(); fwd.get_inplace_scratch_len()];
            let mut d = vec![0.0; gv.len()];
            let inv_len = 1.0 / len as f64;
            for (r, (xrow, grow)) in xv.data().chunks(len).zip(g.data().chunks(len)).enumerate() {
                for ((xc, gc), (&xi, &gi)) in xs.iter_mut().zip(gs.iter_mut()).zip(xrow.iter().zip(grow)) {
                    *xc = Complex::new(xi, 0.0);
                    *gc = Complex::new(gi, 0.0);
                }
                fwd.process_with_scratch(&mut xs, &mut scratch);
                fwd.process_with_scratch(&mut gs, &mut scratch);
                let drow = &mut d[r * bins..(r + 1) * bins];
                for j in 0..len {
                    let k = j.min(len - j);
                    drow[k] += (xs[j] * gs[j].conj()).re * inv_len;
                }
            }
            self.accumulate(grads, gain, Tensor::from_vec(gv.shape(), d));
        }
    }
}

/// Gradients of the leaves reached by one backward pass.
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|n| self.leaves.get(n))
    }

    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    /// Parameter gradients sorted by parameter id.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<_> =
            self.params.iter().filter_map(|(&id, n)| self.leaves.remove(n).map(|t| (id, t))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn split_mat(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "matmul operand needs rank >= 2, got {shape:?}");
    let n = shape.len();
    (shape[..n - 2].iter().product(), shape[n - 2], shape[n - 1])
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

fn spectral_rows(data: &mut [f64], gains: &[f64], len: usize) {
    let bins = len / 2 + 1;
    let (fwd, inv) = plan(len);
    let mut buf = vec![Complex::default(); len];
    let mut scratch = vec![Complex::default(); fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len())];
    let inv_len = 1.0 / len as f64;
    for (row, grow) in data.chunks_mut(len).zip(gains.chunks(bins)) {
        for (b, &v) in buf.iter_mut().zip(row.iter()) {
            *b = Complex::new(v, 0.0);
        }
        fwd.process_with_scratch(&mut buf, &mut scratch);
        for (j, b) in buf.iter_mut().enumerate() {
            *b *= grow[j.min(len - j)];
        }
        inv.process_with_scratch(&mut buf, &mut scratch);
        for (v, b) in row.iter_mut().zip(&buf) {
            *v = b.re * inv_len;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

// Tanh approximation, evaluated through `(1 + tanh u) / 2 = sigmoid(2u)`,
// which needs a single `exp`.
pub(crate) fn gelu(x: f64) -> f64 {
    x * sigmoid(2.0 * GELU_C * (x + 0.044715 * x * x * x))
}

fn gelu_grad(x: f64) -> f64 {
    let s = sigmoid(2.0 * GELU_C * (x + 0.044715 * x * x * x));
    // 1 - tanh^2 = 4 s (1 - s)
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
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
