use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{numel, Mask, ParameterStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<S> {
    Leaf,
    Param(usize),
    MatMul { a: Var, b: Var, shared_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: S },
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Abs(Var),
    Clamp { a: Var, lo: S, hi: S },
    Sum(Var),
    Mean(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose { a: Var, ax0: usize, ax1: usize },
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    Attention { qkv: Var, heads: usize, scale: S, probs: Vec<S> },
    LayerNorm { a: Var, gain: Var, bias: Var, normed: Vec<S>, inv_std: Vec<S> },
    Embedding { table: Var, indices: Vec<usize> },
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records operations in execution order. One tape per thread of work.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `(outer, dim, inner)` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, len: usize) -> &mut Vec<S> {
    slot.get_or_insert_with(|| vec![S::zero(); len])
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (for tests and ad-hoc checks).
    pub fn variable(&mut self, t: Tensor<S>) -> Var {
        self.push(t.shape, t.data, Op::Leaf, true)
    }

    /// Parameter `index` of `store`; its gradient flows back via
    /// [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParameterStore<S>, index: usize) -> Var {
        let p = store.get(index);
        self.push(
            p.value.shape.clone(),
            p.value.data.clone(),
            Op::Param(index),
            true,
        )
    }

    pub fn param_by_name(&mut self, store: &ParameterStore<S>, name: &str) -> Result<Var> {
        let index = store
            .index_of(name)
            .ok_or_else(|| Error::Domain(format!("unknown parameter '{name}'")))?;
        Ok(self.param(store, index))
    }

    // ---- linear algebra ----

    /// `a: [.., m, k]` times `b: [k, n]` (shared) or `b: [.., k, n]` (same leading dims).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_b = sb.len() == 2;
        if k != kb || (!shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch = numel(&sa[..sa.len() - 2]);
        let mut out = vec![S::zero(); batch * m * n];
        {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            if shared_b {
                S::gemm(batch * m, k, n, S::one(), va, k as isize, 1, vb, n as isize, 1, S::zero(), &mut out, n as isize, 1);
            } else {
                for i in 0..batch {
                    S::gemm(
                        m,
                        k,
                        n,
                        S::one(),
                        &va[i * m * k..(i + 1) * m * k],
                        k as isize,
                        1,
                        &vb[i * k * n..(i + 1) * k * n],
                        n as isize,
                        1,
                        S::zero(),
                        &mut out[i * m * n..(i + 1) * m * n],
                        n as isize,
                        1,
                    );
                }
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul { a, b, shared_b }, rg))
    }

    /// Swap two axes.
    pub fn transpose(&mut self, a: Var, ax0: usize, ax1: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if ax0 >= shape.len() || ax1 >= shape.len() {
            return Err(shape_err("transpose", &shape, &[ax0, ax1]));
        }
        let mut out_shape = shape.clone();
        out_shape.swap(ax0, ax1);
        let out = permute_axes(self.value(a), &shape, ax0, ax1);
        let rg = self.rg(&[a]);
        Ok(self.push(out_shape, out, Op::Transpose { a, ax0, ax1 }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    // ---- elementwise ----

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<(Vec<usize>, Vec<S>)> {
        self.broadcast_check(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(va.len());
        for chunk in va.chunks_exact(vb.len().max(1)) {
            out.extend(chunk.iter().zip(vb).map(|(&x, &y)| f(x, y)));
        }
        Ok((self.shape(a).to_vec(), out))
    }

    /// `a + b`; `b`'s shape must be a suffix of `a`'s (broadcast over leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Scale { a, factor }, rg)
    }

    pub fn div_scalar(&mut self, a: Var, divisor: S) -> Var {
        self.scale(a, S::one() / divisor)
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, S::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, S::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, S::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(S::zero()), Op::Relu(a))
    }

    /// `log(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, S::abs, Op::Abs(a))
    }

    /// Clip into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp { a, lo, hi })
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = sum_ordered(self.value(a));
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = S::of(self.value(a).len() as f64);
        let s = sum_ordered(self.value(a)) / n;
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Mean(a), rg)
    }

    // ---- structural ----

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::Domain("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let d = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v)[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(shape_err("slice", &shape, &[axis, start, end]));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let len = end - start;
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            out.extend_from_slice(&v[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(out_shape, out, Op::Slice { a, axis, start }, rg))
    }

    // ---- normalisation ----

    /// Softmax over the last axis restricted to `mask`.
    ///
    /// `mask` is `[rows, cols]` with `cols` = last extent and `rows` = the
    /// second-to-last extent; it broadcasts over leading axes. Masked entries
    /// are exactly zero; a fully masked row is all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &Mask) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().unwrap_or(&1);
        let rows = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        if mask.cols() != cols || mask.rows() != rows {
            return Err(shape_err("masked_softmax", &shape, &[mask.rows(), mask.cols()]));
        }
        let v = self.value(a);
        let mut out = vec![S::zero(); v.len()];
        out.copy_from_slice(v);
        for (r, ys) in out.chunks_mut(cols).enumerate() {
            softmax_row(ys, mask.row(r % rows));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            shape,
            out,
Op::MaskedSoftmax(a),
            rg,
        ))
    }

    /// Multi-head self-attention over packed projections.
    ///
    /// `qkv` is `[B, N, 3d]` holding queries, keys and values side by side;
    /// head `h` uses columns `h*d/heads..(h+1)*d/heads` of each. Weights are
    /// `masked_softmax(q kᵀ / sqrt(d/heads))` under the `[N, N]` mask; the
    /// result is `[B, N, d]` with heads concatenated. The weights stay on the
    /// node, see [`Tape::attention_weights`].
    pub fn attention(&mut self, qkv: Var, heads: usize, mask: &Mask) -> Result<Var> {
        let shape = self.shape(qkv).to_vec();
        if shape.len() != 3 || heads == 0 || !shape[2].is_multiple_of(3 * heads) {
            return Err(shape_err("attention", &shape, &[heads]));
        }
        let (b, n, d) = (shape[0], shape[1], shape[2] / 3);
        if mask.rows() != n || mask.cols() != n {
            return Err(shape_err("attention", &shape, &[mask.rows(), mask.cols()]));
        }
        let dh = d / heads;
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let v = &self.nodes[qkv.0].value;
        let mut probs = vec![S::zero(); b * heads * n * n];
        let mut out = vec![S::zero(); b * n * d];
        let (rs, nn) = ((3 * d) as isize, n as isize);
        for bi in 0..b {
            let base = bi * n * 3 * d;
            for h in 0..heads {
                let q = &v[base + h * dh..];
                let k = &v[base + d + h * dh..];
                let val = &v[base + 2 * d + h * dh..];
                let p = &mut probs[(bi * heads + h) * n * n..(bi * heads + h + 1) * n * n];
                S::gemm(n, dh, n, scale, q, rs, 1, k, 1, rs, S::zero(), p, nn, 1);
                for r in 0..n {
                    softmax_row(&mut p[r * n..(r + 1) * n], mask.row(r));
                }
                S::gemm(n, n, dh, S::one(), p, nn, 1, val, rs, 1, S::zero(), &mut out[bi * n * d + h * dh..], d as isize, 1);
            }
        }
        let rg = self.rg(&[qkv]);
        Ok(self.push(
            vec![b, n, d],
            out,
            Op::Attention {
                qkv,
                heads,
                scale,
                probs,
            },
            rg,
        ))
    }

    /// Weights `[B, heads, N, N]` of an [`Tape::attention`] node.
    pub fn attention_weights(&self, v: Var) -> Option<&[S]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().unwrap_or(&1);
        let v = self.value(a);
        let mut out = vec![S::zero(); v.len()];
        for (xs, ys) in v.chunks(cols).zip(out.chunks_mut(cols)) {
            let max = xs.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
            let lse = max + xs.iter().map(|&x| (x - max).exp()).sum::<S>().ln();
            for (x, y) in xs.iter().zip(ys.iter_mut()) {
                *y = *x - lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::LogSoftmax(a), rg)
    }

    /// Normalise the last axis to zero mean / unit variance, then `gain * x + bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap_or(&1);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", &shape, self.shape(gain)));
        }
        let eps = S::of(LAYER_NORM_EPS);
        let dn = S::of(d as f64);
        let (v, g, b) = (self.value(a), self.value(gain), self.value(bias));
        let rows = v.len() / d;
        let mut normed = vec![S::zero(); v.len()];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); v.len()];
        for r in 0..rows {
            let xs = &v[r * d..(r + 1) * d];
            let mean = xs.iter().copied().sum::<S>() / dn;
            let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / dn;
            let inv = S::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for i in 0..d {
                let n = (xs[i] - mean) * inv;
                normed[r * d + i] = n;
                out[r * d + i] = n * g[i] + b[i];
            }
        }
        let rg = self.rg(&[a, gain, bias]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                a,
                gain,
                bias,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    /// Rows `indices` of `table: [vocab, d]`, giving `[indices.len(), d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || indices.iter().any(|&i| i >= shape[0]) {
            return Err(shape_err("embedding", &shape, indices));
        }
        let d = shape[1];
        let v = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&v[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![indices.len(), d],
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate across
    /// every use of a node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backprop_node(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, shared_b } => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = numel(&sa[..sa.len() - 2]);
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], batch * m * k);
                    let vb = val(*b);
                    if *shared_b {
                        // dA = dC · Bᵀ
                        S::gemm(batch * m, n, k, S::one(), g, n as isize, 1, vb, 1, n as isize, S::one(), ga, k as isize, 1);
                    } else {
                        for i in 0..batch {
                            S::gemm(
                                m,
                                n,
                                k,
                                S::one(),
                                &g[i * m * n..(i + 1) * m * n],
                                n as isize,
                                1,
                                &vb[i * k * n..(i + 1) * k * n],
                                1,
                                n as isize,
                                S::one(),
                                &mut ga[i * m * k..(i + 1) * m * k],
                                k as isize,
                                1,
                            );
                        }
                    }
                }
                if wants(*b) {
                    let gb = accumulate(&mut grads[b.0], len(*b));
                    let va = val(*a);
                    if *shared_b {
                        // dB = Aᵀ · dC over all leading rows
                        S::gemm(k, batch * m, n, S::one(), va, 1, k as isize, g, n as isize, 1, S::one(), gb, n as isize, 1);
                    } else {
                        for i in 0..batch {
                            S::gemm(
                                k,
                                m,
                                n,
                                S::one(),
                                &va[i * m * k..(i + 1) * m * k],
                                1,
                                k as isize,
                                &g[i * m * n..(i + 1) * m * n],
                                n as isize,
                                1,
                                S::one(),
                                &mut gb[i * k * n..(i + 1) * k * n],
                                n as isize,
                                1,
                            );
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let neg = matches!(node.op, Op::Sub { .. });
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for (x, &d) in ga.iter_mut().zip(g) {
                        *x += d;
                    }
                }
                if wants(*b) {
                    let nb = len(*b);
                    let gb = accumulate(&mut grads[b.0], nb);
                    for chunk in g.chunks_exact(nb) {
                        for (x, &d) in gb.iter_mut().zip(chunk) {
                            if neg {
                                *x -= d;
                            } else {
                                *x += d;
                            }
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let nb = vb.len();
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for (xs, ds) in ga.chunks_exact_mut(nb).zip(g.chunks_exact(nb)) {
                        for ((x, &d), &y) in xs.iter_mut().zip(ds).zip(vb) {
                            *x += d * y;
                        }
                    }
                }
                if wants(*b) {
                    let gb = accumulate(&mut grads[b.0], nb);
                    for (ds, xs) in g.chunks_exact(nb).zip(va.chunks_exact(nb)) {
                        for ((y, &d), &x) in gb.iter_mut().zip(ds).zip(xs) {
                            *y += d * x;
                        }
                    }
                }
            }
            Op::Scale { a, factor } => {
                let ga = accumulate(&mut grads[a.0], g.len());
                for (x, &d) in ga.iter_mut().zip(g) {
                    *x += d * *factor;
                }
            }
            Op::Exp(a) => self.elementwise_back(*a, &node.value, g, grads, |_, y| y),
            Op::Log(a) => self.elementwise_back(*a, &node.value, g, grads, |x, _| S::one() / x),
            Op::Tanh(a) => self.elementwise_back(*a, &node.value, g, grads, |_, y| S::one() - y * y),
            Op::Sigmoid(a) => self.elementwise_back(*a, &node.value, g, grads, |_, y| y * (S::one() - y)),
            Op::Relu(a) => self.elementwise_back(*a, &node.value, g, grads, |x, _| {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }),
            Op::Softplus(a) => self.elementwise_back(*a, &node.value, g, grads, |x, _| sigmoid(x)),
            Op::Abs(a) => self.elementwise_back(*a, &node.value, g, grads, |x, _| {
                if x > S::zero() {
                    S::one()
                } else if x < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                }
            }),
            Op::Clamp { a, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                self.elementwise_back(*a, &node.value, g, grads, |x, _| {
                    if x >= lo && x <= hi {
                        S::one()
                    } else {
                        S::zero()
                    }
                })
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = len(*a);
                let d = if matches!(node.op, Op::Mean(_)) {
                    g[0] / S::of(n as f64)
                } else {
                    g[0]
                };
                let ga = accumulate(&mut grads[a.0], n);
                for x in ga.iter_mut() {
                    *x += d;
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let d = self.nodes[v.0].shape[*axis];
                    if wants(v) {
                        let gv = accumulate(&mut grads[v.0], outer * d * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                            for (x, &s) in gv[o * d * inner..(o + 1) * d * inner].iter_mut().zip(src) {
                                *x += s;
                            }
                        }
                    }
                    offset += d;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, dim, inner) = split_axis(&self.nodes[a.0].shape, *axis);
                let l = node.shape[*axis];
                let ga = accumulate(&mut grads[a.0], outer * dim * inner);
                for o in 0..outer {
                    let dst = &mut ga[(o * dim + start) * inner..(o * dim + start + l) * inner];
                    for (x, &s) in dst.iter_mut().zip(&g[o * l * inner..(o + 1) * l * inner]) {
                        *x += s;
                    }
                }
            }
            Op::Reshape(a) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                for (x, &d) in ga.iter_mut().zip(g) {
                    *x += d;
                }
            }
            Op::Transpose { a, ax0, ax1 } => {
                let back = permute_axes(g, &node.shape, *ax0, *ax1);
                let ga = accumulate(&mut grads[a.0], g.len());
                for (x, d) in ga.iter_mut().zip(back) {
                    *x += d;
                }
            }
            Op::MaskedSoftmax(a) => {
                let cols = *node.shape.last().unwrap_or(&1);
                let y = &node.value;
                let ga = accumulate(&mut grads[a.0], g.len());
                for ((ys, gs), out) in y.chunks(cols).zip(g.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let dot: S = ys.iter().zip(gs).map(|(&y, &d)| y * d).sum();
                    for ((o, &yv), &d) in out.iter_mut().zip(ys).zip(gs) {
                        *o += yv * (d - dot);
                    }
                }
            }
            Op::Attention {
                qkv,
                heads,
                scale,
                probs,
            } => {
                let (b, n, d) = (node.shape[0], node.shape[1], node.shape[2]);
                let dh = d / heads;
                let v = val(*qkv);
                let gq = accumulate(&mut grads[qkv.0], v.len());
                let (rs, nn, ds) = ((3 * d) as isize, n as isize, d as isize);
                let mut dp = vec![S::zero(); n * n];
                for bi in 0..b {
                    let base = bi * n * 3 * d;
                    for h in 0..*heads {
                        let p = &probs[(bi * heads + h) * n * n..(bi * heads + h + 1) * n * n];
                        let go = &g[bi * n * d + h * dh..];
                        // dV = Pᵀ dO
                        S::gemm(n, n, dh, S::one(), p, 1, nn, go, ds, 1, S::one(), &mut gq[base + 2 * d + h * dh..], rs, 1);
                        // dP = dO Vᵀ
                        S::gemm(n, dh, n, S::one(), go, ds, 1, &v[base + 2 * d + h * dh..], 1, rs, S::zero(), &mut dp, nn, 1);
                        // dS = P ⊙ (dP − rowsum(P ⊙ dP))
                        for r in 0..n {
                            let (pr, dr) = (&p[r * n..(r + 1) * n], &mut dp[r * n..(r + 1) * n]);
                            let dot: S = pr.iter().zip(dr.iter()).map(|(&x, &y)| x * y).sum();
                            for (y, &x) in dr.iter_mut().zip(pr) {
                                *y = x * (*y - dot);
                            }
                        }
                        // dQ = s dS K, dK = s dSᵀ Q
                        S::gemm(n, n, dh, *scale, &dp, nn, 1, &v[base + d + h * dh..], rs, 1, S::one(), &mut gq[base + h * dh..], rs, 1);
                        S::gemm(n, n, dh, *scale, &dp, 1, nn, &v[base + h * dh..], rs, 1, S::one(), &mut gq[base + d + h * dh..], rs, 1);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let cols = *node.shape.last().unwrap_or(&1);
                let y = &node.value;
                let ga = accumulate(&mut grads[a.0], g.len());
                for ((ys, gs), out) in y.chunks(cols).zip(g.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let total: S = gs.iter().copied().sum();
                    for ((o, &yv), &d) in out.iter_mut().zip(ys).zip(gs) {
                        *o += d - yv.exp() * total;
                    }
                }
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let d = *node.shape.last().unwrap_or(&1);
                let rows = g.len() / d;
                let gv = val(*gain);
                if wants(*gain) {
                    let gg = accumulate(&mut grads[gain.0], d);
                    for r in 0..rows {
                        for i in 0..d {
                            gg[i] += g[r * d + i] * normed[r * d + i];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = accumulate(&mut grads[bias.0], d);
                    for r in 0..rows {
                        for i in 0..d {
                            gb[i] += g[r * d + i];
                        }
                    }
                }
                if wants(*a) {
                    let dn_f = S::of(d as f64);
                    let ga = accumulate(&mut grads[a.0], g.len());
                    let mut dn = vec![S::zero(); d];
                    for r in 0..rows {
                        let ns = &normed[r * d..(r + 1) * d];
                        for i in 0..d {
                            dn[i] = g[r * d + i] * gv[i];
                        }
                        let mean_dn = dn.iter().copied().sum::<S>() / dn_f;
                        let mean_dn_n = dn.iter().zip(ns).map(|(&x, &n)| x * n).sum::<S>() / dn_f;
                        for i in 0..d {
                            ga[r * d + i] += inv_std[r] * (dn[i] - mean_dn - ns[i] * mean_dn_n);
                        }
                    }
                }
            }
            Op::Embedding { table, indices } => {
                let d = self.nodes[table.0].shape[1];
                let gt = accumulate(&mut grads[table.0], len(*table));
                for (row, &i) in indices.iter().enumerate() {
                    for c in 0..d {
                        gt[i * d + c] += g[row * d + c];
                    }
                }
            }
        }
    }

    /// `dx += g * f(x, y)` for ops with a pointwise derivative.
    fn elementwise_back(
        &self,
        a: Var,
        out: &[S],
        g: &[S],
        grads: &mut [Option<Vec<S>>],
        f: impl Fn(S, S) -> S,
    ) {
        if !self.nodes[a.0].requires_grad {
            return;
        }
        let x = &self.nodes[a.0].value;
        let ga = accumulate(&mut grads[a.0], g.len());
        for i in 0..g.len() {
            ga[i] += g[i] * f(x[i], out[i]);
        }
    }

    /// Add every parameter gradient on this tape into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParameterStore<S>) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(i), Some(g)) = (&node.op, grad) {
                let p = store.get_mut(*i);
                for (x, &d) in p.grad.iter_mut().zip(g) {
                    *x += d;
                }
            }
        }
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// In-place masked softmax of one row; a fully masked row becomes zeros.
fn softmax_row<S: Scalar>(row: &mut [S], allow: &[bool]) {
    let mut max = S::neg_infinity();
    for (x, &ok) in row.iter().zip(allow) {
        if ok && *x > max {
            max = *x;
        }
    }
    if max == S::neg_infinity() {
        row.iter_mut().for_each(|x| *x = S::zero());
        return;
    }
    let mut total = S::zero();
    for (x, &ok) in row.iter_mut().zip(allow) {
        if ok {
            *x = (*x - max).exp();
            total += *x;
        } else {
            *x = S::zero();
        }
    }
    let inv = S::one() / total;
    row.iter_mut().for_each(|x| *x *= inv);
}

/// Left-to-right sum; fixed order keeps results bit-reproducible.
fn sum_ordered<S: Scalar>(v: &[S]) -> S {
    v.iter().fold(S::zero(), |acc, &x| acc + x)
}

fn permute_axes<S: Scalar>(v: &[S], shape: &[usize], ax0: usize, ax1: usize) -> Vec<S> {
    if ax0 == ax1 {
        return v.to_vec();
    }
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);
    let mut in_strides = strides.clone();
    in_strides.swap(ax0, ax1);
    let mut out = Vec::with_capacity(v.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..v.len() {
        let src: usize = idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum();
        out.push(v[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}
