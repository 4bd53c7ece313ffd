//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a define-by-run tape: every operation executes eagerly and
//! records enough to replay adjoints. Graphs are rebuilt per forward pass and
//! form single-owner sessions; distinct graphs may run on distinct threads.

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Elementwise activation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

/// Axis a matrix reduction runs across.
///
/// `Cols` reduces across the column index (one value per row), `Rows` across
/// the row index (one value per column).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolAxis {
    Rows,
    Cols,
}

/// Reduction kind for [`Graph::pool`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Sum,
    Avg,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Reshape { a: usize },
    AddElem { a: usize, b: usize },
    SubElem { a: usize, b: usize },
    MulElem { a: usize, b: usize },
    ScaleConst { a: usize, c: T },
    BroadcastAddCols { m: usize, v: usize },
    ScaleCols { m: usize, v: usize },
    ScaleRows { m: usize, v: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Softmax { a: usize },
    Pool { a: usize, axis: PoolAxis, kind: PoolKind },
    Concat { a: usize, b: usize },
    Conv2d { input: usize, kernels: usize, stride: usize, pad: usize },
    SumAll { a: usize },
}

struct Node<T> {
    tensor: Tensor<T>,
    op: Op<T>,
    // true when this node or any ancestor requires gradients
    needs_grad: bool,
}

/// Define-by-run computation graph.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an existing tensor as a leaf.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> TensorId {
        let needs_grad = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Leaf that does not participate in gradients.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<TensorId> {
        Ok(self.leaf(Tensor::new(shape, values)?))
    }

    /// Leaf that accumulates gradients; values are copied from `t`.
    pub fn param(&mut self, t: &Tensor<T>) -> TensorId {
        let mut copy = t.clone();
        copy.requires_grad = true;
        copy.grad = None;
        self.leaf(copy)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].tensor
    }

    pub fn values(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].tensor.values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    /// Gradient accumulated by the last [`Graph::backward`] call, if any.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    fn push(&mut self, tensor: Tensor<T>, op: Op<T>, needs_grad: bool) -> TensorId {
        debug_assert_eq!(
            tensor.values.len(),
            tensor.shape.iter().product::<usize>()
        );
        let id = self.nodes.len();
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        TensorId(id)
    }

    fn out(&mut self, shape: Vec<usize>, values: Vec<T>, op: Op<T>, needs: bool) -> TensorId {
        self.push(
            Tensor {
                shape,
                values,
                requires_grad: false,
                grad: None,
            },
            op,
            needs,
        )
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn matrix_dims(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        self.tensor(id).as_matrix_dims().ok_or_else(|| Error::ShapeMismatch {
            op,
            left: self.shape(id).to_vec(),
            right: vec![],
        })
    }

    // ── forward operations ──────────────────────────────────────────────

    /// Matrix product of `a` (p×q) and `b` (q×r).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (p, q) = self.matrix_dims(a, "matmul")?;
        let (q2, r) = self.matrix_dims(b, "matmul")?;
        if q != q2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let av = self.values(a);
        let bv = self.values(b);
        let mut out = vec![T::zero(); p * r];
        for i in 0..p {
            for k in 0..q {
                let aik = av[i * q + k];
                let brow = &bv[k * r..(k + 1) * r];
                let orow = &mut out[i * r..(i + 1) * r];
                for (o, &bkj) in orow.iter_mut().zip(brow.iter()) {
                    *o = *o + aik * bkj;
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(vec![p, r], out, Op::MatMul { a: a.0, b: b.0 }, needs))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let av = self.values(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.out(vec![c, r], out, Op::Transpose { a: a.0 }, needs))
    }

    /// Reinterpret the same values under a new shape of equal element count.
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let len: usize = shape.iter().product();
        if len != self.values(a).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape,
            });
        }
        let values = self.values(a).to_vec();
        let needs = self.needs(a);
        Ok(self.out(shape, values, Op::Reshape { a: a.0 }, needs))
    }

    fn elementwise(
        &mut self,
        a: TensorId,
        b: TensorId,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: op_name,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let values: Vec<T> = self
            .values(a)
            .iter()
            .zip(self.values(b).iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(shape, values, op, needs))
    }

    pub fn add_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, "add_elem", |x, y| x + y, Op::AddElem { a: a.0, b: b.0 })
    }

    pub fn sub_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, "sub_elem", |x, y| x - y, Op::SubElem { a: a.0, b: b.0 })
    }

    pub fn mul_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, "mul_elem", |x, y| x * y, Op::MulElem { a: a.0, b: b.0 })
    }

    /// Multiply every element by a constant.
    pub fn scale_const(&mut self, a: TensorId, c: T) -> TensorId {
        let values: Vec<T> = self.values(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.out(shape, values, Op::ScaleConst { a: a.0, c }, needs)
    }

    /// Add vector `v` (length k) to each column of `m` (k×m).
    pub fn broadcast_add_cols(&mut self, m: TensorId, v: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.matrix_dims(m, "broadcast_add_cols")?;
        if self.shape(v) != [rows] {
            return Err(Error::ShapeMismatch {
                op: "broadcast_add_cols",
                left: self.shape(m).to_vec(),
                right: self.shape(v).to_vec(),
            });
        }
        let mv = self.values(m);
        let vv = self.values(v);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let vi = vv[i];
            for j in 0..cols {
                out.push(mv[i * cols + j] + vi);
            }
        }
        let needs = self.needs(m) || self.needs(v);
        Ok(self.out(
            vec![rows, cols],
            out,
            Op::BroadcastAddCols { m: m.0, v: v.0 },
            needs,
        ))
    }

    /// Scale column j of `m` (k×m) by `v[j]` (length m).
    pub fn scale_cols(&mut self, m: TensorId, v: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.matrix_dims(m, "scale_cols")?;
        if self.shape(v) != [cols] {
            return Err(Error::ShapeMismatch {
                op: "scale_cols",
                left: self.shape(m).to_vec(),
                right: self.shape(v).to_vec(),
            });
        }
        let mv = self.values(m);
        let vv = self.values(v);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                out.push(mv[i * cols + j] * vv[j]);
            }
        }
        let needs = self.needs(m) || self.needs(v);
        Ok(self.out(vec![rows, cols], out, Op::ScaleCols { m: m.0, v: v.0 }, needs))
    }

    /// Scale row i of `m` (k×m) by `v[i]` (length k).
    pub fn scale_rows(&mut self, m: TensorId, v: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.matrix_dims(m, "scale_rows")?;
        if self.shape(v) != [rows] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                left: self.shape(m).to_vec(),
                right: self.shape(v).to_vec(),
            });
        }
        let mv = self.values(m);
        let vv = self.values(v);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let vi = vv[i];
            for j in 0..cols {
                out.push(mv[i * cols + j] * vi);
            }
        }
        let needs = self.needs(m) || self.needs(v);
        Ok(self.out(vec![rows, cols], out, Op::ScaleRows { m: m.0, v: v.0 }, needs))
    }

    /// Elementwise activation.
    pub fn activation(&mut self, a: TensorId, kind: Activation) -> TensorId {
        match kind {
            Activation::Tanh => self.tanh(a),
            Activation::Sigmoid => self.sigmoid(a),
        }
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let values: Vec<T> = self.values(a).iter().map(|&x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.out(shape, values, Op::Tanh { a: a.0 }, needs)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let values: Vec<T> = self.values(a).iter().map(|&x| stable_sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.out(shape, values, Op::Sigmoid { a: a.0 }, needs)
    }

    /// Softmax over a vector, computed with max-subtraction.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        if !self.tensor(a).is_vector() {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                left: self.shape(a).to_vec(),
                right: vec![],
            });
        }
        let logits = self.values(a);
        let max = logits
            .iter()
            .fold(T::neg_infinity(), |m, &x| if x > m { x } else { m });
        let exps: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
        let total = exps.iter().fold(T::zero(), |s, &e| s + e);
        let values: Vec<T> = exps.iter().map(|&e| e / total).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.out(shape, values, Op::Softmax { a: a.0 }, needs))
    }

    /// Reduce a matrix across the given axis.
    ///
    /// `PoolAxis::Cols` yields one value per row; `PoolAxis::Rows` one per
    /// column. `PoolKind::Avg` divides by the reduced extent.
    pub fn pool(&mut self, a: TensorId, axis: PoolAxis, kind: PoolKind) -> Result<TensorId> {
        let (rows, cols) = self.matrix_dims(a, "pool")?;
        let av = self.values(a);
        let (out_len, reduced) = match axis {
            PoolAxis::Cols => (rows, cols),
            PoolAxis::Rows => (cols, rows),
        };
        let mut out = vec![T::zero(); out_len];
        match axis {
            PoolAxis::Cols => {
                for i in 0..rows {
                    let mut acc = T::zero();
                    for j in 0..cols {
                        acc = acc + av[i * cols + j];
                    }
                    out[i] = acc;
                }
            }
            PoolAxis::Rows => {
                for i in 0..rows {
                    for j in 0..cols {
                        out[j] = out[j] + av[i * cols + j];
                    }
                }
            }
        }
        if kind == PoolKind::Avg {
            let denom = T::of_f64(reduced as f64);
            for o in out.iter_mut() {
                *o = *o / denom;
            }
        }
        let needs = self.needs(a);
        Ok(self.out(vec![out_len], out, Op::Pool { a: a.0, axis, kind }, needs))
    }

    /// Concatenate two vectors.
    pub fn concat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if !self.tensor(a).is_vector() || !self.tensor(b).is_vector() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut values = self.values(a).to_vec();
        values.extend_from_slice(self.values(b));
        let len = values.len();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(vec![len], values, Op::Concat { a: a.0, b: b.0 }, needs))
    }

    /// 2-D cross-correlation of `input` (c_in×H×W) with `kernels`
    /// (c_out×c_in×kh×kw). The output size must divide out exactly.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernels: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let in_shape = self.shape(input).to_vec();
        let k_shape = self.shape(kernels).to_vec();
        let (c_in, ih, iw) = match in_shape.as_slice() {
            [c, h, w] => (*c, *h, *w),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    left: in_shape,
                    right: k_shape,
                })
            }
        };
        let (c_out, kc, kh, kw) = match k_shape.as_slice() {
            [o, c, h, w] => (*o, *c, *h, *w),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    left: in_shape,
                    right: k_shape,
                })
            }
        };
        if kc != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: in_shape,
                right: k_shape,
            });
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (oh, ow) = (
            conv_out_extent(ih, kh, stride, pad)?,
            conv_out_extent(iw, kw, stride, pad)?,
        );
        let iv = self.values(input);
        let kv = self.values(kernels);
        let mut out = vec![T::zero(); c_out * oh * ow];
        // accumulate one kernel tap at a time over the valid output window,
        // keeping the inner loop branch-free
        for oc in 0..c_out {
            let obase = oc * oh * ow;
            for ic in 0..c_in {
                let ibase = ic * ih * iw;
                let kbase = (oc * c_in + ic) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_out_range(oh, ih, ky, stride, pad);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = valid_out_range(ow, iw, kx, stride, pad);
                        if ox_lo >= ox_hi || oy_lo >= oy_hi {
                            continue;
                        }
                        let kval = kv[kbase + ky * kw + kx];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let orow = obase + oy * ow;
                            let mut ii = ibase + iy * iw + (ox_lo * stride + kx - pad);
                            for ox in ox_lo..ox_hi {
                                out[orow + ox] = out[orow + ox] + kval * iv[ii];
                                ii += stride;
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(input) || self.needs(kernels);
        Ok(self.out(
            vec![c_out, oh, ow],
            out,
            Op::Conv2d {
                input: input.0,
                kernels: kernels.0,
                stride,
                pad,
            },
            needs,
        ))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let total = self.values(a).iter().fold(T::zero(), |s, &x| s + x);
        let needs = self.needs(a);
        self.out(vec![1], vec![total], Op::SumAll { a: a.0 }, needs)
    }

    // ── backward pass ───────────────────────────────────────────────────

    /// Populate `grad` on every node that requires gradients, seeding the
    /// scalar `loss` with 1. Visits each recorded node exactly once, in
    /// reverse topological (insertion) order; grads from a previous call are
    /// reset first, so repeated calls are deterministic.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.tensor(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in self.nodes.iter_mut() {
            node.tensor.grad = if node.needs_grad {
                Some(vec![T::zero(); node.tensor.values.len()])
            } else {
                None
            };
        }
        if !self.nodes[loss.0].needs_grad {
            // loss is constant w.r.t. every parameter; all grads stay zero
            return Ok(());
        }
        self.nodes[loss.0].tensor.grad.as_mut().expect("seeded")[0] = T::one();

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => self.back_matmul(idx, a, b),
                Op::Transpose { a } => self.back_transpose(idx, a),
                Op::Reshape { a } => self.back_passthrough(idx, a),
                Op::AddElem { a, b } => {
                    self.accumulate_mapped(idx, a, |g, _| g);
                    self.accumulate_mapped(idx, b, |g, _| g);
                }
                Op::SubElem { a, b } => {
                    self.accumulate_mapped(idx, a, |g, _| g);
                    self.accumulate_mapped(idx, b, |g, _| -g);
                }
                Op::MulElem { a, b } => {
                    self.back_mul_elem(idx, a, b);
                }
                Op::ScaleConst { a, c } => self.accumulate_mapped(idx, a, |g, _| g * c),
                Op::BroadcastAddCols { m, v } => self.back_broadcast_add_cols(idx, m, v),
                Op::ScaleCols { m, v } => self.back_scale_cols(idx, m, v),
                Op::ScaleRows { m, v } => self.back_scale_rows(idx, m, v),
                Op::Tanh { a } => {
                    self.back_unary_from_output(idx, a, |g, y| g * (T::one() - y * y))
                }
                Op::Sigmoid { a } => {
                    self.back_unary_from_output(idx, a, |g, y| g * y * (T::one() - y))
                }
                Op::Softmax { a } => self.back_softmax(idx, a),
                Op::Pool { a, axis, kind } => self.back_pool(idx, a, axis, kind),
                Op::Concat { a, b } => self.back_concat(idx, a, b),
                Op::Conv2d {
                    input,
                    kernels,
                    stride,
                    pad,
                } => self.back_conv2d(idx, input, kernels, stride, pad),
                Op::SumAll { a } => self.back_sum_all(idx, a),
            }
        }
        Ok(())
    }

    fn out_grad(&self, idx: usize) -> Vec<T> {
        self.nodes[idx].tensor.grad.clone().expect("needs_grad node has grad")
    }

    fn input_needs(&self, input: usize) -> bool {
        self.nodes[input].needs_grad
    }

    // grad contribution that only depends on (out_grad, input_value) pairs
    fn accumulate_mapped(&mut self, idx: usize, input: usize, f: impl Fn(T, T) -> T) {
        if !self.input_needs(input) {
            return;
        }
        let g = self.out_grad(idx);
        let vals = self.nodes[input].tensor.values.clone();
        let dst = self.nodes[input].tensor.grad.as_mut().expect("grad buffer");
        for ((d, &gi), &xi) in dst.iter_mut().zip(g.iter()).zip(vals.iter()) {
            *d = *d + f(gi, xi);
        }
    }

    // grad contribution expressed through the node's own output values
    fn back_unary_from_output(&mut self, idx: usize, input: usize, f: impl Fn(T, T) -> T) {
        if !self.input_needs(input) {
            return;
        }
        let g = self.out_grad(idx);
        let y = self.nodes[idx].tensor.values.clone();
        let dst = self.nodes[input].tensor.grad.as_mut().expect("grad buffer");
        for ((d, &gi), &yi) in dst.iter_mut().zip(g.iter()).zip(y.iter()) {
            *d = *d + f(gi, yi);
        }
    }

    fn back_passthrough(&mut self, idx: usize, input: usize) {
        if !self.input_needs(input) {
            return;
        }
        let g = self.out_grad(idx);
        let dst = self.nodes[input].tensor.grad.as_mut().expect("grad buffer");
        for (d, &gi) in dst.iter_mut().zip(g.iter()) {
            *d = *d + gi;
        }
    }

    fn back_matmul(&mut self, idx: usize, a: usize, b: usize) {
        let g = self.out_grad(idx); // p×r
        let (p, q) = {
            let s = &self.nodes[a].tensor.shape;
            (s[0], s[1])
        };
        let r = self.nodes[b].tensor.shape[1];
        if self.input_needs(a) {
            // grad_a = g · bᵀ
            let bv = self.nodes[b].tensor.values.clone();
            let dst = self.nodes[a].tensor.grad.as_mut().expect("grad buffer");
            for i in 0..p {
                for k in 0..q {
                    let mut acc = T::zero();
                    for j in 0..r {
                        acc = acc + g[i * r + j] * bv[k * r + j];
                    }
                    dst[i * q + k] = dst[i * q + k] + acc;
                }
            }
        }
        if self.input_needs(b) {
            // grad_b = aᵀ · g
            let av = self.nodes[a].tensor.values.clone();
            let dst = self.nodes[b].tensor.grad.as_mut().expect("grad buffer");
            for k in 0..q {
                for j in 0..r {
                    let mut acc = T::zero();
                    for i in 0..p {
                        acc = acc + av[i * q + k] * g[i * r + j];
                    }
                    dst[k * r + j] = dst[k * r + j] + acc;
                }
            }
        }
    }

    fn back_transpose(&mut self, idx: usize, a: usize) {
        if !self.input_needs(a) {
            return;
        }
        let g = self.out_grad(idx); // c×r
        let (r, c) = {
            let s = &self.nodes[a].tensor.shape;
            (s[0], s[1])
        };
        let dst = self.nodes[a].tensor.grad.as_mut().expect("grad buffer");
        for i in 0..r {
            for j in 0..c {
                dst[i * c + j] = dst[i * c + j] + g[j * r + i];
            }
        }
    }

    fn back_mul_elem(&mut self, idx: usize, a: usize, b: usize) {
        let g = self.out_grad(idx);
        if self.input_needs(a) {
            let bv = self.nodes[b].tensor.values.clone();
            let dst = self.nodes[a].tensor.grad.as_mut().expect("grad buffer");
            for ((d, &gi), &bi) in dst.iter_mut().zip(g.iter()).zip(bv.iter()) {
                *d = *d + gi * bi;
            }
        }
        if self.input_needs(b) {
            let av = self.nodes[a].tensor.values.clone();
            let dst = self.nodes[b].tensor.grad.as_mut().expect("grad buffer");
            for ((d, &gi), &ai) in dst.iter_mut().zip(g.iter()).zip(av.iter()) {
                *d = *d + gi * ai;
            }
        }
    }

    fn back_broadcast_add_cols(&mut self, idx: usize, m: usize, v: usize) {
        let g = self.out_grad(idx);
        let (rows, cols) = {
            let s = &self.nodes[m].tensor.shape;
            (s[0], s[1])
        };
        if self.input_needs(m) {
            let dst = self.nodes[m].tensor.grad.as_mut().expect("grad buffer");
            for (d, &gi) in dst.iter_mut().zip(g.iter()) {
                *d = *d + gi;
            }
        }
        if self.input_needs(v) {
            let dst = self.nodes[v].tensor.grad.as_mut().expect("grad buffer");
            for i in 0..rows {
                let mut acc = T::zero();
                for j in 0..cols {
                    acc = acc + g[i * cols + j];
                }
                dst[i] = dst[i] + acc;
            }
        }
    }

    fn back_scale_cols(&mut self, idx: usize, m: usize, v: usize) {
        let g = self.out_grad(idx);
        let (rows, cols) = {
            let s = &self.nodes[m].tensor.shape;
            (s[0], s[1])
        };
        if self.input_needs(m) {
            let vv = self.nodes[v].tensor.values.clone();
            let dst = self.nodes[m].tensor.grad.as_mut().expect("grad buffer");
            for i in 0..rows {
                for j in 0..cols {
                    dst[i * cols + j] = dst[i * cols + j] + g[i * cols + j] * vv[j];
                }
            }
        }
        if self.input_needs(v) {
            let mv = self.nodes[m].tensor.values.clone();
            let dst = self.nodes[v].tensor.grad.as_mut().expect("grad buffer");
            for j in 0..cols {
                let mut acc = T::zero();
                for i in 0..rows {
                    acc = acc + g[i * cols + j] * mv[i * cols + j];
                }
                dst[j] = dst[j] + acc;
            }
        }
    }

    fn back_scale_rows(&mut self, idx: usize, m: usize, v: usize) {
        let g = self.out_grad(idx);
        let (rows, cols) = {
            let s = &self.nodes[m].tensor.shape;
            (s[0], s[1])
        };
        if self.input_needs(m) {
            let vv = self.nodes[v].tensor.values.clone();
            let dst = self.nodes[m].tensor.grad.as_mut().expect("grad buffer");
            for i in 0..rows {
                for j in 0..cols {
                    dst[i * cols + j] = dst[i * cols + j] + g[i * cols + j] * vv[i];
                }
            }
        }
        if self.input_needs(v) {
            let mv = self.nodes[m].tensor.values.clone();
            let dst = self.nodes[v].tensor.grad.as_mut().expect("grad buffer");
            for i in 0..rows {
                let mut acc = T::zero();
                for j in 0..cols {
                    acc = acc + g[i * cols + j] * mv[i * cols + j];
                }
                dst[i] = dst[i] + acc;
            }
        }
    }

    fn back_softmax(&mut self, idx: usize, a: usize) {
        if !self.input_needs(a) {
            return;
        }
        let g = self.out_grad(idx);
        let y = self.nodes[idx].tensor.values.clone();
        // full Jacobian product: dL/dx_i = y_i (g_i − Σ_j g_j y_j)
        let dot = g
            .iter()
            .zip(y.iter())
            .fold(T::zero(), |s, (&gi, &yi)| s + gi * yi);
        let dst = self.nodes[a].tensor.grad.as_mut().expect("grad buffer");
        for ((d, &gi), &yi) in dst.iter_mut().zip(g.iter()).zip(y.iter()) {
            *d = *d + yi * (gi - dot);
        }
    }

    fn back_pool(&mut self, idx: usize, a: usize, axis: PoolAxis, kind: PoolKind) {
        if !self.input_needs(a) {
            return;
        }
        let g = self.out_grad(idx);
        let (rows, cols) = {
            let s = &self.nodes[a].tensor.shape;
            (s[0], s[1])
        };
        let reduced = match axis {
            PoolAxis::Cols => cols,
            PoolAxis::Rows => rows,
        };
        let scale = match kind {
            PoolKind::Sum => T::one(),
            PoolKind::Avg => T::one() / T::of_f64(reduced as f64),
        };
        let dst = self.nodes[a].tensor.grad.as_mut().expect("grad buffer");
        for i in 0..rows {
            for j in 0..cols {
                let gi = match axis {
                    PoolAxis::Cols => g[i],
                    PoolAxis::Rows => g[j],
                };
                dst[i * cols + j] = dst[i * cols + j] + gi * scale;
            }
        }
    }

    fn back_concat(&mut self, idx: usize, a: usize, b: usize) {
        let g = self.out_grad(idx);
        let p = self.nodes[a].tensor.values.len();
        if self.input_needs(a) {
            let dst = self.nodes[a].tensor.grad.as_mut().expect("grad buffer");
            for (d, &gi) in dst.iter_mut().zip(g[..p].iter()) {
                *d = *d + gi;
            }
        }
        if self.input_needs(b) {
            let dst = self.nodes[b].tensor.grad.as_mut().expect("grad buffer");
            for (d, &gi) in dst.iter_mut().zip(g[p..].iter()) {
                *d = *d + gi;
            }
        }
    }

    fn back_conv2d(&mut self, idx: usize, input: usize, kernels: usize, stride: usize, pad: usize) {
        let g = self.out_grad(idx);
        let (c_out, oh, ow) = {
            let s = &self.nodes[idx].tensor.shape;
            (s[0], s[1], s[2])
        };
        let (c_in, ih, iw) = {
            let s = &self.nodes[input].tensor.shape;
            (s[0], s[1], s[2])
        };
        let (kh, kw) = {
            let s = &self.nodes[kernels].tensor.shape;
            (s[2], s[3])
        };
        let need_in = self.input_needs(input);
        let need_k = self.input_needs(kernels);
        let iv = self.nodes[input].tensor.values.clone();
        let kv = self.nodes[kernels].tensor.values.clone();
        let mut gin = if need_in {
            vec![T::zero(); iv.len()]
        } else {
            Vec::new()
        };
        let mut gk = if need_k {
            vec![T::zero(); kv.len()]
        } else {
            Vec::new()
        };
        for oc in 0..c_out {
            let obase = oc * oh * ow;
            for ic in 0..c_in {
                let ibase = ic * ih * iw;
                let kbase = (oc * c_in + ic) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_out_range(oh, ih, ky, stride, pad);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = valid_out_range(ow, iw, kx, stride, pad);
                        if ox_lo >= ox_hi || oy_lo >= oy_hi {
                            continue;
                        }
                        let ki = kbase + ky * kw + kx;
                        let kval = kv[ki];
                        let mut kacc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let grow = obase + oy * ow;
                            let mut ii = ibase + iy * iw + (ox_lo * stride + kx - pad);
                            if need_in {
                                for ox in ox_lo..ox_hi {
                                    let go = g[grow + ox];
                                    gin[ii] = gin[ii] + go * kval;
                                    kacc = kacc + go * iv[ii];
                                    ii += stride;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    kacc = kacc + g[grow + ox] * iv[ii];
                                    ii += stride;
                                }
                            }
                        }
                        if need_k {
                            gk[ki] = gk[ki] + kacc;
                        }
                    }
                }
            }
        }
        if need_in {
            let dst = self.nodes[input].tensor.grad.as_mut().expect("grad buffer");
            for (d, gi) in dst.iter_mut().zip(gin) {
                *d = *d + gi;
            }
        }
        if need_k {
            let dst = self.nodes[kernels].tensor.grad.as_mut().expect("grad buffer");
            for (d, gi) in dst.iter_mut().zip(gk) {
                *d = *d + gi;
            }
        }
    }

    fn back_sum_all(&mut self, idx: usize, a: usize) {
        if !self.input_needs(a) {
            return;
        }
        let g = self.out_grad(idx)[0];
        let dst = self.nodes[a].tensor.grad.as_mut().expect("grad buffer");
        for d in dst.iter_mut() {
            *d = *d + g;
        }
    }
}

// output positions o with 0 <= o*stride + kernel_offset - pad < in_extent
fn valid_out_range(
    out_extent: usize,
    in_extent: usize,
    kernel_offset: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let lo = if kernel_offset >= pad {
        0
    } else {
        (pad - kernel_offset).div_ceil(stride)
    };
    let bound = in_extent + pad;
    let hi = if bound > kernel_offset {
        ((bound - kernel_offset - 1) / stride + 1).min(out_extent)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Output extent of a convolution along one axis; errors unless it divides
/// out to a positive integer.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < kernel {
        return Err(Error::Config(format!(
            "conv2d kernel {kernel} exceeds padded extent {padded}"
        )));
    }
    let span = padded - kernel;
    if span % stride != 0 {
        return Err(Error::Config(format!(
            "conv2d output size is not integral: ({extent} + 2*{pad} - {kernel}) / {stride} + 1"
        )));
    }
    Ok(span / stride + 1)
}

/// Numerically stable logistic function; never exponentiates a positive value.
pub fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
