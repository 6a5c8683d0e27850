//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation applied during a forward pass. Values
//! are computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! returns the gradient of a scalar loss with respect to every parameter the
//! loss touched.
//!
//! Binary elementwise operations broadcast their right operand when it is a
//! `1 x c` row, an `r x 1` column or a `1 x 1` scalar.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc};
use crate::{NumError, Real, Tensor};

/// Probabilities below this are clamped before taking a logarithm.
pub const LOG_FLOOR: Real = 1e-30;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, Real),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    ScatterCols(Var, Vec<usize>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpAxis0(Var),
    LogSumExpAxis1(Var),
    SumAll(Var),
    Pick(Var, Vec<(usize, usize)>),
    LayerNormRows(Var, Real),
    Dropout(Var, Vec<Real>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation against a read-only [`ParamStore`].
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    log_clamps: usize,
}

fn bcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast, NumError> {
    let (ar, ac) = a.dims();
    let (br, bc) = b.dims();
    if (ar, ac) == (br, bc) {
        Ok(Bcast::Same)
    } else if br == 1 && bc == 1 {
        Ok(Bcast::Scalar)
    } else if br == 1 && bc == ac {
        Ok(Bcast::Row)
    } else if bc == 1 && br == ar {
        Ok(Bcast::Col)
    } else {
        Err(NumError::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() })
    }
}

#[inline]
fn bidx(kind: Bcast, r: usize, c: usize, bcols: usize) -> usize {
    match kind {
        Bcast::Same => r * bcols + c,
        Bcast::Row => c,
        Bcast::Col => r,
        Bcast::Scalar => 0,
    }
}

fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph { store, nodes: Vec::with_capacity(256), param_vars: HashMap::new(), log_clamps: 0 }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of probabilities clamped at [`LOG_FLOOR`] so far.
    pub fn log_clamps(&self) -> usize {
        self.log_clamps
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, x: Real) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Leaf for a parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = self.value(a).matmul(self.value(b)).map_err(|_| self.mismatch("matmul", a, b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul_bt", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> NumError {
        NumError::ShapeMismatch { op, left: self.value(a).shape().to_vec(), right: self.value(b).shape().to_vec() }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(Real, Real) -> Real,
    ) -> Result<(Tensor, Bcast), NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = bcast(name, av, bv)?;
        let (r, c) = av.dims();
        let bc = bv.cols();
        let mut out = Vec::with_capacity(r * c);
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..r {
            for j in 0..c {
                out.push(f(ad[i * c + j], bd[bidx(kind, i, j, bc)]));
            }
        }
        Ok((Tensor::matrix(r, c, out)?, kind))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (t, k) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b, k)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (t, k) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b, k)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (t, k) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b, k)))
    }

    pub fn scale(&mut self, a: Var, s: Real) -> Var {
        let mut t = self.value(a).clone();
        t.scale_assign(s);
        self.push(t, Op::Scale(a, s))
    }

    /// `c - a` for a constant `c`.
    pub fn rsub_scalar(&mut self, c: Real, a: Var) -> Result<Var, NumError> {
        let neg = self.scale(a, -1.0);
        let k = self.scalar(c);
        self.add(neg, k)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let rows = self.dims(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            if self.dims(p).0 != rows {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
            total += self.dims(p).1;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        Ok(self.push(Tensor::matrix(rows, total, out)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let cols = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.dims(p).1 != cols {
                return Err(self.mismatch("concat_rows", parts[0], p));
            }
            rows += self.dims(p).0;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::matrix(rows, cols, out)?, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, NumError> {
        let (r, c) = self.dims(a);
        if start + width > c {
            return Err(NumError::InvalidArgument(format!(
                "slice_cols {start}..{} out of range for width {c}",
                start + width
            )));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&v.row_slice(i)[start..start + width]);
        }
        Ok(self.push(Tensor::matrix(r, width, out)?, Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var, NumError> {
        let (r, c) = self.dims(a);
        if start + count > r {
            return Err(NumError::InvalidArgument(format!(
                "slice_rows {start}..{} out of range for {r} rows",
                start + count
            )));
        }
        let data = self.value(a).data()[start * c..(start + count) * c].to_vec();
        Ok(self.push(Tensor::matrix(count, c, data)?, Op::SliceRows(a, start)))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var, NumError> {
        self.slice_rows(a, r, 1)
    }

    /// Embedding lookup: stacks rows `ids` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        let (r, c) = self.dims(table);
        let v = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= r {
                return Err(NumError::InvalidArgument(format!("row id {i} out of range for {r} rows")));
            }
            out.extend_from_slice(v.row_slice(i));
        }
        Ok(self.push(Tensor::matrix(ids.len(), c, out)?, Op::Gather(table, ids.to_vec())))
    }

    /// Output column `index[j]` receives the sum of input columns `j` mapped
    /// to it. Output width is `width`.
    pub fn scatter_cols(&mut self, a: Var, index: &[usize], width: usize) -> Result<Var, NumError> {
        let (r, c) = self.dims(a);
        if index.len() != c || index.iter().any(|&i| i >= width) {
            return Err(NumError::InvalidArgument(format!(
                "scatter_cols: {} indices for {c} columns, width {width}",
                index.len()
            )));
        }
        let v = self.value(a);
        let mut out = vec![0.0; r * width];
        for i in 0..r {
            let row = v.row_slice(i);
            for (j, &dst) in index.iter().enumerate() {
                out[i * width + dst] += row[j];
            }
        }
        Ok(self.push(Tensor::matrix(r, width, out)?, Op::ScatterCols(a, index.to_vec())))
    }

    fn unary(&mut self, a: Var, f: impl Fn(Real) -> Real, op: Op) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::from_vec(v.shape(), data).expect("same shape");
        self.push(t, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Real::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Real::exp, Op::Exp(a))
    }

    /// Natural log with inputs clamped at [`LOG_FLOOR`]; clamped entries get
    /// zero gradient and are counted in [`Graph::log_clamps`].
    pub fn log(&mut self, a: Var) -> Var {
        let clamps = self.value(a).data().iter().filter(|&&x| x < LOG_FLOOR).count();
        self.log_clamps += clamps;
        self.unary(a, |x| x.max(LOG_FLOOR).ln(), Op::Log(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (r, c) = v.dims();
        let mut out = v.data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        let t = Tensor::matrix(r, c, out).expect("same shape");
        self.push(t, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (r, c) = v.dims();
        let mut out = v.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let lse = logsumexp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = Tensor::matrix(r, c, out).expect("same shape");
        self.push(t, Op::LogSoftmaxRows(a))
    }

    /// `r x c -> 1 x c`, log-sum-exp down each column.
    pub fn logsumexp_axis0(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (r, c) = v.dims();
        let mut out = Vec::with_capacity(c);
        let mut col = vec![0.0; r];
        for j in 0..c {
            for (i, x) in col.iter_mut().enumerate() {
                *x = v.get(i, j);
            }
            out.push(logsumexp(&col));
        }
        self.push(Tensor::row(out), Op::LogSumExpAxis0(a))
    }

    /// `r x c -> r x 1`, log-sum-exp along each row.
    pub fn logsumexp_axis1(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let r = v.rows();
        let out = (0..r).map(|i| logsumexp(v.row_slice(i))).collect();
        let t = Tensor::matrix(r, 1, out).expect("r x 1");
        self.push(t, Op::LogSumExpAxis1(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as Real;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Gathers individual entries into a `1 x k` row.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var, NumError> {
        let v = self.value(a);
        let (r, c) = v.dims();
        let mut out = Vec::with_capacity(at.len());
        for &(i, j) in at {
            if i >= r || j >= c {
                return Err(NumError::InvalidArgument(format!("pick ({i}, {j}) outside {r} x {c}")));
            }
            out.push(v.get(i, j));
        }
        Ok(self.push(Tensor::row(out), Op::Pick(a, at.to_vec())))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: Real) -> Var {
        let v = self.value(a);
        let (r, c) = v.dims();
        let mut out = v.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let mean = row.iter().sum::<Real>() / c as Real;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<Real>() / c as Real;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
        }
        let t = Tensor::matrix(r, c, out).expect("same shape");
        self.push(t, Op::LayerNormRows(a, eps))
    }

    /// Inverted dropout with a mask drawn from `rng`. `rate == 0` is the
    /// identity and records nothing.
    pub fn dropout(&mut self, a: Var, rate: Real, rng: &mut ChaCha8Rng) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let n = self.value(a).len();
        let mask: Vec<Real> = (0..n).map(|_| if rng.gen::<Real>() < keep { 1.0 / keep } else { 0.0 }).collect();
        self.dropout_with_mask(a, mask)
    }

    /// Dropout with an explicit (already scaled) mask.
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<Real>) -> Var {
        let v = self.value(a);
        debug_assert_eq!(mask.len(), v.len());
        let data = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::from_vec(v.shape(), data).expect("same shape");
        self.push(t, Op::Dropout(a, mask))
    }

    /// Mean cross-entropy of row-wise logits against target columns.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumError> {
        let lsm = self.log_softmax_rows(logits);
        let at: Vec<(usize, usize)> = targets.iter().enumerate().map(|(i, &t)| (i, t)).collect();
        let picked = self.pick(lsm, &at)?;
        let m = self.mean(picked);
        Ok(self.scale(m, -1.0))
    }

    /// Reverse pass from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumError::InvalidArgument(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        if !lv.item().is_finite() {
            return Err(NumError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::empty(self.store.len());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.grads[id.0] = Some(g),
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).1;
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    // dA += G · Bᵀ ; dB += Aᵀ · G
                    let da = slot(&mut grads, *a, self.value(*a).shape());
                    matmul_bt_acc(g.data(), bv, da.data_mut(), m, n, k);
                    let db = slot(&mut grads, *b, self.value(*b).shape());
                    matmul_at_acc(av, g.data(), db.data_mut(), m, k, n);
                }
                Op::MatMulBT(a, b) => {
                    // C = A Bᵀ, A: m x k, B: n x k
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).0;
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let da = slot(&mut grads, *a, self.value(*a).shape());
                    matmul_acc(g.data(), bv, da.data_mut(), m, n, k);
                    let db = slot(&mut grads, *b, self.value(*b).shape());
                    matmul_at_acc(g.data(), av, db.data_mut(), m, n, k);
                }
                Op::Transpose(a) => {
                    let gt = g.transpose();
                    slot(&mut grads, *a, self.value(*a).shape()).add_assign(&gt);
                }
                Op::Add(a, b, k) | Op::Sub(a, b, k) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    slot(&mut grads, *a, self.value(*a).shape()).add_assign(&g);
                    let bshape = self.value(*b).shape().to_vec();
                    let bcols = self.value(*b).cols();
                    let db = slot(&mut grads, *b, &bshape);
                    let (r, c) = g.dims();
                    let dbd = db.data_mut();
                    for i in 0..r {
                        for j in 0..c {
                            dbd[bidx(*k, i, j, bcols)] += sign * g.get(i, j);
                        }
                    }
                }
                Op::Mul(a, b, k) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (r, c) = g.dims();
                    let bcols = bv.cols();
                    let mut da = vec![0.0; r * c];
                    let mut db = vec![0.0; bv.len()];
                    for i in 0..r {
                        for j in 0..c {
                            let bi = bidx(*k, i, j, bcols);
                            let gi = g.get(i, j);
                            da[i * c + j] = gi * bv.data()[bi];
                            db[bi] += gi * av.data()[i * c + j];
                        }
                    }
                    add_into(slot(&mut grads, *a, av.shape()), &da);
                    add_into(slot(&mut grads, *b, bv.shape()), &db);
                }
                Op::Scale(a, s) => {
                    let d = slot(&mut grads, *a, self.value(*a).shape());
                    for (x, y) in d.data_mut().iter_mut().zip(g.data()) {
                        *x += s * y;
                    }
                }
                Op::ConcatCols(parts) => {
                    let r = g.rows();
                    let mut off = 0;
                    for &p in parts {
                        let w = self.dims(p).1;
                        let d = slot(&mut grads, p, self.value(p).shape());
                        let dd = d.data_mut();
                        for i in 0..r {
                            let src = &g.row_slice(i)[off..off + w];
                            for (x, y) in dd[i * w..(i + 1) * w].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut off = 0;
                    for &p in parts {
                        let n = self.dims(p).0 * c;
                        let d = slot(&mut grads, p, self.value(p).shape());
                        add_into(d, &g.data()[off..off + n]);
                        off += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, w) = g.dims();
                    let c = self.dims(*a).1;
                    let d = slot(&mut grads, *a, self.value(*a).shape());
                    let dd = d.data_mut();
                    for i in 0..r {
                        for j in 0..w {
                            dd[i * c + start + j] += g.get(i, j);
                        }
                    }
                }
                Op::SliceRows(a, start) => {
                    let c = g.cols();
                    let d = slot(&mut grads, *a, self.value(*a).shape());
                    let off = start * c;
                    for (x, y) in d.data_mut()[off..off + g.len()].iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
                Op::Gather(t, ids) => {
                    let c = self.dims(*t).1;
                    let d = slot(&mut grads, *t, self.value(*t).shape());
                    let dd = d.data_mut();
                    for (row, &id) in ids.iter().enumerate() {
                        for (x, y) in dd[id * c..(id + 1) * c].iter_mut().zip(g.row_slice(row)) {
                            *x += y;
                        }
                    }
                }
                Op::ScatterCols(a, index) => {
                    let (r, c) = self.dims(*a);
                    let w = g.cols();
                    let d = slot(&mut grads, *a, self.value(*a).shape());
                    let dd = d.data_mut();
                    for i in 0..r {
                        for (j, &dst) in index.iter().enumerate() {
                            dd[i * c + j] += g.data()[i * w + dst];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let d: Vec<Real> = g.data().iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                    add_into(slot(&mut grads, *a, node.value.shape()), &d);
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let d: Vec<Real> = g.data().iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                    add_into(slot(&mut grads, *a, node.value.shape()), &d);
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    let d: Vec<Real> =
                        g.data().iter().zip(x).map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 }).collect();
                    add_into(slot(&mut grads, *a, node.value.shape()), &d);
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    let d: Vec<Real> = g.data().iter().zip(y).map(|(gi, yi)| gi * yi).collect();
                    add_into(slot(&mut grads, *a, node.value.shape()), &d);
                }
                Op::Log(a) => {
                    let x = self.value(*a).data();
                    let d: Vec<Real> =
                        g.data().iter().zip(x).map(|(gi, xi)| if *xi < LOG_FLOOR { 0.0 } else { gi / xi }).collect();
                    add_into(slot(&mut grads, *a, node.value.shape()), &d);
                }
                Op::SoftmaxRows(a) => {
                    let (r, c) = g.dims();
                    let y = node.value.data();
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let s = dot(yr, gr);
                        for j in 0..c {
                            d[i * c + j] = yr[j] * (gr[j] - s);
                        }
                    }
                    add_into(slot(&mut grads, *a, node.value.shape()), &d);
                }
                Op::LogSoftmaxRows(a) => {
                    let (r, c) = g.dims();
                    let y = node.value.data();
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let s: Real = gr.iter().sum();
                        for j in 0..c {
                            d[i * c + j] = gr[j] - y[i * c + j].exp() * s;
                        }
                    }
                    add_into(slot(&mut grads, *a, node.value.shape()), &d);
                }
                Op::LogSumExpAxis0(a) => {
                    let x = self.value(*a);
                    let (r, c) = x.dims();
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = g.data()[j] * (x.get(i, j) - node.value.data()[j]).exp();
                        }
                    }
                    add_into(slot(&mut grads, *a, x.shape()), &d);
                }
                Op::LogSumExpAxis1(a) => {
                    let x = self.value(*a);
                    let (r, c) = x.dims();
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = g.data()[i] * (x.get(i, j) - node.value.data()[i]).exp();
                        }
                    }
                    add_into(slot(&mut grads, *a, x.shape()), &d);
                }
                Op::SumAll(a) => {
                    let gi = g.item();
                    let d = slot(&mut grads, *a, self.value(*a).shape());
                    d.data_mut().iter_mut().for_each(|x| *x += gi);
                }
                Op::Pick(a, at) => {
                    let c = self.dims(*a).1;
                    let d = slot(&mut grads, *a, self.value(*a).shape());
                    let dd = d.data_mut();
                    for (k, &(i, j)) in at.iter().enumerate() {
                        dd[i * c + j] += g.data()[k];
                    }
                }
                Op::LayerNormRows(a, eps) => {
                    let x = self.value(*a);
                    let (r, c) = x.dims();
                    let y = node.value.data();
                    let mut d = vec![0.0; r * c];
                    let n = c as Real;
                    for i in 0..r {
                        let xr = x.row_slice(i);
                        let mean = xr.iter().sum::<Real>() / n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let yr = &y[i * c..(i + 1) * c];
                        let gmean = gr.iter().sum::<Real>() / n;
                        let gy = dot(gr, yr) / n;
                        for j in 0..c {
                            d[i * c + j] = inv * (gr[j] - gmean - yr[j] * gy);
                        }
                    }
                    add_into(slot(&mut grads, *a, x.shape()), &d);
                }
                Op::Dropout(a, mask) => {
                    let d: Vec<Real> = g.data().iter().zip(mask).map(|(gi, m)| gi * m).collect();
                    add_into(slot(&mut grads, *a, node.value.shape()), &d);
                }
            }
        }
        Ok(out)
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_into(t: &mut Tensor, d: &[Real]) {
    for (x, y) in t.data_mut().iter_mut().zip(d) {
        *x += y;
    }
}

pub(crate) fn logsumexp(xs: &[Real]) -> Real {
    let m = xs.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    if m == Real::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<Real>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [Real]) {
    let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn softmax_is_a_simplex() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 300.0, 0.0, 0.0, 0.0]).unwrap());
        let y = g.softmax_rows(x);
        for r in 0..2 {
            let s: Real = g.value(y).row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.scalar(0.0);
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn broadcast_shapes() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let row = g.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        let col = g.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let bad = g.constant(Tensor::zeros(&[3, 2]));
        let r = g.add(a, row).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let c = g.add(a, col).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let err = g.add(a, bad).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_v() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(&[1, 7]));
        let ce = g.cross_entropy(x, &[3]).unwrap();
        assert!((g.value(ce).item() - (7.0 as Real).ln()).abs() < 1e-12);
    }

    #[test]
    fn log_clamps_are_counted() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::row(vec![0.0, 0.5]));
        let y = g.log(x);
        assert_eq!(g.log_clamps(), 1);
        assert!((g.value(y).data()[0] - LOG_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::row(vec![1.0, 2.0]));
        let y = g.dropout(x, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(x, y);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::row(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }
}
