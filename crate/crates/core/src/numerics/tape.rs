// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value and the rule
//! needed to push gradients back to its inputs. Node ids are assigned in
//! recording order, so the tape is topologically sorted by construction and
//! [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};

use super::ops;
use super::tensor::{gemm, Real, Tensor, View, ViewMut};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias { x: Var, bias: Var },
    Scale { x: Var, s: F },
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<F>,
        rstd: Vec<F>,
    },
    Softmax(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor<F>,
    },
    Sum(Var),
    SumSquares(Var),
    AbsSum(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Recording of a computation for one training context. Not shared across
/// threads.
#[derive(Debug, Default)]
pub struct Tape<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient with respect to `v`, or `None` if `v` does not influence the
    /// loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`; zeros when `v` is unreachable from the
    /// loss.
    pub fn wrt(&self, v: Var) -> Tensor<F> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Moves the gradient for `v` out, falling back to zeros.
    pub fn take(&mut self, v: Var) -> Tensor<F> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn same_shape<F: Real>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dims(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op_name(&op)));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_b: false,
            },
            ng,
        )
    }

    /// `a * b^T`, with `b` stored as `[n x k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_nt(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        self.push(out, Op::MatMul { a, b, trans_b: true }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a `[n]` bias to every row of an `[m x n]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        ops::add_row_bias(&mut out, self.value(bias).data())?;
        let ng = self.needs(&[x, bias]);
        self.push(out, Op::AddRowBias { x, bias }, ng)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let ng = self.needs(&[x]);
        self.push(out, Op::Scale { x, s }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = ops::gelu(self.value(x));
        let ng = self.needs(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(F::zero()));
        let ng = self.needs(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let ln = ops::layer_norm(self.value(x), self.value(gain).data(), self.value(bias).data())?;
        let ng = self.needs(&[x, gain, bias]);
        self.push(
            ln.y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: ln.xhat,
                rstd: ln.rstd,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(x))?;
        let ng = self.needs(&[x]);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Softmax where row `r` only sees columns `0..=r`.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_rows_causal(self.value(x), 0);
        let ng = self.needs(&[x]);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let cols = src.cols();
        if src.rank() != 2 || start + len > cols {
            return Err(Error::dims("slice_cols", src.shape(), &[start, len]));
        }
        let rows = src.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let ng = self.needs(&[x]);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rank() != 2 || t.rows() != rows {
                return Err(Error::dims("concat_cols", self.value(*first).shape(), t.shape()));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let ng = self.needs(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        if src.rank() != 2 || start + len > src.rows() {
            return Err(Error::dims("slice_rows", src.shape(), &[start, len]));
        }
        let c = src.cols();
        let out = Tensor::new(vec![len, c], src.data()[start * c..(start + len) * c].to_vec())?;
        let ng = self.needs(&[x]);
        self.push(out, Op::SliceRows { x, start }, ng)
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let src = self.value(table);
        let n = src.rows();
        let c = src.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= n {
                return Err(Error::Range {
                    what: "row id",
                    value: id,
                    bound: n,
                });
            }
            data.extend_from_slice(src.row(id));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        let ng = self.needs(&[table]);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Mean negative log-likelihood of `targets`; scalar output.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let loss = ops::cross_entropy(lv, targets)?;
        let probs = ops::softmax_rows(lv)?;
        let ng = self.needs(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares(x), ng)
    }

    /// Sum of absolute values (L1 norm).
    pub fn abs_sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|&v| v.abs()).sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::AbsSum(x), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(root.value.shape(), F::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }

        // Only leaves keep their gradients; intermediate ones were consumed.
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = g.shape()[1];
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![F::zero(); m * k];
                    // da = g * b^T   (or g * b when b was used transposed)
                    let bview = if *trans_b {
                        View::row_major(bv.data(), k)
                    } else {
                        View::transposed(bv.data(), n)
                    };
                    gemm(
                        m,
                        n,
                        k,
                        F::one(),
                        View::row_major(g.data(), n),
                        bview,
                        F::zero(),
                        ViewMut::row_major(&mut da, k),
                    );
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.nodes[b.0].needs_grad {
                    if *trans_b {
                        // b is [n x k]; db = g^T * a
                        let mut db = vec![F::zero(); n * k];
                        gemm(
                            n,
                            m,
                            k,
                            F::one(),
                            View::transposed(g.data(), n),
                            View::row_major(av.data(), k),
                            F::zero(),
                            ViewMut::row_major(&mut db, k),
                        );
                        self.accumulate(grads, *b, Tensor::new(vec![n, k], db).unwrap());
                    } else {
                        // b is [k x n]; db = a^T * g
                        let mut db = vec![F::zero(); k * n];
                        gemm(
                            k,
                            m,
                            n,
                            F::one(),
                            View::transposed(av.data(), k),
                            View::row_major(g.data(), n),
                            F::zero(),
                            ViewMut::row_major(&mut db, n),
                        );
                        self.accumulate(grads, *b, Tensor::new(vec![k, n], db).unwrap());
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRowBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[bias.0].needs_grad {
                    let c = g.cols();
                    let mut db = vec![F::zero(); c];
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += *v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_vec(db));
                }
            }
            Op::Scale { x, s } => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Gelu(x) => {
                let dx = zip_map(g, self.value(*x), |gv, xv| gv * ops::gelu_grad_scalar(xv));
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = zip_map(g, self.value(*x), |gv, xv| {
                    if xv > F::zero() {
                        gv
                    } else {
                        F::zero()
                    }
                });
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                if self.nodes[x.0].needs_grad {
                    let inv_d = F::one() / F::from_usize(d).unwrap();
                    let mut dx = vec![F::zero(); g.len()];
                    for (r, ((grow, hrow), dxrow)) in g
                        .data()
                        .chunks(d)
                        .zip(xhat.data().chunks(d))
                        .zip(dx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut mean_dh = F::zero();
                        let mut mean_dh_h = F::zero();
                        for i in 0..d {
                            let dh = grow[i] * gv[i];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[i];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for i in 0..d {
                            let dh = grow[i] * gv[i];
                            dxrow[i] = rstd[r] * (dh - mean_dh - hrow[i] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).unwrap());
                }
                if self.nodes[gain.0].needs_grad || self.nodes[bias.0].needs_grad {
                    let mut dg = vec![F::zero(); d];
                    let mut db = vec![F::zero(); d];
                    for (grow, hrow) in g.data().chunks(d).zip(xhat.data().chunks(d)) {
                        for i in 0..d {
                            dg[i] += grow[i] * hrow[i];
                            db[i] += grow[i];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::from_vec(dg));
                    self.accumulate(grads, *bias, Tensor::from_vec(db));
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![F::zero(); y.len()];
                for ((yrow, grow), drow) in y
                    .data()
                    .chunks(c)
                    .zip(g.data().chunks(c))
                    .zip(dx.chunks_mut(c))
                {
                    let dot: F = yrow.iter().zip(grow).map(|(a, b)| *a * *b).sum();
                    for i in 0..c {
                        drow[i] = yrow[i] * (grow[i] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let (rows, cols) = (src.rows(), src.cols());
                let len = g.cols();
                let mut dx = vec![F::zero(); rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, Tensor::new(vec![rows, cols], dx).unwrap());
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let (rows, len) = (pv.rows(), pv.cols());
                    if self.nodes[p.0].needs_grad {
                        let mut dp = Vec::with_capacity(rows * len);
                        for r in 0..rows {
                            dp.extend_from_slice(&g.row(r)[offset..offset + len]);
                        }
                        self.accumulate(grads, *p, Tensor::new(vec![rows, len], dp).unwrap());
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let c = src.cols();
                let mut dx = vec![F::zero(); src.len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, Tensor::new(src.shape().to_vec(), dx).unwrap());
            }
            Op::Gather { table, ids } => {
                let src = self.value(*table);
                let c = src.cols();
                let mut dt = vec![F::zero(); src.len()];
                for (i, &id) in ids.iter().enumerate() {
                    for (d, v) in dt[id * c..(id + 1) * c].iter_mut().zip(g.row(i)) {
                        *d += *v;
                    }
                }
                self.accumulate(grads, *table, Tensor::new(src.shape().to_vec(), dt).unwrap());
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.item() / F::from_usize(targets.len()).unwrap();
                let mut dl = probs.clone();
                let v = dl.cols();
                for (r, &t) in targets.iter().enumerate() {
                    dl.data_mut()[r * v + t] -= F::one();
                }
                dl.data_mut().iter_mut().for_each(|x| *x *= scale);
                self.accumulate(grads, *logits, dl);
            }
            Op::Sum(x) => {
                let s = g.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), s));
            }
            Op::SumSquares(x) => {
                let s = g.item() * F::lit(2.0);
                self.accumulate(grads, *x, self.value(*x).map(|v| v * s));
            }
            Op::AbsSum(x) => {
                let s = g.item();
                let dx = self.value(*x).map(|v| {
                    if v > F::zero() {
                        s
                    } else if v < F::zero() {
                        -s
                    } else {
                        F::zero()
                    }
                });
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

fn op_name<F>(op: &Op<F>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRowBias { .. } => "add_row_bias",
        Op::Scale { .. } => "scale",
        Op::Gelu(_) => "gelu",
        Op::Relu(_) => "relu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax(_) => "softmax",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(_) => "concat_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::Gather { .. } => "gather_rows",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum(_) => "sum",
        Op::SumSquares(_) => "sum_squares",
        Op::AbsSum(_) => "abs_sum",
    }
}
