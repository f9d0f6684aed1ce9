//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! the information its backward rule needs. [`Graph::backward`] walks the tape
//! in reverse from a `1 x 1` output and accumulates gradients into every node.

use std::sync::Arc;

use super::tensor::{Matrix, Real};

pub type NodeId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// Value copy that blocks gradient flow.
    Detach,
    MatMul(NodeId, NodeId),
    /// `a @ b^T`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Adds a `1 x m` row to every row of an `n x m` matrix.
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    Gather {
        table: NodeId,
        rows: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Matrix<T>,
        inv_std: Vec<T>,
    },
    Gelu(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    /// Row-wise softmax over allowed entries; disallowed entries are exactly 0.
    MaskedSoftmax(NodeId),
    /// Pairwise rotation of columns `(2i, 2i+1)` by per-row angles.
    Rotary {
        x: NodeId,
        cos: Arc<Matrix<T>>,
        sin: Arc<Matrix<T>>,
    },
    LogSoftmax(NodeId),
    /// Sum of selected `(row, col)` entries, producing a `1 x 1` value.
    PickSum {
        x: NodeId,
        picks: Vec<(usize, usize)>,
    },
    SelectRow {
        x: NodeId,
        row: usize,
    },
    LogSigmoid(NodeId),
    SumAll(Vec<NodeId>),
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let value = half * x * (T::one() + t);
    let deriv =
        half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (value, deriv)
}

/// `log(sigmoid(x))`, stable for large `|x|`.
pub fn log_sigmoid<T: Real>(x: T) -> T {
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> T {
        let v = self.value(id);
        assert_eq!(v.shape(), (1, 1), "node is not a scalar");
        v.data[0]
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Matrix<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push(v, Op::Detach)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x - y).collect();
        let v = Matrix::from_vec(va.rows, va.cols, data);
        self.push(v, Op::Sub(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let bias = self.value(row);
        assert_eq!(bias.rows, 1, "add_row expects a single row");
        let mut v = self.value(a).clone();
        assert_eq!(v.cols, bias.cols, "add_row width mismatch");
        for r in 0..v.rows {
            for (o, &b) in v.row_mut(r).iter_mut().zip(&bias.data) {
                *o = *o + b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn gather(&mut self, table: NodeId, rows: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut data = Vec::with_capacity(rows.len() * t.cols);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let v = Matrix::from_vec(rows.len(), t.cols, data);
        self.push(
            v,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let n = T::from_usize(xv.cols).unwrap();
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let mut normalized = Matrix::zeros(xv.rows, xv.cols);
        let mut out = Matrix::zeros(xv.rows, xv.cols);
        let mut inv_std = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let istd = T::one() / (var + eps).sqrt();
            inv_std.push(istd);
            for c in 0..xv.cols {
                let h = (row[c] - mean) * istd;
                *normalized.at_mut(r, c) = h;
                *out.at_mut(r, c) = h * g.data[c] + b.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| gelu_parts(v).0);
        self.push(v, Op::Gelu(x))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        assert!(start + len <= xv.cols, "slice out of range");
        let mut data = Vec::with_capacity(xv.rows * len);
        for r in 0..xv.rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let v = Matrix::from_vec(xv.rows, len, data);
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows, rows, "concat row mismatch");
                data.extend_from_slice(pv.row(r));
            }
        }
        let v = Matrix::from_vec(rows, cols, data);
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Softmax over each row restricted to `mask[r * cols + c] == true`.
    /// Every row must allow at least one entry.
    pub fn masked_softmax(&mut self, x: NodeId, mask: Arc<Vec<bool>>) -> NodeId {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.len(), "mask shape mismatch");
        let mut out = Matrix::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let allowed = &mask[r * xv.cols..(r + 1) * xv.cols];
            let row = xv.row(r);
            let max = row
                .iter()
                .zip(allowed)
                .filter(|(_, &a)| a)
                .fold(T::neg_infinity(), |m, (&v, _)| m.max(v));
            assert!(max > T::neg_infinity(), "row {r} has no allowed entries");
            let mut sum = T::zero();
            let out_row = out.row_mut(r);
            for c in 0..row.len() {
                if allowed[c] {
                    let e = (row[c] - max).exp();
                    out_row[c] = e;
                    sum = sum + e;
                }
            }
            for v in out_row.iter_mut() {
                *v = *v / sum;
            }
        }
        self.push(out, Op::MaskedSoftmax(x))
    }

    pub fn rotary(&mut self, x: NodeId, cos: Arc<Matrix<T>>, sin: Arc<Matrix<T>>) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.cols % 2, 0, "rotary needs an even width");
        assert_eq!(cos.shape(), (xv.rows, xv.cols / 2), "rotary table mismatch");
        let mut out = Matrix::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            for i in 0..xv.cols / 2 {
                let (c, s) = (cos.at(r, i), sin.at(r, i));
                let (a, b) = (xv.at(r, 2 * i), xv.at(r, 2 * i + 1));
                *out.at_mut(r, 2 * i) = a * c - b * s;
                *out.at_mut(r, 2 * i + 1) = a * s + b * c;
            }
        }
        self.push(out, Op::Rotary { x, cos, sin })
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut out = Matrix::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        self.push(out, Op::LogSoftmax(x))
    }

    pub fn pick_sum(&mut self, x: NodeId, picks: Vec<(usize, usize)>) -> NodeId {
        let xv = self.value(x);
        let s = picks.iter().map(|&(r, c)| xv.at(r, c)).sum::<T>();
        self.push(Matrix::scalar(s), Op::PickSum { x, picks })
    }

    pub fn select_row(&mut self, x: NodeId, row: usize) -> NodeId {
        let xv = self.value(x);
        let v = Matrix::from_vec(1, xv.cols, xv.row(row).to_vec());
        self.push(v, Op::SelectRow { x, row })
    }

    pub fn log_sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(log_sigmoid);
        self.push(v, Op::LogSigmoid(x))
    }

    /// Sum of same-shaped nodes.
    pub fn sum_all(&mut self, parts: &[NodeId]) -> NodeId {
        let mut v = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            v.add_assign(self.value(p));
        }
        self.push(v, Op::SumAll(parts.to_vec()))
    }

    /// Gradients of the scalar `output` with respect to every node. Entries
    /// are `None` for nodes the output does not depend on.
    pub fn backward(&self, output: NodeId) -> Vec<Option<Matrix<T>>> {
        assert_eq!(
            self.value(output).shape(),
            (1, 1),
            "backward needs a scalar"
        );
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(Matrix::scalar(T::one()));

        fn acc<T: Real>(grads: &mut [Option<Matrix<T>>], id: NodeId, g: Matrix<T>) {
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=output).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf | Op::Detach => {}
                Op::MatMul(a, b) => {
                    let ga = dy.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&dy);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = dy.matmul(self.value(*b));
                    let gb = dy.t_matmul(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, dy.map(|v| -v));
                    acc(&mut grads, *a, dy.clone());
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, dy.cols);
                    for r in 0..dy.rows {
                        for (o, &v) in gr.data.iter_mut().zip(dy.row(r)) {
                            *o = *o + v;
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, dy.clone());
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, dy.map(|v| v * c));
                }
                Op::Gather { table, rows } => {
                    let t = self.value(*table);
                    let mut gt = Matrix::zeros(t.rows, t.cols);
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &v) in gt.row_mut(r).iter_mut().zip(dy.row(i)) {
                            *o = *o + v;
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let g = self.value(*gamma);
                    let n = T::from_usize(dy.cols).unwrap();
                    let mut gg = Matrix::zeros(1, dy.cols);
                    let mut gb = Matrix::zeros(1, dy.cols);
                    let mut gx = Matrix::zeros(dy.rows, dy.cols);
                    for r in 0..dy.rows {
                        let dyr = dy.row(r);
                        let h = normalized.row(r);
                        let dh: Vec<T> = dyr.iter().zip(&g.data).map(|(&d, &gv)| d * gv).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dh_h = dh.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for c in 0..dy.cols {
                            gg.data[c] = gg.data[c] + dyr[c] * h[c];
                            gb.data[c] = gb.data[c] + dyr[c];
                            *gx.at_mut(r, c) = inv_std[r] * (dh[c] - mean_dh - h[c] * mean_dh_h);
                        }
                    }
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gb);
                    acc(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data
                        .iter()
                        .zip(&dy.data)
                        .map(|(&v, &d)| d * gelu_parts(v).1)
                        .collect();
                    acc(&mut grads, *x, Matrix::from_vec(dy.rows, dy.cols, data));
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    for r in 0..dy.rows {
                        gx.row_mut(r)[*start..*start + dy.cols].copy_from_slice(dy.row(r));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        let mut gp = Matrix::zeros(dy.rows, w);
                        for r in 0..dy.rows {
                            gp.row_mut(r)
                                .copy_from_slice(&dy.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::MaskedSoftmax(x) => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, dr) = (y.row(r), dy.row(r));
                        let dot = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum::<T>();
                        for (o, (&yv, &dv)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(dr)) {
                            *o = yv * (dv - dot);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Rotary { x, cos, sin } => {
                    let mut gx = Matrix::zeros(dy.rows, dy.cols);
                    for r in 0..dy.rows {
                        for i in 0..dy.cols / 2 {
                            let (c, s) = (cos.at(r, i), sin.at(r, i));
                            let (da, db) = (dy.at(r, 2 * i), dy.at(r, 2 * i + 1));
                            *gx.at_mut(r, 2 * i) = da * c + db * s;
                            *gx.at_mut(r, 2 * i + 1) = -da * s + db * c;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let dr = dy.row(r);
                        let total = dr.iter().copied().sum::<T>();
                        for (o, (&yv, &dv)) in gx.row_mut(r).iter_mut().zip(y.row(r).iter().zip(dr))
                        {
                            *o = dv - yv.exp() * total;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::PickSum { x, picks } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    let d = dy.data[0];
                    for &(r, c) in picks {
                        *gx.at_mut(r, c) = gx.at(r, c) + d;
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SelectRow { x, row } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    gx.row_mut(*row).copy_from_slice(&dy.data);
                    acc(&mut grads, *x, gx);
                }
                Op::LogSigmoid(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data
                        .iter()
                        .zip(&dy.data)
                        .map(|(&v, &d)| d * sigmoid(-v))
                        .collect();
                    acc(&mut grads, *x, Matrix::from_vec(dy.rows, dy.cols, data));
                }
                Op::SumAll(parts) => {
                    for &p in parts {
                        acc(&mut grads, p, dy.clone());
                    }
                }
            }
            grads[id] = Some(dy);
        }
        grads
    }
}
