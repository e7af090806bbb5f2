use std::sync::Arc;

use super::kernels::{log_sum_exp, matmul, matmul_nt, matmul_tn, softmax_in_place};
use super::{CsrMatrix, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SparseMatMul(Arc<CsrMatrix>, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    MulRows(Var, Var),
    MulConst(Var, Vec<f64>),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    RowLogSumExp(Var),
    Transpose(Var),
    ConcatCols(Var, Var),
    MeanRows(Var),
    Sum(Var),
    GatherRows(Var, Vec<usize>),
    SegmentMean(Var, Vec<usize>),
    CosineSimilarity(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records matrix-valued primitives in evaluation order.
///
/// Leaves are either trainable ([`Tape::leaf`]) or constant
/// ([`Tape::constant`]); adjoints are only propagated into nodes that
/// transitively depend on a trainable leaf.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Error {
    Error::Shape { op, left, right }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `s · b` with a constant sparse left operand.
    pub fn sparse_matmul(&mut self, s: Arc<CsrMatrix>, b: Var) -> Result<Var> {
        let out = s.matmul(self.value(b))?;
        let rg = self.rg(b);
        Ok(self.push(out, Op::SparseMatMul(s, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.check_same_shape(y, "add")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::from_vec(x.rows(), x.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `1 × cols` row vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(shape_err("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            out.row_mut(r)
                .iter_mut()
                .zip(bv.data())
                .for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// Scales row `i` of `x` by `w[i]`, where `w` is `rows × 1`.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.cols() != 1 || wv.rows() != xv.rows() {
            return Err(shape_err("mul_rows", xv.shape(), wv.shape()));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let s = wv.data()[r];
            out.row_mut(r).iter_mut().for_each(|o| *o *= s);
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::MulRows(x, w), rg))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        xv.check_same_shape(c, "mul_const")?;
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::from_vec(xv.rows(), xv.cols(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst(x, c.data().to_vec()), rg))
    }

    /// `a·x + b` elementwise.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| a * v + b).collect();
        let out = Tensor::from_vec(xv.rows(), xv.cols(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Affine(x, a), rg)
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        self.affine(x, a, 0.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_vec(xv.rows(), xv.cols(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// Clamps into `[lo, hi]`; the adjoint is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(x);
        self.push(out, Op::RowSoftmax(x), rg)
    }

    pub fn row_log_softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let lse = log_sum_exp(out.row(r));
            out.row_mut(r).iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(x);
        self.push(out, Op::RowLogSoftmax(x), rg)
    }

    /// `rows × 1` column of per-row log-sum-exp.
    pub fn row_log_sum_exp(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows()).map(|r| log_sum_exp(xv.row(r))).collect();
        let out = Tensor::from_vec(xv.rows(), 1, data).expect("column");
        let rg = self.rg(x);
        self.push(out, Op::RowLogSumExp(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(shape_err("concat_cols", av.shape(), bv.shape()));
        }
        let cols = av.cols() + bv.cols();
        let mut data = Vec::with_capacity(av.rows() * cols);
        for r in 0..av.rows() {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Tensor::from_vec(av.rows(), cols, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    /// Column-wise mean, `1 × cols`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() == 0 {
            return Err(shape_err("mean_rows", xv.shape(), (1, xv.cols())));
        }
        let mut out = Tensor::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            out.data_mut()
                .iter_mut()
                .zip(xv.row(r))
                .for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / xv.rows() as f64;
        out.data_mut().iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanRows(x), rg))
    }

    /// Sum of all entries, `1 × 1`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Row lookup: output row `r` is row `indices[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(indices.len() * xv.cols());
        for &i in indices {
            if i >= xv.rows() {
                return Err(shape_err("gather_rows", xv.shape(), (i, xv.cols())));
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::from_vec(indices.len(), xv.cols(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows(x, indices.to_vec()), rg))
    }

    /// Mean over contiguous row segments. `offsets` has one more entry than
    /// there are segments; segment `s` spans rows `offsets[s]..offsets[s+1]`
    /// and must be nonempty.
    pub fn segment_mean(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let valid = offsets.first() == Some(&0)
            && offsets.last() == Some(&xv.rows())
            && offsets.windows(2).all(|w| w[0] < w[1]);
        if !valid {
            return Err(shape_err(
                "segment_mean",
                xv.shape(),
                (offsets.len().saturating_sub(1), xv.cols()),
            ));
        }
        let segs = offsets.len() - 1;
        let mut out = Tensor::zeros(segs, xv.cols());
        for s in 0..segs {
            let inv = 1.0 / (offsets[s + 1] - offsets[s]) as f64;
            let orow = out.row_mut(s);
            for r in offsets[s]..offsets[s + 1] {
                orow.iter_mut().zip(xv.row(r)).for_each(|(o, v)| *o += v);
            }
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::SegmentMean(x, offsets.to_vec()), rg))
    }

    /// Pairwise cosine similarity of the rows of `x`, `k × k`. The diagonal
    /// is exactly 1.
    pub fn cosine_similarity_matrix(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(xv.rows());
        let mut unit = xv.clone();
        for r in 0..xv.rows() {
            let n = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateRepresentation(r));
            }
            unit.row_mut(r).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let mut out = matmul_nt(&unit, &unit)?;
        for r in 0..out.rows() {
            out.set(r, r, 1.0);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::CosineSimilarity(x, norms), rg))
    }

    /// Reverse sweep from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(idx, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut acc = |v: Var, contrib: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .data_mut()
                    .iter_mut()
                    .zip(contrib.data())
                    .for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let map = |x: &Tensor, f: &dyn Fn(usize, f64) -> f64| -> Tensor {
            let data = x.data().iter().enumerate().map(|(i, &v)| f(i, v)).collect();
            Tensor::from_vec(x.rows(), x.cols(), data).expect("same shape")
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, matmul_nt(g, self.value(*b))?);
                }
                if self.rg(*b) {
                    acc(*b, matmul_tn(self.value(*a), g)?);
                }
            }
            Op::SparseMatMul(s, b) => acc(*b, s.matmul_transposed(g)?),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddBias(x, bias) => {
                acc(*x, g.clone());
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    gb.data_mut()
                        .iter_mut()
                        .zip(g.row(r))
                        .for_each(|(o, v)| *o += v);
                }
                acc(*bias, gb);
            }
            Op::MulRows(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let cols = g.cols();
                acc(*x, map(g, &|i, v| v * wv.data()[i / cols]));
                let gw: Vec<f64> = (0..g.rows())
                    .map(|r| g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum())
                    .collect();
                acc(*w, Tensor::from_vec(g.rows(), 1, gw)?);
            }
            Op::MulConst(x, c) => acc(*x, map(g, &|i, v| v * c[i])),
            Op::Affine(x, a) => acc(*x, map(g, &|_, v| v * a)),
            Op::Tanh(x) => acc(*x, map(g, &|i, v| v * (1.0 - y.data()[i].powi(2)))),
            Op::Sigmoid(x) => {
                acc(*x, map(g, &|i, v| {
                    let s = y.data()[i];
                    v * s * (1.0 - s)
                }))
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                acc(*x, map(g, &|i, v| v / xv.data()[i]))
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x);
                acc(*x, map(g, &|i, v| {
                    let t = xv.data()[i];
                    if t >= *lo && t <= *hi {
                        v
                    } else {
                        0.0
                    }
                }))
            }
            Op::RowSoftmax(x) => {
                let mut gx = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::RowLogSoftmax(x) => {
                let mut gx = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = gr[c] - yr[c].exp() * total;
                    }
                }
                acc(*x, gx);
            }
            Op::RowLogSumExp(x) => {
                let xv = self.value(*x);
                let mut gx = xv.clone();
                for r in 0..xv.rows() {
                    let lse = y.data()[r];
                    let gr = g.data()[r];
                    gx.row_mut(r)
                        .iter_mut()
                        .for_each(|v| *v = gr * (*v - lse).exp());
                }
                acc(*x, gx);
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols();
                let bc = self.value(*b).cols();
                let mut ga = Tensor::zeros(g.rows(), ac);
                let mut gb = Tensor::zeros(g.rows(), bc);
                for r in 0..g.rows() {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let inv = 1.0 / xv.rows() as f64;
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    gx.row_mut(r)
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(o, v)| *o = v * inv);
                }
                acc(*x, gx);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                acc(*x, Tensor::filled(xv.rows(), xv.cols(), g.item()));
            }
            Op::GatherRows(x, indices) => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for (r, &i) in indices.iter().enumerate() {
                    gx.row_mut(i)
                        .iter_mut()
                        .zip(g.row(r))
                        .for_each(|(o, v)| *o += v);
                }
                acc(*x, gx);
            }
            Op::SegmentMean(x, offsets) => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for s in 0..offsets.len() - 1 {
                    let inv = 1.0 / (offsets[s + 1] - offsets[s]) as f64;
                    for r in offsets[s]..offsets[s + 1] {
                        gx.row_mut(r)
                            .iter_mut()
                            .zip(g.row(s))
                            .for_each(|(o, v)| *o = v * inv);
                    }
                }
                acc(*x, gx);
            }
            Op::CosineSimilarity(x, norms) => {
                // C = U Uᵀ with U the row-normalized input.
                let xv = self.value(*x);
                let mut unit = xv.clone();
                for (r, n) in norms.iter().enumerate() {
                    unit.row_mut(r).iter_mut().for_each(|v| *v /= n);
                }
                let mut sym = g.clone();
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        sym.set(r, c, g.get(r, c) + g.get(c, r));
                    }
                }
                let mut gx = matmul(&sym, &unit)?;
                for (r, n) in norms.iter().enumerate() {
                    let u = unit.row(r);
                    let dot: f64 = gx.row(r).iter().zip(u).map(|(a, b)| a * b).sum();
                    for (o, uv) in gx.row_mut(r).iter_mut().zip(u) {
                        *o = (*o - dot * uv) / n;
                    }
                }
                acc(*x, gx);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
