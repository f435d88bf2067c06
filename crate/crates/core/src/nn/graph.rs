//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` is a single reverse sweep.

use crate::error::{CladError, Result};

use super::tensor::{check_matmul, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    LogSoftmax(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    ScaleRows(Var, Var),
    NormalizeRows(Var),
    SumRowBlocks(Var, usize),
    GatherRows(Var, Vec<usize>),
    Select(Var, Vec<(usize, usize)>),
    GruGates(Var, Var, Var),
    Memory {
        input: Var,
        coef: Var,
        left: usize,
        right: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded computation tape.
///
/// Gradients of parameter leaves accumulate across `backward` calls until
/// [`Graph::zero_grad`] is called.
pub struct Graph {
    nodes: Vec<Node>,
    param_grads: Vec<Option<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(what: &str, a: [usize; 2], b: [usize; 2]) -> CladError {
    CladError::contract(format!(
        "{what} shape mismatch: [{}x{}] vs [{}x{}]",
        a[0], a[1], b[0], b[1]
    ))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_grads: Vec::new(),
        }
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

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
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

    /// Whether gradient can flow into `v` from a loss built on it.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A trainable leaf. Its gradient is readable through [`Graph::grad`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Param, true)
    }

    /// Accumulated gradient of a parameter leaf, if any flowed into it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.param_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.param_grads.clear();
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_matmul(av.shape(), bv.shape())?;
        let mut out = Tensor::zeros(av.rows(), bv.cols());
        matmul_acc(av, bv, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(what, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Adds a `1 × C` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(shape_err("bias", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        let c = av.cols();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += bv.data()[i % c];
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    fn unary(&mut self, a: Var, name: &str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let av = self.value(a);
        if !av.is_finite() {
            return Err(CladError::Numeric(format!("non-finite input to {name}")));
        }
        let out = av.map(f);
        let rg = self.rg(a);
        Ok(self.push(out, op, rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", sigmoid, Op::Sigmoid(a))
    }

    /// GRU state update from input and recurrent pre-activations
    /// (`[B × 3H]` each, gates ordered z, r, n) and the previous state
    /// `[B × H]`: `h = (1 − z)·n + z·h_prev`, `n = tanh(x_n + r·u_n)`.
    pub fn gru_gates(&mut self, gx: Var, gh: Var, h_prev: Var) -> Result<Var> {
        let [b, h3] = self.shape(gx);
        let [pb, hd] = self.shape(h_prev);
        if self.shape(gh) != [b, h3] || pb != b || h3 != 3 * hd {
            return Err(CladError::contract(format!(
                "gru gates expect [Bx3H], [Bx3H], [BxH], got [{b}x{h3}], [{}x{}], [{pb}x{hd}]",
                self.shape(gh)[0],
                self.shape(gh)[1]
            )));
        }
        let (xv, hv, pv) = (self.value(gx), self.value(gh), self.value(h_prev));
        let mut out = Tensor::zeros(b, hd);
        for r in 0..b {
            let (x, u, h) = (xv.row(r), hv.row(r), pv.row(r));
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                let (z, _, n) = gru_unit(x, u, hd, j);
                *o = n + z * (h[j] - n);
            }
        }
        let rg = self.rg(gx) || self.rg(gh) || self.rg(h_prev);
        Ok(self.push(out, Op::GruGates(gx, gh, h_prev), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", f64::exp, Op::Exp(a))
    }

    /// Log-softmax along `axis` (1: each row is a distribution over columns,
    /// 0: each column is a distribution over rows). Stabilized by subtracting
    /// the maximum.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        if axis > 1 {
            return Err(CladError::contract(format!(
                "log_softmax axis {axis} out of range"
            )));
        }
        let av = self.value(a);
        if !av.is_finite() {
            return Err(CladError::Numeric("non-finite input to log_softmax".into()));
        }
        let out = if axis == 1 {
            log_softmax_rows(av)
        } else {
            log_softmax_rows(&av.transpose()).transpose()
        };
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmax(a, axis), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CladError::contract("concat of zero tensors"));
        }
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::vstack(&values)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CladError::contract("concat of zero tensors"));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(shape_err("column concat", self.shape(parts[0]), v.shape()));
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let v = self.value(p);
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
                off += v.cols();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.rows() {
            return Err(CladError::contract(format!(
                "row slice {start}..{end} of [{}x{}]",
                av.rows(),
                av.cols()
            )));
        }
        let out = av.rows_slice(start, end);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.cols() {
            return Err(CladError::contract(format!(
                "column slice {start}..{end} of [{}x{}]",
                av.rows(),
                av.cols()
            )));
        }
        let mut out = Tensor::zeros(av.rows(), end - start);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..end]);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).clone().reshaped(rows, cols)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Sum of all entries as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Multiplies row `r` of `a` by `s[r]`, where `s` is `R × 1`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value(a), self.value(s));
        if sv.cols() != 1 || sv.rows() != av.rows() {
            return Err(shape_err("row scale", av.shape(), sv.shape()));
        }
        let mut out = av.clone();
        for r in 0..av.rows() {
            let k = sv.data()[r];
            for x in out.row_mut(r) {
                *x *= k;
            }
        }
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::ScaleRows(a, s), rg))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..av.rows() {
            let norm = av.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(CladError::Numeric(format!("row {r} has non-finite norm")));
            }
            if norm == 0.0 {
                return Err(CladError::domain(format!(
                    "row {r} has zero norm; cannot normalize"
                )));
            }
            for x in out.row_mut(r) {
                *x /= norm;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::NormalizeRows(a), rg))
    }

    /// For a time-major stack `[T·B × D]`, returns `[B × D]` with
    /// `out[b] = Σ_t a[t·B + b]`.
    pub fn sum_row_blocks(&mut self, a: Var, block: usize) -> Result<Var> {
        let av = self.value(a);
        if block == 0 || !av.rows().is_multiple_of(block) {
            return Err(CladError::contract(format!(
                "cannot split {} rows into blocks of {block}",
                av.rows()
            )));
        }
        let mut out = Tensor::zeros(block, av.cols());
        for r in 0..av.rows() {
            let b = r % block;
            for (o, x) in out.row_mut(b).iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SumRowBlocks(a, block), rg))
    }

    /// Row lookup into an embedding table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let mut out = Tensor::zeros(ids.len(), tv.cols());
        for (i, &id) in ids.iter().enumerate() {
            if id >= tv.rows() {
                return Err(CladError::contract(format!(
                    "id {id} outside table of {} rows",
                    tv.rows()
                )));
            }
            out.row_mut(i).copy_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec()), rg))
    }

    /// Picks individual entries into a `1 × k` row.
    pub fn select(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let av = self.value(a);
        let mut data = Vec::with_capacity(at.len());
        for &(r, c) in at {
            if r >= av.rows() || c >= av.cols() {
                return Err(CladError::contract(format!(
                    "select ({r},{c}) outside [{}x{}]",
                    av.rows(),
                    av.cols()
                )));
            }
            data.push(av.get(r, c));
        }
        let out = Tensor::row_vector(data);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Select(a, at.to_vec()), rg))
    }

    /// Finite-impulse sequential memory over time (rows):
    /// `out[t] = Σ_{i=0..=left} coef[i] ⊙ x[t-i] + Σ_{j=1..=right} coef[left+j] ⊙ x[t+j]`,
    /// with frames outside the sequence read as zero.
    pub fn memory(&mut self, input: Var, coef: Var, left: usize, right: usize) -> Result<Var> {
        let (xv, cv) = (self.value(input), self.value(coef));
        if cv.rows() != left + 1 + right || cv.cols() != xv.cols() {
            return Err(shape_err("memory coefficient", xv.shape(), cv.shape()));
        }
        let out = memory_forward(xv, cv, left, right);
        let rg = self.rg(input) || self.rg(coef);
        Ok(self.push(
            out,
            Op::Memory {
                input,
                coef,
                left,
                right,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into parameter leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(CladError::contract(format!(
                "backward needs a scalar loss, got [{}x{}]",
                shape[0], shape[1]
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        if self.param_grads.len() < self.nodes.len() {
            self.param_grads.resize(self.nodes.len(), None);
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Constant => {}
                Op::Param => accumulate(&mut self.param_grads[i], g),
                Op::MatMul(a, b) => {
                    if self.rg(a) {
                        let bv = self.value(b);
                        let mut da = Tensor::zeros(g.rows(), bv.rows());
                        matmul_nt_acc(&g, bv, &mut da);
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.rg(b) {
                        let av = self.value(a);
                        let mut db = Tensor::zeros(av.cols(), g.cols());
                        matmul_tn_acc(av, &g, &mut db);
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Add(a, b) => {
                    self.send(&mut grads, b, || g.clone());
                    self.send(&mut grads, a, || g);
                }
                Op::Sub(a, b) => {
                    self.send(&mut grads, b, || g.scaled(-1.0));
                    self.send(&mut grads, a, || g);
                }
                Op::Mul(a, b) => {
                    let gb = zip(&g, self.value(a), |x, y| x * y);
                    let ga = zip(&g, self.value(b), |x, y| x * y);
                    self.send(&mut grads, a, || ga);
                    self.send(&mut grads, b, || gb);
                }
                Op::Scale(a, s) => self.send(&mut grads, a, || g.scaled(s)),
                Op::AddBias(a, b) => {
                    if self.rg(b) {
                        let mut db = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (d, x) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *d += x;
                            }
                        }
                        accumulate(&mut grads[b.0], db);
                    }
                    self.send(&mut grads, a, || g);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let da = zip(&g, y, |gy, yv| gy * (1.0 - yv * yv));
                    self.send(&mut grads, a, || da);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let da = zip(&g, y, |gy, yv| gy * yv * (1.0 - yv));
                    self.send(&mut grads, a, || da);
                }
                Op::Relu(a) => {
                    let x = self.value(a);
                    let da = zip(&g, x, |gy, xv| if xv > 0.0 { gy } else { 0.0 });
                    self.send(&mut grads, a, || da);
                }
                Op::Exp(a) => {
                    let y = &self.nodes[i].value;
                    let da = zip(&g, y, |gy, yv| gy * yv);
                    self.send(&mut grads, a, || da);
                }
                Op::LogSoftmax(a, axis) => {
                    let y = &self.nodes[i].value;
                    let da = if axis == 1 {
                        log_softmax_rows_backward(y, &g)
                    } else {
                        log_softmax_rows_backward(&y.transpose(), &g.transpose()).transpose()
                    };
                    self.send(&mut grads, a, || da);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let r = self.value(p).rows();
                        if self.rg(p) {
                            accumulate(&mut grads[p.0], g.rows_slice(off, off + r));
                        }
                        off += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let c = self.value(p).cols();
                        if self.rg(p) {
                            let mut dp = Tensor::zeros(g.rows(), c);
                            for r in 0..g.rows() {
                                dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                            }
                            accumulate(&mut grads[p.0], dp);
                        }
                        off += c;
                    }
                }
                Op::SliceRows(a, start) => {
                    if self.rg(a) {
                        let [r, c] = self.shape(a);
                        let da = grads[a.0].get_or_insert_with(|| Tensor::zeros(r, c));
                        for (d, x) in da.data_mut()[start * c..start * c + g.len()]
                            .iter_mut()
                            .zip(g.data())
                        {
                            *d += x;
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    if self.rg(a) {
                        let [r, c] = self.shape(a);
                        let da = grads[a.0].get_or_insert_with(|| Tensor::zeros(r, c));
                        for r in 0..g.rows() {
                            for (d, x) in da.row_mut(r)[start..start + g.cols()]
                                .iter_mut()
                                .zip(g.row(r))
                            {
                                *d += x;
                            }
                        }
                    }
                }
                Op::GruGates(gx, gh, hp) => {
                    let hd = g.cols();
                    let (xv, hv, pv) = (self.value(gx), self.value(gh), self.value(hp));
                    let mut dx = Tensor::zeros(g.rows(), 3 * hd);
                    let mut dh = Tensor::zeros(g.rows(), 3 * hd);
                    let mut dp = Tensor::zeros(g.rows(), hd);
                    for b in 0..g.rows() {
                        let (x, u, h) = (xv.row(b), hv.row(b), pv.row(b));
                        for j in 0..hd {
                            let (z, r, n) = gru_unit(x, u, hd, j);
                            let gj = g.get(b, j);
                            let dz = gj * (h[j] - n) * z * (1.0 - z);
                            let dn = gj * (1.0 - z) * (1.0 - n * n);
                            let dr = dn * u[2 * hd + j] * r * (1.0 - r);
                            dx.row_mut(b)[j] = dz;
                            dx.row_mut(b)[hd + j] = dr;
                            dx.row_mut(b)[2 * hd + j] = dn;
                            dh.row_mut(b)[j] = dz;
                            dh.row_mut(b)[hd + j] = dr;
                            dh.row_mut(b)[2 * hd + j] = dn * r;
                            dp.row_mut(b)[j] = gj * z;
                        }
                    }
                    self.send(&mut grads, gx, || dx);
                    self.send(&mut grads, gh, || dh);
                    self.send(&mut grads, hp, || dp);
                }
                Op::Transpose(a) => self.send(&mut grads, a, || g.transpose()),
                Op::Reshape(a) => {
                    let [r, c] = self.shape(a);
                    self.send(&mut grads, a, || g.reshaped(r, c).expect("reshape grad"));
                }
                Op::Sum(a) => {
                    let [r, c] = self.shape(a);
                    let v = g.item();
                    self.send(&mut grads, a, || Tensor::filled(r, c, v));
                }
                Op::ScaleRows(a, s) => {
                    let (av, sv) = (self.value(a), self.value(s));
                    if self.rg(s) {
                        let mut ds = Tensor::zeros(sv.rows(), 1);
                        for r in 0..av.rows() {
                            ds.data_mut()[r] =
                                g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum();
                        }
                        accumulate(&mut grads[s.0], ds);
                    }
                    if self.rg(a) {
                        let mut da = g;
                        for r in 0..da.rows() {
                            let k = sv.data()[r];
                            for x in da.row_mut(r) {
                                *x *= k;
                            }
                        }
                        accumulate(&mut grads[a.0], da);
                    }
                }
                Op::NormalizeRows(a) => {
                    if self.rg(a) {
                        let (x, y) = (self.value(a), &self.nodes[i].value);
                        let mut da = Tensor::zeros(x.rows(), x.cols());
                        for r in 0..x.rows() {
                            let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                            let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(p, q)| p * q).sum();
                            for ((d, &yv), &gv) in
                                da.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r))
                            {
                                *d = (gv - yv * dot) / norm;
                            }
                        }
                        accumulate(&mut grads[a.0], da);
                    }
                }
                Op::SumRowBlocks(a, block) => {
                    if self.rg(a) {
                        let [rows, cols] = self.shape(a);
                        let mut da = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            da.row_mut(r).copy_from_slice(g.row(r % block));
                        }
                        accumulate(&mut grads[a.0], da);
                    }
                }
                Op::GatherRows(table, ids) => {
                    if self.rg(table) {
                        let [rows, cols] = self.shape(table);
                        let mut dt = Tensor::zeros(rows, cols);
                        for (i, &id) in ids.iter().enumerate() {
                            for (d, x) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                                *d += x;
                            }
                        }
                        accumulate(&mut grads[table.0], dt);
                    }
                }
                Op::Select(a, at) => {
                    if self.rg(a) {
                        let [rows, cols] = self.shape(a);
                        let mut da = Tensor::zeros(rows, cols);
                        for (k, &(r, c)) in at.iter().enumerate() {
                            da.data_mut()[r * cols + c] += g.data()[k];
                        }
                        accumulate(&mut grads[a.0], da);
                    }
                }
                Op::Memory {
                    input,
                    coef,
                    left,
                    right,
                } => {
                    let (xv, cv) = (self.value(input), self.value(coef));
                    let (dx, dc) = memory_backward(xv, cv, &g, left, right);
                    if self.rg(input) {
                        accumulate(&mut grads[input.0], dx);
                    }
                    if self.rg(coef) {
                        accumulate(&mut grads[coef.0], dc);
                    }
                }
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, g: impl FnOnce() -> Tensor) {
        if self.rg(to) {
            accumulate(&mut grads[to.0], g());
        }
    }
}

fn gru_unit(x: &[f64], u: &[f64], hd: usize, j: usize) -> (f64, f64, f64) {
    let z = sigmoid(x[j] + u[j]);
    let r = sigmoid(x[hd + j] + u[hd + j]);
    let n = (x[2 * hd + j] + r * u[2 * hd + j]).tanh();
    (z, r, n)
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

pub(crate) fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

fn log_softmax_rows_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let mut out = g.clone();
    for r in 0..y.rows() {
        let gsum: f64 = g.row(r).iter().sum();
        for (o, &yv) in out.row_mut(r).iter_mut().zip(y.row(r)) {
            *o -= yv.exp() * gsum;
        }
    }
    out
}

pub(crate) fn memory_forward(x: &Tensor, coef: &Tensor, left: usize, right: usize) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for t in 0..x.rows() {
        memory_row(x, coef, left, right, t, out.row_mut(t));
    }
    out
}

/// One output row of the memory filter; shared with the streaming path so
/// both produce bitwise-identical values.
pub(crate) fn memory_row(
    x: &Tensor,
    coef: &Tensor,
    left: usize,
    right: usize,
    t: usize,
    out: &mut [f64],
) {
    for i in 0..=left {
        if i > t {
            break;
        }
        for ((o, &c), &v) in out.iter_mut().zip(coef.row(i)).zip(x.row(t - i)) {
            *o += c * v;
        }
    }
    for j in 1..=right {
        if t + j >= x.rows() {
            break;
        }
        for ((o, &c), &v) in out.iter_mut().zip(coef.row(left + j)).zip(x.row(t + j)) {
            *o += c * v;
        }
    }
}

fn memory_backward(
    x: &Tensor,
    coef: &Tensor,
    g: &Tensor,
    left: usize,
    right: usize,
) -> (Tensor, Tensor) {
    let t_len = x.rows();
    let mut dx = Tensor::zeros(x.rows(), x.cols());
    let mut dc = Tensor::zeros(coef.rows(), coef.cols());
    for t in 0..t_len {
        let gr = g.row(t);
        for i in 0..=left.min(t) {
            let src = t - i;
            for k in 0..x.cols() {
                dx.data_mut()[src * x.cols() + k] += coef.get(i, k) * gr[k];
                dc.data_mut()[i * x.cols() + k] += x.get(src, k) * gr[k];
            }
        }
        for j in 1..=right {
            let src = t + j;
            if src >= t_len {
                break;
            }
            for k in 0..x.cols() {
                dx.data_mut()[src * x.cols() + k] += coef.get(left + j, k) * gr[k];
                dc.data_mut()[(left + j) * x.cols() + k] += x.get(src, k) * gr[k];
            }
        }
    }
    (dx, dc)
}
