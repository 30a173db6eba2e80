use super::tensor::{matmul_into, Tensor};
use super::{softmax_row, LOG_CLAMP};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowMean(Var),
    Gather(Var, Vec<usize>),
    Softmax(Var),
    GroupMean(Var, usize),
    RepeatRows(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive operations.
///
/// Nodes are pushed after their inputs, so the node order is already a
/// topological order and `backward` is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn need_matrix(op: &'static str, a: &Tensor) -> Result<(usize, usize)> {
    if !a.is_matrix() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((a.shape()[0], a.shape()[1]))
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
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

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Copies `v`'s current value into a new constant leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let mut value = self.nodes[v.0].value.clone();
        value.clear_grad();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a trainable leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `[1×n]` row to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (m, n) = need_matrix("add_row", ta)?;
        if tr.shape() != [1, n] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: ta.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        for r in data.chunks_exact_mut(n) {
            for (x, &b) in r.iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push("add_row", value, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.map(a, |x| x * s);
        self.push("scale", value, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", value, Op::Relu(a), &[a])
    }

    /// Natural log with the argument clamped at `1e-12`.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, super::clamped_ln);
        self.push("log", value, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, f64::exp);
        self.push("exp", value, Op::Exp(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidArgument("sqrt of a negative value".into()));
        }
        let value = self.map(a, f64::sqrt);
        self.push("sqrt", value, Op::Sqrt(a), &[a])
    }

    /// Sum of all entries as a `[1×1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let s: f64 = t.data().iter().sum();
        let value = Tensor::scalar(s / t.len() as f64);
        self.push("mean", value, Op::Mean(a), &[a])
    }

    /// `[m×n] -> [m×1]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = need_matrix("row_sum", t)?;
        let data = t.data().chunks_exact(n.max(1)).map(|r| r.iter().sum()).collect();
        let value = Tensor::matrix(m, 1, if n == 0 { vec![0.0; m] } else { data })?;
        self.push("row_sum", value, Op::RowSum(a), &[a])
    }

    /// `[m×n] -> [m×1]`.
    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = need_matrix("row_mean", t)?;
        if n == 0 {
            return Err(Error::InvalidArgument("row_mean over zero columns".into()));
        }
        let data = t
            .data()
            .chunks_exact(n)
            .map(|r| r.iter().sum::<f64>() / n as f64)
            .collect();
        let value = Tensor::matrix(m, 1, data)?;
        self.push("row_mean", value, Op::RowMean(a), &[a])
    }

    /// Picks `a[i, index[i]]` from each row, giving `[m×1]`.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = need_matrix("gather", t)?;
        if index.len() != m {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&c| c >= n) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: n,
            });
        }
        let data = index.iter().enumerate().map(|(i, &c)| t.data()[i * n + c]).collect();
        let value = Tensor::matrix(m, 1, data)?;
        self.push("gather", value, Op::Gather(a, index.to_vec()), &[a])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = need_matrix("softmax", t)?;
        if !t.all_finite() {
            return Err(Error::NonFinite("softmax input"));
        }
        let mut data = vec![0.0; m * n];
        for (z, out) in t.data().chunks_exact(n).zip(data.chunks_exact_mut(n)) {
            softmax_row(z, out);
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    /// Averages each run of `group` consecutive rows: `[m·g×n] -> [m×n]`.
    pub fn group_mean(&mut self, a: Var, group: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, n) = need_matrix("group_mean", t)?;
        if group == 0 || rows % group != 0 {
            return Err(Error::ShapeMismatch {
                op: "group_mean",
                lhs: t.shape().to_vec(),
                rhs: vec![group],
            });
        }
        let m = rows / group;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let out = &mut data[i * n..(i + 1) * n];
            for j in 0..group {
                for (o, &x) in out.iter_mut().zip(t.row(i * group + j)) {
                    *o += x;
                }
            }
            for o in out.iter_mut() {
                *o /= group as f64;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push("group_mean", value, Op::GroupMean(a, group), &[a])
    }

    /// Repeats every row `times` times consecutively: `[m×n] -> [m·times×n]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = need_matrix("repeat_rows", t)?;
        let mut data = Vec::with_capacity(m * times * n);
        for i in 0..m {
            for _ in 0..times {
                data.extend_from_slice(t.row(i));
            }
        }
        let value = Tensor::matrix(m * times, n, data)?;
        self.push("repeat_rows", value, Op::RepeatRows(a, times), &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every trainable leaf ends up with a populated gradient, zero when the
    /// loss does not depend on it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let rg = |v: &Var| self.nodes[v.0].requires_grad;
            let val = |v: &Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    if rg(a) {
                        let da = accumulate(&mut grads, *a, m * k);
                        for i in 0..m {
                            let g_row = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let b_row = &tb.data()[p * n..(p + 1) * n];
                                let mut s = 0.0;
                                for (&x, &y) in g_row.iter().zip(b_row) {
                                    s += x * y;
                                }
                                da[i * k + p] += s;
                            }
                        }
                    }
                    if rg(b) {
                        // dB = Aᵀ·G
                        let mut at = vec![0.0; k * m];
                        for i in 0..m {
                            for p in 0..k {
                                at[p * m + i] = ta.data()[i * k + p];
                            }
                        }
                        let db = accumulate(&mut grads, *b, k * n);
                        matmul_into(&at, &g, db, k, m, n);
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if rg(v) {
                            let d = accumulate(&mut grads, *v, g.len());
                            d.iter_mut().zip(&g).for_each(|(d, &x)| *d += x);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if rg(a) {
                        let d = accumulate(&mut grads, *a, g.len());
                        d.iter_mut().zip(&g).for_each(|(d, &x)| *d += x);
                    }
                    if rg(b) {
                        let d = accumulate(&mut grads, *b, g.len());
                        d.iter_mut().zip(&g).for_each(|(d, &x)| *d -= x);
                    }
                }
                Op::Mul(a, b) => {
                    if rg(a) {
                        let other = val(b).data();
                        let d = accumulate(&mut grads, *a, g.len());
                        for ((d, &x), &o) in d.iter_mut().zip(&g).zip(other) {
                            *d += x * o;
                        }
                    }
                    if rg(b) {
                        let other = val(a).data();
                        let d = accumulate(&mut grads, *b, g.len());
                        for ((d, &x), &o) in d.iter_mut().zip(&g).zip(other) {
                            *d += x * o;
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if rg(a) {
                        let d = accumulate(&mut grads, *a, g.len());
                        d.iter_mut().zip(&g).for_each(|(d, &x)| *d += x);
                    }
                    if rg(row) {
                        let n = val(row).len();
                        let d = accumulate(&mut grads, *row, n);
                        for r in g.chunks_exact(n) {
                            d.iter_mut().zip(r).for_each(|(d, &x)| *d += x);
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if rg(a) {
                        let d = accumulate(&mut grads, *a, g.len());
                        d.iter_mut().zip(&g).for_each(|(d, &x)| *d += x * s);
                    }
                }
                Op::Relu(a) => {
                    let input = val(a).data();
                    let d = accumulate(&mut grads, *a, g.len());
                    for ((d, &x), &z) in d.iter_mut().zip(&g).zip(input) {
                        if z > 0.0 {
                            *d += x;
                        }
                    }
                }
                Op::Log(a) => {
                    let input = val(a).data();
                    let d = accumulate(&mut grads, *a, g.len());
                    for ((d, &x), &z) in d.iter_mut().zip(&g).zip(input) {
                        if z > LOG_CLAMP {
                            *d += x / z;
                        }
                    }
                }
                Op::Exp(a) => {
                    let out = node.value.data();
                    let d = accumulate(&mut grads, *a, g.len());
                    for ((d, &x), &y) in d.iter_mut().zip(&g).zip(out) {
                        *d += x * y;
                    }
                }
                Op::Sqrt(a) => {
                    let out = node.value.data();
                    let d = accumulate(&mut grads, *a, g.len());
                    for ((d, &x), &y) in d.iter_mut().zip(&g).zip(out) {
                        if y > 0.0 {
                            *d += x * 0.5 / y;
                        }
                    }
                }
                Op::Sum(a) => {
                    let n = val(a).len();
                    let d = accumulate(&mut grads, *a, n);
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Mean(a) => {
                    let n = val(a).len();
                    let s = g[0] / n as f64;
                    let d = accumulate(&mut grads, *a, n);
                    d.iter_mut().for_each(|d| *d += s);
                }
                Op::RowSum(a) | Op::RowMean(a) => {
                    let n = val(a).cols();
                    let div = if matches!(node.op, Op::RowMean(_)) { n as f64 } else { 1.0 };
                    let d = accumulate(&mut grads, *a, val(a).len());
                    for (r, &x) in d.chunks_exact_mut(n).zip(&g) {
                        let s = x / div;
                        r.iter_mut().for_each(|d| *d += s);
                    }
                }
                Op::Gather(a, index) => {
                    let n = val(a).cols();
                    let d = accumulate(&mut grads, *a, val(a).len());
                    for (i, (&c, &x)) in index.iter().zip(&g).enumerate() {
                        d[i * n + c] += x;
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let d = accumulate(&mut grads, *a, y.len());
                    for ((dr, gr), yr) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(&x, &p)| x * p).sum();
                        for ((d, &x), &p) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += p * (x - dot);
                        }
                    }
                }
                Op::GroupMean(a, group) => {
                    let n = node.value.cols();
                    let d = accumulate(&mut grads, *a, val(a).len());
                    for (i, gr) in g.chunks_exact(n).enumerate() {
                        for j in 0..*group {
                            let r = i * group + j;
                            for (d, &x) in d[r * n..(r + 1) * n].iter_mut().zip(gr) {
                                *d += x / *group as f64;
                            }
                        }
                    }
                }
                Op::RepeatRows(a, times) => {
                    let n = val(a).cols();
                    let d = accumulate(&mut grads, *a, val(a).len());
                    for (r, gr) in g.chunks_exact(n).enumerate() {
                        let i = r / times;
                        for (d, &x) in d[i * n..(i + 1) * n].iter_mut().zip(gr) {
                            *d += x;
                        }
                    }
                }
            }
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }
}
