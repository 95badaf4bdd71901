//! Dense f64 tensors (rank at most 2), a reverse-mode tape, small MLPs,
//! optimizers and a finite-difference gradient checker.
//!
//! A [`Tape`] records every operation of one forward pass. Values live on
//! the tape nodes and [`Var`] is a handle to a node. Leaves created with
//! [`Tape::leaf`] receive gradients; [`Tape::constant`] leaves do not, and
//! nodes that cannot reach a differentiable leaf are skipped during
//! [`Tape::backward`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{self, stream};

// ---------------------------------------------------------------- tensors

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self { rows: 1, cols: values.len(), data: values }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    /// Rows `idx` of `self`, in that order.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: idx.len(), cols: self.cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a 1x1 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape() != (1, 1) {
            return Err(Error::NonScalarLoss { rows: self.rows, cols: self.cols });
        }
        Ok(self.data[0])
    }

    fn same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let o = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b = &other.data[p * m..(p + 1) * m];
                for (oj, bj) in o.iter_mut().zip(b) {
                    *oj += a * bj;
                }
            }
        }
        Ok(Self { rows: n, cols: m, data: out })
    }

    /// `self · otherᵀ`.
    fn matmul_nt(&self, other: &Self) -> Self {
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                out[i * m + j] = a.iter().zip(other.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        debug_assert_eq!(k, other.cols);
        Self { rows: n, cols: m, data: out }
    }

    /// `selfᵀ · other`.
    fn matmul_tn(&self, other: &Self) -> Self {
        let (n, k, m) = (self.cols, self.rows, other.cols);
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let a = self.row(p);
            let b = other.row(p);
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let o = &mut out[i * m..(i + 1) * m];
                for (oj, bj) in o.iter_mut().zip(b) {
                    *oj += ai * bj;
                }
            }
        }
        Self { rows: n, cols: m, data: out }
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self { rows: self.cols, cols: self.rows, data }
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(&self, row: &Self) -> Result<Self> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "row broadcast {:?} onto {:?}",
                row.shape(),
                self.shape()
            )));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (v, b) in out.data[r * self.cols..(r + 1) * self.cols].iter_mut().zip(&row.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn col_sums(&self) -> Self {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        Self::row_vector(out)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        out
    }

    /// Index of the largest entry of each row (first on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// `D[i][j] = ‖self_i − other_j‖²`, computed from explicit differences.
    pub fn pairwise_sq_dist(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "pairwise distance between widths {} and {}",
                self.cols, other.cols
            )));
        }
        let (n, m) = (self.rows, other.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                out[i * m + j] = a.iter().zip(other.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        Ok(Self { rows: n, cols: m, data: out })
    }
}

/// Mean of `−ln softmax(logits)[label]` over rows.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(ce_forward(logits, labels)?.0)
}

fn ce_forward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if labels.len() != logits.rows {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} rows of logits",
            labels.len(),
            logits.rows
        )));
    }
    if logits.rows == 0 {
        return Err(Error::EmptyBatch("cross-entropy over zero rows".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols) {
        return Err(Error::IndexOutOfRange { index: bad, len: logits.cols });
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok((total / logits.rows as f64, logits.softmax_rows()))
}

impl serde::Serialize for Tensor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Tensor", 2)?;
        st.serialize_field("shape", &[self.rows(), self.cols()])?;
        st.serialize_field("values", self.data())?;
        st.end()
    }
}

// ---------------------------------------------------------------- tape

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Sum(usize),
    Mean(usize),
    ColMean(usize),
    Transpose(usize),
    SoftmaxRows(usize),
    SoftmaxCe { logits: usize, labels: Vec<usize>, probs: Tensor },
    PairwiseSqDist(usize, usize),
    /// `dk[i * b.rows + j]` is the derivative of the summed kernel in the
    /// squared distance of pair `(i, j)`, kept from the forward pass.
    RbfMean { a: usize, b: usize, dk: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward pass for reverse-mode differentiation. One tape per
/// pass; tapes are never shared between training runs.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    track_kinks: bool,
    kinks: Vec<bool>,
}

/// Gradients from one [`Tape::backward`] call.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; all zeros when the loss does not depend
    /// on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that also records which side of zero every relu input falls
    /// on, so perturbed passes can be compared for kink crossings.
    pub fn with_kink_tracking() -> Self {
        Self { track_kinks: true, ..Self::default() }
    }

    pub fn kink_signature(&self) -> &[bool] {
        &self.kinks
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a.0, b.0), ng))
    }

    /// `a` plus the `1 x cols` row `b` broadcast down the rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::AddRow(a.0, b.0), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "add")?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a.0, b.0), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "sub")?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a.0, b.0), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "mul")?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a.0, b.0), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| k * x);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a.0, k), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        if self.track_kinks {
            let signs: Vec<bool> = self.value(a).data.iter().map(|&x| x > 0.0).collect();
            self.kinks.extend(signs);
        }
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a.0), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a.0), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a.0), ng)
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data.iter().sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a.0), ng)
    }

    /// Mean of all entries, as a 1x1 tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::EmptyBatch("mean of an empty tensor".into()));
        }
        let v = Tensor::scalar(t.data.iter().sum::<f64>() / t.len() as f64);
        let ng = self.ng(a);
        Ok(self.push(v, Op::Mean(a.0), ng))
    }

    /// Column means, as a `1 x cols` row.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rows == 0 {
            return Err(Error::EmptyBatch("column mean over zero rows".into()));
        }
        let n = t.rows as f64;
        let v = t.col_sums().map(|s| s / n);
        let ng = self.ng(a);
        Ok(self.push(v, Op::ColMean(a.0), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a.0), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax_rows();
        let ng = self.ng(a);
        self.push(v, Op::SoftmaxRows(a.0), ng)
    }

    /// Mean softmax cross-entropy of `logits` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ce_forward(self.value(logits), labels)?;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe { logits: logits.0, labels: labels.to_vec(), probs },
            ng,
        ))
    }

    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).pairwise_sq_dist(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::PairwiseSqDist(a.0, b.0), ng))
    }

    /// `Σ_s mean_ij exp(−‖a_i − b_j‖² / 2σ_s²)` as one node, without
    /// materializing the distance matrix on the tape.
    pub fn rbf_kernel_mean(&mut self, a: Var, b: Var, bandwidths: &[f64]) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols != bv.cols {
            return Err(Error::ShapeMismatch(format!(
                "rbf_kernel_mean: {}x{} vs {}x{}",
                av.rows, av.cols, bv.rows, bv.cols
            )));
        }
        if av.rows == 0 || bv.rows == 0 {
            return Err(Error::EmptyBatch("rbf_kernel_mean needs rows on both sides".into()));
        }
        let coefs: Vec<f64> = bandwidths.iter().map(|s| -1.0 / (2.0 * s * s)).collect();
        let kern = KernelTerms::new(&coefs);
        let (n, m) = (av.rows, bv.rows);
        let mut dk = vec![0.0; n * m];
        let mut total = 0.0;
        if a == b {
            // Symmetric: each off-diagonal pair once, the diagonal at d = 0.
            let (k0, g0) = kern.eval(0.0);
            for (i, ai) in av.data.chunks_exact(av.cols).enumerate() {
                dk[i * n + i] = g0;
                for (j, aj) in av.data.chunks_exact(av.cols).enumerate().skip(i + 1) {
                    let (k, g) = kern.eval(sq_dist(ai, aj));
                    total += 2.0 * k;
                    dk[i * n + j] = g;
                    dk[j * n + i] = g;
                }
            }
            total += n as f64 * k0;
        } else {
            for (ai, row) in av.data.chunks_exact(av.cols).zip(dk.chunks_exact_mut(m)) {
                for (bj, out) in bv.data.chunks_exact(bv.cols).zip(row) {
                    let (k, g) = kern.eval(sq_dist(ai, bj));
                    total += k;
                    *out = g;
                }
            }
        }
        let v = Tensor::scalar(total / (n * m) as f64);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::RbfMean { a: a.0, b: b.0, dk }, ng))
    }

    /// Reverse pass from a 1x1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.value(loss).shape();
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape()).collect() })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let mut acc = |j: usize, t: Tensor| {
            if !self.nodes[j].needs_grad {
                return;
            }
            match &mut grads[j] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_nt(val(*b)));
                acc(*b, val(*a).matmul_tn(g));
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.col_sums());
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip(val(*b), |x, y| x * y));
                acc(*b, g.zip(val(*a), |x, y| x * y));
            }
            Op::Scale(a, k) => acc(*a, g.map(|x| k * x)),
            Op::Relu(a) => acc(*a, g.zip(val(*a), |x, inp| if inp > 0.0 { x } else { 0.0 })),
            Op::Tanh(a) => acc(*a, g.zip(&node.value, |x, y| x * (1.0 - y * y))),
            Op::Exp(a) => acc(*a, g.zip(&node.value, |x, y| x * y)),
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Tensor::filled(r, c, g.data[0]));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Tensor::filled(r, c, g.data[0] / (r * c) as f64));
            }
            Op::ColMean(a) => {
                let (r, c) = val(*a).shape();
                let scaled = g.map(|x| x / r as f64);
                let mut t = Tensor::zeros(r, c);
                for row in 0..r {
                    t.data[row * c..(row + 1) * c].copy_from_slice(&scaled.data);
                }
                acc(*a, t);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::SoftmaxRows(a) => {
                let s = &node.value;
                let mut t = Tensor::zeros(s.rows, s.cols);
                for r in 0..s.rows {
                    let (sr, gr) = (s.row(r), g.row(r));
                    let dot: f64 = sr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for c in 0..s.cols {
                        t.data[r * s.cols + c] = sr[c] * (gr[c] - dot);
                    }
                }
                acc(*a, t);
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let n = probs.rows as f64;
                let mut t = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    t.data[r * probs.cols + y] -= 1.0;
                }
                let k = g.data[0] / n;
                acc(*logits, t.map(|x| k * x));
            }
            Op::PairwiseSqDist(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                // dA = 2 (diag(G 1) A − G B),  dB = 2 (diag(Gᵀ 1) B − Gᵀ A)
                let gb = g.matmul(bv).expect("shapes checked in forward");
                let gta = g.matmul_tn(av);
                let col = g.col_sums();
                let mut da = Tensor::zeros(av.rows, av.cols);
                for i in 0..av.rows {
                    let rs: f64 = g.row(i).iter().sum();
                    for k in 0..av.cols {
                        da.data[i * av.cols + k] = 2.0 * (rs * av.get(i, k) - gb.get(i, k));
                    }
                }
                let mut db = Tensor::zeros(bv.rows, bv.cols);
                for j in 0..bv.rows {
                    for k in 0..bv.cols {
                        db.data[j * bv.cols + k] = 2.0 * (col.data[j] * bv.get(j, k) - gta.get(j, k));
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::RbfMean { a, b, dk } => {
                let (av, bv) = (val(*a), val(*b));
                let scale = 2.0 * g.data[0] / (av.rows * bv.rows) as f64;
                let c = av.cols;
                let mut da = Tensor::zeros(av.rows, c);
                let mut db = Tensor::zeros(bv.rows, c);
                for ((ai, dai), wrow) in
                    av.data.chunks_exact(c).zip(da.data.chunks_exact_mut(c)).zip(dk.chunks_exact(bv.rows))
                {
                    for ((bj, dbj), &w) in bv.data.chunks_exact(c).zip(db.data.chunks_exact_mut(c)).zip(wrow) {
                        let w = scale * w;
                        for (((x, y), gx), gy) in ai.iter().zip(bj).zip(dai.iter_mut()).zip(dbj.iter_mut()) {
                            let diff = w * (x - y);
                            *gx += diff;
                            *gy -= diff;
                        }
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
        }
    }
}

/// `Σ_s exp(k_s d)` and its derivative in `d`. When every coefficient is
/// the mildest one times a power of two (bandwidths spaced by factors of
/// two), one `exp` and repeated squaring serve all terms.
struct KernelTerms<'a> {
    coefs: &'a [f64],
    base: f64,
    squarings: Option<Vec<u32>>,
}

impl<'a> KernelTerms<'a> {
    fn new(coefs: &'a [f64]) -> Self {
        let base = coefs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let squarings = coefs
            .iter()
            .map(|c| {
                let r = c / base;
                (r >= 1.0 && r <= 1024.0 && r.fract() == 0.0 && (r as u32).is_power_of_two())
                    .then(|| (r as u32).trailing_zeros())
            })
            .collect();
        Self { coefs, base, squarings }
    }

    #[inline]
    fn eval(&self, d: f64) -> (f64, f64) {
        let (mut v, mut g) = (0.0, 0.0);
        match &self.squarings {
            Some(sq) => {
                let u = (self.base * d).exp();
                for (&n, &k) in sq.iter().zip(self.coefs) {
                    let mut e = u;
                    for _ in 0..n {
                        e *= e;
                    }
                    v += e;
                    g += k * e;
                }
            }
            None => {
                for &k in self.coefs {
                    let e = (k * d).exp();
                    v += e;
                    g += k * e;
                }
            }
        }
        (v, g)
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum()
}

// ---------------------------------------------------------------- networks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Logits,
    Reconstruction,
}

/// A fully connected network: `widths[i] -> widths[i+1]` followed by
/// `activations[i]`, for each layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub head: HeadKind,
}

impl NetworkSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>, head: HeadKind) -> Result<Self> {
        let s = Self { widths, activations, head };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidConfig("a network needs at least one layer".into()));
        }
        if self.activations.len() != self.widths.len() - 1 {
            return Err(Error::InvalidConfig(format!(
                "{} activations for {} layers",
                self.activations.len(),
                self.widths.len() - 1
            )));
        }
        if self.widths.iter().any(|&w| w == 0 || w > 4096) {
            return Err(Error::InvalidConfig("layer widths must be in 1..=4096".into()));
        }
        if self.head == HeadKind::Logits && self.output_width() < 2 {
            return Err(Error::InvalidConfig("a logits head needs at least two outputs".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.activations.len()
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

/// Applies `spec` on the tape. `layer_params` holds `[w0, b0, w1, b1, ..]`
/// with `wi: in x out` and `bi: 1 x out`.
pub fn forward(tape: &mut Tape, spec: &NetworkSpec, layer_params: &[Var], input: Var) -> Result<Var> {
    if layer_params.len() != 2 * spec.layers() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameter tensors for {} layers",
            layer_params.len(),
            spec.layers()
        )));
    }
    if tape.value(input).cols() != spec.input_width() {
        return Err(Error::ShapeMismatch(format!(
            "input width {} but the network expects {}",
            tape.value(input).cols(),
            spec.input_width()
        )));
    }
    let mut h = input;
    for (l, act) in spec.activations.iter().enumerate() {
        let z = tape.matmul(h, layer_params[2 * l])?;
        let z = tape.add_row(z, layer_params[2 * l + 1])?;
        h = match act {
            Activation::Relu => tape.relu(z),
            Activation::Tanh => tape.tanh(z),
            Activation::Identity => z,
        };
    }
    Ok(h)
}

/// Tape-free inference with the same arithmetic as [`forward`].
pub fn forward_eval(spec: &NetworkSpec, layer_params: &[&Tensor], input: &Tensor) -> Result<Tensor> {
    if layer_params.len() != 2 * spec.layers() {
        return Err(Error::ShapeMismatch("parameter count does not match the network".into()));
    }
    if input.cols() != spec.input_width() {
        return Err(Error::ShapeMismatch(format!(
            "input width {} but the network expects {}",
            input.cols(),
            spec.input_width()
        )));
    }
    let mut h = input.clone();
    for (l, act) in spec.activations.iter().enumerate() {
        let z = h.matmul(layer_params[2 * l])?.add_row(layer_params[2 * l + 1])?;
        h = match act {
            Activation::Relu => z.map(|x| x.max(0.0)),
            Activation::Tanh => z.map(f64::tanh),
            Activation::Identity => z,
        };
    }
    Ok(h)
}

// ---------------------------------------------------------------- parameters

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// How a [`ParamSet`] was initialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitRecord {
    pub seed: u64,
    pub scheme: String,
}

pub const INIT_SCHEME: &str = "glorot-uniform/chacha8-le64-boxmuller-v1";

/// Named parameters for one or more networks. Each network's tensors are
/// contiguous and named `{net}.{layer}.weight` / `{net}.{layer}.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    init: Option<InitRecord>,
}

impl ParamSet {
    /// Weights uniform in `[−a, a]` with `a = sqrt(6 / (fan_in + fan_out))`,
    /// biases zero. Network `k` draws from stream `INIT + k` of `seed`.
    pub fn init(nets: &[(&str, &NetworkSpec)], seed: u64) -> Result<Self> {
        let mut params = Vec::new();
        for (k, (name, spec)) in nets.iter().enumerate() {
            spec.validate()?;
            let mut rng = seeding::rng_for(seed, stream::INIT + k as u64);
            for l in 0..spec.layers() {
                let (fi, fo) = (spec.widths[l], spec.widths[l + 1]);
                let a = (6.0 / (fi + fo) as f64).sqrt();
                let w: Vec<f64> = (0..fi * fo).map(|_| a * (2.0 * seeding::unit_f64(&mut rng) - 1.0)).collect();
                params.push(Param { name: format!("{name}.{l}.weight"), value: Tensor::new(fi, fo, w)? });
                params.push(Param { name: format!("{name}.{l}.bias"), value: Tensor::zeros(1, fo) });
            }
        }
        let mut names: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("network names must be distinct".into()));
        }
        Ok(Self { params, init: Some(InitRecord { seed, scheme: INIT_SCHEME.into() }) })
    }

    pub fn from_params(params: Vec<Param>) -> Self {
        Self { params, init: None }
    }

    pub fn init_record(&self) -> Option<&InitRecord> {
        self.init.as_ref()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Index range of the tensors belonging to network `net`.
    pub fn range(&self, net: &str) -> Result<std::ops::Range<usize>> {
        let prefix = format!("{net}.");
        let idx: Vec<usize> =
            (0..self.params.len()).filter(|&i| self.params[i].name.starts_with(&prefix)).collect();
        match (idx.first(), idx.last()) {
            (Some(&a), Some(&b)) if b + 1 - a == idx.len() => Ok(a..b + 1),
            (Some(_), Some(_)) => Err(Error::InvalidConfig(format!("parameters of {net} are not contiguous"))),
            _ => Err(Error::InvalidConfig(format!("no parameters for network {net}"))),
        }
    }

    /// Values of network `net`, in layer order.
    pub fn values(&self, net: &str) -> Result<Vec<&Tensor>> {
        Ok(self.params[self.range(net)?].iter().map(|p| &p.value).collect())
    }

    /// Places every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Gradient of every parameter, aligned with [`ParamSet::params`].
    pub fn collect_grads(&self, grads: &Gradients, bound: &[Var]) -> Vec<Tensor> {
        bound.iter().map(|&v| grads.wrt(v)).collect()
    }

    /// Checks that this set has exactly the tensors `nets` would create.
    pub fn check_against(&self, nets: &[(&str, &NetworkSpec)]) -> Result<()> {
        let mut expected = Vec::new();
        for (name, spec) in nets {
            for l in 0..spec.layers() {
                expected.push((format!("{name}.{l}.weight"), (spec.widths[l], spec.widths[l + 1])));
                expected.push((format!("{name}.{l}.bias"), (1, spec.widths[l + 1])));
            }
        }
        let got: Vec<(String, (usize, usize))> =
            self.params.iter().map(|p| (p.name.clone(), p.value.shape())).collect();
        if got != expected {
            return Err(Error::ShapeMismatch("parameter names or shapes do not match the networks".into()));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.data.iter().all(|v| v.is_finite()))
    }
}

// ---------------------------------------------------------------- optimizers

fn check_grads(params: &ParamSet, grads: &[Tensor]) -> Result<()> {
    if grads.len() != params.len() || params.params.iter().zip(grads).any(|(p, g)| p.value.shape() != g.shape()) {
        return Err(Error::ShapeMismatch("gradients do not match the parameter set".into()));
    }
    Ok(())
}

/// `p ← p − lr · g`.
pub fn sgd_step(params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    for (p, g) in params.params.iter_mut().zip(grads) {
        for (v, d) in p.value.data.iter_mut().zip(&g.data) {
            *v -= lr * d;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let z: Vec<Tensor> = params.params.iter().map(|p| Tensor::zeros(p.value.rows, p.value.cols)).collect();
        Self { m: z.clone(), v: z, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// Bias-corrected Adam.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    check_grads(params, grads)?;
    if state.m.len() != params.len() || state.m.iter().zip(&params.params).any(|(m, p)| m.shape() != p.value.shape()) {
        return Err(Error::ShapeMismatch("optimizer state does not match the parameter set".into()));
    }
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (k, (p, g)) in params.params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k].data, &mut state.v[k].data);
        for i in 0..g.data.len() {
            let gi = g.data[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p.value.data[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- gradient check

/// Denominator floor in the relative error, so vanishing gradients are
/// compared on an absolute scale.
pub const FD_DENOM_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    pub checked: usize,
    /// `(parameter name, flat index)` of coordinates whose `±h` probe
    /// crossed a relu kink.
    pub excluded: Vec<(String, usize)>,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub tol: f64,
    pub passed: bool,
}

/// Compares tape gradients of `loss` with central differences
/// `(L(p + h) − L(p − h)) / 2h`, coordinate by coordinate. `loss` builds the
/// scalar from the bound parameter vars on a fresh tape; it is called once
/// for the analytic pass and twice per coordinate. A coordinate is excluded
/// when the relu sign pattern at `p ± h` differs from the one at `p`.
pub fn finite_difference_check<F>(params: &ParamSet, h: f64, tol: f64, loss: F) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be > 0, got {h}")));
    }
    let eval = |ps: &ParamSet| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::with_kink_tracking();
        let vars = ps.bind(&mut tape);
        let l = loss(&mut tape, &vars)?;
        Ok((tape.scalar_value(l)?, tape.kinks.clone()))
    };
    let mut tape = Tape::with_kink_tracking();
    let vars = params.bind(&mut tape);
    let l = loss(&mut tape, &vars)?;
    let grads = params.collect_grads(&tape.backward(l)?, &vars);
    let base_kinks = tape.kinks.clone();

    let mut report = FdReport {
        checked: 0,
        excluded: Vec::new(),
        max_rel_error: 0.0,
        worst: None,
        tol,
        passed: true,
    };
    let mut probe = params.clone();
    for (pi, p) in params.params.iter().enumerate() {
        for i in 0..p.value.len() {
            let orig = p.value.data[i];
            probe.params[pi].value.data[i] = orig + h;
            let (fp, kp) = eval(&probe)?;
            probe.params[pi].value.data[i] = orig - h;
            let (fm, km) = eval(&probe)?;
            probe.params[pi].value.data[i] = orig;
            if kp != base_kinks || km != base_kinks {
                report.excluded.push((p.name.clone(), i));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads[pi].data[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_DENOM_FLOOR);
            report.checked += 1;
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = Some((p.name.clone(), i));
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

// ---------------------------------------------------------------- checkpoints

pub const CHECKPOINT_FORMAT: &str = "recalign-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    #[serde(default)]
    init: Option<InitRecord>,
    params: Vec<CheckpointEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointEntry {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

impl ParamSet {
    /// Versioned JSON: `{"format", "version", "init", "params": [{"name",
    /// "shape", "values"}]}`.
    pub fn to_checkpoint_json(&self) -> String {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            init: self.init.clone(),
            params: self
                .params
                .iter()
                .map(|p| CheckpointEntry {
                    name: p.name.clone(),
                    shape: [p.value.rows, p.value.cols],
                    values: p.value.data.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("checkpoint line {}, column {}: {e}", e.line(), e.column())))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!("unknown checkpoint format {:?}", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {}", file.version)));
        }
        let mut seen = std::collections::HashSet::new();
        let mut params = Vec::with_capacity(file.params.len());
        for e in file.params {
            if !seen.insert(e.name.clone()) {
                return Err(Error::Parse(format!("duplicate parameter {:?}", e.name)));
            }
            let [r, c] = e.shape;
            if r.checked_mul(c) != Some(e.values.len()) {
                return Err(Error::Parse(format!(
                    "parameter {:?}: shape {r}x{c} but {} values",
                    e.name,
                    e.values.len()
                )));
            }
            if e.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse(format!("parameter {:?} has a non-finite value", e.name)));
            }
            params.push(Param { name: e.name, value: Tensor { rows: r, cols: c, data: e.values } });
        }
        Ok(Self { params, init: file.init })
    }
}
