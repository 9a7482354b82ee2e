//! Minimal reverse-mode differentiation over dense f64 matrices.
//!
//! A [`Tape`] records primitive applications eagerly (values are computed on
//! push) and replays them in reverse to accumulate vector-Jacobian products.
//! Tensors are indices into the tape; a tape is confined to one thread and
//! lives for one forward/backward cycle.

use std::sync::Arc;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Hadamard(usize, usize),
    HadamardConst(usize, Arc<Array2<f64>>),
    MatMul(usize, usize),
    Transpose(usize),
    SpMm(Arc<CsrMatrix>, usize),
    Relu(usize),
    Sigmoid(usize),
    RowSoftmax(usize),
    CrossEntropyMean(usize, Arc<Vec<usize>>),
    RowGather(usize, Arc<Vec<usize>>),
    ConcatRows(usize, usize),
    Reshape(usize),
    Sum(usize),
    FrobeniusNorm(usize),
    ColumnCosineDistanceSum(usize, usize),
    SteBinarize(usize),
    ThresholdSparsify(usize, f64),
    NormalizeAdjacency(usize),
    PairwiseConcat(usize),
    PadBlock(usize, usize, usize),
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    requires_grad: bool,
    active: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn scalar(v: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), v)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, requires_grad: bool, active: bool, op: Op) -> Tensor {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            active,
            op,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn active(&self, t: Tensor) -> bool {
        self.nodes[t.0].active
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Tensor {
        self.push(value, true, true, Op::Leaf)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Tensor {
        self.push(value, false, false, Op::Leaf)
    }

    pub fn value(&self, t: Tensor) -> &Array2<f64> {
        &self.nodes[t.0].value
    }

    pub fn scalar_value(&self, t: Tensor) -> f64 {
        self.nodes[t.0].value[[0, 0]]
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        self.nodes[t.0].value.dim()
    }

    /// Gradient accumulated by `backward`. Zero matrix for unreachable
    /// requires-grad leaves; `None` if backward has not run or the node does
    /// not require grad.
    pub fn grad(&self, t: Tensor) -> Option<&Array2<f64>> {
        self.nodes[t.0].grad.as_ref()
    }

    fn same_shape(&self, a: Tensor, b: Tensor, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeError(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "add")?;
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let act = self.active(a) || self.active(b);
        Ok(self.push(v, false, act, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "sub")?;
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let act = self.active(a) || self.active(b);
        Ok(self.push(v, false, act, Op::Sub(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        let v = &self.nodes[a.0].value * c;
        let act = self.active(a);
        self.push(v, false, act, Op::Scale(a.0, c))
    }

    pub fn hadamard(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "hadamard")?;
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let act = self.active(a) || self.active(b);
        Ok(self.push(v, false, act, Op::Hadamard(a.0, b.0)))
    }

    pub fn hadamard_const(&mut self, a: Tensor, m: Arc<Array2<f64>>) -> Result<Tensor> {
        if self.shape(a) != m.dim() {
            return Err(Error::ShapeError(format!(
                "hadamard_const: {:?} vs {:?}",
                self.shape(a),
                m.dim()
            )));
        }
        let v = &self.nodes[a.0].value * &*m;
        let act = self.active(a);
        Ok(self.push(v, false, act, Op::HadamardConst(a.0, m)))
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::ShapeError(format!(
                "matmul: ({ar},{ac}) x ({br},{bc})"
            )));
        }
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let act = self.active(a) || self.active(b);
        Ok(self.push(v, false, act, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: Tensor) -> Tensor {
        let v = self.nodes[a.0].value.t().to_owned();
        let act = self.active(a);
        self.push(v, false, act, Op::Transpose(a.0))
    }

    pub fn sparse_dense_matmul(&mut self, sp: Arc<CsrMatrix>, b: Tensor) -> Result<Tensor> {
        let (br, _) = self.shape(b);
        if sp.n_cols != br {
            return Err(Error::ShapeError(format!(
                "spmm: sparse ({},{}) x dense ({br},_)",
                sp.n_rows, sp.n_cols
            )));
        }
        let v = sp.matmul_dense(&self.nodes[b.0].value);
        let act = self.active(b);
        Ok(self.push(v, false, act, Op::SpMm(sp, b.0)))
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let act = self.active(a);
        self.push(v, false, act, Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        let v = self.nodes[a.0].value.mapv(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        let act = self.active(a);
        self.push(v, false, act, Op::Sigmoid(a.0))
    }

    pub fn row_softmax(&mut self, a: Tensor) -> Tensor {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|z| (z - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|z| z / sum);
        }
        let act = self.active(a);
        self.push(v, false, act, Op::RowSoftmax(a.0))
    }

    /// Mean over rows of `logsumexp(row) - row[label]`.
    pub fn cross_entropy_mean(&mut self, logits: Tensor, labels: Arc<Vec<usize>>) -> Result<Tensor> {
        let (n, c) = self.shape(logits);
        if labels.len() != n {
            return Err(Error::ShapeError(format!(
                "cross_entropy_mean: {n} rows vs {} labels",
                labels.len()
            )));
        }
        if n == 0 {
            return Err(Error::EmptyMask);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::ShapeError(format!(
                "cross_entropy_mean: label {bad} out of range [0,{c})"
            )));
        }
        let x = &self.nodes[logits.0].value;
        let mut total = 0.0;
        for (r, row) in x.rows().into_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[labels[r]];
        }
        let act = self.active(logits);
        Ok(self.push(
            scalar(total / n as f64),
            false,
            act,
            Op::CrossEntropyMean(logits.0, labels),
        ))
    }

    pub fn row_gather(&mut self, a: Tensor, rows: Arc<Vec<usize>>) -> Result<Tensor> {
        let (n, c) = self.shape(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::ShapeError(format!(
                "row_gather: row {bad} out of range [0,{n})"
            )));
        }
        let x = &self.nodes[a.0].value;
        let mut v = Array2::<f64>::zeros((rows.len(), c));
        for (i, &r) in rows.iter().enumerate() {
            v.row_mut(i).assign(&x.row(r));
        }
        let act = self.active(a);
        Ok(self.push(v, false, act, Op::RowGather(a.0, rows)))
    }

    pub fn concat_rows(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc {
            return Err(Error::ShapeError(format!(
                "concat_rows: widths {ac} vs {bc}"
            )));
        }
        let mut v = Array2::<f64>::zeros((ar + br, ac));
        v.slice_mut(ndarray::s![..ar, ..]).assign(&self.nodes[a.0].value);
        v.slice_mut(ndarray::s![ar.., ..]).assign(&self.nodes[b.0].value);
        let act = self.active(a) || self.active(b);
        Ok(self.push(v, false, act, Op::ConcatRows(a.0, b.0)))
    }

    pub fn reshape(&mut self, a: Tensor, rows: usize, cols: usize) -> Result<Tensor> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(Error::ShapeError(format!(
                "reshape: ({r},{c}) into ({rows},{cols})"
            )));
        }
        let flat: Vec<f64> = self.nodes[a.0].value.iter().cloned().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("checked");
        let act = self.active(a);
        Ok(self.push(v, false, act, Op::Reshape(a.0)))
    }

    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let v = scalar(self.nodes[a.0].value.sum());
        let act = self.active(a);
        self.push(v, false, act, Op::Sum(a.0))
    }

    pub fn frobenius_norm(&mut self, a: Tensor) -> Tensor {
        let v = scalar(self.nodes[a.0].value.iter().map(|x| x * x).sum::<f64>().sqrt());
        let act = self.active(a);
        self.push(v, false, act, Op::FrobeniusNorm(a.0))
    }

    /// Σ over columns of (1 − cosine similarity). Columns where either side
    /// has zero norm contribute 0.
    pub fn column_cosine_distance_sum(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "column_cosine_distance_sum")?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut total = 0.0;
        for j in 0..x.ncols() {
            let (xa, ya) = (x.column(j), y.column(j));
            let na = xa.dot(&xa).sqrt();
            let nb = ya.dot(&ya).sqrt();
            if na > 0.0 && nb > 0.0 {
                total += 1.0 - xa.dot(&ya) / (na * nb);
            }
        }
        let act = self.active(a) || self.active(b);
        Ok(self.push(
            scalar(total),
            false,
            act,
            Op::ColumnCosineDistanceSum(a.0, b.0),
        ))
    }

    /// Forward: 1 where input > 0.5, else 0. Backward: identity
    /// (straight-through on the continuous input).
    pub fn ste_binarize(&mut self, a: Tensor) -> Tensor {
        let v = self.nodes[a.0].value.mapv(|x| if x > 0.5 { 1.0 } else { 0.0 });
        let act = self.active(a);
        self.push(v, false, act, Op::SteBinarize(a.0))
    }

    /// Forward: rows scaled down to at most `cap` Euclidean norm. Backward:
    /// identity (same straight-through convention as the binarizer).
    pub fn ste_row_norm_clip(&mut self, a: Tensor, cap: f64) -> Tensor {
        let mut v = self.nodes[a.0].value.clone();
        for mut row in v.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > cap {
                let s = cap / norm;
                row.mapv_inplace(|x| x * s);
            }
        }
        let act = self.active(a);
        self.push(v, false, act, Op::SteBinarize(a.0))
    }

    /// Forward: x where x > delta, else 0. Backward masks the same way.
    pub fn threshold_sparsify(&mut self, a: Tensor, delta: f64) -> Tensor {
        let v = self.nodes[a.0].value.mapv(|x| if x > delta { x } else { 0.0 });
        let act = self.active(a);
        self.push(v, false, act, Op::ThresholdSparsify(a.0, delta))
    }

    /// D̂^{-1/2}(A+I)D̂^{-1/2} on a dense square adjacency, differentiable
    /// through the degrees.
    pub fn normalize_adjacency_dense(&mut self, a: Tensor) -> Result<Tensor> {
        let (r, c) = self.shape(a);
        if r != c {
            return Err(Error::ShapeError(format!("normalize_adjacency: ({r},{c})")));
        }
        let x = &self.nodes[a.0].value;
        let mut u = vec![0.0f64; r];
        for i in 0..r {
            let d = 1.0 + x.row(i).sum();
            u[i] = 1.0 / d.sqrt();
        }
        let mut v = Array2::<f64>::zeros((r, r));
        for i in 0..r {
            for j in 0..r {
                let m = x[[i, j]] + if i == j { 1.0 } else { 0.0 };
                v[[i, j]] = m * u[i] * u[j];
            }
        }
        let act = self.active(a);
        Ok(self.push(v, false, act, Op::NormalizeAdjacency(a.0)))
    }

    /// [n×d] → [n²×2d] with row i·n+j = [x_i | x_j].
    pub fn pairwise_concat(&mut self, a: Tensor) -> Tensor {
        let (n, d) = self.shape(a);
        let x = &self.nodes[a.0].value;
        let mut v = Array2::<f64>::zeros((n * n, 2 * d));
        for i in 0..n {
            for j in 0..n {
                let mut row = v.row_mut(i * n + j);
                for k in 0..d {
                    row[k] = x[[i, k]];
                    row[d + k] = x[[j, k]];
                }
            }
        }
        let act = self.active(a);
        self.push(v, false, act, Op::PairwiseConcat(a.0))
    }

    /// Embed `a` into a zero matrix of shape (rows, cols) at (row_off, col_off).
    pub fn pad_block(
        &mut self,
        a: Tensor,
        rows: usize,
        cols: usize,
        row_off: usize,
        col_off: usize,
    ) -> Result<Tensor> {
        let (r, c) = self.shape(a);
        if row_off + r > rows || col_off + c > cols {
            return Err(Error::ShapeError(format!(
                "pad_block: ({r},{c}) at ({row_off},{col_off}) into ({rows},{cols})"
            )));
        }
        let mut v = Array2::<f64>::zeros((rows, cols));
        v.slice_mut(ndarray::s![row_off..row_off + r, col_off..col_off + c])
            .assign(&self.nodes[a.0].value);
        let act = self.active(a);
        Ok(self.push(v, false, act, Op::PadBlock(a.0, row_off, col_off)))
    }

    fn accumulate(&mut self, idx: usize, delta: &Array2<f64>) {
        if !self.nodes[idx].active {
            return;
        }
        match self.nodes[idx].grad.as_mut() {
            Some(g) => *g += delta,
            None => self.nodes[idx].grad = Some(delta.clone()),
        }
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// requires-grad leaf (zeros if unreachable).
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.backward_done {
            return Err(Error::InvalidParams(
                "backward already ran on this tape".into(),
            ));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::NotScalar);
        }
        self.backward_done = true;
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = Some(Array2::zeros(node.value.dim()));
            }
        }
        if !self.nodes[loss.0].active {
            return Ok(()); // loss does not depend on any leaf
        }
        self.accumulate(loss.0, &scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].active {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.clone() else {
                continue;
            };
            // Take op apart without holding a borrow on self.
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &g);
                    let neg = g.mapv(|x| -x);
                    self.accumulate(b, &neg);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    self.accumulate(a, &(&g * c));
                }
                Op::Hadamard(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = &g * &self.nodes[b].value;
                    let db = &g * &self.nodes[a].value;
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::HadamardConst(a, m) => {
                    let a = *a;
                    let da = &g * &**m;
                    self.accumulate(a, &da);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = g.dot(&self.nodes[b].value.t());
                    let db = self.nodes[a].value.t().dot(&g);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let da = g.t().to_owned();
                    self.accumulate(a, &da);
                }
                Op::SpMm(sp, b) => {
                    let b = *b;
                    let db = sp.matmul_dense_transposed(&g);
                    self.accumulate(b, &db);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let mask = self.nodes[a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    self.accumulate(a, &(&g * &mask));
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let y = &self.nodes[idx].value;
                    let da = &g * &(y * &y.mapv(|v| 1.0 - v));
                    self.accumulate(a, &da);
                }
                Op::RowSoftmax(a) => {
                    let a = *a;
                    let y = self.nodes[idx].value.clone();
                    let mut da = Array2::<f64>::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot = yr.dot(&gr);
                        for c in 0..y.ncols() {
                            da[[r, c]] = yr[c] * (gr[c] - dot);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::CrossEntropyMean(a, labels) => {
                    let a = *a;
                    let labels = labels.clone();
                    let x = &self.nodes[a].value;
                    let n = x.nrows() as f64;
                    let gscale = g[[0, 0]] / n;
                    let mut da = Array2::<f64>::zeros(x.dim());
                    for (r, row) in x.rows().into_iter().enumerate() {
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for c in 0..row.len() {
                            let p = exps[c] / sum;
                            let y = if labels[r] == c { 1.0 } else { 0.0 };
                            da[[r, c]] = gscale * (p - y);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::RowGather(a, rows) => {
                    let a = *a;
                    let rows = rows.clone();
                    let mut da = Array2::<f64>::zeros(self.nodes[a].value.dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let gi = g.row(i).to_owned();
                        let mut dst = da.row_mut(r);
                        dst += &gi;
                    }
                    self.accumulate(a, &da);
                }
                Op::ConcatRows(a, b) => {
                    let (a, b) = (*a, *b);
                    let ar = self.nodes[a].value.nrows();
                    let da = g.slice(ndarray::s![..ar, ..]).to_owned();
                    let db = g.slice(ndarray::s![ar.., ..]).to_owned();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Reshape(a) => {
                    let a = *a;
                    let dim = self.nodes[a].value.dim();
                    let flat: Vec<f64> = g.iter().cloned().collect();
                    let da = Array2::from_shape_vec(dim, flat).expect("reshape grad");
                    self.accumulate(a, &da);
                }
                Op::Sum(a) => {
                    let a = *a;
                    let da = Array2::from_elem(self.nodes[a].value.dim(), g[[0, 0]]);
                    self.accumulate(a, &da);
                }
                Op::FrobeniusNorm(a) => {
                    let a = *a;
                    let norm = self.nodes[idx].value[[0, 0]];
                    if norm > 0.0 {
                        let da = self.nodes[a].value.mapv(|x| x * g[[0, 0]] / norm);
                        self.accumulate(a, &da);
                    }
                }
                Op::ColumnCosineDistanceSum(a, b) => {
                    let (a, b) = (*a, *b);
                    let gs = g[[0, 0]];
                    let x = self.nodes[a].value.clone();
                    let y = self.nodes[b].value.clone();
                    let mut da = Array2::<f64>::zeros(x.dim());
                    let mut db = Array2::<f64>::zeros(y.dim());
                    for j in 0..x.ncols() {
                        let (xc, yc) = (x.column(j), y.column(j));
                        let na = xc.dot(&xc).sqrt();
                        let nb = yc.dot(&yc).sqrt();
                        if na > 0.0 && nb > 0.0 {
                            let dot = xc.dot(&yc);
                            let cos = dot / (na * nb);
                            for i in 0..x.nrows() {
                                da[[i, j]] = -gs * (yc[i] / (na * nb) - cos * xc[i] / (na * na));
                                db[[i, j]] = -gs * (xc[i] / (na * nb) - cos * yc[i] / (nb * nb));
                            }
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::SteBinarize(a) => {
                    let a = *a;
                    self.accumulate(a, &g);
                }
                Op::ThresholdSparsify(a, delta) => {
                    let (a, delta) = (*a, *delta);
                    let mask = self.nodes[a]
                        .value
                        .mapv(|x| if x > delta { 1.0 } else { 0.0 });
                    self.accumulate(a, &(&g * &mask));
                }
                Op::NormalizeAdjacency(a) => {
                    let a = *a;
                    let x = &self.nodes[a].value;
                    let y = &self.nodes[idx].value;
                    let n = x.nrows();
                    let mut d = vec![0.0f64; n];
                    for i in 0..n {
                        d[i] = 1.0 + x.row(i).sum();
                    }
                    // s_p = Σ_j G_pj y_pj, t_p = Σ_i G_ip y_ip
                    let gy = &g * y;
                    let s = gy.sum_axis(Axis(1));
                    let t = gy.sum_axis(Axis(0));
                    let mut da = Array2::<f64>::zeros((n, n));
                    for p in 0..n {
                        let row_term = (s[p] + t[p]) / (2.0 * d[p]);
                        for q in 0..n {
                            da[[p, q]] = g[[p, q]] / (d[p] * d[q]).sqrt() - row_term;
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::PairwiseConcat(a) => {
                    let a = *a;
                    let (n, dd) = self.nodes[a].value.dim();
                    let mut da = Array2::<f64>::zeros((n, dd));
                    for i in 0..n {
                        for j in 0..n {
                            let row = g.row(i * n + j);
                            for k in 0..dd {
                                da[[i, k]] += row[k];
                                da[[j, k]] += row[dd + k];
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::PadBlock(a, ro, co) => {
                    let (a, ro, co) = (*a, *ro, *co);
                    let (r, c) = self.nodes[a].value.dim();
                    let da = g.slice(ndarray::s![ro..ro + r, co..co + c]).to_owned();
                    self.accumulate(a, &da);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn frobenius_squared_half_grad_is_input() {
        let w = arr2(&[[1.0, -2.0], [0.5, 3.0]]);
        let mut tape = Tape::new();
        let t = tape.leaf(w.clone());
        let n = tape.frobenius_norm(t);
        let sq = tape.hadamard(n, n).unwrap();
        let loss = tape.scale(sq, 0.5);
        tape.backward(loss).unwrap();
        let g = tape.grad(t).unwrap();
        assert!((g - &w).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let used = tape.leaf(arr2(&[[2.0]]));
        let unused = tape.leaf(arr2(&[[5.0, 5.0]]));
        let loss = tape.scale(used, 3.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &arr2(&[[0.0, 0.0]]));
        assert_eq!(tape.grad(used).unwrap(), &arr2(&[[3.0]]));
    }

    #[test]
    fn relu_blocks_gradient_at_negative_entries() {
        let mut tape = Tape::new();
        let x = tape.leaf(arr2(&[[-1.0, 2.0], [0.0, -3.0]]));
        let r = tape.relu(x);
        let loss = tape.sum(r);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g, &arr2(&[[0.0, 1.0], [0.0, 0.0]]));
    }

    #[test]
    fn cosine_distance_of_identical_matrices_is_zero() {
        let a = arr2(&[[1.0, 2.0], [3.0, -1.0], [0.5, 4.0]]);
        let mut tape = Tape::new();
        let x = tape.constant(a.clone());
        let y = tape.constant(a);
        let d = tape.column_cosine_distance_sum(x, y).unwrap();
        assert!(tape.scalar_value(d).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_columns_contribute_nothing() {
        let mut tape = Tape::new();
        let x = tape.constant(arr2(&[[0.0, 1.0], [0.0, 2.0]]));
        let y = tape.constant(arr2(&[[3.0, -1.0], [4.0, -2.0]]));
        let d = tape.column_cosine_distance_sum(x, y).unwrap();
        // first column of x has zero norm; second columns are antiparallel
        assert!((tape.scalar_value(d) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(arr2(&[[1.0]]));
        let loss = tape.scale(x, 2.0);
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(arr2(&[[1.0, 2.0]]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar)));
    }

    #[test]
    fn linearity_of_backward() {
        // grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2), computed on one tape
        let w = arr2(&[[0.3, -1.2], [2.0, 0.7]]);
        let (alpha, beta) = (2.5, -0.75);

        let grad_of = |which: u8| -> Array2<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(w.clone());
            let l1 = tape.frobenius_norm(x);
            let s = tape.sigmoid(x);
            let l2 = tape.sum(s);
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => {
                    let a = tape.scale(l1, alpha);
                    let b = tape.scale(l2, beta);
                    tape.add(a, b).unwrap()
                }
            };
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().clone()
        };

        let combo = grad_of(2);
        let expect = grad_of(0) * alpha + grad_of(1) * beta;
        assert!((&combo - &expect).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn cross_entropy_shift_invariant() {
        let x = arr2(&[[1.0, 2.0, 0.5], [-1.0, 0.0, 3.0]]);
        let labels = Arc::new(vec![1usize, 2]);
        let mut t1 = Tape::new();
        let a = t1.constant(x.clone());
        let l1 = t1.cross_entropy_mean(a, labels.clone()).unwrap();
        let mut t2 = Tape::new();
        let b = t2.constant(x.mapv(|v| v + 17.5));
        let l2 = t2.cross_entropy_mean(b, labels).unwrap();
        assert!((t1.scalar_value(l1) - t2.scalar_value(l2)).abs() < 1e-12);
    }

    #[test]
    fn ste_binarize_forward_and_identity_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(arr2(&[[0.2, 0.8], [0.5, 0.9]]));
        let b = tape.ste_binarize(x);
        assert_eq!(tape.value(b), &arr2(&[[0.0, 1.0], [0.0, 1.0]]));
        let loss = tape.sum(b);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &arr2(&[[1.0, 1.0], [1.0, 1.0]]));
    }
}
