//! Dense row-major matrices and a reverse-mode autodiff tape.
//!
//! Everything in the network is two-dimensional: a sentence is an `n x d`
//! matrix, a bias is `1 x d`, a loss is `1 x 1`. The [`Graph`] records each
//! operation as it is evaluated and [`Graph::backward`] walks the record in
//! reverse. Parameters live in a [`ParamStore`] that the graph borrows, so a
//! forward pass never mutates weights.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length does not match shape");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from equally long rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Matrix::new(1, values.len(), values.to_vec())
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Matrix { rows, cols, data }
    }

    /// Glorot-uniform initialization.
    pub fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Matrix::uniform(rows, cols, bound, rng)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions differ");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_transposed(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_transposed inner dimensions differ");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                let b = other.row(j);
                out.data[i * other.rows + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// `self^T * other` without materializing the transpose.
    pub fn transposed_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "transposed_matmul inner dimensions differ");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix::new(rows.len(), self.cols, data)
    }

    /// Row-wise softmax. Columns with `mask[c] == false` get probability 0.
    pub fn softmax_rows(&self, mask: Option<&[bool]>) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            let allowed = |c: usize| mask.map_or(true, |m| m[c]);
            let max = (0..self.cols)
                .filter(|&c| allowed(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            let out_row = out.row_mut(r);
            for c in 0..row.len() {
                if allowed(c) {
                    let e = (row[c] - max).exp();
                    out_row[c] = e;
                    total += e;
                }
            }
            for v in out_row.iter_mut() {
                *v /= total;
            }
        }
        out
    }

    /// Index of the largest entry per row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for c in 1..row.len() {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulTransposed(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Matrix,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MaxPool {
        src: Var,
        fallback: Option<Var>,
        winners: Vec<Option<Vec<usize>>>,
    },
    Dropout(Var, Vec<f64>),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    SigmoidBce {
        logits: Var,
        targets: Matrix,
        probs: Matrix,
    },
    Sum(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to an arbitrary node; `None` if the root does not depend on it.
    pub fn wrt(&self, var: Var) -> Option<&Matrix> {
        self.nodes[var.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(&id).and_then(|v| self.nodes[v.0].as_ref())
    }

    /// Consumes the gradients into a per-parameter list aligned with the store.
    pub fn into_param_grads(mut self, store: &ParamStore) -> Vec<Option<Matrix>> {
        store
            .ids()
            .map(|id| self.params.get(&id).and_then(|v| self.nodes[v.0].take()))
            .collect()
    }
}

/// Recording of one forward computation.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input. Gradients still flow to it, which lets callers
    /// inspect sensitivities of intermediate quantities.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// The node holding parameter `id`. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_transposed(self.value(b));
        self.push(value, Op::MatMulTransposed(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let bias = self.value(row);
        assert_eq!(bias.rows(), 1, "add_row expects a single row");
        assert_eq!(bias.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut value = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    /// `x W + b` for a `1 x out` bias row.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let xw = self.matmul(x, weight);
        self.add_row(xw, bias)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// Row-wise softmax; masked columns receive exactly zero probability.
    pub fn softmax_rows(&mut self, a: Var, column_mask: Option<&[bool]>) -> Var {
        let value = self.value(a).softmax_rows(column_mask);
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Per-row layer normalization with learned gain and bias (`1 x c` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let input = self.value(x);
        let (rows, cols) = input.shape();
        let mut normed = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = input.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (o, v) in normed.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut value = normed.clone();
        for r in 0..rows {
            for ((o, gi), bi) in value.row_mut(r).iter_mut().zip(&g).zip(&b) {
                *o = *o * gi + bi;
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let m = self.value(p);
                assert_eq!(m.rows(), rows, "concat_cols row mismatch");
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
                offset += m.cols();
            }
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        self.push(Matrix::new(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Columns `[start, start + width)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let src = self.value(a);
        assert!(start + width <= src.cols(), "slice_cols out of range");
        let mut value = Matrix::zeros(src.rows(), width);
        for r in 0..src.rows() {
            value
                .row_mut(r)
                .copy_from_slice(&src.row(r)[start..start + width]);
        }
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select_rows(rows);
        self.push(value, Op::GatherRows(a, rows.to_vec()))
    }

    /// Element-wise maximum over each group of rows of `src`. An empty group
    /// yields the `1 x c` `fallback` row; without a fallback it panics.
    pub fn max_pool_rows(&mut self, src: Var, groups: &[Vec<usize>], fallback: Option<Var>) -> Var {
        let m = self.value(src);
        let cols = m.cols();
        let mut value = Matrix::zeros(groups.len(), cols);
        let mut winners = Vec::with_capacity(groups.len());
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                let fb = fallback.expect("empty pooling group without fallback");
                value.row_mut(g).copy_from_slice(self.nodes[fb.0].value.data());
                winners.push(None);
                continue;
            }
            let mut best = vec![rows[0]; cols];
            for &r in &rows[1..] {
                for c in 0..cols {
                    if m.get(r, c) > m.get(best[c], c) {
                        best[c] = r;
                    }
                }
            }
            for (c, &r) in best.iter().enumerate() {
                value.set(g, c, m.get(r, c));
            }
            winners.push(Some(best));
        }
        self.push(
            value,
            Op::MaxPool {
                src,
                fallback,
                winners,
            },
        )
    }

    /// Inverted dropout. A rate of 0 returns `a` unchanged.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut value = self.value(a).clone();
        for (x, m) in value.data_mut().iter_mut().zip(&mask) {
            *x *= m;
        }
        self.push(value, Op::Dropout(a, mask))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of `logits` (`1 x 1`).
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len(), "one target per row");
        let probs = l.softmax_rows(None);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = l.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        self.push(
            Matrix::new(1, 1, vec![total]),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Summed binary cross-entropy of sigmoid(`logits`) against 0/1 `targets` (`1 x 1`).
    pub fn sigmoid_bce(&mut self, logits: Var, targets: Matrix) -> Var {
        let l = self.value(logits);
        assert_eq!(l.shape(), targets.shape(), "bce target shape");
        let probs = l.map(sigmoid);
        // log(1 + e^x) - y x, stable for any sign of x
        let total: f64 = l
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        self.push(
            Matrix::new(1, 1, vec![total]),
            Op::SigmoidBce {
                logits,
                targets,
                probs,
            },
        )
    }

    /// Sum of all entries (`1 x 1`).
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Matrix::new(1, 1, vec![total]), Op::Sum(a))
    }

    /// Reverse-mode sweep from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    accumulate(&mut grads, *a, upstream.matmul_transposed(bv));
                    accumulate(&mut grads, *b, av.transposed_matmul(&upstream));
                }
                Op::MatMulTransposed(a, b) => {
                    // y = a b^T: da = dy b, db = dy^T a
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    accumulate(&mut grads, *a, upstream.matmul(bv));
                    accumulate(&mut grads, *b, upstream.transposed_matmul(av));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, upstream.clone());
                    accumulate(&mut grads, *b, upstream.clone());
                }
                Op::AddRow(a, row) => {
                    let mut db = Matrix::zeros(1, upstream.cols());
                    for r in 0..upstream.rows() {
                        for (d, u) in db.data_mut().iter_mut().zip(upstream.row(r)) {
                            *d += u;
                        }
                    }
                    accumulate(&mut grads, *row, db);
                    accumulate(&mut grads, *a, upstream.clone());
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, upstream.map(|x| x * s));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut g = upstream.clone();
                    for (gi, xi) in g.data_mut().iter_mut().zip(x.data()) {
                        if *xi <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut g = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let ur = upstream.row(r);
                        let dot: f64 = yr.iter().zip(ur).map(|(a, b)| a * b).sum();
                        for (c, out) in g.row_mut(r).iter_mut().enumerate() {
                            *out = yr[c] * (ur[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    let g = self.value(*gain).data();
                    let (rows, cols) = normed.shape();
                    let mut dgain = Matrix::zeros(1, cols);
                    let mut dbias = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let u = upstream.row(r);
                        let xh = normed.row(r);
                        for c in 0..cols {
                            dgain.data_mut()[c] += u[c] * xh[c];
                            dbias.data_mut()[c] += u[c];
                        }
                        let dxh: Vec<f64> = (0..cols).map(|c| u[c] * g[c]).collect();
                        let mean_dxh = dxh.iter().sum::<f64>() / cols as f64;
                        let mean_dxh_xh =
                            dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
                            *out = inv_std[r] * (dxh[c] - mean_dxh - xh[c] * mean_dxh_xh);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dgain);
                    accumulate(&mut grads, *bias, dbias);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut g = Matrix::zeros(upstream.rows(), w);
                        for r in 0..upstream.rows() {
                            g.row_mut(r)
                                .copy_from_slice(&upstream.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, p, g);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let data = upstream.data()[offset * cols..(offset + rows) * cols].to_vec();
                        offset += rows;
                        accumulate(&mut grads, p, Matrix::new(rows, cols, data));
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut g = Matrix::zeros(rows, cols);
                    let w = upstream.cols();
                    for r in 0..rows {
                        g.row_mut(r)[*start..*start + w].copy_from_slice(upstream.row(r));
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::GatherRows(a, rows) => {
                    let (n, cols) = self.shape(*a);
                    let mut g = Matrix::zeros(n, cols);
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, u) in g.row_mut(r).iter_mut().zip(upstream.row(i)) {
                            *d += u;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::MaxPool {
                    src,
                    fallback,
                    winners,
                } => {
                    let (n, cols) = self.shape(*src);
                    let mut g = Matrix::zeros(n, cols);
                    let mut gf = Matrix::zeros(1, cols);
                    let mut used_fallback = false;
                    for (i, w) in winners.iter().enumerate() {
                        match w {
                            Some(best) => {
                                for (c, &r) in best.iter().enumerate() {
                                    let cur = g.get(r, c);
                                    g.set(r, c, cur + upstream.get(i, c));
                                }
                            }
                            None => {
                                used_fallback = true;
                                for (d, u) in gf.data_mut().iter_mut().zip(upstream.row(i)) {
                                    *d += u;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *src, g);
                    if let (Some(fb), true) = (fallback, used_fallback) {
                        accumulate(&mut grads, *fb, gf);
                    }
                }
                Op::Dropout(a, mask) => {
                    let mut g = upstream.clone();
                    for (gi, m) in g.data_mut().iter_mut().zip(mask) {
                        *gi *= m;
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let s = upstream.get(0, 0);
                    let mut g = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let v = g.get(r, t);
                        g.set(r, t, v - 1.0);
                    }
                    g.scale_assign(s);
                    accumulate(&mut grads, *logits, g);
                }
                Op::SigmoidBce {
                    logits,
                    targets,
                    probs,
                } => {
                    let s = upstream.get(0, 0);
                    let mut g = probs.clone();
                    for (gi, y) in g.data_mut().iter_mut().zip(targets.data()) {
                        *gi = (*gi - y) * s;
                    }
                    accumulate(&mut grads, *logits, g);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.shape(*a);
                    accumulate(&mut grads, *a, Matrix::filled(rows, cols, upstream.get(0, 0)));
                }
            }
            grads[idx] = Some(upstream);
        }

        Gradients {
            nodes: grads,
            params: self.params.clone(),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
