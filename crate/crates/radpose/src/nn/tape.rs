//! Reverse-mode autodiff tape over rank-2 arrays.
//!
//! All tensors are `Array2<f64>`; batches of same-shaped matrices are
//! stacked along rows and manipulated with block ops (`block_matmul_nn`,
//! `max_pool_blocks`, `gather_rows_blocks`, …), so the heavy math funnels
//! through a handful of dense matrix products. Nodes are appended in
//! evaluation order, which makes the node list a topological order; the
//! backward pass is a single reverse sweep that only visits nodes from
//! which a gradient-requiring leaf is reachable.
//!
//! Shape agreement between operands is a programming invariant, enforced
//! with panics here; fallible shape validation lives in the layer wrappers
//! that sit on top of the tape.

use ndarray::{concatenate, s, Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    MulElem(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    /// x (N,C) + row (1,C) broadcast down the rows.
    AddRowBroadcast(TensorId, TensorId),
    /// x (N,C) ⊙ scale (N,1) broadcast across the columns.
    MulRowBroadcast(TensorId, TensorId),
    MatMul(TensorId, TensorId),
    /// Per-block product Y_i = A_i · B_i with A (B·ra, k), B (B·k, c).
    BlockMatMulNn { a: TensorId, b: TensorId, a_rows: usize, b_rows: usize },
    /// Per-block product Y_i = A_i · B_iᵀ with A (B·ra, k), B (B·rb, k).
    BlockMatMulNt { a: TensorId, b: TensorId, a_rows: usize, b_rows: usize },
    /// Y_i = M · X_i for a fixed matrix M (n,n) and blocks X_i (n, c).
    LeftMulBlocks { matrix: Array2<f64>, x: TensorId },
    Relu(TensorId),
    Softplus(TensorId),
    Abs(TensorId),
    LayerNormRows { x: TensorId, gain: TensorId, bias: TensorId, eps: f64 },
    SoftmaxRows(TensorId),
    /// (B·block, C) → (B, C) column-wise max per block; grads route to the
    /// first attaining row.
    MaxPoolBlocks { x: TensorId, block: usize },
    MeanPoolBlocks { x: TensorId, block: usize },
    /// Per block, output row i is input row `map[i]`; duplicates allowed.
    GatherRowsBlocks { x: TensorId, block: usize, map: Vec<usize> },
    SliceCols { x: TensorId, start: usize, len: usize },
    ConcatCols(Vec<TensorId>),
    ConcatRows(Vec<TensorId>),
    /// (B·block, C) → (B, block·C), row-major within each block.
    FlattenBlocks { x: TensorId, block: usize },
    /// Each input row is repeated `times` times consecutively.
    RepeatRowsInterleave { x: TensorId, times: usize },
    /// Valid depthwise conv along rows inside each block of `block` rows:
    /// y[t, c] = Σ_k x[t+k, c]·w[k, c] + bias[0, c].
    Conv1dDepthwise { x: TensorId, kernel: TensorId, bias: TensorId, block: usize },
    SumAll(TensorId),
    MeanAll(TensorId),
}

struct Node {
    op: Op,
    value: Array2<f64>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`], indexed by tensor id.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<Array2<f64>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn block_count(rows: usize, block: usize) -> usize {
    assert!(block > 0 && rows % block == 0, "rows {rows} not divisible into blocks of {block}");
    rows / block
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

    pub fn value(&self, id: TensorId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Array2<f64>, requires_grad: bool) -> TensorId {
        self.nodes.push(Node { op, value, requires_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Non-differentiated input (data, masks, fixed embeddings).
    pub fn constant(&mut self, value: Array2<f64>) -> TensorId {
        self.push(Op::Leaf, value, false)
    }

    /// Differentiated input (parameters).
    pub fn leaf(&mut self, value: Array2<f64>) -> TensorId {
        self.push(Op::Leaf, value, true)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).raw_dim(), self.value(b).raw_dim(), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.any_grad(&[a, b]);
        self.push(Op::Add(a, b), value, rg)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).raw_dim(), self.value(b).raw_dim(), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        let rg = self.any_grad(&[a, b]);
        self.push(Op::Sub(a, b), value, rg)
    }

    pub fn mul_elem(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).raw_dim(), self.value(b).raw_dim(), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.any_grad(&[a, b]);
        self.push(Op::MulElem(a, b), value, rg)
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let value = self.value(x) * factor;
        let rg = self.any_grad(&[x]);
        self.push(Op::Scale(x, factor), value, rg)
    }

    pub fn add_scalar(&mut self, x: TensorId, term: f64) -> TensorId {
        let value = self.value(x) + term;
        let rg = self.any_grad(&[x]);
        self.push(Op::AddScalar(x), value, rg)
    }

    pub fn add_row_broadcast(&mut self, x: TensorId, row: TensorId) -> TensorId {
        assert_eq!(self.value(row).nrows(), 1, "broadcast row must have one row");
        assert_eq!(self.value(x).ncols(), self.value(row).ncols(), "broadcast width mismatch");
        let value = self.value(x) + &self.value(row).row(0);
        let rg = self.any_grad(&[x, row]);
        self.push(Op::AddRowBroadcast(x, row), value, rg)
    }

    pub fn mul_row_broadcast(&mut self, x: TensorId, scale: TensorId) -> TensorId {
        assert_eq!(self.value(scale).ncols(), 1, "row scale must have one column");
        assert_eq!(self.value(x).nrows(), self.value(scale).nrows(), "row scale length mismatch");
        let value = self.value(x) * &self.value(scale).column(0).insert_axis(Axis(1));
        let rg = self.any_grad(&[x, scale]);
        self.push(Op::MulRowBroadcast(x, scale), value, rg)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).ncols(), self.value(b).nrows(), "matmul inner dim mismatch");
        let value = self.value(a).dot(self.value(b));
        let rg = self.any_grad(&[a, b]);
        self.push(Op::MatMul(a, b), value, rg)
    }

    pub fn block_matmul_nn(
        &mut self,
        a: TensorId,
        b: TensorId,
        a_rows: usize,
        b_rows: usize,
    ) -> TensorId {
        let (a_total, k) = (self.value(a).nrows(), self.value(a).ncols());
        let (b_total, c) = (self.value(b).nrows(), self.value(b).ncols());
        let blocks = block_count(a_total, a_rows);
        assert_eq!(blocks, block_count(b_total, b_rows), "block count mismatch");
        assert_eq!(k, b_rows, "block inner dim mismatch");
        let mut value = Array2::<f64>::zeros((blocks * a_rows, c));
        for i in 0..blocks {
            let ai = self.value(a).slice(s![i * a_rows..(i + 1) * a_rows, ..]);
            let bi = self.value(b).slice(s![i * b_rows..(i + 1) * b_rows, ..]);
            value.slice_mut(s![i * a_rows..(i + 1) * a_rows, ..]).assign(&ai.dot(&bi));
        }
        let rg = self.any_grad(&[a, b]);
        self.push(Op::BlockMatMulNn { a, b, a_rows, b_rows }, value, rg)
    }

    pub fn block_matmul_nt(
        &mut self,
        a: TensorId,
        b: TensorId,
        a_rows: usize,
        b_rows: usize,
    ) -> TensorId {
        let (a_total, ka) = (self.value(a).nrows(), self.value(a).ncols());
        let (b_total, kb) = (self.value(b).nrows(), self.value(b).ncols());
        let blocks = block_count(a_total, a_rows);
        assert_eq!(blocks, block_count(b_total, b_rows), "block count mismatch");
        assert_eq!(ka, kb, "block inner dim mismatch");
        let mut value = Array2::<f64>::zeros((blocks * a_rows, b_rows));
        for i in 0..blocks {
            let ai = self.value(a).slice(s![i * a_rows..(i + 1) * a_rows, ..]);
            let bi = self.value(b).slice(s![i * b_rows..(i + 1) * b_rows, ..]);
            value.slice_mut(s![i * a_rows..(i + 1) * a_rows, ..]).assign(&ai.dot(&bi.t()));
        }
        let rg = self.any_grad(&[a, b]);
        self.push(Op::BlockMatMulNt { a, b, a_rows, b_rows }, value, rg)
    }

    pub fn left_mul_blocks(&mut self, matrix: Array2<f64>, x: TensorId) -> TensorId {
        assert_eq!(matrix.nrows(), matrix.ncols(), "left-mul matrix must be square");
        let n = matrix.nrows();
        let blocks = block_count(self.value(x).nrows(), n);
        let c = self.value(x).ncols();
        let mut value = Array2::<f64>::zeros((blocks * n, c));
        for i in 0..blocks {
            let xi = self.value(x).slice(s![i * n..(i + 1) * n, ..]);
            value.slice_mut(s![i * n..(i + 1) * n, ..]).assign(&matrix.dot(&xi));
        }
        let rg = self.any_grad(&[x]);
        self.push(Op::LeftMulBlocks { matrix, x }, value, rg)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(Op::Relu(x), value, rg)
    }

    pub fn softplus(&mut self, x: TensorId) -> TensorId {
        let value = self.value(x).mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        let rg = self.any_grad(&[x]);
        self.push(Op::Softplus(x), value, rg)
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        let value = self.value(x).mapv(f64::abs);
        let rg = self.any_grad(&[x]);
        self.push(Op::Abs(x), value, rg)
    }

    pub fn layer_norm_rows(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> TensorId {
        let c = self.value(x).ncols();
        assert_eq!(self.value(gain).raw_dim(), ndarray::Dim([1, c]), "layernorm gain shape");
        assert_eq!(self.value(bias).raw_dim(), ndarray::Dim([1, c]), "layernorm bias shape");
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let mean = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        let value = value * self.value(gain).row(0).insert_axis(Axis(0))
            + self.value(bias).row(0).insert_axis(Axis(0));
        let rg = self.any_grad(&[x, gain, bias]);
        self.push(Op::LayerNormRows { x, gain, bias, eps }, value, rg)
    }

    pub fn softmax_rows(&mut self, x: TensorId) -> TensorId {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let rg = self.any_grad(&[x]);
        self.push(Op::SoftmaxRows(x), value, rg)
    }

    pub fn max_pool_blocks(&mut self, x: TensorId, block: usize) -> TensorId {
        let blocks = block_count(self.value(x).nrows(), block);
        let c = self.value(x).ncols();
        let mut value = Array2::<f64>::zeros((blocks, c));
        for i in 0..blocks {
            let xi = self.value(x).slice(s![i * block..(i + 1) * block, ..]);
            for col in 0..c {
                value[(i, col)] = xi.column(col).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(Op::MaxPoolBlocks { x, block }, value, rg)
    }

    pub fn mean_pool_blocks(&mut self, x: TensorId, block: usize) -> TensorId {
        let blocks = block_count(self.value(x).nrows(), block);
        let c = self.value(x).ncols();
        let mut value = Array2::<f64>::zeros((blocks, c));
        for i in 0..blocks {
            let xi = self.value(x).slice(s![i * block..(i + 1) * block, ..]);
            value.row_mut(i).assign(&xi.mean_axis(Axis(0)).unwrap());
        }
        let rg = self.any_grad(&[x]);
        self.push(Op::MeanPoolBlocks { x, block }, value, rg)
    }

    pub fn gather_rows_blocks(&mut self, x: TensorId, block: usize, map: Vec<usize>) -> TensorId {
        let blocks = block_count(self.value(x).nrows(), block);
        assert!(map.iter().all(|&m| m < block), "gather map out of block range");
        let c = self.value(x).ncols();
        let mut value = Array2::<f64>::zeros((blocks * map.len(), c));
        for i in 0..blocks {
            for (out_row, &in_row) in map.iter().enumerate() {
                value
                    .row_mut(i * map.len() + out_row)
                    .assign(&self.value(x).row(i * block + in_row));
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(Op::GatherRowsBlocks { x, block, map }, value, rg)
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> TensorId {
        assert!(start + len <= self.value(x).ncols(), "column slice out of range");
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        let rg = self.any_grad(&[x]);
        self.push(Op::SliceCols { x, start, len }, value, rg)
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|id| self.value(*id).view()).collect();
        let value = concatenate(Axis(1), &views).expect("row counts must agree");
        let rg = self.any_grad(parts);
        self.push(Op::ConcatCols(parts.to_vec()), value, rg)
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|id| self.value(*id).view()).collect();
        let value = concatenate(Axis(0), &views).expect("column counts must agree");
        let rg = self.any_grad(parts);
        self.push(Op::ConcatRows(parts.to_vec()), value, rg)
    }

    pub fn flatten_blocks(&mut self, x: TensorId, block: usize) -> TensorId {
        let blocks = block_count(self.value(x).nrows(), block);
        let c = self.value(x).ncols();
        let flat: Vec<f64> = self.value(x).iter().copied().collect();
        let value = Array2::from_shape_vec((blocks, block * c), flat).expect("size preserved");
        let rg = self.any_grad(&[x]);
        self.push(Op::FlattenBlocks { x, block }, value, rg)
    }

    pub fn repeat_rows_interleave(&mut self, x: TensorId, times: usize) -> TensorId {
        assert!(times > 0, "repeat count must be positive");
        let (n, c) = (self.value(x).nrows(), self.value(x).ncols());
        let mut value = Array2::<f64>::zeros((n * times, c));
        for row in 0..n {
            for t in 0..times {
                value.row_mut(row * times + t).assign(&self.value(x).row(row));
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(Op::RepeatRowsInterleave { x, times }, value, rg)
    }

    pub fn conv1d_depthwise(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        bias: TensorId,
        block: usize,
    ) -> TensorId {
        let c = self.value(x).ncols();
        let k = self.value(kernel).nrows();
        assert!(block >= k, "block of {block} rows too short for kernel of {k}");
        assert_eq!(self.value(kernel).ncols(), c, "kernel width mismatch");
        assert_eq!(self.value(bias).raw_dim(), ndarray::Dim([1, c]), "conv bias shape");
        let blocks = block_count(self.value(x).nrows(), block);
        let out_block = block - k + 1;
        let mut value = Array2::<f64>::zeros((blocks * out_block, c));
        for i in 0..blocks {
            for t in 0..out_block {
                for col in 0..c {
                    let mut acc = self.value(bias)[(0, col)];
                    for dk in 0..k {
                        acc += self.value(x)[(i * block + t + dk, col)]
                            * self.value(kernel)[(dk, col)];
                    }
                    value[(i * out_block + t, col)] = acc;
                }
            }
        }
        let rg = self.any_grad(&[x, kernel, bias]);
        self.push(Op::Conv1dDepthwise { x, kernel, bias, block }, value, rg)
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(Op::SumAll(x), value, rg)
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.value(x).len() as f64;
        let value = Array2::from_elem((1, 1), self.value(x).sum() / n);
        let rg = self.any_grad(&[x]);
        self.push(Op::MeanAll(x), value, rg)
    }

    /// Reverse sweep from a scalar `loss` node; returns per-node gradients
    /// for every node on a path from a gradient-requiring leaf to the loss.
    pub fn backward(&self, loss: TensorId) -> Gradients {
        assert_eq!(self.value(loss).raw_dim(), ndarray::Dim([1, 1]), "loss must be a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let dy = grads[id].take().unwrap();
            self.accumulate_parents(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Gradients { grads }
    }

    fn add_grad(&self, grads: &mut [Option<Array2<f64>>], id: TensorId, delta: Array2<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_parents(&self, id: usize, dy: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, dy.clone());
                self.add_grad(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, dy.clone());
                self.add_grad(grads, *b, -dy);
            }
            Op::MulElem(a, b) => {
                self.add_grad(grads, *a, dy * self.value(*b));
                self.add_grad(grads, *b, dy * self.value(*a));
            }
            Op::Scale(x, factor) => self.add_grad(grads, *x, dy * *factor),
            Op::AddScalar(x) => self.add_grad(grads, *x, dy.clone()),
            Op::AddRowBroadcast(x, row) => {
                self.add_grad(grads, *x, dy.clone());
                let summed = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.add_grad(grads, *row, summed);
            }
            Op::MulRowBroadcast(x, scale) => {
                let s_col = self.value(*scale).column(0).insert_axis(Axis(1)).to_owned();
                self.add_grad(grads, *x, dy * &s_col);
                let dscale =
                    (dy * self.value(*x)).sum_axis(Axis(1)).insert_axis(Axis(1)).to_owned();
                self.add_grad(grads, *scale, dscale);
            }
            Op::MatMul(a, b) => {
                self.add_grad(grads, *a, dy.dot(&self.value(*b).t()));
                self.add_grad(grads, *b, self.value(*a).t().dot(dy));
            }
            Op::BlockMatMulNn { a, b, a_rows, b_rows } => {
                let blocks = self.value(*a).nrows() / a_rows;
                let mut da = Array2::<f64>::zeros(self.value(*a).raw_dim());
                let mut db = Array2::<f64>::zeros(self.value(*b).raw_dim());
                for i in 0..blocks {
                    let dyi = dy.slice(s![i * a_rows..(i + 1) * a_rows, ..]);
                    let ai = self.value(*a).slice(s![i * a_rows..(i + 1) * a_rows, ..]);
                    let bi = self.value(*b).slice(s![i * b_rows..(i + 1) * b_rows, ..]);
                    da.slice_mut(s![i * a_rows..(i + 1) * a_rows, ..]).assign(&dyi.dot(&bi.t()));
                    db.slice_mut(s![i * b_rows..(i + 1) * b_rows, ..]).assign(&ai.t().dot(&dyi));
                }
                self.add_grad(grads, *a, da);
                self.add_grad(grads, *b, db);
            }
            Op::BlockMatMulNt { a, b, a_rows, b_rows } => {
                let blocks = self.value(*a).nrows() / a_rows;
                let mut da = Array2::<f64>::zeros(self.value(*a).raw_dim());
                let mut db = Array2::<f64>::zeros(self.value(*b).raw_dim());
                for i in 0..blocks {
                    let dyi = dy.slice(s![i * a_rows..(i + 1) * a_rows, ..]);
                    let ai = self.value(*a).slice(s![i * a_rows..(i + 1) * a_rows, ..]);
                    let bi = self.value(*b).slice(s![i * b_rows..(i + 1) * b_rows, ..]);
                    da.slice_mut(s![i * a_rows..(i + 1) * a_rows, ..]).assign(&dyi.dot(&bi));
                    db.slice_mut(s![i * b_rows..(i + 1) * b_rows, ..]).assign(&dyi.t().dot(&ai));
                }
                self.add_grad(grads, *a, da);
                self.add_grad(grads, *b, db);
            }
            Op::LeftMulBlocks { matrix, x } => {
                let n = matrix.nrows();
                let blocks = self.value(*x).nrows() / n;
                let mut dx = Array2::<f64>::zeros(self.value(*x).raw_dim());
                for i in 0..blocks {
                    let dyi = dy.slice(s![i * n..(i + 1) * n, ..]);
                    dx.slice_mut(s![i * n..(i + 1) * n, ..]).assign(&matrix.t().dot(&dyi));
                }
                self.add_grad(grads, *x, dx);
            }
            Op::Relu(x) => {
                let mask = self.value(*x).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.add_grad(grads, *x, dy * &mask);
            }
            Op::Softplus(x) => {
                let sig = self.value(*x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
                self.add_grad(grads, *x, dy * &sig);
            }
            Op::Abs(x) => {
                let sign = self.value(*x).mapv(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.add_grad(grads, *x, dy * &sign);
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let xs = self.value(*x);
                let g = self.value(*gain).row(0).to_owned();
                let c = xs.ncols() as f64;
                let mut dx = Array2::<f64>::zeros(xs.raw_dim());
                let mut dgain = Array2::<f64>::zeros((1, xs.ncols()));
                let mut dbias = Array2::<f64>::zeros((1, xs.ncols()));
                for (row_idx, row) in xs.rows().into_iter().enumerate() {
                    let mean = row.mean().unwrap();
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dyr = dy.row(row_idx);
                    // u = gain ⊙ dy is the gradient at the normalized value.
                    let u: Vec<f64> = dyr.iter().zip(g.iter()).map(|(d, gv)| d * gv).collect();
                    let mean_u = u.iter().sum::<f64>() / c;
                    let mean_ux = u.iter().zip(&xhat).map(|(uv, xh)| uv * xh).sum::<f64>() / c;
                    for col in 0..xs.ncols() {
                        dx[(row_idx, col)] = inv * (u[col] - mean_u - xhat[col] * mean_ux);
                        dgain[(0, col)] += dyr[col] * xhat[col];
                        dbias[(0, col)] += dyr[col];
                    }
                }
                self.add_grad(grads, *x, dx);
                self.add_grad(grads, *gain, dgain);
                self.add_grad(grads, *bias, dbias);
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[id].value;
                let mut dx = Array2::<f64>::zeros(y.raw_dim());
                for row_idx in 0..y.nrows() {
                    let yr = y.row(row_idx);
                    let dyr = dy.row(row_idx);
                    let dot: f64 = yr.iter().zip(dyr.iter()).map(|(a, b)| a * b).sum();
                    for col in 0..y.ncols() {
                        dx[(row_idx, col)] = yr[col] * (dyr[col] - dot);
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::MaxPoolBlocks { x, block } => {
                let xs = self.value(*x);
                let blocks = xs.nrows() / block;
                let mut dx = Array2::<f64>::zeros(xs.raw_dim());
                for i in 0..blocks {
                    for col in 0..xs.ncols() {
                        let mut best_row = 0;
                        let mut best = f64::NEG_INFINITY;
                        for r in 0..*block {
                            let v = xs[(i * block + r, col)];
                            if v > best {
                                best = v;
                                best_row = r;
                            }
                        }
                        dx[(i * block + best_row, col)] += dy[(i, col)];
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::MeanPoolBlocks { x, block } => {
                let xs = self.value(*x);
                let blocks = xs.nrows() / block;
                let mut dx = Array2::<f64>::zeros(xs.raw_dim());
                for i in 0..blocks {
                    for r in 0..*block {
                        for col in 0..xs.ncols() {
                            dx[(i * block + r, col)] = dy[(i, col)] / *block as f64;
                        }
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::GatherRowsBlocks { x, block, map } => {
                let xs = self.value(*x);
                let blocks = xs.nrows() / block;
                let mut dx = Array2::<f64>::zeros(xs.raw_dim());
                for i in 0..blocks {
                    for (out_row, &in_row) in map.iter().enumerate() {
                        let src = dy.row(i * map.len() + out_row);
                        let mut dst = dx.row_mut(i * block + in_row);
                        dst += &src;
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::SliceCols { x, start, len } => {
                let mut dx = Array2::<f64>::zeros(self.value(*x).raw_dim());
                dx.slice_mut(s![.., *start..*start + *len]).assign(dy);
                self.add_grad(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for part in parts {
                    let w = self.value(*part).ncols();
                    let slice = dy.slice(s![.., start..start + w]).to_owned();
                    self.add_grad(grads, *part, slice);
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for part in parts {
                    let h = self.value(*part).nrows();
                    let slice = dy.slice(s![start..start + h, ..]).to_owned();
                    self.add_grad(grads, *part, slice);
                    start += h;
                }
            }
            Op::FlattenBlocks { x, block } => {
                let xs = self.value(*x);
                let flat: Vec<f64> = dy.iter().copied().collect();
                let dx = Array2::from_shape_vec(xs.raw_dim(), flat).expect("size preserved");
                let _ = block;
                self.add_grad(grads, *x, dx);
            }
            Op::RepeatRowsInterleave { x, times } => {
                let xs = self.value(*x);
                let mut dx = Array2::<f64>::zeros(xs.raw_dim());
                for row in 0..xs.nrows() {
                    for t in 0..*times {
                        let src = dy.row(row * times + t);
                        let mut dst = dx.row_mut(row);
                        dst += &src;
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::Conv1dDepthwise { x, kernel, bias, block } => {
                let xs = self.value(*x);
                let w = self.value(*kernel);
                let k = w.nrows();
                let out_block = block - k + 1;
                let blocks = xs.nrows() / block;
                let mut dx = Array2::<f64>::zeros(xs.raw_dim());
                let mut dw = Array2::<f64>::zeros(w.raw_dim());
                let mut db = Array2::<f64>::zeros((1, xs.ncols()));
                for i in 0..blocks {
                    for t in 0..out_block {
                        for col in 0..xs.ncols() {
                            let g = dy[(i * out_block + t, col)];
                            db[(0, col)] += g;
                            for dk in 0..k {
                                dx[(i * block + t + dk, col)] += g * w[(dk, col)];
                                dw[(dk, col)] += g * xs[(i * block + t + dk, col)];
                            }
                        }
                    }
                }
                self.add_grad(grads, *x, dx);
                self.add_grad(grads, *kernel, dw);
                self.add_grad(grads, *bias, db);
            }
            Op::SumAll(x) => {
                let g = dy[(0, 0)];
                self.add_grad(grads, *x, Array2::from_elem(self.value(*x).raw_dim(), g));
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len() as f64;
                let g = dy[(0, 0)] / n;
                self.add_grad(grads, *x, Array2::from_elem(self.value(*x).raw_dim(), g));
            }
        }
    }
}
