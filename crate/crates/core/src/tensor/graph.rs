//! Eager computation graph with reverse-mode gradients.
//!
//! Ops execute immediately and record a backward rule. [`Graph::backward`]
//! walks the tape in reverse (topological order is construction order),
//! accumulating gradients additively; parameter slices scatter their
//! gradients back into the owning [`ParamStore`] region. One graph is built
//! per training step and backward is called at most once.

use super::{Elem, ParamStore, Result, Tensor, TensorError, LAYERNORM_EPS};

/// Handle to one node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[cfg(not(feature = "f32"))]
use matrixmultiply::dgemm as gemm_impl;
#[cfg(feature = "f32")]
use matrixmultiply::sgemm as gemm_impl;

/// C[m x n] = alpha * A · B + beta * C, row-major, A is [m x k].
fn mm_nn(m: usize, k: usize, n: usize, a: &[Elem], b: &[Elem], beta: Elem, c: &mut [Elem]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        gemm_impl(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// C[m x n] = A · Bᵀ + beta * C, where B is stored row-major [n x k].
fn mm_nt(m: usize, k: usize, n: usize, a: &[Elem], b: &[Elem], beta: Elem, c: &mut [Elem]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        gemm_impl(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// C[m x n] = Aᵀ · B + beta * C, where A is stored row-major [k x m].
fn mm_tn(m: usize, k: usize, n: usize, a: &[Elem], b: &[Elem], beta: Elem, c: &mut [Elem]) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        gemm_impl(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

enum Op {
    Leaf,
    ParamSlice { param: usize },
    Matmul { a: usize, b: usize },
    MatmulBt { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    AddMask { x: usize },
    Scale { x: usize, k: Elem },
    RowScale { x: usize, s: usize },
    Relu { x: usize },
    SoftmaxRows { x: usize },
    LayerNormRows { x: usize, gain: usize, bias: usize, mu: Vec<Elem>, rstd: Vec<Elem> },
    Embed { table: usize, ids: Vec<usize> },
    GatherRows { x: usize, ids: Vec<usize> },
    ScatterRows { pieces: Vec<(usize, Vec<usize>)> },
    SliceCols { x: usize, c0: usize },
    ConcatCols { xs: Vec<usize> },
    MeanOf { xs: Vec<usize> },
    DotConst { x: usize, weights: Vec<Elem> },
    SumAll { x: usize },
    CrossEntropy { logits: usize, grad_rows: Vec<Elem>, n_counted: usize },
    Dropout { x: usize, mask: Vec<Elem> },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<Elem>,
    grad: Vec<Elem>,
    op: Op,
}

/// Single-step computation tape. Construction order is topological order.
pub struct Graph {
    nodes: Vec<Node>,
    matmul_flops: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new(), matmul_flops: 0 }
    }

    /// Forward matmul FLOPs recorded so far (2·m·k·n per product).
    /// Backward-pass products are not counted.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<Elem>, op: Op) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        let grad = vec![0.0; rows * cols];
        self.nodes.push(Node { rows, cols, value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn shape_of(&self, id: NodeId) -> (usize, usize) {
        self.shape(id)
    }

    fn val(&self, id: NodeId) -> &[Elem] {
        &self.nodes[id.0].value
    }

    /// Copy of a node's value.
    pub fn value_of(&self, id: NodeId) -> Tensor {
        let (r, c) = self.shape(id);
        Tensor::from_flat(r, c, self.nodes[id.0].value.clone())
    }

    /// Borrow of one row of a node's value.
    pub fn value_row(&self, id: NodeId, i: usize) -> &[Elem] {
        let n = &self.nodes[id.0];
        &n.value[i * n.cols..(i + 1) * n.cols]
    }

    /// Value of a 1x1 node.
    pub fn scalar_of(&self, id: NodeId) -> Elem {
        debug_assert_eq!(self.shape(id), (1, 1));
        self.nodes[id.0].value[0]
    }

    /// Copy of a node's accumulated gradient.
    pub fn grad_of(&self, id: NodeId) -> Tensor {
        let (r, c) = self.shape(id);
        Tensor::from_flat(r, c, self.nodes[id.0].grad.clone())
    }

    /// Places an owned tensor on the tape as a differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        let (r, c) = t.shape();
        let data = t.data().to_vec();
        self.push(r, c, data, Op::Leaf)
    }

    /// Places the front `rows x cols` block of a stored parameter on the
    /// tape. Values are gathered from (and gradients scattered back to) the
    /// parameter's shared storage.
    pub fn param_slice(
        &mut self,
        store: &ParamStore,
        name: &str,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let p = store.param(idx);
        if rows > p.rows || cols > p.cols {
            return Err(TensorError::DimMismatch {
                op: "param_slice",
                a_rows: rows,
                a_cols: cols,
                b_rows: p.rows,
                b_cols: p.cols,
            });
        }
        let mut value = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let src = i * p.cols;
            value.extend_from_slice(&p.value[src..src + cols]);
        }
        Ok(self.push(rows, cols, value, Op::ParamSlice { param: idx }))
    }

    /// Whole stored parameter as a tape leaf (a full-extent slice).
    pub fn param_full(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let p = store.param(idx);
        let (rows, cols) = (p.rows, p.cols);
        self.param_slice(store, name, rows, cols)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                a_rows: m,
                a_cols: ka,
                b_rows: kb,
                b_cols: n,
            });
        }
        let mut value = vec![0.0; m * n];
        mm_nn(m, ka, n, self.val(a), self.val(b), 0.0, &mut value);
        self.matmul_flops += 2 * (m as u64) * (ka as u64) * (n as u64);
        Ok(self.push(m, n, value, Op::Matmul { a: a.0, b: b.0 }))
    }

    /// `a · bᵀ` with `b` stored row-major `[n x k]`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.shape(a);
        let (n, kb) = self.shape(b);
        if ka != kb {
            return Err(TensorError::DimMismatch {
                op: "matmul_bt",
                a_rows: m,
                a_cols: ka,
                b_rows: n,
                b_cols: kb,
            });
        }
        let mut value = vec![0.0; m * n];
        mm_nt(m, ka, n, self.val(a), self.val(b), 0.0, &mut value);
        self.matmul_flops += 2 * (m as u64) * (ka as u64) * (n as u64);
        Ok(self.push(m, n, value, Op::MatmulBt { a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) != (rb, cb) {
            return Err(TensorError::DimMismatch {
                op: "add",
                a_rows: ra,
                a_cols: ca,
                b_rows: rb,
                b_cols: cb,
            });
        }
        let value = self
            .val(a)
            .iter()
            .zip(self.val(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(ra, ca, value, Op::Add { a: a.0, b: b.0 }))
    }

    /// Adds a `1 x c` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        let (rb, cb) = self.shape(bias);
        if rb != 1 || cb != c {
            return Err(TensorError::DimMismatch {
                op: "add_bias",
                a_rows: r,
                a_cols: c,
                b_rows: rb,
                b_cols: cb,
            });
        }
        let mut value = self.val(x).to_vec();
        let b = self.val(bias);
        for i in 0..r {
            for j in 0..c {
                value[i * c + j] += b[j];
            }
        }
        Ok(self.push(r, c, value, Op::AddBias { x: x.0, bias: bias.0 }))
    }

    /// Adds a constant mask (e.g. `MASK_NEG` at disallowed positions).
    /// The mask receives no gradient.
    pub fn add_mask(&mut self, x: NodeId, mask: &Tensor) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if (r, c) != mask.shape() {
            return Err(TensorError::DimMismatch {
                op: "add_mask",
                a_rows: r,
                a_cols: c,
                b_rows: mask.rows(),
                b_cols: mask.cols(),
            });
        }
        let value = self
            .val(x)
            .iter()
            .zip(mask.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(self.push(r, c, value, Op::AddMask { x: x.0 }))
    }

    pub fn scale(&mut self, x: NodeId, k: Elem) -> NodeId {
        let (r, c) = self.shape(x);
        let value = self.val(x).iter().map(|v| v * k).collect();
        self.push(r, c, value, Op::Scale { x: x.0, k })
    }

    /// Multiplies row `i` of `x` by `s[i, 0]`; `s` must be `r x 1`.
    /// Gradients flow to both `x` and `s`.
    pub fn row_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        let (rs, cs) = self.shape(s);
        if rs != r || cs != 1 {
            return Err(TensorError::DimMismatch {
                op: "row_scale",
                a_rows: r,
                a_cols: c,
                b_rows: rs,
                b_cols: cs,
            });
        }
        let sv = self.val(s).to_vec();
        let mut value = self.val(x).to_vec();
        for i in 0..r {
            for j in 0..c {
                value[i * c + j] *= sv[i];
            }
        }
        Ok(self.push(r, c, value, Op::RowScale { x: x.0, s: s.0 }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let value = self.val(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        self.push(r, c, value, Op::Relu { x: x.0 })
    }

    /// Numerically stabilized softmax over each row.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let xv = self.val(x);
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(Elem::NEG_INFINITY, Elem::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                value[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                value[i * c + j] /= sum;
            }
        }
        self.push(r, c, value, Op::SoftmaxRows { x: x.0 })
    }

    /// Layer normalization over the last axis with learned gain and bias
    /// (both `1 x c`); epsilon is [`LAYERNORM_EPS`].
    pub fn layernorm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let (rg, cg) = self.shape(id);
            if rg != 1 || cg != c {
                let _ = name;
                return Err(TensorError::DimMismatch {
                    op: "layernorm_rows",
                    a_rows: r,
                    a_cols: c,
                    b_rows: rg,
                    b_cols: cg,
                });
            }
        }
        let xv = self.val(x).to_vec();
        let g = self.val(gain).to_vec();
        let b = self.val(bias).to_vec();
        let mut value = vec![0.0; r * c];
        let mut mu = vec![0.0; r];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<Elem>() / c as Elem;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Elem>() / c as Elem;
            let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
            mu[i] = mean;
            rstd[i] = rs;
            for j in 0..c {
                value[i * c + j] = (row[j] - mean) * rs * g[j] + b[j];
            }
        }
        Ok(self.push(
            r,
            c,
            value,
            Op::LayerNormRows { x: x.0, gain: gain.0, bias: bias.0, mu, rstd },
        ))
    }

    /// Gathers `table` rows by token id.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (vocab, c) = self.shape(table);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embed",
                    index: id,
                    bound: vocab,
                });
            }
        }
        let tv = self.val(table);
        let mut value = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            value.extend_from_slice(&tv[id * c..(id + 1) * c]);
        }
        Ok(self.push(ids.len(), c, value, Op::Embed { table: table.0, ids: ids.to_vec() }))
    }

    /// Row gather: `out[i, :] = x[ids[i], :]`.
    pub fn gather_rows(&mut self, x: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        for &id in ids {
            if id >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: r,
                });
            }
        }
        let xv = self.val(x);
        let mut value = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            value.extend_from_slice(&xv[id * c..(id + 1) * c]);
        }
        Ok(self.push(ids.len(), c, value, Op::GatherRows { x: x.0, ids: ids.to_vec() }))
    }

    /// Inverse of row gather: piece `(src, ids)` writes `src[i, :]` to output
    /// row `ids[i]`. Every output row must be written at most once; rows never
    /// written stay zero.
    pub fn scatter_rows(&mut self, pieces: &[(NodeId, Vec<usize>)], rows: usize) -> Result<NodeId> {
        let cols = pieces
            .first()
            .map(|&(src, _)| self.shape(src).1)
            .ok_or_else(|| TensorError::Invalid("scatter_rows: no pieces".into()))?;
        let mut written = vec![false; rows];
        let mut value = vec![0.0; rows * cols];
        for &(src, ref ids) in pieces {
            let (sr, sc) = self.shape(src);
            if sc != cols || sr != ids.len() {
                return Err(TensorError::DimMismatch {
                    op: "scatter_rows",
                    a_rows: sr,
                    a_cols: sc,
                    b_rows: ids.len(),
                    b_cols: cols,
                });
            }
            let sv = self.val(src);
            for (i, &dst) in ids.iter().enumerate() {
                if dst >= rows {
                    return Err(TensorError::IndexOutOfRange {
                        op: "scatter_rows",
                        index: dst,
                        bound: rows,
                    });
                }
                if written[dst] {
                    return Err(TensorError::Invalid(format!(
                        "scatter_rows: output row {dst} written twice"
                    )));
                }
                written[dst] = true;
                value[dst * cols..(dst + 1) * cols].copy_from_slice(&sv[i * cols..(i + 1) * cols]);
            }
        }
        let op = Op::ScatterRows {
            pieces: pieces.iter().map(|&(src, ref ids)| (src.0, ids.clone())).collect(),
        };
        Ok(self.push(rows, cols, value, op))
    }

    /// Copies columns `c0..c1`.
    pub fn slice_cols(&mut self, x: NodeId, c0: usize, c1: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if c0 >= c1 || c1 > c {
            return Err(TensorError::IndexOutOfRange { op: "slice_cols", index: c1, bound: c });
        }
        let w = c1 - c0;
        let xv = self.val(x);
        let mut value = Vec::with_capacity(r * w);
        for i in 0..r {
            value.extend_from_slice(&xv[i * c + c0..i * c + c1]);
        }
        Ok(self.push(r, w, value, Op::SliceCols { x: x.0, c0 }))
    }

    /// Concatenates along columns; all inputs share the row count.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let rows = xs
            .first()
            .map(|&x| self.shape(x).0)
            .ok_or_else(|| TensorError::Invalid("concat_cols: no inputs".into()))?;
        let mut total = 0;
        for &x in xs {
            let (r, c) = self.shape(x);
            if r != rows {
                return Err(TensorError::DimMismatch {
                    op: "concat_cols",
                    a_rows: rows,
                    a_cols: 0,
                    b_rows: r,
                    b_cols: c,
                });
            }
            total += c;
        }
        let mut value = vec![0.0; rows * total];
        let mut base = 0;
        for &x in xs {
            let (_, c) = self.shape(x);
            let xv = self.val(x);
            for i in 0..rows {
                value[i * total + base..i * total + base + c]
                    .copy_from_slice(&xv[i * c..(i + 1) * c]);
            }
            base += c;
        }
        Ok(self.push(rows, total, value, Op::ConcatCols { xs: xs.iter().map(|x| x.0).collect() }))
    }

    /// Elementwise mean of same-shaped inputs, in list order.
    pub fn mean_of(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let (r, c) = xs
            .first()
            .map(|&x| self.shape(x))
            .ok_or_else(|| TensorError::Invalid("mean_of: no inputs".into()))?;
        for &x in xs {
            if self.shape(x) != (r, c) {
                let (rb, cb) = self.shape(x);
                return Err(TensorError::DimMismatch {
                    op: "mean_of",
                    a_rows: r,
                    a_cols: c,
                    b_rows: rb,
                    b_cols: cb,
                });
            }
        }
        let k = xs.len() as Elem;
        let mut value = vec![0.0; r * c];
        for &x in xs {
            for (v, s) in value.iter_mut().zip(self.val(x)) {
                *v += s;
            }
        }
        for v in &mut value {
            *v /= k;
        }
        Ok(self.push(r, c, value, Op::MeanOf { xs: xs.iter().map(|x| x.0).collect() }))
    }

    /// Scalar `sum(x ⊙ w)` against constant weights (no gradient to `w`).
    pub fn dot_const(&mut self, x: NodeId, w: &Tensor) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if (r, c) != w.shape() {
            return Err(TensorError::DimMismatch {
                op: "dot_const",
                a_rows: r,
                a_cols: c,
                b_rows: w.rows(),
                b_cols: w.cols(),
            });
        }
        let s: Elem = self.val(x).iter().zip(w.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(1, 1, vec![s], Op::DotConst { x: x.0, weights: w.data().to_vec() }))
    }

    /// Scalar sum of all elements.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: Elem = self.val(x).iter().sum();
        self.push(1, 1, vec![s], Op::SumAll { x: x.0 })
    }

    /// Label-smoothed cross-entropy averaged over rows whose target is not
    /// `pad`. The smoothed target distribution is
    /// `(1 - s) * onehot + s / vocab`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        smoothing: Elem,
        pad: Option<usize>,
    ) -> Result<NodeId> {
        let (r, vocab) = self.shape(logits);
        if !(0.0..1.0).contains(&smoothing) {
            return Err(TensorError::Invalid(format!(
                "cross_entropy: label smoothing {smoothing} outside [0, 1)"
            )));
        }
        if targets.len() != r {
            return Err(TensorError::DimMismatch {
                op: "cross_entropy",
                a_rows: r,
                a_cols: vocab,
                b_rows: targets.len(),
                b_cols: 1,
            });
        }
        for &t in targets {
            if t >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: vocab,
                });
            }
        }
        let counted: Vec<usize> = (0..r).filter(|&i| Some(targets[i]) != pad).collect();
        if counted.is_empty() {
            return Err(TensorError::Invalid("cross_entropy: every target is padding".into()));
        }
        let n = counted.len();
        let lv = self.val(logits);
        let uniform = smoothing / vocab as Elem;
        let mut grad_rows = vec![0.0; r * vocab];
        let mut total = 0.0;
        for &i in &counted {
            let row = &lv[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(Elem::NEG_INFINITY, Elem::max);
            let sum_exp: Elem = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            let target_term = (1.0 - smoothing) * row[targets[i]];
            let uniform_term: Elem = uniform * row.iter().sum::<Elem>();
            total += lse - target_term - uniform_term;
            // d(loss_row)/d(logit_j) = p_j - q_j, averaged later.
            for j in 0..vocab {
                let p = (row[j] - lse).exp();
                let q = uniform + if j == targets[i] { 1.0 - smoothing } else { 0.0 };
                grad_rows[i * vocab + j] = (p - q) / n as Elem;
            }
        }
        let value = vec![total / n as Elem];
        Ok(self.push(1, 1, value, Op::CrossEntropy { logits: logits.0, grad_rows, n_counted: n }))
    }

    /// Inverted dropout with an explicit random source. `p == 0` is an exact
    /// no-op that consumes no randomness and adds no node.
    pub fn dropout(&mut self, x: NodeId, p: Elem, rng: &mut (impl rand::Rng + ?Sized)) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid(format!("dropout: rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let (r, c) = self.shape(x);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<Elem> = (0..r * c)
            .map(|_| if rng.random::<f64>() < p as f64 { 0.0 } else { keep })
            .collect();
        let value = self.val(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(self.push(r, c, value, Op::Dropout { x: x.0, mask }))
    }

    /// Reverse sweep from `loss` (must be `1 x 1`), accumulating gradients
    /// additively into every reachable node and scattering parameter-slice
    /// gradients into `store`. Call once per graph.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(TensorError::NotScalar { op: "backward", rows: r, cols: c });
        }
        self.nodes[loss.0].grad[0] += 1.0;
        for idx in (0..=loss.0).rev() {
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            let g = self.nodes[idx].grad.clone();
            let (rows, cols) = (self.nodes[idx].rows, self.nodes[idx].cols);
            match op {
                Op::Leaf => {}
                Op::ParamSlice { param } => {
                    store.scatter_grad(param, rows, cols, &g);
                }
                Op::Matmul { a, b } => {
                    let (m, k) = (self.nodes[a].rows, self.nodes[a].cols);
                    let n = cols;
                    let mut ga = std::mem::take(&mut self.nodes[a].grad);
                    mm_nt(m, n, k, &g, &self.nodes[b].value, 1.0, &mut ga);
                    self.nodes[a].grad = ga;
                    let mut gb = std::mem::take(&mut self.nodes[b].grad);
                    mm_tn(k, m, n, &self.nodes[a].value, &g, 1.0, &mut gb);
                    self.nodes[b].grad = gb;
                }
                Op::MatmulBt { a, b } => {
                    let (m, k) = (self.nodes[a].rows, self.nodes[a].cols);
                    let n = cols;
                    let mut ga = std::mem::take(&mut self.nodes[a].grad);
                    mm_nn(m, n, k, &g, &self.nodes[b].value, 1.0, &mut ga);
                    self.nodes[a].grad = ga;
                    let mut gb = std::mem::take(&mut self.nodes[b].grad);
                    mm_tn(n, m, k, &g, &self.nodes[a].value, 1.0, &mut gb);
                    self.nodes[b].grad = gb;
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::AddBias { x, bias } => {
                    self.accumulate(x, &g);
                    let gb = &mut self.nodes[bias].grad;
                    for i in 0..rows {
                        for j in 0..cols {
                            gb[j] += g[i * cols + j];
                        }
                    }
                }
                Op::AddMask { x } => self.accumulate(x, &g),
                Op::Scale { x, k } => {
                    let gx = &mut self.nodes[x].grad;
                    for (dst, src) in gx.iter_mut().zip(&g) {
                        *dst += k * src;
                    }
                }
                Op::RowScale { x, s } => {
                    let sv = self.nodes[s].value.clone();
                    {
                        let xv = self.nodes[x].value.clone();
                        let gs = &mut self.nodes[s].grad;
                        for i in 0..rows {
                            let mut acc = 0.0;
                            for j in 0..cols {
                                acc += g[i * cols + j] * xv[i * cols + j];
                            }
                            gs[i] += acc;
                        }
                    }
                    let gx = &mut self.nodes[x].grad;
                    for i in 0..rows {
                        for j in 0..cols {
                            gx[i * cols + j] += g[i * cols + j] * sv[i];
                        }
                    }
                }
                Op::Relu { x } => {
                    let xv = std::mem::take(&mut self.nodes[x].value);
                    {
                        let gx = &mut self.nodes[x].grad;
                        for (i, (dst, src)) in gx.iter_mut().zip(&g).enumerate() {
                            if xv[i] > 0.0 {
                                *dst += src;
                            }
                        }
                    }
                    self.nodes[x].value = xv;
                }
                Op::SoftmaxRows { x } => {
                    let y = &self.nodes[idx].value;
                    let mut gx_delta = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let yr = &y[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let dot: Elem = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gx_delta[i * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(x, &gx_delta);
                }
                Op::LayerNormRows { x, gain, bias, mu, rstd } => {
                    let xv = self.nodes[x].value.clone();
                    let gv = self.nodes[gain].value.clone();
                    let mut gx_delta = vec![0.0; rows * cols];
                    let mut ggain = vec![0.0; cols];
                    let mut gbias = vec![0.0; cols];
                    let cf = cols as Elem;
                    for i in 0..rows {
                        let xr = &xv[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        // xhat = (x - mu) * rstd; dy/dxhat = gain
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..cols {
                            let xhat = (xr[j] - mu[i]) * rstd[i];
                            let dxhat = gr[j] * gv[j];
                            ggain[j] += gr[j] * xhat;
                            gbias[j] += gr[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= cf;
                        mean_dxhat_xhat /= cf;
                        for j in 0..cols {
                            let xhat = (xr[j] - mu[i]) * rstd[i];
                            let dxhat = gr[j] * gv[j];
                            gx_delta[i * cols + j] =
                                rstd[i] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    self.accumulate(x, &gx_delta);
                    self.accumulate(gain, &ggain);
                    self.accumulate(bias, &gbias);
                }
                Op::Embed { table, ids } => {
                    let gt = &mut self.nodes[table].grad;
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            gt[id * cols + j] += g[i * cols + j];
                        }
                    }
                }
                Op::GatherRows { x, ids } => {
                    let gx = &mut self.nodes[x].grad;
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            gx[id * cols + j] += g[i * cols + j];
                        }
                    }
                }
                Op::ScatterRows { pieces } => {
                    for (src, ids) in pieces {
                        let gs = &mut self.nodes[src].grad;
                        for (i, &dst) in ids.iter().enumerate() {
                            for j in 0..cols {
                                gs[i * cols + j] += g[dst * cols + j];
                            }
                        }
                    }
                }
                Op::SliceCols { x, c0 } => {
                    let full = self.nodes[x].cols;
                    let gx = &mut self.nodes[x].grad;
                    for i in 0..rows {
                        for j in 0..cols {
                            gx[i * full + c0 + j] += g[i * cols + j];
                        }
                    }
                }
                Op::ConcatCols { xs } => {
                    let mut base = 0;
                    for x in xs {
                        let cx = self.nodes[x].cols;
                        let gx = &mut self.nodes[x].grad;
                        for i in 0..rows {
                            for j in 0..cx {
                                gx[i * cx + j] += g[i * cols + base + j];
                            }
                        }
                        base += cx;
                    }
                }
                Op::MeanOf { xs } => {
                    let k = xs.len() as Elem;
                    let scaled: Vec<Elem> = g.iter().map(|v| v / k).collect();
                    for x in xs {
                        self.accumulate(x, &scaled);
                    }
                }
                Op::DotConst { x, weights } => {
                    let gx = &mut self.nodes[x].grad;
                    for (i, w) in weights.iter().enumerate() {
                        gx[i] += g[0] * w;
                    }
                }
                Op::SumAll { x } => {
                    let gx = &mut self.nodes[x].grad;
                    for dst in gx.iter_mut() {
                        *dst += g[0];
                    }
                }
                Op::CrossEntropy { logits, grad_rows, n_counted: _ } => {
                    let gl = &mut self.nodes[logits].grad;
                    for (dst, src) in gl.iter_mut().zip(&grad_rows) {
                        *dst += g[0] * src;
                    }
                }
                Op::Dropout { x, mask } => {
                    let gx = &mut self.nodes[x].grad;
                    for (i, m) in mask.iter().enumerate() {
                        gx[i] += g[i] * m;
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: usize, delta: &[Elem]) {
        let gx = &mut self.nodes[target].grad;
        debug_assert_eq!(gx.len(), delta.len());
        for (dst, src) in gx.iter_mut().zip(delta) {
            *dst += src;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{ParamStore, MASK_NEG};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(&mut rng, 3, 5);
        let mut g = Graph::new();
        let i3 = g.input(Tensor::eye(3));
        let xid = g.input(x.clone());
        let y = g.matmul(i3, xid).unwrap();
        assert!(g.value_of(y).bits_eq(&x));
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.input(Tensor::from_rows(&[vec![5.0], vec![6.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value_of(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, 4, 5);
        let b = rand_tensor(&mut rng, 5, 3);
        let mut expect = Tensor::zeros(4, 3);
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += a.at(i, k) * b.at(k, j);
                }
                expect.set(i, j, acc);
            }
        }
        let mut g = Graph::new();
        let an = g.input(a);
        let bn = g.input(b);
        let c = g.matmul(an, bn).unwrap();
        assert!(g.value_of(c).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(2, 3));
        let b = g.input(Tensor::zeros(4, 2));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2x3]") && msg.contains("[4x2]"), "message: {msg}");
    }

    #[test]
    fn matmul_bt_matches_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 5, 4);
        let bt = Tensor::from_fn(4, 5, |i, j| b.at(j, i));
        let mut g = Graph::new();
        let an = g.input(a);
        let bn = g.input(b);
        let btn = g.input(bt);
        let c1 = g.matmul_bt(an, bn).unwrap();
        let c2 = g.matmul(an, btn).unwrap();
        assert!(g.value_of(c1).max_abs_diff(&g.value_of(c2)) < 1e-12);
    }

    #[test]
    fn softmax_constant_row_is_uniform_and_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(1, 4, 3.25));
        let y = g.softmax_rows(x);
        assert_eq!(g.value_of(y).data(), &[0.25, 0.25, 0.25, 0.25]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = g.input(Tensor::from_fn(6, 9, |_, _| rng.random_range(-8.0..8.0)));
        let y = g.softmax_rows(x);
        let yv = g.value_of(y);
        for i in 0..6 {
            let s: Elem = yv.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row {i} sums to {s}");
        }
    }

    #[test]
    fn cross_entropy_vanishes_as_logit_gap_grows() {
        let mut losses = Vec::new();
        for gap in [5.0, 10.0, 20.0] {
            let mut g = Graph::new();
            let logits = g.input(Tensor::from_rows(&[vec![gap, 0.0, 0.0, 0.0]]));
            let loss = g.cross_entropy(logits, &[0], 0.0, None).unwrap();
            losses.push(g.scalar_of(loss));
        }
        assert!(losses[0] > losses[1] && losses[1] > losses[2]);
        assert!(losses[2] < 1e-6, "loss at gap 20: {}", losses[2]);
    }

    #[test]
    fn cross_entropy_skips_pad_rows() {
        let rows = [vec![2.0, -1.0, 0.5], vec![-3.0, 4.0, 1.0]];
        let mut g = Graph::new();
        let both = g.input(Tensor::from_rows(&rows));
        let l_both = g.cross_entropy(both, &[2, 0], 0.1, Some(0)).unwrap();
        let single = g.input(Tensor::from_rows(&rows[..1]));
        let l_single = g.cross_entropy(single, &[2], 0.1, None).unwrap();
        assert_eq!(g.scalar_of(l_both), g.scalar_of(l_single));

        let all_pad = g.input(Tensor::from_rows(&rows));
        assert!(g.cross_entropy(all_pad, &[0, 0], 0.1, Some(0)).is_err());
    }

    #[test]
    fn cross_entropy_rejects_bad_targets_and_smoothing() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(2, 3));
        assert!(g.cross_entropy(x, &[0, 3], 0.0, None).is_err());
        assert!(g.cross_entropy(x, &[0, 1], 1.0, None).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let mut store = ParamStore::new();
        let x = g.input(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]));
        let loss = g.sum_all(x);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(g.grad_of(x).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradients_accumulate_across_reuse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xt = rand_tensor(&mut rng, 2, 3);
        let wt = rand_tensor(&mut rng, 3, 2);

        let mut store = ParamStore::new();
        let mut g1 = Graph::new();
        let x1 = g1.input(xt.clone());
        let w1 = g1.input(wt.clone());
        let y1 = g1.matmul(x1, w1).unwrap();
        let l1 = g1.sum_all(y1);
        g1.backward(l1, &mut store).unwrap();
        let base = g1.grad_of(x1);

        let mut g2 = Graph::new();
        let x2 = g2.input(xt);
        let w2 = g2.input(wt);
        let xx = g2.add(x2, x2).unwrap();
        let y2 = g2.matmul(xx, w2).unwrap();
        let l2 = g2.sum_all(y2);
        g2.backward(l2, &mut store).unwrap();
        let doubled = g2.grad_of(x2);

        let twice = Tensor::from_fn(2, 3, |i, j| 2.0 * base.at(i, j));
        assert!(doubled.max_abs_diff(&twice) < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let mut store = ParamStore::new();
        let x = g.input(Tensor::zeros(2, 2));
        let err = g.backward(x, &mut store).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { .. }));
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut store = ParamStore::new();
            let mut g = Graph::new();
            let x = g.input(rand_tensor(&mut rng, 4, 6));
            let w = g.input(rand_tensor(&mut rng, 6, 5));
            let h = g.matmul(x, w).unwrap();
            let r = g.relu(h);
            let p = g.softmax_rows(r);
            let loss = g.cross_entropy(p, &[0, 1, 2, 3], 0.1, None).unwrap();
            g.backward(loss, &mut store).unwrap();
            (g.scalar_of(loss), g.grad_of(x), g.grad_of(w))
        };
        let (l1, gx1, gw1) = run();
        let (l2, gx2, gw2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert!(gx1.bits_eq(&gx2));
        assert!(gw1.bits_eq(&gw2));
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_half_rate_is_deterministic() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(3, 3, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = g.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y, "p = 0 must return the same node");

        let y1 = g.dropout(x, 0.5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let y2 = g.dropout(x, 0.5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert!(g.value_of(y1).bits_eq(&g.value_of(y2)));
        for &v in g.value_of(y1).data() {
            assert!(v == 0.0 || v == 2.0, "inverted dropout value {v}");
        }
    }

    #[test]
    fn scatter_rejects_duplicate_rows_and_gather_checks_bounds() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(2, 3));
        assert!(g.scatter_rows(&[(a, vec![0, 0])], 4).is_err());
        assert!(g.scatter_rows(&[(a, vec![0, 5])], 4).is_err());
        assert!(g.gather_rows(a, &[2]).is_err());
        let x = g.input(Tensor::zeros(4, 4));
        assert!(g.embed(x, &[4]).is_err());
    }

    #[test]
    fn matmul_flops_counter_counts_forward_products_only() {
        let mut g = Graph::new();
        let mut store = ParamStore::new();
        let a = g.input(Tensor::zeros(3, 4));
        let b = g.input(Tensor::zeros(4, 5));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.matmul_flops(), 120);
        let d = g.input(Tensor::zeros(6, 5));
        let _ = g.matmul_bt(c, d).unwrap();
        assert_eq!(g.matmul_flops(), 120 + 2 * 3 * 5 * 6);
        let before = g.matmul_flops();
        let loss = g.sum_all(c);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(g.matmul_flops(), before, "backward must not count");
    }

    // ---------------- finite-difference gradient checks ----------------

    const FD_H: f64 = 1e-5;
    const FD_TOL: f64 = 1e-4;

    /// Central finite differences of a scalar function of a flat buffer.
    fn fd_grad(f: &mut dyn FnMut(&[Elem]) -> Elem, x0: &[Elem]) -> Vec<Elem> {
        let mut out = Vec::with_capacity(x0.len());
        let mut x = x0.to_vec();
        for i in 0..x.len() {
            let keep = x[i];
            x[i] = keep + FD_H as Elem;
            let up = f(&x);
            x[i] = keep - FD_H as Elem;
            let down = f(&x);
            x[i] = keep;
            out.push((up - down) / (2.0 * FD_H as Elem));
        }
        out
    }

    fn assert_grads_close(name: &str, analytic: &[Elem], numeric: &[Elem]) {
        assert_eq!(analytic.len(), numeric.len(), "{name}: length mismatch");
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-6);
            let rel = (a - n).abs() / denom;
            assert!(rel < FD_TOL as Elem, "{name}[{i}]: analytic {a} vs numeric {n} (rel {rel})");
        }
    }

    /// Checks the analytic gradient of `build` (graph from input buffer to
    /// scalar loss) against central differences at `x0`.
    fn gradcheck(name: &str, x0: &[Elem], build: &mut dyn FnMut(&[Elem]) -> (Graph, NodeId, NodeId)) {
        let (mut g, x_node, loss) = build(x0);
        let mut store = ParamStore::new();
        g.backward(loss, &mut store).unwrap();
        let analytic = g.grad_of(x_node);
        let mut f = |x: &[Elem]| {
            let (g, _, loss) = build(x);
            g.scalar_of(loss)
        };
        let numeric = fd_grad(&mut f, x0);
        assert_grads_close(name, analytic.data(), &numeric);
    }

    /// Fixed random reduction weights so every output element contributes
    /// a distinct gradient signal.
    fn red_weights(r: usize, c: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        Tensor::from_fn(r, c, |_, _| rng.random_range(0.25..1.0))
    }

    #[test]
    fn gradcheck_matmul_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a0 = rand_tensor(&mut rng, 3, 4);
        let b0 = rand_tensor(&mut rng, 4, 2);
        let w = red_weights(3, 2);
        gradcheck("matmul dA", a0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(Tensor::from_flat(3, 4, x.to_vec()));
            let b = g.input(b0.clone());
            let c = g.matmul(a, b).unwrap();
            let loss = g.dot_const(c, &w).unwrap();
            (g, a, loss)
        });
        gradcheck("matmul dB", b0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(a0.clone());
            let b = g.input(Tensor::from_flat(4, 2, x.to_vec()));
            let c = g.matmul(a, b).unwrap();
            let loss = g.dot_const(c, &w).unwrap();
            (g, b, loss)
        });
    }

    #[test]
    fn gradcheck_matmul_bt_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0 = rand_tensor(&mut rng, 3, 4);
        let b0 = rand_tensor(&mut rng, 5, 4);
        let w = red_weights(3, 5);
        gradcheck("matmul_bt dA", a0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(Tensor::from_flat(3, 4, x.to_vec()));
            let b = g.input(b0.clone());
            let c = g.matmul_bt(a, b).unwrap();
            let loss = g.dot_const(c, &w).unwrap();
            (g, a, loss)
        });
        gradcheck("matmul_bt dB", b0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(a0.clone());
            let b = g.input(Tensor::from_flat(5, 4, x.to_vec()));
            let c = g.matmul_bt(a, b).unwrap();
            let loss = g.dot_const(c, &w).unwrap();
            (g, b, loss)
        });
    }

    #[test]
    fn gradcheck_elementwise_and_reduction_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x0 = rand_tensor(&mut rng, 3, 4);
        let other = rand_tensor(&mut rng, 3, 4);
        let w = red_weights(3, 4);

        gradcheck("add", x0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(Tensor::from_flat(3, 4, x.to_vec()));
            let b = g.input(other.clone());
            let c = g.add(a, b).unwrap();
            let loss = g.dot_const(c, &w).unwrap();
            (g, a, loss)
        });
        gradcheck("scale", x0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(Tensor::from_flat(3, 4, x.to_vec()));
            let c = g.scale(a, -1.75);
            let loss = g.dot_const(c, &w).unwrap();
            (g, a, loss)
        });
        let mask = Tensor::from_fn(3, 4, |i, j| if (i + j) % 3 == 0 { MASK_NEG } else { 0.0 });
        gradcheck("add_mask", x0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(Tensor::from_flat(3, 4, x.to_vec()));
            let c = g.add_mask(a, &mask).unwrap();
            let s = g.softmax_rows(c);
            let loss = g.dot_const(s, &w).unwrap();
            (g, a, loss)
        });
        gradcheck("sum_all", x0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(Tensor::from_flat(3, 4, x.to_vec()));
            let loss = g.sum_all(a);
            (g, a, loss)
        });
        gradcheck("dot_const", x0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(Tensor::from_flat(3, 4, x.to_vec()));
            let loss = g.dot_const(a, &w).unwrap();
            (g, a, loss)
        });
        // Shift inputs away from the relu kink so finite differences are valid.
        let shifted = Tensor::from_fn(3, 4, |i, j| {
            let v = x0.at(i, j);
            if v.abs() < 0.05 {
                v + 0.2
            } else {
                v
            }
        });
        gradcheck("relu", shifted.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(Tensor::from_flat(3, 4, x.to_vec()));
            let c = g.relu(a);
            let loss = g.dot_const(c, &w).unwrap();
            (g, a, loss)
        });
    }

    #[test]
    fn gradcheck_bias_rowscale_softmax_layernorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x0 = rand_tensor(&mut rng, 3, 4);
        let bias0 = rand_tensor(&mut rng, 1, 4);
        let scale0 = Tensor::from_fn(3, 1, |_, _| rng.random_range(0.5..1.5));
        let gain0 = Tensor::from_fn(1, 4, |_, _| rng.random_range(0.5..1.5));
        let w = red_weights(3, 4);

        gradcheck("add_bias dx", x0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(Tensor::from_flat(3, 4, x.to_vec()));
            let b = g.input(bias0.clone());
            let c = g.add_bias(a, b).unwrap();
            let loss = g.dot_const(c, &w).unwrap();
            (g, a, loss)
        });
        gradcheck("add_bias dbias", bias0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(x0.clone());
            let b = g.input(Tensor::from_flat(1, 4, x.to_vec()));
            let c = g.add_bias(a, b).unwrap();
            let loss = g.dot_const(c, &w).unwrap();
            (g, b, loss)
        });
        gradcheck("row_scale dx", x0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(Tensor::from_flat(3, 4, x.to_vec()));
            let s = g.input(scale0.clone());
            let c = g.row_scale(a, s).unwrap();
            let loss = g.dot_const(c, &w).unwrap();
            (g, a, loss)
        });
        gradcheck("row_scale ds", scale0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(x0.clone());
            let s = g.input(Tensor::from_flat(3, 1, x.to_vec()));
            let c = g.row_scale(a, s).unwrap();
            let loss = g.dot_const(c, &w).unwrap();
            (g, s, loss)
        });
        gradcheck("softmax_rows", x0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(Tensor::from_flat(3, 4, x.to_vec()));
            let c = g.softmax_rows(a);
            let loss = g.dot_const(c, &w).unwrap();
            (g, a, loss)
        });
        gradcheck("layernorm dx", x0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(Tensor::from_flat(3, 4, x.to_vec()));
            let gain = g.input(gain0.clone());
            let bias = g.input(bias0.clone());
            let c = g.layernorm_rows(a, gain, bias).unwrap();
            let loss = g.dot_const(c, &w).unwrap();
            (g, a, loss)
        });
        gradcheck("layernorm dgain", gain0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(x0.clone());
            let gain = g.input(Tensor::from_flat(1, 4, x.to_vec()));
            let bias = g.input(bias0.clone());
            let c = g.layernorm_rows(a, gain, bias).unwrap();
            let loss = g.dot_const(c, &w).unwrap();
            (g, gain, loss)
        });
        gradcheck("layernorm dbias", bias0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(x0.clone());
            let gain = g.input(gain0.clone());
            let bias = g.input(Tensor::from_flat(1, 4, x.to_vec()));
            let c = g.layernorm_rows(a, gain, bias).unwrap();
            let loss = g.dot_const(c, &w).unwrap();
            (g, bias, loss)
        });
    }

    #[test]
    fn gradcheck_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x0 = rand_tensor(&mut rng, 4, 3);
        let other = rand_tensor(&mut rng, 4, 2);

        let w32 = red_weights(3, 3);
        gradcheck("embed / repeated ids", x0.data(), &mut |x| {
            let mut g = Graph::new();
            let table = g.input(Tensor::from_flat(4, 3, x.to_vec()));
            let e = g.embed(table, &[2, 0, 2]).unwrap();
            let loss = g.dot_const(e, &w32).unwrap();
            (g, table, loss)
        });
        gradcheck("gather_rows", x0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(Tensor::from_flat(4, 3, x.to_vec()));
            let e = g.gather_rows(a, &[3, 1, 1]).unwrap();
            let loss = g.dot_const(e, &w32).unwrap();
            (g, a, loss)
        });
        let w43 = red_weights(4, 3);
        gradcheck("scatter_rows", x0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(Tensor::from_flat(4, 3, x.to_vec()));
            let top = g.gather_rows(a, &[0, 1]).unwrap();
            let bottom = g.gather_rows(a, &[2, 3]).unwrap();
            let s = g.scatter_rows(&[(top, vec![2, 0]), (bottom, vec![3, 1])], 4).unwrap();
            let loss = g.dot_const(s, &w43).unwrap();
            (g, a, loss)
        });
        let w42 = red_weights(4, 2);
        gradcheck("slice_cols", x0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(Tensor::from_flat(4, 3, x.to_vec()));
            let s = g.slice_cols(a, 1, 3).unwrap();
            let loss = g.dot_const(s, &w42).unwrap();
            (g, a, loss)
        });
        let w45 = red_weights(4, 5);
        gradcheck("concat_cols", x0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(Tensor::from_flat(4, 3, x.to_vec()));
            let b = g.input(other.clone());
            let cat = g.concat_cols(&[a, b]).unwrap();
            let loss = g.dot_const(cat, &w45).unwrap();
            (g, a, loss)
        });
        gradcheck("mean_of", x0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(Tensor::from_flat(4, 3, x.to_vec()));
            let b = g.input(Tensor::from_fn(4, 3, |i, j| 0.5 * (i as Elem) - 0.25 * (j as Elem)));
            let m = g.mean_of(&[a, b, a]).unwrap();
            let loss = g.dot_const(m, &w43).unwrap();
            (g, a, loss)
        });
    }

    #[test]
    fn gradcheck_cross_entropy_and_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x0 = rand_tensor(&mut rng, 4, 5);
        gradcheck("cross_entropy", x0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(Tensor::from_flat(4, 5, x.to_vec()));
            let loss = g.cross_entropy(a, &[1, 0, 4, 0], 0.1, Some(0)).unwrap();
            (g, a, loss)
        });
        let w = red_weights(4, 5);
        gradcheck("dropout (fixed mask)", x0.data(), &mut |x| {
            let mut g = Graph::new();
            let a = g.input(Tensor::from_flat(4, 5, x.to_vec()));
            let d = g.dropout(a, 0.4, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
            let loss = g.dot_const(d, &w).unwrap();
            (g, a, loss)
        });
    }

    #[test]
    fn gradcheck_param_slice_scatters_into_store_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let full = rand_tensor(&mut rng, 4, 5);
        let w = red_weights(2, 3);

        let build = |vals: &[Elem]| {
            let mut store = ParamStore::new();
            store.add_tensor("w", Tensor::from_flat(4, 5, vals.to_vec()));
            let mut g = Graph::new();
            let p = g.param_slice(&store, "w", 2, 3).unwrap();
            let loss = g.dot_const(p, &w).unwrap();
            (store, g, loss)
        };
        let (mut store, mut g, loss) = build(full.data());
        g.backward(loss, &mut store).unwrap();
        let analytic = store.param(0).grad.clone();

        let mut f = |x: &[Elem]| {
            let (_, g, loss) = build(x);
            g.scalar_of(loss)
        };
        let numeric = fd_grad(&mut f, full.data());
        assert_grads_close("param_slice", &analytic, &numeric);
        // Outside the 2x3 front block the gradient must be exactly zero.
        for i in 0..4 {
            for j in 0..5 {
                if i >= 2 || j >= 3 {
                    assert_eq!(analytic[i * 5 + j], 0.0, "grad leaked to ({i},{j})");
                }
            }
        }
    }
}
