//! Dense 2-D `f64` tensors with reverse-mode differentiation.
//!
//! The engine records operations as they execute (a Wengert tape): every op
//! computes its forward value immediately and appends a node to the owning
//! [`Graph`]. Because nodes are appended in execution order, node ids are
//! already a topological order, and one reverse sweep over ids visits every
//! recorded operation exactly once.
//!
//! Shapes are `[rows, cols]`; scalars are `[1, 1]` and row vectors `[1, n]`.
//! Gradients accumulate additively — callers zero parameter gradients between
//! optimizer steps. Leaves with `requires_grad = false` never allocate a
//! gradient buffer.

mod params;

pub use params::{Param, ParamRef, ParamStore};

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::KernelError;

type Result<T> = std::result::Result<T, KernelError>;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Recorded operation, holding the node ids of its inputs.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    Mul { a: usize, b: usize },
    RowScale { x: usize, scale: usize },
    Scale { x: usize, c: f64 },
    Relu { x: usize },
    Exp { x: usize },
    Log { x: usize },
    SoftmaxRows { x: usize, temperature: f64 },
    LayerNormRows { x: usize, gain: usize, bias: usize },
    Sum { x: usize },
    Mean { x: usize },
    MeanRows { x: usize },
    L2NormalizeRows { x: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    SliceRows { x: usize, start: usize, len: usize },
    SliceCols { x: usize, start: usize, len: usize },
    GatherRows { x: usize, indices: Vec<usize> },
    KlDiv { p: usize, q: usize },
}

struct Node {
    values: Vec<f64>,
    rows: usize,
    cols: usize,
    /// True when a gradient flows to or through this node.
    needs: bool,
    /// Accumulated gradient; allocated lazily, never for frozen leaves.
    grad: Option<Vec<f64>>,
    op: Op,
    /// Present on leaves leased from a persistent parameter.
    param: Option<ParamRef>,
}

struct GraphInner {
    nodes: Vec<Node>,
}

/// A recording of differentiable operations. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// Handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &(r, c))
            .finish()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner { nodes: Vec::new() })),
        }
    }

    fn push(&self, values: Vec<f64>, rows: usize, cols: usize, needs: bool, op: Op) -> Tensor {
        debug_assert_eq!(values.len(), rows * cols);
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            values,
            rows,
            cols,
            needs,
            grad: None,
            op,
            param: None,
        });
        Tensor {
            graph: self.clone(),
            id,
        }
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, values: Vec<f64>, rows: usize, cols: usize) -> Tensor {
        self.leaf(values, rows, cols, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(vec![v], 1, 1)
    }

    /// A leaf tensor; gradients accumulate into it when `requires_grad`.
    pub fn leaf(&self, values: Vec<f64>, rows: usize, cols: usize, requires_grad: bool) -> Tensor {
        assert_eq!(
            values.len(),
            rows * cols,
            "leaf value count {} does not match shape {}x{}",
            values.len(),
            rows,
            cols
        );
        self.push(values, rows, cols, requires_grad, Op::Leaf)
    }

    /// Lease a persistent parameter into this graph. The leaf copies the
    /// current values; on backward, gradients are added to `param.grad`
    /// (only when the parameter is trainable).
    pub fn param(&self, param: &ParamRef) -> Tensor {
        let (values, rows, cols, trainable) = {
            let p = param.borrow();
            (p.values.clone(), p.rows, p.cols, p.trainable)
        };
        let t = self.push(values, rows, cols, trainable, Op::Leaf);
        self.inner.borrow_mut().nodes[t.id].param = Some(Rc::clone(param));
        t
    }

    /// Stack tensors vertically. All parts must share a column count.
    pub fn concat_rows(&self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(KernelError::Domain {
                op: "concat_rows",
                what: "empty part list".into(),
            });
        }
        let cols = parts[0].cols();
        let mut rows = 0;
        let mut values = Vec::new();
        let mut needs = false;
        for p in parts {
            self.check_same_graph(p)?;
            if p.cols() != cols {
                return Err(KernelError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![parts[0].rows(), cols],
                    right: vec![p.rows(), p.cols()],
                });
            }
            rows += p.rows();
            values.extend_from_slice(&p.node_values());
            needs |= p.needs();
        }
        Ok(self.push(
            values,
            rows,
            cols,
            needs,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.id).collect(),
            },
        ))
    }

    /// Stack tensors horizontally. All parts must share a row count.
    pub fn concat_cols(&self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(KernelError::Domain {
                op: "concat_cols",
                what: "empty part list".into(),
            });
        }
        let rows = parts[0].rows();
        let mut cols = 0;
        let mut needs = false;
        for p in parts {
            self.check_same_graph(p)?;
            if p.rows() != rows {
                return Err(KernelError::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![rows, parts[0].cols()],
                    right: vec![p.rows(), p.cols()],
                });
            }
            cols += p.cols();
            needs |= p.needs();
        }
        let mut values = vec![0.0; rows * cols];
        let mut offset = 0;
        for p in parts {
            let pv = p.node_values();
            let pc = p.cols();
            for i in 0..rows {
                values[i * cols + offset..i * cols + offset + pc]
                    .copy_from_slice(&pv[i * pc..(i + 1) * pc]);
            }
            offset += pc;
        }
        Ok(self.push(
            values,
            rows,
            cols,
            needs,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.id).collect(),
            },
        ))
    }

    fn check_same_graph(&self, t: &Tensor) -> Result<()> {
        if Rc::ptr_eq(&self.inner, &t.graph.inner) {
            Ok(())
        } else {
            Err(KernelError::Domain {
                op: "graph",
                what: "tensors belong to different graphs".into(),
            })
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Tensor {
    pub fn rows(&self) -> usize {
        self.graph.inner.borrow().nodes[self.id].rows
    }

    pub fn cols(&self) -> usize {
        self.graph.inner.borrow().nodes[self.id].cols
    }

    pub fn shape(&self) -> (usize, usize) {
        let inner = self.graph.inner.borrow();
        let n = &inner.nodes[self.id];
        (n.rows, n.cols)
    }

    fn needs(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].needs
    }

    fn node_values(&self) -> Vec<f64> {
        self.graph.inner.borrow().nodes[self.id].values.clone()
    }

    /// Copy of the stored values, row-major.
    pub fn values(&self) -> Vec<f64> {
        self.node_values()
    }

    /// The single stored value of a 1x1 tensor.
    pub fn scalar(&self) -> Result<f64> {
        let (r, c) = self.shape();
        if r * c != 1 {
            return Err(KernelError::BadShape {
                op: "scalar",
                expected: "a 1x1 tensor",
                got: vec![r, c],
            });
        }
        Ok(self.graph.inner.borrow().nodes[self.id].values[0])
    }

    /// Accumulated gradient, if one was produced by a backward pass.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.inner.borrow().nodes[self.id].grad.clone()
    }

    /// Cut the tape: a constant leaf holding this tensor's current values.
    pub fn detach(&self) -> Tensor {
        let (r, c) = self.shape();
        self.graph.constant(self.node_values(), r, c)
    }

    fn unary(&self, values: Vec<f64>, rows: usize, cols: usize, op: Op) -> Tensor {
        self.graph.push(values, rows, cols, self.needs(), op)
    }

    fn binary(&self, other: &Tensor, values: Vec<f64>, rows: usize, cols: usize, op: Op) -> Tensor {
        self.graph
            .push(values, rows, cols, self.needs() || other.needs(), op)
    }

    /// Standard matrix product `self[m,k] . rhs[k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.graph.check_same_graph(rhs)?;
        let (m, k) = self.shape();
        let (k2, n) = rhs.shape();
        if k != k2 {
            return Err(KernelError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let a = self.node_values();
        let b = rhs.node_values();
        let values = matmul_raw(&a, &b, m, k, n);
        Ok(self.binary(rhs, values, m, n, Op::Matmul { a: self.id, b: rhs.id }))
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.shape();
        let v = self.node_values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        self.unary(out, c, r, Op::Transpose { x: self.id })
    }

    /// Elementwise addition; shapes must match exactly.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.graph.check_same_graph(rhs)?;
        let (r, c) = self.shape();
        if rhs.shape() != (r, c) {
            return Err(KernelError::ShapeMismatch {
                op: "add",
                left: vec![r, c],
                right: vec![rhs.rows(), rhs.cols()],
            });
        }
        let a = self.node_values();
        let b = rhs.node_values();
        let values = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        Ok(self.binary(rhs, values, r, c, Op::Add { a: self.id, b: rhs.id }))
    }

    /// `self - rhs`, composed from scale and add.
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.add(&rhs.scale(-1.0))
    }

    /// Add a `[1,c]` bias row to every row of `self[r,c]`.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        self.graph.check_same_graph(bias)?;
        let (r, c) = self.shape();
        if bias.shape() != (1, c) {
            return Err(KernelError::ShapeMismatch {
                op: "add_bias",
                left: vec![r, c],
                right: vec![bias.rows(), bias.cols()],
            });
        }
        let x = self.node_values();
        let b = bias.node_values();
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[i * c + j] = x[i * c + j] + b[j];
            }
        }
        Ok(self.binary(
            bias,
            values,
            r,
            c,
            Op::AddBias {
                x: self.id,
                bias: bias.id,
            },
        ))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.graph.check_same_graph(rhs)?;
        let (r, c) = self.shape();
        if rhs.shape() != (r, c) {
            return Err(KernelError::ShapeMismatch {
                op: "mul",
                left: vec![r, c],
                right: vec![rhs.rows(), rhs.cols()],
            });
        }
        let a = self.node_values();
        let b = rhs.node_values();
        let values = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        Ok(self.binary(rhs, values, r, c, Op::Mul { a: self.id, b: rhs.id }))
    }

    /// Scale row `i` of `self[r,c]` by `scale[i]`, where `scale` is `[r,1]`.
    pub fn row_scale(&self, scale: &Tensor) -> Result<Tensor> {
        self.graph.check_same_graph(scale)?;
        let (r, c) = self.shape();
        if scale.shape() != (r, 1) {
            return Err(KernelError::ShapeMismatch {
                op: "row_scale",
                left: vec![r, c],
                right: vec![scale.rows(), scale.cols()],
            });
        }
        let x = self.node_values();
        let s = scale.node_values();
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[i * c + j] = x[i * c + j] * s[i];
            }
        }
        Ok(self.binary(
            scale,
            values,
            r,
            c,
            Op::RowScale {
                x: self.id,
                scale: scale.id,
            },
        ))
    }

    /// Multiply every entry by the constant `c`.
    pub fn scale(&self, c: f64) -> Tensor {
        let (r, cc) = self.shape();
        let values = self.node_values().iter().map(|v| v * c).collect();
        self.unary(values, r, cc, Op::Scale { x: self.id, c })
    }

    pub fn relu(&self) -> Tensor {
        let (r, c) = self.shape();
        let values = self.node_values().iter().map(|v| v.max(0.0)).collect();
        self.unary(values, r, c, Op::Relu { x: self.id })
    }

    pub fn exp(&self) -> Tensor {
        let (r, c) = self.shape();
        let values = self.node_values().iter().map(|v| v.exp()).collect();
        self.unary(values, r, c, Op::Exp { x: self.id })
    }

    /// Natural logarithm; rejects non-positive entries.
    pub fn log(&self) -> Result<Tensor> {
        let (r, c) = self.shape();
        let x = self.node_values();
        if let Some(v) = x.iter().find(|v| **v <= 0.0) {
            return Err(KernelError::Domain {
                op: "log",
                what: format!("non-positive entry {v}"),
            });
        }
        let values = x.iter().map(|v| v.ln()).collect();
        Ok(self.unary(values, r, c, Op::Log { x: self.id }))
    }

    /// Row-wise `softmax(x / temperature)`, computed with max subtraction.
    pub fn softmax_rows(&self, temperature: f64) -> Result<Tensor> {
        if temperature <= 0.0 {
            return Err(KernelError::NonPositiveTemperature(temperature));
        }
        let (r, c) = self.shape();
        let x = self.node_values();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(KernelError::Domain {
                op: "softmax_rows",
                what: "non-finite input".into(),
            });
        }
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..c {
                let e = ((row[j] - m) / temperature).exp();
                values[i * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                values[i * c + j] /= denom;
            }
        }
        Ok(self.unary(
            values,
            r,
            c,
            Op::SoftmaxRows {
                x: self.id,
                temperature,
            },
        ))
    }

    /// Row-wise layer normalization with learnable gain and bias (`[1,c]`).
    pub fn layer_norm_rows(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        self.graph.check_same_graph(gain)?;
        self.graph.check_same_graph(bias)?;
        let (r, c) = self.shape();
        if gain.shape() != (1, c) || bias.shape() != (1, c) {
            return Err(KernelError::ShapeMismatch {
                op: "layer_norm_rows",
                left: vec![r, c],
                right: vec![gain.rows(), gain.cols()],
            });
        }
        let x = self.node_values();
        let g = gain.node_values();
        let b = bias.node_values();
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                values[i * c + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let needs = self.needs() || gain.needs() || bias.needs();
        Ok(self.graph.push(
            values,
            r,
            c,
            needs,
            Op::LayerNormRows {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
            },
        ))
    }

    /// Sum of all entries, as a `[1,1]` tensor.
    pub fn sum(&self) -> Tensor {
        let total = self.node_values().iter().sum();
        self.unary(vec![total], 1, 1, Op::Sum { x: self.id })
    }

    /// Mean of all entries, as a `[1,1]` tensor.
    pub fn mean(&self) -> Tensor {
        let v = self.node_values();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.unary(vec![m], 1, 1, Op::Mean { x: self.id })
    }

    /// Average the rows together: `[r,c] -> [1,c]`.
    pub fn mean_rows(&self) -> Tensor {
        let (r, c) = self.shape();
        let x = self.node_values();
        let mut values = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                values[j] += x[i * c + j];
            }
        }
        for v in values.iter_mut() {
            *v /= r as f64;
        }
        self.unary(values, 1, c, Op::MeanRows { x: self.id })
    }

    /// Normalize each row to unit Euclidean norm; rejects zero rows.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        let (r, c) = self.shape();
        let x = self.node_values();
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(KernelError::Domain {
                    op: "l2_normalize_rows",
                    what: format!("row {i} has zero norm"),
                });
            }
            for j in 0..c {
                values[i * c + j] = row[j] / norm;
            }
        }
        Ok(self.unary(values, r, c, Op::L2NormalizeRows { x: self.id }))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.shape();
        if start + len > r {
            return Err(KernelError::BadShape {
                op: "slice_rows",
                expected: "a row range inside the tensor",
                got: vec![start, len, r],
            });
        }
        let x = self.node_values();
        let values = x[start * c..(start + len) * c].to_vec();
        Ok(self.unary(values, len, c, Op::SliceRows { x: self.id, start, len }))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.shape();
        if start + len > c {
            return Err(KernelError::BadShape {
                op: "slice_cols",
                expected: "a column range inside the tensor",
                got: vec![start, len, c],
            });
        }
        let x = self.node_values();
        let mut values = vec![0.0; r * len];
        for i in 0..r {
            values[i * len..(i + 1) * len].copy_from_slice(&x[i * c + start..i * c + start + len]);
        }
        Ok(self.unary(values, r, len, Op::SliceCols { x: self.id, start, len }))
    }

    /// Select rows by index (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (r, c) = self.shape();
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(KernelError::BadShape {
                op: "gather_rows",
                expected: "indices inside the row range",
                got: vec![bad, r],
            });
        }
        let x = self.node_values();
        let mut values = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            values.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        Ok(self.unary(
            values,
            indices.len(),
            c,
            Op::GatherRows {
                x: self.id,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Kullback-Leibler divergence `sum_t p_t ln(p_t / q_t)` of two `[1,n]`
    /// distributions, with the `0 ln 0 = 0` convention. Gradients flow to
    /// `p` only; the target `q` is treated as a constant.
    pub fn kl_div(&self, q: &Tensor) -> Result<Tensor> {
        self.graph.check_same_graph(q)?;
        let (r, n) = self.shape();
        if r != 1 {
            return Err(KernelError::BadShape {
                op: "kl_div",
                expected: "a [1,n] distribution",
                got: vec![r, n],
            });
        }
        if q.shape() != (1, n) {
            return Err(KernelError::ShapeMismatch {
                op: "kl_div",
                left: vec![r, n],
                right: vec![q.rows(), q.cols()],
            });
        }
        let p = self.node_values();
        let qv = q.node_values();
        check_simplex("p", &p)?;
        check_simplex("q", &qv)?;
        let mut total = 0.0;
        for t in 0..n {
            if p[t] > 0.0 {
                if qv[t] <= 0.0 {
                    return Err(KernelError::InfiniteDivergence { index: t });
                }
                total += p[t] * (p[t] / qv[t]).ln();
            }
        }
        // Gradients flow to the model distribution only; q is a target.
        Ok(self.graph.push(
            vec![total],
            1,
            1,
            self.needs(),
            Op::KlDiv { p: self.id, q: q.id },
        ))
    }

    /// Reverse sweep from a scalar loss; accumulates gradients into every
    /// reachable node that requires them and flushes leased parameters.
    pub fn backward(&self) -> Result<()> {
        let (r, c) = self.shape();
        if r * c != 1 {
            return Err(KernelError::NonScalarLoss(vec![r, c]));
        }
        let mut inner = self.graph.inner.borrow_mut();
        if !inner.nodes[self.id].needs {
            // No trainable ancestors; nothing to do.
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        pending[self.id] = Some(vec![1.0]);

        for id in (0..=self.id).rev() {
            let Some(g) = pending[id].take() else { continue };
            propagate(&mut inner.nodes, id, &g, &mut pending);
            let node = &mut inner.nodes[id];
            match node.grad.as_mut() {
                Some(acc) => {
                    for (a, gv) in acc.iter_mut().zip(&g) {
                        *a += gv;
                    }
                }
                None => node.grad = Some(g.clone()),
            }
            if let Some(param) = &node.param {
                let mut p = param.borrow_mut();
                if p.trainable {
                    for (a, gv) in p.grad.iter_mut().zip(&g) {
                        *a += gv;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Add `g` into the pending gradient of node `id` if it participates.
fn accumulate(nodes: &[Node], pending: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    if !nodes[id].needs {
        return;
    }
    match &mut pending[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn propagate(nodes: &mut [Node], id: usize, g: &[f64], pending: &mut [Option<Vec<f64>>]) {
    let op = nodes[id].op.clone();
    let (rows, cols) = (nodes[id].rows, nodes[id].cols);
    match op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = (nodes[a].rows, nodes[a].cols);
            let n = nodes[b].cols;
            if nodes[a].needs {
                // da += g . b^T
                let bt = transpose_raw(&nodes[b].values, k, n);
                let da = matmul_raw(g, &bt, m, n, k);
                accumulate(nodes, pending, a, &da);
            }
            if nodes[b].needs {
                // db += a^T . g
                let at = transpose_raw(&nodes[a].values, m, k);
                let db = matmul_raw(&at, g, k, m, n);
                accumulate(nodes, pending, b, &db);
            }
        }
        Op::Transpose { x } => {
            let gt = transpose_raw(g, rows, cols);
            accumulate(nodes, pending, x, &gt);
        }
        Op::Add { a, b } => {
            accumulate(nodes, pending, a, g);
            accumulate(nodes, pending, b, g);
        }
        Op::AddBias { x, bias } => {
            accumulate(nodes, pending, x, g);
            if nodes[bias].needs {
                let mut db = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        db[j] += g[i * cols + j];
                    }
                }
                accumulate(nodes, pending, bias, &db);
            }
        }
        Op::Mul { a, b } => {
            if nodes[a].needs {
                let da: Vec<f64> = g.iter().zip(&nodes[b].values).map(|(g, v)| g * v).collect();
                accumulate(nodes, pending, a, &da);
            }
            if nodes[b].needs {
                let db: Vec<f64> = g.iter().zip(&nodes[a].values).map(|(g, v)| g * v).collect();
                accumulate(nodes, pending, b, &db);
            }
        }
        Op::RowScale { x, scale } => {
            let s = &nodes[scale].values;
            if nodes[x].needs {
                let mut dx = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        dx[i * cols + j] = g[i * cols + j] * s[i];
                    }
                }
                accumulate(nodes, pending, x, &dx);
            }
            if nodes[scale].needs {
                let xv = &nodes[x].values;
                let mut ds = vec![0.0; rows];
                for i in 0..rows {
                    for j in 0..cols {
                        ds[i] += g[i * cols + j] * xv[i * cols + j];
                    }
                }
                accumulate(nodes, pending, scale, &ds);
            }
        }
        Op::Scale { x, c } => {
            let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
            accumulate(nodes, pending, x, &dx);
        }
        Op::Relu { x } => {
            let dx: Vec<f64> = g
                .iter()
                .zip(&nodes[x].values)
                .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(nodes, pending, x, &dx);
        }
        Op::Exp { x } => {
            let y = &nodes[id].values;
            let dx: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y).collect();
            accumulate(nodes, pending, x, &dx);
        }
        Op::Log { x } => {
            let dx: Vec<f64> = g
                .iter()
                .zip(&nodes[x].values)
                .map(|(g, v)| g / v)
                .collect();
            accumulate(nodes, pending, x, &dx);
        }
        Op::SoftmaxRows { x, temperature } => {
            let y = &nodes[id].values;
            let mut dx = vec![0.0; rows * cols];
            for i in 0..rows {
                let yr = &y[i * cols..(i + 1) * cols];
                let gr = &g[i * cols..(i + 1) * cols];
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..cols {
                    dx[i * cols + j] = yr[j] * (gr[j] - dot) / temperature;
                }
            }
            accumulate(nodes, pending, x, &dx);
        }
        Op::LayerNormRows { x, gain, bias } => {
            let xv = nodes[x].values.clone();
            let gv = nodes[gain].values.clone();
            let c = cols as f64;
            let mut dx = vec![0.0; rows * cols];
            let mut dgain = vec![0.0; cols];
            let mut dbias = vec![0.0; cols];
            for i in 0..rows {
                let row = &xv[i * cols..(i + 1) * cols];
                let gr = &g[i * cols..(i + 1) * cols];
                let mean = row.iter().sum::<f64>() / c;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                let dxhat: Vec<f64> = gr.iter().zip(&gv).map(|(g, gm)| g * gm).collect();
                let mean_dxhat = dxhat.iter().sum::<f64>() / c;
                let mean_dxhat_xhat =
                    dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c;
                for j in 0..cols {
                    dx[i * cols + j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    dgain[j] += gr[j] * xhat[j];
                    dbias[j] += gr[j];
                }
            }
            accumulate(nodes, pending, x, &dx);
            accumulate(nodes, pending, gain, &dgain);
            accumulate(nodes, pending, bias, &dbias);
        }
        Op::Sum { x } => {
            let n = nodes[x].values.len();
            let dx = vec![g[0]; n];
            accumulate(nodes, pending, x, &dx);
        }
        Op::Mean { x } => {
            let n = nodes[x].values.len();
            let dx = vec![g[0] / n as f64; n];
            accumulate(nodes, pending, x, &dx);
        }
        Op::MeanRows { x } => {
            let r = nodes[x].rows;
            let mut dx = vec![0.0; r * cols];
            for i in 0..r {
                for j in 0..cols {
                    dx[i * cols + j] = g[j] / r as f64;
                }
            }
            accumulate(nodes, pending, x, &dx);
        }
        Op::L2NormalizeRows { x } => {
            let xv = nodes[x].values.clone();
            let mut dx = vec![0.0; rows * cols];
            for i in 0..rows {
                let row = &xv[i * cols..(i + 1) * cols];
                let gr = &g[i * cols..(i + 1) * cols];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = row.iter().zip(gr).map(|(x, g)| x * g).sum();
                let n3 = norm * norm * norm;
                for j in 0..cols {
                    dx[i * cols + j] = gr[j] / norm - row[j] * dot / n3;
                }
            }
            accumulate(nodes, pending, x, &dx);
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for pid in parts {
                let pr = nodes[pid].rows;
                let slice = &g[offset * cols..(offset + pr) * cols];
                accumulate(nodes, pending, pid, slice);
                offset += pr;
            }
        }
        Op::ConcatCols { parts } => {
            let mut offset = 0;
            for pid in parts {
                let pc = nodes[pid].cols;
                if nodes[pid].needs {
                    let mut dp = vec![0.0; rows * pc];
                    for i in 0..rows {
                        dp[i * pc..(i + 1) * pc]
                            .copy_from_slice(&g[i * cols + offset..i * cols + offset + pc]);
                    }
                    accumulate(nodes, pending, pid, &dp);
                }
                offset += pc;
            }
        }
        Op::SliceRows { x, start, len } => {
            let (xr, xc) = (nodes[x].rows, nodes[x].cols);
            let mut dx = vec![0.0; xr * xc];
            dx[start * xc..(start + len) * xc].copy_from_slice(g);
            accumulate(nodes, pending, x, &dx);
        }
        Op::SliceCols { x, start, len } => {
            let (xr, xc) = (nodes[x].rows, nodes[x].cols);
            let mut dx = vec![0.0; xr * xc];
            for i in 0..xr {
                dx[i * xc + start..i * xc + start + len]
                    .copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            accumulate(nodes, pending, x, &dx);
        }
        Op::GatherRows { x, indices } => {
            let (xr, xc) = (nodes[x].rows, nodes[x].cols);
            let mut dx = vec![0.0; xr * xc];
            for (i, &src) in indices.iter().enumerate() {
                for j in 0..xc {
                    dx[src * xc + j] += g[i * xc + j];
                }
            }
            accumulate(nodes, pending, x, &dx);
        }
        Op::KlDiv { p, q } => {
            // d/dp_t [ p_t ln(p_t/q_t) ] = ln(p_t/q_t) + 1; zero-mass entries
            // contribute nothing. The target is a constant by contract.
            if nodes[p].needs {
                let pv = &nodes[p].values;
                let qv = &nodes[q].values;
                let mut dp = vec![0.0; pv.len()];
                for t in 0..pv.len() {
                    if pv[t] > 0.0 {
                        dp[t] = g[0] * ((pv[t] / qv[t]).ln() + 1.0);
                    }
                }
                accumulate(nodes, pending, p, &dp);
            }
        }
    }
}

fn check_simplex(label: &str, v: &[f64]) -> Result<()> {
    if let Some(bad) = v.iter().find(|x| **x < 0.0) {
        return Err(KernelError::NotSimplex(format!(
            "{label} has negative entry {bad}"
        )));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(KernelError::NotSimplex(format!(
            "{label} sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}
