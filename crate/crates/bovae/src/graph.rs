//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every forward pass builds its own graph, so shapes may change from one
//! example to the next (pruned bags, growing generation prefixes). A graph
//! is single-threaded; distinct graphs are independent and may live on
//! separate threads.

use std::cell::RefCell;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Pointwise distance used by the pairwise-distance kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DistanceMetric {
    Euclidean,
    Cosine,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// Row-broadcast add: [n,m] + [m].
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// a * x + b with constant a, b; only a is needed for the backward pass.
    Affine(NodeId, f64),
    /// Scales row i of a matrix by entry i of a vector.
    RowScale(NodeId, NodeId),
    /// Multiplies a whole tensor by a scalar node.
    ScaleByScalar(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// a @ b.T where b is given row-major as [m,k].
    MatMulNT(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    SoftmaxRows(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// Hard rectification to [0,1]; subgradient 0 at and beyond the clamps.
    Clamp01(NodeId),
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        lo: usize,
    },
    SliceCols {
        x: NodeId,
        lo: usize,
    },
    CrossEntropyRows {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    PairwiseDist {
        x: NodeId,
        y: NodeId,
        metric: DistanceMetric,
    },
    MinRows {
        x: NodeId,
        argmin: Vec<usize>,
    },
    MaxAll {
        x: NodeId,
        argmax: usize,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    /// Mean over rows: [n,m] -> [1,m].
    MeanRows(NodeId),
    /// max(r, x) for scalar x; gradient is zero whenever x <= r.
    FreeBitsFloor {
        x: NodeId,
        r: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        NodeId(nodes.len() - 1)
    }

    /// Leaf that participates in backward.
    pub fn param(&self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from backward.
    pub fn constant(&self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes.borrow()[id.0].value.as_scalar()
    }

    pub fn shape_of(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id.0].value.shape().to_vec()
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|id| nodes[id.0].needs_grad)
    }

    // ── Elementwise and broadcast arithmetic ──────────────────────────────

    pub fn add(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        self.push(v, Op::Add(a, b), self.needs(&[a, b]))
    }

    pub fn add_row(&self, x: NodeId, v: NodeId) -> NodeId {
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, tv) = (&nodes[x.0].value, &nodes[v.0].value);
            assert_eq!(tx.rank(), 2, "add_row: matrix expected");
            assert_eq!(tv.shape(), &[tx.cols()], "add_row: row length mismatch");
            let m = tx.cols();
            let data = tx
                .data()
                .iter()
                .enumerate()
                .map(|(i, &a)| a + tv.data()[i % m])
                .collect();
            Tensor::new(tx.shape().to_vec(), data)
        };
        self.push(out, Op::AddRow(x, v), self.needs(&[x, v]))
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(ta.shape(), tb.shape(), "sub: shape mismatch");
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        self.push(v, Op::Sub(a, b), self.needs(&[a, b]))
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        self.push(v, Op::Mul(a, b), self.needs(&[a, b]))
    }

    pub fn affine(&self, x: NodeId, a: f64, b: f64) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let data = tx.data().iter().map(|&u| a * u + b).collect();
            Tensor::new(tx.shape().to_vec(), data)
        };
        self.push(v, Op::Affine(x, a), self.needs(&[x]))
    }

    pub fn scale(&self, x: NodeId, a: f64) -> NodeId {
        self.affine(x, a, 0.0)
    }

    pub fn row_scale(&self, x: NodeId, s: NodeId) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let (tx, ts) = (&nodes[x.0].value, &nodes[s.0].value);
            assert_eq!(tx.rank(), 2, "row_scale: matrix expected");
            assert_eq!(ts.shape(), &[tx.rows()], "row_scale: one gate per row expected");
            let m = tx.cols();
            let data = tx
                .data()
                .iter()
                .enumerate()
                .map(|(i, &a)| a * ts.data()[i / m])
                .collect();
            Tensor::new(tx.shape().to_vec(), data)
        };
        self.push(v, Op::RowScale(x, s), self.needs(&[x, s]))
    }

    pub fn scale_by_scalar(&self, x: NodeId, s: NodeId) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let (tx, ts) = (&nodes[x.0].value, &nodes[s.0].value);
            assert!(ts.is_scalar(), "scale_by_scalar: scalar multiplier expected");
            let c = ts.as_scalar();
            let data = tx.data().iter().map(|&u| c * u).collect();
            Tensor::new(tx.shape().to_vec(), data)
        };
        self.push(v, Op::ScaleByScalar(x, s), self.needs(&[x, s]))
    }

    // ── Linear algebra ────────────────────────────────────────────────────

    pub fn matmul(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(ta.cols(), tb.rows(), "matmul: inner dimension mismatch");
            raw_matmul(ta, tb)
        };
        self.push(v, Op::MatMul(a, b), self.needs(&[a, b]))
    }

    pub fn matmul_nt(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(ta.cols(), tb.cols(), "matmul_nt: inner dimension mismatch");
            raw_matmul_nt(ta, tb)
        };
        self.push(v, Op::MatMulNT(a, b), self.needs(&[a, b]))
    }

    pub fn transpose(&self, x: NodeId) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            raw_transpose(&nodes[x.0].value)
        };
        self.push(v, Op::Transpose(x), self.needs(&[x]))
    }

    pub fn reshape(&self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let numel: usize = shape.iter().product();
            assert_eq!(numel, tx.numel(), "reshape: element count mismatch");
            Tensor::new(shape, tx.data().to_vec())
        };
        self.push(v, Op::Reshape(x), self.needs(&[x]))
    }

    // ── Nonlinearities ────────────────────────────────────────────────────

    pub fn softmax_rows(&self, x: NodeId) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            assert_eq!(tx.rank(), 2, "softmax_rows: matrix expected");
            let (n, m) = (tx.rows(), tx.cols());
            let mut data = vec![0.0; n * m];
            for i in 0..n {
                let row = tx.row(i);
                let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (o, &u) in data[i * m..(i + 1) * m].iter_mut().zip(row) {
                    *o = (u - hi).exp();
                    z += *o;
                }
                for o in &mut data[i * m..(i + 1) * m] {
                    *o /= z;
                }
            }
            Tensor::matrix(n, m, data)
        };
        self.push(v, Op::SoftmaxRows(x), self.needs(&[x]))
    }

    pub fn sigmoid(&self, x: NodeId) -> NodeId {
        let v = self.map_unary(x, |u| 1.0 / (1.0 + (-u).exp()));
        self.push(v, Op::Sigmoid(x), self.needs(&[x]))
    }

    pub fn tanh(&self, x: NodeId) -> NodeId {
        let v = self.map_unary(x, f64::tanh);
        self.push(v, Op::Tanh(x), self.needs(&[x]))
    }

    pub fn relu(&self, x: NodeId) -> NodeId {
        let v = self.map_unary(x, |u| u.max(0.0));
        self.push(v, Op::Relu(x), self.needs(&[x]))
    }

    pub fn clamp01(&self, x: NodeId) -> NodeId {
        let v = self.map_unary(x, |u| u.clamp(0.0, 1.0));
        self.push(v, Op::Clamp01(x), self.needs(&[x]))
    }

    fn map_unary(&self, x: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let nodes = self.nodes.borrow();
        let tx = &nodes[x.0].value;
        Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&u| f(u)).collect())
    }

    pub fn layer_norm_rows(&self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let (tx, tg, tb) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            assert_eq!(tx.rank(), 2, "layer_norm_rows: matrix expected");
            let m = tx.cols();
            assert_eq!(tg.shape(), &[m], "layer_norm_rows: gain length mismatch");
            assert_eq!(tb.shape(), &[m], "layer_norm_rows: bias length mismatch");
            let mut data = vec![0.0; tx.numel()];
            for i in 0..tx.rows() {
                let row = tx.row(i);
                let mean = row.iter().sum::<f64>() / m as f64;
                let var = row.iter().map(|&u| (u - mean).powi(2)).sum::<f64>() / m as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                for (p, &u) in row.iter().enumerate() {
                    data[i * m + p] = (u - mean) * inv * tg.data()[p] + tb.data()[p];
                }
            }
            Tensor::matrix(tx.rows(), m, data)
        };
        self.push(v, Op::LayerNormRows { x, gain, bias }, self.needs(&[x, gain, bias]))
    }

    // ── Structure: gathering, stacking, slicing ───────────────────────────

    /// Selects rows by index; duplicates allowed. Also serves as embedding
    /// lookup with `x` as the embedding table.
    pub fn gather_rows(&self, x: NodeId, idx: &[usize]) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            assert_eq!(tx.rank(), 2, "gather_rows: matrix expected");
            let m = tx.cols();
            let mut data = Vec::with_capacity(idx.len() * m);
            for &i in idx {
                assert!(i < tx.rows(), "gather_rows: row {i} out of {}", tx.rows());
                data.extend_from_slice(tx.row(i));
            }
            Tensor::matrix(idx.len(), m, data)
        };
        self.push(v, Op::GatherRows { x, idx: idx.to_vec() }, self.needs(&[x]))
    }

    pub fn concat_rows(&self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "concat_rows: no inputs");
        let v = {
            let nodes = self.nodes.borrow();
            let m = nodes[xs[0].0].value.cols();
            let mut data = Vec::new();
            let mut n = 0;
            for id in xs {
                let t = &nodes[id.0].value;
                assert_eq!(t.cols(), m, "concat_rows: column mismatch");
                data.extend_from_slice(t.data());
                n += t.rows();
            }
            Tensor::matrix(n, m, data)
        };
        self.push(v, Op::ConcatRows(xs.to_vec()), self.needs(xs))
    }

    pub fn concat_cols(&self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "concat_cols: no inputs");
        let v = {
            let nodes = self.nodes.borrow();
            let n = nodes[xs[0].0].value.rows();
            let total: usize = xs.iter().map(|id| nodes[id.0].value.cols()).sum();
            let mut data = Vec::with_capacity(n * total);
            for i in 0..n {
                for id in xs {
                    let t = &nodes[id.0].value;
                    assert_eq!(t.rows(), n, "concat_cols: row mismatch");
                    data.extend_from_slice(t.row(i));
                }
            }
            Tensor::matrix(n, total, data)
        };
        self.push(v, Op::ConcatCols(xs.to_vec()), self.needs(xs))
    }

    pub fn slice_rows(&self, x: NodeId, lo: usize, len: usize) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            assert!(lo + len <= tx.rows(), "slice_rows: range out of bounds");
            let m = tx.cols();
            Tensor::matrix(len, m, tx.data()[lo * m..(lo + len) * m].to_vec())
        };
        self.push(v, Op::SliceRows { x, lo }, self.needs(&[x]))
    }

    pub fn slice_cols(&self, x: NodeId, lo: usize, len: usize) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            assert!(lo + len <= tx.cols(), "slice_cols: range out of bounds");
            let m = tx.cols();
            let mut data = Vec::with_capacity(tx.rows() * len);
            for i in 0..tx.rows() {
                data.extend_from_slice(&tx.data()[i * m + lo..i * m + lo + len]);
            }
            Tensor::matrix(tx.rows(), len, data)
        };
        self.push(v, Op::SliceCols { x, lo }, self.needs(&[x]))
    }

    // ── Losses and reductions ─────────────────────────────────────────────

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Stable log-sum-exp; probabilities are cached for backward.
    pub fn cross_entropy_rows(&self, logits: NodeId, targets: &[usize]) -> NodeId {
        let (v, probs) = {
            let nodes = self.nodes.borrow();
            let tl = &nodes[logits.0].value;
            assert_eq!(tl.rank(), 2, "cross_entropy_rows: matrix expected");
            assert_eq!(tl.rows(), targets.len(), "cross_entropy_rows: one target per row");
            let (n, m) = (tl.rows(), tl.cols());
            let mut probs = vec![0.0; n * m];
            let mut nll = 0.0;
            for i in 0..n {
                let row = tl.row(i);
                assert!(targets[i] < m, "cross_entropy_rows: target out of range");
                let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (o, &u) in probs[i * m..(i + 1) * m].iter_mut().zip(row) {
                    *o = (u - hi).exp();
                    z += *o;
                }
                for o in &mut probs[i * m..(i + 1) * m] {
                    *o /= z;
                }
                nll += z.ln() + hi - row[targets[i]];
            }
            (Tensor::scalar(nll / n as f64), probs)
        };
        self.push(
            v,
            Op::CrossEntropyRows { logits, targets: targets.to_vec(), probs },
            self.needs(&[logits]),
        )
    }

    /// All pairwise distances between rows of two matrices: out[i][j] =
    /// d(x_i, y_j).
    pub fn pairwise_dist(&self, x: NodeId, y: NodeId, metric: DistanceMetric) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let (tx, ty) = (&nodes[x.0].value, &nodes[y.0].value);
            assert_eq!(tx.cols(), ty.cols(), "pairwise_dist: dimension mismatch");
            let (n, m) = (tx.rows(), ty.rows());
            let mut data = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    data[i * m + j] = point_dist(tx.row(i), ty.row(j), metric);
                }
            }
            Tensor::matrix(n, m, data)
        };
        self.push(v, Op::PairwiseDist { x, y, metric }, self.needs(&[x, y]))
    }

    /// Per-row minimum; ties resolve to the first minimal column.
    pub fn min_rows(&self, x: NodeId) -> NodeId {
        let (v, argmin) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            assert_eq!(tx.rank(), 2, "min_rows: matrix expected");
            let mut vals = Vec::with_capacity(tx.rows());
            let mut arg = Vec::with_capacity(tx.rows());
            for i in 0..tx.rows() {
                let row = tx.row(i);
                let (j, &m) = row
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .expect("min_rows: empty row");
                vals.push(m);
                arg.push(j);
            }
            (Tensor::vector(vals), arg)
        };
        self.push(v, Op::MinRows { x, argmin }, self.needs(&[x]))
    }

    /// Maximum over all entries; ties resolve to the first maximal entry.
    pub fn max_all(&self, x: NodeId) -> NodeId {
        let (v, argmax) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let (j, &m) = tx
                .data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .expect("max_all: empty tensor");
            (Tensor::scalar(m), j)
        };
        self.push(v, Op::MaxAll { x, argmax }, self.needs(&[x]))
    }

    pub fn sum_all(&self, x: NodeId) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            Tensor::scalar(nodes[x.0].value.data().iter().sum())
        };
        self.push(v, Op::SumAll(x), self.needs(&[x]))
    }

    pub fn mean_all(&self, x: NodeId) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64)
        };
        self.push(v, Op::MeanAll(x), self.needs(&[x]))
    }

    pub fn mean_rows(&self, x: NodeId) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            assert_eq!(tx.rank(), 2, "mean_rows: matrix expected");
            let (n, m) = (tx.rows(), tx.cols());
            let mut data = vec![0.0; m];
            for i in 0..n {
                for (o, &u) in data.iter_mut().zip(tx.row(i)) {
                    *o += u;
                }
            }
            for o in &mut data {
                *o /= n as f64;
            }
            Tensor::matrix(1, m, data)
        };
        self.push(v, Op::MeanRows(x), self.needs(&[x]))
    }

    pub fn free_bits_floor(&self, x: NodeId, r: f64) -> NodeId {
        let v = {
            let nodes = self.nodes.borrow();
            Tensor::scalar(nodes[x.0].value.as_scalar().max(r))
        };
        self.push(v, Op::FreeBitsFloor { x, r }, self.needs(&[x]))
    }

    // ── Backward ──────────────────────────────────────────────────────────

    /// Accumulates gradients of a scalar root into every grad-requiring
    /// node. Gradients from a previous backward call on this graph are
    /// discarded.
    pub fn backward(&self, root: NodeId) {
        let nodes = self.nodes.borrow();
        assert!(nodes[root.0].value.is_scalar(), "backward: root must be a scalar");
        let mut grads = self.grads.borrow_mut();
        grads.clear();
        grads.resize(nodes.len(), None);
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !nodes[i].needs_grad || grads[i].is_none() {
                continue;
            }
            let gout = grads[i].take().unwrap();
            step_backward(&nodes, &mut grads, i, &gout);
            grads[i] = Some(gout);
        }
    }

    /// Gradient of the last backward root with respect to `id`, if any
    /// reached it.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let grads = self.grads.borrow();
        grads.get(id.0).and_then(|g| {
            g.as_ref()
                .map(|d| Tensor::new(nodes[id.0].value.shape().to_vec(), d.clone()))
        })
    }
}

fn point_dist(a: &[f64], b: &[f64], metric: DistanceMetric) -> f64 {
    match metric {
        DistanceMetric::Euclidean => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
        DistanceMetric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - dot / (na * nb)
            }
        }
    }
}

fn raw_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(n, m, out)
}

/// a @ b.T with b stored row-major [m,k].
fn raw_matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = a.row(i);
        for j in 0..m {
            let brow = b.row(j);
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * m + j] = s;
        }
    }
    Tensor::matrix(n, m, out)
}

/// a.T @ b with a [n,k], b [n,m] -> [k,m].
fn raw_matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let arow = a.row(i);
        let brow = b.row(i);
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(k, m, out)
}

fn raw_transpose(x: &Tensor) -> Tensor {
    let (n, m) = (x.rows(), x.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = x.data()[i * m + j];
        }
    }
    Tensor::matrix(m, n, out)
}

fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
    if !nodes[id.0].needs_grad {
        return;
    }
    let slot = grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.numel()]);
    f(slot);
}

fn step_backward(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, gout: &[f64]) {
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |g| {
                for (o, &u) in g.iter_mut().zip(gout) {
                    *o += u;
                }
            });
            acc(nodes, grads, *b, |g| {
                for (o, &u) in g.iter_mut().zip(gout) {
                    *o += u;
                }
            });
        }
        Op::AddRow(x, v) => {
            acc(nodes, grads, *x, |g| {
                for (o, &u) in g.iter_mut().zip(gout) {
                    *o += u;
                }
            });
            let m = nodes[v.0].value.numel();
            acc(nodes, grads, *v, |g| {
                for (p, &u) in gout.iter().enumerate() {
                    g[p % m] += u;
                }
            });
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |g| {
                for (o, &u) in g.iter_mut().zip(gout) {
                    *o += u;
                }
            });
            acc(nodes, grads, *b, |g| {
                for (o, &u) in g.iter_mut().zip(gout) {
                    *o -= u;
                }
            });
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            acc(nodes, grads, *a, |g| {
                for ((o, &u), &bv) in g.iter_mut().zip(gout).zip(tb.data()) {
                    *o += u * bv;
                }
            });
            acc(nodes, grads, *b, |g| {
                for ((o, &u), &av) in g.iter_mut().zip(gout).zip(ta.data()) {
                    *o += u * av;
                }
            });
        }
        Op::Affine(x, a) => {
            let a = *a;
            acc(nodes, grads, *x, |g| {
                for (o, &u) in g.iter_mut().zip(gout) {
                    *o += a * u;
                }
            });
        }
        Op::RowScale(x, s) => {
            let (tx, ts) = (&nodes[x.0].value, &nodes[s.0].value);
            let m = tx.cols();
            acc(nodes, grads, *x, |g| {
                for (p, &u) in gout.iter().enumerate() {
                    g[p] += u * ts.data()[p / m];
                }
            });
            acc(nodes, grads, *s, |g| {
                for (p, &u) in gout.iter().enumerate() {
                    g[p / m] += u * tx.data()[p];
                }
            });
        }
        Op::ScaleByScalar(x, s) => {
            let (tx, ts) = (&nodes[x.0].value, &nodes[s.0].value);
            let c = ts.as_scalar();
            acc(nodes, grads, *x, |g| {
                for (o, &u) in g.iter_mut().zip(gout) {
                    *o += c * u;
                }
            });
            acc(nodes, grads, *s, |g| {
                g[0] += gout.iter().zip(tx.data()).map(|(&u, &xv)| u * xv).sum::<f64>();
            });
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let gt = Tensor::matrix(ta.rows(), tb.cols(), gout.to_vec());
            let da = raw_matmul_nt(&gt, tb);
            let db = raw_matmul_tn(ta, &gt);
            acc(nodes, grads, *a, |g| {
                for (o, &u) in g.iter_mut().zip(da.data()) {
                    *o += u;
                }
            });
            acc(nodes, grads, *b, |g| {
                for (o, &u) in g.iter_mut().zip(db.data()) {
                    *o += u;
                }
            });
        }
        Op::MatMulNT(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let gt = Tensor::matrix(ta.rows(), tb.rows(), gout.to_vec());
            let da = raw_matmul(&gt, tb);
            let db = raw_matmul_tn(&gt, ta);
            acc(nodes, grads, *a, |g| {
                for (o, &u) in g.iter_mut().zip(da.data()) {
                    *o += u;
                }
            });
            acc(nodes, grads, *b, |g| {
                for (o, &u) in g.iter_mut().zip(db.data()) {
                    *o += u;
                }
            });
        }
        Op::Transpose(x) => {
            let t = &nodes[i].value;
            let gt = raw_transpose(&Tensor::matrix(t.rows(), t.cols(), gout.to_vec()));
            acc(nodes, grads, *x, |g| {
                for (o, &u) in g.iter_mut().zip(gt.data()) {
                    *o += u;
                }
            });
        }
        Op::Reshape(x) => {
            acc(nodes, grads, *x, |g| {
                for (o, &u) in g.iter_mut().zip(gout) {
                    *o += u;
                }
            });
        }
        Op::SoftmaxRows(x) => {
            let y = &nodes[i].value;
            let m = y.cols();
            acc(nodes, grads, *x, |g| {
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &gout[r * m..(r + 1) * m];
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for p in 0..m {
                        g[r * m + p] += yr[p] * (gr[p] - dot);
                    }
                }
            });
        }
        Op::Sigmoid(x) => {
            let y = &nodes[i].value;
            acc(nodes, grads, *x, |g| {
                for ((o, &u), &yv) in g.iter_mut().zip(gout).zip(y.data()) {
                    *o += u * yv * (1.0 - yv);
                }
            });
        }
        Op::Tanh(x) => {
            let y = &nodes[i].value;
            acc(nodes, grads, *x, |g| {
                for ((o, &u), &yv) in g.iter_mut().zip(gout).zip(y.data()) {
                    *o += u * (1.0 - yv * yv);
                }
            });
        }
        Op::Relu(x) => {
            let tx = &nodes[x.0].value;
            acc(nodes, grads, *x, |g| {
                for ((o, &u), &xv) in g.iter_mut().zip(gout).zip(tx.data()) {
                    if xv > 0.0 {
                        *o += u;
                    }
                }
            });
        }
        Op::Clamp01(x) => {
            let tx = &nodes[x.0].value;
            acc(nodes, grads, *x, |g| {
                for ((o, &u), &xv) in g.iter_mut().zip(gout).zip(tx.data()) {
                    if xv > 0.0 && xv < 1.0 {
                        *o += u;
                    }
                }
            });
        }
        Op::LayerNormRows { x, gain, bias } => {
            let tx = &nodes[x.0].value;
            let tg = &nodes[gain.0].value;
            let m = tx.cols();
            // Per-row recomputation of the normalization statistics.
            let mut xhat = vec![0.0; tx.numel()];
            let mut inv_std = vec![0.0; tx.rows()];
            for r in 0..tx.rows() {
                let row = tx.row(r);
                let mean = row.iter().sum::<f64>() / m as f64;
                let var = row.iter().map(|&u| (u - mean).powi(2)).sum::<f64>() / m as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                inv_std[r] = inv;
                for (p, &u) in row.iter().enumerate() {
                    xhat[r * m + p] = (u - mean) * inv;
                }
            }
            acc(nodes, grads, *bias, |g| {
                for (p, &u) in gout.iter().enumerate() {
                    g[p % m] += u;
                }
            });
            acc(nodes, grads, *gain, |g| {
                for (p, &u) in gout.iter().enumerate() {
                    g[p % m] += u * xhat[p];
                }
            });
            acc(nodes, grads, *x, |g| {
                for r in 0..tx.rows() {
                    let gr = &gout[r * m..(r + 1) * m];
                    let xh = &xhat[r * m..(r + 1) * m];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for p in 0..m {
                        let dxh = gr[p] * tg.data()[p];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[p];
                    }
                    mean_dxhat /= m as f64;
                    mean_dxhat_xhat /= m as f64;
                    for p in 0..m {
                        let dxh = gr[p] * tg.data()[p];
                        g[r * m + p] += (dxh - mean_dxhat - xh[p] * mean_dxhat_xhat) * inv_std[r];
                    }
                }
            });
        }
        Op::GatherRows { x, idx } => {
            let m = nodes[x.0].value.cols();
            acc(nodes, grads, *x, |g| {
                for (k, &src) in idx.iter().enumerate() {
                    for p in 0..m {
                        g[src * m + p] += gout[k * m + p];
                    }
                }
            });
        }
        Op::ConcatRows(xs) => {
            let mut off = 0;
            for id in xs {
                let sz = nodes[id.0].value.numel();
                let chunk = &gout[off..off + sz];
                acc(nodes, grads, *id, |g| {
                    for (o, &u) in g.iter_mut().zip(chunk) {
                        *o += u;
                    }
                });
                off += sz;
            }
        }
        Op::ConcatCols(xs) => {
            let n = nodes[xs[0].0].value.rows();
            let total: usize = xs.iter().map(|id| nodes[id.0].value.cols()).sum();
            let mut off = 0;
            for id in xs {
                let w = nodes[id.0].value.cols();
                acc(nodes, grads, *id, |g| {
                    for r in 0..n {
                        for p in 0..w {
                            g[r * w + p] += gout[r * total + off + p];
                        }
                    }
                });
                off += w;
            }
        }
        Op::SliceRows { x, lo } => {
            let m = nodes[x.0].value.cols();
            let start = lo * m;
            acc(nodes, grads, *x, |g| {
                for (p, &u) in gout.iter().enumerate() {
                    g[start + p] += u;
                }
            });
        }
        Op::SliceCols { x, lo } => {
            let tx = &nodes[x.0].value;
            let (m, w) = (tx.cols(), nodes[i].value.cols());
            acc(nodes, grads, *x, |g| {
                for r in 0..tx.rows() {
                    for p in 0..w {
                        g[r * m + lo + p] += gout[r * w + p];
                    }
                }
            });
        }
        Op::CrossEntropyRows { logits, targets, probs } => {
            let m = nodes[logits.0].value.cols();
            let n = targets.len();
            let scale = gout[0] / n as f64;
            acc(nodes, grads, *logits, |g| {
                for (p, &pr) in probs.iter().enumerate() {
                    g[p] += scale * pr;
                }
                for (r, &t) in targets.iter().enumerate() {
                    g[r * m + t] -= scale;
                }
            });
        }
        Op::PairwiseDist { x, y, metric } => {
            let tx = &nodes[x.0].value;
            let ty = &nodes[y.0].value;
            let d = &nodes[i].value;
            let (n, m, k) = (tx.rows(), ty.rows(), tx.cols());
            match metric {
                DistanceMetric::Euclidean => {
                    // dD/dx_i = (x_i - y_j) / D_ij; zero at coincident points.
                    let mut dx = vec![0.0; tx.numel()];
                    let mut dy = vec![0.0; ty.numel()];
                    for a in 0..n {
                        for b in 0..m {
                            let dist = d.data()[a * m + b];
                            if dist == 0.0 {
                                continue;
                            }
                            let u = gout[a * m + b] / dist;
                            for p in 0..k {
                                let diff = tx.data()[a * k + p] - ty.data()[b * k + p];
                                dx[a * k + p] += u * diff;
                                dy[b * k + p] -= u * diff;
                            }
                        }
                    }
                    acc(nodes, grads, *x, |g| {
                        for (o, &u) in g.iter_mut().zip(&dx) {
                            *o += u;
                        }
                    });
                    acc(nodes, grads, *y, |g| {
                        for (o, &u) in g.iter_mut().zip(&dy) {
                            *o += u;
                        }
                    });
                }
                DistanceMetric::Cosine => {
                    let mut dx = vec![0.0; tx.numel()];
                    let mut dy = vec![0.0; ty.numel()];
                    for a in 0..n {
                        let u = tx.row(a);
                        let nu: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                        for b in 0..m {
                            let w = ty.row(b);
                            let nw: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                            if nu == 0.0 || nw == 0.0 {
                                continue;
                            }
                            let dot: f64 = u.iter().zip(w).map(|(a, b)| a * b).sum();
                            let go = gout[a * m + b];
                            for p in 0..k {
                                dx[a * k + p] -=
                                    go * (w[p] / (nu * nw) - dot * u[p] / (nu * nu * nu * nw));
                                dy[b * k + p] -=
                                    go * (u[p] / (nu * nw) - dot * w[p] / (nw * nw * nw * nu));
                            }
                        }
                    }
                    acc(nodes, grads, *x, |g| {
                        for (o, &u) in g.iter_mut().zip(&dx) {
                            *o += u;
                        }
                    });
                    acc(nodes, grads, *y, |g| {
                        for (o, &u) in g.iter_mut().zip(&dy) {
                            *o += u;
                        }
                    });
                }
            }
        }
        Op::MinRows { x, argmin } => {
            let m = nodes[x.0].value.cols();
            acc(nodes, grads, *x, |g| {
                for (r, &j) in argmin.iter().enumerate() {
                    g[r * m + j] += gout[r];
                }
            });
        }
        Op::MaxAll { x, argmax } => {
            acc(nodes, grads, *x, |g| {
                g[*argmax] += gout[0];
            });
        }
        Op::SumAll(x) => {
            acc(nodes, grads, *x, |g| {
                for o in g.iter_mut() {
                    *o += gout[0];
                }
            });
        }
        Op::MeanAll(x) => {
            let n = nodes[x.0].value.numel() as f64;
            acc(nodes, grads, *x, |g| {
                for o in g.iter_mut() {
                    *o += gout[0] / n;
                }
            });
        }
        Op::MeanRows(x) => {
            let tx = &nodes[x.0].value;
            let (n, m) = (tx.rows(), tx.cols());
            acc(nodes, grads, *x, |g| {
                for (p, o) in g.iter_mut().enumerate() {
                    *o += gout[p % m] / n as f64;
                }
            });
        }
        Op::FreeBitsFloor { x, r } => {
            let xv = nodes[x.0].value.as_scalar();
            if xv > *r {
                acc(nodes, grads, *x, |g| {
                    g[0] += gout[0];
                });
            }
        }
    }
}
