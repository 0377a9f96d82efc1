//! Reverse-mode automatic differentiation over matrix-valued expressions.
//!
//! A [`Tape`] records each operation as a node referencing strictly earlier
//! nodes, so one reverse sweep propagates adjoints from a scalar root back to
//! every leaf. Ops are matrix-level (matmul, elementwise maps, gathers) — the
//! whole recurrent network builds a few hundred nodes per window instead of
//! millions of scalar ones.
//!
//! Shapes are validated with assertions: callers are internal model code
//! whose shapes are fixed by construction.

use ndarray::{s, Array2};

pub type NodeId = usize;

enum Op {
    Leaf,
    /// Elementwise a + b.
    Add(NodeId, NodeId),
    /// Elementwise a - b.
    Sub(NodeId, NodeId),
    /// Elementwise a * b.
    Mul(NodeId, NodeId),
    /// Matrix product a . b.
    MatMul(NodeId, NodeId),
    /// (n x d) + broadcast (1 x d) row.
    AddRow(NodeId, NodeId),
    /// (n x d) * broadcast (n x 1) column.
    MulCol(NodeId, NodeId),
    /// c * x for a compile-time constant c.
    Scale(NodeId, f64),
    /// x * a + b with constant arrays (elementwise affine map); only the
    /// slope is kept, the intercept is folded into the stored value.
    AffineConst { x: NodeId, a: Array2<f64> },
    Sigmoid(NodeId),
    Tanh(NodeId),
    LeakyRelu(NodeId, f64),
    Elu(NodeId),
    /// max(x, 0) — clamping at zero.
    Relu(NodeId),
    Abs(NodeId),
    /// [a | b] side by side.
    ConcatCols(NodeId, NodeId),
    /// Columns [start, end) of x.
    SliceCols(NodeId, usize, usize),
    /// out[r, :] = x[idx[r], :].
    GatherRows(NodeId, Vec<usize>),
    /// out[idx[r], :] += x[r, :] into a fresh zero matrix.
    ScatterAddRows { x: NodeId, idx: Vec<usize> },
    /// Softmax of a column vector within each contiguous row segment.
    SegmentSoftmax {
        x: NodeId,
        segments: Vec<(usize, usize)>,
    },
    /// 1x1 sum of all entries.
    SumAll(NodeId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Append-only expression recorder; see module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim(), "add shape");
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim(), "sub shape");
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim(), "mul shape");
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.nodes[a].value.ncols(),
            self.nodes[b].value.nrows(),
            "matmul inner dim"
        );
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (n, d) = self.nodes[a].value.dim();
        assert_eq!(self.nodes[row].value.dim(), (1, d), "add_row shape");
        let mut v = self.nodes[a].value.clone();
        for r in 0..n {
            for c in 0..d {
                v[[r, c]] += self.nodes[row].value[[0, c]];
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (n, d) = self.nodes[a].value.dim();
        assert_eq!(self.nodes[col].value.dim(), (n, 1), "mul_col shape");
        let mut v = self.nodes[a].value.clone();
        for r in 0..n {
            let c0 = self.nodes[col].value[[r, 0]];
            for c in 0..d {
                v[[r, c]] *= c0;
            }
        }
        self.push(v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        self.push(v, Op::Scale(a, c))
    }

    /// Elementwise `x * a + b` with constant coefficient arrays.
    pub fn affine_const(&mut self, x: NodeId, a: Array2<f64>, b: Array2<f64>) -> NodeId {
        assert_eq!(self.nodes[x].value.dim(), a.dim(), "affine_const a shape");
        assert_eq!(a.dim(), b.dim(), "affine_const b shape");
        let v = &self.nodes[x].value * &a + &b;
        self.push(v, Op::AffineConst { x, a })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|t| 1.0 / (1.0 + (-t).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let v = self.nodes[x].value.mapv(|t| if t > 0.0 { t } else { slope * t });
        self.push(v, Op::LeakyRelu(x, slope))
    }

    pub fn elu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|t| if t > 0.0 { t } else { t.exp() - 1.0 });
        self.push(v, Op::Elu(x))
    }

    /// Clamp at zero from below.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|t| t.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(f64::abs);
        self.push(v, Op::Abs(x))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, ca) = self.nodes[a].value.dim();
        let (nb, cb) = self.nodes[b].value.dim();
        assert_eq!(n, nb, "concat_cols rows");
        let mut v = Array2::zeros((n, ca + cb));
        v.slice_mut(s![.., ..ca]).assign(&self.nodes[a].value);
        v.slice_mut(s![.., ca..]).assign(&self.nodes[b].value);
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let (_, d) = self.nodes[x].value.dim();
        assert!(start < end && end <= d, "slice_cols range");
        let v = self.nodes[x].value.slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(x, start, end))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<usize>) -> NodeId {
        let (n, d) = self.nodes[x].value.dim();
        assert!(idx.iter().all(|&r| r < n), "gather_rows index");
        let mut v = Array2::zeros((idx.len(), d));
        for (r, &src) in idx.iter().enumerate() {
            for c in 0..d {
                v[[r, c]] = self.nodes[x].value[[src, c]];
            }
        }
        self.push(v, Op::GatherRows(x, idx))
    }

    pub fn scatter_add_rows(&mut self, x: NodeId, idx: Vec<usize>, n_out: usize) -> NodeId {
        let (n, d) = self.nodes[x].value.dim();
        assert_eq!(idx.len(), n, "scatter_add_rows index length");
        assert!(idx.iter().all(|&r| r < n_out), "scatter_add_rows index bound");
        let mut v = Array2::zeros((n_out, d));
        for (r, &dst) in idx.iter().enumerate() {
            for c in 0..d {
                v[[dst, c]] += self.nodes[x].value[[r, c]];
            }
        }
        self.push(v, Op::ScatterAddRows { x, idx })
    }

    /// Softmax of the column vector `x` within each `[start, end)` segment.
    /// Segments must tile the rows exactly, in ascending order.
    pub fn segment_softmax(&mut self, x: NodeId, segments: Vec<(usize, usize)>) -> NodeId {
        let (n, d) = self.nodes[x].value.dim();
        assert_eq!(d, 1, "segment_softmax wants a column");
        let mut cursor = 0;
        for &(start, end) in &segments {
            assert!(start == cursor && end > start, "segments must tile rows");
            cursor = end;
        }
        assert_eq!(cursor, n, "segments must cover all rows");
        let xv = &self.nodes[x].value;
        let mut v = Array2::zeros((n, 1));
        for &(start, end) in &segments {
            let mut m = f64::NEG_INFINITY;
            for r in start..end {
                m = m.max(xv[[r, 0]]);
            }
            let mut z = 0.0;
            for r in start..end {
                let e = (xv[[r, 0]] - m).exp();
                v[[r, 0]] = e;
                z += e;
            }
            for r in start..end {
                v[[r, 0]] /= z;
            }
        }
        self.push(v, Op::SegmentSoftmax { x, segments })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.nodes[x].value.sum());
        self.push(v, Op::SumAll(x))
    }

    /// Reverse sweep from a scalar (1x1) root; returns one adjoint array per
    /// node, indexed by `NodeId`.
    pub fn backward(&self, root: NodeId) -> Vec<Array2<f64>> {
        assert_eq!(self.nodes[root].value.dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Array2<f64>> = self
            .nodes
            .iter()
            .map(|n| Array2::zeros(n.value.dim()))
            .collect();
        grads[root][[0, 0]] = 1.0;
        for id in (0..=root).rev() {
            // Inputs always precede their consumers, so splitting at `id`
            // gives mutable access to every input adjoint.
            let (gin, gout) = grads.split_at_mut(id);
            let g = &gout[0];
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    gin[*a] += g;
                    gin[*b] += g;
                }
                Op::Sub(a, b) => {
                    gin[*a] += g;
                    gin[*b] -= g;
                }
                Op::Mul(a, b) => {
                    gin[*a] += &(g * &self.nodes[*b].value);
                    gin[*b] += &(g * &self.nodes[*a].value);
                }
                Op::MatMul(a, b) => {
                    gin[*a] += &g.dot(&self.nodes[*b].value.t());
                    gin[*b] += &self.nodes[*a].value.t().dot(g);
                }
                Op::AddRow(a, row) => {
                    gin[*a] += g;
                    let (n, d) = g.dim();
                    for r in 0..n {
                        for c in 0..d {
                            gin[*row][[0, c]] += g[[r, c]];
                        }
                    }
                }
                Op::MulCol(a, col) => {
                    let (n, d) = g.dim();
                    let cv = &self.nodes[*col].value;
                    let av = &self.nodes[*a].value;
                    for r in 0..n {
                        for c in 0..d {
                            gin[*a][[r, c]] += g[[r, c]] * cv[[r, 0]];
                            gin[*col][[r, 0]] += g[[r, c]] * av[[r, c]];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    gin[*a] += &(g * *c);
                }
                Op::AffineConst { x, a, .. } => {
                    gin[*x] += &(g * a);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    gin[*x] += &(g * &(y * &y.mapv(|t| 1.0 - t)));
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    gin[*x] += &(g * &y.mapv(|t| 1.0 - t * t));
                }
                Op::LeakyRelu(x, slope) => {
                    let xv = &self.nodes[*x].value;
                    let mask = xv.mapv(|t| if t > 0.0 { 1.0 } else { *slope });
                    gin[*x] += &(g * &mask);
                }
                Op::Elu(x) => {
                    let xv = &self.nodes[*x].value;
                    let deriv = xv.mapv(|t| if t > 0.0 { 1.0 } else { t.exp() });
                    gin[*x] += &(g * &deriv);
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[*x].value;
                    let mask = xv.mapv(|t| if t > 0.0 { 1.0 } else { 0.0 });
                    gin[*x] += &(g * &mask);
                }
                Op::Abs(x) => {
                    let sign = self.nodes[*x].value.mapv(|t| {
                        if t > 0.0 {
                            1.0
                        } else if t < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    gin[*x] += &(g * &sign);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.ncols();
                    gin[*a] += &g.slice(s![.., ..ca]);
                    gin[*b] += &g.slice(s![.., ca..]);
                }
                Op::SliceCols(x, start, end) => {
                    gin[*x].slice_mut(s![.., *start..*end]).zip_mut_with(g, |t, &gv| *t += gv);
                }
                Op::GatherRows(x, idx) => {
                    let d = g.ncols();
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..d {
                            gin[*x][[src, c]] += g[[r, c]];
                        }
                    }
                }
                Op::ScatterAddRows { x, idx, .. } => {
                    let d = g.ncols();
                    for (r, &dst) in idx.iter().enumerate() {
                        for c in 0..d {
                            gin[*x][[r, c]] += g[[dst, c]];
                        }
                    }
                }
                Op::SegmentSoftmax { x, segments } => {
                    let y = &node.value;
                    for &(start, end) in segments {
                        let mut dot = 0.0;
                        for r in start..end {
                            dot += g[[r, 0]] * y[[r, 0]];
                        }
                        for r in start..end {
                            gin[*x][[r, 0]] += y[[r, 0]] * (g[[r, 0]] - dot);
                        }
                    }
                }
                Op::SumAll(x) => {
                    let gv = g[[0, 0]];
                    gin[*x].mapv_inplace(|t| t + gv);
                }
            }
        }
        grads
    }
}
