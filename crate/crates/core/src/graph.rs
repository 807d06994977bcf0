//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every forward operation as a node; `backward` walks
//! the tape in reverse and accumulates gradients for each node. Only the ops
//! the model needs are provided.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

// Some fields are consumed at construction time only (the value is computed
// eagerly); they stay on the variant to document the node.
#[allow(dead_code)]
#[derive(Debug, Clone)]
enum Op {
    /// Trainable input; gradients are collected for it.
    Leaf,
    /// Non-trainable input; no gradient is propagated past it.
    Const,
    Add(NodeId, NodeId),
    /// `(n, d) + (1, d)` broadcast over rows.
    AddBroadcastRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `(n, m) * (n, 1)` broadcast over columns.
    MulBroadcastCol(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    /// `a * b^T`.
    MatMulNT(NodeId, NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Sigmoid(NodeId),
    Relu(NodeId),
    Log(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    /// Row `i` of the output is row `indices[i]` of the table.
    GatherRows {
        table: NodeId,
        indices: Vec<usize>,
    },
    MeanRows(NodeId),
    SumAll(NodeId),
    /// Column `j` of the input is accumulated into column `map[j]` of a
    /// `width`-column output.
    ScatterSumCols {
        x: NodeId,
        map: Vec<usize>,
        width: usize,
    },
    /// Zero padding on the right up to `width` columns.
    PadCols {
        x: NodeId,
        width: usize,
    },
    /// Output `(n, 1)` with entry `r` equal to `x[r, cols[r]]`.
    GatherColPerRow {
        x: NodeId,
        cols: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn add_broadcast_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (n, d) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, d), "broadcast row shape mismatch");
        let mut out = self.value(a).clone();
        for r in 0..n {
            for c in 0..d {
                let v = out.get(r, c) + self.value(row).get(0, c);
                out.set(r, c, v);
            }
        }
        self.push(out, Op::AddBroadcastRow(a, row))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape mismatch");
        let mut out = self.value(a).clone();
        for (x, y) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *x *= *y;
        }
        self.push(out, Op::Mul(a, b))
    }

    pub fn mul_broadcast_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (n, m) = self.value(a).shape();
        assert_eq!(self.value(col).shape(), (n, 1), "broadcast col shape mismatch");
        let mut out = self.value(a).clone();
        for r in 0..n {
            let s = self.value(col).get(r, 0);
            for c in 0..m {
                out.set(r, c, out.get(r, c) * s);
            }
        }
        self.push(out, Op::MulBroadcastCol(a, col))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.scale_in_place(c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v += c;
        }
        self.push(out, Op::AddScalar(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).matmul_nt(self.value(b));
        self.push(out, Op::MatMulNT(a, b))
    }

    /// Row-wise softmax with max subtraction. Disallowed positions should be
    /// masked beforehand by adding a large negative constant.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            crate::nn::softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (n, d) = self.value(x).shape();
        assert_eq!(self.value(gain).shape(), (1, d), "layer norm gain shape");
        assert_eq!(self.value(bias).shape(), (1, d), "layer norm bias shape");
        let mut out = Tensor::zeros(n, d);
        for r in 0..n {
            let row = self.value(x).row(r);
            let g = self.value(gain).row(0);
            let b = self.value(bias).row(0);
            let normed = crate::nn::layer_norm(row, g, b);
            out.row_mut(r).copy_from_slice(&normed);
        }
        self.push(out, Op::LayerNorm { x, gain, bias })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = v.ln();
        }
        self.push(out, Op::Log(a))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, da) = self.value(a).shape();
        let (nb, db) = self.value(b).shape();
        assert_eq!(n, nb, "concat row count mismatch");
        let mut out = Tensor::zeros(n, da + db);
        for r in 0..n {
            out.row_mut(r)[..da].copy_from_slice(self.value(a).row(r));
            out.row_mut(r)[da..].copy_from_slice(self.value(b).row(r));
        }
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (n, d) = self.value(x).shape();
        assert!(start + len <= d, "column slice out of range");
        let mut out = Tensor::zeros(n, len);
        for r in 0..n {
            out.row_mut(r).copy_from_slice(&self.value(x).row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start, len })
    }

    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let (rows, d) = self.value(table).shape();
        let mut out = Tensor::zeros(indices.len(), d);
        for (r, &i) in indices.iter().enumerate() {
            assert!(i < rows, "gather index out of range");
            out.row_mut(r).copy_from_slice(self.value(table).row(i));
        }
        self.push(
            out,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (n, d) = self.value(a).shape();
        assert!(n > 0, "mean over zero rows");
        let mut out = Tensor::zeros(1, d);
        for r in 0..n {
            for c in 0..d {
                out.set(0, c, out.get(0, c) + self.value(a).get(r, c));
            }
        }
        out.scale_in_place(1.0 / n as f64);
        self.push(out, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::SumAll(a))
    }

    pub fn scatter_sum_cols(&mut self, x: NodeId, map: &[usize], width: usize) -> NodeId {
        let (n, m) = self.value(x).shape();
        assert_eq!(map.len(), m, "scatter map length mismatch");
        let mut out = Tensor::zeros(n, width);
        for r in 0..n {
            for (j, &target) in map.iter().enumerate() {
                assert!(target < width, "scatter target out of range");
                out.set(r, target, out.get(r, target) + self.value(x).get(r, j));
            }
        }
        self.push(
            out,
            Op::ScatterSumCols {
                x,
                map: map.to_vec(),
                width,
            },
        )
    }

    pub fn pad_cols(&mut self, x: NodeId, width: usize) -> NodeId {
        let (n, m) = self.value(x).shape();
        assert!(width >= m, "pad width smaller than input");
        let mut out = Tensor::zeros(n, width);
        for r in 0..n {
            out.row_mut(r)[..m].copy_from_slice(self.value(x).row(r));
        }
        self.push(out, Op::PadCols { x, width })
    }

    pub fn gather_col_per_row(&mut self, x: NodeId, cols: &[usize]) -> NodeId {
        let (n, m) = self.value(x).shape();
        assert_eq!(cols.len(), n, "per-row column index length mismatch");
        let mut out = Tensor::zeros(n, 1);
        for (r, &c) in cols.iter().enumerate() {
            assert!(c < m, "per-row column index out of range");
            out.set(r, 0, self.value(x).get(r, c));
        }
        self.push(
            out,
            Op::GatherColPerRow {
                x,
                cols: cols.to_vec(),
            },
        )
    }

    /// Gradients of a scalar node with respect to every node on the tape.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_vec(1, 1, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(grads: &mut [Option<Tensor>], target: NodeId, delta: Tensor) {
        match &mut grads[target.0] {
            Some(t) => t.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Op::AddBroadcastRow(a, row) => {
                Self::accumulate(grads, *a, g.clone());
                let (n, d) = g.shape();
                let mut gr = Tensor::zeros(1, d);
                for r in 0..n {
                    for c in 0..d {
                        gr.set(0, c, gr.get(0, c) + g.get(r, c));
                    }
                }
                Self::accumulate(grads, *row, gr);
            }
            Op::Mul(a, b) => {
                let mut ga = g.clone();
                for (x, y) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                    *x *= *y;
                }
                let mut gb = g.clone();
                for (x, y) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *x *= *y;
                }
                Self::accumulate(grads, *a, ga);
                Self::accumulate(grads, *b, gb);
            }
            Op::MulBroadcastCol(a, col) => {
                let (n, m) = g.shape();
                let mut ga = g.clone();
                for r in 0..n {
                    let s = self.value(*col).get(r, 0);
                    for c in 0..m {
                        ga.set(r, c, ga.get(r, c) * s);
                    }
                }
                let mut gc = Tensor::zeros(n, 1);
                for r in 0..n {
                    let mut acc = 0.0;
                    for c in 0..m {
                        acc += g.get(r, c) * self.value(*a).get(r, c);
                    }
                    gc.set(r, 0, acc);
                }
                Self::accumulate(grads, *a, ga);
                Self::accumulate(grads, *col, gc);
            }
            Op::Scale(a, c) => {
                let mut ga = g.clone();
                ga.scale_in_place(*c);
                Self::accumulate(grads, *a, ga);
            }
            Op::AddScalar(a, _) => {
                Self::accumulate(grads, *a, g.clone());
            }
            Op::MatMul(a, b) => {
                let ga = g.matmul_nt(self.value(*b));
                let gb = self.value(*a).matmul_tn(g);
                Self::accumulate(grads, *a, ga);
                Self::accumulate(grads, *b, gb);
            }
            Op::MatMulNT(a, b) => {
                // c = a b^T: da = g b, db = g^T a.
                let ga = g.matmul(self.value(*b));
                let gb = g.matmul_tn(self.value(*a));
                Self::accumulate(grads, *a, ga);
                Self::accumulate(grads, *b, gb);
            }
            Op::SoftmaxRows(a) => {
                let p = &node.value;
                let (n, m) = p.shape();
                let mut ga = Tensor::zeros(n, m);
                for r in 0..n {
                    let dot: f64 = (0..m).map(|c| g.get(r, c) * p.get(r, c)).sum();
                    for c in 0..m {
                        ga.set(r, c, p.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                Self::accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (n, d) = g.shape();
                let xs = self.value(*x);
                let gvec = self.value(*gain);
                let mut gx = Tensor::zeros(n, d);
                let mut ggain = Tensor::zeros(1, d);
                let mut gbias = Tensor::zeros(1, d);
                for r in 0..n {
                    let row = xs.row(r);
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    // Gradient through y = xhat * gain + bias.
                    let gy = g.row(r);
                    for c in 0..d {
                        ggain.set(0, c, ggain.get(0, c) + gy[c] * xhat[c]);
                        gbias.set(0, c, gbias.get(0, c) + gy[c]);
                    }
                    let gxhat: Vec<f64> = (0..d).map(|c| gy[c] * gvec.get(0, c)).collect();
                    let mean_gxhat = gxhat.iter().sum::<f64>() / d as f64;
                    let mean_gxhat_xhat =
                        gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for c in 0..d {
                        let v = inv_std * (gxhat[c] - mean_gxhat - xhat[c] * mean_gxhat_xhat);
                        gx.set(r, c, v);
                    }
                }
                Self::accumulate(grads, *x, gx);
                Self::accumulate(grads, *gain, ggain);
                Self::accumulate(grads, *bias, gbias);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let mut ga = g.clone();
                for (v, s) in ga.data_mut().iter_mut().zip(y.data()) {
                    *v *= s * (1.0 - s);
                }
                Self::accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                for (v, x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if *x <= 0.0 {
                        *v = 0.0;
                    }
                }
                Self::accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let mut ga = g.clone();
                for (v, x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *v /= *x;
                }
                Self::accumulate(grads, *a, ga);
            }
            Op::ConcatCols(a, b) => {
                let (n, da) = self.value(*a).shape();
                let (_, db) = self.value(*b).shape();
                let mut ga = Tensor::zeros(n, da);
                let mut gb = Tensor::zeros(n, db);
                for r in 0..n {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..da]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[da..]);
                }
                Self::accumulate(grads, *a, ga);
                Self::accumulate(grads, *b, gb);
            }
            Op::SliceCols { x, start, len } => {
                let (n, d) = self.value(*x).shape();
                let mut gx = Tensor::zeros(n, d);
                for r in 0..n {
                    gx.row_mut(r)[*start..*start + *len].copy_from_slice(g.row(r));
                }
                Self::accumulate(grads, *x, gx);
            }
            Op::GatherRows { table, indices } => {
                let (rows, d) = self.value(*table).shape();
                let mut gt = Tensor::zeros(rows, d);
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..d {
                        gt.set(i, c, gt.get(i, c) + g.get(r, c));
                    }
                }
                Self::accumulate(grads, *table, gt);
            }
            Op::MeanRows(a) => {
                let (n, d) = self.value(*a).shape();
                let mut ga = Tensor::zeros(n, d);
                for r in 0..n {
                    for c in 0..d {
                        ga.set(r, c, g.get(0, c) / n as f64);
                    }
                }
                Self::accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let (n, d) = self.value(*a).shape();
                Self::accumulate(grads, *a, Tensor::filled(n, d, g.get(0, 0)));
            }
            Op::ScatterSumCols { x, map, .. } => {
                let (n, m) = self.value(*x).shape();
                let mut gx = Tensor::zeros(n, m);
                for r in 0..n {
                    for (j, &target) in map.iter().enumerate() {
                        gx.set(r, j, g.get(r, target));
                    }
                }
                Self::accumulate(grads, *x, gx);
            }
            Op::PadCols { x, .. } => {
                let (n, m) = self.value(*x).shape();
                let mut gx = Tensor::zeros(n, m);
                for r in 0..n {
                    gx.row_mut(r).copy_from_slice(&g.row(r)[..m]);
                }
                Self::accumulate(grads, *x, gx);
            }
            Op::GatherColPerRow { x, cols } => {
                let (n, m) = self.value(*x).shape();
                let mut gx = Tensor::zeros(n, m);
                for (r, &c) in cols.iter().enumerate() {
                    gx.set(r, c, g.get(r, 0));
                }
                Self::accumulate(grads, *x, gx);
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node. Nodes the loss does not
    /// depend on get a zero gradient of the right shape.
    pub fn get(&self, graph: &Graph, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => {
                let (r, c) = graph.value(id).shape();
                Tensor::zeros(r, c)
            }
        }
    }
}
