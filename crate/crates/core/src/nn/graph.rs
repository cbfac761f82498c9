use std::collections::HashMap;
use std::sync::Arc;

use super::{Grads, ParamId, ParamStore, SparseRows, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Elu(NodeId),
    Tanh(NodeId),
        Gather { src: NodeId, index: Arc<[usize]> },
    Mix(NodeId, Arc<SparseRows>),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Reshape(NodeId),
    MeanAbsDiff(NodeId, Arc<Tensor>),
    /// Sum over undirected edges, counted in both directions.
    EdgeSq(NodeId, Arc<[(usize, usize)]>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Operation tape. Nodes are appended in evaluation order, so the reverse of
/// insertion order is a valid reverse topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
}

/// Per-node gradients from one backward pass.
#[derive(Debug)]
pub struct NodeGrads(Vec<Option<Vec<f64>>>);

impl NodeGrads {
    pub fn get(&self, n: NodeId) -> Option<&[f64]> {
        self.0[n.0].as_deref()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: {a:?} vs {b:?}"))
}

/// C = A·B (+ beta·C) with explicit strides; C is row-major m×n.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, n: NodeId) -> &Tensor {
        &self.nodes[n.0].value
    }

    pub fn scalar(&self, n: NodeId) -> f64 {
        self.nodes[n.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, n: NodeId) -> bool {
        self.nodes[n.0].requires_grad
    }

    /// Data that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    /// Leaf whose gradient is tracked; used for checking derivatives with
    /// respect to inputs.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, true)
    }

    /// Leaves created with [`Graph::constant`].
    pub fn constants(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Leaf) && !self.nodes[i].requires_grad)
            .map(NodeId)
            .collect()
    }

    /// The parameter's value, recorded once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(Op::Param, store.get(id).clone(), true);
        self.params.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        if vb.rows() != k {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), (k, 1), vb.data(), (n, 1), 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out)?, rg))
    }

    /// x + b with `b` (length C) added to every row of x (N×C).
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(b));
        let c = vx.cols();
        if vb.len() != c {
            return Err(shape_err("add_bias", vx.shape(), vb.shape()));
        }
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(vb.data()).for_each(|(o, b)| *o += b);
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Op::AddBias(x, b), t, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va.shape(), vb.shape()));
        }
        let out = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), t, rg))
    }

    /// Sum of equally shaped nodes, left to right.
    pub fn sum(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::Shape("sum of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.value(a);
        let out = va.data().iter().map(|x| c * x).collect();
        let t = Tensor::new(va.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), t, rg)
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let out = va.data().iter().map(|&x| super::elu(x)).collect();
        let t = Tensor::new(va.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(Op::Elu(a), t, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let out = va.data().iter().map(|x| x.tanh()).collect();
        let t = Tensor::new(va.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(Op::Tanh(a), t, rg)
    }

    /// Output row r concatenates source rows `index[r·width..(r+1)·width]`.
    pub fn gather(&mut self, src: NodeId, index: Arc<[usize]>, width: usize) -> Result<NodeId> {
        let vs = self.value(src);
        let (rows, c) = (vs.rows(), vs.cols());
        if width == 0 || index.len() % width != 0 {
            return Err(Error::Shape(format!(
                "gather: {} indices not a multiple of width {width}",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("gather: index {bad} ≥ {rows} rows")));
        }
        let out_rows = index.len() / width;
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            out.extend_from_slice(vs.row(i));
        }
        let t = Tensor::matrix(out_rows, width * c, out)?;
        let rg = self.rg(src);
        Ok(self.push(Op::Gather { src, index }, t, rg))
    }

    pub fn mix(&mut self, src: NodeId, map: Arc<SparseRows>) -> Result<NodeId> {
        let vs = self.value(src);
        if vs.rows() != map.input_rows {
            return Err(Error::Shape(format!(
                "mix: map expects {} rows, got {}",
                map.input_rows,
                vs.rows()
            )));
        }
        let c = vs.cols();
        let mut out = vec![0.0; map.rows.len() * c];
        for (row, o) in map.rows.iter().zip(out.chunks_mut(c)) {
            for &(j, w) in row {
                o.iter_mut().zip(vs.row(j)).for_each(|(o, x)| *o += w * x);
            }
        }
        let t = Tensor::matrix(map.rows.len(), c, out)?;
        let rg = self.rg(src);
        Ok(self.push(Op::Mix(src, map), t, rg))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(xs[0]).rows();
        if let Some(&bad) = xs.iter().find(|&&x| self.value(x).rows() != rows) {
            return Err(shape_err("concat_cols", self.value(xs[0]).shape(), self.value(bad).shape()));
        }
        let total: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, out)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Op::ConcatCols(xs.to_vec()), t, rg))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let cols = self.value(xs[0]).cols();
        if let Some(&bad) = xs.iter().find(|&&x| self.value(x).cols() != cols) {
            return Err(shape_err("concat_rows", self.value(xs[0]).shape(), self.value(bad).shape()));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &x in xs {
            out.extend_from_slice(self.value(x).data());
            rows += self.value(x).rows();
        }
        let t = Tensor::matrix(rows, cols, out)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Op::ConcatRows(xs.to_vec()), t, rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), t, rg))
    }

    /// mean |a − target| over all entries.
    pub fn mean_abs_diff(&mut self, a: NodeId, target: Arc<Tensor>) -> Result<NodeId> {
        let va = self.value(a);
        if va.len() != target.len() || va.is_empty() {
            return Err(shape_err("mean_abs_diff", va.shape(), target.shape()));
        }
        let s: f64 = va.data().iter().zip(target.data()).map(|(x, t)| (x - t).abs()).sum();
        let t = Tensor::new(vec![1], vec![s / va.len() as f64])?;
        let rg = self.rg(a);
        Ok(self.push(Op::MeanAbsDiff(a, target), t, rg))
    }

    /// Σ_i Σ_{j∈N(i)} ‖a_i − a_j‖² given the undirected edge list.
    pub fn edge_sq(&mut self, a: NodeId, edges: Arc<[(usize, usize)]>) -> Result<NodeId> {
        let va = self.value(a);
        let rows = va.rows();
        if let Some(&(i, j)) = edges.iter().find(|(i, j)| *i >= rows || *j >= rows) {
            return Err(Error::Shape(format!("edge ({i}, {j}) out of {rows} rows")));
        }
        let mut s = 0.0;
        for &(i, j) in edges.iter() {
            s += va
                .row(i)
                .iter()
                .zip(va.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>();
        }
        let t = Tensor::new(vec![1], vec![2.0 * s])?;
        let rg = self.rg(a);
        Ok(self.push(Op::EdgeSq(a, edges), t, rg))
    }

    /// Gradients of a single-element node with respect to every node that
    /// requires one.
    pub fn backward_nodes(&self, loss: NodeId) -> Result<NodeGrads> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backward_op(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(NodeGrads(grads))
    }

    /// Backpropagates from `loss` and adds parameter gradients into `out`.
    pub fn backward(&self, loss: NodeId, out: &mut Grads) -> Result<()> {
        let ng = self.backward_nodes(loss)?;
        for (&id, &n) in &self.params {
            if let Some(g) = ng.get(n) {
                let dst = out.get_mut(id);
                if dst.len() != g.len() {
                    return Err(Error::Shape(format!("gradient buffer for parameter {}", id.0)));
                }
                dst.data_mut().iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Ok(())
    }

    fn backward_op(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.rg(*a) {
                    // dA = dY · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), vb.data(), (1, n), 0.0, &mut da);
                    accumulate(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dY
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), (1, k), g, (n, 1), 0.0, &mut db);
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::AddBias(x, b) => {
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
                if self.rg(*b) {
                    let c = self.value(*b).len();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if self.rg(*x) {
                        accumulate(&mut grads[x.0], g.to_vec());
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.iter().map(|v| c * v).collect());
                }
            }
            Op::Elu(a) => {
                if self.rg(*a) {
                    let x = self.value(*a).data();
                    let d = g
                        .iter()
                        .zip(x.iter().zip(y.data()))
                        .map(|(g, (&x, &y))| g * if x > 0.0 { 1.0 } else { y + 1.0 })
                        .collect();
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::Tanh(a) => {
                if self.rg(*a) {
                    let d = g.iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::Gather { src, index, .. } => {
                if self.rg(*src) {
                    let vs = self.value(*src);
                    let c = vs.cols();
                    let mut d = vec![0.0; vs.len()];
                    for (&i, gr) in index.iter().zip(g.chunks(c)) {
                        d[i * c..(i + 1) * c].iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                    accumulate(&mut grads[src.0], d);
                }
            }
            Op::Mix(src, map) => {
                if self.rg(*src) {
                    let vs = self.value(*src);
                    let c = vs.cols();
                    let mut d = vec![0.0; vs.len()];
                    for (row, gr) in map.rows.iter().zip(g.chunks(c)) {
                        for &(j, w) in row {
                            d[j * c..(j + 1) * c].iter_mut().zip(gr).for_each(|(d, g)| *d += w * g);
                        }
                    }
                    accumulate(&mut grads[src.0], d);
                }
            }
            Op::ConcatCols(xs) => {
                let total = y.cols();
                let mut off = 0;
                for x in xs {
                    let c = self.value(*x).cols();
                    if self.rg(*x) {
                        let d = g.chunks(total).flat_map(|r| r[off..off + c].iter().copied()).collect();
                        accumulate(&mut grads[x.0], d);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for x in xs {
                    let n = self.value(*x).len();
                    if self.rg(*x) {
                        accumulate(&mut grads[x.0], g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::Reshape(a) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
            }
            Op::MeanAbsDiff(a, target) => {
                if self.rg(*a) {
                    let va = self.value(*a);
                    let s = g[0] / va.len() as f64;
                    let d = va
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(x, t)| {
                            let r = x - t;
                            if r > 0.0 {
                                s
                            } else if r < 0.0 {
                                -s
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::EdgeSq(a, edges) => {
                if self.rg(*a) {
                    let va = self.value(*a);
                    let c = va.cols();
                    let mut d = vec![0.0; va.len()];
                    for &(i, j) in edges.iter() {
                        for k in 0..c {
                            let diff = 4.0 * g[0] * (va.data()[i * c + k] - va.data()[j * c + k]);
                            d[i * c + k] += diff;
                            d[j * c + k] -= diff;
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
            }
        }
    }
}
