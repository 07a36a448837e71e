//! A small reverse-mode tape over dense row-major matrices.
//!
//! Only the operations the encoder, codec and diffusion backbone need are
//! provided. Every node holds its forward value; [`Graph::backward`] walks the
//! tape once in reverse and skips nodes that cannot reach a trainable leaf.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};
use statrs::function::erf::erf;

use super::params::{ParamId, ParamStore};
use super::Mat;
use crate::geometry::dist2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug)]
enum Op {
    Leaf,
    Param { slot: usize, id: ParamId },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Gelu(NodeId),
    LeakyRelu(NodeId, f64),
    SoftmaxRows(NodeId),
    LayerNormRows { x: NodeId, inv_std: Vec<f64> },
    Transpose(NodeId),
    GroupMax { x: NodeId, group: usize, argmax: Vec<usize> },
    GroupMean { x: NodeId, group: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize },
    GatherRows { x: NodeId, idx: Vec<usize> },
    RepeatRows { x: NodeId, each: usize },
    SumSquares { x: NodeId, divisor: f64 },
    Sum(NodeId),
    Chamfer { a: NodeId, b: NodeId, group: usize, a_to_b: Vec<usize>, b_to_a: Vec<usize> },
}

struct Node {
    value: Option<Mat>,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. Parameter leaves borrow their values from the
/// [`ParamStore`]s they come from.
pub struct Graph<'a> {
    nodes: Vec<Node>,
    stores: Vec<&'a ParamStore>,
    param_nodes: HashMap<(usize, ParamId), NodeId>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Output of [`Graph::backward`].
pub struct Grads {
    node_grads: Vec<Option<Mat>>,
    params: Vec<(u64, ParamId, NodeId)>,
}

impl Grads {
    /// Gradient with respect to a node, `None` if it does not influence the
    /// loss through a differentiable path or was created as a constant.
    pub fn wrt(&self, node: NodeId) -> Option<&Mat> {
        self.node_grads[node.0].as_ref()
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (u64, ParamId, &Mat)> {
        self.params
            .iter()
            .filter_map(|&(uid, pid, n)| self.node_grads[n.0].as_ref().map(|g| (uid, pid, g)))
    }
}

fn add_into(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * INV_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn rows_of(m: &Mat, r: usize) -> impl Iterator<Item = [f64; 3]> + '_ {
    (0..r).map(move |i| [m[[i, 0]], m[[i, 1]], m[[i, 2]]])
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            stores: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param { slot, id }) => self.stores[*slot].value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).dim()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[[0, 0]]
    }

    /// Constant leaf; no gradient is tracked for it.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Grads::wrt`].
    pub fn variable(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls for the same tensor
    /// return the same node.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> NodeId {
        let slot = match self.stores.iter().position(|s| s.uid() == store.uid()) {
            Some(s) => s,
            None => {
                self.stores.push(store);
                self.stores.len() - 1
            }
        };
        if let Some(&n) = self.param_nodes.get(&(slot, id)) {
            return n;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param { slot, id },
            needs_grad: !store.is_frozen(),
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert((slot, id), n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a + row`, with the 1xC row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = self.value(a) + self.value(row);
        let ng = self.ng(&[a, row]);
        self.push(v, Op::AddRow(a, row), ng)
    }

    /// `a * row` elementwise, with the 1xC row broadcast over `a`.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = self.value(a) * self.value(row);
        let ng = self.ng(&[a, row]);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a) * k;
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(sigmoid);
        let ng = self.ng(&[a]);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu);
        let ng = self.ng(&[a]);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(&[a]);
        self.push(v, Op::LeakyRelu(a, slope), ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row /= s;
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a);
        let cols = x.ncols() as f64;
        let mut v = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in v.rows_mut() {
            let mean = row.sum() / cols;
            row.mapv_inplace(|x| x - mean);
            let var = row.fold(0.0, |acc, &x| acc + x * x) / cols;
            let is = 1.0 / (var + eps).sqrt();
            row *= is;
            inv_std.push(is);
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::LayerNormRows { x: a, inv_std }, ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        let ng = self.ng(&[a]);
        self.push(v, Op::Transpose(a), ng)
    }

    /// Column-wise max over consecutive blocks of `group` rows.
    pub fn group_max(&mut self, a: NodeId, group: usize) -> NodeId {
        let x = self.value(a);
        let (r, c) = x.dim();
        assert!(group > 0 && r % group == 0, "rows {r} not divisible by group {group}");
        let g = r / group;
        let mut v = Array2::zeros((g, c));
        let mut argmax = vec![0usize; g * c];
        for gi in 0..g {
            for j in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut bi = gi * group;
                for i in gi * group..(gi + 1) * group {
                    let val = x[[i, j]];
                    if val > best {
                        best = val;
                        bi = i;
                    }
                }
                v[[gi, j]] = best;
                argmax[gi * c + j] = bi;
            }
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::GroupMax { x: a, group, argmax }, ng)
    }

    /// Column-wise mean over consecutive blocks of `group` rows.
    pub fn group_mean(&mut self, a: NodeId, group: usize) -> NodeId {
        let x = self.value(a);
        let (r, c) = x.dim();
        assert!(group > 0 && r % group == 0, "rows {r} not divisible by group {group}");
        let v = x
            .to_shape((r / group, group, c))
            .expect("contiguous")
            .mean_axis(Axis(1))
            .expect("non-empty group");
        let ng = self.ng(&[a]);
        self.push(v, Op::GroupMean { x: a, group }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("row counts must match");
        let ng = self.ng(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("column counts must match");
        let ng = self.ng(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(&[a]);
        self.push(v, Op::SliceCols { x: a, start }, ng)
    }

    /// Output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let v = self.value(a).select(Axis(0), idx);
        let ng = self.ng(&[a]);
        self.push(v, Op::GatherRows { x: a, idx: idx.to_vec() }, ng)
    }

    /// Repeats every row `each` times in place (row-major block expansion).
    pub fn repeat_rows(&mut self, a: NodeId, each: usize) -> NodeId {
        let x = self.value(a);
        let (r, c) = x.dim();
        let mut v = Array2::zeros((r * each, c));
        for i in 0..r {
            v.slice_mut(s![i * each..(i + 1) * each, ..])
                .assign(&x.slice(s![i..i + 1, ..]));
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::RepeatRows { x: a, each }, ng)
    }

    /// `sum(a^2) / divisor` as a 1x1 node.
    pub fn sum_squares(&mut self, a: NodeId, divisor: f64) -> NodeId {
        let s = self.value(a).iter().map(|v| v * v).sum::<f64>() / divisor;
        let ng = self.ng(&[a]);
        self.push(Array2::from_elem((1, 1), s), Op::SumSquares { x: a, divisor }, ng)
    }

    /// Mean over all entries of the squared difference.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let n = self.value(d).len() as f64;
        self.sum_squares(d, n)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        let ng = self.ng(&[a]);
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a), ng)
    }

    /// Mean over row blocks of the squared-distance Chamfer distance between
    /// corresponding `group`-row blocks of two Rx3 matrices.
    pub fn chamfer(&mut self, a: NodeId, b: NodeId, group: usize) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        let (r, c) = av.dim();
        assert_eq!(c, 3);
        assert_eq!(bv.dim(), (r, 3));
        assert!(group > 0 && r % group == 0);
        let blocks = r / group;
        let pa: Vec<[f64; 3]> = rows_of(av, r).collect();
        let pb: Vec<[f64; 3]> = rows_of(bv, r).collect();
        let mut a_to_b = vec![0; r];
        let mut b_to_a = vec![0; r];
        let mut total = 0.0;
        for k in 0..blocks {
            let lo = k * group;
            let hi = lo + group;
            let mut cd = 0.0;
            for (dst, src, other) in [(&mut a_to_b, &pa, &pb), (&mut b_to_a, &pb, &pa)] {
                let mut s = 0.0;
                for i in lo..hi {
                    let mut best = (lo, f64::INFINITY);
                    for j in lo..hi {
                        let d = dist2(&src[i], &other[j]);
                        if d < best.1 {
                            best = (j, d);
                        }
                    }
                    dst[i] = best.0;
                    s += best.1;
                }
                // Same summation order as `metrics::chamfer`.
                cd += s / group as f64;
            }
            total += cd;
        }
        let ng = self.ng(&[a, b]);
        self.push(
            Array2::from_elem((1, 1), total / blocks as f64),
            Op::Chamfer {
                a,
                b,
                group,
                a_to_b,
                b_to_a,
            },
            ng,
        )
    }

    /// Reverse pass from a 1x1 node.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let params = self
            .param_nodes
            .iter()
            .map(|(&(slot, pid), &n)| (self.stores[slot].uid(), pid, n))
            .collect();
        Grads {
            node_grads: grads,
            params,
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn backprop_node(&self, idx: usize, gy: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let out = || node.value.as_ref().expect("op node has a value");
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], gy.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], self.value(*a).t().dot(gy));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], gy.clone());
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], gy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], gy.clone());
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], -gy);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], gy * self.value(*b));
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], gy * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], gy.clone());
                }
                if self.wants(*row) {
                    add_into(&mut grads[row.0], gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], gy * self.value(*row));
                }
                if self.wants(*row) {
                    let g = (gy * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    add_into(&mut grads[row.0], g);
                }
            }
            Op::Scale(a, k) => add_into(&mut grads[a.0], gy * *k),
            Op::Sigmoid(a) => {
                let y = out();
                add_into(&mut grads[a.0], gy * &y.mapv(|s| s * (1.0 - s)));
            }
            Op::Gelu(a) => {
                add_into(&mut grads[a.0], gy * &self.value(*a).mapv(gelu_grad));
            }
            Op::LeakyRelu(a, slope) => {
                let d = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { *slope });
                add_into(&mut grads[a.0], gy * &d);
            }
            Op::SoftmaxRows(a) => {
                let y = out();
                let dot = (gy * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                add_into(&mut grads[a.0], y * &(gy - &dot));
            }
            Op::LayerNormRows { x, inv_std } => {
                let y = out();
                let cols = y.ncols() as f64;
                let mut g = Array2::zeros(y.dim());
                for (i, ((mut grow, yrow), gyrow)) in
                    g.rows_mut().into_iter().zip(y.rows()).zip(gy.rows()).enumerate()
                {
                    let mean_g = gyrow.sum() / cols;
                    let mean_gy = gyrow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / cols;
                    for j in 0..grow.len() {
                        grow[j] = inv_std[i] * (gyrow[j] - mean_g - yrow[j] * mean_gy);
                    }
                }
                add_into(&mut grads[x.0], g);
            }
            Op::Transpose(a) => add_into(&mut grads[a.0], gy.t().to_owned()),
            Op::GroupMax { x, group, argmax } => {
                let (r, c) = self.shape(*x);
                let mut g = Array2::zeros((r, c));
                let blocks = r / group;
                for gi in 0..blocks {
                    for j in 0..c {
                        g[[argmax[gi * c + j], j]] += gy[[gi, j]];
                    }
                }
                add_into(&mut grads[x.0], g);
            }
            Op::GroupMean { x, group } => {
                let (r, c) = self.shape(*x);
                let mut g = Array2::zeros((r, c));
                for i in 0..r {
                    for j in 0..c {
                        g[[i, j]] = gy[[i / group, j]] / *group as f64;
                    }
                }
                add_into(&mut grads[x.0], g);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.wants(*p) {
                        add_into(&mut grads[p.0], gy.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    if self.wants(*p) {
                        add_into(&mut grads[p.0], gy.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.shape(*x);
                let mut g = Array2::zeros((r, c));
                g.slice_mut(s![.., *start..*start + gy.ncols()]).assign(gy);
                add_into(&mut grads[x.0], g);
            }
            Op::GatherRows { x, idx } => {
                let mut g = Array2::zeros(self.shape(*x));
                for (i, &src) in idx.iter().enumerate() {
                    let mut row = g.row_mut(src);
                    row += &gy.row(i);
                }
                add_into(&mut grads[x.0], g);
            }
            Op::RepeatRows { x, each } => {
                let (r, c) = self.shape(*x);
                let g = gy
                    .to_shape((r, *each, c))
                    .expect("contiguous")
                    .sum_axis(Axis(1));
                add_into(&mut grads[x.0], g);
            }
            Op::SumSquares { x, divisor } => {
                let k = 2.0 * gy[[0, 0]] / divisor;
                add_into(&mut grads[x.0], self.value(*x) * k);
            }
            Op::Sum(a) => {
                add_into(&mut grads[a.0], Array2::from_elem(self.shape(*a), gy[[0, 0]]));
            }
            Op::Chamfer {
                a,
                b,
                group,
                a_to_b,
                b_to_a,
            } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let r = av.nrows();
                let blocks = (r / group) as f64;
                let k = 2.0 * gy[[0, 0]] / (*group as f64 * blocks);
                let mut ga = Array2::zeros((r, 3));
                let mut gb = Array2::zeros((r, 3));
                for i in 0..r {
                    let j = a_to_b[i];
                    for c in 0..3 {
                        let d = k * (av[[i, c]] - bv[[j, c]]);
                        ga[[i, c]] += d;
                        gb[[j, c]] -= d;
                    }
                    let j = b_to_a[i];
                    for c in 0..3 {
                        let d = k * (bv[[i, c]] - av[[j, c]]);
                        gb[[i, c]] += d;
                        ga[[j, c]] -= d;
                    }
                }
                if self.wants(*a) {
                    add_into(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], gb);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_backward_by_hand() {
        let mut g = Graph::new();
        let a = g.variable(array![[1.0, 2.0]]);
        let b = g.variable(array![[3.0], [4.0]]);
        let y = g.matmul(a, b);
        assert_eq!(g.scalar(y), 11.0);
        let grads = g.backward(y);
        assert_eq!(grads.wrt(a).unwrap(), &array![[3.0, 4.0]]);
        assert_eq!(grads.wrt(b).unwrap(), &array![[1.0], [2.0]]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(array![[1.0, 2.0]]);
        let b = g.variable(array![[1.0, 1.0]]);
        let y = g.mul(a, b);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.wrt(a).is_none());
        assert_eq!(grads.wrt(b).unwrap(), &array![[1.0, 2.0]]);
    }

    #[test]
    fn repeat_and_group_ops() {
        let mut g = Graph::new();
        let a = g.variable(array![[1.0, 2.0], [3.0, 4.0]]);
        let r = g.repeat_rows(a, 2);
        assert_eq!(g.value(r), &array![[1.0, 2.0], [1.0, 2.0], [3.0, 4.0], [3.0, 4.0]]);
        let m = g.group_max(r, 2);
        assert_eq!(g.value(m), &array![[1.0, 2.0], [3.0, 4.0]]);
        let mean = g.group_mean(a, 2);
        assert_eq!(g.value(mean), &array![[2.0, 3.0]]);
        let s = g.sum(r);
        let grads = g.backward(s);
        assert_eq!(grads.wrt(a).unwrap(), &array![[2.0, 2.0], [2.0, 2.0]]);
    }

    #[test]
    fn chamfer_node_matches_metric() {
        use crate::geometry::PointCloud;
        use crate::metrics::chamfer;
        let a = array![[0.0, 0.0, 0.0], [1.0, 0.5, 0.0], [0.2, 0.1, 0.9]];
        let b = array![[0.1, 0.0, 0.0], [1.0, 1.0, 1.0], [0.0, 0.3, 0.7]];
        let mut g = Graph::new();
        let na = g.constant(a.clone());
        let nb = g.constant(b.clone());
        let cd = g.chamfer(na, nb, 3);
        let to_pc = |m: &Mat| PointCloud::new(m.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect());
        assert_eq!(g.scalar(cd), chamfer(&to_pc(&a), &to_pc(&b)).unwrap());
    }
}
