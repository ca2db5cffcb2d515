//! Reverse-mode automatic differentiation over a bounded matrix op set.
//!
//! Operations are recorded on a [`Tape`] in topological order during the
//! forward pass; [`Tape::grad`] walks the tape backwards and accumulates
//! gradients for every named parameter reachable from the loss node.

use std::collections::BTreeMap;

use super::mat::{logsumexp, softmax_into, Mat};
use super::store::ParamStore;
use super::TensorError;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    /// `(m,n) + (1,n)` broadcast over rows.
    AddRowVec(NodeId, NodeId),
    /// `(m,n) - (m,1)` broadcast over columns.
    SubColVec(NodeId, NodeId),
    /// Elementwise product with a `1x1` node.
    MulScalarNode(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Clamp(NodeId, f64, f64),
    SoftmaxRows(NodeId),
    LogSumExpRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    GatherCols(NodeId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::AddRowVec(..) => "add_row_vec",
            Op::SubColVec(..) => "sub_col_vec",
            Op::MulScalarNode(..) => "mul_scalar",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Clamp(..) => "clamp",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSumExpRows(..) => "logsumexp_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::GatherCols(..) => "gather_cols",
        }
    }
}

struct Node {
    value: Mat,
    op: Op,
}

/// Forward-pass recorder. Node ids are valid only for the tape that issued them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    pub fn item(&self, id: NodeId) -> f64 {
        self.nodes[id].value.item()
    }

    pub fn constant(&mut self, m: Mat) -> NodeId {
        self.push(m, Op::Leaf)
    }

    pub fn constant_row(&mut self, v: &[f64]) -> NodeId {
        self.constant(Mat::row(v.to_vec()))
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Mat::scalar(v))
    }

    /// Bind a named parameter from the store. Repeated binds of the same name
    /// return the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let id = self.push(value, Op::Leaf);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x + c);
        self.push(v, Op::AddConst(a))
    }

    pub fn add_row_vec(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (am, bm) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(bm.rows, 1, "add_row_vec rhs must be 1 x n");
        assert_eq!(am.cols, bm.cols, "add_row_vec width mismatch");
        let mut v = am.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                *v.at_mut(r, c) += bm.at(0, c);
            }
        }
        self.push(v, Op::AddRowVec(a, b))
    }

    pub fn sub_col_vec(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (am, bm) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(bm.cols, 1, "sub_col_vec rhs must be m x 1");
        assert_eq!(am.rows, bm.rows, "sub_col_vec height mismatch");
        let mut v = am.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                *v.at_mut(r, c) -= bm.at(r, 0);
            }
        }
        self.push(v, Op::SubColVec(a, b))
    }

    pub fn mul_scalar_node(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.nodes[s].value.len(), 1, "scalar node must be 1x1");
        let sv = self.nodes[s].value.item();
        let v = self.nodes[a].value.map(|x| x * sv);
        self.push(v, Op::MulScalarNode(a, s))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let am = &self.nodes[a].value;
        let mut v = Mat::zeros(am.rows, am.cols);
        for r in 0..am.rows {
            let row = am.row_slice(r).to_vec();
            softmax_into(&row, &mut v.data[r * am.cols..(r + 1) * am.cols]);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise log-sum-exp, producing an `m x 1` column.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let am = &self.nodes[a].value;
        let mut v = Mat::zeros(am.rows, 1);
        for r in 0..am.rows {
            v.data[r] = logsumexp(am.row_slice(r));
        }
        self.push(v, Op::LogSumExpRows(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.data.iter().sum();
        self.push(Mat::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let m = &self.nodes[a].value;
        let s: f64 = m.data.iter().sum::<f64>() / m.len() as f64;
        self.push(Mat::scalar(s), Op::Mean(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0]].value.rows;
        let cols: usize = parts.iter().map(|&p| self.nodes[p].value.cols).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pm = &self.nodes[p].value;
            assert_eq!(pm.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                for c in 0..pm.cols {
                    *v.at_mut(r, off + c) = pm.at(r, c);
                }
            }
            off += pm.cols;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0]].value.cols;
        let rows: usize = parts.iter().map(|&p| self.nodes[p].value.rows).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pm = &self.nodes[p].value;
            assert_eq!(pm.cols, cols, "concat_rows col mismatch");
            v.data[off * cols..(off + pm.rows) * cols].copy_from_slice(&pm.data);
            off += pm.rows;
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let am = &self.nodes[a].value;
        let mut v = Mat::zeros(idx.len(), am.cols);
        for (k, &i) in idx.iter().enumerate() {
            assert!(i < am.rows, "gather_rows index out of range");
            v.data[k * am.cols..(k + 1) * am.cols].copy_from_slice(am.row_slice(i));
        }
        self.push(v, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn gather_cols(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let am = &self.nodes[a].value;
        let mut v = Mat::zeros(am.rows, idx.len());
        for r in 0..am.rows {
            for (k, &c) in idx.iter().enumerate() {
                assert!(c < am.cols, "gather_cols index out of range");
                *v.at_mut(r, k) = am.at(r, c);
            }
        }
        self.push(v, Op::GatherCols(a, idx.to_vec()))
    }

    /// Reverse pass from a scalar loss. Returns gradients for every named
    /// parameter bound on this tape. Errs if any recorded value is non-finite.
    pub fn grad(&self, loss: NodeId) -> Result<BTreeMap<String, Mat>, TensorError> {
        let lm = &self.nodes[loss].value;
        if lm.len() != 1 {
            return Err(TensorError::DimMismatch {
                what: "loss must be scalar".into(),
            });
        }
        for node in &self.nodes {
            if !node.value.all_finite() {
                return Err(TensorError::NonFinite {
                    op: node.op.name().to_string(),
                });
            }
        }

        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Mat::scalar(1.0));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let acc = |grads: &mut Vec<Option<Mat>>, target: NodeId, delta: Mat| {
                match &mut grads[target] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let bt = self.nodes[*b].value.transpose();
                    let at = self.nodes[*a].value.transpose();
                    acc(&mut grads, *a, g.matmul(&bt));
                    acc(&mut grads, *b, at.matmul(&g));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let da = g.zip(&self.nodes[*b].value, |gv, bv| gv * bv);
                    let db = g.zip(&self.nodes[*a].value, |gv, av| gv * av);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Div(a, b) => {
                    let bm = &self.nodes[*b].value;
                    let am = &self.nodes[*a].value;
                    let da = g.zip(bm, |gv, bv| gv / bv);
                    let mut db = g.zip(am, |gv, av| gv * av);
                    db = db.zip(bm, |x, bv| -x / (bv * bv));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.map(|x| x * c)),
                Op::AddConst(a) => acc(&mut grads, *a, g),
                Op::AddRowVec(a, b) => {
                    let mut db = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            db.data[c] += g.at(r, c);
                        }
                    }
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *b, db);
                }
                Op::SubColVec(a, b) => {
                    let mut db = Mat::zeros(g.rows, 1);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            db.data[r] -= g.at(r, c);
                        }
                    }
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *b, db);
                }
                Op::MulScalarNode(a, s) => {
                    let sv = self.nodes[*s].value.item();
                    let ds = g.dot(&self.nodes[*a].value);
                    acc(&mut grads, *a, g.map(|x| x * sv));
                    acc(&mut grads, *s, Mat::scalar(ds));
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[id].value;
                    acc(&mut grads, *a, g.zip(y, |gv, yv| gv * (1.0 - yv * yv)));
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[id].value;
                    acc(&mut grads, *a, g.zip(y, |gv, yv| gv * yv * (1.0 - yv)));
                }
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    acc(&mut grads, *a, g.zip(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
                }
                Op::Exp(a) => {
                    let y = &self.nodes[id].value;
                    acc(&mut grads, *a, g.zip(y, |gv, yv| gv * yv));
                }
                Op::Ln(a) => {
                    let x = &self.nodes[*a].value;
                    acc(&mut grads, *a, g.zip(x, |gv, xv| gv / xv));
                }
                Op::Sqrt(a) => {
                    let y = &self.nodes[id].value;
                    acc(&mut grads, *a, g.zip(y, |gv, yv| gv / (2.0 * yv)));
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &self.nodes[*a].value;
                    let da = g.zip(x, |gv, xv| if xv > *lo && xv < *hi { gv } else { 0.0 });
                    acc(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[id].value;
                    let mut da = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row_slice(r);
                        let gr = g.row_slice(r);
                        let inner: f64 = yr.iter().zip(gr.iter()).map(|(&yv, &gv)| yv * gv).sum();
                        for c in 0..y.cols {
                            da.data[r * y.cols + c] = yr[c] * (gr[c] - inner);
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::LogSumExpRows(a) => {
                    let am = &self.nodes[*a].value;
                    let mut da = Mat::zeros(am.rows, am.cols);
                    for r in 0..am.rows {
                        let mut sm = vec![0.0; am.cols];
                        softmax_into(am.row_slice(r), &mut sm);
                        for c in 0..am.cols {
                            da.data[r * am.cols + c] = g.at(r, 0) * sm[c];
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let am = &self.nodes[*a].value;
                    acc(&mut grads, *a, Mat::from_vec(am.rows, am.cols, vec![g.item(); am.len()]));
                }
                Op::Mean(a) => {
                    let am = &self.nodes[*a].value;
                    let gv = g.item() / am.len() as f64;
                    acc(&mut grads, *a, Mat::from_vec(am.rows, am.cols, vec![gv; am.len()]));
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let pm = (self.nodes[p].value.rows, self.nodes[p].value.cols);
                        let mut dp = Mat::zeros(pm.0, pm.1);
                        for r in 0..pm.0 {
                            for c in 0..pm.1 {
                                *dp.at_mut(r, c) = g.at(r, off + c);
                            }
                        }
                        off += pm.1;
                        acc(&mut grads, p, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let pm = (self.nodes[p].value.rows, self.nodes[p].value.cols);
                        let mut dp = Mat::zeros(pm.0, pm.1);
                        dp.data
                            .copy_from_slice(&g.data[off * pm.1..(off + pm.0) * pm.1]);
                        off += pm.0;
                        acc(&mut grads, p, dp);
                    }
                }
                Op::GatherRows(a, idx) => {
                    let am = &self.nodes[*a].value;
                    let mut da = Mat::zeros(am.rows, am.cols);
                    for (k, &i) in idx.iter().enumerate() {
                        for c in 0..am.cols {
                            *da.at_mut(i, c) += g.at(k, c);
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::GatherCols(a, idx) => {
                    let am = &self.nodes[*a].value;
                    let mut da = Mat::zeros(am.rows, am.cols);
                    for r in 0..am.rows {
                        for (k, &c) in idx.iter().enumerate() {
                            *da.at_mut(r, c) += g.at(r, k);
                        }
                    }
                    acc(&mut grads, *a, da);
                }
            }
        }

        let mut out = BTreeMap::new();
        for (name, &id) in &self.params {
            let m = &self.nodes[id].value;
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => Mat::zeros(m.rows, m.cols),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::store::ParamStore;

    fn store_with(name: &str, m: Mat) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, m);
        s
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let store = store_with("w", Mat::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w");
        let loss = tape.sum(w);
        let grads = tape.grad(loss).unwrap();
        assert_eq!(grads["w"], Mat::from_vec(2, 3, vec![1.0; 6]));
    }

    #[test]
    fn grad_of_constant_loss_is_zero() {
        let store = store_with("w", Mat::row(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let _w = tape.param(&store, "w");
        let loss = tape.scalar(5.0);
        let grads = tape.grad(loss).unwrap();
        assert_eq!(grads["w"], Mat::zeros(1, 2));
    }

    #[test]
    fn shared_param_accumulates() {
        // loss = sum(w) + sum(w*w) -> dloss/dw = 1 + 2w
        let store = store_with("w", Mat::row(vec![2.0, -3.0]));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w");
        let w2 = tape.mul(w, w);
        let s1 = tape.sum(w);
        let s2 = tape.sum(w2);
        let loss = tape.add(s1, s2);
        let grads = tape.grad(loss).unwrap();
        assert_eq!(grads["w"], Mat::row(vec![5.0, -5.0]));
    }

    #[test]
    fn non_finite_reports_op() {
        let store = store_with("w", Mat::row(vec![-1.0]));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w");
        let l = tape.ln(w); // ln(-1) = NaN
        let loss = tape.sum(l);
        let err = tape.grad(loss).unwrap_err();
        match err {
            TensorError::NonFinite { op } => assert_eq!(op, "ln"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn matmul_grad_matches_manual() {
        // loss = sum(a @ b); d/da = ones @ b^T, d/db = a^T @ ones
        let mut store = ParamStore::new();
        store.insert("a", Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        store.insert("b", Mat::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]));
        let mut tape = Tape::new();
        let a = tape.param(&store, "a");
        let b = tape.param(&store, "b");
        let y = tape.matmul(a, b);
        let loss = tape.sum(y);
        let grads = tape.grad(loss).unwrap();
        assert_eq!(grads["a"], Mat::from_vec(2, 2, vec![11.0, 15.0, 11.0, 15.0]));
        assert_eq!(grads["b"], Mat::from_vec(2, 2, vec![4.0, 4.0, 6.0, 6.0]));
    }
}
