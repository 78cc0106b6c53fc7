//! Reverse- and forward-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive evaluation in order, so node ids are
//! already a topological order of the computation DAG. [`Tape::backward`]
//! sweeps it once in decreasing id order accumulating cotangents;
//! [`Tape::jvp`] sweeps forward propagating tangents.

mod check;
pub mod ops;

use std::collections::HashMap;
use std::fmt::Write as _;

pub use check::{check_gradient, GradCheck, GradCheckReport, GradEntry};
pub use ops::Op;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    /// Depends on at least one leaf.
    active: bool,
}

/// Memoisation key for block-map evaluations: the map's identity, the
/// instant and batch it ran at, and the node ids it was applied to.
/// Identical keys yield identical subgraphs.
pub(crate) type MemoKey = (usize, [i64; 3], Vec<NodeId>);

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    memo: HashMap<MemoKey, Vec<NodeId>>,
}

/// Cotangents per node; absent entries are zero.
#[derive(Clone, Debug)]
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// The cotangent of `id`, materialising zeros shaped like `like`.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, true)
    }

    /// A constant: no gradient is propagated to it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, Vec::new(), value, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn is_active(&self, id: NodeId) -> bool {
        self.nodes[id.0].active
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, active: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            active,
        });
        id
    }

    fn check_ids(&self, inputs: &[NodeId]) -> Result<()> {
        match inputs.iter().find(|i| i.0 >= self.nodes.len()) {
            Some(bad) => Err(Error::UnknownNode(bad.0)),
            None => Ok(()),
        }
    }

    /// Records `op` applied to `inputs`, computing its value.
    pub fn record(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        self.check_ids(inputs)?;
        if matches!(op, Op::Leaf | Op::Const | Op::Linearized { .. }) {
            return Err(Error::UnknownOp(format!("{} cannot be recorded directly", op.name())));
        }
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            ops::forward(&op, &vals)?
        };
        if !value.is_finite() {
            return Err(Error::NonFiniteValue { op: op.name() });
        }
        let active = inputs.iter().any(|i| self.nodes[i.0].active);
        Ok(self.push(op, inputs.to_vec(), value, active))
    }

    /// Records an op by catalog name with numeric attributes.
    pub fn record_named(&mut self, name: &str, inputs: &[NodeId], attrs: &[f64]) -> Result<NodeId> {
        let op = Op::from_name(name, attrs)?;
        self.record(op, inputs)
    }

    /// Records a node whose value is computed externally and whose local
    /// derivative w.r.t. each input is the given dense Jacobian.
    pub fn linearized(
        &mut self,
        value: Tensor,
        inputs: &[NodeId],
        jacobians: Vec<Tensor>,
    ) -> Result<NodeId> {
        self.check_ids(inputs)?;
        if jacobians.len() != inputs.len() {
            return Err(Error::ShapeMismatch {
                op: "linearized",
                detail: format!("{} jacobians for {} inputs", jacobians.len(), inputs.len()),
            });
        }
        for (j, i) in jacobians.iter().zip(inputs) {
            let want = [value.numel(), self.value(*i).numel()];
            if j.shape() != want {
                return Err(Error::ShapeMismatch {
                    op: "linearized",
                    detail: format!("jacobian {:?}, expected {want:?}", j.shape()),
                });
            }
        }
        let active = inputs.iter().any(|i| self.nodes[i.0].active);
        Ok(self.push(Op::Linearized { jacobians }, inputs.to_vec(), value, active))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<GradStore> {
        self.check_ids(&[root])?;
        let v = self.value(root);
        if v.numel() != 1 {
            return Err(Error::NonScalarRoot(v.shape().to_vec()));
        }
        self.vjp(root, Tensor::from_raw(v.shape().to_vec(), vec![1.0]))
    }

    /// Reverse sweep seeded with an arbitrary cotangent for `root`.
    pub fn vjp(&self, root: NodeId, seed: Tensor) -> Result<GradStore> {
        self.check_ids(&[root])?;
        if seed.shape() != self.value(root).shape() {
            return Err(Error::ShapeMismatch {
                op: "vjp",
                detail: format!("seed {:?} vs root {:?}", seed.shape(), self.value(root).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.active || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let vals: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let parts = ops::backward(&node.op, &vals, &node.value, &g);
            grads[idx] = Some(g);
            for (input, part) in node.inputs.iter().zip(parts) {
                if !self.nodes[input.0].active {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, p) in acc.data_mut().iter_mut().zip(part.data()) {
                            *a += p;
                        }
                    }
                    slot @ None => *slot = Some(part),
                }
            }
        }
        Ok(GradStore { grads })
    }

    /// Forward sweep of directional derivatives. Leaves without a given
    /// tangent get zero; returns one tangent per node.
    pub fn jvp(&self, tangents: &[(NodeId, Tensor)]) -> Result<Vec<Tensor>> {
        let mut seeds: HashMap<usize, &Tensor> = HashMap::new();
        for (id, t) in tangents {
            self.check_ids(&[*id])?;
            if t.shape() != self.value(*id).shape() {
                return Err(Error::ShapeMismatch {
                    op: "jvp",
                    detail: format!("tangent {:?} vs leaf {:?}", t.shape(), self.value(*id).shape()),
                });
            }
            seeds.insert(id.0, t);
        }
        let mut out: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let t = match node.op {
                Op::Leaf | Op::Const => seeds
                    .get(&idx)
                    .map(|t| (*t).clone())
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape())),
                _ if !node.active => Tensor::zeros(node.value.shape()),
                _ => {
                    let vals: Vec<&Tensor> =
                        node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                    let ts: Vec<&Tensor> = node.inputs.iter().map(|i| &out[i.0]).collect();
                    ops::tangent(&node.op, &vals, &node.value, &ts)
                }
            };
            out.push(t);
        }
        Ok(out)
    }

    /// Text listing of the DAG: `id op [inputs] shape`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let ins: Vec<String> = n.inputs.iter().map(|x| x.0.to_string()).collect();
            let _ = writeln!(s, "{i:>6} {:<12} [{}] {:?}", n.op.name(), ins.join(","), n.value.shape());
        }
        s
    }

    pub(crate) fn memo_get(&self, key: &MemoKey) -> Option<Vec<NodeId>> {
        self.memo.get(key).cloned()
    }

    pub(crate) fn memo_put(&mut self, key: MemoKey, value: Vec<NodeId>) {
        self.memo.insert(key, value);
    }
}

macro_rules! unary {
    ($($name:ident => $op:expr),* $(,)?) => {
        impl Tape {
            $(pub fn $name(&mut self, x: NodeId) -> Result<NodeId> { self.record($op, &[x]) })*
        }
    };
}

macro_rules! binary {
    ($($name:ident => $op:expr),* $(,)?) => {
        impl Tape {
            $(pub fn $name(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> { self.record($op, &[a, b]) })*
        }
    };
}

unary! {
    neg => Op::Neg,
    transpose => Op::Transpose,
    sum => Op::Sum { axis: None },
    mean => Op::Mean,
    abs => Op::Abs,
    square => Op::Square,
    sqrt => Op::Sqrt,
    exp => Op::Exp,
    log => Op::Log,
    tanh => Op::Tanh,
    sigmoid => Op::Sigmoid,
    relu => Op::Relu,
    softplus => Op::Softplus,
    max => Op::MaxReduce { axis: None },
    squared_norm => Op::SquaredNorm,
}

binary! {
    add => Op::Add,
    sub => Op::Sub,
    mul => Op::Mul,
    div => Op::Div,
    matmul => Op::Matmul,
    dot => Op::Dot,
}

impl Tape {
    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.record(Op::Scale(c), &[x])
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.record(Op::Sum { axis: Some(axis) }, &[x])
    }

    pub fn max_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.record(Op::MaxReduce { axis: Some(axis) }, &[x])
    }

    pub fn max_const(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.record(Op::MaxConst(c), &[x])
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.record(Op::Clamp { lo, hi }, &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.record(Op::Concat { axis }, xs)
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.record(Op::Slice { axis, start, len }, &[x])
    }

    /// Slice along the trailing axis.
    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let axis = self.value(x).rank().saturating_sub(1);
        self.slice(x, axis, start, len)
    }

    /// Concatenate along the trailing axis.
    pub fn concat_last(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let axis = xs
            .first()
            .map(|x| self.value(*x).rank().saturating_sub(1))
            .unwrap_or(0);
        self.concat(xs, axis)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.record(Op::Reshape(shape), &[x])
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let k = self.scalar(c);
        self.add(x, k)
    }

    /// `c - x`.
    pub fn rsub_scalar(&mut self, c: f64, x: NodeId) -> Result<NodeId> {
        let k = self.scalar(c);
        self.sub(k, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_add_and_matmul_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = t.leaf(Tensor::vector(vec![3.0, 4.0]));
        let s = t.add(a, b).unwrap();
        assert_eq!(t.value(s).data(), &[4.0, 6.0]);

        let m = t.leaf(Tensor::matrix(2, 3, vec![1.0; 6]));
        let x3 = t.leaf(Tensor::vector(vec![1.0; 3]));
        let y = t.matmul(m, x3).unwrap();
        assert_eq!(t.value(y).shape(), &[2]);
        assert!(matches!(t.matmul(m, a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn unknown_op_name() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(1.0));
        assert!(matches!(t.record_named("frobnicate", &[a], &[]), Err(Error::UnknownOp(_))));
        let n = t.record_named("hinge", &[a], &[0.0]).unwrap();
        assert_eq!(t.value(n).item(), 1.0);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = t.square(x).unwrap();
        let f = t.sum(sq).unwrap();
        let g = t.backward(f).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_of_abs_residual() {
        // f(k) = |a - b k| at a=1.02, b=1, k=0.5: gradient is -b = -1.
        let mut t = Tape::new();
        let k = t.leaf(Tensor::scalar(0.5));
        let bk = t.scale(k, 1.0).unwrap();
        let r = t.rsub_scalar(1.02, bk).unwrap();
        let f = t.abs(r).unwrap();
        let g = t.backward(f).unwrap();
        assert_eq!(g.get(k).unwrap().item(), -1.0);

        let fd = ((1.02f64 - 1.0 * (0.5 + 1e-6)).abs() - (1.02f64 - 1.0 * (0.5 - 1e-6)).abs()) / 2e-6;
        assert!((fd + 1.0).abs() < 1e-8);
    }

    #[test]
    fn nonsmooth_policies() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let r = t.relu(x).unwrap();
        assert_eq!(t.backward(r).unwrap().get(x).unwrap().item(), 0.0);
        let a = t.abs(x).unwrap();
        assert_eq!(t.backward(a).unwrap().get(x).unwrap().item(), 0.0);
        let c = t.clamp(x, 0.0, 1.0).unwrap();
        assert_eq!(t.backward(c).unwrap().get(x).unwrap().item(), 0.0);

        let v = t.leaf(Tensor::vector(vec![2.0, 5.0, 5.0, 1.0]));
        let m = t.max(v).unwrap();
        assert_eq!(t.backward(m).unwrap().get(v).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = t.square(x).unwrap();
        assert!(matches!(t.backward(y), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn jvp_square_and_linear() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.square(x).unwrap();
        let tan = t.jvp(&[(x, Tensor::scalar(1.0))]).unwrap();
        assert_eq!(tan[y.index()].item(), 6.0);

        let mut t = Tape::new();
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let am = t.constant(a.clone());
        let x = t.leaf(Tensor::vector(vec![0.3, -0.1]));
        let y = t.matmul(am, x).unwrap();
        let v = Tensor::vector(vec![0.5, 2.0]);
        let tan = t.jvp(&[(x, v)]).unwrap();
        assert_eq!(tan[y.index()].data(), &[0.5 + 4.0, 1.5 + 8.0]);
    }

    #[test]
    fn fan_out_accumulates_exactly() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.3, -1.7, 2.2]));
        let g1 = {
            let a = t.tanh(x).unwrap();
            let b = t.mul(a, x).unwrap();
            t.sum(b).unwrap()
        };
        let once = t.backward(g1).unwrap().get(x).unwrap().clone();
        let twice = t.add(g1, g1).unwrap();
        let both = t.backward(twice).unwrap().get(x).unwrap().clone();
        for (a, b) in once.data().iter().zip(both.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn linearized_node_propagates() {
        let mut t = Tape::new();
        let u = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let j = Tensor::matrix(1, 2, vec![3.0, -1.0]);
        let y = t.linearized(Tensor::vector(vec![1.0]), &[u], vec![j]).unwrap();
        let s = t.sum(y).unwrap();
        assert_eq!(t.backward(s).unwrap().get(u).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn dump_lists_nodes() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0));
        let _ = t.exp(x).unwrap();
        let d = t.dump();
        assert!(d.contains("leaf"));
        assert!(d.contains("exp"));
    }
}
