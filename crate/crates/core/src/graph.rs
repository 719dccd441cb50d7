//! Static computation graphs and the tracing front end.
//!
//! A [`Program`] is written once against the [`Emitter`] trait. Running it
//! on a [`Graph`] records nodes; running it on [`Eager`] computes tensors
//! immediately. Nodes are appended in dependency order, so node index order
//! is always a valid topological order.

use std::fmt;
use std::rc::Rc;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::ops::Op;
use crate::tensor::kernels::ConvGeom;
use crate::tensor::{BinaryKind, PoolKind, ReduceKind, Tensor, UnaryKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

#[derive(Clone, Debug)]
pub struct Node<T> {
    pub op: Op<T>,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
}

impl<T> Node<T> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug)]
pub struct Graph<T> {
    pub nodes: Vec<Node<T>>,
    /// Input leaves, indexed by their `Op::Input` slot.
    pub inputs: Vec<NodeId>,
    /// Parameter leaves, indexed by their `Op::Param` slot.
    pub params: Vec<NodeId>,
    pub outputs: Vec<NodeId>,
    pub loss: Option<NodeId>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            inputs: Vec::new(),
            params: Vec::new(),
            outputs: Vec::new(),
            loss: None,
        }
    }

    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        let slot = self.inputs.len();
        let id = self.push_leaf(Op::Input(slot), shape.to_vec());
        self.inputs.push(id);
        id
    }

    pub fn param(&mut self, shape: &[usize]) -> NodeId {
        let slot = self.params.len();
        let id = self.push_leaf(Op::Param(slot), shape.to_vec());
        self.params.push(id);
        id
    }

    fn push_leaf(&mut self, op: Op<T>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs: Vec::new(),
            shape,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Appends a node after inferring (and thereby validating) its shape.
    pub fn push(&mut self, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        if matches!(op, Op::Input(_) | Op::Param(_)) {
            return Err(Error::Trace("use Graph::input / Graph::param for leaves".into()));
        }
        for &i in inputs {
            if i.0 >= self.nodes.len() {
                return Err(Error::Trace(format!("operand {i} does not exist yet")));
            }
        }
        let shapes: Vec<&[usize]> = inputs.iter().map(|&i| self.shape(i)).collect();
        let shape = op.infer_shape(&shapes)?;
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            shape,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    /// Roots that must survive optimization: outputs, then the loss.
    pub fn roots(&self) -> Vec<NodeId> {
        let mut r = self.outputs.clone();
        if let Some(l) = self.loss {
            if !r.contains(&l) {
                r.push(l);
            }
        }
        r
    }

    /// Consumers of every node, in ascending order (duplicates kept when a
    /// node uses the same operand twice).
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut c = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for &a in &n.inputs {
                c[a.0].push(NodeId(i));
            }
        }
        c
    }

    /// Count of non-leaf nodes.
    pub fn op_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.op.is_leaf()).count()
    }

    /// Re-infers every shape and checks operand ordering.
    pub fn validate(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.inputs.iter().any(|a| a.0 >= i) {
                return Err(Error::Trace(format!("node %{i} reads a later node")));
            }
            if matches!(n.op, Op::Input(_) | Op::Param(_)) {
                continue;
            }
            let shapes: Vec<&[usize]> = n.inputs.iter().map(|&a| self.shape(a)).collect();
            let s = n.op.infer_shape(&shapes)?;
            if s != n.shape {
                return Err(Error::Trace(format!(
                    "node %{i} records shape {:?} but infers {s:?}",
                    n.shape
                )));
            }
        }
        for (slot, &id) in self.inputs.iter().enumerate() {
            if self.node(id).op != Op::Input(slot) {
                return Err(Error::Trace(format!("input slot {slot} points at {id}")));
            }
        }
        for (slot, &id) in self.params.iter().enumerate() {
            if self.node(id).op != Op::Param(slot) {
                return Err(Error::Trace(format!("param slot {slot} points at {id}")));
            }
        }
        Ok(())
    }
}

impl<T: Element> fmt::Display for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, n) in self.nodes.iter().enumerate() {
            let args: Vec<String> = n.inputs.iter().map(|a| a.to_string()).collect();
            writeln!(f, "%{i} = {}({}) : {:?}", n.op.name(), args.join(", "), n.shape)?;
        }
        let outs: Vec<String> = self.outputs.iter().map(|a| a.to_string()).collect();
        write!(f, "outputs [{}]", outs.join(", "))?;
        if let Some(l) = self.loss {
            write!(f, ", loss {l}")?;
        }
        Ok(())
    }
}

/// Anything that can consume primitive ops: a recorder or an interpreter.
pub trait Emitter<T: Element> {
    type Value: Clone;

    fn apply(&mut self, op: Op<T>, args: &[Self::Value]) -> Result<Self::Value>;
    fn shape_of(&self, v: &Self::Value) -> Vec<usize>;

    fn unary(&mut self, kind: UnaryKind, x: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Unary(kind), &[x.clone()])
    }
    fn binary(&mut self, kind: BinaryKind, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Binary(kind), &[a.clone(), b.clone()])
    }
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(BinaryKind::Add, a, b)
    }
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(BinaryKind::Sub, a, b)
    }
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(BinaryKind::Mul, a, b)
    }
    fn div(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(BinaryKind::Div, a, b)
    }
    fn fill(&mut self, value: f64, shape: &[usize]) -> Result<Self::Value> {
        self.apply(
            Op::Fill {
                value: T::from_f64_lossy(value),
                shape: shape.to_vec(),
            },
            &[],
        )
    }
    fn constant(&mut self, t: Tensor<T>) -> Result<Self::Value> {
        self.apply(Op::Constant(t), &[])
    }
    /// `x * c` with `c` a scalar constant.
    fn scale(&mut self, x: &Self::Value, c: f64) -> Result<Self::Value> {
        let s = self.fill(c, &[])?;
        self.mul(x, &s)
    }
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.matmul_t(a, b, false, false)
    }
    fn matmul_t(&mut self, a: &Self::Value, b: &Self::Value, ta: bool, tb: bool) -> Result<Self::Value> {
        self.apply(Op::MatMul { ta, tb }, &[a.clone(), b.clone()])
    }
    fn reduce(&mut self, kind: ReduceKind, x: &Self::Value, axes: &[usize]) -> Result<Self::Value> {
        self.apply(
            Op::Reduce {
                kind,
                axes: axes.to_vec(),
            },
            &[x.clone()],
        )
    }
    fn sum_all(&mut self, x: &Self::Value) -> Result<Self::Value> {
        let r = self.shape_of(x).len();
        self.reduce(ReduceKind::Sum, x, &(0..r).collect::<Vec<_>>())
    }
    fn reshape(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value> {
        self.apply(Op::Reshape(shape.to_vec()), &[x.clone()])
    }
    fn broadcast_to(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value> {
        self.apply(Op::BroadcastTo(shape.to_vec()), &[x.clone()])
    }
    fn sum_to(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value> {
        self.apply(Op::SumTo(shape.to_vec()), &[x.clone()])
    }
    fn conv2d(&mut self, x: &Self::Value, w: &Self::Value, stride: usize, pad: usize) -> Result<Self::Value> {
        self.apply(Op::Conv2d(ConvGeom { stride, pad }), &[x.clone(), w.clone()])
    }
    fn pool2d(&mut self, kind: PoolKind, x: &Self::Value, window: usize, stride: usize) -> Result<Self::Value> {
        self.apply(
            Op::Pool2d {
                kind,
                window,
                stride,
            },
            &[x.clone()],
        )
    }
    fn gather(&mut self, table: &Self::Value, ids: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Gather, &[table.clone(), ids.clone()])
    }
    fn slice(&mut self, x: &Self::Value, axis: usize, start: usize, len: usize) -> Result<Self::Value> {
        self.apply(Op::Slice { axis, start, len }, &[x.clone()])
    }
    fn concat(&mut self, parts: &[Self::Value], axis: usize) -> Result<Self::Value> {
        self.apply(Op::Concat { axis }, parts)
    }
    fn softmax_ce(&mut self, logits: &Self::Value, labels: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::SoftmaxCrossEntropy, &[logits.clone(), labels.clone()])
    }
}

impl<T: Element> Emitter<T> for Graph<T> {
    type Value = NodeId;

    fn apply(&mut self, op: Op<T>, args: &[NodeId]) -> Result<NodeId> {
        self.push(op, args)
    }

    fn shape_of(&self, v: &NodeId) -> Vec<usize> {
        self.shape(*v).to_vec()
    }
}

/// Immediate interpreter: every op allocates and computes on the spot.
#[derive(Debug, Default)]
pub struct Eager {
    /// Number of ops dispatched so far.
    pub dispatched: usize,
}

impl<T: Element> Emitter<T> for Eager {
    type Value = Rc<Tensor<T>>;

    fn apply(&mut self, op: Op<T>, args: &[Rc<Tensor<T>>]) -> Result<Rc<Tensor<T>>> {
        self.dispatched += 1;
        let refs: Vec<&Tensor<T>> = args.iter().map(|a| a.as_ref()).collect();
        op.apply(&refs).map(Rc::new)
    }

    fn shape_of(&self, v: &Rc<Tensor<T>>) -> Vec<usize> {
        v.shape().to_vec()
    }
}

/// What a program hands back: named outputs and an optional scalar loss.
#[derive(Clone, Debug)]
pub struct Emitted<V> {
    pub outputs: Vec<V>,
    pub loss: Option<V>,
}

/// A computation written once, runnable under any emitter.
pub trait Program<T: Element> {
    fn input_shapes(&self) -> Vec<Vec<usize>>;
    fn param_shapes(&self) -> Vec<Vec<usize>>;
    fn emit<E: Emitter<T>>(
        &self,
        e: &mut E,
        inputs: &[E::Value],
        params: &[E::Value],
    ) -> Result<Emitted<E::Value>>;
}

/// Traces a program into a fresh graph.
pub fn record<T: Element, P: Program<T> + ?Sized>(p: &P) -> Result<Graph<T>> {
    let mut g = Graph::new();
    let inputs: Vec<NodeId> = p.input_shapes().iter().map(|s| g.input(s)).collect();
    let params: Vec<NodeId> = p.param_shapes().iter().map(|s| g.param(s)).collect();
    let out = p.emit(&mut g, &inputs, &params)?;
    g.outputs = out.outputs;
    g.loss = out.loss;
    Ok(g)
}

/// Runs a program op by op on concrete tensors.
pub fn eval_eager<T: Element, P: Program<T> + ?Sized>(
    p: &P,
    inputs: &[Tensor<T>],
    params: &[Tensor<T>],
) -> Result<Emitted<Tensor<T>>> {
    check_bindings("input", &p.input_shapes(), inputs)?;
    check_bindings("param", &p.param_shapes(), params)?;
    let wrap = |ts: &[Tensor<T>]| ts.iter().cloned().map(Rc::new).collect::<Vec<_>>();
    let mut e = Eager::default();
    let out = p.emit(&mut e, &wrap(inputs), &wrap(params))?;
    let unwrap = |v: Rc<Tensor<T>>| Rc::try_unwrap(v).unwrap_or_else(|rc| (*rc).clone());
    Ok(Emitted {
        outputs: out.outputs.into_iter().map(unwrap).collect(),
        loss: out.loss.map(unwrap),
    })
}

pub(crate) fn check_bindings<T: Element>(
    what: &str,
    declared: &[Vec<usize>],
    given: &[Tensor<T>],
) -> Result<()> {
    if declared.len() != given.len() {
        return Err(Error::Contract(format!(
            "expected {} {what} tensors, got {}",
            declared.len(),
            given.len()
        )));
    }
    for (i, (d, t)) in declared.iter().zip(given).enumerate() {
        if d.as_slice() != t.shape() {
            return Err(Error::shape(
                "bind",
                format!("{what} {i}: declared {d:?}, given {:?}", t.shape()),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Affine;

    impl Program<f64> for Affine {
        fn input_shapes(&self) -> Vec<Vec<usize>> {
            vec![vec![2, 3]]
        }
        fn param_shapes(&self) -> Vec<Vec<usize>> {
            vec![vec![3, 2], vec![2]]
        }
        fn emit<E: Emitter<f64>>(
            &self,
            e: &mut E,
            x: &[E::Value],
            p: &[E::Value],
        ) -> Result<Emitted<E::Value>> {
            let h = e.matmul(&x[0], &p[0])?;
            let h = e.add(&h, &p[1])?;
            let y = e.unary(UnaryKind::Tanh, &h)?;
            let l = e.sum_all(&y)?;
            Ok(Emitted {
                outputs: vec![y],
                loss: Some(l),
            })
        }
    }

    #[test]
    fn record_then_validate() {
        let g = record::<f64, _>(&Affine).unwrap();
        g.validate().unwrap();
        assert_eq!(g.inputs.len(), 1);
        assert_eq!(g.params.len(), 2);
        assert_eq!(g.op_count(), 4);
        assert_eq!(g.shape(g.outputs[0]), &[2, 2]);
        assert_eq!(g.shape(g.loss.unwrap()), &[] as &[usize]);
        let text = g.to_string();
        assert!(text.contains("matmul") && text.contains("tanh"), "{text}");
    }

    #[test]
    fn eager_matches_hand_computation() {
        let x = Tensor::from_f64(&[2, 3], &[1., 0., -1., 0.5, 0.5, 0.5]).unwrap();
        let w = Tensor::from_f64(&[3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::from_f64(&[2], &[0.1, -0.1]).unwrap();
        let out = eval_eager(&Affine, &[x.clone()], &[w.clone(), b.clone()]).unwrap();
        let mut loss = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let mut h = b.data()[j];
                for k in 0..3 {
                    h += x.data()[i * 3 + k] * w.data()[k * 2 + j];
                }
                assert!((out.outputs[0].data()[i * 2 + j] - h.tanh()).abs() < 1e-15);
                loss += h.tanh();
            }
        }
        assert!((out.loss.unwrap().data()[0] - loss).abs() < 1e-14);
    }

    #[test]
    fn binding_errors() {
        let x = Tensor::<f64>::zeros(&[2, 4]);
        let w = Tensor::zeros(&[3, 2]);
        let b = Tensor::zeros(&[2]);
        assert!(matches!(
            eval_eager(&Affine, &[x], &[w.clone(), b.clone()]).unwrap_err(),
            Error::Shape { .. }
        ));
        assert!(matches!(
            eval_eager(&Affine, &[], &[w, b]).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn push_rejects_bad_shapes_and_dangling_ids() {
        let mut g = Graph::<f64>::new();
        let a = g.input(&[2, 3]);
        let b = g.input(&[4, 5]);
        assert!(g.matmul(&a, &b).is_err());
        assert!(g.push(Op::Unary(UnaryKind::Exp), &[NodeId(99)]).is_err());
        assert!(g.push(Op::Input(0), &[]).is_err());
        assert_eq!(g.len(), 2);
    }
}
