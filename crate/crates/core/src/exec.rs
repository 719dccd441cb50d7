//! Graph execution.
//!
//! [`interpret`] is the eager path: node by node, a fresh allocation per
//! result, each freed after its last reader. [`CompiledGraph`] is the
//! optimized path: pruned, fused and planned once, then run any number of
//! times inside a reusable [`Workspace`]. Both evaluate exactly the same
//! scalar operations in the same order, so their results are bit-identical.

use std::borrow::Cow;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{check_bindings, Graph, NodeId};
use crate::ops::Op;
use crate::optimize::{optimize, Optimized, OptimizerReport};
use crate::tensor::layout::Layout;
use crate::tensor::{BinaryKind, Tensor, UnaryKind, View};

/// Results of one execution.
#[derive(Clone, Debug)]
pub struct Evaluated<T> {
    pub outputs: Vec<Tensor<T>>,
    pub loss: Option<Tensor<T>>,
    /// Peak bytes of intermediate values held at once (leaves excluded).
    pub peak_bytes: u64,
    /// Kernel launches.
    pub dispatched: usize,
}

fn bind<'a, T: Element>(g: &Graph<T>, inputs: &'a [Tensor<T>], params: &'a [Tensor<T>]) -> Result<()> {
    let shapes = |ids: &[NodeId]| ids.iter().map(|&i| g.shape(i).to_vec()).collect::<Vec<_>>();
    check_bindings("input", &shapes(&g.inputs), inputs)?;
    check_bindings("param", &shapes(&g.params), params)
}

/// Eager evaluation of every node in trace order.
pub fn interpret<T: Element>(g: &Graph<T>, inputs: &[Tensor<T>], params: &[Tensor<T>]) -> Result<Evaluated<T>> {
    bind(g, inputs, params)?;
    let width = (T::BITS / 8) as u64;
    let roots = g.roots();
    let mut uses = vec![0usize; g.len()];
    for n in &g.nodes {
        for a in &n.inputs {
            uses[a.0] += 1;
        }
    }
    let mut vals: Vec<Option<Cow<'_, Tensor<T>>>> = Vec::with_capacity(g.len());
    let (mut live, mut peak, mut dispatched) = (0u64, 0u64, 0usize);
    for (i, n) in g.nodes.iter().enumerate() {
        let v = match &n.op {
            Op::Input(s) => Cow::Borrowed(&inputs[*s]),
            Op::Param(s) => Cow::Borrowed(&params[*s]),
            op => {
                let args: Vec<&Tensor<T>> = n
                    .inputs
                    .iter()
                    .map(|a| vals[a.0].as_deref().expect("operand still live"))
                    .collect();
                let t = op.apply(&args)?;
                dispatched += 1;
                if !op.is_leaf() {
                    live += t.numel() as u64 * width;
                    peak = peak.max(live);
                }
                Cow::Owned(t)
            }
        };
        vals.push(Some(v));
        for a in &n.inputs {
            uses[a.0] -= 1;
            if uses[a.0] == 0 && !roots.contains(a) {
                free(&mut vals, g, *a, &mut live, width);
            }
        }
        if uses[i] == 0 && !roots.contains(&NodeId(i)) {
            free(&mut vals, g, NodeId(i), &mut live, width);
        }
    }
    let take = |id: NodeId| vals[id.0].as_deref().expect("roots stay live").clone();
    Ok(Evaluated {
        outputs: g.outputs.iter().map(|&o| take(o)).collect(),
        loss: g.loss.map(take),
        peak_bytes: peak,
        dispatched,
    })
}

/// Peak live bytes [`interpret`] would report for `g`, computed from shapes
/// alone without evaluating anything.
pub fn eager_peak_bytes<T: Element>(g: &Graph<T>) -> u64 {
    let width = (T::BITS / 8) as u64;
    let roots = g.roots();
    let mut uses = vec![0usize; g.len()];
    for n in &g.nodes {
        for a in &n.inputs {
            uses[a.0] += 1;
        }
    }
    let mut alive = vec![false; g.len()];
    let (mut live, mut peak) = (0u64, 0u64);
    let bytes = |id: usize| g.nodes[id].numel() as u64 * width;
    for (i, n) in g.nodes.iter().enumerate() {
        if !n.op.is_leaf() {
            alive[i] = true;
            live += bytes(i);
            peak = peak.max(live);
        }
        let mut dead = Vec::with_capacity(n.inputs.len() + 1);
        for a in &n.inputs {
            uses[a.0] -= 1;
            dead.push(a.0);
        }
        dead.push(i);
        for id in dead {
            if alive[id] && uses[id] == 0 && !roots.contains(&NodeId(id)) {
                alive[id] = false;
                live -= bytes(id);
            }
        }
    }
    peak
}

fn free<T: Element>(vals: &mut [Option<Cow<'_, Tensor<T>>>], g: &Graph<T>, id: NodeId, live: &mut u64, width: u64) {
    if vals[id.0].take().is_some() && !g.node(id).op.is_leaf() {
        *live -= g.node(id).numel() as u64 * width;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Loc {
    Input(usize),
    Param(usize),
    Const(usize),
    Buffer(usize),
    /// Interior of a fused group: never materialized.
    Register,
}

#[derive(Clone, Copy, Debug)]
enum Instr {
    Unary(UnaryKind, usize),
    Binary(BinaryKind, usize, usize),
}

/// A chain of elementwise ops evaluated in one pass over register blocks.
#[derive(Clone, Debug)]
struct FusedKernel {
    externals: Vec<NodeId>,
    layout: Layout,
    /// Instruction `k` writes register `externals.len() + k`.
    code: Vec<Instr>,
}

const BLOCK: usize = 256;

/// A graph optimized and laid out for repeated execution.
#[derive(Clone, Debug)]
pub struct CompiledGraph<T> {
    opt: Optimized<T>,
    locs: Vec<Loc>,
    consts: Vec<Tensor<T>>,
    fused: Vec<Option<FusedKernel>>,
}

/// Preallocated buffers for one [`CompiledGraph`].
#[derive(Debug, Default)]
pub struct Workspace<T> {
    buffers: Vec<Vec<T>>,
    sizes: Vec<usize>,
    regs: Vec<Vec<T>>,
}

impl<T: Element> Workspace<T> {
    /// Bytes held by the arena.
    pub fn bytes(&self) -> u64 {
        self.sizes.iter().sum::<usize>() as u64 * (T::BITS / 8) as u64
    }

    /// Refills buffers whose storage left with a previous run's outputs.
    fn restore(&mut self) {
        for (buf, &n) in self.buffers.iter_mut().zip(&self.sizes) {
            if buf.len() != n {
                *buf = vec![T::zero(); n];
            }
        }
    }
}

impl<T: Element> CompiledGraph<T> {
    pub fn compile(g: &Graph<T>) -> Result<Self> {
        Self::compile_with(g, true)
    }

    pub fn compile_with(g: &Graph<T>, fusion: bool) -> Result<Self> {
        let opt = optimize(g, fusion)?;
        let graph = &opt.graph;
        let mut locs = vec![Loc::Register; graph.len()];
        let mut consts = Vec::new();
        for (i, n) in graph.nodes.iter().enumerate() {
            locs[i] = match &n.op {
                Op::Input(s) => Loc::Input(*s),
                Op::Param(s) => Loc::Param(*s),
                Op::Fill { .. } | Op::Constant(_) => {
                    consts.push(n.op.apply(&[])?);
                    Loc::Const(consts.len() - 1)
                }
                _ => match opt.plan.buffer_of[i] {
                    Some(b) => Loc::Buffer(b),
                    None => Loc::Register,
                },
            };
        }
        let mut fused = Vec::with_capacity(opt.schedule.steps.len());
        for &root in &opt.schedule.steps {
            let members = &opt.fusion.members[root.0];
            fused.push(if members.len() > 1 {
                Some(build_kernel(graph, members))
            } else {
                None
            });
        }
        Ok(CompiledGraph {
            opt,
            locs,
            consts,
            fused,
        })
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.opt.graph
    }

    pub fn report(&self) -> &OptimizerReport {
        &self.opt.report
    }

    pub fn workspace(&self) -> Workspace<T> {
        Workspace {
            buffers: self.opt.plan.buffer_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            sizes: self.opt.plan.buffer_sizes.clone(),
            regs: Vec::new(),
        }
    }

    fn view<'a>(&'a self, ws: &'a Workspace<T>, inputs: &'a [Tensor<T>], params: &'a [Tensor<T>], id: NodeId) -> View<'a, T> {
        let shape = self.opt.graph.shape(id);
        let data: &[T] = match self.locs[id.0] {
            Loc::Input(s) => inputs[s].data(),
            Loc::Param(s) => params[s].data(),
            Loc::Const(c) => self.consts[c].data(),
            Loc::Buffer(b) => &ws.buffers[b][..shape.iter().product::<usize>()],
            Loc::Register => unreachable!("fused interior value read from outside its group"),
        };
        View { shape, data }
    }

    /// Moves an arena-held result out of `ws` instead of copying it; the
    /// buffer is refilled on the next run.
    fn take(&self, ws: &mut Workspace<T>, inputs: &[Tensor<T>], params: &[Tensor<T>], id: NodeId) -> Tensor<T> {
        let shape = self.opt.graph.shape(id).to_vec();
        match self.locs[id.0] {
            Loc::Buffer(b) => {
                let mut v = std::mem::take(&mut ws.buffers[b]);
                v.truncate(shape.iter().product());
                Tensor::from_parts(shape, v)
            }
            _ => Tensor::from_parts(shape, self.view(ws, inputs, params, id).data.to_vec()),
        }
    }

    /// Executes the schedule inside `ws`, which must come from
    /// [`Self::workspace`].
    pub fn run(&self, ws: &mut Workspace<T>, inputs: &[Tensor<T>], params: &[Tensor<T>]) -> Result<Evaluated<T>> {
        let g = &self.opt.graph;
        bind(g, inputs, params)?;
        if ws.sizes != self.opt.plan.buffer_sizes {
            return Err(Error::Contract("workspace belongs to another graph".into()));
        }
        ws.restore();
        for (step, &id) in self.opt.schedule.steps.iter().enumerate() {
            let Loc::Buffer(b) = self.locs[id.0] else { unreachable!() };
            let node = g.node(id);
            let numel = node.numel();
            let mut out = std::mem::take(&mut ws.buffers[b]);
            let r = match &self.fused[step] {
                Some(k) => self.run_fused(k, ws, inputs, params, &node.shape, &mut out[..numel]),
                None => {
                    let args: Vec<View<'_, T>> = node.inputs.iter().map(|&a| self.view(ws, inputs, params, a)).collect();
                    node.op.eval_into(&args, &node.shape, &mut out[..numel])
                }
            };
            ws.buffers[b] = out;
            r?;
        }
        let ids: Vec<NodeId> = g.outputs.iter().chain(&g.loss).copied().collect();
        let mut results: Vec<Tensor<T>> = Vec::with_capacity(ids.len());
        for (k, &id) in ids.iter().enumerate() {
            let t = match ids[..k].iter().position(|&p| p == id) {
                Some(p) => results[p].clone(),
                None => self.take(ws, inputs, params, id),
            };
            results.push(t);
        }
        let loss = g.loss.map(|_| results.pop().unwrap());
        Ok(Evaluated {
            outputs: results,
            loss,
            peak_bytes: self.opt.report.peak_planned_bytes,
            dispatched: self.opt.schedule.steps.len(),
        })
    }

    fn run_fused(&self, k: &FusedKernel, ws: &mut Workspace<T>, inputs: &[Tensor<T>], params: &[Tensor<T>], shape: &[usize], out: &mut [T]) -> Result<()> {
        let nregs = k.externals.len() + k.code.len();
        let mut regs = std::mem::take(&mut ws.regs);
        if regs.len() < nregs {
            regs.resize_with(nregs, || vec![T::zero(); BLOCK]);
        }
        let ext: Vec<&[T]> = k.externals.iter().map(|&e| self.view(ws, inputs, params, e).data).collect();
        let strides: Vec<usize> = (0..ext.len()).map(|e| k.layout.inner_stride(e)).collect();
        let inner = k.layout.inner();
        let mut err = None;
        debug_assert_eq!(k.layout.numel(), shape.iter().product::<usize>());
        k.layout.for_each_row(|o, bases| {
            if err.is_some() {
                return;
            }
            let mut off = 0;
            while off < inner {
                let n = BLOCK.min(inner - off);
                for (e, data) in ext.iter().enumerate() {
                    let (s, base) = (strides[e], bases[e] + off * strides[e]);
                    let r = &mut regs[e][..n];
                    if s == 1 {
                        r.copy_from_slice(&data[base..base + n]);
                    } else {
                        for (j, v) in r.iter_mut().enumerate() {
                            *v = data[base + j * s];
                        }
                    }
                }
                for (c, ins) in k.code.iter().enumerate() {
                    let dst = k.externals.len() + c;
                    let (lo, hi) = regs.split_at_mut(dst);
                    let d = &mut hi[0][..n];
                    match *ins {
                        Instr::Unary(kind, x) => {
                            let x = &lo[x][..n];
                            if let Some(j) = domain_violation(kind, x) {
                                err = Some(Error::Domain {
                                    op: kind.name(),
                                    index: o + off + j,
                                    value: x[j].as_f64(),
                                });
                                return;
                            }
                            for (r, &v) in d.iter_mut().zip(x) {
                                *r = kind.apply(v);
                            }
                        }
                        Instr::Binary(kind, a, b) => {
                            let (a, b) = (&lo[a][..n], &lo[b][..n]);
                            for ((r, &x), &y) in d.iter_mut().zip(a).zip(b) {
                                *r = kind.apply(x, y);
                            }
                        }
                    }
                }
                out[o + off..o + off + n].copy_from_slice(&regs[nregs - 1][..n]);
                off += n;
            }
        });
        ws.regs = regs;
        err.map_or(Ok(()), Err)
    }
}

fn domain_violation<T: Element>(kind: UnaryKind, x: &[T]) -> Option<usize> {
    match kind {
        UnaryKind::Log => x.iter().position(|&v| !(v > T::zero())),
        UnaryKind::Sqrt => x.iter().position(|&v| !(v >= T::zero())),
        _ => None,
    }
}

fn build_kernel<T: Element>(g: &Graph<T>, members: &[NodeId]) -> FusedKernel {
    let mut externals: Vec<NodeId> = Vec::new();
    for &m in members {
        for &a in &g.node(m).inputs {
            if !members.contains(&a) && !externals.contains(&a) {
                externals.push(a);
            }
        }
    }
    let reg = |id: NodeId| -> usize {
        match externals.iter().position(|&e| e == id) {
            Some(e) => e,
            None => externals.len() + members.iter().position(|&m| m == id).unwrap(),
        }
    };
    let code = members
        .iter()
        .map(|&m| {
            let n = g.node(m);
            match n.op {
                Op::Unary(k) => Instr::Unary(k, reg(n.inputs[0])),
                Op::Binary(k) => Instr::Binary(k, reg(n.inputs[0]), reg(n.inputs[1])),
                _ => unreachable!("only elementwise ops are fused"),
            }
        })
        .collect();
    let root_shape = g.shape(*members.last().unwrap());
    let shapes: Vec<&[usize]> = externals.iter().map(|&e| g.shape(e)).collect();
    FusedKernel {
        layout: Layout::new(root_shape, &shapes),
        externals,
        code,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_graph;
    use crate::graph::Emitter;
    use crate::rng::{uniform, RngState};
    use crate::tensor::{PoolKind, ReduceKind};

    fn net() -> Graph<f32> {
        let mut g = Graph::<f32>::new();
        let x = g.input(&[4, 1, 8, 8]);
        let y = g.input(&[4]);
        let w = g.param(&[3, 1, 3, 3]);
        let b = g.param(&[3, 1, 1]);
        let v = g.param(&[27, 5]);
        let c = g.conv2d(&x, &w, 1, 0).unwrap();
        let c = g.add(&c, &b).unwrap();
        let r = g.unary(UnaryKind::Tanh, &c).unwrap();
        let s = g.unary(UnaryKind::Square, &r).unwrap();
        let r = g.sub(&r, &s).unwrap();
        let p = g.pool2d(PoolKind::Avg, &r, 2, 2).unwrap();
        let f = g.reshape(&p, &[4, 27]).unwrap();
        let z = g.matmul(&f, &v).unwrap();
        let l = g.softmax_ce(&z, &y).unwrap();
        let l = g.reduce(ReduceKind::Mean, &l, &[0]).unwrap();
        g.loss = Some(l);
        g
    }

    fn bindings(g: &Graph<f32>) -> (Vec<Tensor<f32>>, Vec<Tensor<f32>>) {
        let mut rng = RngState::new(5, 0);
        let x = uniform(g.shape(g.inputs[0]), -1.0, 1.0, &mut rng);
        let y = Tensor::from_ids(&[4], &[0, 4, 2, 2]).unwrap();
        let ps = g.params.iter().map(|&p| uniform(g.shape(p), -0.5, 0.5, &mut rng)).collect();
        (vec![x, y], ps)
    }

    #[test]
    fn compiled_matches_eager_bit_for_bit() {
        let g = grad_graph(&net()).unwrap();
        let (ins, ps) = bindings(&g);
        let eager = interpret(&g, &ins, &ps).unwrap();
        let c = CompiledGraph::compile(&g).unwrap();
        assert!(c.report().fused_groups >= 1, "{:?}", c.report());
        let mut ws = c.workspace();
        for _ in 0..2 {
            let r = c.run(&mut ws, &ins, &ps).unwrap();
            for (a, b) in r.outputs.iter().zip(&eager.outputs) {
                assert!(a.bit_eq(b));
            }
            assert!(r.loss.unwrap().bit_eq(eager.loss.as_ref().unwrap()));
        }
        let unfused = CompiledGraph::compile_with(&g, false).unwrap();
        let r = unfused.run(&mut unfused.workspace(), &ins, &ps).unwrap();
        assert!(r.outputs[0].bit_eq(&eager.outputs[0]));
    }

    #[test]
    fn planned_peak_is_below_no_reuse_and_eager_tracks_frees() {
        let g = grad_graph(&net()).unwrap();
        let (ins, ps) = bindings(&g);
        let c = CompiledGraph::compile(&g).unwrap();
        let rep = c.report();
        assert!(rep.peak_planned_bytes < rep.no_reuse_bytes, "{rep:?}");
        assert_eq!(c.workspace().bytes(), rep.peak_planned_bytes);
        let eager = interpret(&g, &ins, &ps).unwrap();
        let all: u64 = g.nodes.iter().filter(|n| !n.op.is_leaf()).map(|n| n.numel() as u64 * 4).sum();
        assert!(eager.peak_bytes < all);
        assert_eq!(eager_peak_bytes(&g), eager.peak_bytes);
    }

    #[test]
    fn fused_domain_errors_surface() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[300]);
        let a = g.unary(UnaryKind::Neg, &x).unwrap();
        let b = g.unary(UnaryKind::Log, &a).unwrap();
        let c = g.unary(UnaryKind::Exp, &b).unwrap();
        g.outputs = vec![c];
        let mut v = vec![-1.0; 300];
        v[290] = 1.0;
        let t = Tensor::from_f64(&[300], &v).unwrap();
        let c = CompiledGraph::compile(&g).unwrap();
        assert_eq!(c.report().fused_groups, 1);
        match c.run(&mut c.workspace(), &[t.clone()], &[]).unwrap_err() {
            Error::Domain { index, .. } => assert_eq!(index, 290),
            e => panic!("{e}"),
        }
        match interpret(&g, &[t], &[]).unwrap_err() {
            Error::Domain { index, .. } => assert_eq!(index, 290),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn broadcast_externals_in_fused_groups() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[3, 1, 700]);
        let y = g.input(&[4, 1]);
        let a = g.mul(&x, &y).unwrap();
        let b = g.unary(UnaryKind::Sigmoid, &a).unwrap();
        let c = g.binary(BinaryKind::Max, &b, &x).unwrap();
        g.outputs = vec![c];
        let mut rng = RngState::new(1, 1);
        let ins = vec![uniform(&[3, 1, 700], -2.0, 2.0, &mut rng), uniform(&[4, 1], -2.0, 2.0, &mut rng)];
        let e = interpret(&g, &ins, &[]).unwrap();
        let c = CompiledGraph::compile(&g).unwrap();
        assert_eq!(c.report().fused_nodes, 3);
        let r = c.run(&mut c.workspace(), &ins, &[]).unwrap();
        assert!(r.outputs[0].bit_eq(&e.outputs[0]));
    }

    #[test]
    fn repeated_outputs_survive_moving_out_of_the_arena() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[5]);
        let a = g.unary(UnaryKind::Exp, &x).unwrap();
        let s = g.reduce(ReduceKind::Sum, &a, &[0]).unwrap();
        g.outputs = vec![a, a, s];
        g.loss = Some(s);
        let t = Tensor::from_f64(&[5], &[0.0, 1.0, -1.0, 2.0, 0.5]).unwrap();
        let e = interpret(&g, &[t.clone()], &[]).unwrap();
        let c = CompiledGraph::compile(&g).unwrap();
        let mut ws = c.workspace();
        for _ in 0..3 {
            let r = c.run(&mut ws, &[t.clone()], &[]).unwrap();
            assert!(r.outputs.iter().zip(&e.outputs).all(|(a, b)| a.bit_eq(b)));
            assert!(r.loss.unwrap().bit_eq(&e.outputs[2]));
        }
        assert_eq!(ws.bytes(), c.report().peak_planned_bytes);
    }

    #[test]
    fn leaf_outputs_and_binding_checks() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[2]);
        let z = g.fill(0.0, &[3]).unwrap();
        g.outputs = vec![x, z];
        let c = CompiledGraph::compile(&g).unwrap();
        let t = Tensor::from_f64(&[2], &[1., 2.]).unwrap();
        let r = c.run(&mut c.workspace(), &[t.clone()], &[]).unwrap();
        assert_eq!(r.outputs[0], t);
        assert_eq!(r.outputs[1].data(), &[0., 0., 0.]);
        assert!(c.run(&mut c.workspace(), &[], &[]).is_err());
    }
}
