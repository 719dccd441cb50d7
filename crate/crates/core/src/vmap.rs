//! Batching transform over a leading axis.
//!
//! [`vmap`] turns a graph written for one example into a graph that
//! processes `B` examples at once. Every program input gains a leading batch
//! axis; parameters and constants stay shared. Each op is rewritten by a
//! batching rule, never by replication, so the node count of the result does
//! not depend on `B`.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Emitter, Graph, NodeId};
use crate::ops::Op;
use crate::tensor::PoolKind;

/// Vectorizes `g` over a new leading axis of extent `batch`.
///
/// Outputs and the loss come back with that leading axis; any that did not
/// depend on an input are broadcast so the result is uniform.
pub fn vmap<T: Element>(g: &Graph<T>, batch: usize) -> Result<Graph<T>> {
    if batch == 0 {
        return Err(Error::Config("vmap over an empty batch".into()));
    }
    let mut v = Vmap {
        out: Graph::new(),
        map: Vec::with_capacity(g.len()),
        batched: Vec::with_capacity(g.len()),
        b: batch,
    };
    for id in g.ids() {
        let node = g.node(id);
        let (new, is_batched) = match &node.op {
            Op::Input(_) => (v.out.input(&v.with_batch(&node.shape)), true),
            Op::Param(_) => (v.out.param(&node.shape), false),
            _ => {
                let args: Vec<NodeId> = node.inputs.iter().map(|a| v.map[a.0]).collect();
                let flags: Vec<bool> = node.inputs.iter().map(|a| v.batched[a.0]).collect();
                if !flags.iter().any(|&f| f) {
                    (v.out.push(node.op.clone(), &args)?, false)
                } else {
                    let per: Vec<Vec<usize>> = node.inputs.iter().map(|&a| g.shape(a).to_vec()).collect();
                    (v.rule(&node.op, &args, &flags, &per, &node.shape)?, true)
                }
            }
        };
        v.map.push(new);
        v.batched.push(is_batched);
    }
    let mut outputs = Vec::with_capacity(g.outputs.len());
    for &o in &g.outputs {
        outputs.push(v.materialize(v.map[o.0], v.batched[o.0], g.shape(o))?);
    }
    v.out.outputs = outputs;
    if let Some(l) = g.loss {
        let nl = v.materialize(v.map[l.0], v.batched[l.0], g.shape(l))?;
        v.out.loss = Some(nl);
    }
    Ok(v.out)
}

struct Vmap<T> {
    out: Graph<T>,
    map: Vec<NodeId>,
    batched: Vec<bool>,
    b: usize,
}

impl<T: Element> Vmap<T> {
    fn with_batch(&self, s: &[usize]) -> Vec<usize> {
        let mut v = Vec::with_capacity(s.len() + 1);
        v.push(self.b);
        v.extend_from_slice(s);
        v
    }

    /// Gives an unbatched value an explicit (broadcast) batch axis.
    fn materialize(&mut self, x: NodeId, batched: bool, per: &[usize]) -> Result<NodeId> {
        if batched {
            Ok(x)
        } else {
            let s = self.with_batch(per);
            self.out.broadcast_to(&x, &s)
        }
    }

    /// `[B, s...]` viewed as `[B, 1.., s...]` with per-example rank `rank`.
    fn lift_rank(&mut self, x: NodeId, per: &[usize], rank: usize) -> Result<NodeId> {
        if per.len() >= rank {
            return Ok(x);
        }
        let mut s = vec![self.b];
        s.extend(std::iter::repeat(1).take(rank - per.len()));
        s.extend_from_slice(per);
        self.out.reshape(&x, &s)
    }

    /// `[B, N, rest..]` → `[B·N, rest..]`.
    fn fold(&mut self, x: NodeId, per: &[usize]) -> Result<NodeId> {
        let mut s = vec![self.b * per[0]];
        s.extend_from_slice(&per[1..]);
        self.out.reshape(&x, &s)
    }

    fn all_batched(&mut self, args: &[NodeId], flags: &[bool], per: &[Vec<usize>]) -> Result<Vec<NodeId>> {
        args.iter()
            .zip(flags)
            .zip(per)
            .map(|((&a, &f), p)| self.materialize(a, f, p))
            .collect()
    }

    /// Folds every operand's batch axis into its leading axis, applies `op`
    /// and splits the result back to `[B, N, ..]`.
    fn folded(&mut self, op: Op<T>, args: &[NodeId], flags: &[bool], per: &[Vec<usize>], out_per: &[usize]) -> Result<NodeId> {
        let full = self.all_batched(args, flags, per)?;
        let mut folded = Vec::with_capacity(full.len());
        for (a, p) in full.into_iter().zip(per) {
            folded.push(self.fold(a, p)?);
        }
        let r = self.out.push(op, &folded)?;
        let s = self.with_batch(out_per);
        self.out.reshape(&r, &s)
    }

    fn shifted(&mut self, op: Op<T>, args: &[NodeId]) -> Result<NodeId> {
        self.out.push(op, args)
    }

    fn rule(&mut self, op: &Op<T>, args: &[NodeId], flags: &[bool], per: &[Vec<usize>], out_per: &[usize]) -> Result<NodeId> {
        let unsupported = |why: &str| Err(Error::UnsupportedOp(format!("vmap of {}: {why}", op.name())));
        match op {
            Op::Input(_) | Op::Param(_) | Op::Fill { .. } | Op::Constant(_) => unreachable!("leaves have no batched operands"),
            Op::Unary(_) => self.out.push(op.clone(), args),
            Op::Binary(_) => {
                let rank = out_per.len();
                let mut lifted = Vec::with_capacity(2);
                for i in 0..2 {
                    lifted.push(if flags[i] {
                        self.lift_rank(args[i], &per[i], rank)?
                    } else {
                        args[i]
                    });
                }
                self.out.push(op.clone(), &lifted)
            }
            Op::MatMul { .. } => {
                if per.iter().any(|p| p.len() != 2) {
                    return unsupported("per-example operands must be rank 2");
                }
                self.out.push(op.clone(), args)
            }
            Op::Reduce { kind, axes } => self.shifted(
                Op::Reduce {
                    kind: *kind,
                    axes: axes.iter().map(|a| a + 1).collect(),
                },
                args,
            ),
            Op::Reshape(s) => {
                let s = self.with_batch(s);
                self.out.reshape(&args[0], &s)
            }
            Op::BroadcastTo(s) => {
                let x = self.lift_rank(args[0], &per[0], s.len())?;
                let s = self.with_batch(s);
                self.out.broadcast_to(&x, &s)
            }
            Op::SumTo(s) => {
                let extra = per[0].len() - s.len();
                let mut target = vec![self.b];
                target.extend(std::iter::repeat(1).take(extra));
                target.extend_from_slice(s);
                let r = self.out.sum_to(&args[0], &target)?;
                if extra == 0 {
                    Ok(r)
                } else {
                    let s = self.with_batch(s);
                    self.out.reshape(&r, &s)
                }
            }
            Op::Conv2d(_) | Op::Conv2dBackwardInput { .. } => {
                if flags[1] {
                    return unsupported("kernel must be shared across the batch");
                }
                let x = self.fold(args[0], &per[0])?;
                let r = self.out.push(op.clone(), &[x, args[1]])?;
                let s = self.with_batch(out_per);
                self.out.reshape(&r, &s)
            }
            Op::Conv2dBackwardWeight { geom, kernel, groups } => {
                if per[0][0] != 1 {
                    return unsupported("per-example inputs must hold a single image");
                }
                // one image per example: stack examples as channel groups
                let full = self.all_batched(args, flags, per)?;
                let (x, ct) = (&per[0], &per[1]);
                let xs = self.out.reshape(&full[0], &[1, self.b * x[1], x[2], x[3]])?;
                let cs = self.out.reshape(&full[1], &[1, self.b * ct[1], ct[2], ct[3]])?;
                let r = self.out.push(
                    Op::Conv2dBackwardWeight {
                        geom: *geom,
                        kernel: *kernel,
                        groups: groups * self.b,
                    },
                    &[xs, cs],
                )?;
                let s = self.with_batch(out_per);
                self.out.reshape(&r, &s)
            }
            Op::Im2Col { .. } | Op::Pool2d { .. } | Op::SoftmaxCrossEntropy | Op::SoftmaxCrossEntropyGrad => {
                self.folded(op.clone(), args, flags, per, out_per)
            }
            Op::Pool2dBackward { kind, .. } => match kind {
                PoolKind::Max | PoolKind::Avg => self.folded(op.clone(), args, flags, per, out_per),
            },
            Op::Gather => {
                if flags[0] {
                    return unsupported("lookup table must be shared across the batch");
                }
                self.out.push(Op::Gather, args)
            }
            Op::ScatterAdd { vocab, batch_dims } => {
                let full = self.all_batched(args, flags, per)?;
                self.out.push(
                    Op::ScatterAdd {
                        vocab: *vocab,
                        batch_dims: batch_dims + 1,
                    },
                    &full,
                )
            }
            Op::Slice { axis, start, len } => self.shifted(
                Op::Slice {
                    axis: axis + 1,
                    start: *start,
                    len: *len,
                },
                args,
            ),
            Op::Pad { axis, before, after } => self.shifted(
                Op::Pad {
                    axis: axis + 1,
                    before: *before,
                    after: *after,
                },
                args,
            ),
            Op::Concat { axis } => {
                let full = self.all_batched(args, flags, per)?;
                self.out.push(Op::Concat { axis: axis + 1 }, &full)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_graph;
    use crate::exec::interpret;
    use crate::rng::{uniform, RngState};
    use crate::tensor::{ReduceKind, Tensor, UnaryKind};

    /// Runs `g` once per example and stacks, as the loop oracle.
    fn looped(g: &Graph<f64>, batch_inputs: &[Tensor<f64>], params: &[Tensor<f64>], b: usize) -> (Vec<Tensor<f64>>, Option<Tensor<f64>>) {
        let mut outs: Vec<Vec<Tensor<f64>>> = vec![Vec::new(); g.outputs.len()];
        let mut losses = Vec::new();
        for i in 0..b {
            let ins: Vec<Tensor<f64>> = batch_inputs.iter().map(|t| t.index_axis0(i)).collect();
            let r = interpret(g, &ins, params).unwrap();
            for (k, o) in r.outputs.into_iter().enumerate() {
                outs[k].push(o);
            }
            losses.extend(r.loss);
        }
        let loss = if losses.is_empty() { None } else { Some(Tensor::stack(&losses).unwrap()) };
        (outs.iter().map(|v| Tensor::stack(v).unwrap()).collect(), loss)
    }

    fn agree(g: &Graph<f64>, b: usize, seed: u64, ids: &[(usize, usize)]) {
        let mut rng = RngState::new(seed, 3);
        let vg = vmap(g, b).unwrap();
        vg.validate().unwrap();
        let mut inputs = Vec::new();
        for (slot, &i) in g.inputs.iter().enumerate() {
            let s = vg.shape(vg.inputs[slot]).to_vec();
            let t = match ids.iter().find(|(which, _)| *which == slot) {
                Some(&(_, bound)) => {
                    let n: usize = s.iter().product();
                    let v: Vec<usize> = (0..n).map(|_| rng.below(bound as u64) as usize).collect();
                    Tensor::from_ids(&s, &v).unwrap()
                }
                _ => uniform(&s, -1.0, 1.0, &mut rng),
            };
            assert_eq!(&s[1..], g.shape(i));
            inputs.push(t);
        }
        let params: Vec<Tensor<f64>> = g.params.iter().map(|&p| uniform(g.shape(p), -1.0, 1.0, &mut rng)).collect();
        let got = interpret(&vg, &inputs, &params).unwrap();
        let (want, want_loss) = looped(g, &inputs, &params, b);
        for (a, w) in got.outputs.iter().zip(&want) {
            assert_eq!(a.shape(), w.shape());
            assert!(a.rel_diff(w, 1e-300) < 1e-12, "{}", a.rel_diff(w, 1e-300));
        }
        if let Some(wl) = want_loss {
            assert!(got.loss.unwrap().rel_diff(&wl, 1e-300) < 1e-12);
        }
    }

    #[test]
    fn elementwise_broadcast_and_reduce() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[3]);
        let y = g.input(&[2, 3]);
        let w = g.param(&[2, 1]);
        let a = g.mul(&x, &w).unwrap();
        let b = g.add(&a, &y).unwrap();
        let c = g.unary(UnaryKind::Tanh, &b).unwrap();
        let m = g.reduce(ReduceKind::Max, &c, &[1]).unwrap();
        let s = g.sum_to(&c, &[3]).unwrap();
        let bx = g.broadcast_to(&x, &[4, 3]).unwrap();
        let r = g.reshape(&bx, &[2, 6]).unwrap();
        g.outputs = vec![m, s, r, w];
        agree(&g, 5, 1, &[]);
    }

    #[test]
    fn matmul_variants() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[2, 3]);
        let w = g.param(&[3, 4]);
        let a = g.matmul(&x, &w).unwrap();
        let b = g.matmul_t(&x, &a, true, false).unwrap();
        let c = g.matmul_t(&w, &b, true, false).unwrap();
        g.outputs = vec![a, b, c];
        agree(&g, 3, 2, &[]);

        let mut g = Graph::<f64>::new();
        let x = g.input(&[2, 2, 3]);
        let w = g.param(&[3, 4]);
        let a = g.matmul(&x, &w).unwrap();
        g.outputs = vec![a];
        assert!(matches!(vmap(&g, 2).unwrap_err(), Error::UnsupportedOp(_)));
    }

    #[test]
    fn conv_pool_gather_slicing() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[1, 2, 6, 6]);
        let w = g.param(&[3, 2, 3, 3]);
        let c = g.conv2d(&x, &w, 1, 1).unwrap();
        let p = g.pool2d(PoolKind::Max, &c, 2, 2).unwrap();
        let q = g.pool2d(PoolKind::Avg, &c, 3, 3).unwrap();
        let s = g.slice(&p, 2, 1, 2).unwrap();
        let cc = g.concat(&[s, s], 3).unwrap();
        g.outputs = vec![c, p, q, cc];
        agree(&g, 4, 3, &[]);

        let mut g = Graph::<f64>::new();
        let ids = g.input(&[1, 5]);
        let table = g.param(&[7, 3]);
        let e = g.gather(&table, &ids).unwrap();
        let m = g.reduce(ReduceKind::Mean, &e, &[1]).unwrap();
        g.outputs = vec![e, m];
        agree(&g, 3, 4, &[(0, 7)]);
    }

    #[test]
    fn per_example_gradients_of_a_conv_net() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[1, 1, 6, 6]);
        let y = g.input(&[1]);
        let w = g.param(&[2, 1, 3, 3]);
        let v = g.param(&[8, 3]);
        let c = g.conv2d(&x, &w, 1, 0).unwrap();
        let r = g.unary(UnaryKind::Relu, &c).unwrap();
        let p = g.pool2d(PoolKind::Max, &r, 2, 2).unwrap();
        let f = g.reshape(&p, &[1, 8]).unwrap();
        let logits = g.matmul(&f, &v).unwrap();
        let l = g.softmax_ce(&logits, &y).unwrap();
        let l = g.sum_all(&l).unwrap();
        g.loss = Some(l);
        let gg = grad_graph(&g).unwrap();
        agree(&gg, 4, 5, &[(1, 3)]);
        let n4 = vmap(&gg, 4).unwrap().len();
        let n64 = vmap(&gg, 64).unwrap().len();
        assert_eq!(n4, n64);
        // the weight gradient uses one grouped kernel, not a loop
        let vg = vmap(&gg, 4).unwrap();
        assert!(vg.nodes.iter().any(|n| matches!(n.op, Op::Conv2dBackwardWeight { groups: 4, .. })));
    }

    #[test]
    fn embedding_gradients_scatter_per_example() {
        let mut g = Graph::<f64>::new();
        let ids = g.input(&[1, 4]);
        let y = g.input(&[1]);
        let table = g.param(&[6, 2]);
        let e = g.gather(&table, &ids).unwrap();
        let m = g.reduce(ReduceKind::Mean, &e, &[1]).unwrap();
        let l = g.softmax_ce(&m, &y).unwrap();
        let l = g.sum_all(&l).unwrap();
        g.loss = Some(l);
        let gg = grad_graph(&g).unwrap();
        agree(&gg, 3, 6, &[(0, 6), (1, 2)]);
    }

    #[test]
    fn batched_table_is_rejected() {
        let mut g = Graph::<f64>::new();
        let t = g.input(&[4, 2]);
        let ids = g.param(&[3]);
        let e = g.gather(&t, &ids).unwrap();
        g.outputs = vec![e];
        assert!(matches!(vmap(&g, 2).unwrap_err(), Error::UnsupportedOp(_)));
        assert!(matches!(vmap(&g, 0).unwrap_err(), Error::Config(_)));
    }
}
