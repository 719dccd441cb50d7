//! Symbolic reverse-mode differentiation.
//!
//! [`backward`] appends the adjoint computation to an existing graph, so the
//! result is itself a graph that later passes (vmap, the optimizer) can
//! transform like any other. Only nodes that both depend on a requested
//! variable and feed the loss receive cotangents.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::exec;
use crate::graph::{Emitter, Graph, NodeId, Program};
use crate::ops::Op;
use crate::tensor::kernels::ConvGeom;
use crate::tensor::{BinaryKind, PoolKind, ReduceKind, Tensor, UnaryKind};

/// Derivative rule for one primitive.
///
/// Receives the graph, the node being differentiated, its output cotangent
/// and a mask of which operands need one. Returns one optional cotangent per
/// operand, each with exactly that operand's shape.
pub type VjpRule<T> = fn(&mut Graph<T>, NodeId, NodeId, &[bool]) -> Result<Vec<Option<NodeId>>>;

/// Looks up the derivative rule for an op. Backward-only primitives (the
/// ones derivative rules themselves emit) have none.
pub fn vjp_rule<T: Element>(op: &Op<T>) -> Option<VjpRule<T>> {
    Some(match op {
        Op::Unary(_) => vjp_unary,
        Op::Binary(_) => vjp_binary,
        Op::MatMul { .. } => vjp_matmul,
        Op::Reduce { .. } => vjp_reduce,
        Op::Reshape(_) | Op::BroadcastTo(_) | Op::SumTo(_) => vjp_reshaping,
        Op::Conv2d(_) => vjp_conv2d,
        Op::Pool2d { .. } => vjp_pool2d,
        Op::Gather => vjp_gather,
        Op::Slice { .. } | Op::Pad { .. } | Op::Concat { .. } => vjp_slicing,
        Op::SoftmaxCrossEntropy => vjp_softmax_ce,
        _ => return None,
    })
}

/// Appends the reverse pass for `loss` and returns the cotangent of each
/// `wrt` node, or `None` when the loss does not depend on it.
///
/// A non-scalar loss is seeded with ones, i.e. the sum is differentiated.
pub fn backward<T: Element>(g: &mut Graph<T>, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<Option<NodeId>>> {
    let n = g.len();
    if loss.0 >= n || wrt.iter().any(|w| w.0 >= n) {
        return Err(Error::Trace("backward: node out of range".into()));
    }
    let mut from_wrt = vec![false; n];
    for w in wrt {
        from_wrt[w.0] = true;
    }
    for i in 0..n {
        if !from_wrt[i] && g.nodes[i].inputs.iter().any(|a| from_wrt[a.0]) {
            from_wrt[i] = true;
        }
    }
    let mut to_loss = vec![false; n];
    to_loss[loss.0] = true;
    for i in (0..n).rev() {
        if to_loss[i] {
            for a in g.nodes[i].inputs.clone() {
                to_loss[a.0] = true;
            }
        }
    }
    let needed: Vec<bool> = (0..n).map(|i| from_wrt[i] && to_loss[i]).collect();

    let mut cot: Vec<Option<NodeId>> = vec![None; n];
    if needed[loss.0] {
        let shape = g.shape(loss).to_vec();
        cot[loss.0] = Some(g.fill(1.0, &shape)?);
    }
    for i in (0..n).rev() {
        let Some(ct) = cot[i] else { continue };
        if !needed[i] || g.nodes[i].op.is_leaf() {
            continue;
        }
        let node = NodeId(i);
        let rule = vjp_rule(&g.nodes[i].op)
            .ok_or_else(|| Error::UnsupportedOp(format!("no derivative rule for {}", g.nodes[i].op.name())))?;
        let inputs = g.nodes[i].inputs.clone();
        let needs: Vec<bool> = inputs.iter().map(|a| needed[a.0]).collect();
        let grads = rule(g, node, ct, &needs)?;
        for ((a, gi), need) in inputs.iter().zip(grads).zip(needs) {
            let Some(gi) = gi else { continue };
            if !need {
                continue;
            }
            if g.shape(gi) != g.shape(*a) {
                return Err(Error::Trace(format!(
                    "{} rule produced cotangent {:?} for operand {:?}",
                    g.nodes[i].op.name(),
                    g.shape(gi),
                    g.shape(*a)
                )));
            }
            cot[a.0] = Some(match cot[a.0] {
                Some(prev) => g.add(&prev, &gi)?,
                None => gi,
            });
        }
    }
    Ok(wrt.iter().map(|w| cot[w.0]).collect())
}

/// Copy of `g` extended with the loss gradient for every parameter. The
/// outputs become those gradients (zeros for parameters the loss ignores);
/// the loss is kept.
pub fn grad_graph<T: Element>(g: &Graph<T>) -> Result<Graph<T>> {
    let loss = g
        .loss
        .ok_or_else(|| Error::Contract("gradient of a graph without a loss".into()))?;
    let mut out = g.clone();
    let params = out.params.clone();
    let grads = backward(&mut out, loss, &params)?;
    let mut outputs = Vec::with_capacity(params.len());
    for (p, gr) in params.iter().zip(grads) {
        outputs.push(match gr {
            Some(id) => id,
            None => {
                let shape = out.shape(*p).to_vec();
                out.fill(0.0, &shape)?
            }
        });
    }
    out.outputs = outputs;
    Ok(out)
}

/// Loss value and parameter gradients of a program at a point.
pub fn grad<T: Element, P: Program<T> + ?Sized>(
    p: &P,
    inputs: &[Tensor<T>],
    params: &[Tensor<T>],
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let g = grad_graph(&crate::graph::record(p)?)?;
    let r = exec::interpret(&g, inputs, params)?;
    Ok((r.loss.expect("grad graph keeps its loss"), r.outputs))
}

fn args<T: Element>(g: &Graph<T>, node: NodeId) -> (Op<T>, Vec<NodeId>) {
    let n = g.node(node);
    (n.op.clone(), n.inputs.clone())
}

/// Sums a broadcast cotangent back down to `target`'s shape.
fn unbroadcast<T: Element>(g: &mut Graph<T>, ct: NodeId, target: NodeId) -> Result<NodeId> {
    let want = g.shape(target).to_vec();
    if g.shape(ct) == want.as_slice() {
        Ok(ct)
    } else {
        g.sum_to(&ct, &want)
    }
}

fn vjp_unary<T: Element>(g: &mut Graph<T>, node: NodeId, ct: NodeId, _: &[bool]) -> Result<Vec<Option<NodeId>>> {
    let (op, ins) = args(g, node);
    let Op::Unary(kind) = op else { unreachable!() };
    let (x, y) = (ins[0], node);
    let gx = match kind {
        UnaryKind::Neg => g.unary(UnaryKind::Neg, &ct)?,
        UnaryKind::Exp => g.mul(&ct, &y)?,
        UnaryKind::Log => g.div(&ct, &x)?,
        UnaryKind::Tanh => {
            let y2 = g.unary(UnaryKind::Square, &y)?;
            let one = g.fill(1.0, &[])?;
            let d = g.sub(&one, &y2)?;
            g.mul(&ct, &d)?
        }
        UnaryKind::Sigmoid => {
            let one = g.fill(1.0, &[])?;
            let omy = g.sub(&one, &y)?;
            let d = g.mul(&y, &omy)?;
            g.mul(&ct, &d)?
        }
        UnaryKind::Relu => {
            let m = g.unary(UnaryKind::Step, &x)?;
            g.mul(&ct, &m)?
        }
        UnaryKind::Square => {
            let two_x = g.scale(&x, 2.0)?;
            g.mul(&ct, &two_x)?
        }
        UnaryKind::Sqrt => {
            let two_y = g.scale(&y, 2.0)?;
            g.div(&ct, &two_y)?
        }
        // piecewise constant: zero almost everywhere
        UnaryKind::Step => return Ok(vec![None]),
    };
    Ok(vec![Some(gx)])
}

fn vjp_binary<T: Element>(g: &mut Graph<T>, node: NodeId, ct: NodeId, needs: &[bool]) -> Result<Vec<Option<NodeId>>> {
    let (op, ins) = args(g, node);
    let Op::Binary(kind) = op else { unreachable!() };
    let (a, b) = (ins[0], ins[1]);
    let (ga, gb) = match kind {
        BinaryKind::Add => (Some(ct), Some(ct)),
        BinaryKind::Sub => {
            let gb = if needs[1] {
                Some(g.unary(UnaryKind::Neg, &ct)?)
            } else {
                None
            };
            (Some(ct), gb)
        }
        BinaryKind::Mul => {
            let ga = if needs[0] { Some(g.mul(&ct, &b)?) } else { None };
            let gb = if needs[1] { Some(g.mul(&ct, &a)?) } else { None };
            (ga, gb)
        }
        BinaryKind::Div => {
            let q = g.div(&ct, &b)?;
            let gb = if needs[1] {
                let t = g.mul(&q, &node)?;
                Some(g.unary(UnaryKind::Neg, &t)?)
            } else {
                None
            };
            (Some(q), gb)
        }
        BinaryKind::Max => {
            // ties go to `a`, matching the forward selection
            let d = g.sub(&b, &a)?;
            let to_b = g.unary(UnaryKind::Step, &d)?;
            let gb = if needs[1] { Some(g.mul(&ct, &to_b)?) } else { None };
            let ga = if needs[0] {
                let one = g.fill(1.0, &[])?;
                let to_a = g.sub(&one, &to_b)?;
                Some(g.mul(&ct, &to_a)?)
            } else {
                None
            };
            (ga, gb)
        }
        BinaryKind::Eq => (None, None),
    };
    let ga = match ga {
        Some(x) if needs[0] => Some(unbroadcast(g, x, a)?),
        _ => None,
    };
    let gb = match gb {
        Some(x) if needs[1] => Some(unbroadcast(g, x, b)?),
        _ => None,
    };
    Ok(vec![ga, gb])
}

fn vjp_matmul<T: Element>(g: &mut Graph<T>, node: NodeId, ct: NodeId, needs: &[bool]) -> Result<Vec<Option<NodeId>>> {
    let (op, ins) = args(g, node);
    let Op::MatMul { ta, tb } = op else { unreachable!() };
    let (a, b) = (ins[0], ins[1]);
    let out_rank = g.shape(node).len();
    let (ra, rb) = (g.shape(a).len(), g.shape(b).len());

    let ga = if needs[0] {
        if ra == 2 && out_rank == 3 {
            Some(shared_operand_grad(g, b, ct, tb, ta, false)?)
        } else if !ta {
            Some(g.matmul_t(&ct, &b, false, !tb)?)
        } else {
            Some(g.matmul_t(&b, &ct, tb, true)?)
        }
    } else {
        None
    };
    let gb = if needs[1] {
        if rb == 2 && out_rank == 3 {
            Some(shared_operand_grad(g, a, ct, ta, tb, true)?)
        } else if !tb {
            Some(g.matmul_t(&a, &ct, !ta, false)?)
        } else {
            Some(g.matmul_t(&ct, &a, true, ta)?)
        }
    } else {
        None
    };
    Ok(vec![ga, gb])
}

/// Cotangent of the unbatched operand of a batched product: the per-batch
/// products summed over the batch axis. When the batched operand is not
/// transposed its batch folds into rows, giving a single rank-2 product.
fn shared_operand_grad<T: Element>(
    g: &mut Graph<T>,
    other: NodeId,
    ct: NodeId,
    t_other: bool,
    t_self: bool,
    self_is_right: bool,
) -> Result<NodeId> {
    let os = g.shape(other).to_vec();
    let cs = g.shape(ct).to_vec();
    if self_is_right && !t_other {
        // out = A·B (A [bs,m,k]), fold to [bs·m, k] and [bs·m, n]
        let a2 = g.reshape(&other, &[os[0] * os[1], os[2]])?;
        let c2 = g.reshape(&ct, &[cs[0] * cs[1], cs[2]])?;
        return if t_self {
            g.matmul_t(&c2, &a2, true, false)
        } else {
            g.matmul_t(&a2, &c2, true, false)
        };
    }
    let per = if self_is_right {
        if t_self {
            g.matmul_t(&ct, &other, true, t_other)?
        } else {
            g.matmul_t(&other, &ct, !t_other, false)?
        }
    } else if t_self {
        g.matmul_t(&other, &ct, t_other, true)?
    } else {
        g.matmul_t(&ct, &other, false, !t_other)?
    };
    g.reduce(ReduceKind::Sum, &per, &[0])
}

fn vjp_reduce<T: Element>(g: &mut Graph<T>, node: NodeId, ct: NodeId, _: &[bool]) -> Result<Vec<Option<NodeId>>> {
    let (op, ins) = args(g, node);
    let Op::Reduce { kind, axes } = op else { unreachable!() };
    let x = ins[0];
    let xs = g.shape(x).to_vec();
    let keep: Vec<usize> = xs
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect();
    let ck = g.reshape(&ct, &keep)?;
    let spread = g.broadcast_to(&ck, &xs)?;
    let gx = match kind {
        ReduceKind::Sum => spread,
        ReduceKind::Mean => {
            let count: usize = axes.iter().map(|&a| xs[a]).product();
            g.scale(&spread, 1.0 / count as f64)?
        }
        ReduceKind::Max => {
            let yk = g.reshape(&node, &keep)?;
            let yb = g.broadcast_to(&yk, &xs)?;
            let mask = g.binary(BinaryKind::Eq, &x, &yb)?;
            g.mul(&spread, &mask)?
        }
    };
    Ok(vec![Some(gx)])
}

fn vjp_reshaping<T: Element>(g: &mut Graph<T>, node: NodeId, ct: NodeId, _: &[bool]) -> Result<Vec<Option<NodeId>>> {
    let (op, ins) = args(g, node);
    let xs = g.shape(ins[0]).to_vec();
    let gx = match op {
        Op::Reshape(_) => g.reshape(&ct, &xs)?,
        Op::BroadcastTo(_) => g.sum_to(&ct, &xs)?,
        Op::SumTo(_) => g.broadcast_to(&ct, &xs)?,
        _ => unreachable!(),
    };
    Ok(vec![Some(gx)])
}

fn vjp_conv2d<T: Element>(g: &mut Graph<T>, node: NodeId, ct: NodeId, needs: &[bool]) -> Result<Vec<Option<NodeId>>> {
    let (op, ins) = args(g, node);
    let Op::Conv2d(geom) = op else { unreachable!() };
    let (x, w) = (ins[0], ins[1]);
    let xs = g.shape(x).to_vec();
    let ws = g.shape(w).to_vec();
    let gx = if needs[0] {
        Some(g.push(
            Op::Conv2dBackwardInput {
                geom,
                input_hw: (xs[2], xs[3]),
            },
            &[ct, w],
        )?)
    } else {
        None
    };
    let gw = if needs[1] {
        Some(conv_weight_grad(g, x, ct, geom, (ws[2], ws[3]))?)
    } else {
        None
    };
    Ok(vec![gx, gw])
}

pub(crate) fn conv_weight_grad<T: Element>(
    g: &mut Graph<T>,
    x: NodeId,
    ct: NodeId,
    geom: ConvGeom,
    kernel: (usize, usize),
) -> Result<NodeId> {
    g.push(
        Op::Conv2dBackwardWeight {
            geom,
            kernel,
            groups: 1,
        },
        &[x, ct],
    )
}

fn vjp_pool2d<T: Element>(g: &mut Graph<T>, node: NodeId, ct: NodeId, _: &[bool]) -> Result<Vec<Option<NodeId>>> {
    let (op, ins) = args(g, node);
    let Op::Pool2d { kind, window, stride } = op else { unreachable!() };
    let xs = g.shape(ins[0]).to_vec();
    let bw = Op::Pool2dBackward {
        kind,
        window,
        stride,
        input_hw: (xs[2], xs[3]),
    };
    let gx = match kind {
        PoolKind::Max => g.push(bw, &[ins[0], ct])?,
        PoolKind::Avg => g.push(bw, &[ct])?,
    };
    Ok(vec![Some(gx)])
}

fn vjp_gather<T: Element>(g: &mut Graph<T>, node: NodeId, ct: NodeId, needs: &[bool]) -> Result<Vec<Option<NodeId>>> {
    let (_, ins) = args(g, node);
    let (table, ids) = (ins[0], ins[1]);
    if needs[1] {
        return Err(Error::UnsupportedOp("gather is not differentiable in its ids".into()));
    }
    let vocab = g.shape(table)[0];
    let gt = g.push(Op::ScatterAdd { vocab, batch_dims: 0 }, &[ids, ct])?;
    Ok(vec![Some(gt), None])
}

fn vjp_slicing<T: Element>(g: &mut Graph<T>, node: NodeId, ct: NodeId, needs: &[bool]) -> Result<Vec<Option<NodeId>>> {
    let (op, ins) = args(g, node);
    match op {
        Op::Slice { axis, start, len } => {
            let extent = g.shape(ins[0])[axis];
            let gx = g.push(
                Op::Pad {
                    axis,
                    before: start,
                    after: extent - start - len,
                },
                &[ct],
            )?;
            Ok(vec![Some(gx)])
        }
        Op::Pad { axis, before, .. } => {
            let len = g.shape(ins[0])[axis];
            Ok(vec![Some(g.slice(&ct, axis, before, len)?)])
        }
        Op::Concat { axis } => {
            let mut out = Vec::with_capacity(ins.len());
            let mut start = 0;
            for (i, a) in ins.iter().enumerate() {
                let len = g.shape(*a)[axis];
                out.push(if needs[i] {
                    Some(g.slice(&ct, axis, start, len)?)
                } else {
                    None
                });
                start += len;
            }
            Ok(out)
        }
        _ => unreachable!(),
    }
}

fn vjp_softmax_ce<T: Element>(g: &mut Graph<T>, node: NodeId, ct: NodeId, needs: &[bool]) -> Result<Vec<Option<NodeId>>> {
    let (_, ins) = args(g, node);
    if needs[1] {
        return Err(Error::UnsupportedOp("cross entropy is not differentiable in its labels".into()));
    }
    let gl = g.push(Op::SoftmaxCrossEntropyGrad, &[ins[0], ins[1], ct])?;
    Ok(vec![Some(gl), None])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{uniform, RngState};

    /// Central differences of `sum(w ⊙ f(params))` with a fixed random
    /// weighting `w`, against the symbolic gradient.
    fn check(build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId, shapes: &[&[usize]], seed: u64) {
        check_with(build, shapes, seed, |s, r| uniform(s, -1.0, 1.0, r))
    }

    fn check_with(
        build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
        shapes: &[&[usize]],
        seed: u64,
        init: impl Fn(&[usize], &mut RngState) -> Tensor<f64>,
    ) {
        let mut rng = RngState::new(seed, 1);
        let mut g = Graph::<f64>::new();
        let ps: Vec<NodeId> = shapes.iter().map(|s| g.param(s)).collect();
        let y = build(&mut g, &ps);
        let wshape = g.shape(y).to_vec();
        let w = g.input(&wshape);
        let wy = g.mul(&y, &w).unwrap();
        let loss = g.sum_all(&wy).unwrap();
        g.loss = Some(loss);
        let params: Vec<Tensor<f64>> = shapes.iter().map(|s| init(s, &mut rng)).collect();
        let weights = vec![uniform(&wshape, -1.0, 1.0, &mut rng)];

        let gg = grad_graph(&g).unwrap();
        gg.validate().unwrap();
        let analytic = exec::interpret(&gg, &weights, &params).unwrap().outputs;

        let f = |ps: &[Tensor<f64>]| exec::interpret(&g, &weights, ps).unwrap().loss.unwrap().data()[0];
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            for k in 0..p.numel() {
                let mut plus = params.clone();
                plus[pi].data_mut()[k] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[k] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let an = analytic[pi].data()[k];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                    "param {pi}[{k}]: symbolic {an} vs finite difference {fd}"
                );
            }
        }
    }

    #[test]
    fn unary_rules() {
        use UnaryKind::*;
        for (i, k) in [Neg, Exp, Tanh, Sigmoid, Relu, Square].into_iter().enumerate() {
            check(|g, p| g.unary(k, &p[0]).unwrap(), &[&[3, 4]], i as u64);
        }
        let pos = |s: &[usize], r: &mut RngState| uniform(s, 0.5, 2.0, r);
        check_with(|g, p| g.unary(Log, &p[0]).unwrap(), &[&[5]], 7, pos);
        check_with(|g, p| g.unary(Sqrt, &p[0]).unwrap(), &[&[5]], 8, pos);
    }

    #[test]
    fn binary_rules_with_broadcasting() {
        use BinaryKind::*;
        for (i, k) in [Add, Sub, Mul, Max].into_iter().enumerate() {
            check(|g, p| g.binary(k, &p[0], &p[1]).unwrap(), &[&[2, 3], &[3]], 10 + i as u64);
            check(|g, p| g.binary(k, &p[0], &p[1]).unwrap(), &[&[2, 1], &[1, 3]], 20 + i as u64);
        }
        let away = |s: &[usize], r: &mut RngState| uniform(s, 1.0, 2.0, r);
        check_with(|g, p| g.div(&p[0], &p[1]).unwrap(), &[&[2, 3], &[3]], 30, away);
    }

    #[test]
    fn shared_operand_counts_twice() {
        // d/dx sum(w * x * x) = 2 w x
        check(|g, p| g.mul(&p[0], &p[0]).unwrap(), &[&[4]], 31);
    }

    #[test]
    fn matmul_rules_all_transposes() {
        for (i, (ta, tb)) in [(false, false), (true, false), (false, true), (true, true)].into_iter().enumerate() {
            let a: &[usize] = if ta { &[4, 3] } else { &[3, 4] };
            let b: &[usize] = if tb { &[2, 4] } else { &[4, 2] };
            check(|g, p| g.matmul_t(&p[0], &p[1], ta, tb).unwrap(), &[a, b], 40 + i as u64);
            let a3: &[usize] = if ta { &[2, 4, 3] } else { &[2, 3, 4] };
            let b3: &[usize] = if tb { &[2, 2, 4] } else { &[2, 4, 2] };
            check(|g, p| g.matmul_t(&p[0], &p[1], ta, tb).unwrap(), &[a3, b], 50 + i as u64);
            check(|g, p| g.matmul_t(&p[0], &p[1], ta, tb).unwrap(), &[a, b3], 60 + i as u64);
            check(|g, p| g.matmul_t(&p[0], &p[1], ta, tb).unwrap(), &[a3, b3], 70 + i as u64);
        }
    }

    #[test]
    fn reduce_and_reshape_rules() {
        for (i, k) in [ReduceKind::Sum, ReduceKind::Mean, ReduceKind::Max].into_iter().enumerate() {
            check(|g, p| g.reduce(k, &p[0], &[1]).unwrap(), &[&[2, 3, 4]], 80 + i as u64);
            check(|g, p| g.reduce(k, &p[0], &[0, 2]).unwrap(), &[&[2, 3, 4]], 90 + i as u64);
        }
        check(|g, p| g.reshape(&p[0], &[6, 2]).unwrap(), &[&[3, 4]], 100);
        check(|g, p| g.broadcast_to(&p[0], &[2, 3, 4]).unwrap(), &[&[3, 1]], 101);
        check(|g, p| g.sum_to(&p[0], &[1, 4]).unwrap(), &[&[3, 4]], 102);
    }

    #[test]
    fn conv_and_pool_rules() {
        check(|g, p| g.conv2d(&p[0], &p[1], 1, 0).unwrap(), &[&[2, 2, 5, 5], &[3, 2, 3, 3]], 110);
        check(|g, p| g.conv2d(&p[0], &p[1], 2, 1).unwrap(), &[&[1, 2, 5, 5], &[2, 2, 3, 3]], 111);
        check(|g, p| g.pool2d(PoolKind::Avg, &p[0], 2, 2).unwrap(), &[&[2, 2, 4, 4]], 112);
        check(|g, p| g.pool2d(PoolKind::Max, &p[0], 2, 1).unwrap(), &[&[1, 2, 4, 4]], 113);
    }

    #[test]
    fn indexing_and_loss_rules() {
        let ids = Tensor::from_ids(&[2, 3], &[0, 4, 0, 1, 1, 3]).unwrap();
        check(
            |g, p| {
                let i = g.constant(ids.clone()).unwrap();
                g.gather(&p[0], &i).unwrap()
            },
            &[&[5, 2]],
            120,
        );
        check(|g, p| g.slice(&p[0], 1, 1, 2).unwrap(), &[&[2, 4]], 121);
        check(|g, p| g.concat(&[p[0], p[1]], 0).unwrap(), &[&[1, 3], &[2, 3]], 122);
        check(
            |g, p| g.push(Op::Pad { axis: 0, before: 1, after: 2 }, &[p[0]]).unwrap(),
            &[&[2, 2]],
            123,
        );
        let labels = Tensor::from_ids(&[3], &[2, 0, 1]).unwrap();
        check(
            |g, p| {
                let l = g.constant(labels.clone()).unwrap();
                g.softmax_ce(&p[0], &l).unwrap()
            },
            &[&[3, 4]],
            124,
        );
    }

    #[test]
    fn chained_program() {
        check(
            |g, p| {
                let h = g.matmul(&p[0], &p[1]).unwrap();
                let h = g.add(&h, &p[2]).unwrap();
                let h = g.unary(UnaryKind::Tanh, &h).unwrap();
                let h = g.mul(&h, &h).unwrap();
                g.reduce(ReduceKind::Mean, &h, &[1]).unwrap()
            },
            &[&[3, 4], &[4, 5], &[5]],
            130,
        );
    }

    #[test]
    fn unused_param_gets_zeros_and_no_rule_is_an_error() {
        let mut g = Graph::<f64>::new();
        let a = g.param(&[2]);
        let _unused = g.param(&[3]);
        let s = g.sum_all(&a).unwrap();
        g.loss = Some(s);
        let gg = grad_graph(&g).unwrap();
        let r = exec::interpret(&gg, &[], &[Tensor::full(&[2], 1.0), Tensor::full(&[3], 1.0)]).unwrap();
        assert_eq!(r.outputs[0].data(), &[1., 1.]);
        assert_eq!(r.outputs[1].data(), &[0., 0., 0.]);

        let mut g = Graph::<f64>::new();
        let x = g.param(&[1, 1, 4, 4]);
        let c = g
            .push(
                Op::Im2Col {
                    geom: ConvGeom { stride: 1, pad: 0 },
                    kernel: (2, 2),
                },
                &[x],
            )
            .unwrap();
        let s = g.sum_all(&c).unwrap();
        g.loss = Some(s);
        assert!(matches!(grad_graph(&g).unwrap_err(), Error::UnsupportedOp(_)));
    }

    #[test]
    fn only_needed_nodes_are_differentiated() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[3]);
        let w = g.param(&[3]);
        // a branch that does not depend on w must not grow the graph
        let xx = g.unary(UnaryKind::Exp, &x).unwrap();
        let y = g.mul(&xx, &w).unwrap();
        let l = g.sum_all(&y).unwrap();
        let before = g.len();
        let grads = backward(&mut g, l, &[w]).unwrap();
        // seed, broadcast of seed, reshape, multiply: nothing for exp(x)
        assert!(g.len() - before <= 4, "{g}");
        assert!(grads[0].is_some());
    }
}
