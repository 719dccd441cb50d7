//! The primitive operation set shared by tracing, differentiation,
//! batching, optimization and execution.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::layout::{broadcast_shape, broadcasts_to};
use crate::tensor::{BinaryKind, PoolKind, ReduceKind, Tensor, UnaryKind, View};

#[derive(Clone, Debug, PartialEq)]
pub enum Op<T> {
    /// Program input leaf (data, labels, loss weights).
    Input(usize),
    /// Trainable parameter leaf.
    Param(usize),
    Fill {
        value: T,
        shape: Vec<usize>,
    },
    Constant(Tensor<T>),
    Unary(UnaryKind),
    Binary(BinaryKind),
    /// Rank-2 product, or batched when either operand is rank 3.
    MatMul {
        ta: bool,
        tb: bool,
    },
    Reduce {
        kind: ReduceKind,
        axes: Vec<usize>,
    },
    Reshape(Vec<usize>),
    BroadcastTo(Vec<usize>),
    /// Sums broadcast axes away so the result has the given shape.
    SumTo(Vec<usize>),
    Conv2d(ConvGeom),
    Conv2dBackwardInput {
        geom: ConvGeom,
        input_hw: (usize, usize),
    },
    Conv2dBackwardWeight {
        geom: ConvGeom,
        kernel: (usize, usize),
        groups: usize,
    },
    Im2Col {
        geom: ConvGeom,
        kernel: (usize, usize),
    },
    Pool2d {
        kind: PoolKind,
        window: usize,
        stride: usize,
    },
    /// Inputs: `[x, grad]` for max pooling, `[grad]` for average pooling.
    Pool2dBackward {
        kind: PoolKind,
        window: usize,
        stride: usize,
        input_hw: (usize, usize),
    },
    /// `(table [V,E], ids [..]) -> [.., E]`.
    Gather,
    /// `(ids, grad) -> [ids[..batch_dims], vocab, E]`.
    ScatterAdd {
        vocab: usize,
        batch_dims: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Pad {
        axis: usize,
        before: usize,
        after: usize,
    },
    Concat {
        axis: usize,
    },
    /// `(logits [N,K], labels [N]) -> per-example loss [N]`.
    SoftmaxCrossEntropy,
    /// `(logits, labels, grad [N]) -> [N,K]`.
    SoftmaxCrossEntropyGrad,
}

impl<T: Element> Op<T> {
    pub fn name(&self) -> String {
        match self {
            Op::Input(i) => format!("input{i}"),
            Op::Param(i) => format!("param{i}"),
            Op::Fill { .. } => "fill".into(),
            Op::Constant(_) => "constant".into(),
            Op::Unary(k) => k.name().into(),
            Op::Binary(k) => k.name().into(),
            Op::MatMul { .. } => "matmul".into(),
            Op::Reduce { kind, .. } => format!("reduce_{kind:?}").to_lowercase(),
            Op::Reshape(_) => "reshape".into(),
            Op::BroadcastTo(_) => "broadcast_to".into(),
            Op::SumTo(_) => "sum_to".into(),
            Op::Conv2d(_) => "conv2d".into(),
            Op::Conv2dBackwardInput { .. } => "conv2d_backward_input".into(),
            Op::Conv2dBackwardWeight { .. } => "conv2d_backward_weight".into(),
            Op::Im2Col { .. } => "im2col".into(),
            Op::Pool2d { kind, .. } => format!("{kind:?}_pool2d").to_lowercase(),
            Op::Pool2dBackward { kind, .. } => format!("{kind:?}_pool2d_backward").to_lowercase(),
            Op::Gather => "gather".into(),
            Op::ScatterAdd { .. } => "scatter_add".into(),
            Op::Slice { .. } => "slice".into(),
            Op::Pad { .. } => "pad".into(),
            Op::Concat { .. } => "concat".into(),
            Op::SoftmaxCrossEntropy => "softmax_cross_entropy".into(),
            Op::SoftmaxCrossEntropyGrad => "softmax_cross_entropy_grad".into(),
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(
            self,
            Op::Input(_) | Op::Param(_) | Op::Fill { .. } | Op::Constant(_)
        )
    }

    pub fn is_elementwise(&self) -> bool {
        matches!(self, Op::Unary(_) | Op::Binary(_))
    }

    /// Output shape from input shapes, validating every precondition the
    /// kernel relies on.
    pub fn infer_shape(&self, ins: &[&[usize]]) -> Result<Vec<usize>> {
        let name = self.name();
        let arity = |n: usize| -> Result<()> {
            if ins.len() == n {
                Ok(())
            } else {
                Err(Error::Trace(format!(
                    "{name} takes {n} inputs, got {}",
                    ins.len()
                )))
            }
        };
        let rank = |i: usize, r: usize, op: &'static str| -> Result<()> {
            if ins[i].len() == r {
                Ok(())
            } else {
                Err(Error::shape(
                    op,
                    format!("operand {i} must be rank {r}, got {:?}", ins[i]),
                ))
            }
        };
        match self {
            Op::Input(_) | Op::Param(_) => Err(Error::Trace(format!(
                "{name} is a leaf; its shape is declared, not inferred"
            ))),
            Op::Fill { shape, .. } => {
                arity(0)?;
                Ok(shape.clone())
            }
            Op::Constant(t) => {
                arity(0)?;
                Ok(t.shape().to_vec())
            }
            Op::Unary(_) => {
                arity(1)?;
                Ok(ins[0].to_vec())
            }
            Op::Binary(_) => {
                arity(2)?;
                broadcast_shape(ins[0], ins[1])
            }
            Op::MatMul { ta, tb } => {
                arity(2)?;
                let d = kernels::matmul_dims(ins[0], *ta, ins[1], *tb)?;
                let mut s: Vec<usize> = d.batch.into_iter().collect();
                s.extend([d.m, d.n]);
                Ok(s)
            }
            Op::Reduce { axes, .. } => {
                arity(1)?;
                let r = ins[0].len();
                for (i, &a) in axes.iter().enumerate() {
                    if a >= r || axes[..i].contains(&a) {
                        return Err(Error::Axis { axis: a, rank: r });
                    }
                }
                Ok(ins[0]
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !axes.contains(i))
                    .map(|(_, &d)| d)
                    .collect())
            }
            Op::Reshape(s) => {
                arity(1)?;
                if s.iter().product::<usize>() != ins[0].iter().product::<usize>() {
                    return Err(Error::shape(
                        "reshape",
                        format!("cannot view {:?} as {s:?}", ins[0]),
                    ));
                }
                Ok(s.clone())
            }
            Op::BroadcastTo(s) => {
                arity(1)?;
                if !broadcasts_to(ins[0], s) {
                    return Err(Error::shape(
                        "broadcast_to",
                        format!("{:?} does not broadcast to {s:?}", ins[0]),
                    ));
                }
                Ok(s.clone())
            }
            Op::SumTo(s) => {
                arity(1)?;
                if !broadcasts_to(s, ins[0]) {
                    return Err(Error::shape(
                        "sum_to",
                        format!("{s:?} does not broadcast to {:?}", ins[0]),
                    ));
                }
                Ok(s.clone())
            }
            Op::Conv2d(g) => {
                arity(2)?;
                rank(0, 4, "conv2d")?;
                rank(1, 4, "conv2d")?;
                let (x, w) = (ins[0], ins[1]);
                if x[1] != w[1] {
                    return Err(Error::shape(
                        "conv2d",
                        format!("input channels {} vs kernel channels {}", x[1], w[1]),
                    ));
                }
                let (ho, wo) = conv_out(g, x[2], x[3], w[2], w[3])?;
                Ok(vec![x[0], w[0], ho, wo])
            }
            Op::Conv2dBackwardInput { geom, input_hw } => {
                arity(2)?;
                rank(0, 4, "conv2d_backward_input")?;
                rank(1, 4, "conv2d_backward_input")?;
                let (gr, w) = (ins[0], ins[1]);
                let (ho, wo) = conv_out(geom, input_hw.0, input_hw.1, w[2], w[3])?;
                if gr[1] != w[0] || gr[2] != ho || gr[3] != wo {
                    return Err(Error::shape(
                        "conv2d_backward_input",
                        format!("cotangent {gr:?} does not match kernel {w:?}"),
                    ));
                }
                Ok(vec![gr[0], w[1], input_hw.0, input_hw.1])
            }
            Op::Conv2dBackwardWeight {
                geom,
                kernel,
                groups,
            } => {
                arity(2)?;
                rank(0, 4, "conv2d_backward_weight")?;
                rank(1, 4, "conv2d_backward_weight")?;
                let (x, gr) = (ins[0], ins[1]);
                let (ho, wo) = conv_out(geom, x[2], x[3], kernel.0, kernel.1)?;
                if *groups == 0
                    || x[1] % groups != 0
                    || gr[1] % groups != 0
                    || gr[0] != x[0]
                    || gr[2] != ho
                    || gr[3] != wo
                {
                    return Err(Error::shape(
                        "conv2d_backward_weight",
                        format!("input {x:?} and cotangent {gr:?} with {groups} groups"),
                    ));
                }
                Ok(vec![gr[1], x[1] / groups, kernel.0, kernel.1])
            }
            Op::Im2Col { geom, kernel } => {
                arity(1)?;
                rank(0, 4, "im2col")?;
                let x = ins[0];
                let (ho, wo) = conv_out(geom, x[2], x[3], kernel.0, kernel.1)?;
                Ok(vec![x[0], x[1] * kernel.0 * kernel.1, ho * wo])
            }
            Op::Pool2d { window, stride, .. } => {
                arity(1)?;
                rank(0, 4, "pool2d")?;
                let x = ins[0];
                let (ho, wo) = pool_out(x[2], x[3], *window, *stride)?;
                Ok(vec![x[0], x[1], ho, wo])
            }
            Op::Pool2dBackward {
                kind,
                window,
                stride,
                input_hw,
            } => {
                let gi = match kind {
                    PoolKind::Max => {
                        arity(2)?;
                        rank(0, 4, "pool2d_backward")?;
                        1
                    }
                    PoolKind::Avg => {
                        arity(1)?;
                        0
                    }
                };
                rank(gi, 4, "pool2d_backward")?;
                let gr = ins[gi];
                let (ho, wo) = pool_out(input_hw.0, input_hw.1, *window, *stride)?;
                let out = vec![gr[0], gr[1], input_hw.0, input_hw.1];
                if gr[2] != ho || gr[3] != wo || (gi == 1 && ins[0] != out.as_slice()) {
                    return Err(Error::shape(
                        "pool2d_backward",
                        format!("cotangent {gr:?} does not match input {input_hw:?}"),
                    ));
                }
                Ok(out)
            }
            Op::Gather => {
                arity(2)?;
                rank(0, 2, "gather")?;
                let mut s = ins[1].to_vec();
                s.push(ins[0][1]);
                Ok(s)
            }
            Op::ScatterAdd { vocab, batch_dims } => {
                arity(2)?;
                let (ids, gr) = (ins[0], ins[1]);
                if gr.len() != ids.len() + 1 || &gr[..ids.len()] != ids || *batch_dims > ids.len()
                {
                    return Err(Error::shape(
                        "scatter_add",
                        format!("ids {ids:?} vs cotangent {gr:?}"),
                    ));
                }
                let mut s = ids[..*batch_dims].to_vec();
                s.extend([*vocab, gr[gr.len() - 1]]);
                Ok(s)
            }
            Op::Slice { axis, start, len } => {
                arity(1)?;
                let x = ins[0];
                if *axis >= x.len() {
                    return Err(Error::Axis {
                        axis: *axis,
                        rank: x.len(),
                    });
                }
                if start + len > x[*axis] {
                    return Err(Error::shape(
                        "slice",
                        format!("[{start}, {}) exceeds extent {}", start + len, x[*axis]),
                    ));
                }
                let mut s = x.to_vec();
                s[*axis] = *len;
                Ok(s)
            }
            Op::Pad {
                axis,
                before,
                after,
            } => {
                arity(1)?;
                let x = ins[0];
                if *axis >= x.len() {
                    return Err(Error::Axis {
                        axis: *axis,
                        rank: x.len(),
                    });
                }
                let mut s = x.to_vec();
                s[*axis] += before + after;
                Ok(s)
            }
            Op::Concat { axis } => {
                if ins.is_empty() {
                    return Err(Error::Trace("concat of zero operands".into()));
                }
                let first = ins[0];
                if *axis >= first.len() {
                    return Err(Error::Axis {
                        axis: *axis,
                        rank: first.len(),
                    });
                }
                let mut s = first.to_vec();
                s[*axis] = 0;
                for x in ins {
                    let compatible = x.len() == first.len()
                        && (0..first.len()).all(|i| i == *axis || x[i] == first[i]);
                    if !compatible {
                        return Err(Error::shape(
                            "concat",
                            format!("{x:?} vs {first:?} along axis {axis}"),
                        ));
                    }
                    s[*axis] += x[*axis];
                }
                Ok(s)
            }
            Op::SoftmaxCrossEntropy => {
                arity(2)?;
                rank(0, 2, "softmax_cross_entropy")?;
                if ins[1] != [ins[0][0]] {
                    return Err(Error::shape(
                        "softmax_cross_entropy",
                        format!("logits {:?} vs labels {:?}", ins[0], ins[1]),
                    ));
                }
                Ok(vec![ins[0][0]])
            }
            Op::SoftmaxCrossEntropyGrad => {
                arity(3)?;
                rank(0, 2, "softmax_cross_entropy_grad")?;
                let n = ins[0][0];
                if ins[1] != [n] || ins[2] != [n] {
                    return Err(Error::shape(
                        "softmax_cross_entropy_grad",
                        format!("logits {:?}, labels {:?}, grad {:?}", ins[0], ins[1], ins[2]),
                    ));
                }
                Ok(ins[0].to_vec())
            }
        }
    }

    /// Runs the kernel. `out` must have exactly the inferred element count.
    pub fn eval_into(&self, args: &[View<'_, T>], out_shape: &[usize], out: &mut [T]) -> Result<()> {
        match self {
            Op::Input(_) | Op::Param(_) => {
                return Err(Error::Trace(format!("{} is bound, not evaluated", self.name())))
            }
            Op::Fill { value, .. } => out.fill(*value),
            Op::Constant(t) => out.copy_from_slice(t.data()),
            Op::Unary(k) => kernels::unary_into(*k, args[0].data, out)?,
            Op::Binary(k) => kernels::binary_into(*k, args[0], args[1], out_shape, out),
            Op::MatMul { ta, tb } => kernels::matmul_into(args[0], *ta, args[1], *tb, out)?,
            Op::Reduce { kind, axes } => kernels::reduce_into(*kind, args[0], axes, out),
            Op::Reshape(_) => out.copy_from_slice(args[0].data),
            Op::BroadcastTo(_) => kernels::broadcast_to_into(args[0], out_shape, out),
            Op::SumTo(s) => kernels::sum_to_into(args[0], s, out),
            Op::Conv2d(g) => kernels::conv2d_into(args[0], args[1], *g, out),
            Op::Conv2dBackwardInput { geom, input_hw } => {
                kernels::conv2d_backward_input_into(args[0], args[1], *geom, *input_hw, out)
            }
            Op::Conv2dBackwardWeight {
                geom,
                kernel,
                groups,
            } => kernels::conv2d_backward_weight_into(args[0], args[1], *geom, *kernel, *groups, out),
            Op::Im2Col { geom, kernel } => kernels::im2col_batch_into(args[0], *kernel, *geom, out),
            Op::Pool2d {
                kind,
                window,
                stride,
            } => kernels::pool_into(*kind, args[0], *window, *stride, out),
            Op::Pool2dBackward {
                kind,
                window,
                stride,
                input_hw,
            } => {
                let (x, g) = match kind {
                    PoolKind::Max => (Some(args[0]), args[1]),
                    PoolKind::Avg => (None, args[0]),
                };
                kernels::pool_backward_into(*kind, x, g, *window, *stride, *input_hw, out)
            }
            Op::Gather => kernels::gather_into(args[0], args[1].data, out)?,
            Op::ScatterAdd { vocab, batch_dims } => {
                let groups: usize = args[0].shape[..*batch_dims].iter().product();
                let e = *args[1].shape.last().unwrap();
                kernels::scatter_add_into(args[0].data, args[1].data, groups, *vocab, e, out)?
            }
            Op::Slice { axis, start, len } => kernels::slice_into(args[0], *axis, *start, *len, out),
            Op::Pad {
                axis,
                before,
                after,
            } => kernels::pad_into(args[0], *axis, *before, *after, out),
            Op::Concat { axis } => kernels::concat_into(args, *axis, out),
            Op::SoftmaxCrossEntropy => kernels::softmax_ce_into(args[0], args[1].data, out)?,
            Op::SoftmaxCrossEntropyGrad => {
                kernels::softmax_ce_grad_into(args[0], args[1].data, args[2].data, out)?
            }
        }
        Ok(())
    }

    /// Shape check, fresh allocation, kernel: one eager dispatch.
    pub fn apply(&self, args: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let shapes: Vec<&[usize]> = args.iter().map(|t| t.shape()).collect();
        let shape = self.infer_shape(&shapes)?;
        let views: Vec<View<'_, T>> = args.iter().map(|t| t.view()).collect();
        let mut out = vec![T::zero(); shape.iter().product()];
        self.eval_into(&views, &shape, &mut out)?;
        Ok(Tensor::from_parts(shape, out))
    }
}

fn conv_out(g: &ConvGeom, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
    match (g.out_extent(h, kh), g.out_extent(w, kw)) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::shape(
            "conv2d",
            format!(
                "{kh}x{kw} kernel, stride {}, pad {} does not tile a {h}x{w} input",
                g.stride, g.pad
            ),
        )),
    }
}

fn pool_out(h: usize, w: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
    match (
        kernels::pool_out_extent(h, window, stride),
        kernels::pool_out_extent(w, window, stride),
    ) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::shape(
            "pool2d",
            format!("{window}x{window} window, stride {stride} does not tile a {h}x{w} input"),
        )),
    }
}
