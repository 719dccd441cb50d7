//! Allocating, shape-checked entry points over the primitive kernels.

use crate::element::Element;
use crate::error::Result;
use crate::ops::Op;
use crate::tensor::kernels::ConvGeom;

use super::{BinaryKind, PoolKind, ReduceKind, Tensor, UnaryKind};

pub fn ew_binary<T: Element>(kind: BinaryKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    Op::Binary(kind).apply(&[a, b])
}

pub fn ew_unary<T: Element>(kind: UnaryKind, a: &Tensor<T>) -> Result<Tensor<T>> {
    Op::Unary(kind).apply(&[a])
}

pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    Op::MatMul { ta: false, tb: false }.apply(&[a, b])
}

pub fn reduce<T: Element>(kind: ReduceKind, a: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    Op::Reduce {
        kind,
        axes: axes.to_vec(),
    }
    .apply(&[a])
}

pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    Op::Conv2d(ConvGeom { stride, pad }).apply(&[x, w])
}

pub fn pool2d<T: Element>(
    kind: PoolKind,
    x: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    Op::Pool2d {
        kind,
        window,
        stride,
    }
    .apply(&[x])
}

/// Mean over every spatial position: `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    reduce(ReduceKind::Mean, x, &[2, 3])
}

pub fn gather_rows<T: Element>(table: &Tensor<T>, ids: &Tensor<T>) -> Result<Tensor<T>> {
    Op::Gather.apply(&[table, ids])
}

/// Adjoint of [`gather_rows`]: rows of `grad_out` summed into a `[V,E]`
/// table; duplicate ids accumulate.
pub fn scatter_add<T: Element>(
    grad_out: &Tensor<T>,
    ids: &Tensor<T>,
    vocab: usize,
) -> Result<Tensor<T>> {
    Op::ScatterAdd {
        vocab,
        batch_dims: 0,
    }
    .apply(&[ids, grad_out])
}

pub fn softmax_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &Tensor<T>,
) -> Result<Tensor<T>> {
    Op::SoftmaxCrossEntropy.apply(&[logits, labels])
}
