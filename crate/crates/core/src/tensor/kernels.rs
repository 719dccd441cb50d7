//! Allocation-free kernels writing into caller-provided output slices.
//!
//! Every kernel fully overwrites its output: buffers handed out by the
//! graph executor are recycled and hold stale values.

use crate::element::Element;
use crate::error::{Error, Result};

use super::layout::Layout;
use super::{BinaryKind, PoolKind, ReduceKind, UnaryKind, View};

pub(crate) fn unary_into<T: Element>(kind: UnaryKind, x: &[T], out: &mut [T]) -> Result<()> {
    match kind {
        UnaryKind::Log => check_domain("log", x, |v| v > T::zero())?,
        UnaryKind::Sqrt => check_domain("sqrt", x, |v| v >= T::zero())?,
        _ => {}
    }
    macro_rules! run {
        ($k:expr) => {
            for (o, &v) in out.iter_mut().zip(x) {
                *o = $k.apply(v);
            }
        };
    }
    match kind {
        UnaryKind::Neg => run!(UnaryKind::Neg),
        UnaryKind::Exp => run!(UnaryKind::Exp),
        UnaryKind::Log => run!(UnaryKind::Log),
        UnaryKind::Tanh => run!(UnaryKind::Tanh),
        UnaryKind::Sigmoid => run!(UnaryKind::Sigmoid),
        UnaryKind::Relu => run!(UnaryKind::Relu),
        UnaryKind::Square => run!(UnaryKind::Square),
        UnaryKind::Sqrt => run!(UnaryKind::Sqrt),
        UnaryKind::Step => run!(UnaryKind::Step),
    }
    Ok(())
}

fn check_domain<T: Element>(op: &'static str, x: &[T], ok: impl Fn(T) -> bool) -> Result<()> {
    match x.iter().position(|&v| !ok(v)) {
        Some(index) => Err(Error::Domain {
            op,
            index,
            value: x[index].as_f64(),
        }),
        None => Ok(()),
    }
}

pub(crate) fn binary_into<T: Element>(
    kind: BinaryKind,
    a: View<'_, T>,
    b: View<'_, T>,
    out_shape: &[usize],
    out: &mut [T],
) {
    let layout = Layout::new(out_shape, &[a.shape, b.shape]);
    let n = layout.inner();
    let (sa, sb) = (layout.inner_stride(0), layout.inner_stride(1));
    macro_rules! run {
        ($k:expr) => {
            layout.for_each_row(|o, base| {
                let row = &mut out[o..o + n];
                if sa == 1 && sb == 1 {
                    let (ra, rb) = (&a.data[base[0]..base[0] + n], &b.data[base[1]..base[1] + n]);
                    for ((r, &x), &y) in row.iter_mut().zip(ra).zip(rb) {
                        *r = $k.apply(x, y);
                    }
                } else {
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = $k.apply(a.data[base[0] + j * sa], b.data[base[1] + j * sb]);
                    }
                }
            })
        };
    }
    match kind {
        BinaryKind::Add => run!(BinaryKind::Add),
        BinaryKind::Sub => run!(BinaryKind::Sub),
        BinaryKind::Mul => run!(BinaryKind::Mul),
        BinaryKind::Div => run!(BinaryKind::Div),
        BinaryKind::Max => run!(BinaryKind::Max),
        BinaryKind::Eq => run!(BinaryKind::Eq),
    }
}

/// Copies `x` broadcast to `out_shape`.
pub(crate) fn broadcast_to_into<T: Element>(x: View<'_, T>, out_shape: &[usize], out: &mut [T]) {
    let layout = Layout::new(out_shape, &[x.shape]);
    let n = layout.inner();
    let s = layout.inner_stride(0);
    layout.for_each_row(|o, base| {
        for (j, r) in out[o..o + n].iter_mut().enumerate() {
            *r = x.data[base[0] + j * s];
        }
    });
}

/// Accumulates `x` into `out` (shape `target`, which broadcasts to
/// `x.shape`). Summation per output element follows input linear order.
pub(crate) fn sum_to_into<T: Element>(x: View<'_, T>, target: &[usize], out: &mut [T]) {
    out.fill(T::zero());
    accumulate(x, target, out, |acc, v| *acc = *acc + v);
}

fn accumulate<T: Element>(
    x: View<'_, T>,
    target: &[usize],
    out: &mut [T],
    f: impl Fn(&mut T, T),
) {
    let layout = Layout::new(x.shape, &[target]);
    let n = layout.inner();
    let s = layout.inner_stride(0);
    layout.for_each_row(|o, base| {
        let row = &x.data[o..o + n];
        if s == 0 {
            let acc = &mut out[base[0]];
            for &v in row {
                f(acc, v);
            }
        } else {
            for (j, &v) in row.iter().enumerate() {
                f(&mut out[base[0] + j * s], v);
            }
        }
    });
}

/// Reduction over `axes`; `out` has those axes removed.
pub(crate) fn reduce_into<T: Element>(
    kind: ReduceKind,
    x: View<'_, T>,
    axes: &[usize],
    out: &mut [T],
) {
    let keep: Vec<usize> = x
        .shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect();
    match kind {
        ReduceKind::Sum => sum_to_into(x, &keep, out),
        ReduceKind::Mean => {
            sum_to_into(x, &keep, out);
            let count: usize = axes.iter().map(|&a| x.shape[a]).product();
            let c = T::from_usize(count).unwrap();
            for v in out.iter_mut() {
                *v = *v / c;
            }
        }
        ReduceKind::Max => {
            out.fill(T::neg_infinity());
            accumulate(x, &keep, out, |acc, v| {
                if v > *acc {
                    *acc = v
                }
            });
        }
    }
}

/// Matrix-product geometry: optional shared batch extent plus `m, k, n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct MatMulDims {
    pub batch: Option<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

pub(crate) fn matmul_dims(a: &[usize], ta: bool, b: &[usize], tb: bool) -> Result<MatMulDims> {
    let bad = || {
        Error::shape(
            "matmul",
            format!("cannot multiply {a:?}{} by {b:?}{}", tr(ta), tr(tb)),
        )
    };
    if !(2..=3).contains(&a.len()) || !(2..=3).contains(&b.len()) {
        return Err(bad());
    }
    let (ab, ar, ac) = split3(a);
    let (bb, br, bc) = split3(b);
    let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if ka != kb {
        return Err(bad());
    }
    let batch = match (ab, bb) {
        (Some(x), Some(y)) if x != y => return Err(bad()),
        (Some(x), _) | (None, Some(x)) => Some(x),
        (None, None) => None,
    };
    Ok(MatMulDims { batch, m, k: ka, n })
}

fn tr(t: bool) -> &'static str {
    if t {
        "ᵀ"
    } else {
        ""
    }
}

fn split3(s: &[usize]) -> (Option<usize>, usize, usize) {
    if s.len() == 3 {
        (Some(s[0]), s[1], s[2])
    } else {
        (None, s[0], s[1])
    }
}

pub(crate) fn matmul_into<T: Element>(
    a: View<'_, T>,
    ta: bool,
    b: View<'_, T>,
    tb: bool,
    out: &mut [T],
) -> Result<()> {
    let d = matmul_dims(a.shape, ta, b.shape, tb)?;
    let (m, k, n) = (d.m, d.k, d.n);
    // stored (rows, cols) of each operand slice
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let a_batched = a.shape.len() == 3;
    let b_batched = b.shape.len() == 3;
    if k == 1 {
        // outer products: one multiply per element, packing would dominate
        for i in 0..d.batch.unwrap_or(1) {
            let av = &a.data[if a_batched { i * m } else { 0 }..];
            let bv = &b.data[if b_batched { i * n } else { 0 }..];
            for (r, row) in out[i * m * n..(i + 1) * m * n].chunks_exact_mut(n).enumerate() {
                let x = av[r * rsa as usize];
                if csb == 1 {
                    for (o, &y) in row.iter_mut().zip(&bv[..n]) {
                        *o = x * y;
                    }
                } else {
                    for (c, o) in row.iter_mut().enumerate() {
                        *o = x * bv[c * csb as usize];
                    }
                }
            }
        }
        return Ok(());
    }
    match d.batch {
        None => T::gemm(m, k, n, a.data, rsa, csa, b.data, rsb, csb, T::zero(), out, n as isize, 1),
        Some(bs) if a_batched && !b_batched && !ta => T::gemm(
            bs * m,
            k,
            n,
            a.data,
            rsa,
            csa,
            b.data,
            rsb,
            csb,
            T::zero(),
            out,
            n as isize,
            1,
        ),
        Some(bs) => {
            for i in 0..bs {
                let ao = if a_batched { i * m * k } else { 0 };
                let bo = if b_batched { i * k * n } else { 0 };
                T::gemm(
                    m,
                    k,
                    n,
                    &a.data[ao..ao + m * k],
                    rsa,
                    csa,
                    &b.data[bo..bo + k * n],
                    rsb,
                    csb,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
    }
    Ok(())
}

/// Stride and zero padding shared by convolution-family kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output extent, or `None` when the window does not tile exactly.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = (input + 2 * self.pad).checked_sub(kernel)?;
        if self.stride == 0 || span % self.stride != 0 {
            return None;
        }
        Some(span / self.stride + 1)
    }
}

/// Image `[c, h, w]` to column matrix `[c·kh·kw, ho·wo]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Element>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ci * kh + i) * kw + j) * p;
                for oy in 0..ho {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    let dst = &mut col[row + oy * wo..row + (oy + 1) * wo];
                    if y < 0 || y >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &img[(ci * h + y as usize) * w..(ci * h + y as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let x = (ox * g.stride + j) as isize - g.pad as isize;
                        *d = if x < 0 || x >= w as isize {
                            T::zero()
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `img`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add<T: Element>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    img: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ci * kh + i) * kw + j) * p;
                for oy in 0..ho {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let base = (ci * h + y as usize) * w;
                    for ox in 0..wo {
                        let x = (ox * g.stride + j) as isize - g.pad as isize;
                        if x >= 0 && x < w as isize {
                            img[base + x as usize] = img[base + x as usize] + col[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x [N,C,H,W] ⋆ w [D,C,kh,kw] -> [N,D,Ho,Wo]` via im2col + GEMM.
pub(crate) fn conv2d_into<T: Element>(
    x: View<'_, T>,
    w: View<'_, T>,
    g: ConvGeom,
    out: &mut [T],
) {
    let [n, c, h, wd] = dims4(x.shape);
    let [d, _, kh, kw] = dims4(w.shape);
    let ho = g.out_extent(h, kh).unwrap();
    let wo = g.out_extent(wd, kw).unwrap();
    let (ckk, p) = (c * kh * kw, ho * wo);
    let mut col = vec![T::zero(); ckk * p];
    for b in 0..n {
        im2col(&x.data[b * c * h * wd..(b + 1) * c * h * wd], c, h, wd, kh, kw, g, ho, wo, &mut col);
        T::gemm(
            d,
            ckk,
            p,
            w.data,
            ckk as isize,
            1,
            &col,
            p as isize,
            1,
            T::zero(),
            &mut out[b * d * p..(b + 1) * d * p],
            p as isize,
            1,
        );
    }
}

/// Input cotangent of [`conv2d_into`]: `g [N,D,Ho,Wo]`, `w` → `[N,C,H,W]`.
pub(crate) fn conv2d_backward_input_into<T: Element>(
    grad: View<'_, T>,
    w: View<'_, T>,
    g: ConvGeom,
    (h, wd): (usize, usize),
    out: &mut [T],
) {
    let [n, d, ho, wo] = dims4(grad.shape);
    let [_, c, kh, kw] = dims4(w.shape);
    let (ckk, p) = (c * kh * kw, ho * wo);
    let mut col = vec![T::zero(); ckk * p];
    out.fill(T::zero());
    for b in 0..n {
        T::gemm(
            ckk,
            d,
            p,
            w.data,
            1,
            ckk as isize,
            &grad.data[b * d * p..(b + 1) * d * p],
            p as isize,
            1,
            T::zero(),
            &mut col,
            p as isize,
            1,
        );
        col2im_add(&col, c, h, wd, kh, kw, g, ho, wo, &mut out[b * c * h * wd..(b + 1) * c * h * wd]);
    }
}

/// Weight cotangent with channel groups: `x [N,G·C,H,W]`, `g [N,G·D,Ho,Wo]`
/// → `[G·D, C, kh, kw]`, each group correlating only its own channels.
pub(crate) fn conv2d_backward_weight_into<T: Element>(
    x: View<'_, T>,
    grad: View<'_, T>,
    g: ConvGeom,
    (kh, kw): (usize, usize),
    groups: usize,
    out: &mut [T],
) {
    let [n, gc, h, wd] = dims4(x.shape);
    let [_, gd, ho, wo] = dims4(grad.shape);
    let (c, d) = (gc / groups, gd / groups);
    let (ckk, p) = (c * kh * kw, ho * wo);
    let mut col = vec![T::zero(); ckk * p];
    out.fill(T::zero());
    for b in 0..n {
        for grp in 0..groups {
            let xo = (b * gc + grp * c) * h * wd;
            im2col(&x.data[xo..xo + c * h * wd], c, h, wd, kh, kw, g, ho, wo, &mut col);
            let go = (b * gd + grp * d) * p;
            T::gemm(
                d,
                p,
                ckk,
                &grad.data[go..go + d * p],
                p as isize,
                1,
                &col,
                1,
                p as isize,
                T::one(),
                &mut out[grp * d * ckk..(grp + 1) * d * ckk],
                ckk as isize,
                1,
            );
        }
    }
}

/// `x [N,C,H,W]` → patches `[N, C·kh·kw, Ho·Wo]`.
pub(crate) fn im2col_batch_into<T: Element>(
    x: View<'_, T>,
    (kh, kw): (usize, usize),
    g: ConvGeom,
    out: &mut [T],
) {
    let [n, c, h, w] = dims4(x.shape);
    let ho = g.out_extent(h, kh).unwrap();
    let wo = g.out_extent(w, kw).unwrap();
    let per = c * kh * kw * ho * wo;
    for b in 0..n {
        im2col(
            &x.data[b * c * h * w..(b + 1) * c * h * w],
            c,
            h,
            w,
            kh,
            kw,
            g,
            ho,
            wo,
            &mut out[b * per..(b + 1) * per],
        );
    }
}

pub(crate) fn pool_out_extent(input: usize, window: usize, stride: usize) -> Option<usize> {
    ConvGeom { stride, pad: 0 }.out_extent(input, window)
}

pub(crate) fn pool_into<T: Element>(
    kind: PoolKind,
    x: View<'_, T>,
    window: usize,
    stride: usize,
    out: &mut [T],
) {
    let [n, c, h, w] = dims4(x.shape);
    let ho = pool_out_extent(h, window, stride).unwrap();
    let wo = pool_out_extent(w, window, stride).unwrap();
    let area = T::from_usize(window * window).unwrap();
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = match kind {
                    PoolKind::Avg => T::zero(),
                    PoolKind::Max => T::neg_infinity(),
                };
                for i in 0..window {
                    let row = &src[(oy * stride + i) * w + ox * stride..][..window];
                    for &v in row {
                        acc = match kind {
                            PoolKind::Avg => acc + v,
                            PoolKind::Max => {
                                if v > acc {
                                    v
                                } else {
                                    acc
                                }
                            }
                        };
                    }
                }
                dst[oy * wo + ox] = match kind {
                    PoolKind::Avg => acc / area,
                    PoolKind::Max => acc,
                };
            }
        }
    }
}

/// Cotangent of [`pool_into`]. Max routes each output cotangent to the
/// first maximal element of its window (row-major order).
pub(crate) fn pool_backward_into<T: Element>(
    kind: PoolKind,
    x: Option<View<'_, T>>,
    grad: View<'_, T>,
    window: usize,
    stride: usize,
    (h, w): (usize, usize),
    out: &mut [T],
) {
    let [n, c, ho, wo] = dims4(grad.shape);
    let area = T::from_usize(window * window).unwrap();
    out.fill(T::zero());
    for plane in 0..n * c {
        let gsrc = &grad.data[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = gsrc[oy * wo + ox];
                match kind {
                    PoolKind::Avg => {
                        let share = gv / area;
                        for i in 0..window {
                            for j in 0..window {
                                let idx = (oy * stride + i) * w + ox * stride + j;
                                dst[idx] = dst[idx] + share;
                            }
                        }
                    }
                    PoolKind::Max => {
                        let xs = &x.expect("max pool backward needs the input").data
                            [plane * h * w..(plane + 1) * h * w];
                        let mut best = (oy * stride) * w + ox * stride;
                        for i in 0..window {
                            for j in 0..window {
                                let idx = (oy * stride + i) * w + ox * stride + j;
                                if xs[idx] > xs[best] {
                                    best = idx;
                                }
                            }
                        }
                        dst[best] = dst[best] + gv;
                    }
                }
            }
        }
    }
}

/// Validates an id stored as a float and returns it as an index.
pub(crate) fn as_index<T: Element>(v: T, position: usize, bound: usize) -> Result<usize> {
    let f = v.as_f64();
    if f.fract() != 0.0 || f < 0.0 || f >= bound as f64 {
        return Err(Error::Index {
            position,
            id: f,
            bound,
        });
    }
    Ok(f as usize)
}

/// `out[p, :] = table[ids[p], :]` for every position `p`.
pub(crate) fn gather_into<T: Element>(table: View<'_, T>, ids: &[T], out: &mut [T]) -> Result<()> {
    let (v, e) = (table.shape[0], table.shape[1]);
    for (p, &id) in ids.iter().enumerate() {
        let row = as_index(id, p, v)?;
        out[p * e..(p + 1) * e].copy_from_slice(&table.data[row * e..(row + 1) * e]);
    }
    Ok(())
}

/// Row accumulation with `groups` independent output tables:
/// `ids` is `[groups · per]`, `grad` is `[groups · per, E]`, `out` is
/// `[groups, V, E]`.
pub(crate) fn scatter_add_into<T: Element>(
    ids: &[T],
    grad: &[T],
    groups: usize,
    vocab: usize,
    e: usize,
    out: &mut [T],
) -> Result<()> {
    out.fill(T::zero());
    let per = ids.len() / groups.max(1);
    for (p, &id) in ids.iter().enumerate() {
        let row = as_index(id, p, vocab)?;
        let grp = p / per.max(1);
        let dst = &mut out[(grp * vocab + row) * e..(grp * vocab + row + 1) * e];
        for (d, &gv) in dst.iter_mut().zip(&grad[p * e..(p + 1) * e]) {
            *d = *d + gv;
        }
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub(crate) fn slice_into<T: Element>(
    x: View<'_, T>,
    axis: usize,
    start: usize,
    len: usize,
    out: &mut [T],
) {
    let (outer, ext, inner) = around_axis(x.shape, axis);
    for o in 0..outer {
        let src = &x.data[(o * ext + start) * inner..(o * ext + start + len) * inner];
        out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
    }
}

pub(crate) fn pad_into<T: Element>(
    x: View<'_, T>,
    axis: usize,
    before: usize,
    after: usize,
    out: &mut [T],
) {
    let (outer, ext, inner) = around_axis(x.shape, axis);
    let total = before + ext + after;
    for o in 0..outer {
        let dst = &mut out[o * total * inner..(o + 1) * total * inner];
        dst[..before * inner].fill(T::zero());
        dst[before * inner..(before + ext) * inner]
            .copy_from_slice(&x.data[o * ext * inner..(o + 1) * ext * inner]);
        dst[(before + ext) * inner..].fill(T::zero());
    }
}

pub(crate) fn concat_into<T: Element>(parts: &[View<'_, T>], axis: usize, out: &mut [T]) {
    let (outer, _, inner) = around_axis(parts[0].shape, axis);
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    for o in 0..outer {
        let mut off = o * total * inner;
        for p in parts {
            let ext = p.shape[axis];
            out[off..off + ext * inner]
                .copy_from_slice(&p.data[o * ext * inner..(o + 1) * ext * inner]);
            off += ext * inner;
        }
    }
}

fn log_sum_exp<T: Element>(row: &[T]) -> T {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let s = row.iter().fold(T::zero(), |acc, &v| acc + (v - m).exp());
    m + s.ln()
}

/// Per-row `logsumexp(x) - x[label]` over logits `[N, K]`.
pub(crate) fn softmax_ce_into<T: Element>(
    logits: View<'_, T>,
    labels: &[T],
    out: &mut [T],
) -> Result<()> {
    let k = logits.shape[1];
    for (i, o) in out.iter_mut().enumerate() {
        let row = &logits.data[i * k..(i + 1) * k];
        let l = as_index(labels[i], i, k)?;
        *o = log_sum_exp(row) - row[l];
    }
    Ok(())
}

/// `(softmax(x) - onehot(label)) · g` per row.
pub(crate) fn softmax_ce_grad_into<T: Element>(
    logits: View<'_, T>,
    labels: &[T],
    grad: &[T],
    out: &mut [T],
) -> Result<()> {
    let k = logits.shape[1];
    for (i, &gv) in grad.iter().enumerate() {
        let row = &logits.data[i * k..(i + 1) * k];
        let l = as_index(labels[i], i, k)?;
        let lse = log_sum_exp(row);
        for (j, o) in out[i * k..(i + 1) * k].iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            let target = if j == l { T::one() } else { T::zero() };
            *o = (p - target) * gv;
        }
    }
    Ok(())
}

pub(crate) fn dims4(s: &[usize]) -> [usize; 4] {
    [s[0], s[1], s[2], s[3]]
}
