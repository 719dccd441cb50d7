use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Eager, Emitter};
use crate::tensor::{Tensor, UnaryKind};

/// Weights of one LSTM layer; gate blocks are ordered input, forget,
/// candidate, output along the `4H` axis.
pub struct LstmWeights<'a, V> {
    /// `[E, 4H]`
    pub w: &'a V,
    /// `[H, 4H]`
    pub u: &'a V,
    /// `[4H]`
    pub b: &'a V,
}

/// State after one step. `None` stands for an all-zero state, which lets
/// the first step skip the recurrent product without changing the result.
pub struct LstmState<V> {
    pub h: Option<V>,
    pub c: Option<V>,
}

/// One step of the standard LSTM recurrence on `x_t [N, E]`:
///
/// ```text
/// [i f g o] = x_t·W + h·U + b
/// c' = σ(f)⊙c + σ(i)⊙tanh(g)
/// h' = σ(o)⊙tanh(c')
/// ```
pub fn lstm_cell<T: Element, E: Emitter<T>>(
    e: &mut E,
    x_t: &E::Value,
    state: &LstmState<E::Value>,
    p: &LstmWeights<'_, E::Value>,
) -> Result<(E::Value, E::Value)> {
    let gw = e.shape_of(p.w);
    let gu = e.shape_of(p.u);
    let hidden = gu[0];
    if gw.len() != 2 || gu.len() != 2 || gw[1] != 4 * hidden || gu[1] != 4 * hidden || e.shape_of(p.b) != [4 * hidden] {
        return Err(Error::shape(
            "lstm_cell",
            format!("W {gw:?}, U {gu:?}, b {:?} for hidden size {hidden}", e.shape_of(p.b)),
        ));
    }
    let mut z = e.matmul(x_t, p.w)?;
    if let Some(h) = &state.h {
        let r = e.matmul(h, p.u)?;
        z = e.add(&z, &r)?;
    }
    let z = e.add(&z, p.b)?;
    let gate = |e: &mut E, k: usize, act: UnaryKind| -> Result<E::Value> {
        let s = e.slice(&z, 1, k * hidden, hidden)?;
        e.unary(act, &s)
    };
    let i = gate(e, 0, UnaryKind::Sigmoid)?;
    let f = gate(e, 1, UnaryKind::Sigmoid)?;
    let g = gate(e, 2, UnaryKind::Tanh)?;
    let o = gate(e, 3, UnaryKind::Sigmoid)?;
    let ig = e.mul(&i, &g)?;
    let c = match &state.c {
        Some(c) => {
            let fc = e.mul(&f, c)?;
            e.add(&fc, &ig)?
        }
        None => ig,
    };
    let tc = e.unary(UnaryKind::Tanh, &c)?;
    let h = e.mul(&o, &tc)?;
    Ok((h, c))
}

/// Statically unrolled layer over `xs [N, L, E]`, returning every hidden
/// state stacked as `[N, L, H]`.
pub fn lstm_unrolled<T: Element, E: Emitter<T>>(e: &mut E, xs: &E::Value, p: &LstmWeights<'_, E::Value>) -> Result<E::Value> {
    let s = e.shape_of(xs);
    let (n, len, emb) = (s[0], s[1], s[2]);
    let hidden = e.shape_of(p.u)[0];
    let mut state = LstmState { h: None, c: None };
    let mut outs = Vec::with_capacity(len);
    for t in 0..len {
        let x = e.slice(xs, 1, t, 1)?;
        let x = e.reshape(&x, &[n, emb])?;
        let (h, c) = lstm_cell(e, &x, &state, p)?;
        outs.push(e.reshape(&h, &[n, 1, hidden])?);
        state = LstmState { h: Some(h), c: Some(c) };
    }
    e.concat(&outs, 1)
}

/// Scan-style execution: the same cell stepped by a host loop, each step
/// computed immediately, with only the carried state kept between steps.
pub fn lstm_scan<T: Element>(xs: &Tensor<T>, w: &Tensor<T>, u: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    use std::rc::Rc;
    let s = xs.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("lstm_scan", format!("inputs {s:?} are not [N, L, E]")));
    }
    let (n, len, emb) = (s[0], s[1], s[2]);
    let hidden = u.shape()[0];
    let mut e = Eager::default();
    let (w, u, b) = (Rc::new(w.clone()), Rc::new(u.clone()), Rc::new(b.clone()));
    let p = LstmWeights { w: &w, u: &u, b: &b };
    let mut state: LstmState<Rc<Tensor<T>>> = LstmState { h: None, c: None };
    let mut out = vec![T::zero(); n * len * hidden];
    for t in 0..len {
        let mut x = vec![T::zero(); n * emb];
        for r in 0..n {
            let src = (r * len + t) * emb;
            x[r * emb..(r + 1) * emb].copy_from_slice(&xs.data()[src..src + emb]);
        }
        let x = Rc::new(Tensor::new(vec![n, emb], x)?);
        let (h, c) = lstm_cell(&mut e, &x, &state, &p)?;
        for r in 0..n {
            let dst = (r * len + t) * hidden;
            out[dst..dst + hidden].copy_from_slice(&h.data()[r * hidden..(r + 1) * hidden]);
        }
        state = LstmState { h: Some(h), c: Some(c) };
    }
    Tensor::new(vec![n, len, hidden], out)
}
