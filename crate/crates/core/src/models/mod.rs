//! The six benchmark architectures, written once against [`Emitter`] so the
//! same code traces graphs and runs eagerly.

mod lstm;

pub use lstm::{lstm_cell, lstm_scan, lstm_unrolled, LstmState, LstmWeights};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Emitted, Emitter, Program};
use crate::rng::{uniform, RngState};
use crate::tensor::kernels::ConvGeom;
use crate::tensor::{PoolKind, ReduceKind, Tensor, UnaryKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logreg,
    Fcnn,
    MnistCnn,
    CifarCnn,
    Embed,
    Lstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Logreg,
        ModelKind::Fcnn,
        ModelKind::MnistCnn,
        ModelKind::CifarCnn,
        ModelKind::Embed,
        ModelKind::Lstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Logreg => "logreg",
            ModelKind::Fcnn => "fcnn",
            ModelKind::MnistCnn => "mnist_cnn",
            ModelKind::CifarCnn => "cifar_cnn",
            ModelKind::Embed => "embed",
            ModelKind::Lstm => "lstm",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?}; expected one of logreg, fcnn, mnist_cnn, cifar_cnn, embed, lstm")))
    }
}

pub const VOCAB: usize = 10_004;
pub const SEQ_LEN: usize = 256;
pub const ADULT_FEATURES: usize = 104;

/// How a parameterized layer maps its input to its output; strategies that
/// work layer by layer dispatch on this.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// `z = a·W (+ b)` with `a [N, in]`, `W [in, out]`.
    Dense,
    /// `z = conv(x, W) (+ b)` with `W [D, C, kh, kw]`.
    Conv { geom: ConvGeom, kernel: (usize, usize) },
    /// `z = table[ids]` with `table [V, E]`.
    Embedding { vocab: usize },
    Lstm,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv { .. } => "conv2d",
            LayerKind::Embedding { .. } => "embedding",
            LayerKind::Lstm => "lstm",
        }
    }
}

/// A parameterized layer as traced: its input, its output (after any bias)
/// and the parameter slots it owns, weight first.
#[derive(Clone, Debug)]
pub struct Tap<V> {
    pub kind: LayerKind,
    pub input: V,
    pub output: V,
    pub params: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Forward<V> {
    pub logits: V,
    pub taps: Vec<Tap<V>>,
    /// Shape of every layer output in order, for conformance checks.
    pub trace: Vec<(&'static str, Vec<usize>)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Initialization bound is `1/√fan_in`; `None` marks a zero-initialized
    /// bias.
    pub fan_in: Option<usize>,
}

impl ParamSpec {
    fn weight(name: &str, shape: &[usize], fan_in: usize) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            fan_in: Some(fan_in),
        }
    }

    fn bias(name: &str, n: usize) -> Self {
        ParamSpec {
            name: name.into(),
            shape: vec![n],
            fan_in: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Model {
    pub kind: ModelKind,
    pub seq_len: usize,
    pub params: Vec<ParamSpec>,
}

impl Model {
    pub fn build(kind: ModelKind) -> Self {
        Self::with_seq_len(kind, SEQ_LEN)
    }

    /// Sequence models at a shorter length, for fast tests. Parameter
    /// shapes do not depend on it.
    pub fn with_seq_len(kind: ModelKind, seq_len: usize) -> Self {
        use ParamSpec as P;
        let params = match kind {
            ModelKind::Logreg => vec![P::weight("linear.weight", &[ADULT_FEATURES, 1], ADULT_FEATURES), P::bias("linear.bias", 1)],
            ModelKind::Fcnn => vec![
                P::weight("fc1.weight", &[ADULT_FEATURES, 50], ADULT_FEATURES),
                P::bias("fc1.bias", 50),
                P::weight("fc2.weight", &[50, 10], 50),
                P::bias("fc2.bias", 10),
            ],
            ModelKind::MnistCnn => vec![
                P::weight("conv1.weight", &[16, 1, 8, 8], 64),
                P::bias("conv1.bias", 16),
                P::weight("conv2.weight", &[32, 16, 4, 4], 256),
                P::bias("conv2.bias", 32),
                P::weight("fc1.weight", &[512, 32], 512),
                P::bias("fc1.bias", 32),
                P::weight("fc2.weight", &[32, 10], 32),
                P::bias("fc2.bias", 10),
            ],
            ModelKind::CifarCnn => {
                let chans = [(3, 32), (32, 32), (32, 64), (64, 64), (64, 128), (128, 128), (128, 256), (256, 10)];
                chans
                    .iter()
                    .enumerate()
                    .flat_map(|(i, &(c, d))| {
                        [
                            P::weight(&format!("conv{}.weight", i + 1), &[d, c, 3, 3], c * 9),
                            P::bias(&format!("conv{}.bias", i + 1), d),
                        ]
                    })
                    .collect()
            }
            ModelKind::Embed => vec![
                P::weight("embedding.table", &[VOCAB, 16], 16),
                P::weight("fc.weight", &[16, 2], 16),
                P::bias("fc.bias", 2),
            ],
            ModelKind::Lstm => vec![
                P::weight("embedding.table", &[VOCAB, 100], 100),
                P::weight("lstm.w", &[100, 400], 100),
                P::weight("lstm.u", &[100, 400], 100),
                P::bias("lstm.b", 400),
                P::weight("fc.weight", &[100, 2], 100),
                P::bias("fc.bias", 2),
            ],
        };
        Model { kind, seq_len, params }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params.iter().map(|p| p.shape.clone()).collect()
    }

    /// Shape of one example, without the batch axis.
    pub fn example_shape(&self) -> Vec<usize> {
        match self.kind {
            ModelKind::Logreg | ModelKind::Fcnn => vec![ADULT_FEATURES],
            ModelKind::MnistCnn => vec![1, 28, 28],
            ModelKind::CifarCnn => vec![3, 32, 32],
            ModelKind::Embed | ModelKind::Lstm => vec![self.seq_len],
        }
    }

    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        let mut s = vec![n];
        s.extend(self.example_shape());
        s
    }

    pub fn num_classes(&self) -> usize {
        match self.kind {
            ModelKind::Logreg | ModelKind::Embed | ModelKind::Lstm => 2,
            _ => 10,
        }
    }

    /// Inputs are integer token ids rather than real features.
    pub fn takes_tokens(&self) -> bool {
        matches!(self.kind, ModelKind::Embed | ModelKind::Lstm)
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init<T: Element>(&self, rng: &mut RngState) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .map(|p| match p.fan_in {
                Some(f) => {
                    let bound = 1.0 / (f as f64).sqrt();
                    uniform(&p.shape, -bound, bound, rng)
                }
                None => Tensor::zeros(&p.shape),
            })
            .collect()
    }

    /// Random inputs and labels of the right kind: token ids for sequence
    /// models, uniform `[0, 1)` features otherwise.
    pub fn random_batch<T: Element>(&self, n: usize, rng: &mut RngState) -> (Tensor<T>, Tensor<T>) {
        let shape = self.batch_shape(n);
        let x = if self.takes_tokens() {
            let ids: Vec<usize> = (0..shape.iter().product()).map(|_| rng.below(VOCAB as u64) as usize).collect();
            Tensor::from_ids(&shape, &ids).expect("shape matches ids")
        } else {
            uniform(&shape, 0.0, 1.0, rng)
        };
        let labels: Vec<usize> = (0..n).map(|_| rng.below(self.num_classes() as u64) as usize).collect();
        (x, Tensor::from_ids(&[n], &labels).expect("shape matches labels"))
    }

    /// Logits `[N, classes]` for inputs `[N, example_shape..]`.
    pub fn forward<T: Element, E: Emitter<T>>(&self, e: &mut E, x: &E::Value, p: &[E::Value]) -> Result<Forward<E::Value>> {
        let xs = e.shape_of(x);
        if xs.len() != self.example_shape().len() + 1 || xs[1..] != self.example_shape()[..] {
            return Err(Error::shape(
                "model input",
                format!("{} expects [N, {:?}], got {xs:?}", self.kind, self.example_shape()),
            ));
        }
        let n = xs[0];
        let mut f = Builder {
            taps: Vec::new(),
            trace: Vec::new(),
        };
        let logits = match self.kind {
            ModelKind::Logreg => {
                let z = f.dense(e, x, p, 0)?;
                // one logit for class 1 against a fixed zero for class 0
                let l = e.apply(crate::ops::Op::Pad { axis: 1, before: 1, after: 0 }, &[z])?;
                f.log(e, "logits", &l);
                l
            }
            ModelKind::Fcnn => {
                let z = f.dense(e, x, p, 0)?;
                let h = e.unary(UnaryKind::Relu, &z)?;
                f.dense(e, &h, p, 2)?
            }
            ModelKind::MnistCnn => {
                let z = f.conv(e, x, p, 0, ConvGeom { stride: 2, pad: 3 })?;
                let h = e.unary(UnaryKind::Relu, &z)?;
                let h = e.pool2d(PoolKind::Max, &h, 2, 1)?;
                f.log(e, "maxpool1", &h);
                // a stride-2 4x4 window over 13 rows only ever reads the first 12
                let h = e.slice(&h, 2, 0, 12)?;
                let h = e.slice(&h, 3, 0, 12)?;
                let z = f.conv(e, &h, p, 2, ConvGeom { stride: 2, pad: 0 })?;
                let h = e.unary(UnaryKind::Relu, &z)?;
                let h = e.pool2d(PoolKind::Max, &h, 2, 1)?;
                f.log(e, "maxpool2", &h);
                let h = e.reshape(&h, &[n, 512])?;
                let z = f.dense(e, &h, p, 4)?;
                let h = e.unary(UnaryKind::Relu, &z)?;
                f.dense(e, &h, p, 6)?
            }
            ModelKind::CifarCnn => {
                let mut h = x.clone();
                for i in 0..8 {
                    let z = f.conv(e, &h, p, 2 * i, ConvGeom { stride: 1, pad: 1 })?;
                    h = if i == 7 { z } else { e.unary(UnaryKind::Tanh, &z)? };
                    if i % 2 == 1 && i < 7 {
                        h = e.pool2d(PoolKind::Avg, &h, 2, 2)?;
                        f.log(e, "avgpool", &h);
                    }
                }
                let l = e.reduce(ReduceKind::Mean, &h, &[2, 3])?;
                f.log(e, "global_avgpool", &l);
                l
            }
            ModelKind::Embed => {
                let z = f.embedding(e, x, p, 0)?;
                let h = e.reduce(ReduceKind::Mean, &z, &[1])?;
                f.log(e, "avgpool1d", &h);
                f.dense(e, &h, p, 1)?
            }
            ModelKind::Lstm => {
                let z = f.embedding(e, x, p, 0)?;
                let out = lstm_unrolled(e, &z, &LstmWeights { w: &p[1], u: &p[2], b: &p[3] })?;
                f.taps.push(Tap {
                    kind: LayerKind::Lstm,
                    input: z,
                    output: out.clone(),
                    params: vec![1, 2, 3],
                });
                f.log(e, "lstm", &out);
                let h = e.reduce(ReduceKind::Mean, &out, &[1])?;
                f.log(e, "avgpool1d", &h);
                f.dense(e, &h, p, 4)?
            }
        };
        Ok(Forward {
            logits,
            taps: f.taps,
            trace: f.trace,
        })
    }
}

struct Builder<V> {
    taps: Vec<Tap<V>>,
    trace: Vec<(&'static str, Vec<usize>)>,
}

impl<V: Clone> Builder<V> {
    fn log<T: Element, E: Emitter<T, Value = V>>(&mut self, e: &E, what: &'static str, v: &V) {
        self.trace.push((what, e.shape_of(v)));
    }

    fn dense<T: Element, E: Emitter<T, Value = V>>(&mut self, e: &mut E, a: &V, p: &[V], w: usize) -> Result<V> {
        let z = e.matmul(a, &p[w])?;
        let z = e.add(&z, &p[w + 1])?;
        self.tap(e, LayerKind::Dense, "dense", a, &z, vec![w, w + 1]);
        Ok(z)
    }

    fn conv<T: Element, E: Emitter<T, Value = V>>(&mut self, e: &mut E, x: &V, p: &[V], w: usize, geom: ConvGeom) -> Result<V> {
        let ws = e.shape_of(&p[w]);
        let z = e.conv2d(x, &p[w], geom.stride, geom.pad)?;
        let b = e.reshape(&p[w + 1], &[ws[0], 1, 1])?;
        let z = e.add(&z, &b)?;
        let kind = LayerKind::Conv { geom, kernel: (ws[2], ws[3]) };
        self.tap(e, kind, "conv2d", x, &z, vec![w, w + 1]);
        Ok(z)
    }

    fn embedding<T: Element, E: Emitter<T, Value = V>>(&mut self, e: &mut E, ids: &V, p: &[V], t: usize) -> Result<V> {
        let vocab = e.shape_of(&p[t])[0];
        let z = e.gather(&p[t], ids)?;
        self.tap(e, LayerKind::Embedding { vocab }, "embedding", ids, &z, vec![t]);
        Ok(z)
    }

    fn tap<T: Element, E: Emitter<T, Value = V>>(&mut self, e: &E, kind: LayerKind, what: &'static str, input: &V, output: &V, params: Vec<usize>) {
        self.log(e, what, output);
        self.taps.push(Tap {
            kind,
            input: input.clone(),
            output: output.clone(),
            params,
        });
    }
}

/// How per-example losses are combined into the traced loss.
#[derive(Clone, Debug, PartialEq)]
pub enum LossForm {
    /// Sum over examples: gradients are sums of per-example gradients.
    Sum,
    /// Mean over examples.
    Mean,
    /// `Σ w_i·ℓ_i` with the weights as a third program input.
    Weighted,
}

/// A model plus softmax cross-entropy as a traceable program on a batch of
/// `n` examples. Inputs are `(x, labels)` (plus weights for
/// [`LossForm::Weighted`]); outputs are the per-example losses.
#[derive(Clone, Debug)]
pub struct LossProgram<'a> {
    pub model: &'a Model,
    pub n: usize,
    pub form: LossForm,
}

impl<T: Element> Program<T> for LossProgram<'_> {
    fn input_shapes(&self) -> Vec<Vec<usize>> {
        let mut v = vec![self.model.batch_shape(self.n), vec![self.n]];
        if self.form == LossForm::Weighted {
            v.push(vec![self.n]);
        }
        v
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.model.param_shapes()
    }

    fn emit<E: Emitter<T>>(&self, e: &mut E, inputs: &[E::Value], params: &[E::Value]) -> Result<Emitted<E::Value>> {
        let fwd = self.model.forward(e, &inputs[0], params)?;
        let per = e.softmax_ce(&fwd.logits, &inputs[1])?;
        let loss = match self.form {
            LossForm::Sum => e.sum_all(&per)?,
            LossForm::Mean => e.reduce(ReduceKind::Mean, &per, &[0])?,
            LossForm::Weighted => {
                let w = e.mul(&per, &inputs[2])?;
                e.sum_all(&w)?
            }
        };
        Ok(Emitted {
            outputs: vec![per],
            loss: Some(loss),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{eval_eager, record, Graph};

    fn shapes(m: &Model, n: usize) -> Vec<(&'static str, Vec<usize>)> {
        let mut g = Graph::<f32>::new();
        let x = g.input(&m.batch_shape(n));
        let ps: Vec<_> = m.param_shapes().iter().map(|s| g.param(s)).collect();
        m.forward(&mut g, &x, &ps).unwrap().trace
    }

    #[test]
    fn parameter_counts_follow_layer_arithmetic() {
        // (in·out + out) per dense layer, (D·C·kh·kw + D) per conv layer
        let dense = |i: usize, o: usize| i * o + o;
        let conv = |c: usize, d: usize, k: usize| d * c * k * k + d;
        let cifar: usize = [(3, 32), (32, 32), (32, 64), (64, 64), (64, 128), (128, 128), (128, 256), (256, 10)]
            .iter()
            .map(|&(c, d)| conv(c, d, 3))
            .sum();
        let expect = [
            (ModelKind::Logreg, dense(104, 1)),
            (ModelKind::Fcnn, dense(104, 50) + dense(50, 10)),
            (ModelKind::MnistCnn, conv(1, 16, 8) + conv(16, 32, 4) + dense(512, 32) + dense(32, 10)),
            (ModelKind::CifarCnn, cifar),
            (ModelKind::Embed, 10_004 * 16 + dense(16, 2)),
            (ModelKind::Lstm, 10_004 * 100 + 2 * 100 * 400 + 400 + dense(100, 2)),
        ];
        for (k, n) in expect {
            let m = Model::build(k);
            println!("{k}: {} parameters", m.param_count());
            assert_eq!(m.param_count(), n, "{k}");
        }
    }

    #[test]
    fn published_parameter_counts() {
        assert_eq!(Model::build(ModelKind::Logreg).param_count(), 105);
        assert_eq!(Model::build(ModelKind::MnistCnn).param_count(), 26_010);
        assert_eq!(Model::build(ModelKind::CifarCnn).param_count(), 605_226);
        assert_eq!(Model::build(ModelKind::Embed).param_count(), 160_098);
        assert_eq!(Model::build(ModelKind::Lstm).param_count(), 1_081_002);
    }

    #[test]
    fn layer_shapes_conform() {
        let m = Model::build(ModelKind::Fcnn);
        assert_eq!(shapes(&m, 3), vec![("dense", vec![3, 50]), ("dense", vec![3, 10])]);

        let m = Model::build(ModelKind::MnistCnn);
        assert_eq!(
            shapes(&m, 2),
            vec![
                ("conv2d", vec![2, 16, 14, 14]),
                ("maxpool1", vec![2, 16, 13, 13]),
                ("conv2d", vec![2, 32, 5, 5]),
                ("maxpool2", vec![2, 32, 4, 4]),
                ("dense", vec![2, 32]),
                ("dense", vec![2, 10]),
            ]
        );
        assert_eq!(32 * 4 * 4, 512);

        let t = shapes(&Model::build(ModelKind::CifarCnn), 2);
        let convs: Vec<&Vec<usize>> = t.iter().filter(|(k, _)| *k == "conv2d").map(|(_, s)| s).collect();
        assert_eq!(convs.len(), 8);
        assert_eq!(convs[0], &vec![2, 32, 32, 32]);
        assert_eq!(convs[3], &vec![2, 64, 16, 16]);
        assert_eq!(convs[5], &vec![2, 128, 8, 8]);
        assert_eq!(convs[7], &vec![2, 10, 4, 4]);
        assert_eq!(t.last().unwrap(), &("global_avgpool", vec![2, 10]));

        let t = shapes(&Model::build(ModelKind::Embed), 2);
        assert_eq!(t, vec![("embedding", vec![2, 256, 16]), ("avgpool1d", vec![2, 16]), ("dense", vec![2, 2])]);

        let t = shapes(&Model::with_seq_len(ModelKind::Lstm, 7), 2);
        assert_eq!(
            t,
            vec![
                ("embedding", vec![2, 7, 100]),
                ("lstm", vec![2, 7, 100]),
                ("avgpool1d", vec![2, 100]),
                ("dense", vec![2, 2])
            ]
        );
    }

    #[test]
    fn embed_forward_on_token_batch() {
        let m = Model::build(ModelKind::Embed);
        let params = m.init::<f32>(&mut RngState::new(1, 0));
        let ids: Vec<usize> = (0..512).map(|i| (i * 7919) % VOCAB).collect();
        let x = Tensor::from_ids(&[2, 256], &ids).unwrap();
        let y = Tensor::from_ids(&[2], &[0, 1]).unwrap();
        let p = LossProgram { model: &m, n: 2, form: LossForm::Sum };
        let out = eval_eager(&p, &[x, y], &params).unwrap();
        assert_eq!(out.outputs[0].shape(), &[2]);
        let mut g = Graph::<f32>::new();
        let xi = g.input(&[2, 256]);
        let ps: Vec<_> = m.param_shapes().iter().map(|s| g.param(s)).collect();
        let f = m.forward(&mut g, &xi, &ps).unwrap();
        assert_eq!(g.shape(f.logits), &[2, 2]);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        for k in ModelKind::ALL {
            let m = Model::with_seq_len(k, 4);
            let a = m.init::<f64>(&mut RngState::new(9, 0));
            let b = m.init::<f64>(&mut RngState::new(9, 0));
            assert_eq!(a, b);
            for (t, spec) in a.iter().zip(&m.params) {
                match spec.fan_in {
                    Some(f) => assert!(t.max_abs() <= 1.0 / (f as f64).sqrt()),
                    None => assert_eq!(t.max_abs(), 0.0),
                }
            }
        }
    }

    #[test]
    fn loss_values() {
        let m = Model::build(ModelKind::Fcnn);
        let zeros: Vec<Tensor<f64>> = m.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        let x = Tensor::full(&[3, 104], 0.5);
        let y = Tensor::from_ids(&[3], &[0, 4, 9]).unwrap();
        let p = LossProgram { model: &m, n: 3, form: LossForm::Sum };
        let out = eval_eager(&p, &[x.clone(), y.clone()], &zeros).unwrap();
        for v in out.outputs[0].data() {
            assert!((v - 10f64.ln()).abs() < 1e-15);
        }
        let bad = Tensor::from_ids(&[3], &[0, 4, 10]).unwrap();
        assert!(matches!(eval_eager(&p, &[x, bad], &zeros).unwrap_err(), Error::Index { .. }));
        let g = record::<f64, _>(&p).unwrap();
        g.validate().unwrap();
    }

    #[test]
    fn kinds_parse_and_print() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert!("resnet".parse::<ModelKind>().is_err());
    }
}
