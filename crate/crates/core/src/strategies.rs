//! Per-example gradient strategies behind one interface.
//!
//! | name        | method                                                      |
//! |-------------|-------------------------------------------------------------|
//! | `naive`     | one gradient computation per example                        |
//! | `vmap`      | the per-example gradient graph, batched by [`vmap`]         |
//! | `outer`     | dense weight gradients as outer products `aᵢᵀδᵢ`             |
//! | `norms`     | only per-example norms `‖δᵢ‖²(‖aᵢ‖² + 1)`, no gradients      |
//! | `groupconv` | conv weight gradients as one correlation with `B` groups    |
//! | `jacmm`     | per-layer transposed-Jacobian products from one sweep       |
//!
//! Strategies other than `naive` and `vmap` work layer by layer: one
//! batched forward pass, one backward sweep to the output of every
//! parameterized layer, then a per-layer rule turning the saved input and
//! the output cotangent into `B` gradient rows.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, grad_graph};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::exec::{interpret, CompiledGraph, Evaluated, Workspace};
use crate::graph::{record, Emitter, Graph, NodeId};
use crate::models::{LayerKind, LossForm, LossProgram, Model, ModelKind};
use crate::ops::Op;
use crate::optimize::OptimizerReport;
use crate::tensor::{ReduceKind, Tensor, UnaryKind};
use crate::vmap::vmap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Naive,
    Vmap,
    Outer,
    Norms,
    GroupConv,
    JacMm,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Naive,
        Strategy::Vmap,
        Strategy::Outer,
        Strategy::Norms,
        Strategy::GroupConv,
        Strategy::JacMm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::Vmap => "vmap",
            Strategy::Outer => "outer",
            Strategy::Norms => "norms",
            Strategy::GroupConv => "groupconv",
            Strategy::JacMm => "jacmm",
        }
    }

    /// Whether this strategy iterates over examples.
    pub fn is_loop(self) -> bool {
        self == Strategy::Naive
    }

    fn handles(self, layer: LayerKind) -> bool {
        match self {
            Strategy::Naive | Strategy::Vmap => true,
            Strategy::Outer | Strategy::Norms => layer == LayerKind::Dense,
            Strategy::GroupConv => matches!(layer, LayerKind::Dense | LayerKind::Conv { .. }),
            Strategy::JacMm => !matches!(layer, LayerKind::Lstm),
        }
    }

    /// `Ok` if every parameterized layer of `model` has a rule here.
    pub fn check_support(self, model: ModelKind) -> Result<()> {
        for layer in layer_kinds(model) {
            if !self.handles(layer) {
                return Err(Error::UnsupportedArchitecture {
                    strategy: self.name().into(),
                    model: model.name().into(),
                    reason: format!("unsupported layer: {}", layer.name()),
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}; expected one of naive, vmap, outer, norms, groupconv, jacmm")))
    }
}

fn layer_kinds(model: ModelKind) -> Vec<LayerKind> {
    use crate::tensor::kernels::ConvGeom;
    let conv = LayerKind::Conv {
        geom: ConvGeom { stride: 1, pad: 0 },
        kernel: (1, 1),
    };
    let emb = LayerKind::Embedding { vocab: crate::models::VOCAB };
    match model {
        ModelKind::Logreg | ModelKind::Fcnn => vec![LayerKind::Dense],
        ModelKind::MnistCnn | ModelKind::CifarCnn => vec![conv, LayerKind::Dense],
        ModelKind::Embed => vec![emb, LayerKind::Dense],
        ModelKind::Lstm => vec![emb, LayerKind::Lstm, LayerKind::Dense],
    }
}

/// Execution style: immediate op-by-op dispatch with re-tracing on every
/// call, or trace once, optimize, and replay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Eager,
    Graph,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Eager => "eager",
            Mode::Graph => "graph",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eager" => Ok(Mode::Eager),
            "graph" => Ok(Mode::Graph),
            _ => Err(Error::Config(format!("unknown mode {s:?}; expected eager or graph"))),
        }
    }
}

/// Per-example gradients, one tensor per parameter with a leading batch
/// axis, or only their global ℓ₂ norms.
#[derive(Clone, Debug, PartialEq)]
pub enum PerExampleGrads<T> {
    Materialized(Vec<Tensor<T>>),
    /// Norms `[B]`.
    NormsOnly(Tensor<T>),
}

impl<T: Element> PerExampleGrads<T> {
    pub fn batch_size(&self) -> usize {
        match self {
            PerExampleGrads::Materialized(g) => g.first().map_or(0, |t| t.shape()[0]),
            PerExampleGrads::NormsOnly(n) => n.numel(),
        }
    }

    pub fn is_norms_only(&self) -> bool {
        matches!(self, PerExampleGrads::NormsOnly(_))
    }

    pub fn blocks(&self) -> Result<&[Tensor<T>]> {
        match self {
            PerExampleGrads::Materialized(g) => Ok(g),
            PerExampleGrads::NormsOnly(_) => Err(Error::Contract("only per-example norms were computed".into())),
        }
    }

    /// Global norm of each example's gradient across all blocks, in f64.
    pub fn norms(&self) -> Vec<f64> {
        match self {
            PerExampleGrads::NormsOnly(n) => n.to_f64_vec(),
            PerExampleGrads::Materialized(g) => {
                let b = self.batch_size();
                let mut sq = vec![0.0; b];
                for t in g {
                    let per = t.numel() / b.max(1);
                    for (i, row) in t.data().chunks(per.max(1)).enumerate().take(b) {
                        sq[i] += sum_squares(row);
                    }
                }
                sq.into_iter().map(f64::sqrt).collect()
            }
        }
    }

    /// Sum over the batch axis of every block.
    pub fn sum_over_batch(&self) -> Result<Vec<Tensor<T>>> {
        self.blocks()?
            .iter()
            .map(|t| {
                let b = t.shape()[0];
                let per = t.numel() / b.max(1);
                let mut acc = vec![T::zero(); per];
                for row in t.data().chunks(per.max(1)).take(b) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
                Tensor::new(t.shape()[1..].to_vec(), acc)
            })
            .collect()
    }
}

/// `Σ v²` in f64 over four interleaved partial sums, which breaks the add
/// dependency chain. The order is fixed, so results are reproducible.
pub fn sum_squares<T: Element>(xs: &[T]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut chunks = xs.chunks_exact(4);
    for c in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            let v = v.as_f64();
            *a += v * v;
        }
    }
    for (a, &v) in acc.iter_mut().zip(chunks.remainder()) {
        let v = v.as_f64();
        *a += v * v;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// Gradient graph of one example's loss: inputs `x [1, ..]`, `y [1]`;
/// outputs the parameter gradients; loss the scalar example loss.
pub fn per_example_graph<T: Element>(model: &Model) -> Result<Graph<T>> {
    let g = record(&LossProgram {
        model,
        n: 1,
        form: LossForm::Sum,
    })?;
    grad_graph(&g)
}

/// Graph producing `Σ wᵢ·∇ℓᵢ` from inputs `x, y, w`: the clipped sum when
/// `w` holds clip scales.
pub fn weighted_grad_graph<T: Element>(model: &Model, batch: usize) -> Result<Graph<T>> {
    grad_graph(&record(&LossProgram {
        model,
        n: batch,
        form: LossForm::Weighted,
    })?)
}

/// Gradient of the mean batch loss, for non-private SGD.
pub fn batch_grad_graph<T: Element>(model: &Model, batch: usize) -> Result<Graph<T>> {
    grad_graph(&record(&LossProgram {
        model,
        n: batch,
        form: LossForm::Mean,
    })?)
}

/// Single graph computing all `B` per-example gradients (or norms) with a
/// vectorized strategy. Inputs `x [B, ..]`, `y [B]` (for `vmap`, each row
/// keeps its singleton example axis: `[B, 1, ..]` and `[B, 1]`); outputs one
/// `[B, ..]` tensor per parameter, or the norms `[B]` for `norms`; loss is
/// the per-example loss vector.
pub fn strategy_graph<T: Element>(model: &Model, strategy: Strategy, batch: usize) -> Result<Graph<T>> {
    strategy.check_support(model.kind)?;
    if batch == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    match strategy {
        Strategy::Naive => Err(Error::Contract("the naive strategy runs one graph per example".into())),
        Strategy::Vmap => vmap(&per_example_graph(model)?, batch),
        _ => layerwise_graph(model, strategy, batch),
    }
}

fn layerwise_graph<T: Element>(model: &Model, strategy: Strategy, b: usize) -> Result<Graph<T>> {
    let mut g = Graph::<T>::new();
    let x = g.input(&model.batch_shape(b));
    let y = g.input(&[b]);
    let ps: Vec<NodeId> = model.param_shapes().iter().map(|s| g.param(s)).collect();
    let fwd = model.forward(&mut g, &x, &ps)?;
    let per = g.softmax_ce(&fwd.logits, &y)?;
    let total = g.sum_all(&per)?;
    let outs: Vec<NodeId> = fwd.taps.iter().map(|t| t.output).collect();
    // Examples never interact, so the cotangent of the summed loss at
    // example i's layer output is exactly ∂ℓᵢ/∂zᵢ.
    let cts = backward(&mut g, total, &outs)?;
    let cts: Vec<NodeId> = cts
        .into_iter()
        .zip(&outs)
        .map(|(c, &o)| match c {
            Some(c) => Ok(c),
            None => {
                let s = g.shape(o).to_vec();
                g.fill(0.0, &s)
            }
        })
        .collect::<Result<_>>()?;

    if strategy == Strategy::Norms {
        let mut acc: Option<NodeId> = None;
        for (tap, &ct) in fwd.taps.iter().zip(&cts) {
            let sq_a = row_sq_norm(&mut g, tap.input)?;
            let sq_d = row_sq_norm(&mut g, ct)?;
            // ‖δ‖²‖a‖² for the weight plus ‖δ‖² for the bias
            let w = g.mul(&sq_a, &sq_d)?;
            let term = g.add(&w, &sq_d)?;
            acc = Some(match acc {
                Some(a) => g.add(&a, &term)?,
                None => term,
            });
        }
        let norms = g.unary(UnaryKind::Sqrt, &acc.expect("dense models have layers"))?;
        g.outputs = vec![norms];
        g.loss = Some(per);
        return Ok(g);
    }

    let mut grads: Vec<Option<NodeId>> = vec![None; ps.len()];
    for (tap, &ct) in fwd.taps.iter().zip(&cts) {
        let w = tap.params[0];
        match tap.kind {
            LayerKind::Dense => {
                let a = g.shape(tap.input).to_vec();
                let d = g.shape(ct).to_vec();
                let a3 = g.reshape(&tap.input, &[b, a[1], 1])?;
                let d3 = g.reshape(&ct, &[b, 1, d[1]])?;
                grads[w] = Some(g.matmul(&a3, &d3)?);
                grads[tap.params[1]] = Some(ct);
            }
            LayerKind::Conv { geom, kernel } => {
                let xs = g.shape(tap.input).to_vec();
                let ds = g.shape(ct).to_vec();
                let (c, d) = (xs[1], ds[1]);
                let gw = if strategy == Strategy::GroupConv {
                    // examples become channel groups of a single image
                    let xg = g.reshape(&tap.input, &[1, b * c, xs[2], xs[3]])?;
                    let dg = g.reshape(&ct, &[1, b * d, ds[2], ds[3]])?;
                    g.push(Op::Conv2dBackwardWeight { geom, kernel, groups: b }, &[xg, dg])?
                } else {
                    let cols = g.push(Op::Im2Col { geom, kernel }, &[tap.input])?;
                    let d3 = g.reshape(&ct, &[b, d, ds[2] * ds[3]])?;
                    g.matmul_t(&d3, &cols, false, true)?
                };
                grads[w] = Some(g.reshape(&gw, &[b, d, c, kernel.0, kernel.1])?);
                grads[tap.params[1]] = Some(g.reduce(ReduceKind::Sum, &ct, &[2, 3])?);
            }
            LayerKind::Embedding { vocab } => {
                grads[w] = Some(g.push(Op::ScatterAdd { vocab, batch_dims: 1 }, &[tap.input, ct])?);
            }
            LayerKind::Lstm => unreachable!("support was checked"),
        }
    }
    g.outputs = grads
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| Error::Trace(format!("parameter {i} is not owned by any layer"))))
        .collect::<Result<_>>()?;
    g.loss = Some(per);
    Ok(g)
}

/// `Σⱼ v[i, j]²` for every row `i`.
fn row_sq_norm<T: Element>(g: &mut Graph<T>, v: NodeId) -> Result<NodeId> {
    let r = g.shape(v).len();
    let sq = g.unary(UnaryKind::Square, &v)?;
    g.reduce(ReduceKind::Sum, &sq, &(1..r).collect::<Vec<_>>())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum PlanKind {
    PerExample,
    Strategy,
    Weighted,
    Batch,
}

struct Compiled<T> {
    graph: CompiledGraph<T>,
    ws: Workspace<T>,
}

/// Runs one strategy for one model in one execution mode, caching
/// compiled graphs per batch size in graph mode.
pub struct Runner<T: Element> {
    model: Model,
    strategy: Strategy,
    mode: Mode,
    fusion: bool,
    cache: HashMap<(PlanKind, usize), Compiled<T>>,
    compile_seconds: f64,
    peak_bytes: u64,
}

impl<T: Element> Runner<T> {
    pub fn new(model: Model, strategy: Strategy, mode: Mode) -> Result<Self> {
        strategy.check_support(model.kind)?;
        Ok(Runner {
            model,
            strategy,
            mode,
            fusion: true,
            cache: HashMap::new(),
            compile_seconds: 0.0,
            peak_bytes: 0,
        })
    }

    /// Disables elementwise fusion in graph mode (for ablations).
    pub fn without_fusion(mut self) -> Self {
        self.fusion = false;
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Total time spent tracing and optimizing graphs so far (graph mode).
    pub fn compile_seconds(&self) -> f64 {
        self.compile_seconds
    }

    /// Largest intermediate footprint seen so far: planned arena bytes in
    /// graph mode, accounted live bytes in eager mode.
    pub fn peak_bytes(&self) -> u64 {
        self.peak_bytes
    }

    fn build(&self, kind: PlanKind, b: usize) -> Result<Graph<T>> {
        match kind {
            PlanKind::PerExample => per_example_graph(&self.model),
            PlanKind::Strategy => strategy_graph(&self.model, self.strategy, b),
            PlanKind::Weighted => weighted_grad_graph(&self.model, b),
            PlanKind::Batch => batch_grad_graph(&self.model, b),
        }
    }

    fn compiled(&mut self, kind: PlanKind, b: usize) -> Result<&mut Compiled<T>> {
        if !self.cache.contains_key(&(kind, b)) {
            let t = Instant::now();
            let g = self.build(kind, b)?;
            let graph = CompiledGraph::compile_with(&g, self.fusion)?;
            let ws = graph.workspace();
            self.compile_seconds += t.elapsed().as_secs_f64();
            self.cache.insert((kind, b), Compiled { graph, ws });
        }
        Ok(self.cache.get_mut(&(kind, b)).unwrap())
    }

    /// Traces and optimizes ahead of time so later timed calls exclude it.
    pub fn prepare(&mut self, b: usize) -> Result<()> {
        if self.mode == Mode::Graph {
            if self.strategy.is_loop() {
                self.compiled(PlanKind::PerExample, 1)?;
            } else {
                self.compiled(PlanKind::Strategy, b)?;
            }
            if self.strategy == Strategy::Norms {
                self.compiled(PlanKind::Weighted, b)?;
            }
        }
        Ok(())
    }

    /// Optimizer summary of the graph this runner executes at batch `b`.
    pub fn report(&mut self, b: usize) -> Result<OptimizerReport> {
        let kind = if self.strategy.is_loop() { PlanKind::PerExample } else { PlanKind::Strategy };
        let b = if self.strategy.is_loop() { 1 } else { b };
        match self.cache.get(&(kind, b)) {
            Some(c) => Ok(c.graph.report().clone()),
            None => Ok(CompiledGraph::compile_with(&self.build(kind, b)?, self.fusion)?.report().clone()),
        }
    }

    fn run(&mut self, kind: PlanKind, b: usize, inputs: &[Tensor<T>], params: &[Tensor<T>]) -> Result<Evaluated<T>> {
        let r = match self.mode {
            Mode::Eager => interpret(&self.build(kind, b)?, inputs, params)?,
            Mode::Graph => {
                let c = self.compiled(kind, b)?;
                c.graph.run(&mut c.ws, inputs, params)?
            }
        };
        self.peak_bytes = self.peak_bytes.max(r.peak_bytes);
        Ok(r)
    }

    /// Per-example gradients and per-example losses for a batch.
    pub fn per_example(&mut self, params: &[Tensor<T>], x: &Tensor<T>, y: &Tensor<T>) -> Result<(PerExampleGrads<T>, Tensor<T>)> {
        let b = check_batch(x, y)?;
        if self.strategy.is_loop() {
            let mut cols: Vec<Vec<Tensor<T>>> = vec![Vec::with_capacity(b); params.len()];
            let mut losses = Vec::with_capacity(b);
            for i in 0..b {
                let r = self.run(PlanKind::PerExample, 1, &[x.select_rows(&[i]), y.select_rows(&[i])], params)?;
                for (c, g) in cols.iter_mut().zip(r.outputs) {
                    c.push(g);
                }
                losses.push(r.loss.expect("per-example graph has a loss"));
            }
            let grads = cols.iter().map(|c| Tensor::stack(c)).collect::<Result<_>>()?;
            return Ok((PerExampleGrads::Materialized(grads), Tensor::stack(&losses)?));
        }
        let inputs = if self.strategy == Strategy::Vmap {
            let mut xs = x.shape().to_vec();
            xs.insert(1, 1);
            [x.clone().reshape(&xs)?, y.clone().reshape(&[b, 1])?]
        } else {
            [x.clone(), y.clone()]
        };
        let mut r = self.run(PlanKind::Strategy, b, &inputs, params)?;
        let losses = r.loss.take().expect("strategy graph has a loss");
        let grads = if self.strategy == Strategy::Norms {
            PerExampleGrads::NormsOnly(r.outputs.pop().unwrap())
        } else {
            PerExampleGrads::Materialized(r.outputs)
        };
        Ok((grads, losses))
    }

    /// `Σᵢ wᵢ·∇ℓᵢ` in a single weighted backward pass.
    pub fn weighted_sum(&mut self, params: &[Tensor<T>], x: &Tensor<T>, y: &Tensor<T>, w: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let b = check_batch(x, y)?;
        if w.shape() != [b] {
            return Err(Error::shape("weighted_sum", format!("weights {:?} for batch {b}", w.shape())));
        }
        Ok(self.run(PlanKind::Weighted, b, &[x.clone(), y.clone(), w.clone()], params)?.outputs)
    }

    /// Mean loss and its gradient, for non-private training.
    pub fn batch_grad(&mut self, params: &[Tensor<T>], x: &Tensor<T>, y: &Tensor<T>) -> Result<(f64, Vec<Tensor<T>>)> {
        let b = check_batch(x, y)?;
        let r = self.run(PlanKind::Batch, b, &[x.clone(), y.clone()], params)?;
        Ok((r.loss.unwrap().data()[0].as_f64(), r.outputs))
    }
}

fn check_batch<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<usize> {
    let b = x.shape().first().copied().unwrap_or(0);
    if b == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    if y.shape() != [b] {
        return Err(Error::shape("batch", format!("inputs {:?} with labels {:?}", x.shape(), y.shape())));
    }
    Ok(b)
}
