//! Self-checks against independent oracles: finite differences, naive
//! per-example loops, hand-written clipping, unoptimized evaluation and a
//! hard-coded support table. Everything runs at 64-bit.

use std::fmt;

use crate::autodiff::grad_graph;
use crate::dpsgd::{clip_scales, dpsgd_step, noisy_mean, private_gradient, DpConfig};
use crate::error::{Error, Result};
use crate::exec::{interpret, CompiledGraph};
use crate::graph::{record, Emitter, Graph, NodeId};
use crate::models::{LossForm, LossProgram, Model, ModelKind};
use crate::ops::Op;
use crate::optimize::optimize;
use crate::rng::{uniform, RngState};
use crate::strategies::{per_example_graph, strategy_graph, Mode, PerExampleGrads, Runner, Strategy};
use crate::tensor::{BinaryKind, PoolKind, ReduceKind, Tensor, UnaryKind};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Largest accepted relative disagreement with finite differences.
pub const FD_TOL: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-3;
/// Coordinates compared per primitive and per model.
pub const FD_COORDS: usize = 20;
/// Strategy agreement bound against the per-example loop.
pub const EQUIV_TOL: f64 = 1e-8;

/// Short sequences keep the unrolled LSTM cheap in the suites below.
pub const CHECK_SEQ_LEN: usize = 5;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn check(name: &'static str, r: Result<String>) -> Check {
    match r {
        Ok(detail) => Check { name, passed: true, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn fail(msg: String) -> Error {
    Error::Contract(msg)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FdReport {
    pub checked: usize,
    /// Coordinates whose ±h probe crossed a kink (one-sided slopes disagree).
    pub skipped: usize,
    pub max_rel: f64,
}

/// Compares the symbolic parameter gradient of `g`'s loss with central
/// differences on `coords` randomly chosen coordinates.
pub fn fd_check(g: &Graph<f64>, inputs: &[Tensor<f64>], params: &[Tensor<f64>], coords: usize, rng: &mut RngState) -> Result<FdReport> {
    let analytic = interpret(&grad_graph(g)?, inputs, params)?.outputs;
    let f = |ps: &[Tensor<f64>]| -> Result<f64> { Ok(interpret(g, inputs, ps)?.loss.expect("loss").data()[0]) };
    let f0 = f(params)?;
    let mut rep = FdReport::default();
    let total: usize = params.iter().map(|p| p.numel()).sum();
    let mut attempts = 0;
    while rep.checked < coords && attempts < 4 * coords.max(total) {
        // round-robin over blocks so every parameter is probed
        let block = attempts % params.len();
        let k = rng.below(params[block].numel() as u64) as usize;
        attempts += 1;
        let mut ps = params.to_vec();
        let x = ps[block].data()[k];
        ps[block].data_mut()[k] = x + FD_STEP;
        let fp = f(&ps)?;
        ps[block].data_mut()[k] = x - FD_STEP;
        let fm = f(&ps)?;
        let fd = (fp - fm) / (2.0 * FD_STEP);
        let (up, down) = ((fp - f0) / FD_STEP, (f0 - fm) / FD_STEP);
        if (up - down).abs() > 1e-2 * (1.0 + fd.abs()) {
            rep.skipped += 1;
            continue;
        }
        let an = analytic[block].data()[k];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(FD_FLOOR);
        rep.max_rel = rep.max_rel.max(rel);
        rep.checked += 1;
        if rel > FD_TOL {
            return Err(fail(format!("param {block}[{k}]: symbolic {an:e}, finite difference {fd:e} (rel {rel:e})")));
        }
    }
    if rep.checked < coords {
        return Err(fail(format!("only {} of {coords} coordinates were checkable", rep.checked)));
    }
    Ok(rep)
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>;

struct PrimCase {
    name: String,
    shapes: Vec<Vec<usize>>,
    lo: f64,
    build: Builder,
}

fn case(name: impl Into<String>, shapes: &[&[usize]], lo: f64, build: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + 'static) -> PrimCase {
    PrimCase {
        name: name.into(),
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        lo,
        build: Box::new(build),
    }
}

/// One small program per differentiable primitive, each with at least
/// `FD_COORDS` parameter entries.
fn primitive_cases() -> Vec<PrimCase> {
    use UnaryKind::*;
    let mut v = Vec::new();
    for k in [Neg, Exp, Tanh, Sigmoid, Relu, Square] {
        v.push(case(format!("unary {}", k.name()), &[&[4, 6]], -1.0, move |g, p| g.unary(k, &p[0])));
    }
    for k in [Log, Sqrt] {
        v.push(case(format!("unary {}", k.name()), &[&[4, 6]], 0.5, move |g, p| g.unary(k, &p[0])));
    }
    for k in [BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul, BinaryKind::Max] {
        v.push(case(format!("binary {}", k.name()), &[&[4, 6], &[6]], -1.0, move |g, p| g.binary(k, &p[0], &p[1])));
    }
    v.push(case("binary div", &[&[4, 6], &[6]], 1.0, |g, p| g.div(&p[0], &p[1])));
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a: &[usize] = if ta { &[5, 4] } else { &[4, 5] };
        let b: &[usize] = if tb { &[3, 5] } else { &[5, 3] };
        v.push(case(format!("matmul ta={ta} tb={tb}"), &[a, b], -1.0, move |g, p| g.matmul_t(&p[0], &p[1], ta, tb)));
    }
    v.push(case("batched matmul", &[&[2, 3, 4], &[2, 4, 3]], -1.0, |g, p| g.matmul(&p[0], &p[1])));
    v.push(case("batched matmul shared rhs", &[&[2, 3, 4], &[4, 3]], -1.0, |g, p| g.matmul(&p[0], &p[1])));
    for k in [ReduceKind::Sum, ReduceKind::Mean, ReduceKind::Max] {
        v.push(case(format!("reduce {k:?}"), &[&[2, 3, 4]], -1.0, move |g, p| g.reduce(k, &p[0], &[0, 2])));
    }
    v.push(case("reshape", &[&[4, 6]], -1.0, |g, p| g.reshape(&p[0], &[3, 8])));
    v.push(case("broadcast", &[&[4, 1, 6]], -1.0, |g, p| g.broadcast_to(&p[0], &[4, 3, 6])));
    v.push(case("sum_to", &[&[4, 6]], -1.0, |g, p| g.sum_to(&p[0], &[1, 6])));
    v.push(case("conv2d", &[&[2, 2, 5, 5], &[3, 2, 3, 3]], -1.0, |g, p| g.conv2d(&p[0], &p[1], 1, 0)));
    v.push(case("conv2d strided padded", &[&[1, 2, 7, 7], &[2, 2, 3, 3]], -1.0, |g, p| g.conv2d(&p[0], &p[1], 2, 1)));
    v.push(case("avg pool", &[&[2, 2, 4, 4]], -1.0, |g, p| g.pool2d(PoolKind::Avg, &p[0], 2, 2)));
    v.push(case("max pool", &[&[2, 2, 4, 4]], -1.0, |g, p| g.pool2d(PoolKind::Max, &p[0], 2, 1)));
    let ids = Tensor::from_ids(&[3, 4], &[0, 4, 0, 1, 1, 3, 6, 6, 2, 5, 0, 3]).expect("ids");
    v.push(case("gather", &[&[7, 3]], -1.0, move |g, p| {
        let i = g.constant(ids.clone())?;
        g.gather(&p[0], &i)
    }));
    v.push(case("slice", &[&[4, 6]], -1.0, |g, p| g.slice(&p[0], 1, 1, 3)));
    v.push(case("pad", &[&[4, 6]], -1.0, |g, p| g.push(Op::Pad { axis: 0, before: 1, after: 2 }, &[p[0]])));
    v.push(case("concat", &[&[2, 6], &[3, 6]], -1.0, |g, p| g.concat(&[p[0], p[1]], 0)));
    let labels = Tensor::from_ids(&[5], &[2, 0, 1, 3, 3]).expect("labels");
    v.push(case("softmax cross entropy", &[&[5, 4]], -1.0, move |g, p| {
        let l = g.constant(labels.clone())?;
        g.softmax_ce(&p[0], &l)
    }));
    v
}

/// Finite-difference check of every primitive's reverse rule. The program
/// is `sum(w ⊙ op(params))` with fixed random weights `w`.
pub fn check_primitives() -> Check {
    check("primitive gradients", (|| {
        let mut worst: f64 = 0.0;
        let cases = primitive_cases();
        for (i, c) in cases.iter().enumerate() {
            let mut g = Graph::<f64>::new();
            let ps: Vec<NodeId> = c.shapes.iter().map(|s| g.param(s)).collect();
            let y = (c.build)(&mut g, &ps)?;
            let ys = g.shape(y).to_vec();
            let w = g.input(&ys);
            let wy = g.mul(&y, &w)?;
            g.loss = Some(g.sum_all(&wy)?);
            let mut rng = RngState::new(0xFD, i as u64);
            let params: Vec<Tensor<f64>> = c.shapes.iter().map(|s| uniform(s, c.lo, c.lo.abs().max(1.0) + 1.0, &mut rng)).collect();
            let weights = uniform(&ys, -1.0, 1.0, &mut rng);
            let rep = fd_check(&g, &[weights], &params, FD_COORDS, &mut rng).map_err(|e| fail(format!("{}: {e}", c.name)))?;
            worst = worst.max(rep.max_rel);
        }
        Ok(format!("{} primitives, {FD_COORDS} coordinates each, max rel {worst:.1e}", cases.len()))
    })())
}

/// Finite-difference check of the full loss gradient of every model.
pub fn check_models() -> Check {
    check("model gradients", (|| {
        let mut parts = Vec::new();
        for kind in ModelKind::ALL {
            let m = Model::with_seq_len(kind, CHECK_SEQ_LEN);
            let mut rng = RngState::new(0xFE, kind as u64);
            let params = scaled_init(&m, &mut rng);
            let (x, y) = m.random_batch::<f64>(2, &mut rng);
            let g = record(&LossProgram { model: &m, n: 2, form: LossForm::Sum })?;
            let rep = fd_check(&g, &[x, y], &params, 2 * FD_COORDS, &mut rng).map_err(|e| fail(format!("{kind}: {e}")))?;
            parts.push(format!("{kind} {:.1e} ({} kinks skipped)", rep.max_rel, rep.skipped));
        }
        Ok(parts.join(", "))
    })())
}

/// Default initialization with non-zero biases, so bias gradients are not
/// trivially checked at a symmetric point.
fn scaled_init(m: &Model, rng: &mut RngState) -> Vec<Tensor<f64>> {
    m.init::<f64>(rng)
        .into_iter()
        .map(|p| if p.max_abs() == 0.0 { uniform(p.shape(), -0.1, 0.1, rng) } else { p })
        .collect()
}

/// Every supported strategy against the per-example loop.
pub fn check_strategy_equivalence(batches: &[usize]) -> Check {
    check("strategy equivalence", (|| {
        let mut worst: f64 = 0.0;
        let mut compared = 0;
        for kind in ModelKind::ALL {
            let m = Model::with_seq_len(kind, CHECK_SEQ_LEN);
            let mut rng = RngState::new(0xE0, kind as u64);
            let params = scaled_init(&m, &mut rng);
            for &b in batches {
                let (x, y) = m.random_batch::<f64>(b, &mut rng);
                let (reference, _) = Runner::new(m.clone(), Strategy::Naive, Mode::Eager)?.per_example(&params, &x, &y)?;
                let ref_norms = reference.norms();
                for s in Strategy::ALL {
                    if s == Strategy::Naive || s.check_support(kind).is_err() {
                        continue;
                    }
                    let (got, _) = Runner::new(m.clone(), s, Mode::Graph)?.per_example(&params, &x, &y)?;
                    let d = match &got {
                        PerExampleGrads::Materialized(blocks) => blocks
                            .iter()
                            .zip(reference.blocks()?)
                            .map(|(a, r)| a.rel_diff(r, 1e-12))
                            .fold(0.0, f64::max),
                        PerExampleGrads::NormsOnly(n) => n
                            .to_f64_vec()
                            .iter()
                            .zip(&ref_norms)
                            .map(|(a, r)| (a - r).abs() / r.abs().max(1e-12))
                            .fold(0.0, f64::max),
                    };
                    if d > EQUIV_TOL {
                        return Err(fail(format!("{kind} {s} B={b}: relative difference {d:e}")));
                    }
                    worst = worst.max(d);
                    compared += 1;
                }
            }
        }
        Ok(format!("{compared} (model, strategy, batch) cases, max rel {worst:.1e}"))
    })())
}

/// Clipping, noise and microbatching against hand-written references.
pub fn check_dpsgd() -> Check {
    check("dpsgd semantics", (|| {
        let m = Model::with_seq_len(ModelKind::Fcnn, CHECK_SEQ_LEN);
        let mut rng = RngState::new(0xD0, 0);
        let params = scaled_init(&m, &mut rng);
        let b = 4;
        let (x, y) = m.random_batch::<f64>(b, &mut rng);
        let (per, _) = Runner::new(m.clone(), Strategy::Naive, Mode::Eager)?.per_example(&params, &x, &y)?;
        let blocks = per.blocks()?.to_vec();
        let hand: Vec<f64> = (0..b)
            .map(|i| blocks.iter().map(|t| row(t, i).iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt())
            .collect();
        // exact equality below needs the same summation order as the library
        let norms = per.norms();
        if let Some((n, h)) = norms.iter().zip(&hand).find(|(n, h)| ((*n - *h) / *h).abs() > 1e-12) {
            return Err(fail(format!("per-example norm {n} vs direct sum {h}")));
        }
        let clip = 0.5 * norms.iter().cloned().fold(f64::INFINITY, f64::min);

        // σ = 0 equals clipped SGD bit for bit
        let cfg = DpConfig { clip, noise_multiplier: 0.0, lr: 0.1, microbatch: 1, seed: 3 };
        let want = hand_clipped_mean(&blocks, &norms, clip);
        let mut runner = Runner::new(m.clone(), Strategy::Vmap, Mode::Graph)?;
        let mut stepped = params.clone();
        dpsgd_step(&mut Runner::new(m.clone(), Strategy::Naive, Mode::Eager)?, &mut stepped, &x, &y, &cfg, 0)?;
        for ((p, s), w) in params.iter().zip(&stepped).zip(&want) {
            for ((&p0, &p1), &g) in p.data().iter().zip(s.data()).zip(w) {
                if p1 != p0 - 0.1 * g {
                    return Err(fail("zero-noise step differs from clipped SGD".into()));
                }
            }
        }

        // post-clip norm bound, through the vectorized path
        let (_, rep) = private_gradient(&mut runner, &params, &x, &y, &cfg, 0)?;
        let clipped = crate::dpsgd::clip(&runner.per_example(&params, &x, &y)?.0, clip)?;
        let worst = clipped.norms().into_iter().fold(0.0, f64::max);
        if worst > clip * (1.0 + 1e-12) || rep.clipped != b {
            return Err(fail(format!("post-clip norm {worst} exceeds {clip}")));
        }

        // noise variance σ²C²/B² over 10⁵ draws
        let (sigma, c) = (1.0, 2.0);
        let noise_cfg = DpConfig { clip: c, noise_multiplier: sigma, lr: 0.1, microbatch: 1, seed: 11 };
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|step| noisy_mean(vec![Tensor::<f64>::zeros(&[1])], b, &noise_cfg, step as u64).0[0].data()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let target = (sigma * c / b as f64).powi(2);
        if ((var - target) / target).abs() > 0.02 {
            return Err(fail(format!("noise variance {var} vs {target}")));
        }

        // microbatch m = B is clip(mean gradient); m = 1 is the per-example path
        let noisy = DpConfig { noise_multiplier: 0.7, ..cfg.clone() };
        let (mb, _) = private_gradient(&mut runner, &params, &x, &y, &DpConfig { microbatch: b, ..noisy.clone() }, 5)?;
        let mean_rows: Vec<Vec<f64>> = blocks.iter().map(|t| (0..t.numel() / b).map(|k| (0..b).map(|i| row(t, i)[k]).sum::<f64>() / b as f64).collect()).collect();
        let mean_norm = mean_rows.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let s = clip_scales(&[mean_norm], clip)[0];
        let sums: Vec<Tensor<f64>> = mean_rows
            .iter()
            .zip(&blocks)
            .map(|(r, t)| Tensor::new(t.shape()[1..].to_vec(), r.iter().map(|v| v * s).collect()))
            .collect::<Result<_>>()?;
        let (want_mb, _) = noisy_mean(sums, 1, &noisy, 5);
        for (a, w) in mb.iter().zip(&want_mb) {
            if a.rel_diff(w, 1e-12) > 1e-9 {
                return Err(fail(format!("microbatch m=B differs by {:e}", a.rel_diff(w, 1e-12))));
            }
        }
        let (one, _) = private_gradient(&mut runner, &params, &x, &y, &noisy, 6)?;
        let (per_path, _) = crate::dpsgd::aggregate_noise(&crate::dpsgd::clip(&runner.per_example(&params, &x, &y)?.0, clip)?, &noisy, 6)?;
        if one.iter().zip(&per_path).any(|(a, p)| !a.bit_eq(p)) {
            return Err(fail("microbatch m=1 differs from the per-example path".into()));
        }
        Ok(format!("noise variance {var:.5} vs {target:.5}; max clipped norm {worst:.6} ≤ {clip:.6}"))
    })())
}

fn row(t: &Tensor<f64>, i: usize) -> &[f64] {
    let per = t.numel() / t.shape()[0];
    &t.data()[i * per..(i + 1) * per]
}

fn hand_clipped_mean(blocks: &[Tensor<f64>], norms: &[f64], clip: f64) -> Vec<Vec<f64>> {
    let b = norms.len();
    blocks
        .iter()
        .map(|t| {
            let per = t.numel() / b;
            let mut acc = vec![0.0; per];
            for (i, &n) in norms.iter().enumerate() {
                let s = if n > clip { clip / n } else { 1.0 };
                for (a, v) in acc.iter_mut().zip(row(t, i)) {
                    *a += if s == 1.0 { *v } else { v * s };
                }
            }
            acc.into_iter().map(|v| v * (1.0 / b as f64)).collect()
        })
        .collect()
}

/// Same noise seed and step sequence give the same parameters whichever
/// strategy computes the per-example gradients.
pub fn check_dpsgd_strategy_independence() -> Check {
    check("dpsgd strategy independence", (|| {
        let mut worst: f64 = 0.0;
        for kind in ModelKind::ALL {
            let m = Model::with_seq_len(kind, CHECK_SEQ_LEN);
            let mut rng = RngState::new(0xD1, kind as u64);
            let init = scaled_init(&m, &mut rng);
            let batches: Vec<_> = (0..5).map(|_| m.random_batch::<f64>(2, &mut rng)).collect();
            let cfg = DpConfig { clip: 0.5, noise_multiplier: 1.0, lr: 0.05, microbatch: 1, seed: 9 };
            let mut finals: Vec<(Strategy, Vec<Tensor<f64>>)> = Vec::new();
            for s in Strategy::ALL {
                if s.check_support(kind).is_err() {
                    continue;
                }
                let mut r = Runner::new(m.clone(), s, Mode::Graph)?;
                let mut p = init.clone();
                for (step, (x, y)) in batches.iter().enumerate() {
                    dpsgd_step(&mut r, &mut p, x, y, &cfg, step as u64)?;
                }
                finals.push((s, p));
            }
            let (_, reference) = &finals[0];
            for (s, p) in &finals[1..] {
                let d = p.iter().zip(reference).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
                if d > 1e-7 {
                    return Err(fail(format!("{kind}: {s} drifts {d:e} from naive after 5 steps")));
                }
                worst = worst.max(d);
            }
        }
        Ok(format!("max parameter difference after 5 steps {worst:.1e}"))
    })())
}

/// Pruning and fusion keep every output bit-identical; buffer plans pass
/// the overlap audit and never exceed the no-reuse footprint.
pub fn check_optimizer() -> Check {
    check("graph optimizer", (|| {
        let mut ratios = Vec::new();
        for kind in ModelKind::ALL {
            let m = Model::with_seq_len(kind, CHECK_SEQ_LEN);
            let mut rng = RngState::new(0x0B, kind as u64);
            let params = scaled_init(&m, &mut rng);
            let b = 2;
            let (x, y) = m.random_batch::<f64>(b, &mut rng);
            let mut graphs: Vec<(String, Graph<f64>, Vec<Tensor<f64>>)> = vec![(
                "naive".into(),
                per_example_graph(&m)?,
                vec![x.select_rows(&[0]), y.select_rows(&[0])],
            )];
            for s in [Strategy::Vmap, Strategy::JacMm, Strategy::Norms] {
                if s.check_support(kind).is_ok() {
                    let ins = if s == Strategy::Vmap {
                        let mut xs = x.shape().to_vec();
                        xs.insert(1, 1);
                        vec![x.clone().reshape(&xs)?, y.clone().reshape(&[b, 1])?]
                    } else {
                        vec![x.clone(), y.clone()]
                    };
                    graphs.push((s.name().into(), strategy_graph(&m, s, b)?, ins));
                }
            }
            for (name, g, ins) in &graphs {
                let plain = interpret(g, ins, &params)?;
                for fusion in [false, true] {
                    let c = CompiledGraph::compile_with(g, fusion)?;
                    let r = c.run(&mut c.workspace(), ins, &params)?;
                    let same = r.outputs.iter().zip(&plain.outputs).all(|(a, b)| a.bit_eq(b))
                        && r.loss.as_ref().zip(plain.loss.as_ref()).is_none_or(|(a, b)| a.bit_eq(b));
                    if !same {
                        return Err(fail(format!("{kind} {name}: optimized outputs differ (fusion {fusion})")));
                    }
                }
                let o = optimize(g, true)?;
                o.plan.audit(&o.graph, &o.schedule)?;
                if o.report.peak_planned_bytes > o.report.no_reuse_bytes {
                    return Err(fail(format!("{kind} {name}: planned peak above no-reuse total")));
                }
            }
        }
        let mnist = Model::build(ModelKind::MnistCnn);
        for s in [Strategy::Vmap, Strategy::JacMm, Strategy::GroupConv] {
            let rep = optimize(&strategy_graph::<f32>(&mnist, s, 16)?, true)?.report;
            ratios.push((s, rep.peak_planned_bytes as f64 / rep.no_reuse_bytes as f64));
        }
        let vmap_ratio = ratios[0].1;
        if vmap_ratio > 0.7 {
            return Err(fail(format!("MNIST CNN B=16 planned/no-reuse ratio {vmap_ratio:.3} > 0.7")));
        }
        let desc: Vec<String> = ratios.iter().map(|(s, r)| format!("{s} {r:.3}")).collect();
        Ok(format!("bit-identical on all models; MNIST CNN B=16 planned/no-reuse: {}", desc.join(", ")))
    })())
}

/// Accepts and rejects per a table written out independently of the
/// strategies' own rule lookup.
pub fn check_support_matrix() -> Check {
    use ModelKind::*;
    use Strategy::*;
    const TABLE: [(Strategy, [bool; 6]); 6] = [
        // logreg fcnn mnist cifar embed lstm
        (Naive, [true, true, true, true, true, true]),
        (Vmap, [true, true, true, true, true, true]),
        (Outer, [true, true, false, false, false, false]),
        (Norms, [true, true, false, false, false, false]),
        (GroupConv, [true, true, true, true, false, false]),
        (JacMm, [true, true, true, true, true, false]),
    ];
    let models = [Logreg, Fcnn, MnistCnn, CifarCnn, Embed, Lstm];
    check("support matrix", (|| {
        for (s, row) in TABLE {
            for (m, ok) in models.into_iter().zip(row) {
                match (Runner::<f64>::new(Model::with_seq_len(m, CHECK_SEQ_LEN), s, Mode::Graph), ok) {
                    (Ok(_), true) => {}
                    (Err(Error::UnsupportedArchitecture { reason, .. }), false) if reason.contains("unsupported layer") => {}
                    (r, _) => return Err(fail(format!("{s} on {m}: expected supported={ok}, got {:?}", r.err()))),
                }
            }
        }
        Ok("36 (strategy, model) pairs as expected".into())
    })())
}

/// Every check above, with the equivalence suite at B ∈ {1, 2, 4}.
pub fn run_all() -> Vec<Check> {
    vec![
        check_strategy_equivalence(&[1, 2, 4]),
        check_primitives(),
        check_models(),
        check_dpsgd(),
        check_dpsgd_strategy_independence(),
        check_optimizer(),
        check_support_matrix(),
    ]
}
