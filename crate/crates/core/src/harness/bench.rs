//! Timing protocol and memory-capped batch-size search.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{epoch_batches, Dataset};
use crate::dpsgd::{dpsgd_step, DpConfig};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::exec::eager_peak_bytes;
use crate::graph::Graph;
use crate::models::Model;
use crate::optimize::{optimize, OptimizerReport};
use crate::rng::RngState;
use crate::strategies::{per_example_graph, strategy_graph, weighted_grad_graph, Mode, Runner, Strategy};

pub const STATUS_OK: &str = "ok";
pub const STATUS_SKIPPED: &str = "skipped";
pub const STATUS_OOM: &str = "oom";

/// One (model, strategy, mode, batch size) measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub model_kind: String,
    pub strategy: String,
    /// `eager` or `graph`, then `loop` or `vectorized`, joined by `+`.
    pub mode: String,
    pub batch_size: usize,
    pub epochs: usize,
    /// NaN (`null` in JSON) when nothing was timed.
    #[serde(deserialize_with = "nan_if_null")]
    pub median_epoch_seconds: f64,
    pub per_epoch_seconds: Vec<f64>,
    pub peak_planned_bytes: u64,
    pub optimizer_report: Option<OptimizerReport>,
    pub seed: u64,
    pub element_width: u32,
    /// `ok`, `skipped` or `oom`.
    pub status: String,
    pub reason: Option<String>,
    /// One-time trace and optimize cost, excluded from the epoch times.
    pub compile_seconds: f64,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl BenchRecord {
    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }
}

/// Median of a non-empty list; the mean of the middle pair for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

pub fn mode_label(mode: Mode, strategy: Strategy) -> String {
    format!("{}+{}", mode.name(), if strategy.is_loop() { "loop" } else { "vectorized" })
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub mode: Mode,
    /// Off forces the per-example loop regardless of the requested strategy.
    pub vectorize: bool,
    pub batch_sizes: Vec<usize>,
    pub epochs: usize,
    pub dp: DpConfig,
    /// Footprint budget in bytes; configurations above it are recorded as OOM.
    pub mem_cap: Option<u64>,
    /// Caps the steps timed per epoch (the rest of the epoch is skipped).
    pub max_steps: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            mode: Mode::Graph,
            vectorize: true,
            batch_sizes: vec![16, 32, 64, 128, 256],
            epochs: 20,
            dp: DpConfig::default(),
            mem_cap: None,
            max_steps: None,
        }
    }
}

/// Times DPSGD epochs for every batch size. Unsupported configurations and
/// budget overruns become records rather than errors.
pub fn run_bench<T: Element>(model: &Model, data: &Dataset<T>, strategy: Strategy, cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.dp.validate()?;
    data.check_for(model)?;
    if cfg.epochs == 0 {
        return Err(Error::Config("at least one epoch is required".into()));
    }
    let strategy = if cfg.vectorize { strategy } else { Strategy::Naive };
    let mut out = Vec::with_capacity(cfg.batch_sizes.len());
    for &b in &cfg.batch_sizes {
        let mut rec = BenchRecord {
            model_kind: model.kind.name().into(),
            strategy: strategy.name().into(),
            mode: mode_label(cfg.mode, strategy),
            batch_size: b,
            epochs: cfg.epochs,
            median_epoch_seconds: f64::NAN,
            per_epoch_seconds: vec![],
            peak_planned_bytes: 0,
            optimizer_report: None,
            seed: cfg.dp.seed,
            element_width: T::BITS,
            status: STATUS_SKIPPED.into(),
            reason: None,
            compile_seconds: 0.0,
            epoch_losses: vec![],
        };
        match bench_one(model, data, strategy, cfg, b, &mut rec) {
            Ok(()) => {}
            Err(e @ Error::UnsupportedArchitecture { .. }) | Err(e @ Error::Config(_)) => {
                rec.status = STATUS_SKIPPED.into();
                rec.reason = Some(e.to_string());
            }
            Err(e @ Error::OutOfMemory { .. }) => {
                rec.status = STATUS_OOM.into();
                rec.reason = Some(e.to_string());
            }
            Err(e) => return Err(e),
        }
        out.push(rec);
    }
    Ok(out)
}

fn bench_one<T: Element>(model: &Model, data: &Dataset<T>, strategy: Strategy, cfg: &BenchConfig, b: usize, rec: &mut BenchRecord) -> Result<()> {
    strategy.check_support(model.kind)?;
    if b == 0 || b > data.len() {
        return Err(Error::Config(format!("batch size {b} for {} examples", data.len())));
    }
    if b % cfg.dp.microbatch != 0 {
        return Err(Error::Config(format!("batch size {b} is not a multiple of microbatch size {}", cfg.dp.microbatch)));
    }
    if let Some(cap) = cfg.mem_cap {
        let needed = footprint_bytes::<T>(model, strategy, cfg.mode, b)?;
        if needed > cap {
            return Err(Error::OutOfMemory { needed, cap });
        }
    }
    let mut runner = Runner::<T>::new(model.clone(), strategy, cfg.mode)?;
    runner.prepare(b)?;
    if cfg.mode == Mode::Graph {
        rec.optimizer_report = Some(runner.report(b)?);
    }
    let mut params = model.init(&mut RngState::new(cfg.dp.seed, 0));
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut batches = epoch_batches(data.len(), b, &mut RngState::new(cfg.dp.seed, 1 + epoch as u64));
        if let Some(m) = cfg.max_steps {
            batches.truncate(m.max(1));
        }
        let mut loss = 0.0;
        let t = Instant::now();
        for rows in &batches {
            let (x, y) = data.batch(rows);
            loss += dpsgd_step(&mut runner, &mut params, &x, &y, &cfg.dp, step)?.loss;
            step += 1;
        }
        rec.per_epoch_seconds.push(t.elapsed().as_secs_f64());
        rec.epoch_losses.push(loss / batches.len() as f64);
    }
    rec.median_epoch_seconds = median(&rec.per_epoch_seconds);
    rec.compile_seconds = runner.compile_seconds();
    rec.peak_planned_bytes = runner.peak_bytes();
    rec.status = STATUS_OK.into();
    Ok(())
}

/// Bytes one DPSGD step needs at batch `b`: the intermediate footprint
/// (planned arena in graph mode, accounted live tensors in eager mode) plus
/// the parameters and the input batch.
pub fn footprint_bytes<T: Element>(model: &Model, strategy: Strategy, mode: Mode, b: usize) -> Result<u64> {
    strategy.check_support(model.kind)?;
    let width = (T::BITS / 8) as u64;
    let params = model.param_count() as u64 * width;
    let example: usize = model.example_shape().iter().product();
    let inputs = (b * example + b) as u64 * width;
    let peak = |g: Graph<T>| -> Result<u64> {
        Ok(match mode {
            Mode::Graph => optimize(&g, true)?.report.peak_planned_bytes,
            Mode::Eager => eager_peak_bytes(&g),
        })
    };
    let mut work = if strategy.is_loop() {
        // one example at a time, but every row is kept for clipping
        peak(per_example_graph(model)?)? + b as u64 * params
    } else {
        peak(strategy_graph(model, strategy, b)?)?
    };
    if strategy == Strategy::Norms {
        work = work.max(peak(weighted_grad_graph(model, b)?)?);
    }
    Ok(work + params + inputs)
}

/// Largest batch whose footprint fits in `cap` bytes.
pub fn max_batch_search<T: Element>(model: &Model, strategy: Strategy, mode: Mode, cap: u64) -> Result<usize> {
    max_batch_search_with(cap, |b| footprint_bytes::<T>(model, strategy, mode, b))
}

const SEARCH_LIMIT: usize = 1 << 24;

/// Doubling then bisection over any footprint function, assumed
/// non-decreasing in the batch size.
pub fn max_batch_search_with(cap: u64, mut footprint: impl FnMut(usize) -> Result<u64>) -> Result<usize> {
    let first = footprint(1)?;
    if first > cap {
        return Err(Error::OutOfMemory { needed: first, cap });
    }
    let mut lo = 1;
    let mut hi = loop {
        let next = lo * 2;
        if next > SEARCH_LIMIT {
            return Ok(lo);
        }
        if footprint(next)? <= cap {
            lo = next;
        } else {
            break next;
        }
    };
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if footprint(mid)? <= cap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}
