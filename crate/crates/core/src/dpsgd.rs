//! Differentially private SGD: per-example clipping, optional microbatch
//! averaging, Gaussian noise, and the parameter update.

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::strategies::{PerExampleGrads, Runner, Strategy};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    /// Clip bound `C` on each example's global gradient norm.
    pub clip: f64,
    /// Noise standard deviation as a multiple of `C`.
    pub noise_multiplier: f64,
    pub lr: f64,
    /// Examples averaged before clipping; 1 clips every example.
    pub microbatch: usize,
    pub seed: u64,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            clip: 1.0,
            noise_multiplier: 1.0,
            lr: 0.1,
            microbatch: 1,
            seed: 0,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::Config(format!("clip bound must be positive, got {}", self.clip)));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::Config(format!("noise multiplier must be non-negative, got {}", self.noise_multiplier)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.microbatch == 0 {
            return Err(Error::Config("microbatch size must be at least 1".into()));
        }
        Ok(())
    }

    fn check_batch(&self, b: usize) -> Result<()> {
        if b % self.microbatch != 0 {
            return Err(Error::Config(format!("batch size {b} is not a multiple of microbatch size {}", self.microbatch)));
        }
        Ok(())
    }
}

/// What one private step did, for logging and tests.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Global norm of every clipped unit (example or microbatch) before clipping.
    pub pre_clip_norms: Vec<f64>,
    /// How many of those norms exceeded the bound.
    pub clipped: usize,
    /// RNG stream used for each parameter block's noise.
    pub noise_streams: Vec<u64>,
    /// Mean per-example loss at the pre-step parameters.
    pub loss: f64,
}

/// `min(1, C/‖g‖)` for every norm; a zero norm keeps scale 1.
pub fn clip_scales(norms: &[f64], clip: f64) -> Vec<f64> {
    norms.iter().map(|&n| if n > clip { clip / n } else { 1.0 }).collect()
}

/// Scales each example's gradient onto the ball of radius `clip`, using
/// its norm across all parameter blocks.
pub fn clip<T: Element>(g: &PerExampleGrads<T>, clip: f64) -> Result<PerExampleGrads<T>> {
    let blocks = g.blocks()?;
    let scales = clip_scales(&g.norms(), clip);
    Ok(PerExampleGrads::Materialized(blocks.iter().map(|t| scale_rows(t, &scales)).collect()))
}

fn scale_rows<T: Element>(t: &Tensor<T>, scales: &[f64]) -> Tensor<T> {
    let per = t.numel() / scales.len().max(1);
    let mut out = t.clone();
    for (row, &s) in out.data_mut().chunks_mut(per.max(1)).zip(scales) {
        if s != 1.0 {
            let s = T::from_f64_lossy(s);
            for v in row {
                *v = *v * s;
            }
        }
    }
    out
}

/// `Σᵢ scaleᵢ·gᵢ` per block without materializing the scaled rows. Same
/// arithmetic, in the same order, as [`clip`] followed by a batch sum.
pub fn clipped_sum<T: Element>(g: &PerExampleGrads<T>, scales: &[f64]) -> Result<Vec<Tensor<T>>> {
    let blocks = g.blocks()?;
    let b = g.batch_size();
    if scales.len() != b {
        return Err(Error::Contract(format!("{} scales for {b} examples", scales.len())));
    }
    Ok(blocks
        .iter()
        .map(|t| {
            let per = t.numel() / b.max(1);
            let mut acc = vec![T::zero(); per];
            for (row, &s) in t.data().chunks(per.max(1)).zip(scales) {
                if s == 1.0 {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                } else {
                    let s = T::from_f64_lossy(s);
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a = *a + v * s;
                    }
                }
            }
            Tensor::from_parts(t.shape()[1..].to_vec(), acc)
        })
        .collect())
}

/// Averages every `m` consecutive examples into one row.
pub fn microbatch<T: Element>(g: &PerExampleGrads<T>, m: usize) -> Result<PerExampleGrads<T>> {
    let b = g.batch_size();
    if m == 0 || b % m != 0 {
        return Err(Error::Config(format!("batch size {b} is not a multiple of microbatch size {m}")));
    }
    if m == 1 {
        return Ok(g.clone());
    }
    let inv = T::from_f64_lossy(1.0 / m as f64);
    let blocks = g
        .blocks()?
        .iter()
        .map(|t| {
            let per = t.numel() / b;
            let mut out = vec![T::zero(); per * (b / m)];
            for (i, row) in t.data().chunks(per).enumerate() {
                let dst = &mut out[(i / m) * per..(i / m + 1) * per];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
            for v in &mut out {
                *v = *v * inv;
            }
            let mut shape = t.shape().to_vec();
            shape[0] = b / m;
            Tensor::new(shape, out)
        })
        .collect::<Result<_>>()?;
    Ok(PerExampleGrads::Materialized(blocks))
}

/// Stream id for the noise of parameter block `block` at step `step`.
pub fn noise_stream(step: u64, block: usize) -> u64 {
    (step << 24) | block as u64
}

/// `(Σ + σC·N(0, I)) / count` for every summed block.
pub fn noisy_mean<T: Element>(sums: Vec<Tensor<T>>, count: usize, cfg: &DpConfig, step: u64) -> (Vec<Tensor<T>>, Vec<u64>) {
    let std = cfg.noise_multiplier * cfg.clip;
    let inv = 1.0 / count as f64;
    let mut streams = Vec::with_capacity(sums.len());
    let out = sums
        .into_iter()
        .enumerate()
        .map(|(k, mut t)| {
            let stream = noise_stream(step, k);
            streams.push(stream);
            if std == 0.0 {
                for v in t.data_mut() {
                    *v = T::from_f64_lossy(v.as_f64() * inv);
                }
            } else {
                let mut rng = RngState::new(cfg.seed, stream);
                for v in t.data_mut() {
                    *v = T::from_f64_lossy((v.as_f64() + std * rng.normal()) * inv);
                }
            }
            t
        })
        .collect();
    (out, streams)
}

/// Sums clipped per-example rows, adds noise and divides by the row count.
pub fn aggregate_noise<T: Element>(clipped: &PerExampleGrads<T>, cfg: &DpConfig, step: u64) -> Result<(Vec<Tensor<T>>, Vec<u64>)> {
    let count = clipped.batch_size();
    Ok(noisy_mean(clipped.sum_over_batch()?, count, cfg, step))
}

/// Private gradient estimate for one batch, without touching parameters.
pub fn private_gradient<T: Element>(
    runner: &mut Runner<T>,
    params: &[Tensor<T>],
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &DpConfig,
    step: u64,
) -> Result<(Vec<Tensor<T>>, StepReport)> {
    cfg.validate()?;
    let b = x.shape().first().copied().unwrap_or(0);
    cfg.check_batch(b)?;
    if runner.strategy() == Strategy::Norms && cfg.microbatch != 1 {
        return Err(Error::Config(format!(
            "the {} strategy cannot form microbatches; use microbatch size 1",
            Strategy::Norms
        )));
    }
    let (per, losses) = runner.per_example(params, x, y)?;
    let loss = losses.data().iter().map(|v| v.as_f64()).sum::<f64>() / b as f64;
    if per.is_norms_only() {
        let norms = per.norms();
        let scales = clip_scales(&norms, cfg.clip);
        let w = Tensor::from_f64(&[b], &scales)?;
        let sums = runner.weighted_sum(params, x, y, &w)?;
        let (g, streams) = noisy_mean(sums, b, cfg, step);
        return Ok((g, report(norms, cfg.clip, streams, loss)));
    }
    let grouped = if cfg.microbatch == 1 { None } else { Some(microbatch(&per, cfg.microbatch)?) };
    let rows = grouped.as_ref().unwrap_or(&per);
    let norms = rows.norms();
    let sums = clipped_sum(rows, &clip_scales(&norms, cfg.clip))?;
    let (g, streams) = noisy_mean(sums, rows.batch_size(), cfg, step);
    Ok((g, report(norms, cfg.clip, streams, loss)))
}

fn report(norms: Vec<f64>, clip: f64, noise_streams: Vec<u64>, loss: f64) -> StepReport {
    StepReport {
        clipped: norms.iter().filter(|&&n| n > clip).count(),
        pre_clip_norms: norms,
        noise_streams,
        loss,
    }
}

/// One DPSGD update: `θ ← θ − lr·(noisy clipped mean gradient)`.
pub fn dpsgd_step<T: Element>(
    runner: &mut Runner<T>,
    params: &mut [Tensor<T>],
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &DpConfig,
    step: u64,
) -> Result<StepReport> {
    let (g, rep) = private_gradient(runner, params, x, y, cfg, step)?;
    apply_update(params, &g, cfg.lr)?;
    Ok(rep)
}

/// One plain SGD update on the mean loss; returns that loss.
pub fn sgd_step<T: Element>(runner: &mut Runner<T>, params: &mut [Tensor<T>], x: &Tensor<T>, y: &Tensor<T>, lr: f64) -> Result<f64> {
    let (loss, g) = runner.batch_grad(params, x, y)?;
    apply_update(params, &g, lr)?;
    Ok(loss)
}

pub fn apply_update<T: Element>(params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    let lr = T::from_f64_lossy(lr);
    for (p, g) in params.iter_mut().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("update", format!("parameter {:?}, gradient {:?}", p.shape(), g.shape())));
        }
        for (v, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *v = *v - lr * d;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Model, ModelKind};
    use crate::strategies::Mode;
    use proptest::{prop_assert, proptest};

    fn rows(b: usize, vals: &[f64]) -> PerExampleGrads<f64> {
        PerExampleGrads::Materialized(vec![Tensor::from_f64(&[b, vals.len() / b], vals).unwrap()])
    }

    #[test]
    fn scales() {
        assert_eq!(clip_scales(&[0.0, 0.5, 1.0, 4.0], 1.0), vec![1.0, 1.0, 1.0, 0.25]);
    }

    #[test]
    fn clip_projects_onto_ball() {
        let g = rows(2, &[3.0, 4.0, 0.3, 0.4]);
        let c = clip(&g, 1.0).unwrap();
        let d = c.blocks().unwrap()[0].data().to_vec();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
        assert_eq!(&d[2..], &[0.3, 0.4]);
    }

    #[test]
    fn clip_uses_norm_across_blocks() {
        let g = PerExampleGrads::Materialized(vec![
            Tensor::<f64>::from_f64(&[1, 1], &[3.0]).unwrap(),
            Tensor::from_f64(&[1, 1], &[4.0]).unwrap(),
        ]);
        let c = clip(&g, 1.0).unwrap();
        assert!((c.norms()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fused_clipped_sum_matches_clip_then_sum_bitwise() {
        let mut rng = RngState::new(8, 0);
        let g = PerExampleGrads::Materialized(vec![
            crate::rng::uniform::<f32>(&[5, 3, 2], -2.0, 2.0, &mut rng),
            crate::rng::uniform::<f32>(&[5, 4], -2.0, 2.0, &mut rng),
        ]);
        let c = 1.3;
        let want = clip(&g, c).unwrap().sum_over_batch().unwrap();
        let got = clipped_sum(&g, &clip_scales(&g.norms(), c)).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn clipping_norms_only_is_a_contract_error() {
        let g = PerExampleGrads::NormsOnly(Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap());
        assert!(matches!(clip(&g, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn microbatch_extremes() {
        let g = rows(4, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(microbatch(&g, 1).unwrap(), g);
        let all = microbatch(&g, 4).unwrap();
        assert_eq!(all.blocks().unwrap()[0].data(), &[2.5]);
        let pairs = microbatch(&g, 2).unwrap();
        assert_eq!(pairs.blocks().unwrap()[0].data(), &[1.5, 3.5]);
        assert!(matches!(microbatch(&g, 3), Err(Error::Config(_))));
    }

    #[test]
    fn zero_noise_is_the_plain_mean() {
        let cfg = DpConfig { noise_multiplier: 0.0, ..Default::default() };
        let (g, streams) = aggregate_noise(&rows(2, &[1.0, 3.0]), &cfg, 7).unwrap();
        assert_eq!(g[0].data(), &[2.0]);
        assert_eq!(streams, vec![7 << 24]);
    }

    #[test]
    fn noise_is_reproducible_per_step_and_block() {
        let cfg = DpConfig { noise_multiplier: 1.0, seed: 5, ..Default::default() };
        let sums = || vec![Tensor::<f64>::zeros(&[3]), Tensor::zeros(&[3])];
        let (a, _) = noisy_mean(sums(), 1, &cfg, 1);
        let (b, _) = noisy_mean(sums(), 1, &cfg, 1);
        let (c, _) = noisy_mean(sums(), 1, &cfg, 2);
        assert!(a[0].bit_eq(&b[0]));
        assert!(!a[0].bit_eq(&a[1]));
        assert!(!a[0].bit_eq(&c[0]));
    }

    #[test]
    fn config_validation() {
        let bad = [
            DpConfig { clip: 0.0, ..Default::default() },
            DpConfig { noise_multiplier: -1.0, ..Default::default() },
            DpConfig { lr: 0.0, ..Default::default() },
            DpConfig { microbatch: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn norms_strategy_rejects_microbatches() {
        let m = Model::build(ModelKind::Logreg);
        let mut rng = RngState::new(1, 0);
        let mut p: Vec<Tensor<f64>> = m.init(&mut rng);
        let (x, y) = m.random_batch(4, &mut rng);
        let mut r = Runner::new(m, Strategy::Norms, Mode::Graph).unwrap();
        let cfg = DpConfig { microbatch: 2, ..Default::default() };
        assert!(matches!(dpsgd_step(&mut r, &mut p, &x, &y, &cfg, 0), Err(Error::Config(_))));
        let cfg = DpConfig { microbatch: 3, ..Default::default() };
        assert!(matches!(dpsgd_step(&mut r, &mut p, &x, &y, &cfg, 0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn clipped_norms_never_exceed_bound(vals in proptest::collection::vec(-1e3f64..1e3, 12), c in 1e-3f64..10.0) {
            let g = rows(4, &vals);
            let clipped = clip(&g, c).unwrap();
            for (n, before) in clipped.norms().iter().zip(g.norms()) {
                prop_assert!(*n <= c * (1.0 + 1e-12));
                if before <= c {
                    prop_assert!((n - before).abs() <= 1e-12 * before.max(1.0));
                }
            }
        }
    }
}
