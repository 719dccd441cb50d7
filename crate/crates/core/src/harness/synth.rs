//! Deterministic synthetic stand-ins shaped like the benchmark datasets.

use std::fmt;
use std::str::FromStr;

use super::Dataset;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::models::{Model, ModelKind, ADULT_FEATURES, SEQ_LEN, VOCAB};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Examples closer than this to the planted hyperplane are redrawn.
pub const MARGIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// `(n, 104)` standard normal features, binary labels from a planted
    /// linear rule with a margin.
    AdultLike,
    /// `(n, 256)` token ids below 10,004, binary labels.
    Tokens,
    /// `(n, 3, 32, 32)` images, 10 classes.
    CifarLike,
    /// `(n, 1, 28, 28)` images, 10 classes.
    MnistLike,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::AdultLike => "adult_like",
            SynthKind::Tokens => "tokens",
            SynthKind::CifarLike => "cifar_like",
            SynthKind::MnistLike => "mnist_like",
        }
    }

    /// The kind whose shapes fit `model`.
    pub fn for_model(model: ModelKind) -> Self {
        match model {
            ModelKind::Logreg | ModelKind::Fcnn => SynthKind::AdultLike,
            ModelKind::MnistCnn => SynthKind::MnistLike,
            ModelKind::CifarCnn => SynthKind::CifarLike,
            ModelKind::Embed | ModelKind::Lstm => SynthKind::Tokens,
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SynthKind::AdultLike, SynthKind::Tokens, SynthKind::CifarLike, SynthKind::MnistLike]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown dataset kind {s:?}")))
    }
}

pub fn synth<T: Element>(kind: SynthKind, n: usize, seed: u64) -> Result<Dataset<T>> {
    match kind {
        SynthKind::AdultLike => adult_like(n, seed),
        SynthKind::Tokens => tokens(n, SEQ_LEN, seed),
        SynthKind::CifarLike => images(kind, n, [3, 32, 32], seed),
        SynthKind::MnistLike => images(kind, n, [1, 28, 28], seed),
    }
}

/// Synthetic data matching `model`, including its sequence length.
pub fn synth_for<T: Element>(model: &Model, n: usize, seed: u64) -> Result<Dataset<T>> {
    match SynthKind::for_model(model.kind) {
        SynthKind::Tokens => tokens(n, model.seq_len, seed),
        k => synth(k, n, seed),
    }
}

/// The unit-norm weight vector behind `adult_like` labels.
pub fn planted_rule(seed: u64) -> Vec<f64> {
    let mut rng = RngState::new(seed, 2);
    let w: Vec<f64> = (0..ADULT_FEATURES).map(|_| rng.normal()).collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.into_iter().map(|v| v / norm).collect()
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs at least one example".into()));
    }
    Ok(())
}

fn adult_like<T: Element>(n: usize, seed: u64) -> Result<Dataset<T>> {
    check_n(n)?;
    let w = planted_rule(seed);
    let mut rng = RngState::new(seed, 0);
    let mut x = Vec::with_capacity(n * ADULT_FEATURES);
    let mut y = Vec::with_capacity(n);
    while y.len() < n {
        let row: Vec<f64> = (0..ADULT_FEATURES).map(|_| rng.normal()).collect();
        let m: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
        if m.abs() < MARGIN {
            continue;
        }
        x.extend(row.into_iter().map(T::from_f64_lossy));
        y.push((m > 0.0) as usize);
    }
    Dataset::new(
        SynthKind::AdultLike.name(),
        Tensor::new(vec![n, ADULT_FEATURES], x)?,
        Tensor::from_ids(&[n], &y)?,
        2,
    )
}

/// A fifth of each sequence's tokens come from a class-specific band of
/// 100 ids; the rest are uniform over the vocabulary.
pub fn tokens<T: Element>(n: usize, len: usize, seed: u64) -> Result<Dataset<T>> {
    check_n(n)?;
    let mut rng = RngState::new(seed, 0);
    let mut labels = RngState::new(seed, 1);
    let mut ids = Vec::with_capacity(n * len);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let c = labels.below(2) as usize;
        for _ in 0..len {
            let id = if rng.next_f64() < 0.2 { c * 100 + rng.below(100) as usize } else { rng.below(VOCAB as u64) as usize };
            ids.push(id);
        }
        y.push(c);
    }
    Dataset::new(
        SynthKind::Tokens.name(),
        Tensor::from_ids(&[n, len], &ids)?,
        Tensor::from_ids(&[n], &y)?,
        2,
    )
}

/// Half uniform noise, half a fixed per-class template.
fn images<T: Element>(kind: SynthKind, n: usize, shape: [usize; 3], seed: u64) -> Result<Dataset<T>> {
    check_n(n)?;
    let per: usize = shape.iter().product();
    let mut tpl = RngState::new(seed, 2);
    let templates: Vec<Vec<f64>> = (0..10).map(|_| (0..per).map(|_| tpl.next_f64()).collect()).collect();
    let mut rng = RngState::new(seed, 0);
    let mut labels = RngState::new(seed, 1);
    let mut x = Vec::with_capacity(n * per);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let c = labels.below(10) as usize;
        x.extend(templates[c].iter().map(|t| T::from_f64_lossy(0.5 * t + 0.5 * rng.next_f64())));
        y.push(c);
    }
    let mut dims = vec![n];
    dims.extend(shape);
    Dataset::new(kind.name(), Tensor::new(dims, x)?, Tensor::from_ids(&[n], &y)?, 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_ranges() {
        let a: Dataset<f32> = synth(SynthKind::AdultLike, 10, 1).unwrap();
        assert_eq!(a.inputs.shape(), &[10, 104]);
        let t: Dataset<f32> = synth(SynthKind::Tokens, 8, 1).unwrap();
        assert_eq!(t.inputs.shape(), &[8, 256]);
        assert!(t.inputs.data().iter().all(|&v| v >= 0.0 && v < VOCAB as f32 && v.fract() == 0.0));
        let c: Dataset<f32> = synth(SynthKind::CifarLike, 3, 1).unwrap();
        assert_eq!(c.inputs.shape(), &[3, 3, 32, 32]);
        assert!(c.inputs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let m: Dataset<f32> = synth(SynthKind::MnistLike, 3, 1).unwrap();
        assert_eq!(m.inputs.shape(), &[3, 1, 28, 28]);
    }

    #[test]
    fn same_seed_same_data() {
        for k in [SynthKind::AdultLike, SynthKind::Tokens, SynthKind::CifarLike] {
            let a: Dataset<f64> = synth(k, 5, 9).unwrap();
            let b: Dataset<f64> = synth(k, 5, 9).unwrap();
            assert_eq!(a, b);
            let c: Dataset<f64> = synth(k, 5, 10).unwrap();
            assert_ne!(a.inputs, c.inputs);
        }
    }

    #[test]
    fn adult_labels_follow_the_planted_rule_with_margin() {
        let d: Dataset<f64> = synth(SynthKind::AdultLike, 200, 4).unwrap();
        let w = planted_rule(4);
        for (row, y) in d.inputs.data().chunks(ADULT_FEATURES).zip(d.labels.data()) {
            let m: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!(m.abs() >= MARGIN);
            assert_eq!((m > 0.0) as usize as f64, *y);
        }
        let ones = d.labels.data().iter().sum::<f64>();
        assert!(ones > 50.0 && ones < 150.0);
    }

    #[test]
    fn zero_examples_is_a_config_error() {
        assert!(matches!(synth::<f32>(SynthKind::Tokens, 0, 0), Err(Error::Config(_))));
    }
}
