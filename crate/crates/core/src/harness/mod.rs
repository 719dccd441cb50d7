//! Datasets, the timing protocol, max-batch search, training runs and
//! result files.

pub mod bench;
pub mod idx;
pub mod report;
pub mod synth;

use std::rc::Rc;

use crate::dpsgd::{dpsgd_step, sgd_step, DpConfig};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Eager;
use crate::models::Model;
use crate::rng::RngState;
use crate::strategies::{Mode, Runner, Strategy};
use crate::tensor::Tensor;

pub use bench::{footprint_bytes, max_batch_search, max_batch_search_with, run_bench, BenchConfig, BenchRecord};
pub use report::{emit, read_csv, read_json, render, Format};
pub use synth::{synth, SynthKind};

/// Environment variable selecting 32- or 64-bit elements.
pub const ELEMENT_WIDTH_VAR: &str = "PEGRAD_ELEMENT_WIDTH";

/// Element width from the environment, defaulting to 32.
pub fn element_width_from_env() -> Result<u32> {
    match std::env::var(ELEMENT_WIDTH_VAR) {
        Err(_) => Ok(32),
        Ok(v) => match v.trim() {
            "32" => Ok(32),
            "64" => Ok(64),
            other => Err(Error::Config(format!("{ELEMENT_WIDTH_VAR} must be 32 or 64, got {other:?}"))),
        },
    }
}

/// Examples with labels. Token inputs are stored as integral values.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub name: String,
    /// `[n, ..]`
    pub inputs: Tensor<T>,
    /// `[n]` class ids
    pub labels: Tensor<T>,
    pub classes: usize,
}

impl<T: Element> Dataset<T> {
    pub fn new(name: impl Into<String>, inputs: Tensor<T>, labels: Tensor<T>, classes: usize) -> Result<Self> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::Config("dataset has no examples".into()));
        }
        if labels.shape() != [n] {
            return Err(Error::shape("dataset", format!("inputs {:?} with labels {:?}", inputs.shape(), labels.shape())));
        }
        if let Some(bad) = labels.data().iter().position(|l| {
            let v = l.as_f64();
            v < 0.0 || v.fract() != 0.0 || v >= classes as f64
        }) {
            return Err(Error::Index {
                position: bad,
                id: labels.data()[bad].as_f64(),
                bound: classes,
            });
        }
        Ok(Dataset {
            name: name.into(),
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, rows: &[usize]) -> (Tensor<T>, Tensor<T>) {
        (self.inputs.select_rows(rows), self.labels.select_rows(rows))
    }

    pub fn cast<U: Element>(&self) -> Dataset<U> {
        Dataset {
            name: self.name.clone(),
            inputs: self.inputs.cast(),
            labels: self.labels.cast(),
            classes: self.classes,
        }
    }

    /// Errors unless the example shape and label range fit `model`.
    pub fn check_for(&self, model: &Model) -> Result<()> {
        if self.inputs.shape()[1..] != model.example_shape()[..] {
            return Err(Error::shape(
                "dataset",
                format!("examples {:?} for a model expecting {:?}", &self.inputs.shape()[1..], model.example_shape()),
            ));
        }
        if self.classes > model.num_classes() {
            return Err(Error::Config(format!(
                "{} classes in {} exceed the {} outputs of {}",
                self.classes,
                self.name,
                model.num_classes(),
                model.kind
            )));
        }
        Ok(())
    }
}

/// Full batches of a shuffled epoch; the trailing partial batch is dropped
/// so every step has the same shape.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut RngState) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks_exact(batch).map(|c| c.to_vec()).collect()
}

/// Fraction of examples whose highest logit is the label.
pub fn accuracy<T: Element>(model: &Model, params: &[Tensor<T>], data: &Dataset<T>) -> Result<f64> {
    let mut e = Eager::default();
    let ps: Vec<Rc<Tensor<T>>> = params.iter().map(|p| Rc::new(p.clone())).collect();
    let mut correct = 0usize;
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(256) {
        let (x, y) = data.batch(chunk);
        let logits = model.forward(&mut e, &Rc::new(x), &ps)?.logits;
        let k = logits.shape()[1];
        for (row, label) in logits.data().chunks(k).zip(y.data()) {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, v)| if v.as_f64() > b.1 { (i, v.as_f64()) } else { b })
                .0;
            correct += (best as f64 == label.as_f64()) as usize;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Private training when set; plain SGD with `lr` otherwise.
    pub dp: Option<DpConfig>,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult<T> {
    pub params: Vec<Tensor<T>>,
    /// Mean training loss over each epoch's steps.
    pub epoch_losses: Vec<f64>,
    /// Train accuracy after each epoch.
    pub epoch_accuracy: Vec<f64>,
}

impl<T> TrainResult<T> {
    pub fn final_accuracy(&self) -> f64 {
        self.epoch_accuracy.last().copied().unwrap_or(0.0)
    }
}

/// Trains from a seeded initialization and tracks train accuracy.
pub fn train<T: Element>(model: &Model, data: &Dataset<T>, strategy: Strategy, mode: Mode, cfg: &TrainConfig) -> Result<TrainResult<T>> {
    data.check_for(model)?;
    if cfg.batch_size == 0 || cfg.batch_size > data.len() {
        return Err(Error::Config(format!("batch size {} for {} examples", cfg.batch_size, data.len())));
    }
    let mut runner = Runner::new(model.clone(), strategy, mode)?;
    let mut params = model.init(&mut RngState::new(cfg.seed, 0));
    let (mut losses, mut acc) = (Vec::new(), Vec::new());
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut shuffle = RngState::new(cfg.seed, 1 + epoch as u64);
        let mut total = 0.0;
        let batches = epoch_batches(data.len(), cfg.batch_size, &mut shuffle);
        for rows in &batches {
            let (x, y) = data.batch(rows);
            total += match &cfg.dp {
                Some(dp) => dpsgd_step(&mut runner, &mut params, &x, &y, dp, step)?.loss,
                None => sgd_step(&mut runner, &mut params, &x, &y, cfg.lr)?,
            };
            step += 1;
        }
        losses.push(total / batches.len() as f64);
        acc.push(accuracy(model, &params, data)?);
    }
    Ok(TrainResult {
        params,
        epoch_losses: losses,
        epoch_accuracy: acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelKind;

    #[test]
    fn batches_drop_the_remainder() {
        let b = epoch_batches(10, 4, &mut RngState::new(0, 0));
        assert_eq!(b.len(), 2);
        let mut seen: Vec<usize> = b.concat();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn labels_out_of_range_are_rejected() {
        let x = Tensor::<f32>::zeros(&[2, 3]);
        let y = Tensor::from_f64(&[2], &[0.0, 2.0]).unwrap();
        assert!(matches!(Dataset::new("t", x, y, 2), Err(Error::Index { position: 1, .. })));
    }

    #[test]
    fn accuracy_of_a_hand_set_logreg() {
        let m = Model::build(ModelKind::Logreg);
        let mut w = vec![0.0; 104];
        w[0] = 1.0;
        let params = vec![Tensor::<f64>::from_f64(&[104, 1], &w).unwrap(), Tensor::zeros(&[1])];
        let mut x = vec![0.0; 3 * 104];
        x[0] = 1.0;
        x[104] = -1.0;
        x[208] = 2.0;
        let data = Dataset::new(
            "t",
            Tensor::from_f64(&[3, 104], &x).unwrap(),
            Tensor::from_f64(&[3], &[1.0, 0.0, 0.0]).unwrap(),
            2,
        )
        .unwrap();
        assert!((accuracy(&m, &params, &data).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }
}
