use pegrad_core::autodiff::grad;
use pegrad_core::models::{LossForm, LossProgram};
use pegrad_core::strategies::{Mode, Runner};
use pegrad_core::{Model, ModelKind, PerExampleGrads, RngState, Strategy, Tensor};

fn model(kind: ModelKind) -> Model {
    // short sequences keep the unrolled LSTM small
    Model::with_seq_len(kind, 6)
}

fn rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.rel_diff(b, 1e-12)
}

#[test]
fn every_supported_strategy_matches_naive_at_64_bit() {
    for kind in ModelKind::ALL {
        let m = model(kind);
        let mut rng = RngState::new(11, kind as u64);
        let params: Vec<Tensor<f64>> = m.init(&mut rng);
        for b in [1usize, 2, 4] {
            let (x, y) = m.random_batch::<f64>(b, &mut rng);
            let (reference, ref_loss) = Runner::new(m.clone(), Strategy::Naive, Mode::Graph)
                .unwrap()
                .per_example(&params, &x, &y)
                .unwrap();
            let ref_norms = reference.norms();
            for s in Strategy::ALL {
                if s == Strategy::Naive || s.check_support(kind).is_err() {
                    continue;
                }
                for mode in [Mode::Eager, Mode::Graph] {
                    let (got, loss) = Runner::new(m.clone(), s, mode).unwrap().per_example(&params, &x, &y).unwrap();
                    assert!(rel(&loss, &ref_loss) <= 1e-8, "{kind} {s} loss");
                    match got {
                        PerExampleGrads::Materialized(blocks) => {
                            for (i, (g, r)) in blocks.iter().zip(reference.blocks().unwrap()).enumerate() {
                                assert_eq!(g.shape(), r.shape(), "{kind} {s} block {i}");
                                let d = rel(g, r);
                                assert!(d <= 1e-8, "{kind} {s} {mode:?} B={b} block {i}: {d:e}");
                            }
                        }
                        PerExampleGrads::NormsOnly(n) => {
                            for (a, r) in n.to_f64_vec().iter().zip(&ref_norms) {
                                assert!((a - r).abs() <= 1e-8 * r.abs().max(1e-12), "{kind} norms {a} vs {r}");
                            }
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn per_example_rows_sum_to_batch_gradient() {
    for kind in ModelKind::ALL {
        let m = model(kind);
        let mut rng = RngState::new(12, kind as u64);
        let params: Vec<Tensor<f64>> = m.init(&mut rng);
        let (x, y) = m.random_batch::<f64>(3, &mut rng);
        let (per, _) = Runner::new(m.clone(), Strategy::Vmap, Mode::Graph)
            .unwrap()
            .per_example(&params, &x, &y)
            .unwrap();
        let (_, want) = grad(&LossProgram { model: &m, n: 3, form: LossForm::Sum }, &[x, y], &params).unwrap();
        for (s, w) in per.sum_over_batch().unwrap().iter().zip(&want) {
            assert!(rel(s, w) <= 1e-10, "{kind}");
        }
    }
}

#[test]
fn weighted_sum_matches_scaled_rows() {
    let m = model(ModelKind::Fcnn);
    let mut rng = RngState::new(13, 0);
    let params: Vec<Tensor<f64>> = m.init(&mut rng);
    let (x, y) = m.random_batch::<f64>(4, &mut rng);
    let w = Tensor::from_f64(&[4], &[0.5, 1.0, 0.0, 2.0]).unwrap();
    let mut r = Runner::new(m.clone(), Strategy::Outer, Mode::Graph).unwrap();
    let got = r.weighted_sum(&params, &x, &y, &w).unwrap();
    let (per, _) = r.per_example(&params, &x, &y).unwrap();
    for (g, blk) in got.iter().zip(per.blocks().unwrap()) {
        let per_row = blk.numel() / 4;
        let mut want = vec![0.0; per_row];
        for i in 0..4 {
            for (k, v) in want.iter_mut().enumerate() {
                *v += w.data()[i] * blk.data()[i * per_row + k];
            }
        }
        let want = Tensor::from_f64(g.shape(), &want).unwrap();
        assert!(rel(g, &want) <= 1e-12);
    }
}

#[test]
fn eager_and_graph_agree_at_32_bit() {
    let m = model(ModelKind::MnistCnn);
    let mut rng = RngState::new(14, 0);
    let params: Vec<Tensor<f32>> = m.init(&mut rng);
    let (x, y) = m.random_batch::<f32>(2, &mut rng);
    let (a, _) = Runner::new(m.clone(), Strategy::JacMm, Mode::Eager).unwrap().per_example(&params, &x, &y).unwrap();
    let (b, _) = Runner::new(m, Strategy::JacMm, Mode::Graph).unwrap().per_example(&params, &x, &y).unwrap();
    for (p, q) in a.blocks().unwrap().iter().zip(b.blocks().unwrap()) {
        assert!(p.rel_diff(q, 1e-6) <= 1e-4);
    }
}
