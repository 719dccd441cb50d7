//! Acceptance criteria, one PASS/FAIL line each. Run with `--nocapture`
//! to see the lines; the test fails if any criterion fails.
//!
//! Everything runs inside a single test so the timing criterion is not
//! disturbed by other tests running in parallel.

use std::time::Instant;

use pegrad_core::dpsgd::DpConfig;
use pegrad_core::harness::bench::{run_bench, BenchConfig};
use pegrad_core::harness::synth::synth_for;
use pegrad_core::harness::{max_batch_search, train, TrainConfig};
use pegrad_core::strategies::Mode;
use pegrad_core::verify;
use pegrad_core::{Model, ModelKind, Strategy};

struct Outcome {
    passed: bool,
    detail: String,
}

fn from_checks(checks: &[verify::Check]) -> Outcome {
    Outcome {
        passed: checks.iter().all(|c| c.passed),
        detail: checks.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" | "),
    }
}

fn equivalence() -> Outcome {
    let t = Instant::now();
    let c = verify::check_strategy_equivalence(&[1, 2, 4]);
    let secs = t.elapsed().as_secs_f64();
    Outcome {
        passed: c.passed && secs < 300.0,
        detail: format!("{c} in {secs:.1}s"),
    }
}

fn gradient_oracle() -> Outcome {
    from_checks(&[verify::check_primitives(), verify::check_models()])
}

fn dpsgd_semantics() -> Outcome {
    from_checks(&[verify::check_dpsgd(), verify::check_dpsgd_strategy_independence()])
}

fn ablation() -> Outcome {
    let m = Model::build(ModelKind::Fcnn);
    let data = synth_for::<f32>(&m, 4096, 7).unwrap();
    let base = BenchConfig {
        batch_sizes: vec![128],
        epochs: 3,
        max_steps: Some(8),
        dp: DpConfig { clip: 1.0, noise_multiplier: 1.0, lr: 0.1, microbatch: 1, seed: 7 },
        ..Default::default()
    };
    let time = |mode: Mode, vectorize: bool| {
        let cfg = BenchConfig { mode, vectorize, ..base.clone() };
        let r = run_bench(&m, &data, Strategy::Vmap, &cfg).unwrap().remove(0);
        assert!(r.is_ok(), "{r:?}");
        r.median_epoch_seconds
    };
    let loop_eager = time(Mode::Eager, false);
    let vec_eager = time(Mode::Eager, true);
    let vec_graph = time(Mode::Graph, true);
    let speedup = loop_eager / vec_graph;
    Outcome {
        passed: vec_graph < vec_eager && vec_eager < loop_eager && speedup >= 5.0,
        detail: format!(
            "FCNN B=128 f32 median epoch (8 steps): graph+vectorized {vec_graph:.4}s, eager+vectorized {vec_eager:.4}s, eager+loop {loop_eager:.4}s, speedup {speedup:.1}x"
        ),
    }
}

fn optimizer() -> Outcome {
    from_checks(&[verify::check_optimizer()])
}

fn memory() -> Outcome {
    let m = Model::build(ModelKind::Fcnn);
    let caps: Vec<u64> = (0..8).map(|i| (1u64 << 20) << i).collect();
    let search = |s: Strategy| -> Vec<usize> { caps.iter().map(|&c| max_batch_search::<f32>(&m, s, Mode::Graph, c).unwrap()).collect() };
    let norms = search(Strategy::Norms);
    let vmap = search(Strategy::Vmap);
    let outer = search(Strategy::Outer);
    let monotone = |v: &[usize]| v.windows(2).all(|w| w[0] <= w[1]);
    Outcome {
        passed: monotone(&norms) && monotone(&vmap) && monotone(&outer) && norms.iter().zip(&vmap).all(|(n, v)| n >= v),
        detail: format!("FCNN max batch for caps 1..128 MiB: norms {norms:?}, vmap {vmap:?}, outer {outer:?}"),
    }
}

fn training() -> Outcome {
    let m = Model::build(ModelKind::Logreg);
    let data = synth_for::<f32>(&m, 4096, 3).unwrap();
    let dp = train(
        &m,
        &data,
        Strategy::Outer,
        Mode::Graph,
        &TrainConfig {
            epochs: 20,
            batch_size: 64,
            dp: Some(DpConfig { clip: 1.0, noise_multiplier: 0.5, lr: 0.5, microbatch: 1, seed: 3 }),
            lr: 0.5,
            seed: 3,
        },
    )
    .unwrap();
    let sgd = train(
        &m,
        &data,
        Strategy::Outer,
        Mode::Graph,
        &TrainConfig { epochs: 20, batch_size: 64, dp: None, lr: 0.5, seed: 3 },
    )
    .unwrap();
    let (a, b) = (dp.final_accuracy(), sgd.final_accuracy());
    Outcome {
        passed: a >= 0.90 && b >= 0.95,
        detail: format!("adult_like n=4096 logreg: DPSGD (C=1, σ=0.5) {:.3}, SGD {:.3}", a, b),
    }
}

fn support() -> Outcome {
    from_checks(&[verify::check_support_matrix()])
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("strategy equivalence", equivalence),
        ("gradient oracle", gradient_oracle),
        ("dpsgd semantics", dpsgd_semantics),
        ("ablation direction", ablation),
        ("graph optimizer soundness", optimizer),
        ("memory search", memory),
        ("training sanity", training),
        ("support matrix", support),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        println!("criterion {} {} {name}: {}", i + 1, if o.passed { "PASS" } else { "FAIL" }, o.detail);
        if !o.passed {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
