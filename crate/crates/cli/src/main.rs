use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pegrad_core::dpsgd::DpConfig;
use pegrad_core::harness::idx::load_idx;
use pegrad_core::harness::synth::synth_for;
use pegrad_core::harness::{
    element_width_from_env, emit, max_batch_search, render, run_bench, train, BenchConfig, Dataset, Format, TrainConfig,
};
use pegrad_core::strategies::Mode;
use pegrad_core::{verify, Element, Model, ModelKind, Strategy};

/// Per-example gradients and DPSGD benchmarks.
///
/// Element width comes from PEGRAD_ELEMENT_WIDTH (32 or 64, default 32);
/// `verify` always runs at 64 bits.
#[derive(Parser)]
#[command(name = "pegrad", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Time DPSGD epochs over a batch-size sweep and write records.
    Bench(BenchArgs),
    /// Run the equivalence and gradient oracle suite; exits non-zero on failure.
    Verify,
    /// Largest batch whose planned footprint fits a memory cap.
    Maxbatch(MaxbatchArgs),
    /// Train on a dataset and print the final train accuracy.
    Train(TrainArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct DataArgs {
    /// Synthetic examples to generate.
    #[arg(long, default_value_t = 4096)]
    dataset_size: usize,
    /// IDX image file (with --idx-labels) instead of synthetic data.
    #[arg(long, requires = "idx_labels")]
    idx_images: Option<PathBuf>,
    #[arg(long, requires = "idx_images")]
    idx_labels: Option<PathBuf>,
}

#[derive(Args)]
struct DpArgs {
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_multiplier: f64,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    microbatch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DpArgs {
    fn config(&self) -> DpConfig {
        DpConfig {
            clip: self.clip,
            noise_multiplier: self.noise_multiplier,
            lr: self.lr,
            microbatch: self.microbatch,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: ModelKind,
    #[arg(long)]
    strategy: Strategy,
    #[arg(long, default_value = "graph")]
    mode: Mode,
    /// `off` replaces the strategy with the per-example loop.
    #[arg(long, value_enum, default_value = "on")]
    vectorize: OnOff,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128,256")]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Stop each epoch after this many steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Record batch sizes whose footprint exceeds this many bytes as OOM.
    #[arg(long, value_parser = parse_bytes)]
    mem_cap: Option<u64>,
    #[command(flatten)]
    dp: DpArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Output file; records go to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "json")]
    format: Format,
}

#[derive(Args)]
struct MaxbatchArgs {
    #[arg(long)]
    model: ModelKind,
    #[arg(long)]
    strategy: Strategy,
    /// Budget in bytes; KiB, MiB and GiB suffixes are accepted.
    #[arg(long, value_parser = parse_bytes)]
    mem_cap: u64,
    #[arg(long, default_value = "graph")]
    mode: Mode,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: ModelKind,
    #[arg(long, default_value = "vmap")]
    strategy: Strategy,
    #[arg(long, default_value = "graph")]
    mode: Mode,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Plain minibatch SGD instead of DPSGD.
    #[arg(long)]
    no_privacy: bool,
    #[command(flatten)]
    dp: DpArgs,
    #[command(flatten)]
    data: DataArgs,
}

fn parse_bytes(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (num, scale) = [("GiB", 1u64 << 30), ("MiB", 1 << 20), ("KiB", 1 << 10)]
        .iter()
        .find_map(|&(suffix, k)| s.strip_suffix(suffix).map(|n| (n, k)))
        .unwrap_or((s, 1));
    num.trim()
        .parse::<u64>()
        .ok()
        .and_then(|n| n.checked_mul(scale))
        .ok_or_else(|| format!("expected a byte count like 1048576 or 64MiB, got {s:?}"))
}

fn load<T: Element>(model: &Model, args: &DataArgs, seed: u64) -> Result<Dataset<T>> {
    match (&args.idx_images, &args.idx_labels) {
        (Some(images), Some(labels)) => Ok(load_idx(images, labels)?),
        _ => Ok(synth_for(model, args.dataset_size, seed)?),
    }
}

fn bench<T: Element>(a: &BenchArgs) -> Result<()> {
    let model = Model::build(a.model);
    let data = load::<T>(&model, &a.data, a.dp.seed)?;
    let cfg = BenchConfig {
        mode: a.mode,
        vectorize: matches!(a.vectorize, OnOff::On),
        batch_sizes: a.batch_sizes.clone(),
        epochs: a.epochs,
        dp: a.dp.config(),
        mem_cap: a.mem_cap,
        max_steps: a.max_steps,
    };
    let records = run_bench(&model, &data, a.strategy, &cfg)?;
    for r in &records {
        let outcome = match &r.reason {
            Some(why) => format!("{}: {why}", r.status),
            None => format!("median epoch {:.4}s", r.median_epoch_seconds),
        };
        eprintln!("{} {} {} B={}: {outcome}", r.model_kind, r.strategy, r.mode, r.batch_size);
    }
    match &a.out {
        Some(path) => emit(&records, a.format, path).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{}", render(&records, a.format)?),
    }
    Ok(())
}

fn maxbatch<T: Element>(a: &MaxbatchArgs) -> Result<()> {
    let model = Model::build(a.model);
    let b = max_batch_search::<T>(&model, a.strategy, a.mode, a.mem_cap)?;
    println!("{b}");
    Ok(())
}

fn train_cmd<T: Element>(a: &TrainArgs) -> Result<()> {
    let model = Model::build(a.model);
    let data = load::<T>(&model, &a.data, a.dp.seed)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        dp: (!a.no_privacy).then(|| a.dp.config()),
        lr: a.dp.lr,
        seed: a.dp.seed,
    };
    let r = train(&model, &data, a.strategy, a.mode, &cfg)?;
    for (e, (loss, acc)) in r.epoch_losses.iter().zip(&r.epoch_accuracy).enumerate() {
        eprintln!("epoch {:>3}: loss {loss:.4}, train accuracy {acc:.4}", e + 1);
    }
    println!("final train accuracy: {:.4}", r.final_accuracy());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if let Cmd::Verify = cli.cmd {
        let checks = verify::run_all();
        for c in &checks {
            println!("{c}");
        }
        return Ok(checks.iter().all(|c| c.passed));
    }
    let width = element_width_from_env()?;
    macro_rules! at_width {
        ($f:ident, $a:expr) => {
            match width {
                32 => $f::<f32>($a),
                64 => $f::<f64>($a),
                w => bail!("unsupported element width {w}"),
            }
        };
    }
    match &cli.cmd {
        Cmd::Bench(a) => at_width!(bench, a)?,
        Cmd::Maxbatch(a) => at_width!(maxbatch, a)?,
        Cmd::Train(a) => at_width!(train_cmd, a)?,
        Cmd::Verify => unreachable!(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
