use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use optfuse::harness::{parse_batch_sweep, run_bench, BenchConfig, Mode};
use optfuse::{ModelSpec, OptimizerKind, OptimizerPolicy, Precision, Schedule};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelArg {
    Chain,
    SharedChain,
    MulProbe,
}

/// Compare the baseline, forward-fusion and backward-fusion training schedules.
#[derive(Debug, Parser)]
#[command(name = "optfuse", version)]
struct Args {
    #[arg(long, value_enum, default_value = "chain")]
    model: ModelArg,
    #[arg(long, default_value_t = 64)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Layer groups sharing one parameter for shared-chain, e.g. "0,2;1,3".
    /// Defaults to tying the first and last layer.
    #[arg(long)]
    share: Option<String>,
    /// sgd, sgd-momentum, adagrad, rmsprop, adadelta or adam.
    #[arg(long, default_value = "adam")]
    optimizer: String,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Clip gradients to this global norm before stepping.
    #[arg(long)]
    clip: Option<f64>,
    /// baseline, forward or backward; every schedule when omitted.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Inclusive batch range `lo:hi` for sweep mode.
    #[arg(long)]
    batch_sweep: Option<String>,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value = "f32")]
    precision: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// time, trace, verify, breakdown, sweep or optimizers.
    #[arg(long, default_value = "time")]
    mode: String,
    #[arg(long, default_value = "optfuse-out")]
    out: PathBuf,
}

fn parse_share(s: &str) -> Result<Vec<Vec<usize>>, String> {
    s.split(';')
        .map(|g| {
            g.split(',')
                .map(|l| l.trim().parse::<usize>().map_err(|e| format!("--share `{l}`: {e}")))
                .collect()
        })
        .collect()
}

fn config(args: Args) -> Result<BenchConfig, Box<dyn std::error::Error>> {
    let model = match args.model {
        ModelArg::Chain => ModelSpec::Chain { layers: args.layers, width: args.width },
        ModelArg::MulProbe => ModelSpec::MulProbe { width: args.width },
        ModelArg::SharedChain => {
            let share_groups = match &args.share {
                Some(s) => parse_share(s)?,
                None => vec![vec![0, args.layers.saturating_sub(1)]],
            };
            ModelSpec::SharedChain { layers: args.layers, width: args.width, share_groups }
        }
    };
    let kind: OptimizerKind = args.optimizer.parse()?;
    let mut optimizer = OptimizerPolicy::new(kind).with_weight_decay(args.weight_decay);
    if let Some(lr) = args.lr {
        optimizer = optimizer.with_eta(lr);
    }
    let mode: Mode = args.mode.parse()?;
    let batch_sizes = match &args.batch_sweep {
        Some(range) => parse_batch_sweep(range)?,
        None => vec![args.batch],
    };
    Ok(BenchConfig {
        model,
        optimizer,
        schedule: args.schedule.as_deref().map(str::parse::<Schedule>).transpose()?,
        precision: args.precision.parse::<Precision>()?,
        batch_sizes,
        warmup: args.warmup,
        iters: args.iters,
        workers: args.workers,
        seed: args.seed,
        out: args.out,
        mode,
        clip_norm: args.clip,
    })
}

fn main() -> ExitCode {
    let cfg = match config(Args::parse()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("optfuse: {e}");
            return ExitCode::from(2);
        }
    };
    match run_bench(&cfg) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            for f in &outcome.files {
                eprintln!("wrote {}", f.display());
            }
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("optfuse: {e}");
            ExitCode::from(2)
        }
    }
}
