//! `vittt`: equivalence suites, toy training, interpretability exports, and
//! complexity benchmarks from one binary.
//!
//! Exit codes: 0 pass, 1 property violation, 2 usage/config error,
//! 3 numeric abort.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use vittt_cli::{
    cmd_bench, cmd_erf, cmd_gmm, cmd_infer, cmd_recon_trace, cmd_train_toy, cmd_verify,
    exit_code_for, Outcome, RunConfig,
};

#[derive(Parser)]
#[command(name = "vittt", version, about = "Test-time-training vision backbone toolkit")]
struct Cli {
    /// Flat `key = value` config file; CLI flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for internal parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Numeric precision for benchmark forwards: f64 or f32.
    #[arg(long, global = true)]
    precision: Option<String>,
    /// Output directory (manifest, reports, CSV/PGM artifacts).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model preset: micro, tiny, small, base.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a property suite: dual_form, theorem1, theorem2, oracle, gradcheck.
    Verify {
        suite: String,
        /// Number of random instances.
        #[arg(long)]
        seeds: Option<usize>,
        /// Maximum sequence length of the sweep (theorem suites).
        #[arg(long = "T")]
        max_t: Option<usize>,
        /// Problem scale for gradcheck (only `micro` is defined).
        #[arg(long)]
        scale: Option<String>,
    },
    /// Train the toy model on the bundled synthetic dataset.
    TrainToy(TrainArgs),
    /// Compute logits from a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        image: Option<String>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Export a gradient magnitude map (CSV + PGM).
    Gmm {
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        image: Option<String>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        direction: Option<String>,
        #[arg(long)]
        top_percent: Option<f64>,
    },
    /// Export an effective receptive field map (CSV + PGM).
    Erf {
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        image: Option<String>,
        /// autodiff or finite-diff.
        #[arg(long)]
        probe: Option<String>,
    },
    /// Export the per-layer reconstruction-loss trace.
    ReconTrace {
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        image: Option<String>,
    },
    /// Measure and tabulate FLOPs (analytic vs counted) across sequence lengths.
    Bench(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// sgd or adamw.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    /// Train against shuffled labels (sanity control).
    #[arg(long)]
    shuffle_labels: bool,
    /// Also export the dataset directory.
    #[arg(long)]
    save_dataset: bool,
    /// Load an existing dataset directory instead of generating one.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Stop once train accuracy reaches this fraction.
    #[arg(long)]
    stop_at_accuracy: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    /// vit, vim, or vittt.
    #[arg(long)]
    arch: Option<String>,
    /// Comma-separated sequence lengths, e.g. 64,256,1024.
    #[arg(long = "T")]
    t: Option<String>,
    /// Embedding dimension.
    #[arg(long = "D")]
    d: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long)]
    b: Option<usize>,
    #[arg(long)]
    warmups: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
}

fn build_config(cli: &Cli) -> Result<RunConfig, vittt_core::Error> {
    let mut cfg = RunConfig::new();
    if let Some(path) = &cli.config {
        cfg.load_file(path)?;
    }
    if let Some(v) = cli.seed {
        cfg.set("seed", v);
    }
    if let Some(v) = cli.threads {
        cfg.set("threads", v);
    }
    if let Some(v) = &cli.precision {
        cfg.set("precision", v);
    }
    if let Some(v) = &cli.out {
        cfg.set("out", v.display().to_string());
    }
    if let Some(v) = &cli.preset {
        cfg.set("model.preset", v);
    }
    cfg.set_default("seed", 0);
    cfg.set_default("threads", 1);
    cfg.set_default("precision", "f64");

    match &cli.cmd {
        Cmd::Verify {
            suite,
            seeds,
            max_t,
            scale,
        } => {
            cfg.set("command", "verify");
            cfg.set("verify.suite", suite);
            if let Some(s) = seeds {
                cfg.set("verify.seeds", s);
            }
            if let Some(t) = max_t {
                cfg.set("verify.max_t", t);
            }
            if let Some(s) = scale {
                cfg.set("verify.scale", s);
            }
        }
        Cmd::TrainToy(a) => {
            cfg.set("command", "train-toy");
            if let Some(v) = a.steps {
                cfg.set("train.steps", v);
            }
            if let Some(v) = a.batch_size {
                cfg.set("train.batch_size", v);
            }
            if let Some(v) = a.lr {
                cfg.set("train.lr", v);
            }
            if let Some(v) = &a.optimizer {
                cfg.set("train.optimizer", v);
            }
            if let Some(v) = a.samples {
                cfg.set("train.samples", v);
            }
            if a.shuffle_labels {
                cfg.set("train.shuffle_labels", "true");
            }
            if a.save_dataset {
                cfg.set("train.save_dataset", "true");
            }
            if let Some(v) = &a.dataset {
                cfg.set("train.dataset", v.display().to_string());
            }
            if let Some(v) = a.stop_at_accuracy {
                cfg.set("train.stop_at_accuracy", v);
            }
        }
        Cmd::Infer {
            checkpoint,
            image,
            dataset,
        } => {
            cfg.set("command", "infer");
            if let Some(v) = checkpoint {
                cfg.set("infer.checkpoint", v);
            }
            if let Some(v) = image {
                cfg.set("infer.image", v);
            }
            if let Some(v) = dataset {
                cfg.set("infer.dataset", v.display().to_string());
            }
        }
        Cmd::Gmm {
            checkpoint,
            image,
            layer,
            direction,
            top_percent,
        } => {
            cfg.set("command", "gmm");
            if let Some(v) = checkpoint {
                cfg.set("gmm.checkpoint", v);
            }
            if let Some(v) = image {
                cfg.set("gmm.image", v);
            }
            if let Some(v) = layer {
                cfg.set("gmm.layer", v);
            }
            if let Some(v) = direction {
                cfg.set("gmm.direction", v);
            }
            if let Some(v) = top_percent {
                cfg.set("gmm.top_percent", v);
            }
        }
        Cmd::Erf {
            checkpoint,
            image,
            probe,
        } => {
            cfg.set("command", "erf");
            if let Some(v) = checkpoint {
                cfg.set("erf.checkpoint", v);
            }
            if let Some(v) = image {
                cfg.set("erf.image", v);
            }
            if let Some(v) = probe {
                cfg.set("erf.probe", v);
            }
        }
        Cmd::ReconTrace { checkpoint, image } => {
            cfg.set("command", "recon-trace");
            if let Some(v) = checkpoint {
                cfg.set("trace.checkpoint", v);
            }
            if let Some(v) = image {
                cfg.set("trace.image", v);
            }
        }
        Cmd::Bench(a) => {
            cfg.set("command", "bench");
            if let Some(v) = &a.arch {
                cfg.set("bench.arch", v);
            }
            if let Some(v) = &a.t {
                cfg.set("bench.t", v);
            }
            if let Some(v) = a.d {
                cfg.set("bench.d", v);
            }
            if let Some(v) = a.head_dim {
                cfg.set("bench.head_dim", v);
            }
            if let Some(v) = a.b {
                cfg.set("bench.b", v);
            }
            if let Some(v) = a.warmups {
                cfg.set("bench.warmups", v);
            }
            if let Some(v) = a.reps {
                cfg.set("bench.reps", v);
            }
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };

    let threads: usize = cfg.parse("threads", 1usize).unwrap_or(1);
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }

    let result = match cli.cmd {
        Cmd::Verify { .. } => cmd_verify(&cfg),
        Cmd::TrainToy(_) => cmd_train_toy(&cfg),
        Cmd::Infer { .. } => cmd_infer(&cfg),
        Cmd::Gmm { .. } => cmd_gmm(&cfg),
        Cmd::Erf { .. } => cmd_erf(&cfg),
        Cmd::ReconTrace { .. } => cmd_recon_trace(&cfg),
        Cmd::Bench(_) => cmd_bench(&cfg),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::PropertyViolation) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}
