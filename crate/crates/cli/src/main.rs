//! `txfuse` command line: individual pipeline stages, full runs and sampler benchmarks.

mod stages;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use txfuse::harness::config::SEED_ENV;
use txfuse::harness::{ExperimentConfig, PipelineAblation};

#[derive(Parser, Debug)]
#[command(name = "txfuse", version, about = "Fraud detection from transaction language and graph structure")]
struct Cli {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Global seed. Beats TXFUSE_SEED, which beats the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Working directory for artifacts (defaults to the config's output_dir).
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    /// More log output; repeat for debug.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic transaction set.
    Synth(SynthArgs),
    /// Parse transactions, build the account graph and the token corpus.
    Ingest(IngestArgs),
    /// Split labeled accounts and compute node features.
    Features,
    /// Pretrain the transaction language model.
    PretrainLm(LmArgs),
    /// Pretrain the masked graph autoencoder and export node embeddings.
    PretrainGae(GaeArgs),
    /// Train the fusion classifier and report metrics.
    FuseTrain(FuseArgs),
    /// Score a trained classifier and write per-account predictions.
    Evaluate(EvalArgs),
    /// Compare neighbor samplers on a graph.
    SampleBench(BenchArgs),
    /// Run every stage with manifest and checksums.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    accounts: Option<usize>,
    #[arg(long)]
    days: Option<f64>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Transactions file; defaults to transactions.jsonl in the working directory.
    #[arg(long)]
    input: Option<PathBuf>,
    /// `address,label` file; defaults to labels.csv in the working directory.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Input format, guessed from the extension when omitted.
    #[arg(long, value_enum)]
    format: Option<stages::InputFormat>,
}

#[derive(Args, Debug)]
struct LmArgs {
    #[arg(long)]
    d_lm: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Masked-token training only.
    #[arg(long)]
    no_contrastive: bool,
}

#[derive(Args, Debug)]
struct GaeArgs {
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    fanout: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Replace the node features with standard-normal noise.
    #[arg(long)]
    random_features: bool,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[arg(long)]
    ks: Option<usize>,
    #[arg(long)]
    kf: Option<usize>,
    #[arg(long)]
    df: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    ablate: Option<PipelineAblation>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ablate: Option<PipelineAblation>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// `labor`, `ns` or `both`.
    #[arg(long, default_value = "both")]
    pub sampler: String,
    /// Per-layer fanouts, outermost last.
    #[arg(long, value_delimiter = ',', default_value = "10,10")]
    pub fanout: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// `from,to,count,value` edge list; a clustered random graph otherwise.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub nodes: usize,
    #[arg(long, default_value_t = 20)]
    pub communities: usize,
    #[arg(long, default_value_t = 20)]
    pub degree: usize,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    ablate: Option<PipelineAblation>,
    /// Also run every ablation and write study.csv.
    #[arg(long)]
    study: bool,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if cfg.apply_env()? {
        log::info!("seed {} from {SEED_ENV}", cfg.seed);
    }
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let mut cfg = load_config(&cli)?;
    std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;

    match cli.command {
        Command::Synth(a) => {
            set(&mut cfg.synthetic.n_accounts, a.accounts);
            set(&mut cfg.synthetic.horizon_days, a.days);
            stages::synth(&cfg)
        }
        Command::Ingest(a) => stages::ingest(&cfg, a.input, a.labels, a.format),
        Command::Features => stages::features(&cfg),
        Command::PretrainLm(a) => {
            let t = &mut cfg.txclm;
            set(&mut t.d_model, a.d_lm);
            set(&mut t.layers, a.layers);
            set(&mut t.heads, a.heads);
            set(&mut t.mask_ratio, a.mask_ratio);
            set(&mut t.tau, a.tau);
            set(&mut t.epochs, a.epochs);
            set(&mut t.lr, a.lr);
            stages::pretrain_lm(&cfg, !a.no_contrastive)
        }
        Command::PretrainGae(a) => {
            let m = &mut cfg.magae;
            set(&mut m.d_h, a.d_h);
            set(&mut m.mask_ratio, a.mask_ratio);
            set(&mut m.gamma, a.gamma);
            set(&mut m.fanout, a.fanout);
            set(&mut m.epochs, a.epochs);
            set(&mut m.lr, a.lr);
            stages::pretrain_gae(&cfg, a.random_features)
        }
        Command::FuseTrain(a) => {
            let c = &mut cfg.cafn;
            set(&mut c.k_s, a.ks);
            set(&mut c.k_f, a.kf);
            set(&mut c.d_f, a.df);
            set(&mut c.epochs, a.epochs);
            set(&mut c.lr, a.lr);
            set(&mut cfg.ablation, a.ablate);
            stages::fuse_train(&cfg)
        }
        Command::Evaluate(a) => stages::evaluate(&cfg, a.ablate),
        Command::SampleBench(a) => stages::sample_bench(&cfg, &a),
        Command::Run(a) => {
            set(&mut cfg.ablation, a.ablate);
            stages::run(cfg, a.study)
        }
    }
}
