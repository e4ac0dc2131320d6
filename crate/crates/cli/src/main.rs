use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vade::datio::{SynthConfig, Warp};
use vade_cli::commands::{self, DataSpec, EvalArgs, GenerateArgs, SampleFormat};
use vade_cli::config::{parse_label_column, DataFormat};
use vade_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "vade", version, about = "Clustering with a Gaussian-mixture variational autoencoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain and train a model, writing metrics.csv, final.ckpt, best.ckpt and run.log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write eval.csv.
    Eval(EvalCli),
    /// Sample from one cluster of a checkpoint.
    Generate(GenerateCli),
    /// Write a seeded synthetic clustering dataset.
    Synth(SynthCli),
    /// Write encoder means for a dataset.
    Embed(EmbedCli),
    /// Print every configuration key with its default value.
    Config,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    /// Number of clusters.
    #[arg(long)]
    k: Option<usize>,
    /// Latent dimension.
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    binarize: bool,
    #[arg(long)]
    standardize: bool,
    /// Any configuration key, as KEY=VALUE; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct DataCli {
    /// Dataset: a .csv file, or IDX images.
    #[arg(long)]
    data: PathBuf,
    /// Labels: single-column CSV for CSV data, IDX for IDX data.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// auto, csv or idx.
    #[arg(long, default_value = "auto", value_parser = parse_format)]
    format: DataFormat,
    /// Label column inside CSV data: none, last or an index.
    #[arg(long, default_value = "none")]
    label_column: String,
}

#[derive(Args)]
struct EvalCli {
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataCli,
    /// Comma-separated neighbour counts for kNN error on the embeddings.
    #[arg(long, value_delimiter = ',')]
    knn: Vec<usize>,
    /// Labeled held-out data for kNN; leave-one-out on --data otherwise.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for eval.csv (default: the checkpoint's directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateCli {
    checkpoint: PathBuf,
    #[arg(long)]
    cluster: usize,
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Output file (PGM for square Bernoulli models, CSV otherwise).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthCli {
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    latent: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 500)]
    n_per_cluster: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// linear or tanh-mlp.
    #[arg(long, default_value = "tanh-mlp")]
    warp: String,
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Directory for features.csv and labels.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedCli {
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataCli,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

fn parse_format(s: &str) -> Result<DataFormat, String> {
    DataFormat::from_name(s).ok_or_else(|| format!("expected auto, csv or idx, found {s:?}"))
}

impl DataCli {
    fn spec(&self) -> Result<DataSpec, CliError> {
        let label_column = parse_label_column(&self.label_column)
            .ok_or_else(|| CliError::Config(format!("--label-column: expected none, last or an index, found {:?}", self.label_column)))?;
        Ok(DataSpec {
            path: self.data.clone(),
            labels: self.labels.clone(),
            format: self.format,
            label_column,
        })
    }
}

fn run_config(a: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for pair in &a.set {
        cfg.set_pair(pair)?;
    }
    if let Some(v) = &a.data {
        cfg.data = Some(v.clone());
    }
    if let Some(v) = &a.labels {
        cfg.labels = Some(v.clone());
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.pretrain_epochs {
        cfg.train.pretrain_epochs = v;
    }
    if let Some(v) = a.k {
        cfg.clusters = v;
    }
    if let Some(v) = a.latent {
        cfg.latent = v;
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.batch {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.restarts {
        cfg.restarts = v;
    }
    if let Some(v) = &a.out {
        cfg.out = v.clone();
    }
    cfg.binarize |= a.binarize;
    cfg.standardize |= a.standardize;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => {
            let cfg = run_config(&a)?;
            let threads = vade_cli::threads_from_env()?;
            let s = commands::train(&cfg, threads)?;
            let acc = s.final_acc.map_or_else(String::new, |a| format!(", ACC {a}"));
            eprintln!(
                "restart {} (seed {}) selected: mean ELBO {}{acc}; artifacts in {}",
                s.restart,
                s.seed,
                s.final_elbo,
                s.out.display()
            );
        }
        Command::Eval(a) => {
            let test = match a.test_data {
                Some(p) => Some(DataSpec {
                    path: p,
                    labels: a.test_labels.clone(),
                    ..a.data.spec()?
                }),
                None if a.test_labels.is_some() => {
                    return Err(CliError::Config("--test-labels needs --test-data".into()))
                }
                None => None,
            };
            let out = commands::eval(&EvalArgs {
                checkpoint: a.checkpoint,
                data: a.data.spec()?,
                test,
                knn: a.knn,
                seed: a.seed,
                out: a.out,
            })?;
            print!("{out}");
        }
        Command::Generate(a) => {
            let s = commands::generate_samples(&GenerateArgs {
                checkpoint: a.checkpoint,
                cluster: a.cluster,
                count: a.count,
                out: a.out.clone(),
                seed: a.seed,
            })?;
            let kind = match s.format {
                SampleFormat::Pgm => "PGM grid",
                SampleFormat::Csv => "CSV",
            };
            eprintln!(
                "wrote {} samples as {kind} to {}; {:.1}% reassigned to cluster {}",
                a.count,
                a.out.display(),
                100.0 * s.reassigned,
                a.cluster
            );
        }
        Command::Synth(a) => {
            let warp = Warp::from_name(&a.warp)
                .ok_or_else(|| CliError::Config(format!("--warp: expected linear or tanh-mlp, found {:?}", a.warp)))?;
            let cfg = SynthConfig {
                warp,
                separation: a.separation,
                noise: a.noise,
                ..SynthConfig::new(a.k, a.latent, a.dim, a.n_per_cluster, a.seed)
            };
            let ds = commands::synth(&cfg, &a.out)?;
            eprintln!("wrote {} samples x {} features to {}", ds.len(), ds.dim(), a.out.display());
        }
        Command::Embed(a) => {
            let emb = commands::embed_data(&a.checkpoint, &a.data.spec()?, &a.out)?;
            eprintln!("wrote {} x {} embeddings to {}", emb.rows(), emb.cols(), a.out.display());
        }
        Command::Config => print!("{}", RunConfig::default().render()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vade: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
