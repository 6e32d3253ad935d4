mod commands;
mod errors;
mod manifest;
mod params;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "aat", version, about = "Attention-head ablation experiments on toy ViT encoders")]
pub struct Cli {
    /// Run seed; every random draw is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for batched encoding, fitness and grid search.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// JSON file overriding the subcommand's parameters. A run manifest is
    /// accepted too, in which case its recorded parameters are used.
    #[arg(long, global = true, value_name = "FILE")]
    params: Option<PathBuf>,

    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a benchmark encoder with planted detrimental heads.
    GenModel(GenModelArgs),
    /// Generate train/val/test pairs for a benchmark encoder.
    GenData(GenDataArgs),
    /// Evaluate every head ablated alone.
    Grid(GridArgs),
    /// Ablate every head that beat vanilla in a grid table.
    NaiveJoint(NaiveJointArgs),
    /// Genetic search over ablation masks.
    Ga(SearchArgs),
    /// Train per-head sigmoid gates.
    Bp(BpArgs),
    /// Retrieval metrics under an ablation config.
    Eval(EvalArgs),
    /// Ablation ratio and per-layer counts of a config.
    Stats(StatsArgs),
    /// Test mean-R over the suppression grid 1, 0.5, 0.2, 0.1, 0.05, 0.02.
    SweepBeta(SweepBetaArgs),
    /// Test mean-R after searching on 100, 200, 500 and 1000 pairs.
    SweepDsize(SweepDsizeArgs),
}

#[derive(Args, Debug)]
pub struct GenModelArgs {
    /// Output model manifest; tensors go to a sibling `.bin`.
    #[arg(long)]
    pub out: PathBuf,
    /// Noise gain of the planted heads.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Planted heads as `layer:head` pairs, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_head)]
    pub planted: Option<Vec<(usize, usize)>>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory receiving `train.json`, `val.json` and `test.json`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    /// CSV table.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct NaiveJointArgs {
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Search pairs.
    #[arg(long)]
    pub data: PathBuf,
    /// Best mask as an ablation config.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines history; defaults to `<out stem>.history.jsonl`.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BpArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Trained gating parameters.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines loss history; defaults to `<out stem>.history.jsonl`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Also export the gates as an ablation config.
    #[arg(long)]
    pub config_out: Option<PathBuf>,
    /// Export ablated/retained instead of the soft betas.
    #[arg(long)]
    pub binarize: bool,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Ablation config; vanilla when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory receiving `text_to_image.json` and `image_to_text.json`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepBetaArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Pairs used to pick heads by naive joint ablation at each beta.
    #[arg(long)]
    pub search: PathBuf,
    /// Pairs the sweep is reported on.
    #[arg(long)]
    pub data: PathBuf,
    /// Fixed head set to sweep instead of per-beta naive joint selection.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Method {
    Ga,
    Bp,
}

#[derive(Args, Debug)]
pub struct SweepDsizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// At least 1000 pairs; prefixes of it are searched.
    #[arg(long)]
    pub search: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Ga)]
    pub method: Method,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_head(s: &str) -> Result<(usize, usize), String> {
    let (l, h) = s.split_once(':').ok_or_else(|| format!("expected layer:head, got {s:?}"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((n(l)?, n(h)?))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => return errors::usage(e),
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => errors::report(&e),
    }
}
