mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ecgnn::datagen::{SizeRanges, TaskKind};
use ecgnn::pipeline::Ablation;

#[derive(Parser, Debug)]
#[command(name = "ecgnn", version, about = "Graph reasoning over caption, video and question features")]
struct Cli {
    /// Worker threads for data generation, training and evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write the attention weights of one sample as JSON.
    DumpAttention(DumpArgs),
    /// Check analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: ecgnn::Error| e.to_string())
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: ecgnn::Error| e.to_string())
}

fn parse_sizes(s: &str) -> Result<SizeRanges, String> {
    s.parse().map_err(|e: ecgnn::Error| e.to_string())
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// word, count (or number), or choice.
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskKind>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Training samples.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    test_samples: Option<usize>,
    /// Caption, frame and word count ranges, e.g. `3-8,8-16,4-10`.
    #[arg(long, value_parser = parse_sizes)]
    sizes: Option<SizeRanges>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Answer classes (word) or candidates (choice).
    #[arg(long)]
    classes: Option<usize>,
    /// Replace the contents of a non-empty output directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt_out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    fusion_steps: Option<usize>,
    /// Graph layers followed by a cross-modal round, e.g. `1,2`.
    #[arg(long, value_delimiter = ',')]
    cross_modal_after: Option<Vec<usize>>,
    /// vid or cap (no captions), cmr (no cross-modal rounds), mmf (mean-pool
    /// fusion) or qmmf (fusion without question guidance).
    #[arg(long, value_parser = parse_ablation)]
    ablate: Option<Ablation>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    sample: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FaultArg {
    ReluSignFlip,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also check sampled parameters of a whole model.
    #[arg(long)]
    full: bool,
    /// Random points per primitive.
    #[arg(long)]
    points: Option<usize>,
    /// Sampled model parameters for `--full`.
    #[arg(long)]
    params: Option<usize>,
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskKind>,
    #[arg(long, value_parser = parse_ablation)]
    ablate: Option<Ablation>,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<FaultArg>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a, cli.threads),
        Command::Train(a) => commands::train(a, cli.threads),
        Command::Eval(a) => commands::eval(a, cli.threads),
        Command::DumpAttention(a) => commands::dump_attention(a, cli.threads),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
