//! `persona`: synthesize corpora, train base models and per-user artifacts,
//! serve them, and evaluate them.

mod commands;
mod config;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use persona_core::Error;

#[derive(Parser, Debug)]
#[command(name = "persona", version, about = "Personalized dialogue models with per-user adapters")]
#[command(after_help = "Any subcommand also accepts --config FILE with `key = value` lines naming its flags.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with per-user profiles and styles.
    #[command(args_override_self = true)]
    SynthCorpus(SynthArgs),
    /// Train a base model from scratch.
    #[command(args_override_self = true)]
    Pretrain(PretrainArgs),
    /// Continue training the base on in-domain users not reserved for fine-tuning.
    #[command(args_override_self = true)]
    Adapt(AdaptArgs),
    /// Fine-tune per-user artifacts (or the shared One-ID model) into a registry.
    #[command(args_override_self = true)]
    Finetune(FinetuneArgs),
    /// Generate for held-out samples and score them.
    #[command(args_override_self = true)]
    Evaluate(EvaluateArgs),
    /// Answer JSON requests on stdin, one per line.
    #[command(args_override_self = true)]
    Serve(ServeArgs),
    /// Talk to one user's model interactively.
    #[command(args_override_self = true)]
    Chat(ChatArgs),
    /// Infer a profile from a post history by chunked majority vote.
    #[command(args_override_self = true)]
    InferProfile(InferArgs),
    /// Ask every user model the same questions and measure answer diversity.
    #[command(args_override_self = true)]
    DiversityProbe(ProbeArgs),
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Adam learning rate [default: 1e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Examples per step [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Epoch cap [default: 50]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Epochs without dev improvement before stopping [default: 1]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Hard cap on optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Base configuration: `desk` or `small`.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub users: usize,
    #[arg(long, default_value_t = 200)]
    pub turns: usize,
    /// Dialogue partners per user; the train/dev/test split is by partner.
    #[arg(long, default_value_t = 10)]
    pub partners: usize,
    /// `chat` or `sns`.
    #[arg(long, default_value = "chat")]
    pub domain: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Prompt format: `plain`, `psp` or `ppp`.
    #[arg(long, default_value = "psp")]
    pub variant: String,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AdaptArgs {
    /// Pre-trained checkpoint.
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Comma-separated users held out for fine-tuning [default: the second half of the corpus users]
    #[arg(long)]
    pub reserve: Option<String>,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Checkpoint to write; the reserved users go to `<out>.users`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Domain-adapted checkpoint.
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub registry: PathBuf,
    /// `lora`, `full` or `one-id`.
    #[arg(long, default_value = "lora")]
    pub method: String,
    /// Comma-separated users [default: `<base>.users`, else every corpus user]
    #[arg(long)]
    pub users: Option<String>,
    /// LoRA rank.
    #[arg(long, default_value_t = persona_core::lora::DEFAULT_RANK)]
    pub rank: usize,
    /// Users fine-tuned in parallel.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Accept a base that has not been domain-adapted.
    #[arg(long)]
    pub allow_unadapted: bool,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// `base`, `lora`, `full` or `one-id`.
    #[arg(long, default_value = "lora")]
    pub method: String,
    /// Comma-separated users [default: `<base>.users`, else every corpus user]
    #[arg(long)]
    pub users: Option<String>,
    /// `train`, `dev` or `test`.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 32)]
    pub max_new_tokens: usize,
    /// Report to write; per-sample records go to `<out>.records.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub registry: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub max_new_tokens: usize,
}

#[derive(Args, Debug)]
pub struct ChatArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub registry: PathBuf,
    #[arg(long)]
    pub user: String,
    /// `lora`, `full` or `one-id` [default: the first the user has]
    #[arg(long)]
    pub method: Option<String>,
    /// Speaker profile as `attr=label,...`.
    #[arg(long, default_value = "")]
    pub profile: String,
    /// Partner profile as `attr=label,...`.
    #[arg(long, default_value = "")]
    pub partner_profile: String,
    #[arg(long, default_value_t = 32)]
    pub max_new_tokens: usize,
    /// JSON lines transcript of every exchange.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Post history, one `<ISO-8601 timestamp> <text>` per line.
    #[arg(long)]
    pub posts: PathBuf,
    #[arg(long)]
    pub user: String,
    #[arg(long, default_value_t = persona_core::profile_inference::CHUNK_SIZE)]
    pub chunk_size: usize,
    /// Keyword hits a label needs within one chunk.
    #[arg(long, default_value_t = 3)]
    pub min_hits: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub registry: PathBuf,
    /// Corpus supplying each user's profile.
    #[arg(long)]
    pub corpus: PathBuf,
    /// `lora`, `full` or `one-id`.
    #[arg(long, default_value = "lora")]
    pub method: String,
    /// One question per line [default: the built-in 20-question set]
    #[arg(long)]
    pub questions: Option<PathBuf>,
    /// Comma-separated users [default: every registry user with the method]
    #[arg(long)]
    pub users: Option<String>,
    #[arg(long, default_value_t = 20)]
    pub max_new_tokens: usize,
    /// Per-question results as JSON lines.
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Usage(_) | Error::Config(_) => 2,
                Error::Prerequisite(_) => 3,
                Error::Corruption { .. } | Error::Parse(_) => 4,
                _ => 1,
            };
        }
    }
    1
}

/// Long flags of subcommand `name`, or of every subcommand.
fn subcommand_flags(name: Option<&str>) -> Option<Vec<String>> {
    let cmd = Cli::command();
    let longs = |c: &clap::Command| -> Vec<String> {
        c.get_arguments().filter_map(|a| a.get_long().map(str::to_string)).collect()
    };
    match name {
        Some(n) => cmd.find_subcommand(n).map(longs),
        None => Some(cmd.get_subcommands().flat_map(longs).collect()),
    }
}

fn parse_args() -> Result<Cli, Error> {
    let mut args: Vec<OsString> = std::env::args_os().collect();
    if let Some(path) = config::take_config_flag(&mut args)? {
        let entries = config::load(&path)?;
        config::splice(&mut args, &entries, subcommand_flags)?;
    }
    Ok(Cli::parse_from(args))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match parse_args() {
        Ok(cli) => cli,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::SynthCorpus(a) => commands::synth_corpus(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Adapt(a) => commands::adapt(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Serve(a) => commands::serve(a),
        Command::Chat(a) => commands::chat(a),
        Command::InferProfile(a) => commands::infer_profile(a),
        Command::DiversityProbe(a) => commands::diversity_probe(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
