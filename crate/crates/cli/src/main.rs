//! `msret` command-line driver.
//!
//! Every command resolves its settings from built-in defaults, an optional
//! `--config` file and command-line flags (later sources win), echoes the
//! resolved settings to stderr, and then runs. Failures print a single
//! `msret: error[usage|runtime]: ...` line; usage errors exit with 2,
//! runtime errors with 1.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use msret::corpus::CorpusFormat;
use msret::encoder::DistanceMode;
use msret::fusion::WeightTriple;
use msret::metrics::Metric;
use msret::stages::CandidateSource;
use msret::tokenize::TokenizerScheme;
use msret::Jobs;

use config::{List, Paths};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage", m),
            CliError::Runtime(m) => ("runtime", m),
        };
        write!(f, "msret: error[{kind}]: {}", msg.replace(['\n', '\r'], " "))
    }
}

impl From<msret::Error> for CliError {
    fn from(e: msret::Error) -> Self {
        match e {
            msret::Error::InvalidConfig(m) => CliError::Usage(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "msret", version, about = "Multi-stage text retrieval: sparse baselines, dual-encoder training, fusion and evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Global {
    /// Flat key=value settings file; command-line flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-query work. 1 is the determinism baseline.
    #[arg(long, global = true)]
    pub jobs: Option<Jobs>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a corpus and build the vocabulary.
    Ingest(IngestArgs),
    /// Build a sparse inverted index.
    Index(IndexArgs),
    /// Masked-token pretraining of the encoder (Phase 1).
    Pretrain(PretrainArgs),
    /// Label candidate runs against qrels into training pairs (Stage 1).
    Stage1(Stage1Args),
    /// Contrastive training on a pairs file (Stage 2).
    Train(TrainArgs),
    /// Mine hard negatives with a trained encoder (Stage 3).
    Mine(MineArgs),
    /// Run a full pipeline variant end to end.
    RunPipeline(PipelineArgs),
    /// Retrieve with BM25+, TF-IDF or a dense encoder.
    Retrieve(RetrieveArgs),
    /// Fuse three run files with fixed weights.
    Fuse(FuseArgs),
    /// Search the weight simplex for the best fusion weights.
    Gridsearch(GridArgs),
    /// Evaluate a run file against qrels.
    Eval(EvalArgs),
    /// Write a seeded synthetic cluster corpus.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Default)]
pub struct CorpusArgs {
    /// Corpus file (TSV `docid<TAB>text` or JSONL with `doc_id`/`text`).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Corpus format; guessed from the extension when omitted.
    #[arg(long)]
    pub format: Option<CorpusFormat>,
}

#[derive(Args, Debug, Default)]
pub struct EncoderArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    /// one_minus_cosine (default) or raw_cosine.
    #[arg(long)]
    pub distance: Option<DistanceMode>,
}

#[derive(Args, Debug, Default)]
pub struct Bm25Args {
    #[arg(long)]
    pub k1: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Query file whose text also feeds the vocabulary.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// whitespace_lower or char_ngram(N).
    #[arg(long)]
    pub scheme: Option<TokenizerScheme>,
    #[arg(long)]
    pub min_count: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Stage1Args {
    /// Candidate run file.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub neg_per_query: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Pairs file, `qid<TAB>docid<TAB>label`.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Continue from this checkpoint; a fresh encoder is initialized otherwise.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MineArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub neg_per_query: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// bm25plus, lms or lms-mlm.
    #[arg(long)]
    pub variant: Option<CandidateSource>,
    #[arg(long)]
    pub rounds: Option<u8>,
    /// Training queries.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub eval_queries: Option<PathBuf>,
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    /// Vocabulary file; built from the corpus and training queries when omitted.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub scheme: Option<TokenizerScheme>,
    #[arg(long)]
    pub min_count: Option<usize>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_learning_rate: Option<f64>,
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub neg_per_query: Option<usize>,
    /// Retrain Stage 2' on Stage 1 pairs plus hard negatives.
    #[arg(long)]
    pub mix_stage1_pairs: bool,
    #[command(flatten)]
    pub bm25: Bm25Args,
    #[arg(long)]
    pub eval_depth: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// bm25plus, tfidf or dense.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Prebuilt sparse index.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Encoder checkpoint for dense retrieval.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub bm25: Bm25Args,
    #[arg(long)]
    pub tag: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    /// Three run files, comma-separated, fused in order as (α, β, θ).
    #[arg(long)]
    pub runs: Option<Paths>,
    /// `α,β,θ` as decimals summing to 1, e.g. 0.3,0.25,0.45.
    #[arg(long)]
    pub weights: Option<WeightTriple>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tag: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long)]
    pub runs: Option<Paths>,
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    #[arg(long)]
    pub step: Option<f64>,
    /// Metric to maximize, e.g. recall@3 or ndcg@10.
    #[arg(long)]
    pub objective: Option<Metric>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    /// Recall cut-offs, e.g. 3,10.
    #[arg(long)]
    pub ks: Option<List<usize>>,
    /// Score Recall@k as hit rate instead of the fraction of relevant found.
    #[arg(long)]
    pub hit_rate: bool,
    /// Directory for metrics.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", CliError::Usage(first.trim_start_matches("error: ").to_string()));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}
