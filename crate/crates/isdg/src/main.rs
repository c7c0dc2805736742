//! Command-line interface: corpus generation, preprocessing, training,
//! evaluation, and attention analysis.
//!
//! Exit codes: 0 on success, 2 on validation errors (bad inputs, config,
//! or vocabulary mismatches), 1 on internal errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use isdg::align::VocabTokenizer;
use isdg::data::{corpus_deprels, preprocess, write_records, Dataset};
use isdg::encoder::Variant;
use isdg::error::Error;
use isdg::graph::RelationVocab;
use isdg::synth::{generate_corpus, read_corpus, write_corpus, GenConfig};
use isdg::train::{
    analyze, evaluate, load_checkpoint, model_for_dataset, save_checkpoint, train,
    write_analyze_csv, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "isdg",
    about = "Inter-sentence dependency graph encoder for span extraction",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with gold dependency trees.
    Generate(GenerateArgs),
    /// Convert CoNLL-U corpora into preprocessed training records.
    Preprocess(PreprocessArgs),
    /// Train an ablation variant on preprocessed records.
    Train(TrainArgs),
    /// Evaluate a checkpoint with F1 and exact match.
    Eval(EvalArgs),
    /// Export global-attention distances for a checkpoint.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    seed: u64,
    /// Number of examples.
    #[arg(long)]
    n: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 48)]
    vocab_size: usize,
    #[arg(long, default_value_t = 2)]
    sentences_min: usize,
    #[arg(long, default_value_t = 4)]
    sentences_max: usize,
    #[arg(long, default_value_t = 2)]
    depth_min: usize,
    #[arg(long, default_value_t = 3)]
    depth_max: usize,
    #[arg(long, default_value_t = 0.1)]
    mwt_prob: f64,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Corpus directory holding questions.conllu, contexts.conllu and
    /// answers.jsonl.
    #[arg(long)]
    conllu_dir: PathBuf,
    /// Piece vocabulary file, one piece per line.
    #[arg(long)]
    tokenizer_vocab: PathBuf,
    /// Output JSON-lines file.
    #[arg(long)]
    out: PathBuf,
    /// Maximum packed sequence length in nodes.
    #[arg(long, default_value_t = 192)]
    max_len: usize,
    /// Reuse the relation vocabulary of an existing preprocessed file so
    /// unseen labels map to the unknown relation.
    #[arg(long)]
    reuse_vocab: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key = value config file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preprocessed training records.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Ablation variant: pos, local, or full.
    #[arg(long)]
    variant: String,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Training log path (defaults to <out>.log.jsonl).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Config overrides as key=value, repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report output path (JSON).
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Per-node distance rows (CSV).
    #[arg(long)]
    csv: PathBuf,
    /// Summary output path (defaults to <csv>.summary.json).
    #[arg(long)]
    summary: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> isdg::Result<()> {
    match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Preprocess(args) => cmd_preprocess(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Analyze(args) => cmd_analyze(args),
    }
}

fn cmd_generate(args: GenerateArgs) -> isdg::Result<()> {
    let cfg = GenConfig {
        seed: args.seed,
        n_examples: args.n,
        vocab_size: args.vocab_size,
        depth_bounds: (args.depth_min, args.depth_max),
        context_sentences: (args.sentences_min, args.sentences_max),
        mwt_prob: args.mwt_prob,
    };
    let examples = generate_corpus(&cfg)?;
    write_corpus(&args.out, &examples, cfg.vocab_size)?;
    println!(
        "generated {} examples into {}",
        examples.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_preprocess(args: PreprocessArgs) -> isdg::Result<()> {
    let examples = read_corpus(&args.conllu_dir)?;
    let tokenizer = VocabTokenizer::from_file(&args.tokenizer_vocab)?;
    let relation_vocab = match &args.reuse_vocab {
        Some(path) => Dataset::load(path)?.relation_vocab,
        None => RelationVocab::build(corpus_deprels(&examples))?,
    };
    let (records, stats) = preprocess(&examples, &tokenizer, &relation_vocab, args.max_len)?;
    write_records(&args.out, &records)?;
    println!(
        "preprocessed {} examples into {} ({} skipped by truncation)",
        stats.written,
        args.out.display(),
        stats.skipped
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> isdg::Result<()> {
    let mut config = match &args.config {
        Some(path) => TrainConfig::parse(&std::fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    for pair in &args.set {
        let (k, v) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects KEY=VALUE, got {pair:?}"))
        })?;
        config.set(k.trim(), v.trim())?;
    }
    config.encoder.validate()?;
    let variant = Variant::parse(&args.variant)?;
    let dataset = Dataset::load(&args.data)?;
    let model = model_for_dataset(&config.encoder, variant, &dataset)?;

    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("log.jsonl"));
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    let (state, outcome) = train(&model, &dataset, &config, args.seed, Some(&mut log_file))?;
    save_checkpoint(&args.out, &model, &state, &config, args.seed)?;
    println!(
        "trained {} for {} epochs ({} steps), final loss {:.4}, fingerprint {}",
        variant.as_str(),
        outcome.epochs_run,
        outcome.steps,
        outcome.final_loss,
        config.fingerprint()
    );
    if let Some(em) = outcome.train_em {
        println!(
            "train exact match {:.4}{}",
            em,
            if outcome.stopped_early {
                " (stopped early)"
            } else {
                ""
            }
        );
    }
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> isdg::Result<()> {
    let (model, state, _config, _seed) = load_checkpoint(&args.ckpt)?;
    let dataset = Dataset::load(&args.data)?;
    let report = evaluate(&model, &state, &dataset)?;
    let file = std::io::BufWriter::new(std::fs::File::create(&args.report)?);
    serde_json::to_writer_pretty(file, &report).map_err(Error::from)?;
    println!(
        "evaluated {} examples: F1 {:.4}, EM {:.4}",
        report.per_example.len(),
        report.f1,
        report.em
    );
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> isdg::Result<()> {
    let (model, state, _config, _seed) = load_checkpoint(&args.ckpt)?;
    let dataset = Dataset::load(&args.data)?;
    let (rows, summary) = analyze(&model, &state, &dataset)?;
    write_analyze_csv(&args.csv, &rows)?;
    let summary_path = args
        .summary
        .clone()
        .unwrap_or_else(|| args.csv.with_extension("summary.json"));
    let file = std::io::BufWriter::new(std::fs::File::create(&summary_path)?);
    serde_json::to_writer_pretty(file, &summary).map_err(Error::from)?;
    println!(
        "analyzed {} examples ({} rows), averaged attention distance {:.3}",
        summary.examples, summary.rows, summary.avg_distance
    );
    Ok(())
}
