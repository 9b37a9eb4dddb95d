use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lattice_lm::checkpoint::{describe, Checkpoint};
use lattice_lm::inference::{Approx, GumbelConfig};
use lattice_lm::model::{LatticeLm, LatticeSpec, ModelConfig};
use lattice_lm::report::{segment_report, senses_report};
use lattice_lm::train::{evaluate_perplexity, train, TrainConfig, METRICS_HEADER};
use lattice_lm::vocab::{build_chunk_vocab, ChunkVocab, Mode, Preprocessor, TokenId, TokenVocab};

/// Neural lattice language models over multi-token chunks or multi-sense
/// embeddings.
#[derive(Parser)]
#[command(name = "lattice-lm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build token and chunk vocabularies from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Report perplexity of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Print segmentation posteriors and greedy segmentations.
    Segment(ReportArgs),
    /// Print per-occurrence sense preferences of a multi-embedding model.
    Senses(ReportArgs),
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long, default_value = "word")]
    mode: Mode,
    /// Drop sentences with more tokens than this.
    #[arg(long, default_value_t = 50)]
    max_len: usize,
    /// Unit-token vocabulary size, reserved entries included.
    #[arg(long, default_value_t = 10_000)]
    vocab_size: usize,
}

#[derive(Args)]
struct LatticeArgs {
    /// Maximum chunk length L.
    #[arg(long, default_value_t = 1)]
    lattice_size: usize,
    /// Embeddings per token E (cannot be combined with L > 1).
    #[arg(long, default_value_t = 1)]
    embeddings_per_token: usize,
    /// Number of multi-token chunks with their own embeddings.
    #[arg(long, default_value_t = 10_000)]
    chunk_vocab_size: usize,
}

impl LatticeArgs {
    fn spec(&self) -> Result<LatticeSpec> {
        match (self.lattice_size, self.embeddings_per_token) {
            (0, _) | (_, 0) => bail!("lattice size and embeddings per token must be at least 1"),
            (l, e) if l > 1 && e > 1 => {
                bail!("--lattice-size {l} and --embeddings-per-token {e} are mutually exclusive")
            }
            (_, e) if e > 1 => Ok(LatticeSpec::Sense { senses: e }),
            (l, _) => Ok(LatticeSpec::Chunk { max_len: l }),
        }
    }
}

#[derive(Args)]
struct BuildVocabArgs {
    /// Training corpus, one sentence per line.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab_out: PathBuf,
    #[arg(long)]
    chunks_out: PathBuf,
    #[command(flatten)]
    corpus_args: CorpusArgs,
    #[command(flatten)]
    lattice: LatticeArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Vocabulary file from build-vocab; built from the training corpus when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Chunk file from build-vocab (requires --vocab).
    #[arg(long, requires = "vocab")]
    chunks: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-epoch metrics log here.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    corpus_args: CorpusArgs,
    #[command(flatten)]
    lattice: LatticeArgs,
    #[arg(long, default_value = "marginal")]
    approx: Approx,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    #[arg(long, default_value_t = 32)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 16)]
    sub_hidden_dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 5.0)]
    tau0: f64,
    #[arg(long, default_value_t = 0.5)]
    tau_min: f64,
    #[arg(long, default_value_t = 0.9995)]
    tau_decay: f64,
    /// Global gradient-norm threshold ("inf" disables clipping).
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Must match the checkpoint when given.
    #[arg(long)]
    lattice_size: Option<usize>,
    /// Must match the checkpoint when given.
    #[arg(long)]
    embeddings_per_token: Option<usize>,
    /// Combination rule; defaults to the one used in training.
    #[arg(long)]
    approx: Option<Approx>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    approx: Option<Approx>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn encode(pre: &Preprocessor, vocab: &TokenVocab, path: &Path) -> Result<Vec<Vec<TokenId>>> {
    let lines = read_lines(path)?;
    let corpus = pre.encode(vocab, lines.iter().map(String::as_str));
    if corpus.is_empty() {
        bail!("{}: no sentences left after filtering", path.display());
    }
    Ok(corpus)
}

fn vocabularies(
    pre: &Preprocessor,
    lines: &[String],
    corpus_args: &CorpusArgs,
    lattice: &LatticeArgs,
) -> Result<(ChunkVocab, Vec<Vec<TokenId>>)> {
    let (tokens, corpus) = pre.build(lines.iter().map(String::as_str), corpus_args.vocab_size)?;
    let vocab = match lattice.spec()? {
        LatticeSpec::Chunk { max_len } => build_chunk_vocab(&corpus, tokens, lattice.chunk_vocab_size, max_len)?,
        LatticeSpec::Sense { .. } => ChunkVocab::from_parts(tokens, vec![], 1)?,
    };
    Ok((vocab, corpus))
}

fn build_vocab(args: BuildVocabArgs) -> Result<()> {
    let pre = Preprocessor::new(args.corpus_args.mode, args.corpus_args.max_len);
    let lines = read_lines(&args.corpus)?;
    let (vocab, corpus) = vocabularies(&pre, &lines, &args.corpus_args, &args.lattice)?;
    vocab.tokens().save(&args.vocab_out)?;
    vocab.save_chunks(&args.chunks_out)?;
    println!(
        "{} sentences, {} tokens, {} chunks",
        corpus.len(),
        vocab.tokens().len(),
        vocab.len()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let pre = Preprocessor::new(args.corpus_args.mode, args.corpus_args.max_len);
    let spec = args.lattice.spec()?;
    let (vocab, train_set) = match &args.vocab {
        Some(vocab_path) => {
            let tokens = TokenVocab::load(vocab_path)?;
            let train_set = encode(&pre, &tokens, &args.train)?;
            let vocab = match (spec, &args.chunks) {
                (LatticeSpec::Chunk { max_len }, Some(chunks)) => ChunkVocab::load_chunks(tokens, chunks, max_len)?,
                (LatticeSpec::Chunk { max_len }, None) => {
                    build_chunk_vocab(&train_set, tokens, args.lattice.chunk_vocab_size, max_len)?
                }
                (LatticeSpec::Sense { .. }, _) => ChunkVocab::from_parts(tokens, vec![], 1)?,
            };
            (vocab, train_set)
        }
        None => vocabularies(&pre, &read_lines(&args.train)?, &args.corpus_args, &args.lattice)?,
    };
    let valid_set = match &args.valid {
        Some(p) => encode(&pre, vocab.tokens(), p)?,
        None => Vec::new(),
    };
    let config = ModelConfig {
        lattice: spec,
        embed_dim: args.embed_dim,
        hidden_dim: args.hidden_dim,
        layers: args.layers,
        sub_hidden_dim: args.sub_hidden_dim,
        context_free_head: false,
    };
    let train_cfg = TrainConfig {
        approx: args.approx,
        lr: args.lr,
        batch_size: args.batch_size,
        epochs: args.epochs,
        dropout: args.dropout,
        gumbel: GumbelConfig {
            tau0: args.tau0,
            tau_min: args.tau_min,
            decay: args.tau_decay,
        },
        seed: args.seed,
        clip: args.clip,
    };
    let mut model = LatticeLm::new(config, vocab, args.seed)?;
    let mut log = vec![METRICS_HEADER.to_string()];
    println!("{METRICS_HEADER}");
    let outcome = train(&mut model, &train_set, &valid_set, &train_cfg, |m| {
        let line = m.log_line();
        println!("{line}");
        log.push(line);
    })?;
    if let Some(path) = &args.metrics {
        let mut f = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
        writeln!(f, "{}", log.join("\n")).with_context(|| format!("cannot write {}", path.display()))?;
    }
    let ck = Checkpoint {
        model,
        preprocessor: pre,
        training: Some(train_cfg),
    };
    ck.save(&args.out)?;
    eprintln!(
        "best epoch {} (valid perplexity {:.4}); wrote {}",
        outcome.best_epoch,
        outcome.best_valid_perplexity,
        args.out.display()
    );
    Ok(())
}

fn trained_approx(ck: &Checkpoint, requested: Option<Approx>) -> Approx {
    requested.unwrap_or_else(|| ck.training.as_ref().map(|t| t.approx).unwrap_or_default())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    ck.check_lattice(args.lattice_size, args.embeddings_per_token)?;
    let corpus = encode(&ck.preprocessor, ck.model.vocab.tokens(), &args.corpus)?;
    let report = evaluate_perplexity(&ck.model, &corpus, trained_approx(&ck, args.approx))?;
    println!("model\t{}", describe(ck.model.config.lattice));
    println!("sentences\t{}", report.sentences.len());
    println!("tokens\t{}", report.tokens);
    println!("log_prob\t{:.6}", report.total_log_prob);
    println!("perplexity\t{:.6}", report.perplexity);
    Ok(())
}

fn run_report(args: ReportArgs, senses: bool) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let corpus = encode(&ck.preprocessor, ck.model.vocab.tokens(), &args.corpus)?;
    let text = if senses {
        senses_report(&ck.model, &corpus)?
    } else {
        segment_report(&ck.model, &corpus, trained_approx(&ck, args.approx))?
    };
    print!("{text}");
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::BuildVocab(a) => build_vocab(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Segment(a) => run_report(a, false),
        Command::Senses(a) => run_report(a, true),
    }
}
