//! Command-line surface: train, generate, benchmark, and the tokenizer
//! comparison suite.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric
//! failure, 4 artifact I/O (checkpoints, tokenizer files, filesystem).

pub mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::model::{checkpoint, ModelConfig, ToucanModel};
use crate::numerics::RngState;
use crate::decoding::{benchmark_speed, generate, GenerationConfig, GenerationMode, Sampling};
use crate::tokenizers::{
    extract_learned_tokens, render_token, train_bpe, train_wordpiece, unseen_tokens,
    vocab_size_matching, ComparisonReport, StatsSource, TokenStats,
};
use crate::training::{
    evaluate, ingest_text, train_loop, AlphabetPolicy, Corpus, MetricsLog, Split, TrainConfig,
    TrainEvent,
};
use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "toucan", version, about = "Token-aware character-level language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a text file and write checkpoint + metrics.
    Train(TrainArgs),
    /// Generate text from a checkpoint with either engine.
    Generate(GenerateArgs),
    /// Compare generation speed of both engines over a token grid.
    Benchmark(BenchmarkArgs),
    /// Tokenizer training, extraction, and comparison.
    #[command(subcommand)]
    Tok(TokCommand),
}

#[derive(Args)]
struct TrainArgs {
    /// Training text file.
    #[arg(long)]
    data: PathBuf,
    /// Flat "key = value" configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoint, metrics, and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prompt text (normalized onto the model alphabet).
    #[arg(long)]
    prompt: String,
    /// Number of characters to generate.
    #[arg(long)]
    chars: usize,
    /// "naive" or "token-aware".
    #[arg(long, default_value = "token-aware")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sampling temperature; omit for greedy decoding.
    #[arg(long)]
    temperature: Option<f64>,
    /// Directory for the generated text and token-trace sidecar.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long, default_value_t = 32)]
    max_token_length: usize,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated token counts, e.g. "10,50,100".
    #[arg(long = "tokens-grid")]
    tokens_grid: String,
    /// Output CSV path.
    #[arg(long)]
    csv: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "the quick brown fox ")]
    prompt: String,
    /// Timed repetitions per grid point (one extra warmup is excluded).
    #[arg(long, default_value_t = 5)]
    runs: usize,
    /// Character budget for the per-mode generation-time scalar.
    #[arg(long, default_value_t = 1000)]
    gen_chars: usize,
}

#[derive(Subcommand)]
enum TokCommand {
    /// Train a BPE tokenizer on the corpus train split.
    TrainBpe(TokTrainArgs),
    /// Train a WordPiece tokenizer on the corpus train split.
    TrainWp(TokTrainArgs),
    /// Extract the learned model's tokens over the train split.
    Extract(TokExtractArgs),
    /// Full comparison: learned vs BPE vs WordPiece statistics.
    Compare(TokCompareArgs),
}

#[derive(Args)]
struct TokTrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "vocab-size")]
    vocab_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TokExtractArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TokCompareArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "top-k", default_value_t = 10)]
    top_k: usize,
    /// File with one phrase per line; defaults to snippets of the test split.
    #[arg(long)]
    phrases: Option<PathBuf>,
}

/// Entry point shared by the binary and in-process tests.
pub fn run<I>(args: I) -> i32
where
    I: IntoIterator,
    I::Item: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes; everything else is usage.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Tok(t) => match t {
            TokCommand::TrainBpe(a) => cmd_tok_train(a, true),
            TokCommand::TrainWp(a) => cmd_tok_train(a, false),
            TokCommand::Extract(a) => cmd_tok_extract(a),
            TokCommand::Compare(a) => cmd_tok_compare(a),
        },
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Ingest(_) | Error::Capacity { .. } => {
            2
        }
        Error::NonFinite { .. } | Error::ShapeMismatch { .. } | Error::IndexOutOfRange { .. } => 3,
        Error::Io { .. }
        | Error::CheckpointBadMagic
        | Error::CheckpointVersion { .. }
        | Error::CheckpointTruncated { .. }
        | Error::CheckpointShape { .. }
        | Error::TokenizerFile(_) => 4,
    }
}

/// Parse a flat "key = value" configuration file. Unknown keys are
/// rejected; '#' starts a comment line.
pub fn parse_config_file(path: &Path) -> Result<(ModelConfig, TrainConfig)> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    for (lineno, raw) in content.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{}:{}: expected `key = value`, got {line:?}",
                path.display(),
                lineno + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| {
            Error::Config(format!(
                "{}:{}: invalid {what} value {value:?} for key {key}",
                path.display(),
                lineno + 1
            ))
        };
        macro_rules! parse {
            ($t:ty, $what:expr) => {
                value.parse::<$t>().map_err(|_| bad($what))?
            };
        }
        match key {
            "d_model" => model.d_model = parse!(usize, "integer"),
            "n_heads" => model.n_heads = parse!(usize, "integer"),
            "layers_tokenizer" => model.layers.0 = parse!(usize, "integer"),
            "layers_token_model" => model.layers.1 = parse!(usize, "integer"),
            "layers_decoder" => model.layers.2 = parse!(usize, "integer"),
            "boundary_prior" => model.boundary_prior = parse!(f64, "number"),
            "gumbel_temperature" => model.gumbel_temperature = parse!(f64, "number"),
            "max_seq_len" => model.max_seq_len = parse!(usize, "integer"),
            "prior_loss_weight" => {
                model.prior_loss_weight = parse!(f64, "number");
                train.prior_loss_weight = model.prior_loss_weight;
            }
            "batch_size" => train.batch_size = parse!(usize, "integer"),
            "seq_len" => train.seq_len = parse!(usize, "integer"),
            "steps" => train.steps = parse!(usize, "integer"),
            "learning_rate" => train.learning_rate = parse!(f64, "number"),
            "warmup_steps" => train.warmup_steps = parse!(usize, "integer"),
            "grad_clip_norm" => train.grad_clip_norm = parse!(f64, "number"),
            "seed" => train.seed = parse!(u64, "integer"),
            "eval_interval" => train.eval_interval = parse!(usize, "integer"),
            _ => {
                return Err(Error::Config(format!(
                    "{}:{}: unknown configuration key {key:?}",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let (model_cfg, mut train_cfg) = parse_config_file(&args.config)?;
    if let Some(seed) = args.seed {
        train_cfg.seed = seed;
    }
    let (corpus, report) = ingest_text(&args.data, AlphabetPolicy::ReplaceWithSpace)?;
    if report.replaced_bytes > 0 {
        eprintln!(
            "ingest: replaced {} of {} bytes with spaces",
            report.replaced_bytes, report.total_bytes
        );
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let metrics_path = args.out.join("metrics.csv");
    let mut metrics = MetricsLog::create(&metrics_path)?;

    let mut rng = RngState::new(train_cfg.seed);
    let mut model = ToucanModel::new(model_cfg, &mut rng)?;
    eprintln!(
        "training {} parameters for {} steps on {} ({} train symbols)",
        model.param_count(),
        train_cfg.steps,
        corpus.name,
        corpus.split_slice(Split::Train).len()
    );
    let print_every = (train_cfg.steps / 20).max(1);
    let outcome = train_loop(&mut model, &corpus, &train_cfg, Some(&mut metrics), |ev| {
        match ev {
            TrainEvent::Step { step, loss } => {
                if step % print_every == 0 {
                    eprintln!(
                        "step {step}: ce={:.4} prior={:.4} sf={:.2} gnorm={:.3}",
                        loss.ce_bits, loss.prior_bits, loss.shortening_factor, loss.grad_norm
                    );
                }
            }
            TrainEvent::Eval { report } => {
                eprintln!(
                    "eval step {}: bpc={:.4} bpt={:.4} sf={:.3} bpc_chars={:.4}",
                    report.step, report.bpc, report.bpt, report.sf, report.bpc_chars
                );
            }
        }
    })?;
    let ckpt_path = args.out.join("model.touc");
    checkpoint::save(&model, &ckpt_path)?;

    let mut m = RunManifest::new("train", train_cfg.seed);
    m.set("steps", train_cfg.steps);
    m.set("batch_size", train_cfg.batch_size);
    m.set("seq_len", train_cfg.seq_len);
    m.set("learning_rate", train_cfg.learning_rate);
    m.set("warmup_steps", train_cfg.warmup_steps);
    m.set("grad_clip_norm", train_cfg.grad_clip_norm);
    m.set("eval_interval", train_cfg.eval_interval);
    m.set("prior_loss_weight", train_cfg.prior_loss_weight);
    m.set("d_model", model.config.d_model);
    m.set("n_heads", model.config.n_heads);
    m.set("layers", format!("{:?}", model.config.layers));
    m.set("boundary_prior", model.config.boundary_prior);
    m.set("gumbel_temperature", model.config.gumbel_temperature);
    m.set("max_seq_len", model.config.max_seq_len);
    m.hash_input(&args.data)?;
    m.hash_input(&args.config)?;
    m.add_artifact(&ckpt_path);
    m.add_artifact(&metrics_path);
    m.wall_seconds = started.elapsed().as_secs_f64();
    m.append_to(&args.out)?;

    println!(
        "final eval: bpc={:.4} bpt={:.4} sf={:.3} bpc_chars={:.4}",
        outcome.final_eval.bpc,
        outcome.final_eval.bpt,
        outcome.final_eval.sf,
        outcome.final_eval.bpc_chars
    );
    Ok(())
}

fn parse_mode(s: &str) -> Result<GenerationMode> {
    match s {
        "naive" => Ok(GenerationMode::Naive),
        "token-aware" | "token_aware" => Ok(GenerationMode::TokenAware),
        other => Err(Error::Config(format!(
            "mode must be \"naive\" or \"token-aware\", got {other:?}"
        ))),
    }
}

fn encode_prompt(prompt: &str) -> Result<Vec<u8>> {
    let (norm, _) = crate::training::corpus::normalize_bytes(prompt.as_bytes());
    if norm.is_empty() {
        return Err(Error::InvalidArgument(
            "prompt is empty after normalization".into(),
        ));
    }
    crate::training::corpus::encode_text(&norm)
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let started = Instant::now();
    let (model, warnings) = checkpoint::load(&args.checkpoint, None)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    let prompt = encode_prompt(&args.prompt)?;
    let sampling = match args.temperature {
        Some(t) if t > 0.0 => Sampling::Temperature(t),
        Some(t) => {
            return Err(Error::Config(format!(
                "temperature must be positive, got {t}"
            )))
        }
        None => Sampling::Greedy,
    };
    let cfg = GenerationConfig {
        mode: parse_mode(&args.mode)?,
        sampling,
        max_chars: args.chars,
        max_tokens: args.max_tokens.unwrap_or(usize::MAX / 2),
        max_token_length: args.max_token_length,
        seed: args.seed,
    };
    let mut rng = RngState::new(cfg.seed);
    let (text, stats) = generate(&model, &prompt, &cfg, &mut rng)?;

    println!("{text}");
    eprintln!(
        "stats: chars={} tokens={} sf={:.3} layer_units={} (tokenizer={} token_model={} decoder={}) forced={} seconds={:.4}",
        stats.chars_generated,
        stats.tokens_generated,
        stats.shortening_factor(),
        stats.layer_units(),
        stats.layer_invocations.tokenizer,
        stats.layer_invocations.token_model,
        stats.layer_invocations.decoder,
        stats.forced_boundaries,
        stats.wall_seconds
    );

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let text_path = args.out.join("gen.txt");
    fs::write(&text_path, &text).map_err(|e| Error::io(&text_path, e))?;
    let trace_path = args.out.join("gen_trace.csv");
    let mut trace = String::from("index,length,text\n");
    for t in &stats.trace {
        trace.push_str(&format!("{},{},{}\n", t.index, t.length, t.text));
    }
    fs::write(&trace_path, trace).map_err(|e| Error::io(&trace_path, e))?;

    let mut m = RunManifest::new("generate", args.seed);
    m.set("mode", cfg.mode.as_str());
    m.set("chars", args.chars);
    m.set("max_token_length", args.max_token_length);
    m.set(
        "temperature",
        args.temperature
            .map(|t| t.to_string())
            .unwrap_or_else(|| "greedy".into()),
    );
    m.hash_input(&args.checkpoint)?;
    m.add_artifact(&text_path);
    m.add_artifact(&trace_path);
    m.wall_seconds = started.elapsed().as_secs_f64();
    m.append_to(&args.out)?;
    Ok(())
}

fn cmd_benchmark(args: BenchmarkArgs) -> Result<()> {
    let started = Instant::now();
    let grid: Vec<usize> = args
        .tokens_grid
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad token count {s:?} in grid")))
        })
        .collect::<Result<Vec<usize>>>()?;
    if grid.is_empty() {
        return Err(Error::Config("token grid is empty".into()));
    }
    let (model, _) = checkpoint::load(&args.checkpoint, None)?;
    let prompt = encode_prompt(&args.prompt)?;
    let base = GenerationConfig {
        seed: args.seed,
        ..GenerationConfig::default()
    };
    let result = benchmark_speed(
        &model,
        &prompt,
        &base,
        &grid,
        args.runs,
        args.gen_chars,
        Some(&args.csv),
    )?;
    for row in &result.rows {
        eprintln!(
            "n_tokens={} mode={} wall={:.4}s layer_units={} chars={}",
            row.n_tokens,
            row.mode.as_str(),
            row.wall_seconds,
            row.layer_units,
            row.chars
        );
    }
    for (mode, secs) in &result.gen_at {
        println!("gen@{} {}: {:.4}s", result.gen_chars, mode.as_str(), secs);
    }

    let out_dir = args.csv.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut m = RunManifest::new("benchmark", args.seed);
    m.set("tokens_grid", &args.tokens_grid);
    m.set("runs", args.runs);
    m.set("gen_chars", args.gen_chars);
    m.hash_input(&args.checkpoint)?;
    m.add_artifact(&args.csv);
    m.wall_seconds = started.elapsed().as_secs_f64();
    m.append_to(&out_dir)?;
    Ok(())
}

fn cmd_tok_train(args: TokTrainArgs, bpe: bool) -> Result<()> {
    let started = Instant::now();
    let (corpus, _) = ingest_text(&args.data, AlphabetPolicy::ReplaceWithSpace)?;
    let text = corpus.split_text(Split::Train);
    let tok = if bpe {
        train_bpe(&text, args.vocab_size)?
    } else {
        train_wordpiece(&text, args.vocab_size)?
    };
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let path = args.out.join(format!("{}.vocab", tok.kind.as_str()));
    tok.save(&path)?;
    println!(
        "trained {} tokenizer: vocab={} merges={} -> {}",
        tok.kind.as_str(),
        tok.vocab_size(),
        tok.merges.len(),
        path.display()
    );
    let mut m = RunManifest::new(if bpe { "tok train-bpe" } else { "tok train-wp" }, 0);
    m.set("vocab_size", args.vocab_size);
    m.hash_input(&args.data)?;
    m.add_artifact(&path);
    m.wall_seconds = started.elapsed().as_secs_f64();
    m.append_to(&args.out)?;
    Ok(())
}

fn cmd_tok_extract(args: TokExtractArgs) -> Result<()> {
    let started = Instant::now();
    let (corpus, _) = ingest_text(&args.data, AlphabetPolicy::ReplaceWithSpace)?;
    let (model, _) = checkpoint::load(&args.checkpoint, None)?;
    let (_, stats) = extract_learned_tokens(&model, &corpus, Split::Train, None)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let path = args.out.join("model_tokens.csv");
    let mut lines = String::from("token,count\n");
    let mut items: Vec<(String, u64)> = stats.freq.iter().map(|(s, &c)| (s.clone(), c)).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    for (tok, count) in &items {
        lines.push_str(&format!("{},{}\n", render_token(tok), count));
    }
    fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    println!(
        "extracted {} tokens ({} unique, compression x{:.2}, {} windows) -> {}",
        stats.total_tokens,
        stats.unique_token_count,
        stats.compression_rate,
        stats.windows,
        path.display()
    );
    let mut m = RunManifest::new("tok extract", 0);
    m.hash_input(&args.data)?;
    m.hash_input(&args.checkpoint)?;
    m.add_artifact(&path);
    m.wall_seconds = started.elapsed().as_secs_f64();
    m.append_to(&args.out)?;
    Ok(())
}

/// Deterministic default phrases: word snippets from the test split.
fn default_phrases(corpus: &Corpus, count: usize, words_per_phrase: usize) -> Vec<String> {
    let text = corpus.split_text(Split::Test);
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut out = Vec::new();
    if words.is_empty() {
        return out;
    }
    let stride = (words.len() / (count + 1)).max(1);
    for i in 0..count {
        let start = (i + 1) * stride;
        if start >= words.len() {
            break;
        }
        let end = (start + words_per_phrase).min(words.len());
        out.push(words[start..end].join(" "));
    }
    out
}

fn cmd_tok_compare(args: TokCompareArgs) -> Result<()> {
    let started = Instant::now();
    let (corpus, _) = ingest_text(&args.data, AlphabetPolicy::ReplaceWithSpace)?;
    let (model, _) = checkpoint::load(&args.checkpoint, None)?;
    let train_text = corpus.split_text(Split::Train);

    let (learned, model_stats) = extract_learned_tokens(&model, &corpus, Split::Train, None)?;
    eprintln!(
        "learned tokenizer: {} tokens, {} unique, compression x{:.2}",
        model_stats.total_tokens, model_stats.unique_token_count, model_stats.compression_rate
    );
    let (bpe, wp, clamped) = vocab_size_matching(model_stats.unique_token_count, &train_text)?;
    if clamped {
        eprintln!(
            "warning: unique token count {} below seed symbol count; vocabulary clamped",
            model_stats.unique_token_count
        );
    }
    let bpe_stats = TokenStats::from_subword(&bpe, &train_text, StatsSource::Bpe);
    let wp_stats = TokenStats::from_subword(&wp, &train_text, StatsSource::WordPiece);

    let (_, test_stats) = extract_learned_tokens(&model, &corpus, Split::Test, None)?;
    let unseen = unseen_tokens(&test_stats.freq, &model_stats.freq, 10);

    let phrases = match &args.phrases {
        Some(path) => fs::read_to_string(path)
            .map_err(|e| Error::io(path, e))?
            .lines()
            .map(|l| crate::training::corpus::normalize_bytes(l.as_bytes()).0)
            .filter(|l| !l.is_empty())
            .collect(),
        None => default_phrases(&corpus, 5, 8),
    };

    let report = ComparisonReport {
        model_stats: &model_stats,
        bpe: &bpe,
        bpe_stats: &bpe_stats,
        wp: &wp,
        wp_stats: &wp_stats,
        learned: &learned,
        split_text: &train_text,
        unseen_held_out: Some(unseen),
    };
    let files = report.emit(&model, &args.out, args.top_k, &phrases)?;
    let bpe_path = args.out.join("bpe.vocab");
    bpe.save(&bpe_path)?;
    let wp_path = args.out.join("wordpiece.vocab");
    wp.save(&wp_path)?;

    let mut m = RunManifest::new("tok compare", 0);
    m.set("top_k", args.top_k);
    m.set("matched_vocab_size", bpe.vocab_size());
    m.hash_input(&args.data)?;
    m.hash_input(&args.checkpoint)?;
    for f in &files {
        m.add_artifact(f);
    }
    m.add_artifact(&bpe_path);
    m.add_artifact(&wp_path);
    m.wall_seconds = started.elapsed().as_secs_f64();
    m.append_to(&args.out)?;
    for f in &files {
        println!("{}", f.display());
    }
    Ok(())
}

/// Evaluate a checkpoint on a corpus test split (used by examples).
pub fn eval_checkpoint(checkpoint_path: &Path, data: &Path, seq_len: usize) -> Result<()> {
    let (model, _) = checkpoint::load(checkpoint_path, None)?;
    let (corpus, _) = ingest_text(data, AlphabetPolicy::ReplaceWithSpace)?;
    let report = evaluate(&model, &corpus, Split::Test, seq_len, 0)?;
    println!(
        "test: bpc={:.4} bpt={:.4} sf={:.3} bpc_chars={:.4}",
        report.bpc, report.bpt, report.sf, report.bpc_chars
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_config_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.txt");
        fs::write(&p, "d_model = 16\nbogus_key = 3\n").unwrap();
        let err = parse_config_file(&p).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("bogus_key"));
    }

    #[test]
    fn config_round_trip_of_known_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.txt");
        fs::write(
            &p,
            "# toy setup\nd_model = 32\nn_heads = 4\nlayers_tokenizer = 1\nlayers_token_model = 2\n\
             layers_decoder = 1\nboundary_prior = 0.1\nsteps = 50\nseq_len = 48\nbatch_size = 2\n\
             learning_rate = 0.002\nseed = 9\n",
        )
        .unwrap();
        let (m, t) = parse_config_file(&p).unwrap();
        assert_eq!(m.d_model, 32);
        assert_eq!(m.layers, (1, 2, 1));
        assert!((m.boundary_prior - 0.1).abs() < 1e-12);
        assert_eq!(t.steps, 50);
        assert_eq!(t.seed, 9);
    }

    #[test]
    fn usage_errors_exit_two() {
        // Missing required --data.
        let code = run(["toucan", "train", "--config", "x", "--out", "y"]);
        assert_eq!(code, 2);
        // Unknown subcommand.
        let code = run(["toucan", "frobnicate"]);
        assert_eq!(code, 2);
    }

    #[test]
    fn bad_checkpoint_exits_four() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("bad.touc");
        fs::write(&ckpt, b"not a checkpoint").unwrap();
        let code = run([
            "toucan",
            "generate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--prompt",
            "hello",
            "--chars",
            "5",
        ]);
        assert_eq!(code, 4);
    }

    #[test]
    fn mode_parsing() {
        assert!(matches!(parse_mode("naive"), Ok(GenerationMode::Naive)));
        assert!(matches!(
            parse_mode("token-aware"),
            Ok(GenerationMode::TokenAware)
        ));
        assert!(parse_mode("fast").is_err());
    }
}
