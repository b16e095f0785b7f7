use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing::Level;

use stylesteer::metrics::{mean_jsd, style_perplexity, StyleLexicon, DEFAULT_LEXICON_SIZE};
use stylesteer::protocol::{serve, serve_tcp};
use stylesteer::report::{emit_derived, AggregateRow, ROWS_FILE};
use stylesteer::sweep::reservoir_sample_lines;
use stylesteer::tokenizer::load_vocab_with_spec;
use stylesteer::{
    build_prior, build_vocabulary, decode, evaluate_external, load_external_vocab, load_rows, run_sweep,
    MixtureWeights, ProviderRegistry, RunOptions, SmoothingConfig, SteeringConfig, StylePrior, SweepConfig,
    SweepReport, TokenizerSpec, Vocabulary,
};

const LOG_ENV: &str = "STYLESTEER_LOG";

#[derive(Parser)]
#[command(name = "stylesteer", version, about = "Decoding-time style steering with n-gram priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a style prior from a corpus.
    TrainPrior(TrainPrior),
    /// Decode one prompt with the prior injected.
    Generate(Generate),
    /// Run a λ × prompt × corpus sweep from a JSON config.
    Sweep(Sweep),
    /// Score an existing text file with the sweep metrics.
    Evaluate(Evaluate),
    /// Recompute aggregates, frontier and charts from a sweep's rows.csv.
    Report(Report),
    /// Expose a provider over the NDJSON logit protocol.
    Serve(Serve),
}

#[derive(Args)]
struct TrainPrior {
    #[arg(long)]
    corpus: PathBuf,
    /// Output prior; `.vocab` and `.tokenizer.json` sidecars are written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    k: f64,
    #[arg(long, default_value_t = 512)]
    topk: usize,
    /// Mixture weights for orders 1..3.
    #[arg(long, default_value = "0.1,0.3,0.6", value_parser = parse_weights)]
    w: MixtureWeights,
    /// Reservoir-sample this many corpus lines.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50_000)]
    max_vocab: usize,
    #[arg(long)]
    lowercase: bool,
    /// Use this vocab file (greedy longest-match) instead of building one.
    #[arg(long, conflicts_with_all = ["max_vocab", "lowercase", "base"])]
    vocab: Option<PathBuf>,
    /// Extra text (e.g. the reference model's training file) whose words
    /// join the built vocabulary.
    #[arg(long)]
    base: Option<PathBuf>,
}

#[derive(Args)]
struct Generate {
    #[arg(long)]
    prior: PathBuf,
    /// `ref:PATH`, `remote:HOST:PORT`, `remote:exec:CMD` or `uniform`.
    #[arg(long)]
    provider: String,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// `greedy` or `topp`.
    #[arg(long, default_value = "greedy")]
    mode: String,
    #[arg(long, default_value_t = 0.9)]
    p: f64,
    #[arg(long, default_value_t = 1.0)]
    temp: f64,
    #[arg(long, default_value_t = 256)]
    max_tokens: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print a JSON summary instead of plain text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct Sweep {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep cells already recorded in OUT/cells.jsonl.
    #[arg(long)]
    resume: bool,
    /// Override the config's worker count.
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    text: PathBuf,
    #[arg(long)]
    prior: PathBuf,
    #[arg(long)]
    provider: String,
    /// Style corpus, for the unigram/bigram overlap lexicon.
    #[arg(long)]
    corpus: PathBuf,
    /// Conditioning prefix for base perplexity.
    #[arg(long, default_value = "")]
    prompt: String,
    /// Strength used for the reported JSD.
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
}

#[derive(Args)]
struct Report {
    #[arg(long = "in")]
    dir: PathBuf,
}

#[derive(Args)]
struct Serve {
    /// Prior whose vocabulary the provider uses.
    #[arg(long)]
    prior: PathBuf,
    #[arg(long)]
    provider: String,
    #[arg(long, required_unless_present = "stdio")]
    listen: Option<String>,
    /// Speak the protocol on stdin/stdout (for `remote:exec:`).
    #[arg(long)]
    stdio: bool,
    #[arg(long, default_value = "stylesteer")]
    name: String,
}

fn parse_weights(s: &str) -> std::result::Result<MixtureWeights, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let [a, b, c] = parts[..] else {
        return Err(format!("expected three comma-separated weights, got {}", parts.len()));
    };
    MixtureWeights::new(a, b, c).map_err(|e| e.to_string())
}

fn sidecar(prior: &Path, suffix: &str) -> PathBuf {
    let mut name = prior.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

/// Loads a prior together with the vocabulary written beside it.
fn load_bundle(prior: &Path) -> Result<(Vocabulary, StylePrior)> {
    let spec_path = sidecar(prior, ".tokenizer.json");
    let spec: TokenizerSpec = match fs::read_to_string(&spec_path) {
        Ok(s) => serde_json::from_str(&s).with_context(|| format!("parsing {}", spec_path.display()))?,
        Err(e) if e.kind() == io::ErrorKind::NotFound => TokenizerSpec::word_level(),
        Err(e) => return Err(e).context(format!("reading {}", spec_path.display())),
    };
    let vocab_path = sidecar(prior, ".vocab");
    let vocab = load_vocab_with_spec(&vocab_path, spec).with_context(|| format!("loading {}", vocab_path.display()))?;
    let prior =
        StylePrior::load(prior, Some(vocab.fingerprint())).with_context(|| format!("loading {}", prior.display()))?;
    Ok((vocab, prior))
}

fn train_prior(a: TrainPrior) -> Result<()> {
    let raw = fs::read_to_string(&a.corpus).with_context(|| format!("reading {}", a.corpus.display()))?;
    let text = match a.sample {
        Some(n) => reservoir_sample_lines(&raw, n, a.seed),
        None => raw,
    };
    let vocab = match &a.vocab {
        Some(path) => load_external_vocab(path)?,
        None => {
            let mut all = text.clone();
            if let Some(base) = &a.base {
                all.push('\n');
                all.push_str(&fs::read_to_string(base).with_context(|| format!("reading {}", base.display()))?);
            }
            let spec = if a.lowercase { TokenizerSpec::word_level().lowercase() } else { TokenizerSpec::word_level() };
            build_vocabulary(&all, spec, a.max_vocab)?
        }
    };
    let corpus = vocab.tokenize_corpus(a.corpus.display().to_string(), &text);
    let smoothing = SmoothingConfig { k: a.k, top_k: a.topk };
    let prior = build_prior(&corpus, &vocab, smoothing, a.w)?;
    prior.save(&a.out)?;
    vocab.write_vocab_file(sidecar(&a.out, ".vocab"))?;
    fs::write(sidecar(&a.out, ".tokenizer.json"), serde_json::to_string(&vocab.spec())?)?;
    println!(
        "wrote {} (V = {}, {} tokens, fingerprint {})",
        a.out.display(),
        vocab.len(),
        corpus.token_count(),
        vocab.fingerprint()
    );
    Ok(())
}

fn generate(a: Generate) -> Result<()> {
    let (vocab, prior) = load_bundle(&a.prior)?;
    let mut provider = ProviderRegistry::with_builtins().create(&a.provider, &vocab)?;
    let config = SteeringConfig {
        lambda: a.lambda,
        mode: a.mode,
        top_p: a.p,
        temperature: a.temp,
        max_new_tokens: a.max_tokens,
        seed: a.seed,
        ..Default::default()
    };
    let prompt = vocab.tokenize(&a.prompt);
    let record = decode(provider.as_mut(), Some(&prior), &prompt, &config)?;
    let text = vocab.detokenize(&record.generated);
    if a.json {
        let summary = serde_json::json!({
            "prompt": a.prompt,
            "text": text,
            "tokens": record.generated,
            "lambda": a.lambda,
            "mean_jsd_bits": mean_jsd(&record).ok(),
            "style_ppl": style_perplexity(&record, &prior).ok(),
            "aborted": record.aborted,
        });
        println!("{summary}");
    } else {
        println!("{text}");
    }
    if let Some(e) = &record.aborted {
        bail!("generation stopped early after {} tokens: {e}", record.generated.len());
    }
    Ok(())
}

fn print_aggregates(aggregates: &[AggregateRow]) {
    println!(
        "{:<24} {:>6} {:>4} {:>12} {:>12} {:>10} {:>8}",
        "corpus", "lambda", "n", "style_ppl", "base_ppl", "jsd_bits", "uni_ovl"
    );
    for a in aggregates {
        match &a.aggregate {
            Some(g) => println!(
                "{:<24} {:>6.2} {:>4} {:>12.3} {:>12.3} {:>10.5} {:>8.4}",
                a.corpus,
                a.lambda,
                a.ok,
                g.style_ppl.mean,
                g.base_ppl.mean,
                g.mean_jsd_bits.mean,
                g.unigram_overlap.mean
            ),
            None => println!("{:<24} {:>6.2} {:>4} (no successful cells)", a.corpus, a.lambda, 0),
        }
    }
}

fn sweep(a: Sweep) -> Result<()> {
    let mut config = SweepConfig::load(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    if let Some(p) = a.parallelism {
        config.parallelism = p;
    }
    let options = RunOptions { resume: a.resume, stop_after: None };
    let report = run_sweep(&config, &ProviderRegistry::with_builtins(), &a.out, &options)?;
    stylesteer::emit_reports(&report, &a.out)?;
    print_aggregates(&report.aggregates);
    let failed = report.rows.iter().filter(|r| r.status != stylesteer::CellStatus::Ok).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells did not complete; see generations.txt", report.rows.len());
    }
    Ok(())
}

fn evaluate(a: Evaluate) -> Result<()> {
    let (vocab, prior) = load_bundle(&a.prior)?;
    let text = fs::read_to_string(&a.text).with_context(|| format!("reading {}", a.text.display()))?;
    let style = fs::read_to_string(&a.corpus).with_context(|| format!("reading {}", a.corpus.display()))?;
    let lexicon = StyleLexicon::from_corpus(&vocab.tokenize_corpus("style", &style), DEFAULT_LEXICON_SIZE);
    let mut provider = ProviderRegistry::with_builtins().create(&a.provider, &vocab)?;
    let report = evaluate_external(&text, &a.prompt, &vocab, &prior, &lexicon, provider.as_mut(), a.lambda)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn report(a: Report) -> Result<()> {
    let rows =
        load_rows(&a.dir.join(ROWS_FILE)).with_context(|| format!("reading {}", a.dir.join(ROWS_FILE).display()))?;
    let report = SweepReport::from_rows(rows, Vec::new(), None)?;
    emit_derived(&report, &a.dir)?;
    print_aggregates(&report.aggregates);
    for (corpus, points) in &report.frontiers {
        let lambdas: Vec<String> = points.iter().map(|p| format!("{:.2}", p.lambda)).collect();
        println!("frontier {corpus}: lambda {}", lambdas.join(", "));
    }
    Ok(())
}

fn serve_cmd(a: Serve) -> Result<()> {
    let (vocab, _) = load_bundle(&a.prior)?;
    let mut provider = ProviderRegistry::with_builtins().create(&a.provider, &vocab)?;
    if a.stdio {
        let stdin = io::stdin();
        let stdout = io::stdout();
        serve(provider.as_mut(), &a.name, BufReader::new(stdin.lock()), BufWriter::new(stdout.lock()))?;
        return Ok(());
    }
    let addr = a.listen.expect("clap requires --listen without --stdio");
    let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
    eprintln!("listening on {}", listener.local_addr()?);
    io::stderr().flush()?;
    serve_tcp(listener, provider.as_ref(), &a.name)?;
    Ok(())
}

fn log_level() -> Level {
    match std::env::var(LOG_ENV).unwrap_or_default().to_ascii_lowercase().as_str() {
        "trace" => Level::TRACE,
        "debug" => Level::DEBUG,
        "info" => Level::INFO,
        "error" => Level::ERROR,
        _ => Level::WARN,
    }
}

fn main() -> Result<()> {
    tracing_subscriber::fmt().with_max_level(log_level()).with_writer(io::stderr).init();
    match Cli::parse().command {
        Command::TrainPrior(a) => train_prior(a),
        Command::Generate(a) => generate(a),
        Command::Sweep(a) => sweep(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
        Command::Serve(a) => serve_cmd(a),
    }
}
