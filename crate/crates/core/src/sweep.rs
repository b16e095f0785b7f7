//! Corpus × λ × prompt sweeps.
//!
//! Cells run on a small worker pool. Each finished cell is appended to
//! `cells.jsonl` in the output directory before anything else happens, so a
//! killed sweep can be resumed with only the missing cells rerun. Seeds are a
//! function of the cell, never of execution order.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{MetricReport, StyleLexicon, DEFAULT_LEXICON_SIZE};
use crate::prior::{build_prior, MixtureWeights, SmoothingConfig, StylePrior};
use crate::provider::{LogitProvider, ProviderRegistry};
use crate::report::{cell_id, CellStatus, CellText, Row, RunMetadata, SweepReport};
use crate::steering::{decode, teacher_force, SteeringConfig};
use crate::tokenizer::{
    build_vocabulary, load_vocab_with_spec, TokenizedCorpus, TokenizerKind, TokenizerSpec, Vocabulary,
};

pub const JOURNAL_FILE: &str = "cells.jsonl";
pub const PROMPT_ONLY_SUFFIX: &str = "[prompt-only]";

pub const DEFAULT_LAMBDA_GRID: [f64; 14] =
    [0.00, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80, 0.90, 1.00];

/// Twenty prompts: narrative, dialogue, expository and technical, five each.
pub const DEFAULT_PROMPTS: [&str; 20] = [
    "I still remember the moment when everything began to change",
    "At the edge of the city, far from the noise and lights",
    "She had promised herself she would never return to this place",
    "By the time anyone noticed the mistake, it was already too late",
    "The evening air carried a quiet sense of anticipation",
    "\"Are you sure this is the right decision?\" he asked",
    "\"If we don't act now, we may lose our only chance,\" she replied",
    "\"That's not what I meant,\" they said patiently",
    "\"Listen carefully, because I won't repeat this again,\"",
    "\"Look, here's the thing nobody wants to admit,\"",
    "There are three main reasons why this issue is important.",
    "At first glance, it might seem that nothing unusual is happening.",
    "In recent years, many people have argued that this trend is accelerating.",
    "From a practical point of view, the situation can be summarized as follows.",
    "However, this explanation leaves out an important detail:",
    "First, we outline the basic idea of the method.",
    "The system consists of three main components:",
    "The goal of this section is to show that the proposed approach is effective.",
    "If we compare these two approaches, we find that several key differences emerge.",
    "To understand this more clearly, consider the following example:",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambda_grid: Vec<f64>,
    pub prompts: Vec<String>,
    pub corpora: Vec<CorpusSpec>,
    /// Provider spec, e.g. `ref:base.txt` or `remote:127.0.0.1:7070`.
    pub provider: String,
    /// External vocabulary file. Without one the vocabulary is built from
    /// the style corpora plus the reference provider's training text.
    pub vocab: Option<PathBuf>,
    pub max_vocab: usize,
    /// How text is split. An external-vocab-file tokenizer requires `vocab`.
    pub tokenizer: TokenizerSpec,
    /// Decoding template; `lambda` and `seed` are set per cell.
    pub decode: SteeringConfig,
    pub smoothing: SmoothingConfig,
    pub weights: MixtureWeights,
    pub lexicon_size: usize,
    /// Reservoir-sample this many lines from each style corpus.
    pub sample_lines: Option<usize>,
    pub seed: u64,
    pub parallelism: usize,
    /// When set, adds an unsteered prompt-only baseline per corpus.
    pub style_instruction: Option<String>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            prompts: DEFAULT_PROMPTS.iter().map(|s| s.to_string()).collect(),
            corpora: Vec::new(),
            provider: String::new(),
            vocab: None,
            max_vocab: 50_000,
            tokenizer: TokenizerSpec::word_level(),
            decode: SteeringConfig::default(),
            smoothing: SmoothingConfig::default(),
            weights: MixtureWeights::default(),
            lexicon_size: DEFAULT_LEXICON_SIZE,
            sample_lines: None,
            seed: 0,
            parallelism: 1,
            style_instruction: None,
        }
    }
}

impl SweepConfig {
    /// Reads a JSON config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for c in &mut self.corpora {
            fix(&mut c.path);
        }
        if let Some(v) = &mut self.vocab {
            fix(v);
        }
        if let Some(arg) = self.provider.strip_prefix("ref:") {
            let mut p = PathBuf::from(arg);
            fix(&mut p);
            self.provider = format!("ref:{}", p.display());
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.lambda_grid.is_empty() {
            return bad("lambda_grid is empty".into());
        }
        let mut millis = Vec::new();
        for &l in &self.lambda_grid {
            SteeringConfig { lambda: l, ..self.decode.clone() }.validate()?;
            millis.push(lambda_millis(l));
        }
        millis.sort_unstable();
        if millis.windows(2).any(|w| w[0] == w[1]) {
            return bad("lambda_grid has values that coincide at 0.001 resolution".into());
        }
        if self.prompts.is_empty() {
            return bad("no prompts".into());
        }
        if let Some(i) = self.prompts.iter().position(|p| p.trim().is_empty()) {
            return bad(format!("prompt {i} is empty"));
        }
        if self.corpora.is_empty() {
            return bad("no corpora".into());
        }
        let mut names: Vec<&str> = self.corpora.iter().map(|c| c.name.as_str()).collect();
        if names.iter().any(|n| n.is_empty() || n.ends_with(PROMPT_ONLY_SUFFIX)) {
            return bad(format!("corpus names must be non-empty and not end in {PROMPT_ONLY_SUFFIX}"));
        }
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate corpus name".into());
        }
        if self.provider.is_empty() {
            return bad("no provider".into());
        }
        if self.tokenizer.kind == TokenizerKind::ExternalVocabFile && self.vocab.is_none() {
            return bad("an external-vocab-file tokenizer needs a vocab file".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        self.smoothing.validate()?;
        self.weights.validate()?;
        Ok(())
    }

    /// Stable digest of everything that affects rows, used to tie a
    /// journal to its run. Parallelism is excluded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&Self { parallelism: 1, ..self.clone() }).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

pub fn lambda_millis(lambda: f64) -> i64 {
    (lambda * 1000.0).round() as i64
}

/// Seed for one cell: a hash of the run seed, corpus name, λ in millis and
/// prompt index.
pub fn cell_seed(run_seed: u64, corpus: &str, lambda: f64, prompt_id: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update((corpus.len() as u64).to_le_bytes());
    h.update(corpus.as_bytes());
    h.update(lambda_millis(lambda).to_le_bytes());
    h.update((prompt_id as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Keeps `n` lines chosen uniformly by a seeded reservoir, in their original
/// order. Fewer than `n` lines are returned unchanged.
pub fn reservoir_sample_lines(text: &str, n: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reservoir: Vec<(usize, &str)> = Vec::with_capacity(n);
    for (i, line) in text.lines().enumerate() {
        if i < n {
            reservoir.push((i, line));
        } else {
            let j = index::sample(&mut rng, i + 1, 1).index(0);
            if j < n {
                reservoir[j] = (i, line);
            }
        }
    }
    reservoir.sort_by_key(|&(i, _)| i);
    let mut out: Vec<&str> = reservoir.into_iter().map(|(_, l)| l).collect();
    out.push("");
    out.join("\n")
}

pub struct PreparedCorpus {
    pub name: String,
    pub corpus: TokenizedCorpus,
    pub prior: StylePrior,
    pub lexicon: StyleLexicon,
}

/// Everything a sweep needs before its first cell: vocabulary, priors,
/// lexicons, and a provider to fork workers from.
pub struct SweepContext {
    pub vocab: Vocabulary,
    pub corpora: Vec<PreparedCorpus>,
    provider: Mutex<Box<dyn LogitProvider>>,
}

impl SweepContext {
    pub fn prepare(config: &SweepConfig, registry: &ProviderRegistry) -> Result<Self> {
        config.validate()?;
        let mut texts = Vec::with_capacity(config.corpora.len());
        for (i, c) in config.corpora.iter().enumerate() {
            let raw = fs::read_to_string(&c.path)
                .map_err(|e| Error::InvalidConfig(format!("corpus {} ({}): {e}", c.name, c.path.display())))?;
            texts.push(match config.sample_lines {
                Some(n) => reservoir_sample_lines(&raw, n, config.seed ^ i as u64),
                None => raw,
            });
        }
        let vocab = match &config.vocab {
            Some(path) => load_vocab_with_spec(path, config.tokenizer)?,
            None => {
                let mut all = String::new();
                if let Some(base) = config.provider.strip_prefix("ref:") {
                    all.push_str(&fs::read_to_string(base)?);
                    all.push('\n');
                }
                for t in &texts {
                    all.push_str(t);
                    all.push('\n');
                }
                build_vocabulary(&all, config.tokenizer, config.max_vocab)?
            }
        };
        let corpora = config
            .corpora
            .iter()
            .zip(&texts)
            .map(|(c, text)| {
                let corpus = vocab.tokenize_corpus(c.name.clone(), text);
                let prior = build_prior(&corpus, &vocab, config.smoothing, config.weights)?;
                let lexicon = StyleLexicon::from_corpus(&corpus, config.lexicon_size);
                Ok(PreparedCorpus { name: c.name.clone(), corpus, prior, lexicon })
            })
            .collect::<Result<Vec<_>>>()?;
        let provider = registry.create(&config.provider, &vocab)?;
        Ok(Self::from_parts(vocab, corpora, provider))
    }

    pub fn from_parts(vocab: Vocabulary, corpora: Vec<PreparedCorpus>, provider: Box<dyn LogitProvider>) -> Self {
        Self { vocab, corpora, provider: Mutex::new(provider) }
    }

    pub fn fork_provider(&self) -> Result<Box<dyn LogitProvider>> {
        self.provider.lock().unwrap_or_else(|p| p.into_inner()).fork()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellMode {
    Steered,
    PromptOnly,
}

/// Position of a cell in the grid; the sort order of the final rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub mode: CellMode,
    pub corpus: usize,
    pub lambda: usize,
    pub prompt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub key: CellKey,
    pub row: Row,
    pub text: CellText,
}

pub fn grid(config: &SweepConfig) -> Vec<CellKey> {
    let mut cells = Vec::new();
    for corpus in 0..config.corpora.len() {
        for lambda in 0..config.lambda_grid.len() {
            for prompt in 0..config.prompts.len() {
                cells.push(CellKey { mode: CellMode::Steered, corpus, lambda, prompt });
            }
        }
    }
    if config.style_instruction.is_some() {
        for corpus in 0..config.corpora.len() {
            for prompt in 0..config.prompts.len() {
                cells.push(CellKey { mode: CellMode::PromptOnly, corpus, lambda: 0, prompt });
            }
        }
    }
    cells
}

fn prefixed(instruction: &str, prompt: &str) -> String {
    if instruction.trim().is_empty() {
        prompt.to_string()
    } else {
        format!("{instruction} {prompt}")
    }
}

/// Decodes and scores one cell. Failures become rows, never errors.
pub fn run_cell(
    ctx: &SweepContext,
    config: &SweepConfig,
    key: CellKey,
    provider: &mut dyn LogitProvider,
) -> CellOutcome {
    let corpus = &ctx.corpora[key.corpus];
    let (label, lambda, prompt) = match key.mode {
        CellMode::Steered => (corpus.name.clone(), config.lambda_grid[key.lambda], config.prompts[key.prompt].clone()),
        CellMode::PromptOnly => (
            format!("{}{PROMPT_ONLY_SUFFIX}", corpus.name),
            0.0,
            prefixed(config.style_instruction.as_deref().unwrap_or(""), &config.prompts[key.prompt]),
        ),
    };
    let seed = cell_seed(config.seed, &corpus.name, lambda, key.prompt);
    let decode_config = SteeringConfig { lambda, seed, ..config.decode.clone() };
    let prompt_ids = ctx.vocab.tokenize(&prompt);

    let result = decode(provider, Some(&corpus.prior), &prompt_ids, &decode_config).and_then(|rec| {
        if rec.generated.is_empty() {
            return Err(Error::Remote(rec.aborted.unwrap_or_else(|| "no tokens generated".into())));
        }
        let metrics = MetricReport::compute(&rec, &corpus.prior, &corpus.lexicon, provider)?;
        Ok((rec, metrics))
    });
    let (row, text, error) = match result {
        Ok((rec, metrics)) => {
            let status = if rec.is_partial() { CellStatus::Partial } else { CellStatus::Ok };
            let row = Row::new(label, lambda, key.prompt, seed, status, Some(&metrics));
            (row, ctx.vocab.detokenize(&rec.generated), rec.aborted)
        }
        Err(e) => {
            tracing::warn!(cell = %cell_id(&label, lambda, key.prompt), "cell failed: {e}");
            (Row::new(label, lambda, key.prompt, seed, CellStatus::Failed, None), String::new(), Some(e.to_string()))
        }
    };
    CellOutcome { key, text: CellText { cell_id: row.cell_id(), prompt, text, error }, row }
}

/// Runs `cells` on `workers` threads, each with its own forked provider, and
/// hands every outcome to `sink` on the calling thread. `sink` returns false
/// to stop scheduling new cells.
pub fn run_cells(
    ctx: &SweepContext,
    config: &SweepConfig,
    cells: &[CellKey],
    workers: usize,
    mut sink: impl FnMut(CellOutcome) -> Result<bool>,
) -> Result<()> {
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<CellOutcome>();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, cells.len().max(1)) {
            let tx = tx.clone();
            let (next, stop) = (&next, &stop);
            s.spawn(move || {
                let mut provider: Option<Box<dyn LogitProvider>> = None;
                while !stop.load(Ordering::SeqCst) {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&key) = cells.get(i) else { break };
                    if provider.is_none() {
                        match ctx.fork_provider() {
                            Ok(p) => provider = Some(p),
                            Err(e) => {
                                if tx.send(failed_outcome(ctx, config, key, &e)).is_err() {
                                    break;
                                }
                                continue;
                            }
                        }
                    }
                    let outcome = run_cell(ctx, config, key, provider.as_deref_mut().expect("forked above"));
                    // A broken connection is not reused for the next cell.
                    if outcome.row.status != CellStatus::Ok {
                        provider = None;
                    }
                    if tx.send(outcome).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);
        for outcome in rx {
            if !sink(outcome)? {
                stop.store(true, Ordering::SeqCst);
                break;
            }
        }
        Ok(())
    })
}

fn failed_outcome(ctx: &SweepContext, config: &SweepConfig, key: CellKey, e: &Error) -> CellOutcome {
    let corpus = &ctx.corpora[key.corpus].name;
    let (label, lambda) = match key.mode {
        CellMode::Steered => (corpus.clone(), config.lambda_grid[key.lambda]),
        CellMode::PromptOnly => (format!("{corpus}{PROMPT_ONLY_SUFFIX}"), 0.0),
    };
    let seed = cell_seed(config.seed, corpus, lambda, key.prompt);
    let row = Row::new(label, lambda, key.prompt, seed, CellStatus::Failed, None);
    CellOutcome {
        key,
        text: CellText {
            cell_id: row.cell_id(),
            prompt: config.prompts[key.prompt].clone(),
            text: String::new(),
            error: Some(e.to_string()),
        },
        row,
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Keep completed cells from an existing journal.
    pub resume: bool,
    /// Stop after this many new cells with [`Error::Interrupted`], leaving
    /// the journal as a kill would.
    pub stop_after: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct JournalHeader {
    config_hash: String,
}

/// Reads the completed cells of a journal, truncating a torn tail.
fn read_journal(path: &Path, config_hash: &str) -> Result<BTreeMap<CellKey, CellOutcome>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
        Err(e) => return Err(e.into()),
    };
    let mut done = BTreeMap::new();
    let mut good = 0usize;
    let mut header_seen = false;
    for line in bytes.split_inclusive(|&b| b == b'\n') {
        if line.last() != Some(&b'\n') {
            break;
        }
        if !header_seen {
            let Ok(h) = serde_json::from_slice::<JournalHeader>(line) else { break };
            if h.config_hash != config_hash {
                return Err(Error::InvalidConfig(format!(
                    "journal {} belongs to config {}, not {config_hash}",
                    path.display(),
                    h.config_hash
                )));
            }
            header_seen = true;
        } else {
            let Ok(o) = serde_json::from_slice::<CellOutcome>(line) else { break };
            done.insert(o.key, o);
        }
        good += line.len();
    }
    if good < bytes.len() {
        tracing::warn!(dropped = bytes.len() - good, "truncating torn journal tail");
        OpenOptions::new().write(true).open(path)?.set_len(good as u64)?;
    }
    Ok(done)
}

/// Runs every missing cell of the sweep, journaling into `out_dir`, and
/// assembles the report. Rows are sorted by grid position.
pub fn run_sweep(
    config: &SweepConfig,
    registry: &ProviderRegistry,
    out_dir: &Path,
    options: &RunOptions,
) -> Result<SweepReport> {
    let started = unix_now();
    let ctx = SweepContext::prepare(config, registry)?;
    fs::create_dir_all(out_dir)?;
    let journal_path = out_dir.join(JOURNAL_FILE);
    let hash = config.hash();

    let mut done = if options.resume { read_journal(&journal_path, &hash)? } else { BTreeMap::new() };
    let resumed = done.len();
    let mut journal = if done.is_empty() {
        let mut f = BufWriter::new(File::create(&journal_path)?);
        serde_json::to_writer(&mut f, &JournalHeader { config_hash: hash.clone() })?;
        f.write_all(b"\n")?;
        f.flush()?;
        f
    } else {
        BufWriter::new(OpenOptions::new().append(true).open(&journal_path)?)
    };

    let all = grid(config);
    let pending: Vec<CellKey> = all.iter().copied().filter(|k| !done.contains_key(k)).collect();
    tracing::info!(total = all.len(), resumed, pending = pending.len(), "starting sweep");

    let mut written = 0usize;
    run_cells(&ctx, config, &pending, config.parallelism, |outcome| {
        serde_json::to_writer(&mut journal, &outcome)?;
        journal.write_all(b"\n")?;
        journal.flush()?;
        tracing::debug!(cell = %outcome.text.cell_id, status = ?outcome.row.status, "cell done");
        done.insert(outcome.key, outcome);
        written += 1;
        Ok(options.stop_after.is_none_or(|n| written < n))
    })?;
    if done.len() < all.len() {
        return Err(Error::Interrupted { completed: done.len() });
    }

    let (rows, texts) = done.into_values().map(|o| (o.row, o.text)).unzip();
    let metadata = RunMetadata {
        seed: config.seed,
        config_hash: hash,
        started_unix: started,
        finished_unix: unix_now(),
        cells: all.len(),
        resumed_cells: resumed,
        parallelism: config.parallelism,
    };
    SweepReport::from_rows(rows, texts, Some(metadata))
}

/// The prompt-only baseline on its own: λ = 0, `instruction` prepended to
/// every prompt, one row per (corpus, prompt). Nothing is journaled.
pub fn prompt_prefix_mode(ctx: &SweepContext, config: &SweepConfig, instruction: &str) -> Result<Vec<CellOutcome>> {
    let config = SweepConfig { style_instruction: Some(instruction.to_string()), ..config.clone() };
    let cells: Vec<CellKey> = grid(&config).into_iter().filter(|k| k.mode == CellMode::PromptOnly).collect();
    let mut out = Vec::with_capacity(cells.len());
    run_cells(ctx, &config, &cells, config.parallelism, |o| {
        out.push(o);
        Ok(true)
    })?;
    out.sort_by_key(|o| o.key);
    Ok(out)
}

/// Scores externally produced `text` with the sweep metrics, conditioning
/// the base model on `prompt`. `lambda` only affects the reported JSD.
pub fn evaluate_external(
    text: &str,
    prompt: &str,
    vocab: &Vocabulary,
    prior: &StylePrior,
    lexicon: &StyleLexicon,
    provider: &mut dyn LogitProvider,
    lambda: f64,
) -> Result<MetricReport> {
    let tokens = vocab.tokenize(text);
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    let prompt_ids = vocab.tokenize(prompt);
    let record = teacher_force(provider, Some(prior), &prompt_ids, &tokens, lambda, Default::default())?;
    MetricReport::compute(&record, prior, lexicon, provider)
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}
