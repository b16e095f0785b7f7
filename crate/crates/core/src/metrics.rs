//! Generation metrics: style perplexity under the prior's mixture, base
//! perplexity under the unsteered provider, per-step Jensen-Shannon
//! divergence (bits), lexical overlap with the style corpus, and
//! mean / population-std / CV aggregation.
//!
//! Prompt tokens never count toward any metric.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::softmax;
use crate::prior::StylePrior;
use crate::provider::{token_logprobs, LogitProvider};
use crate::steering::{recent_context, GenerationRecord};
use crate::tokenizer::{TokenId, TokenizedCorpus, NUM_SPECIALS};

pub const DEFAULT_LEXICON_SIZE: usize = 5000;

/// `Σ p log2(p / m)` over the support of `p`.
fn kl_to_mixture_bits(p: &[f64], m: &[f64]) -> f64 {
    p.iter().zip(m).filter(|(&pi, _)| pi > 0.0).map(|(&pi, &mi)| pi * (pi / mi).log2()).sum()
}

/// Jensen-Shannon divergence in bits, clamped to `[0, 1]`.
pub fn js_divergence_bits(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions must share a support");
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let jsd = 0.5 * kl_to_mixture_bits(p, &m) + 0.5 * kl_to_mixture_bits(q, &m);
    jsd.clamp(0.0, 1.0)
}

/// Per-token `log P_mix(x_t | last ≤2 tokens)` for the generated tokens.
pub fn style_logprobs(record: &GenerationRecord, prior: &StylePrior) -> Vec<f64> {
    let seq = record.full_sequence();
    (record.prompt.len()..seq.len()).map(|t| prior.mix_logprob(recent_context(&seq[..t]), seq[t])).collect()
}

fn perplexity(logprobs: &[f64]) -> f64 {
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    (-mean).exp()
}

/// `exp(-(1/T) Σ_t log P_mix(x_t | x_<t))` over generated tokens.
pub fn style_perplexity(record: &GenerationRecord, prior: &StylePrior) -> Result<f64> {
    if record.generated.is_empty() {
        return Err(Error::EmptyGeneration);
    }
    Ok(perplexity(&style_logprobs(record, prior)))
}

/// Perplexity of the generated tokens under the unsteered provider,
/// conditioned on the prompt.
pub fn base_perplexity(record: &GenerationRecord, provider: &mut dyn LogitProvider) -> Result<f64> {
    if record.generated.is_empty() {
        return Err(Error::EmptyGeneration);
    }
    Ok(perplexity(&token_logprobs(provider, &record.generated, &record.prompt)?))
}

/// Base perplexity from the log-probs recorded while decoding, if every
/// step has one. Equal to [`base_perplexity`] for a deterministic provider.
pub fn base_perplexity_from_trace(record: &GenerationRecord) -> Option<f64> {
    if record.generated.is_empty() || record.steps.len() != record.generated.len() {
        return None;
    }
    let lps: Vec<f64> = record.steps.iter().map(|s| s.base_logprob).collect();
    Some(perplexity(&lps))
}

/// Mean per-step JSD (bits) between base and steered distributions.
pub fn mean_jsd(record: &GenerationRecord) -> Result<f64> {
    if record.steps.is_empty() {
        return Err(if record.generated.is_empty() { Error::EmptyGeneration } else { Error::MissingDistributions });
    }
    let mut total = 0.0;
    for step in &record.steps {
        total += match (&step.base_logits, &step.steered_logits, step.jsd_bits) {
            (Some(b), Some(s), _) => js_divergence_bits(&softmax(b), &softmax(s)),
            (_, _, Some(j)) => j,
            _ => return Err(Error::MissingDistributions),
        };
    }
    Ok(total / record.steps.len() as f64)
}

/// Surface statistics of the style corpus used by the overlap rates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StyleLexicon {
    pub top_unigrams: HashSet<TokenId>,
    pub seen_bigrams: HashSet<(TokenId, TokenId)>,
}

impl StyleLexicon {
    /// The `size` most frequent non-special tokens (ties by ascending id)
    /// and every adjacent pair in the corpus.
    pub fn from_corpus(corpus: &TokenizedCorpus, size: usize) -> Self {
        let mut freq: HashMap<TokenId, u64> = HashMap::new();
        for &id in &corpus.ids {
            if id as usize >= NUM_SPECIALS {
                *freq.entry(id).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(TokenId, u64)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(size);
        let top_unigrams = ranked.into_iter().map(|(t, _)| t).collect();
        let seen_bigrams = corpus.ids.windows(2).map(|w| (w[0], w[1])).collect();
        Self { top_unigrams, seen_bigrams }
    }
}

/// `(unigram overlap, bigram seen rate)` over generated tokens. The bigram
/// rate is `None` with fewer than two generated tokens.
pub fn overlap_rates(generated: &[TokenId], lexicon: &StyleLexicon) -> Result<(f64, Option<f64>)> {
    if generated.is_empty() {
        return Err(Error::EmptyGeneration);
    }
    let hits = generated.iter().filter(|t| lexicon.top_unigrams.contains(t)).count();
    let unigram = hits as f64 / generated.len() as f64;
    let bigram = (generated.len() >= 2).then(|| {
        let seen = generated.windows(2).filter(|w| lexicon.seen_bigrams.contains(&(w[0], w[1]))).count();
        seen as f64 / (generated.len() - 1) as f64
    });
    Ok((unigram, bigram))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub token_count: usize,
    pub style_ppl: f64,
    pub base_ppl: f64,
    pub mean_jsd_bits: f64,
    pub unigram_overlap: f64,
    pub bigram_seen: Option<f64>,
}

impl MetricReport {
    /// All metrics for one record. Base perplexity comes from the decode
    /// trace when complete, else from re-scoring with `provider`.
    pub fn compute(
        record: &GenerationRecord,
        prior: &StylePrior,
        lexicon: &StyleLexicon,
        provider: &mut dyn LogitProvider,
    ) -> Result<Self> {
        let style_ppl = style_perplexity(record, prior)?;
        let base_ppl = match base_perplexity_from_trace(record) {
            Some(p) => p,
            None => base_perplexity(record, provider)?,
        };
        let (unigram_overlap, bigram_seen) = overlap_rates(&record.generated, lexicon)?;
        Ok(Self {
            token_count: record.token_count(),
            style_ppl,
            base_ppl,
            mean_jsd_bits: mean_jsd(record)?,
            unigram_overlap,
            bigram_seen,
        })
    }
}

/// Mean, population standard deviation and coefficient of variation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    /// `std / mean`; absent when the mean is zero.
    pub cv: Option<f64>,
}

pub fn summarize(values: &[f64]) -> Result<Stat> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let cv = (mean != 0.0).then(|| std / mean);
    Ok(Stat { mean, std, cv })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub style_ppl: Stat,
    pub base_ppl: Stat,
    pub mean_jsd_bits: Stat,
    pub unigram_overlap: Stat,
    /// Over reports where the bigram rate is defined.
    pub bigram_seen: Option<Stat>,
}

pub fn aggregate(reports: &[MetricReport]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::EmptyInput);
    }
    let col = |f: fn(&MetricReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    let bigrams: Vec<f64> = reports.iter().filter_map(|r| r.bigram_seen).collect();
    Ok(Aggregate {
        count: reports.len(),
        style_ppl: summarize(&col(|r| r.style_ppl))?,
        base_ppl: summarize(&col(|r| r.base_ppl))?,
        mean_jsd_bits: summarize(&col(|r| r.mean_jsd_bits))?,
        unigram_overlap: summarize(&col(|r| r.unigram_overlap))?,
        bigram_seen: if bigrams.is_empty() { None } else { Some(summarize(&bigrams)?) },
    })
}
