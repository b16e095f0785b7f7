//! Next-token logit providers.
//!
//! A [`LogitProvider`] turns a context into a dense [`LogitVector`]. Built-in
//! providers are registered by scheme in [`ProviderRegistry`]:
//!
//! | spec             | provider                                         |
//! |------------------|--------------------------------------------------|
//! | `ref:PATH`       | order-4 [`ReferenceLm`] trained on the text file |
//! | `remote:ADDR`    | [`RemoteProvider`] over TCP (`host:port`)        |
//! | `remote:exec:CMD`| [`RemoteProvider`] over a child's stdio          |
//! | `uniform`        | all-zero logits                                  |

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ngram::{padded_context, smoothed, NgramCounts};
use crate::numeric::log_softmax;
use crate::protocol::{Endpoint, RemoteProvider};
use crate::registry::Registry;
use crate::tokenizer::{Fingerprint, TokenId, TokenizedCorpus, Vocabulary};

/// Pre-softmax scores over the whole vocabulary for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    pub values: Vec<f64>,
    pub step: usize,
}

impl LogitVector {
    /// Checks length `vocab_size` and finiteness.
    pub fn validated(values: Vec<f64>, step: usize, vocab_size: usize) -> Result<Self> {
        if values.len() != vocab_size {
            return Err(Error::Protocol(format!("expected {vocab_size} logits, got {}", values.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Protocol(format!("logit {i} is not finite")));
        }
        Ok(Self { values, step })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Reference,
    Remote,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderDescriptor {
    pub kind: ProviderKind,
    pub name: String,
    pub vocab_size: usize,
    pub fingerprint: Fingerprint,
    pub context_limit: usize,
}

impl ProviderDescriptor {
    /// Rejects contexts that are too long or carry out-of-range ids.
    pub fn check_context(&self, context: &[TokenId]) -> Result<()> {
        if context.len() > self.context_limit {
            return Err(Error::InvalidInput(format!(
                "context of {} tokens exceeds limit {}",
                context.len(),
                self.context_limit
            )));
        }
        if let Some(&bad) = context.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(Error::InvalidInput(format!("token id {bad} out of range for V={}", self.vocab_size)));
        }
        Ok(())
    }
}

pub trait LogitProvider: Send {
    fn descriptor(&self) -> &ProviderDescriptor;

    /// Scores for the token following `context`. Deterministic per context.
    fn next_logits(&mut self, context: &[TokenId]) -> Result<LogitVector>;

    /// An independent handle for another generation stream.
    fn fork(&self) -> Result<Box<dyn LogitProvider>>;
}

/// `Σ_t log softmax(next_logits(prefix + tokens[..t]))[tokens[t]]`.
pub fn sequence_logprob(provider: &mut dyn LogitProvider, tokens: &[TokenId], prefix: &[TokenId]) -> Result<f64> {
    Ok(token_logprobs(provider, tokens, prefix)?.iter().sum())
}

/// Per-token conditional log-probabilities under `provider`.
pub fn token_logprobs(provider: &mut dyn LogitProvider, tokens: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::EmptyGeneration);
    }
    let mut history = prefix.to_vec();
    let mut out = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        let logits = provider.next_logits(&history)?;
        let lp = log_softmax(&logits.values);
        let v =
            lp.get(tok as usize).copied().ok_or_else(|| Error::InvalidInput(format!("token id {tok} out of range")))?;
        out.push(v);
        history.push(tok);
    }
    Ok(out)
}

/// All-zero logits: the uniform distribution over V.
#[derive(Debug, Clone)]
pub struct UniformProvider {
    descriptor: ProviderDescriptor,
}

impl UniformProvider {
    pub fn new(vocab: &Vocabulary) -> Self {
        Self {
            descriptor: ProviderDescriptor {
                kind: ProviderKind::Uniform,
                name: "uniform".into(),
                vocab_size: vocab.len(),
                fingerprint: vocab.fingerprint(),
                context_limit: usize::MAX,
            },
        }
    }
}

impl LogitProvider for UniformProvider {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn next_logits(&mut self, context: &[TokenId]) -> Result<LogitVector> {
        self.descriptor.check_context(context)?;
        Ok(LogitVector { values: vec![0.0; self.descriptor.vocab_size], step: context.len() })
    }

    fn fork(&self) -> Result<Box<dyn LogitProvider>> {
        Ok(Box::new(self.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLmConfig {
    pub k: f64,
    /// Interpolation weights for orders 1..=4.
    pub weights: [f64; 4],
    /// Logits are `log P / temperature`.
    pub temperature: f64,
}

impl Default for ReferenceLmConfig {
    fn default() -> Self {
        Self { k: 1e-3, weights: [0.1, 0.2, 0.3, 0.4], temperature: 1.0 }
    }
}

struct ReferenceModel {
    orders: Vec<NgramCounts>,
    config: ReferenceLmConfig,
}

/// Order-4 interpolated add-k n-gram LM whose logits are its own
/// log-probabilities. Orders whose context was never seen drop out of the
/// interpolation, as in the style prior's mixture.
#[derive(Clone)]
pub struct ReferenceLm {
    model: Arc<ReferenceModel>,
    descriptor: ProviderDescriptor,
}

pub const REFERENCE_ORDER: usize = 4;

impl ReferenceLm {
    pub fn train(corpus: &TokenizedCorpus, vocab: &Vocabulary, config: ReferenceLmConfig) -> Result<Self> {
        if corpus.ids.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if !(config.k > 0.0 && config.k.is_finite()) || !(config.temperature > 0.0 && config.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("bad reference LM config {config:?}")));
        }
        if config.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || config.weights.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidConfig(format!("bad reference LM weights {:?}", config.weights)));
        }
        if let Some(&bad) = corpus.ids.iter().find(|&&id| id as usize >= vocab.len()) {
            return Err(Error::InvalidInput(format!("token id {bad} out of range")));
        }
        let orders = (1..=REFERENCE_ORDER).map(|n| NgramCounts::count(&corpus.ids, n)).collect();
        Ok(Self {
            model: Arc::new(ReferenceModel { orders, config }),
            descriptor: ProviderDescriptor {
                kind: ProviderKind::Reference,
                name: format!("reference-4gram:{}", corpus.name),
                vocab_size: vocab.len(),
                fingerprint: vocab.fingerprint(),
                context_limit: usize::MAX,
            },
        })
    }

    /// The model's next-token distribution.
    pub fn distribution(&self, context: &[TokenId]) -> Vec<f64> {
        let v = self.descriptor.vocab_size;
        let cfg = &self.model.config;
        let mut floor = 0.0;
        let mut weight_sum = 0.0;
        let mut present = Vec::with_capacity(REFERENCE_ORDER);
        for (i, counts) in self.model.orders.iter().enumerate() {
            let w = cfg.weights[i];
            let ctx = padded_context(context, i);
            if w == 0.0 {
                continue;
            }
            if let Some(cc) = counts.context(&ctx) {
                let denom = cc.total as f64 + cfg.k * v as f64;
                floor += w * smoothed(0, cc.total, cfg.k, v);
                weight_sum += w;
                present.push((w, denom, cc));
            }
        }
        if weight_sum == 0.0 {
            return vec![1.0 / v as f64; v];
        }
        let mut dist = vec![floor; v];
        for (w, denom, cc) in present {
            for (&tok, &c) in &cc.tokens {
                dist[tok as usize] += w * c as f64 / denom;
            }
        }
        for p in &mut dist {
            *p /= weight_sum;
        }
        dist
    }
}

impl LogitProvider for ReferenceLm {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn next_logits(&mut self, context: &[TokenId]) -> Result<LogitVector> {
        self.descriptor.check_context(context)?;
        let t = self.model.config.temperature;
        let values = self.distribution(context).into_iter().map(|p| p.ln() / t).collect();
        Ok(LogitVector { values, step: context.len() })
    }

    fn fork(&self) -> Result<Box<dyn LogitProvider>> {
        Ok(Box::new(self.clone()))
    }
}

pub type ProviderFactory = Box<dyn Fn(&str, &Vocabulary) -> Result<Box<dyn LogitProvider>> + Send + Sync>;

/// Scheme-keyed provider constructors; specs look like `scheme:argument`.
pub struct ProviderRegistry {
    inner: Registry<ProviderFactory>,
}

impl Default for ProviderRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl ProviderRegistry {
    pub fn empty() -> Self {
        Self { inner: Registry::new("provider") }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register(
            "ref",
            Box::new(|arg, vocab| {
                let text = std::fs::read_to_string(arg)?;
                let corpus = vocab.tokenize_corpus(arg, &text);
                Ok(Box::new(ReferenceLm::train(&corpus, vocab, ReferenceLmConfig::default())?))
            }),
        );
        reg.register(
            "remote",
            Box::new(|arg, vocab| Ok(Box::new(RemoteProvider::connect(&Endpoint::parse(arg)?, vocab)?))),
        );
        reg.register("uniform", Box::new(|_, vocab| Ok(Box::new(UniformProvider::new(vocab)))));
        reg
    }

    pub fn register(&mut self, scheme: &str, factory: ProviderFactory) -> &mut Self {
        self.inner.register(scheme, factory);
        self
    }

    pub fn schemes(&self) -> Vec<&str> {
        self.inner.names()
    }

    /// Builds the provider named by `spec` (e.g. `ref:base.txt`).
    pub fn create(&self, spec: &str, vocab: &Vocabulary) -> Result<Box<dyn LogitProvider>> {
        let (scheme, arg) = spec.split_once(':').unwrap_or((spec, ""));
        let provider = (self.inner.get(scheme)?)(arg, vocab)?;
        let desc = provider.descriptor();
        if desc.fingerprint != vocab.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: vocab.fingerprint().to_hex(),
                found: desc.fingerprint.to_hex(),
            });
        }
        Ok(provider)
    }
}
