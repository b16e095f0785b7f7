//! Logit injection and the decoding loop.
//!
//! At every step the base provider's logits `z` are shifted by the prior's
//! sparse deltas, `z'_i = z_i + λ·Σ_n w_n log P_n(i | context)`, and the
//! next token is picked from `z'` by a [`TokenSelector`] chosen by name.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::js_divergence_bits;
use crate::numeric::{argmax, log_softmax, softmax, softmax_with_temperature};
use crate::prior::{SparseDelta, StylePrior};
use crate::provider::{LogitProvider, LogitVector, ProviderDescriptor};
use crate::registry::Registry;
use crate::tokenizer::TokenId;

/// What each step keeps for later metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Retention {
    /// Per-step JSD and chosen-token log-probs only.
    #[default]
    Summary,
    /// Full base and steered logit vectors as well.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteeringConfig {
    pub lambda: f64,
    /// Registered selector name: `greedy` or `top-p`.
    pub mode: String,
    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub retention: Retention,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            mode: "greedy".into(),
            top_p: 0.9,
            temperature: 1.0,
            max_new_tokens: 256,
            seed: 0,
            retention: Retention::Summary,
        }
    }
}

impl SteeringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidConfig(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidConfig("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// `base + λ·delta` on the delta's keys; everything else is copied.
pub fn inject(base: &LogitVector, deltas: &SparseDelta, lambda: f64) -> LogitVector {
    let mut values = base.values.clone();
    for (tok, d) in deltas.iter() {
        let slot = &mut values[tok as usize];
        *slot += lambda * d;
    }
    LogitVector { values, step: base.step }
}

/// Nucleus sampling over a probability vector.
///
/// Tokens are ranked by descending probability (ties by ascending id); the
/// shortest prefix reaching mass `p` is renormalized and sampled.
pub fn nucleus_sample<R: Rng + ?Sized>(dist: &[f64], p: f64, rng: &mut R) -> Result<TokenId> {
    if dist.is_empty() || dist.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::NonFiniteDistribution);
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("distribution sums to {total}, not 1")));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidInput(format!("top-p threshold must be in (0, 1], got {p}")));
    }
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut cut = order.len();
    for (i, &tok) in order.iter().enumerate() {
        mass += dist[tok];
        if mass >= p {
            cut = i + 1;
            break;
        }
    }
    let nucleus = &order[..cut];
    let mass: f64 = nucleus.iter().map(|&t| dist[t]).sum();
    let mut u = rng.random::<f64>() * mass;
    for &tok in nucleus {
        u -= dist[tok];
        if u < 0.0 {
            return Ok(tok as TokenId);
        }
    }
    // rounding left u marginally non-negative: take the last positive entry
    let last = nucleus.iter().rev().find(|&&t| dist[t] > 0.0).copied().unwrap_or(nucleus[0]);
    Ok(last as TokenId)
}

/// Picks the next token from steered logits.
pub trait TokenSelector: Send {
    fn name(&self) -> &'static str;
    fn select(&mut self, steered: &[f64]) -> Result<TokenId>;
}

/// Argmax, lowest id on ties. Ignores temperature.
pub struct Greedy;

impl TokenSelector for Greedy {
    fn name(&self) -> &'static str {
        "greedy"
    }

    fn select(&mut self, steered: &[f64]) -> Result<TokenId> {
        argmax(steered).map(|i| i as TokenId).ok_or(Error::EmptyInput)
    }
}

pub struct TopP {
    p: f64,
    temperature: f64,
    rng: ChaCha8Rng,
}

impl TopP {
    pub fn new(p: f64, temperature: f64, seed: u64) -> Self {
        Self { p, temperature, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl TokenSelector for TopP {
    fn name(&self) -> &'static str {
        "top-p"
    }

    fn select(&mut self, steered: &[f64]) -> Result<TokenId> {
        let dist = softmax_with_temperature(steered, self.temperature);
        nucleus_sample(&dist, self.p, &mut self.rng)
    }
}

pub type SelectorFactory = fn(&SteeringConfig) -> Box<dyn TokenSelector>;

pub fn selector_registry() -> Registry<SelectorFactory> {
    let mut reg: Registry<SelectorFactory> = Registry::new("decode mode");
    reg.register("greedy", |_| Box::new(Greedy));
    reg.register("top-p", |c| Box::new(TopP::new(c.top_p, c.temperature, c.seed)));
    reg.register("topp", |c| Box::new(TopP::new(c.top_p, c.temperature, c.seed)));
    reg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub token: TokenId,
    /// JSD between base and steered softmax, in bits.
    pub jsd_bits: Option<f64>,
    pub base_logprob: f64,
    pub steered_logprob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_logits: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steered_logits: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt: Vec<TokenId>,
    pub generated: Vec<TokenId>,
    pub steps: Vec<StepTrace>,
    pub config: SteeringConfig,
    pub provider: ProviderDescriptor,
    /// Set when a provider error cut the generation short.
    pub aborted: Option<String>,
}

impl GenerationRecord {
    pub fn token_count(&self) -> usize {
        self.generated.len()
    }

    pub fn is_partial(&self) -> bool {
        self.aborted.is_some()
    }

    /// Prompt followed by the generated tokens.
    pub fn full_sequence(&self) -> Vec<TokenId> {
        let mut seq = self.prompt.clone();
        seq.extend_from_slice(&self.generated);
        seq
    }
}

/// The most recent `min(2, len)` ids: the injection and scoring context.
pub fn recent_context(history: &[TokenId]) -> &[TokenId] {
    &history[history.len().saturating_sub(2)..]
}

/// Runs `max_new_tokens` steps of steered decoding.
///
/// With `prior = None` (or `λ = 0`) the base logits are used unchanged.
/// Provider failures stop the loop and are reported in
/// [`GenerationRecord::aborted`]; precondition failures are returned as errors.
pub fn decode(
    provider: &mut dyn LogitProvider,
    prior: Option<&StylePrior>,
    prompt: &[TokenId],
    config: &SteeringConfig,
) -> Result<GenerationRecord> {
    config.validate()?;
    if prompt.is_empty() {
        return Err(Error::InvalidInput("prompt must not be empty".into()));
    }
    let descriptor = provider.descriptor().clone();
    if let Some(p) = prior {
        if p.fingerprint() != descriptor.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: p.fingerprint().to_hex(),
                found: descriptor.fingerprint.to_hex(),
            });
        }
    }
    let mut selector = (selector_registry().get(&config.mode)?)(config);
    let mut history = prompt.to_vec();
    let mut generated = Vec::with_capacity(config.max_new_tokens);
    let mut steps = Vec::with_capacity(config.max_new_tokens);
    let mut aborted = None;

    for step in 0..config.max_new_tokens {
        let base = match provider.next_logits(&history) {
            Ok(l) => l,
            Err(e) => {
                tracing::warn!(step, "provider failed, aborting generation: {e}");
                aborted = Some(e.to_string());
                break;
            }
        };
        let steered = match prior {
            Some(p) => inject(&base, &p.injection_terms(recent_context(&history)), config.lambda),
            None => base.clone(),
        };
        let token = selector.select(&steered.values)?;
        steps.push(step_trace(token, &base, steered, config.retention));
        generated.push(token);
        history.push(token);
    }

    Ok(GenerationRecord {
        prompt: prompt.to_vec(),
        generated,
        steps,
        config: config.clone(),
        provider: descriptor,
        aborted,
    })
}

/// Scores a fixed continuation as if it had been decoded: each step records
/// the base and steered distributions at that position. The record's config
/// carries `lambda`; its mode is left at the default.
pub fn teacher_force(
    provider: &mut dyn LogitProvider,
    prior: Option<&StylePrior>,
    prompt: &[TokenId],
    tokens: &[TokenId],
    lambda: f64,
    retention: Retention,
) -> Result<GenerationRecord> {
    let config = SteeringConfig { lambda, max_new_tokens: tokens.len().max(1), retention, ..Default::default() };
    config.validate()?;
    if tokens.is_empty() {
        return Err(Error::EmptyGeneration);
    }
    let descriptor = provider.descriptor().clone();
    let mut history = prompt.to_vec();
    let mut steps = Vec::with_capacity(tokens.len());
    for &token in tokens {
        let base = provider.next_logits(&history)?;
        let steered = match prior {
            Some(p) => inject(&base, &p.injection_terms(recent_context(&history)), lambda),
            None => base.clone(),
        };
        steps.push(step_trace(token, &base, steered, retention));
        history.push(token);
    }
    Ok(GenerationRecord {
        prompt: prompt.to_vec(),
        generated: tokens.to_vec(),
        steps,
        config,
        provider: descriptor,
        aborted: None,
    })
}

fn step_trace(token: TokenId, base: &LogitVector, steered: LogitVector, retention: Retention) -> StepTrace {
    let full = retention == Retention::Full;
    StepTrace {
        token,
        jsd_bits: Some(js_divergence_bits(&softmax(&base.values), &softmax(&steered.values))),
        base_logprob: log_softmax(&base.values)[token as usize],
        steered_logprob: log_softmax(&steered.values)[token as usize],
        base_logits: full.then(|| base.values.clone()),
        steered_logits: full.then_some(steered.values),
    }
}
