//! Interpolated 1..=3-gram style prior.
//!
//! Each order keeps, per context, the top-K tokens by smoothed probability
//! `(C + k) / (N + kV)` while `N` keeps the untruncated context total.
//! Tokens truncated out of a context get the `C = 0` floor from [`StylePrior::prob`]
//! and contribute nothing to [`StylePrior::injection_terms`].
//!
//! # File layout
//!
//! Little-endian throughout:
//!
//! ```text
//! "NGSP" | version u16 | k f64 | K u32 | V u32 | fingerprint [u8; 8] | w1 w2 w3 f64
//! for n in 1..=3:
//!     context count u64
//!     per context (sorted by ids): n-1 × id u32 | N u64 | entry count u16
//!         per entry: id u32 | count u64 | log-prob f64
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ngram::{smoothed, NgramCounts};
use crate::tokenizer::{Fingerprint, TokenId, TokenizedCorpus, Vocabulary};

pub const MAGIC: &[u8; 4] = b"NGSP";
pub const FORMAT_VERSION: u16 = 1;
pub const MAX_ORDER: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    /// Add-k constant.
    pub k: f64,
    /// Entries kept per context.
    pub top_k: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { k: 1e-3, top_k: 512 }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k.is_finite() && self.k > 0.0) {
            return Err(Error::InvalidConfig(format!("smoothing k must be > 0, got {}", self.k)));
        }
        if self.top_k == 0 || self.top_k > u16::MAX as usize {
            return Err(Error::InvalidConfig(format!("top_k must be in 1..={}, got {}", u16::MAX, self.top_k)));
        }
        Ok(())
    }
}

/// Per-order mixture weights `w_1, w_2, w_3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights(pub [f64; MAX_ORDER]);

impl Default for MixtureWeights {
    fn default() -> Self {
        Self([0.1, 0.3, 0.6])
    }
}

impl MixtureWeights {
    pub fn new(w1: f64, w2: f64, w3: f64) -> Result<Self> {
        let w = Self([w1, w2, w3]);
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(format!("mixture weights must be finite and >= 0: {:?}", self.0)));
        }
        if self.0.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidConfig("at least one mixture weight must be > 0".into()));
        }
        Ok(())
    }

    /// Weight of order `n` (1-based).
    pub fn weight(&self, order: usize) -> f64 {
        self.0[order - 1]
    }
}

/// One stored `(token, C, log P)` entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub token: TokenId,
    pub count: u64,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextTable {
    /// Untruncated `N_n(context)`.
    pub total: u64,
    /// At most K entries, descending probability, ties by ascending id.
    pub entries: Vec<Entry>,
}

impl ContextTable {
    fn find(&self, token: TokenId) -> Option<&Entry> {
        self.entries.iter().find(|e| e.token == token)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgramTable {
    order: usize,
    contexts: HashMap<Vec<TokenId>, ContextTable>,
}

impl NgramTable {
    fn from_counts(counts: &NgramCounts, k: f64, vocab_size: usize, top_k: usize) -> Self {
        let mut contexts = HashMap::new();
        for (ctx, cc) in counts.contexts() {
            let mut ranked: Vec<(TokenId, u64)> = cc.tokens.iter().map(|(&t, &c)| (t, c)).collect();
            // probability is monotone in the count for a fixed context
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.truncate(top_k);
            let entries = ranked
                .into_iter()
                .map(|(token, count)| Entry { token, count, logprob: smoothed(count, cc.total, k, vocab_size).ln() })
                .collect();
            contexts.insert(ctx.to_vec(), ContextTable { total: cc.total, entries });
        }
        Self { order: counts.order(), contexts }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn context(&self, ctx: &[TokenId]) -> Option<&ContextTable> {
        self.contexts.get(ctx)
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    /// Contexts in ascending lexicographic id order.
    pub fn sorted_contexts(&self) -> Vec<(&[TokenId], &ContextTable)> {
        let mut out: Vec<_> = self.contexts.iter().map(|(k, v)| (k.as_slice(), v)).collect();
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }
}

/// Sparse additive logit deltas keyed by token id, sorted by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseDelta {
    entries: Vec<(TokenId, f64)>,
}

impl SparseDelta {
    pub fn from_map(map: HashMap<TokenId, f64>) -> Self {
        let mut entries: Vec<_> = map.into_iter().collect();
        entries.sort_unstable_by_key(|e| e.0);
        Self { entries }
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, f64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn get(&self, token: TokenId) -> Option<f64> {
        self.entries.binary_search_by_key(&token, |e| e.0).ok().map(|i| self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Immutable interpolated n-gram style prior.
#[derive(Debug, Clone, PartialEq)]
pub struct StylePrior {
    tables: [NgramTable; MAX_ORDER],
    weights: MixtureWeights,
    smoothing: SmoothingConfig,
    vocab_size: usize,
    fingerprint: Fingerprint,
}

/// Builds the per-order tables from a tokenized corpus.
pub fn build_prior(
    corpus: &TokenizedCorpus,
    vocab: &Vocabulary,
    smoothing: SmoothingConfig,
    weights: MixtureWeights,
) -> Result<StylePrior> {
    smoothing.validate()?;
    weights.validate()?;
    if corpus.token_count() < 3 {
        return Err(Error::CorpusTooSmall { len: corpus.token_count() });
    }
    let vocab_size = vocab.len();
    if let Some(&bad) = corpus.ids.iter().find(|&&id| id as usize >= vocab_size) {
        return Err(Error::InvalidInput(format!("token id {bad} out of range for V={vocab_size}")));
    }
    let table = |order| {
        let counts = NgramCounts::count(&corpus.ids, order);
        NgramTable::from_counts(&counts, smoothing.k, vocab_size, smoothing.top_k)
    };
    let tables = [table(1), table(2), table(3)];
    tracing::debug!(
        corpus = %corpus.name,
        tokens = corpus.token_count(),
        contexts = ?tables.iter().map(NgramTable::len).collect::<Vec<_>>(),
        "built style prior"
    );
    Ok(StylePrior { tables, weights, smoothing, vocab_size, fingerprint: vocab.fingerprint() })
}

impl StylePrior {
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn weights(&self) -> MixtureWeights {
        self.weights
    }

    pub fn smoothing(&self) -> SmoothingConfig {
        self.smoothing
    }

    /// Table for order `n` in 1..=3.
    pub fn table(&self, order: usize) -> &NgramTable {
        &self.tables[order - 1]
    }

    /// The order-`n` context (last `n - 1` ids) of `context`, if long enough.
    fn order_context(context: &[TokenId], order: usize) -> Option<&[TokenId]> {
        let need = order - 1;
        (context.len() >= need).then(|| &context[context.len() - need..])
    }

    fn check_order(order: usize) -> Result<()> {
        if (1..=MAX_ORDER).contains(&order) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("n-gram order must be 1..=3, got {order}")))
        }
    }

    /// Stored log-probability for `(context, token)` at `order`, if kept.
    pub fn stored_logprob(&self, order: usize, context: &[TokenId], token: TokenId) -> Option<f64> {
        self.table(order).context(context)?.find(token).map(|e| e.logprob)
    }

    /// `P_n(token | context)`; `context` must hold exactly `n - 1` ids.
    pub fn prob(&self, order: usize, context: &[TokenId], token: TokenId) -> Result<f64> {
        Self::check_order(order)?;
        if context.len() != order - 1 {
            return Err(Error::ContextLength { order, expected: order - 1, got: context.len() });
        }
        Ok(self.prob_unchecked(order, context, token))
    }

    fn prob_unchecked(&self, order: usize, context: &[TokenId], token: TokenId) -> f64 {
        let k = self.smoothing.k;
        match self.table(order).context(context) {
            Some(ct) => {
                let count = ct.find(token).map_or(0, |e| e.count);
                smoothed(count, ct.total, k, self.vocab_size)
            }
            None => 1.0 / self.vocab_size as f64,
        }
    }

    /// `log P_mix(token | context)` over the orders whose context was seen.
    ///
    /// `context` holds the most recent (at most two) ids. Orders with a zero
    /// weight or an unseen context drop out of both numerator and
    /// denominator; with none left the result is `log(1/V)`.
    pub fn mix_logprob(&self, context: &[TokenId], token: TokenId) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for order in 1..=MAX_ORDER {
            let w = self.weights.weight(order);
            let Some(ctx) = Self::order_context(context, order) else {
                continue;
            };
            if w == 0.0 || self.table(order).context(ctx).is_none() {
                continue;
            }
            num += w * self.prob_unchecked(order, ctx, token);
            den += w;
        }
        if den == 0.0 {
            -(self.vocab_size as f64).ln()
        } else {
            (num / den).ln()
        }
    }

    /// Sparse log-linear logit deltas `Σ_n w_n log P_n(t | context)` over
    /// stored entries of orders with a non-zero weight.
    pub fn injection_terms(&self, context: &[TokenId]) -> SparseDelta {
        let mut acc: HashMap<TokenId, f64> = HashMap::new();
        for order in 1..=MAX_ORDER {
            let w = self.weights.weight(order);
            if w == 0.0 {
                continue;
            }
            let Some(ct) = Self::order_context(context, order).and_then(|c| self.table(order).context(c)) else {
                continue;
            };
            for e in &ct.entries {
                *acc.entry(e.token).or_insert(0.0) += w * e.logprob;
            }
        }
        SparseDelta::from_map(acc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.smoothing.k.to_le_bytes())?;
        w.write_all(&(self.smoothing.top_k as u32).to_le_bytes())?;
        w.write_all(&(self.vocab_size as u32).to_le_bytes())?;
        w.write_all(&self.fingerprint.0)?;
        for wt in self.weights.0 {
            w.write_all(&wt.to_le_bytes())?;
        }
        for table in &self.tables {
            let contexts = table.sorted_contexts();
            w.write_all(&(contexts.len() as u64).to_le_bytes())?;
            for (ctx, ct) in contexts {
                for id in ctx {
                    w.write_all(&id.to_le_bytes())?;
                }
                w.write_all(&ct.total.to_le_bytes())?;
                w.write_all(&(ct.entries.len() as u16).to_le_bytes())?;
                for e in &ct.entries {
                    w.write_all(&e.token.to_le_bytes())?;
                    w.write_all(&e.count.to_le_bytes())?;
                    w.write_all(&e.logprob.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Loads a prior, checking its fingerprint against `expected` if given.
    pub fn load(path: impl AsRef<Path>, expected: Option<Fingerprint>) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, expected)
    }

    pub fn from_bytes(bytes: &[u8], expected: Option<Fingerprint>) -> Result<Self> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::PriorFormat("bad magic".into()));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion { found: version, expected: FORMAT_VERSION });
        }
        let k = r.f64()?;
        let top_k = r.u32()? as usize;
        let vocab_size = r.u32()? as usize;
        let fingerprint = Fingerprint(r.take(8)?.try_into().unwrap());
        if let Some(exp) = expected {
            if exp != fingerprint {
                return Err(Error::FingerprintMismatch { expected: exp.to_hex(), found: fingerprint.to_hex() });
            }
        }
        let weights = MixtureWeights([r.f64()?, r.f64()?, r.f64()?]);
        let smoothing = SmoothingConfig { k, top_k };
        smoothing.validate().map_err(|e| Error::PriorFormat(e.to_string()))?;
        weights.validate().map_err(|e| Error::PriorFormat(e.to_string()))?;
        if vocab_size < 2 {
            return Err(Error::PriorFormat(format!("vocabulary size {vocab_size} < 2")));
        }
        let check_id = |id: TokenId| {
            if (id as usize) < vocab_size {
                Ok(id)
            } else {
                Err(Error::PriorFormat(format!("token id {id} out of range for V={vocab_size}")))
            }
        };
        let mut tables = Vec::with_capacity(MAX_ORDER);
        for order in 1..=MAX_ORDER {
            let n_contexts = r.u64()?;
            let mut contexts = HashMap::new();
            for _ in 0..n_contexts {
                let mut ctx = Vec::with_capacity(order - 1);
                for _ in 0..order - 1 {
                    ctx.push(check_id(r.u32()?)?);
                }
                let total = r.u64()?;
                let n_entries = r.u16()? as usize;
                if n_entries > top_k {
                    return Err(Error::PriorFormat(format!("context has {n_entries} entries, K={top_k}")));
                }
                let mut entries = Vec::with_capacity(n_entries);
                for _ in 0..n_entries {
                    entries.push(Entry { token: check_id(r.u32()?)?, count: r.u64()?, logprob: r.f64()? });
                }
                if contexts.insert(ctx, ContextTable { total, entries }).is_some() {
                    return Err(Error::PriorFormat(format!("duplicate context in order {order}")));
                }
            }
            tables.push(NgramTable { order, contexts });
        }
        if r.pos != bytes.len() {
            return Err(Error::PriorFormat(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let tables: [NgramTable; MAX_ORDER] = tables.try_into().unwrap();
        Ok(Self { tables, weights, smoothing, vocab_size, fingerprint })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Truncated)?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
