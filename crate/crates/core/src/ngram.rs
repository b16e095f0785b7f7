//! Sliding-window n-gram counting with add-k smoothing.
//!
//! Shared by the style prior (orders 1..=3, truncated) and the reference
//! base LM (orders 1..=4, untruncated). Sequence starts are padded with the
//! begin-of-text id so every position has a full-length context.

use std::collections::HashMap;

use crate::tokenizer::{TokenId, BOT_ID};

/// Untruncated counts `C_n(context, token)` for one order.
#[derive(Debug, Clone)]
pub struct NgramCounts {
    order: usize,
    contexts: HashMap<Vec<TokenId>, ContextCounts>,
}

#[derive(Debug, Clone, Default)]
pub struct ContextCounts {
    pub total: u64,
    pub tokens: HashMap<TokenId, u64>,
}

/// `(C + k) / (N + kV)`.
#[inline]
pub fn smoothed(count: u64, total: u64, k: f64, vocab_size: usize) -> f64 {
    (count as f64 + k) / (total as f64 + k * vocab_size as f64)
}

/// Last `len` tokens of `history`, left-padded with begin-of-text.
pub fn padded_context(history: &[TokenId], len: usize) -> Vec<TokenId> {
    let take = history.len().min(len);
    let mut ctx = vec![BOT_ID; len - take];
    ctx.extend_from_slice(&history[history.len() - take..]);
    ctx
}

impl NgramCounts {
    /// Counts every order-`order` window of `ids`. Each position contributes
    /// one count, with the first `order - 1` contexts padded by begin-of-text.
    pub fn count(ids: &[TokenId], order: usize) -> Self {
        assert!(order >= 1, "n-gram order must be positive");
        let ctx_len = order - 1;
        let mut padded = vec![BOT_ID; ctx_len];
        padded.extend_from_slice(ids);
        let mut contexts: HashMap<Vec<TokenId>, ContextCounts> = HashMap::new();
        for window in padded.windows(order) {
            let (ctx, tok) = window.split_at(ctx_len);
            let entry = match contexts.get_mut(ctx) {
                Some(e) => e,
                None => contexts.entry(ctx.to_vec()).or_default(),
            };
            entry.total += 1;
            *entry.tokens.entry(tok[0]).or_insert(0) += 1;
        }
        Self { order, contexts }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn context(&self, ctx: &[TokenId]) -> Option<&ContextCounts> {
        self.contexts.get(ctx)
    }

    pub fn contexts(&self) -> impl Iterator<Item = (&[TokenId], &ContextCounts)> {
        self.contexts.iter().map(|(k, v)| (k.as_slice(), v))
    }

    pub fn count_of(&self, ctx: &[TokenId], token: TokenId) -> u64 {
        self.context(ctx).and_then(|c| c.tokens.get(&token).copied()).unwrap_or(0)
    }

    pub fn total(&self, ctx: &[TokenId]) -> u64 {
        self.context(ctx).map_or(0, |c| c.total)
    }

    /// Untruncated smoothed probability; `1/V` for an unseen context.
    pub fn prob(&self, ctx: &[TokenId], token: TokenId, k: f64, vocab_size: usize) -> f64 {
        smoothed(self.count_of(ctx, token), self.total(ctx), k, vocab_size)
    }
}
