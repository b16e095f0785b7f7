//! Decoding-time style steering with n-gram priors.
//!
//! A [`StylePrior`] built from a style corpus adds sparse, λ-scaled
//! log-probability deltas to a frozen model's next-token logits. The
//! [`metrics`] module scores the result for style and fluency, and
//! [`sweep`] runs λ grids over prompts and corpora.

pub mod error;
pub mod metrics;
pub mod ngram;
pub mod numeric;
pub mod pareto;
pub mod prior;
pub mod protocol;
pub mod provider;
pub mod registry;
pub mod report;
pub mod steering;
pub mod sweep;
pub mod tokenizer;

pub use error::{Error, Result};
pub use metrics::{MetricReport, StyleLexicon};
pub use pareto::{pareto_frontier, ParetoPoint};
pub use prior::{build_prior, MixtureWeights, SmoothingConfig, StylePrior};
pub use provider::{LogitProvider, LogitVector, ProviderRegistry, ReferenceLm, ReferenceLmConfig, UniformProvider};
pub use report::{emit_reports, load_rows, CellStatus, Row, SweepReport};
pub use steering::{decode, inject, GenerationRecord, SteeringConfig};
pub use sweep::{evaluate_external, prompt_prefix_mode, run_sweep, RunOptions, SweepConfig};
pub use tokenizer::{build_vocabulary, load_external_vocab, TokenId, TokenizedCorpus, TokenizerSpec, Vocabulary};
