//! Audit pipeline for omission, subordination and stereotyping biases in
//! stories written by generative language models in response to open-ended
//! prompts.
//!
//! The pipeline stages map onto modules:
//!
//! - [`prompt_corpus`]: the 100 fixed prompts (50 scenarios x 2 power conditions).
//! - [`corpus_store`]: response collection and the line-delimited instance format.
//! - [`extraction`]: names and gender references per character, with hallucination filtering.
//! - [`demography`]: gender/pair mapping, fractional race likelihood tables, baselines.
//! - [`metrics`]: representation, subordination and median racialized subordination ratios.
//! - [`stats`]: Wilson intervals, log-ratio intervals, two-tailed p-values.
//! - [`synth_oracle`]: synthetic corpora with injected ratios and brute-force oracles.
//! - [`report`]: analysis orchestration and delimited report emission.

pub mod corpus_store;
pub mod demography;
pub mod exec;
pub mod extraction;
pub mod metrics;
pub mod prompt_corpus;
pub mod report;
pub mod stats;
pub mod synth_oracle;
pub mod text;

pub use corpus_store::{CollectionPlan, CollectionReport, InstanceKey, InstanceReader, InstanceWriter, StoryInstance};
pub use demography::{BaselineDistribution, GenderCategory, LikelihoodTable, PairCategory, RaceCategory, Tables};
pub use exec::Exec;
pub use extraction::{ExtractedCharacter, LabelOutcome};
pub use metrics::{RatioEstimate, RoleCounts, Smoothing};
pub use prompt_corpus::{generate_prompts, CharacterSlot, Domain, DomainFamily, PowerCondition, PowerRole, PromptSpec};
pub use report::{analyze, emit_report, AnalysisResults, Baselines, ReportFormat, RunConfig};
pub use stats::Interval;
pub use synth_oracle::{brute_force_metrics, generate_corpus, SynthParams};
