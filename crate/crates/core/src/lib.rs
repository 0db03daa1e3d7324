//! Heterogeneous agent discussion (HAD) for financial sentiment analysis.
//!
//! A message is sent to several LLM agents, each primed to watch for one kind
//! of classification error (irrealis mood, rhetoric, third-party opinions,
//! aspect mismatch, unstated references). Their free-text opinions are then
//! folded into one sentiment label, either by a summarizing LLM call or by a
//! deterministic majority vote.
//!
//! Modules:
//! - [`label`]: labels, schemes, messages, and the prose-to-label parser
//! - [`agents`]: the specialist roster and prompt rendering
//! - [`backend`]: chat-completion backends and the response cache
//! - [`discussion`]: the orchestrator
//! - [`datasets`]: corpus loaders, filtering, and count validation
//! - [`eval`]: metrics, evaluation runs, ablations, and reports

pub mod agents;
pub mod backend;
pub mod datasets;
pub mod discussion;
pub mod eval;
pub mod label;

pub use agents::{default_roster, AgentSpec, PromptText};
pub use backend::{ChatBackend, CompletionRequest, CompletionResult};
pub use discussion::{run_had, run_naive, Aggregation, DiscussionConfig, DiscussionTranscript, Prediction};
pub use label::{parse_label, LabelScheme, Message, ParsedLabel, SentimentLabel};
