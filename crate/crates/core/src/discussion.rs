//! Heterogeneous agent discussion: fan the message out to every enabled agent,
//! optionally iterate rounds until the agents agree, then aggregate the last
//! round into one prediction.

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::agents::{
    render_agent_prompt, render_followup_prompt, render_naive_prompt, render_summative_prompt, AgentSpec,
    ExpertIdentity, PromptError, PromptText,
};
use crate::backend::{BackendError, ChatBackend, CompletionRequest, DEFAULT_MAX_TOKENS};
use crate::label::{parse_label, LabelScheme, Message, ParsedLabel, SentimentLabel};

pub const SUMMARY_TAG: &str = "summary";
pub const NAIVE_TAG: &str = "naive";

pub fn agent_tag(agent_id: &str, round: u32) -> String {
    format!("{agent_id}/round{round}")
}

#[derive(Debug, Error)]
pub enum DiscussionError {
    #[error("message {message_id}: {source}")]
    Backend {
        message_id: String,
        #[source]
        source: BackendError,
    },
    #[error("roster has no enabled agents")]
    NoEnabledAgents,
    #[error("message {message_id}: every agent call failed in round {round}")]
    AllAgentsFailed { message_id: String, round: u32 },
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// One agent's answer in one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentOpinion {
    pub agent_id: String,
    pub round: u32,
    pub text: String,
    pub parsed: ParsedLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentFailure {
    pub agent_id: String,
    pub round: u32,
    pub error: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    #[serde(alias = "summarizer")]
    LlmSummarizer,
    #[serde(alias = "majority")]
    MajorityVote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSource {
    Summative,
    Majority,
    Naive,
    FallbackDefault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: SentimentLabel,
    pub source: PredictionSource,
}

/// Model parameters shared by every request of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RequestParams {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for RequestParams {
    fn default() -> Self {
        Self {
            model: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

impl RequestParams {
    fn request(&self, prompt: PromptText, message_id: &str, tag: impl Into<String>) -> CompletionRequest {
        let mut r = CompletionRequest::new(self.model.clone(), prompt).tagged(message_id, tag);
        r.temperature = self.temperature;
        r.max_tokens = self.max_tokens;
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscussionConfig {
    pub scheme: LabelScheme,
    pub max_rounds: u32,
    pub aggregation: Aggregation,
    pub consensus_early_stop: bool,
    /// Agent calls in flight at once within a round.
    pub parallelism: usize,
    /// Winner of a positive/negative tie under the binary scheme.
    pub binary_tie_break: SentimentLabel,
    /// Label used when nothing parseable came back under the binary scheme.
    pub binary_fallback: SentimentLabel,
    pub expert_identity: ExpertIdentity,
    pub request: RequestParams,
}

impl Default for DiscussionConfig {
    fn default() -> Self {
        Self {
            scheme: LabelScheme::Ternary,
            max_rounds: 1,
            aggregation: Aggregation::LlmSummarizer,
            consensus_early_stop: true,
            parallelism: 5,
            binary_tie_break: SentimentLabel::Negative,
            binary_fallback: SentimentLabel::Negative,
            expert_identity: ExpertIdentity::Named,
            request: RequestParams::default(),
        }
    }
}

impl DiscussionConfig {
    pub fn fallback_label(&self) -> SentimentLabel {
        match self.scheme {
            LabelScheme::Ternary => SentimentLabel::Neutral,
            LabelScheme::Binary => self.binary_fallback,
        }
    }
}

/// Full record of one run, in the JSON-lines transcript schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscussionTranscript {
    pub message_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<SentimentLabel>,
    /// Grouped by round, roster order within a round.
    pub opinions: Vec<AgentOpinion>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<AgentFailure>,
    pub summative_text: Option<String>,
    #[serde(rename = "final")]
    pub final_label: SentimentLabel,
    pub source: PredictionSource,
    pub call_count: u32,
}

impl DiscussionTranscript {
    fn new(message: &Message, prediction: Prediction) -> Self {
        Self {
            message_id: message.id().to_owned(),
            text: message.text().to_owned(),
            target: message.target().map(str::to_owned),
            gold: None,
            opinions: Vec::new(),
            failures: Vec::new(),
            summative_text: None,
            final_label: prediction.label,
            source: prediction.source,
            call_count: 0,
        }
    }

    pub fn prediction(&self) -> Prediction {
        Prediction {
            label: self.final_label,
            source: self.source,
        }
    }

    /// Number of completed rounds.
    pub fn rounds(&self) -> u32 {
        self.opinions.iter().map(|o| o.round).max().unwrap_or(0)
    }

    pub fn last_round(&self) -> Vec<&AgentOpinion> {
        let r = self.rounds();
        self.opinions.iter().filter(|o| o.round == r).collect()
    }
}

/// Common label of a round, when every parseable opinion agrees and at least
/// one parsed.
pub fn check_consensus<'a>(opinions: impl IntoIterator<Item = &'a AgentOpinion>) -> Option<SentimentLabel> {
    let mut agreed = None;
    for label in opinions.into_iter().filter_map(|o| o.parsed.label) {
        match agreed {
            None => agreed = Some(label),
            Some(l) if l != label => return None,
            Some(_) => {}
        }
    }
    agreed
}

/// Plurality over parsed labels. Ties go to neutral under the ternary scheme
/// and to `binary_tie_break` under the binary one. `None` when nothing parsed.
pub fn aggregate_majority<'a>(
    opinions: impl IntoIterator<Item = &'a AgentOpinion>,
    scheme: LabelScheme,
    binary_tie_break: SentimentLabel,
) -> Option<SentimentLabel> {
    let mut counts = [0usize; 3];
    for label in opinions.into_iter().filter_map(|o| o.parsed.label) {
        if scheme.admits(label) {
            counts[label as usize] += 1;
        }
    }
    let top = *counts.iter().max().unwrap();
    if top == 0 {
        return None;
    }
    let leaders: Vec<SentimentLabel> = SentimentLabel::ALL
        .into_iter()
        .filter(|&l| counts[l as usize] == top)
        .collect();
    Some(match (leaders.as_slice(), scheme) {
        ([only], _) => *only,
        (_, LabelScheme::Ternary) => SentimentLabel::Neutral,
        (_, LabelScheme::Binary) => binary_tie_break,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NaiveOutcome {
    pub prediction: Prediction,
    pub raw_text: String,
}

impl NaiveOutcome {
    pub fn into_transcript(self, message: &Message) -> DiscussionTranscript {
        let mut t = DiscussionTranscript::new(message, self.prediction);
        t.summative_text = Some(self.raw_text);
        t.call_count = 1;
        t
    }
}

/// Single-call baseline with the bare "what is the sentiment?" question.
pub async fn run_naive(
    message: &Message,
    backend: &dyn ChatBackend,
    config: &DiscussionConfig,
) -> Result<NaiveOutcome, DiscussionError> {
    let prompt = render_naive_prompt(message, config.scheme);
    let request = config.request.request(prompt, message.id(), NAIVE_TAG);
    let result = backend
        .complete(&request)
        .await
        .map_err(|source| DiscussionError::Backend {
            message_id: message.id().to_owned(),
            source,
        })?;
    let prediction = match parse_label(&result.text, config.scheme).label {
        Some(label) => Prediction {
            label,
            source: PredictionSource::Naive,
        },
        None => Prediction {
            label: config.fallback_label(),
            source: PredictionSource::FallbackDefault,
        },
    };
    Ok(NaiveOutcome {
        prediction,
        raw_text: result.text,
    })
}

/// Runs the full discussion for one message.
pub async fn run_had(
    message: &Message,
    roster: &[AgentSpec],
    backend: &dyn ChatBackend,
    config: &DiscussionConfig,
) -> Result<DiscussionTranscript, DiscussionError> {
    let agents: Vec<&AgentSpec> = roster.iter().filter(|a| a.enabled).collect();
    if agents.is_empty() {
        return Err(DiscussionError::NoEnabledAgents);
    }
    let scheme = config.scheme;
    let mut opinions: Vec<AgentOpinion> = Vec::new();
    let mut failures = Vec::new();
    let mut call_count = 0u32;
    let mut last_round_start = 0;

    for round in 1..=config.max_rounds.max(1) {
        let prior = &opinions[..];
        let requests = agents
            .iter()
            .map(|agent| {
                let prompt = if round == 1 {
                    render_agent_prompt(agent, message, scheme)?
                } else {
                    render_followup_prompt(agent, message, scheme, prior, roster)?
                };
                Ok(config.request.request(prompt, message.id(), agent_tag(&agent.id, round)))
            })
            .collect::<Result<Vec<_>, PromptError>>()?;

        let mut results: Vec<_> = stream::iter(requests.iter().enumerate())
            .map(|(i, req)| async move { (i, backend.complete(req).await) })
            .buffer_unordered(config.parallelism.max(1))
            .collect()
            .await;
        results.sort_by_key(|(i, _)| *i);
        call_count += agents.len() as u32;

        let before = opinions.len();
        for (i, result) in results {
            let agent_id = agents[i].id.clone();
            match result {
                Ok(r) => opinions.push(AgentOpinion {
                    parsed: parse_label(&r.text, scheme),
                    agent_id,
                    round,
                    text: r.text,
                }),
                Err(e) => {
                    warn!(message = message.id(), agent = %agent_id, round, error = %e, "agent call failed");
                    failures.push(AgentFailure {
                        agent_id,
                        round,
                        error: e.to_string(),
                    });
                }
            }
        }
        if opinions.len() == before {
            return Err(DiscussionError::AllAgentsFailed {
                message_id: message.id().to_owned(),
                round,
            });
        }
        last_round_start = before;
        if config.consensus_early_stop && check_consensus(&opinions[before..]).is_some() {
            break;
        }
    }

    let last_round = &opinions[last_round_start..];
    let majority = || aggregate_majority(last_round, scheme, config.binary_tie_break);
    let mut summative_text = None;
    let prediction = match config.aggregation {
        Aggregation::LlmSummarizer => {
            let prompt = render_summative_prompt(message, last_round, scheme, roster, config.expert_identity)?;
            let request = config.request.request(prompt, message.id(), SUMMARY_TAG);
            call_count += 1;
            let result = backend
                .complete(&request)
                .await
                .map_err(|source| DiscussionError::Backend {
                    message_id: message.id().to_owned(),
                    source,
                })?;
            let parsed = parse_label(&result.text, scheme).label;
            summative_text = Some(result.text);
            match parsed {
                Some(label) => Some(Prediction {
                    label,
                    source: PredictionSource::Summative,
                }),
                None => majority().map(|label| Prediction {
                    label,
                    source: PredictionSource::Majority,
                }),
            }
        }
        Aggregation::MajorityVote => majority().map(|label| Prediction {
            label,
            source: PredictionSource::Majority,
        }),
    }
    .unwrap_or(Prediction {
        label: config.fallback_label(),
        source: PredictionSource::FallbackDefault,
    });

    let mut transcript = DiscussionTranscript::new(message, prediction);
    transcript.opinions = opinions;
    transcript.failures = failures;
    transcript.summative_text = summative_text;
    transcript.call_count = call_count;
    Ok(transcript)
}
