//! The specialist roster and every prompt the pipeline sends.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discussion::AgentOpinion;
use crate::label::{LabelScheme, Message};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("agent {0} is disabled")]
    DisabledAgent(String),
    #[error("summative prompt needs at least one opinion")]
    NoOpinions,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RosterError {
    #[error("duplicate agent id `{0}`")]
    DuplicateId(String),
    #[error("agent `{0}` has an empty instruction")]
    EmptyInstruction(String),
    #[error("unknown agent id `{0}`")]
    UnknownAgent(String),
}

/// One specialist: an id such as `A1`, a short name, and the sentence that
/// steers its attention to one class of classification error.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: String,
    pub name: String,
    pub instruction: String,
    #[serde(default = "enabled_default")]
    pub enabled: bool,
}

fn enabled_default() -> bool {
    true
}

impl AgentSpec {
    pub fn new(id: impl Into<String>, name: impl Into<String>, instruction: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
            instruction: instruction.into(),
            enabled: true,
        }
    }
}

/// Rendered chat prompt.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptText {
    pub system: Option<String>,
    pub user: String,
}

impl PromptText {
    pub fn user(user: impl Into<String>) -> Self {
        Self {
            system: None,
            user: user.into(),
        }
    }
}

/// The five error-type specialists: mood, rhetoric, dependency, aspect, reference.
pub fn default_roster() -> Vec<AgentSpec> {
    vec![
        AgentSpec::new("A1", "mood", "Please pay special attention to any irrealis mood used."),
        AgentSpec::new(
            "A2",
            "rhetoric",
            "Please pay special attention to any rhetorics (sarcasm, negative assertion, etc.) used.",
        ),
        AgentSpec::new("A3", "dependency", "Please focus on the speaker sentiment, not a third party."),
        AgentSpec::new("A4", "aspect", "Please focus on the stock ticker/tag/topic, not other entities."),
        AgentSpec::new(
            "A5",
            "reference",
            "Please pay special attention to the time expressions, prices, and other unsaid facts.",
        ),
    ]
}

pub fn validate_roster(roster: &[AgentSpec]) -> Result<(), RosterError> {
    let mut seen = std::collections::HashSet::new();
    for agent in roster {
        if !seen.insert(agent.id.as_str()) {
            return Err(RosterError::DuplicateId(agent.id.clone()));
        }
        if agent.instruction.trim().is_empty() {
            return Err(RosterError::EmptyInstruction(agent.id.clone()));
        }
    }
    Ok(())
}

/// Returns a copy of `roster` with the listed agents disabled.
pub fn disable_agents(roster: &[AgentSpec], ids: &[impl AsRef<str>]) -> Result<Vec<AgentSpec>, RosterError> {
    let mut out = roster.to_vec();
    for id in ids {
        let id = id.as_ref();
        let agent = out
            .iter_mut()
            .find(|a| a.id == id)
            .ok_or_else(|| RosterError::UnknownAgent(id.to_owned()))?;
        agent.enabled = false;
    }
    Ok(out)
}

fn agent_choices(scheme: LabelScheme) -> &'static str {
    match scheme {
        LabelScheme::Ternary => "positive/negative/neutral",
        LabelScheme::Binary => "positive/negative",
    }
}

fn naive_choices(scheme: LabelScheme) -> &'static str {
    match scheme {
        LabelScheme::Ternary => "negative/neutral/positive",
        LabelScheme::Binary => "negative/positive",
    }
}

pub fn render_agent_prompt(
    agent: &AgentSpec,
    message: &Message,
    scheme: LabelScheme,
) -> Result<PromptText, PromptError> {
    if !agent.enabled {
        return Err(PromptError::DisabledAgent(agent.id.clone()));
    }
    Ok(PromptText::user(format!(
        "What is the sentiment ({}) of this message: [{}]? {}",
        agent_choices(scheme),
        message.text(),
        agent.instruction
    )))
}

/// Agent prompt for rounds after the first: the base question followed by the
/// opinions every expert gave in earlier rounds.
pub fn render_followup_prompt(
    agent: &AgentSpec,
    message: &Message,
    scheme: LabelScheme,
    prior: &[AgentOpinion],
    roster: &[AgentSpec],
) -> Result<PromptText, PromptError> {
    let mut prompt = render_agent_prompt(agent, message, scheme)?;
    if prior.is_empty() {
        return Ok(prompt);
    }
    prompt.user.push_str("\nOpinions from the experts in earlier rounds:\n");
    let mut current_round = 0;
    for op in sorted_by_roster(prior, roster) {
        if op.round != current_round {
            current_round = op.round;
            prompt.user.push_str(&format!("Round {current_round}:\n"));
        }
        prompt.user.push_str(&expert_block(op, roster, None));
        prompt.user.push('\n');
    }
    prompt
        .user
        .push_str("Taking these opinions into account, give your own updated analysis.");
    Ok(prompt)
}

pub fn render_naive_prompt(message: &Message, scheme: LabelScheme) -> PromptText {
    PromptText::user(format!(
        "{} Question: what is the sentiment? Answer with {}",
        message.text(),
        naive_choices(scheme)
    ))
}

/// How expert blocks identify their author in the summative prompt.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertIdentity {
    /// `Expert A1 (mood): ...`
    #[default]
    Named,
    /// `Expert 1: ...`
    Anonymous,
}

pub fn render_summative_prompt(
    message: &Message,
    opinions: &[AgentOpinion],
    scheme: LabelScheme,
    roster: &[AgentSpec],
    identity: ExpertIdentity,
) -> Result<PromptText, PromptError> {
    if opinions.is_empty() {
        return Err(PromptError::NoOpinions);
    }
    let blocks: Vec<String> = sorted_by_roster(opinions, roster)
        .into_iter()
        .enumerate()
        .map(|(i, op)| match identity {
            ExpertIdentity::Named => expert_block(op, roster, None),
            ExpertIdentity::Anonymous => expert_block(op, roster, Some(i + 1)),
        })
        .collect();
    Ok(PromptText::user(format!(
        "Considering this message: [{}] and additional opinions from experts [\n{}\n], what is the sentiment, {}?",
        message.text(),
        blocks.join("\n"),
        agent_choices(scheme)
    )))
}

fn expert_block(op: &AgentOpinion, roster: &[AgentSpec], ordinal: Option<usize>) -> String {
    if let Some(n) = ordinal {
        return format!("Expert {n}: {}", op.text.trim());
    }
    match roster.iter().find(|a| a.id == op.agent_id) {
        Some(agent) => format!("Expert {} ({}): {}", agent.id, agent.name, op.text.trim()),
        None => format!("Expert {}: {}", op.agent_id, op.text.trim()),
    }
}

/// Orders opinions by round, then by roster position (agent id for agents not
/// in the roster).
fn sorted_by_roster<'a>(opinions: &'a [AgentOpinion], roster: &[AgentSpec]) -> Vec<&'a AgentOpinion> {
    let position = |id: &str| roster.iter().position(|a| a.id == id).unwrap_or(usize::MAX);
    let mut out: Vec<&AgentOpinion> = opinions.iter().collect();
    out.sort_by(|a, b| {
        (a.round, position(&a.agent_id), &a.agent_id).cmp(&(b.round, position(&b.agent_id), &b.agent_id))
    });
    out
}
