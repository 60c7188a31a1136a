//! LLM story planning with conversational refinement.
//!
//! The planner asks a chat model for a story plan, retries with a corrective
//! message when the reply does not parse, and keeps the full conversation so
//! later feedback is applied with the whole history in context.

#[cfg(feature = "http-llm")]
pub mod http;

use std::collections::VecDeque;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::schema::{self, ParseMode, StoryIdea, StoryPlan};

pub const SYSTEM_PROMPT_V1: &str = include_str!("../../assets/planner_system_v1.txt");
pub const LLM_KEY_ENV: &str = "PLOTNPOLISH_LLM_KEY";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlannerError {
    #[error("LLM unavailable: {0}")]
    LlmUnavailable(String),
    #[error("plan rejected after {attempts} attempt(s): {reason}")]
    PlanRejected {
        attempts: u32,
        reason: String,
        last_output: String,
    },
    #[error("invalid planner input: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSnapshot {
    Parsed(StoryPlan),
    ParseError(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationTurn {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_snapshot: Option<PlanSnapshot>,
}

/// Alternating user/assistant turns, starting with the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub system_prompt: String,
    pub turns: Vec<ConversationTurn>,
}

impl Conversation {
    pub fn new(system_prompt: impl Into<String>) -> Self {
        Conversation {
            system_prompt: system_prompt.into(),
            turns: Vec::new(),
        }
    }

    pub fn messages(&self) -> Vec<ChatMessage> {
        std::iter::once(ChatMessage::new(Role::System, self.system_prompt.clone()))
            .chain(
                self.turns
                    .iter()
                    .map(|t| ChatMessage::new(t.role, t.content.clone())),
            )
            .collect()
    }

    pub fn latest_plan(&self) -> Option<&StoryPlan> {
        self.turns.iter().rev().find_map(|t| match &t.plan_snapshot {
            Some(PlanSnapshot::Parsed(plan)) => Some(plan),
            _ => None,
        })
    }

    pub fn user_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.role == Role::User).count()
    }

    pub fn is_well_formed(&self) -> bool {
        self.turns.iter().enumerate().all(|(i, t)| {
            t.role
                == if i % 2 == 0 {
                    Role::User
                } else {
                    Role::Assistant
                }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub model_identifier: String,
    pub system_prompt_template: String,
    pub max_retries: u32,
    pub temperature: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            model_identifier: "gpt-4".into(),
            system_prompt_template: SYSTEM_PROMPT_V1.into(),
            max_retries: 2,
            temperature: 0.7,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlannerError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(PlannerError::Validation(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// A chat-completion endpoint.
pub trait LlmClient: Send + Sync {
    fn complete(&self, messages: &[ChatMessage], config: &PlannerConfig) -> Result<String, PlannerError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub plan: StoryPlan,
    pub conversation: Conversation,
    /// Corrective re-asks needed before the reply parsed.
    pub retries: u32,
}

fn request_text(idea: &StoryIdea) -> String {
    format!(
        "Story idea: {}\nNumber of pages: {}\nStory style: {}\nVisual style: {}\n\n\
         Write exactly {} pages.",
        idea.idea_text.trim(),
        idea.page_count,
        idea.story_style.trim(),
        idea.visual_style.trim(),
        idea.page_count
    )
}

fn corrective_text(error: &str, pages: usize) -> String {
    format!(
        "That reply could not be used: {error}. Reply again with only the JSON \
         document in the required format, with exactly {pages} pages."
    )
}

/// Pulls a plan out of a model reply: tolerates code fences and prose around
/// the JSON object, attaches `idea`, and checks the page count.
pub fn extract_plan(raw: &str, idea: &StoryIdea) -> Result<StoryPlan, String> {
    let start = raw.find('{').ok_or("no JSON object in reply")?;
    let end = raw.rfind('}').ok_or("no JSON object in reply")?;
    if end < start {
        return Err("no JSON object in reply".into());
    }
    let mut plan = schema::parse_plan(&raw[start..=end], ParseMode::Lenient).map_err(|e| e.to_string())?;
    if plan.pages.len() != idea.page_count {
        return Err(format!(
            "expected {} pages, got {}",
            idea.page_count,
            plan.pages.len()
        ));
    }
    plan.apply_visual_style(&idea.visual_style);
    plan.idea = Some(idea.clone());
    plan.validate().map_err(|e| e.to_string())?;
    Ok(plan)
}

/// Sends `conversation + user_text`, re-asking on unusable replies. On success
/// the conversation gains exactly the user turn and the accepted reply.
fn ask_for_plan(
    client: &dyn LlmClient,
    conversation: &Conversation,
    user_text: String,
    idea: &StoryIdea,
    config: &PlannerConfig,
) -> Result<PlanOutcome, PlannerError> {
    config.validate()?;
    let mut messages = conversation.messages();
    messages.push(ChatMessage::new(Role::User, user_text.clone()));

    let mut retries = 0;
    loop {
        let reply = client.complete(&messages, config)?;
        match extract_plan(&reply, idea) {
            Ok(plan) => {
                let mut conversation = conversation.clone();
                conversation.turns.push(ConversationTurn {
                    role: Role::User,
                    content: user_text,
                    plan_snapshot: None,
                });
                conversation.turns.push(ConversationTurn {
                    role: Role::Assistant,
                    content: reply,
                    plan_snapshot: Some(PlanSnapshot::Parsed(plan.clone())),
                });
                return Ok(PlanOutcome {
                    plan,
                    conversation,
                    retries,
                });
            }
            Err(reason) if retries < config.max_retries => {
                tracing::warn!(retry = retries + 1, %reason, "planner reply rejected");
                retries += 1;
                messages.push(ChatMessage::new(Role::Assistant, reply));
                messages.push(ChatMessage::new(
                    Role::User,
                    corrective_text(&reason, idea.page_count),
                ));
            }
            Err(reason) => {
                return Err(PlannerError::PlanRejected {
                    attempts: retries + 1,
                    reason,
                    last_output: reply,
                })
            }
        }
    }
}

pub fn generate_plan(
    client: &dyn LlmClient,
    idea: &StoryIdea,
    config: &PlannerConfig,
) -> Result<PlanOutcome, PlannerError> {
    idea.validate()
        .map_err(|e| PlannerError::Validation(e.to_string()))?;
    let conversation = Conversation::new(config.system_prompt_template.clone());
    ask_for_plan(client, &conversation, request_text(idea), idea, config)
}

pub fn refine_plan(
    client: &dyn LlmClient,
    conversation: &Conversation,
    feedback: &str,
    config: &PlannerConfig,
) -> Result<PlanOutcome, PlannerError> {
    if feedback.trim().is_empty() {
        return Err(PlannerError::Validation("feedback is empty".into()));
    }
    let idea = conversation
        .latest_plan()
        .and_then(|p| p.idea.clone())
        .ok_or_else(|| PlannerError::Validation("conversation has no accepted plan".into()))?;
    ask_for_plan(client, conversation, feedback.trim().to_string(), &idea, config)
}

/// Plays back canned replies in order and records every request.
#[derive(Debug, Default)]
pub struct ScriptedLlm {
    replies: Mutex<VecDeque<String>>,
    requests: Mutex<Vec<Vec<ChatMessage>>>,
}

impl ScriptedLlm {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedLlm {
            replies: Mutex::new(replies.into_iter().map(Into::into).collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn push_reply(&self, reply: impl Into<String>) {
        self.replies.lock().unwrap().push_back(reply.into());
    }

    pub fn requests(&self) -> Vec<Vec<ChatMessage>> {
        self.requests.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

impl LlmClient for ScriptedLlm {
    fn complete(&self, messages: &[ChatMessage], _config: &PlannerConfig) -> Result<String, PlannerError> {
        self.requests.lock().unwrap().push(messages.to_vec());
        self.replies
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| PlannerError::LlmUnavailable("scripted replies exhausted".into()))
    }
}

/// Answers with a closure over the request; handy for stubs that echo and
/// transform the previous plan.
pub struct FnLlm<F>(pub F);

impl<F> LlmClient for FnLlm<F>
where
    F: Fn(&[ChatMessage]) -> Result<String, PlannerError> + Send + Sync,
{
    fn complete(&self, messages: &[ChatMessage], _config: &PlannerConfig) -> Result<String, PlannerError> {
        (self.0)(messages)
    }
}
