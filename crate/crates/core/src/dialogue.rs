//! Dialogue model for tool-augmented assistants.
//!
//! A [`Trajectory`] is an ordered list of user/assistant/tool messages plus the
//! tool list offered to the assistant. Walking a trajectory through the
//! five-state machine yields its state string (`1→3→4→5` for a direct call,
//! `1→2→3→4→5` after one slot-filling exchange, `1→1` for a rejection).
//!
//! Plain-text assistant messages carry no structural marker, so they are
//! classified by position: before any tool response they are slot-filling
//! questions, unless they end the dialogue (a rejection); after a tool response
//! they are completion messages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub type JsonMap = serde_json::Map<String, Value>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DialogueError {
    #[error("illegal transition at message {index}: {event} in state {state}")]
    IllegalTransition {
        index: usize,
        state: DialogueState,
        event: &'static str,
    },
    #[error("trajectory has no assistant message")]
    Unclassifiable,
    #[error("tool `{0}` declares required fields that are not properties")]
    MalformedTool(String),
    #[error("tool call at message {index} has invalid arguments: {reason}")]
    InvalidArguments { index: usize, reason: String },
}

/// The five internal states of a tool-augmented assistant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum DialogueState {
    Initial = 1,
    ToolSelectedIncomplete = 2,
    ToolSelectedComplete = 3,
    WaitForToolResponse = 4,
    Complete = 5,
}

impl DialogueState {
    pub const ALL: [DialogueState; 5] = [
        DialogueState::Initial,
        DialogueState::ToolSelectedIncomplete,
        DialogueState::ToolSelectedComplete,
        DialogueState::WaitForToolResponse,
        DialogueState::Complete,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(usize::from(code).checked_sub(1)?).copied()
    }
}

impl fmt::Display for DialogueState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

/// Renders post-states as a state string, starting from the implicit initial state.
pub fn render_states(post_states: &[DialogueState]) -> String {
    let mut out = String::from("1");
    for state in post_states {
        out.push('→');
        out.push_str(&state.code().to_string());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

/// One function invocation inside an assistant message. `arguments` stays a
/// JSON-encoded string, exactly as it appears in the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolCall {
    pub id: Option<String>,
    pub call_type: String,
    pub function_name: String,
    pub arguments: String,
    /// Unrecognised keys (and explicit nulls) kept for round-tripping.
    pub extra: JsonMap,
}

impl ToolCall {
    pub fn new(function_name: impl Into<String>, arguments: &JsonMap) -> Self {
        let mut extra = JsonMap::new();
        extra.insert("id".into(), Value::Null);
        Self {
            id: None,
            call_type: "function".into(),
            function_name: function_name.into(),
            arguments: Value::Object(arguments.clone()).to_string(),
            extra,
        }
    }

    pub fn parsed_arguments(&self) -> Result<JsonMap, String> {
        match serde_json::from_str::<Value>(&self.arguments) {
            Ok(Value::Object(map)) => Ok(map),
            Ok(_) => Err("arguments are not a JSON object".into()),
            Err(err) => Err(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub role: Role,
    pub content: String,
    pub tool_calls: Option<Vec<ToolCall>>,
    pub tool_call_id: Option<String>,
    pub name: Option<String>,
    pub extra: JsonMap,
}

impl Message {
    fn plain(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_calls: None,
            tool_call_id: None,
            name: None,
            extra: JsonMap::new(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::plain(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::plain(Role::Assistant, content)
    }

    pub fn assistant_call(content: impl Into<String>, call: ToolCall) -> Self {
        let mut msg = Self::plain(Role::Assistant, content);
        msg.tool_calls = Some(vec![call]);
        msg
    }

    /// Tool response; `content` should be a serialized JSON object.
    pub fn tool(name: impl Into<String>, content: impl Into<String>) -> Self {
        let mut msg = Self::plain(Role::Tool, content);
        msg.name = Some(name.into());
        msg.extra.insert("tool_call_id".into(), Value::Null);
        msg
    }

    pub fn has_tool_calls(&self) -> bool {
        self.tool_calls.as_ref().is_some_and(|calls| !calls.is_empty())
    }

    pub fn first_tool_call(&self) -> Option<&ToolCall> {
        self.tool_calls.as_ref().and_then(|calls| calls.first())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSpec {
    pub param_type: Option<String>,
    pub description: Option<String>,
    pub extra: JsonMap,
}

impl ParamSpec {
    pub fn new(param_type: &str, description: &str) -> Self {
        Self {
            param_type: Some(param_type.into()),
            description: Some(description.into()),
            extra: JsonMap::new(),
        }
    }
}

/// A callable tool. JSON layout: `{type, function: {name, description, parameters}}`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub properties: BTreeMap<String, ParamSpec>,
    pub required: Vec<String>,
    /// Unrecognised keys at the outer, `function` and `parameters` levels.
    pub extra: JsonMap,
    pub function_extra: JsonMap,
    pub parameters_extra: JsonMap,
}

impl ToolSpec {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            ..Self::default()
        }
    }

    pub fn with_param(mut self, name: &str, spec: ParamSpec, required: bool) -> Self {
        self.properties.insert(name.to_string(), spec);
        if required {
            self.required.push(name.to_string());
        }
        self
    }

    pub fn is_well_formed(&self) -> bool {
        self.required.iter().all(|r| self.properties.contains_key(r))
    }

    /// Description used when asking for a field, falling back to the field name.
    pub fn field_description(&self, field: &str) -> String {
        self.properties
            .get(field)
            .and_then(|p| p.description.clone())
            .filter(|d| !d.trim().is_empty())
            .unwrap_or_else(|| field.replace('_', " "))
    }
}

/// A dialogue plus the tool list. Corpus records use the same type; `extra`
/// carries unknown top-level keys.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub messages: Vec<Message>,
    pub tools: Vec<ToolSpec>,
    pub extra: JsonMap,
}

impl Trajectory {
    pub fn new(messages: Vec<Message>, tools: Vec<ToolSpec>) -> Self {
        Self {
            messages,
            tools,
            extra: JsonMap::new(),
        }
    }

    pub fn tool(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.iter().find(|t| t.name == name)
    }

    pub fn has_tool(&self, name: &str) -> bool {
        self.tool(name).is_some()
    }

    /// Index and call of the first assistant tool call.
    pub fn first_tool_call(&self) -> Option<(usize, &ToolCall)> {
        self.messages
            .iter()
            .enumerate()
            .find_map(|(i, m)| m.first_tool_call().map(|c| (i, c)))
    }

    pub fn first_user_query(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }

    pub fn assistant_indices(&self) -> Vec<usize> {
        self.messages
            .iter()
            .enumerate()
            .filter(|(_, m)| m.role == Role::Assistant)
            .map(|(i, _)| i)
            .collect()
    }
}

pub type CorpusRecord = Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryType {
    Type1,
    Type2,
    Type3,
}

impl fmt::Display for QueryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = match self {
            QueryType::Type1 => 1,
            QueryType::Type2 => 2,
            QueryType::Type3 => 3,
        };
        write!(f, "Type {n}")
    }
}

/// Kind of an assistant action; the order is the greedy tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    AskSlot,
    ToolCall,
    Reject,
    Complete,
}

impl ActionKind {
    pub const ALL: [ActionKind; 4] = [
        ActionKind::AskSlot,
        ActionKind::ToolCall,
        ActionKind::Reject,
        ActionKind::Complete,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AssistantAction {
    AskSlot { target_fields: Vec<String> },
    ToolCall { name: String, arguments: JsonMap },
    Reject,
    Complete,
}

impl AssistantAction {
    pub fn kind(&self) -> ActionKind {
        match self {
            AssistantAction::AskSlot { .. } => ActionKind::AskSlot,
            AssistantAction::ToolCall { .. } => ActionKind::ToolCall,
            AssistantAction::Reject => ActionKind::Reject,
            AssistantAction::Complete => ActionKind::Complete,
        }
    }
}

// ---------------------------------------------------------------------------
// Slot location
// ---------------------------------------------------------------------------

fn number_tokens() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?").expect("static regex"))
}

/// Whether an argument value is structurally present in `text`: strings by
/// exact substring, numbers by numeric token equality (`70` matches `70.0`),
/// arrays when every element is present.
pub fn value_located(value: &Value, text: &str) -> bool {
    match value {
        Value::String(s) => !s.is_empty() && text.contains(s.as_str()),
        Value::Number(n) => match n.as_f64() {
            Some(target) => number_tokens()
                .find_iter(text)
                .filter_map(|m| m.as_str().parse::<f64>().ok())
                .any(|v| v == target),
            None => false,
        },
        Value::Bool(b) => text
            .split(|c: char| !c.is_alphanumeric())
            .any(|w| w == if *b { "true" } else { "false" }),
        Value::Array(items) => !items.is_empty() && items.iter().all(|v| value_located(v, text)),
        Value::Null | Value::Object(_) => false,
    }
}

/// Byte ranges in `text` where `value` is located (used to delete stated values).
pub fn value_spans(value: &Value, text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    match value {
        Value::String(s) if !s.is_empty() => {
            spans.extend(text.match_indices(s.as_str()).map(|(i, m)| (i, i + m.len())));
        }
        Value::Number(n) => {
            if let Some(target) = n.as_f64() {
                spans.extend(
                    number_tokens()
                        .find_iter(text)
                        .filter(|m| m.as_str().parse::<f64>().ok() == Some(target))
                        .map(|m| (m.start(), m.end())),
                );
            }
        }
        Value::Bool(b) => {
            let word = if *b { "true" } else { "false" };
            spans.extend(text.match_indices(word).map(|(i, m)| (i, i + m.len())));
        }
        Value::Array(items) => {
            for item in items {
                spans.extend(value_spans(item, text));
            }
        }
        _ => {}
    }
    spans.sort_unstable();
    spans
}

/// Two argument values are equal after JSON parsing; numbers compare numerically.
pub fn values_equal(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => match (x.as_f64(), y.as_f64()) {
            (Some(x), Some(y)) => x == y,
            _ => x == y,
        },
        (Value::Array(x), Value::Array(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(a, b)| values_equal(a, b))
        }
        (Value::Object(x), Value::Object(y)) => arguments_equal(x, y),
        _ => a == b,
    }
}

pub fn arguments_equal(a: &JsonMap, b: &JsonMap) -> bool {
    a.len() == b.len()
        && a
            .iter()
            .all(|(k, v)| b.get(k).is_some_and(|w| values_equal(v, w)))
}

/// Returns `tool.required \ keys(stated_args)` in declared order.
pub fn missing_required_fields(
    stated_args: &JsonMap,
    tool: &ToolSpec,
) -> Result<Vec<String>, DialogueError> {
    if !tool.is_well_formed() {
        return Err(DialogueError::MalformedTool(tool.name.clone()));
    }
    Ok(tool
        .required
        .iter()
        .filter(|field| !stated_args.contains_key(field.as_str()))
        .cloned()
        .collect())
}

/// The call a dialogue is about: the first tool call in the trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetCall {
    pub name: String,
    pub arguments: JsonMap,
}

impl TargetCall {
    pub fn of(traj: &Trajectory) -> Option<TargetCall> {
        let (_, call) = traj.first_tool_call()?;
        Some(TargetCall {
            name: call.function_name.clone(),
            arguments: call.parsed_arguments().unwrap_or_default(),
        })
    }

    /// The subset of the target arguments whose values appear in any of the texts.
    pub fn stated_args<'a>(&self, user_texts: impl IntoIterator<Item = &'a str>) -> JsonMap {
        let texts: Vec<&str> = user_texts.into_iter().collect();
        self.arguments
            .iter()
            .filter(|(_, v)| texts.iter().any(|t| value_located(v, t)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

/// User message texts strictly before `end`.
pub fn user_texts_before(traj: &Trajectory, end: usize) -> impl Iterator<Item = &str> {
    traj.messages[..end.min(traj.messages.len())]
        .iter()
        .filter(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
}

/// Required fields of the target tool still unstated before message `end`.
/// Empty when the target tool is not in the tool list.
pub fn missing_before(traj: &Trajectory, target: Option<&TargetCall>, end: usize) -> Vec<String> {
    let Some(target) = target else {
        return Vec::new();
    };
    let Some(tool) = traj.tool(&target.name) else {
        return Vec::new();
    };
    let stated = target.stated_args(user_texts_before(traj, end));
    missing_required_fields(&stated, tool).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// State machine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum DialogueEvent {
    User,
    Assistant(AssistantAction),
    ToolResponse,
}

impl DialogueEvent {
    fn label(&self) -> &'static str {
        match self {
            DialogueEvent::User => "user message",
            DialogueEvent::ToolResponse => "tool response",
            DialogueEvent::Assistant(AssistantAction::AskSlot { .. }) => "slot-filling question",
            DialogueEvent::Assistant(AssistantAction::ToolCall { .. }) => "tool call",
            DialogueEvent::Assistant(AssistantAction::Reject) => "rejection",
            DialogueEvent::Assistant(AssistantAction::Complete) => "completion",
        }
    }
}

/// Applies one event and returns the new state plus the post-states it emits.
pub fn transition(
    state: DialogueState,
    event: &DialogueEvent,
    index: usize,
) -> Result<(DialogueState, Vec<DialogueState>), DialogueError> {
    use DialogueState::*;
    let illegal = || DialogueError::IllegalTransition {
        index,
        state,
        event: event.label(),
    };
    match (event, state) {
        (DialogueEvent::User, Initial | ToolSelectedIncomplete) => Ok((state, vec![])),
        (DialogueEvent::Assistant(AssistantAction::Reject), Initial) => Ok((Initial, vec![Initial])),
        (
            DialogueEvent::Assistant(AssistantAction::AskSlot { .. }),
            Initial | ToolSelectedIncomplete,
        ) => Ok((ToolSelectedIncomplete, vec![ToolSelectedIncomplete])),
        (
            DialogueEvent::Assistant(AssistantAction::ToolCall { .. }),
            Initial | ToolSelectedIncomplete,
        ) => Ok((
            WaitForToolResponse,
            vec![ToolSelectedComplete, WaitForToolResponse],
        )),
        (DialogueEvent::ToolResponse, WaitForToolResponse) => Ok((Complete, vec![Complete])),
        (DialogueEvent::Assistant(AssistantAction::Complete), Complete) => Ok((Complete, vec![])),
        _ => Err(illegal()),
    }
}

/// Walks a sequence of events from the initial state, returning post-states.
pub fn infer_states_from_events(events: &[DialogueEvent]) -> Result<Vec<DialogueState>, DialogueError> {
    let mut state = DialogueState::Initial;
    let mut out = Vec::new();
    for (index, event) in events.iter().enumerate() {
        let (next, emitted) = transition(state, event, index)?;
        state = next;
        out.extend(emitted);
    }
    Ok(out)
}

/// Classifies every assistant message of the trajectory, by message index.
pub fn assistant_actions(traj: &Trajectory) -> Result<Vec<(usize, AssistantAction)>, DialogueError> {
    let target = TargetCall::of(traj);
    let mut seen_tool_response = false;
    let mut out = Vec::new();
    let last = traj.messages.len().saturating_sub(1);
    for (i, msg) in traj.messages.iter().enumerate() {
        match msg.role {
            Role::Tool => seen_tool_response = true,
            Role::User => {}
            Role::Assistant => {
                let action = if let Some(call) = msg.first_tool_call() {
                    let arguments = call
                        .parsed_arguments()
                        .map_err(|reason| DialogueError::InvalidArguments { index: i, reason })?;
                    AssistantAction::ToolCall {
                        name: call.function_name.clone(),
                        arguments,
                    }
                } else if seen_tool_response {
                    AssistantAction::Complete
                } else if i == last {
                    AssistantAction::Reject
                } else {
                    AssistantAction::AskSlot {
                        target_fields: missing_before(traj, target.as_ref(), i),
                    }
                };
                out.push((i, action));
            }
        }
    }
    Ok(out)
}

fn events_of(traj: &Trajectory) -> Result<Vec<DialogueEvent>, DialogueError> {
    let mut actions = assistant_actions(traj)?.into_iter().peekable();
    let mut events = Vec::with_capacity(traj.messages.len());
    for (i, msg) in traj.messages.iter().enumerate() {
        events.push(match msg.role {
            Role::User => DialogueEvent::User,
            Role::Tool => DialogueEvent::ToolResponse,
            Role::Assistant => {
                let (_, action) = actions.next().expect("one action per assistant message");
                debug_assert!(actions.peek().is_none_or(|(j, _)| *j > i));
                DialogueEvent::Assistant(action)
            }
        });
    }
    Ok(events)
}

/// Post-states after every assistant/tool event, starting implicitly at state 1.
pub fn infer_state_sequence(traj: &Trajectory) -> Result<Vec<DialogueState>, DialogueError> {
    infer_states_from_events(&events_of(traj)?)
}

/// `prefix_states[i]` is the state after messages `[..i]`; length is `messages.len() + 1`.
pub fn prefix_states(traj: &Trajectory) -> Result<Vec<DialogueState>, DialogueError> {
    let events = events_of(traj)?;
    let mut state = DialogueState::Initial;
    let mut out = Vec::with_capacity(events.len() + 1);
    out.push(state);
    for (index, event) in events.iter().enumerate() {
        state = transition(state, event, index)?.0;
        out.push(state);
    }
    Ok(out)
}

pub fn state_string(traj: &Trajectory) -> Result<String, DialogueError> {
    Ok(render_states(&infer_state_sequence(traj)?))
}

pub fn classify_query_type(traj: &Trajectory) -> Result<QueryType, DialogueError> {
    let actions = assistant_actions(traj)?;
    let Some((first_index, first)) = actions.first() else {
        return Err(DialogueError::Unclassifiable);
    };
    let out_of_tools = actions.iter().any(|(_, a)| match a {
        AssistantAction::Reject => true,
        AssistantAction::ToolCall { name, .. } => !traj.has_tool(name),
        _ => false,
    });
    if out_of_tools {
        return Ok(QueryType::Type3);
    }
    if let AssistantAction::ToolCall { name, arguments } = first {
        let target = TargetCall {
            name: name.clone(),
            arguments: arguments.clone(),
        };
        if missing_before(traj, Some(&target), *first_index).is_empty() {
            return Ok(QueryType::Type1);
        }
    }
    Ok(QueryType::Type2)
}

/// Number of assistant messages; each closes one user↔assistant exchange.
pub fn turn_count(traj: &Trajectory) -> usize {
    traj.messages.iter().filter(|m| m.role == Role::Assistant).count()
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    EmptyTrajectory,
    FirstMessageNotUser,
    RoleAlternation,
    ToolWithoutCall,
    ToolCallsOnNonAssistant,
    ToolMessageMissingName,
    ToolContentNotObject,
    MultipleToolCalls,
    UnknownTool,
    InvalidArguments,
    ArgumentNotInSchema,
    MalformedTool,
    DuplicateToolName,
    IllegalTransition,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::EmptyTrajectory => "empty trajectory",
            ViolationKind::FirstMessageNotUser => "first message not user",
            ViolationKind::RoleAlternation => "role alternation",
            ViolationKind::ToolWithoutCall => "tool message without call",
            ViolationKind::ToolCallsOnNonAssistant => "tool calls on non-assistant",
            ViolationKind::ToolMessageMissingName => "tool message missing name",
            ViolationKind::ToolContentNotObject => "tool content not a JSON object",
            ViolationKind::MultipleToolCalls => "multiple tool calls",
            ViolationKind::UnknownTool => "unknown tool",
            ViolationKind::InvalidArguments => "invalid arguments",
            ViolationKind::ArgumentNotInSchema => "argument not in schema",
            ViolationKind::MalformedTool => "malformed tool",
            ViolationKind::DuplicateToolName => "duplicate tool name",
            ViolationKind::IllegalTransition => "illegal transition",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message_index: Option<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ValidationOptions {
    /// Rejected trajectories may call tools that were removed from the list.
    pub allow_unknown_tools: bool,
}

/// Validates a gold trajectory.
pub fn validate_trajectory(traj: &Trajectory) -> ValidationReport {
    validate_trajectory_with(traj, ValidationOptions::default())
}

pub fn validate_trajectory_with(traj: &Trajectory, opts: ValidationOptions) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |kind: ViolationKind, index: Option<usize>, detail: String| {
        violations.push(Violation {
            kind,
            message_index: index,
            detail,
        })
    };

    let mut names = BTreeSet::new();
    for tool in &traj.tools {
        if !names.insert(tool.name.as_str()) {
            push(ViolationKind::DuplicateToolName, None, tool.name.clone());
        }
        if !tool.is_well_formed() {
            push(ViolationKind::MalformedTool, None, tool.name.clone());
        }
    }

    match traj.messages.first() {
        None => push(ViolationKind::EmptyTrajectory, None, String::new()),
        Some(m) if m.role != Role::User => {
            push(ViolationKind::FirstMessageNotUser, Some(0), m.role.as_str().into())
        }
        _ => {}
    }

    for (i, msg) in traj.messages.iter().enumerate() {
        let prev = i.checked_sub(1).map(|p| &traj.messages[p]);
        if msg.role == Role::Assistant && prev.is_some_and(|p| p.role == Role::Assistant) {
            push(ViolationKind::RoleAlternation, Some(i), "consecutive assistant messages".into());
        }
        if msg.tool_calls.is_some() && msg.role != Role::Assistant {
            push(ViolationKind::ToolCallsOnNonAssistant, Some(i), msg.role.as_str().into());
        }
        if msg.role == Role::Tool {
            if !prev.is_some_and(|p| p.role == Role::Assistant && p.has_tool_calls()) {
                push(ViolationKind::ToolWithoutCall, Some(i), String::new());
            }
            if msg.name.is_none() {
                push(ViolationKind::ToolMessageMissingName, Some(i), String::new());
            }
            if !matches!(serde_json::from_str::<Value>(&msg.content), Ok(Value::Object(_))) {
                push(ViolationKind::ToolContentNotObject, Some(i), msg.content.clone());
            }
        }
        if let Some(calls) = &msg.tool_calls {
            if calls.len() > 1 {
                push(ViolationKind::MultipleToolCalls, Some(i), calls.len().to_string());
            }
            for call in calls {
                let args = match call.parsed_arguments() {
                    Ok(args) => args,
                    Err(reason) => {
                        push(ViolationKind::InvalidArguments, Some(i), reason);
                        continue;
                    }
                };
                match traj.tool(&call.function_name) {
                    None if !opts.allow_unknown_tools => {
                        push(ViolationKind::UnknownTool, Some(i), call.function_name.clone())
                    }
                    None => {}
                    Some(tool) => {
                        for key in args.keys() {
                            if !tool.properties.contains_key(key) {
                                push(
                                    ViolationKind::ArgumentNotInSchema,
                                    Some(i),
                                    format!("{}.{}", tool.name, key),
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    if let Err(err) = infer_state_sequence(traj) {
        let index = match &err {
            DialogueError::IllegalTransition { index, .. }
            | DialogueError::InvalidArguments { index, .. } => Some(*index),
            _ => None,
        };
        let kind = match err {
            DialogueError::InvalidArguments { .. } => ViolationKind::InvalidArguments,
            _ => ViolationKind::IllegalTransition,
        };
        if !violations.iter().any(|v| v.kind == kind && v.message_index == index) {
            violations.push(Violation {
                kind,
                message_index: index,
                detail: err.to_string(),
            });
        }
    }

    ValidationReport {
        ok: violations.is_empty(),
        violations,
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use serde_json::json;

    pub fn bmi_tool() -> ToolSpec {
        ToolSpec::new("calculate_bmi", "Calculate the Body Mass Index (BMI)")
            .with_param("weight", ParamSpec::new("number", "The weight in kilograms"), true)
            .with_param("height", ParamSpec::new("number", "The height in meters"), true)
    }

    pub fn bmi_args() -> JsonMap {
        json!({"weight": 70, "height": 1.75}).as_object().unwrap().clone()
    }

    pub fn bmi_type1() -> Trajectory {
        Trajectory::new(
            vec![
                Message::user("Hi, I need to calculate my BMI. I weigh 70 kg and my height is 1.75 m."),
                Message::assistant_call(
                    "Sure, I can help you with that. Let's calculate your BMI.",
                    ToolCall::new("calculate_bmi", &bmi_args()),
                ),
                Message::tool("calculate_bmi", r#"{"bmi": 22.86}"#),
                Message::assistant(
                    "Your Body Mass Index (BMI) is 22.86. This is considered a healthy weight for your height.",
                ),
            ],
            vec![bmi_tool()],
        )
    }

    pub fn bmi_type2() -> Trajectory {
        let t1 = bmi_type1();
        Trajectory::new(
            vec![
                Message::user("Hi, I need to calculate my BMI. My height is 1.75 m."),
                Message::assistant("How much do you weigh?"),
                Message::user("I weigh 70 kg."),
                t1.messages[1].clone(),
                t1.messages[2].clone(),
                t1.messages[3].clone(),
            ],
            t1.tools,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use serde_json::json;

    #[test]
    fn state_codes_round_trip() {
        for s in DialogueState::ALL {
            assert_eq!(DialogueState::from_code(s.code()), Some(s));
        }
        assert_eq!(DialogueState::from_code(0), None);
        assert_eq!(DialogueState::from_code(6), None);
    }

    #[test]
    fn type1_walks_direct_call() {
        assert_eq!(state_string(&bmi_type1()).unwrap(), "1→3→4→5");
        assert_eq!(classify_query_type(&bmi_type1()).unwrap(), QueryType::Type1);
        assert_eq!(turn_count(&bmi_type1()), 2);
    }

    #[test]
    fn rejection_stays_initial() {
        let traj = Trajectory::new(
            vec![
                Message::user("Book me a flight to Paris."),
                Message::assistant("I'm sorry, I can't book flights."),
            ],
            vec![bmi_tool()],
        );
        assert_eq!(state_string(&traj).unwrap(), "1→1");
        assert_eq!(classify_query_type(&traj).unwrap(), QueryType::Type3);
        assert_eq!(turn_count(&traj), 1);
    }

    #[test]
    fn type2_walks_slot_filling() {
        let t2 = bmi_type2();
        assert_eq!(state_string(&t2).unwrap(), "1→2→3→4→5");
        assert_eq!(classify_query_type(&t2).unwrap(), QueryType::Type2);
        assert_eq!(turn_count(&t2), 3);
        let actions = assistant_actions(&t2).unwrap();
        assert_eq!(
            actions[0].1,
            AssistantAction::AskSlot {
                target_fields: vec!["weight".into()]
            }
        );
    }

    #[test]
    fn call_to_missing_tool_is_type3() {
        let mut t = bmi_type1();
        t.tools.clear();
        assert_eq!(classify_query_type(&t).unwrap(), QueryType::Type3);
    }

    #[test]
    fn no_assistant_is_unclassifiable() {
        let t = Trajectory::new(vec![Message::user("hello")], vec![]);
        assert_eq!(classify_query_type(&t), Err(DialogueError::Unclassifiable));
    }

    #[test]
    fn complete_before_tool_is_illegal() {
        let events = [
            DialogueEvent::User,
            DialogueEvent::Assistant(AssistantAction::Complete),
        ];
        assert!(matches!(
            infer_states_from_events(&events),
            Err(DialogueError::IllegalTransition { index: 1, .. })
        ));
    }

    #[test]
    fn tool_without_call_is_illegal() {
        let t = Trajectory::new(
            vec![Message::user("hi"), Message::tool("calculate_bmi", "{}")],
            vec![bmi_tool()],
        );
        assert!(matches!(
            infer_state_sequence(&t),
            Err(DialogueError::IllegalTransition { index: 1, .. })
        ));
        let report = validate_trajectory(&t);
        assert!(report.has(ViolationKind::ToolWithoutCall));
        assert!(report.has(ViolationKind::IllegalTransition));
    }

    #[test]
    fn missing_fields_in_required_order() {
        let tool = bmi_tool();
        let stated = json!({"height": 1.75}).as_object().unwrap().clone();
        assert_eq!(missing_required_fields(&stated, &tool).unwrap(), vec!["weight"]);
        assert!(missing_required_fields(&bmi_args(), &tool).unwrap().is_empty());

        let translate = ToolSpec::new("translate_text", "Text translation")
            .with_param("text", ParamSpec::new("string", "Text to translate"), true)
            .with_param("source_language", ParamSpec::new("string", "Source"), true)
            .with_param("target_language", ParamSpec::new("string", "Target"), true);
        assert_eq!(
            missing_required_fields(&JsonMap::new(), &translate).unwrap(),
            vec!["text", "source_language", "target_language"]
        );

        let mut broken = bmi_tool();
        broken.required.push("age".into());
        assert!(matches!(
            missing_required_fields(&JsonMap::new(), &broken),
            Err(DialogueError::MalformedTool(_))
        ));
    }

    #[test]
    fn numeric_location_normalizes() {
        assert!(value_located(&json!(70), "I weigh 70 kg"));
        assert!(value_located(&json!(70.0), "I weigh 70 kg"));
        assert!(value_located(&json!(1.75), "height is 1.75 m."));
        assert!(!value_located(&json!(70), "I weigh 170 kg"));
        assert!(!value_located(&json!(7), "1.75"));
        assert!(value_located(&json!("French"), "this French sentence"));
        assert!(!value_located(&json!("french"), "this French sentence"));
        assert!(values_equal(&json!(70), &json!(70.0)));
        assert!(!values_equal(&json!("70"), &json!(70)));
    }

    #[test]
    fn validation_catches_breaches() {
        assert!(validate_trajectory(&bmi_type1()).ok);

        let mut doubled = bmi_type1();
        doubled.messages.insert(1, Message::assistant("Let me think."));
        let report = validate_trajectory(&doubled);
        assert!(!report.ok);
        assert!(report.has(ViolationKind::RoleAlternation));
        assert_eq!(ViolationKind::RoleAlternation.as_str(), "role alternation");

        let mut unknown = bmi_type1();
        unknown.tools.clear();
        let report = validate_trajectory(&unknown);
        assert!(report.has(ViolationKind::UnknownTool));
        let lenient = validate_trajectory_with(
            &unknown,
            ValidationOptions {
                allow_unknown_tools: true,
            },
        );
        assert!(lenient.ok, "{lenient:?}");

        let mut extra_arg = bmi_type1();
        let args = json!({"weight": 70, "height": 1.75, "age": 3}).as_object().unwrap().clone();
        extra_arg.messages[1].tool_calls = Some(vec![ToolCall::new("calculate_bmi", &args)]);
        assert!(validate_trajectory(&extra_arg).has(ViolationKind::ArgumentNotInSchema));
    }

    #[test]
    fn turn_count_ignores_tool_messages() {
        let t1 = bmi_type1();
        let mut without_tool = t1.clone();
        without_tool.messages.remove(2);
        assert_eq!(turn_count(&t1), turn_count(&without_tool));
    }

    #[test]
    fn prefix_states_track_walk() {
        let states = prefix_states(&bmi_type2()).unwrap();
        use DialogueState::*;
        assert_eq!(
            states,
            vec![
                Initial,
                Initial,
                ToolSelectedIncomplete,
                ToolSelectedIncomplete,
                WaitForToolResponse,
                Complete,
                Complete
            ]
        );
    }
}
