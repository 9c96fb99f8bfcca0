//! The actor: one validated tool call per turn, dispatched against the
//! environment or the memory pipeline.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::TaskExample;
use crate::env::{check_success, render_observation, EnvAction, GameState, SlotId, Speaker, Status};
use crate::gateway::{CallRecord, ChatMessage, ChatOutput, ChatRequest, Gateway, GatewayError, Role, Usage};
use crate::instruction::{parse_instruction, Instruction};
use crate::memory::{
    just_ask, read_memory, MemoryEvent, MemoryRoles, MemoryStore, ParseMode, RelevanceMode, RoleContext,
};
use crate::prompts;
use crate::recipe::{ItemId, RecipeBook};
use crate::teacher::{Teacher, TeacherKind};

pub const MAX_CONSECUTIVE_NONENV: u32 = 3;
pub const INVALID_RETRY_CAP: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolName {
    Move,
    Smelt,
    Impossible,
    Think,
    ReadMemory,
}

impl ToolName {
    pub const ALL: [ToolName; 5] = [
        ToolName::ReadMemory,
        ToolName::Think,
        ToolName::Move,
        ToolName::Smelt,
        ToolName::Impossible,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ToolName::Move => "move",
            ToolName::Smelt => "smelt",
            ToolName::Impossible => "impossible",
            ToolName::Think => "think",
            ToolName::ReadMemory => "read_memory",
        }
    }

    pub fn schema(self) -> &'static str {
        match self {
            ToolName::Move => prompts::MOVE_TOOL,
            ToolName::Smelt => prompts::SMELT_TOOL,
            ToolName::Impossible => prompts::IMPOSSIBLE_TOOL,
            ToolName::Think => prompts::THINK_TOOL,
            ToolName::ReadMemory => prompts::READ_MEMORY_TOOL,
        }
    }

    pub fn is_env(self) -> bool {
        matches!(self, ToolName::Move | ToolName::Smelt | ToolName::Impossible)
    }
}

impl FromStr for ToolName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ToolName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown tool {s:?}"))
    }
}

/// A tool call as produced by an actor, before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    pub arguments: Value,
}

impl ToolCall {
    pub fn new(name: ToolName, arguments: Value) -> Self {
        ToolCall {
            name: name.as_str().to_string(),
            arguments,
        }
    }

    pub fn from_env(action: &EnvAction) -> Option<Self> {
        Some(match action {
            EnvAction::Move { from, to, quantity } => ToolCall::new(
                ToolName::Move,
                serde_json::json!({"slot_from": from.to_string(), "slot_to": to.to_string(), "quantity": quantity}),
            ),
            EnvAction::Smelt { from, to, quantity } => ToolCall::new(
                ToolName::Smelt,
                serde_json::json!({"slot_from": from.to_string(), "slot_to": to.to_string(), "quantity": quantity}),
            ),
            EnvAction::Impossible { reason } => {
                ToolCall::new(ToolName::Impossible, serde_json::json!({ "reason": reason }))
            }
            EnvAction::NoOp => return None,
        })
    }
}

/// A call that passed validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidCall {
    Env { action: EnvAction },
    Think { thought: String },
    ReadMemory { recipe: String },
}

impl ValidCall {
    pub fn is_env(&self) -> bool {
        matches!(self, ValidCall::Env { .. })
    }

    fn noop() -> Self {
        ValidCall::Env { action: EnvAction::NoOp }
    }
}

impl fmt::Display for ValidCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidCall::Env { action } => write!(f, "act: {action}"),
            ValidCall::Think { thought } => write!(f, "think: {thought}"),
            ValidCall::ReadMemory { recipe } => write!(f, "read_memory: {recipe}"),
        }
    }
}

fn string_arg<'a>(args: &'a serde_json::Map<String, Value>, key: &str) -> Result<&'a str, String> {
    match args.get(key) {
        None => Err(format!("missing required argument '{key}'")),
        Some(Value::String(s)) => Ok(s),
        Some(other) => Err(format!("argument '{key}' must be a string, got {other}")),
    }
}

fn slot_arg(args: &serde_json::Map<String, Value>, key: &str) -> Result<SlotId, String> {
    string_arg(args, key)?.trim().parse().map_err(|e: crate::env::InvalidSlot| e.to_string())
}

/// Checks a call against the advertised schemas and the environment's
/// protocol rules. The error is the feedback shown to the actor.
pub fn validate(call: &ToolCall, advertised: &[ToolName]) -> Result<ValidCall, String> {
    let names: Vec<&str> = advertised.iter().map(|t| t.as_str()).collect();
    let tool = match call.name.parse::<ToolName>() {
        Ok(t) if advertised.contains(&t) => t,
        _ => {
            return Err(format!(
                "Unknown tool '{}'. Available tools: {}.",
                call.name,
                names.join(", ")
            ))
        }
    };
    let Value::Object(args) = &call.arguments else {
        return Err(format!("Arguments for '{}' must be a JSON object.", tool.as_str()));
    };
    let bad = |e: String| format!("Invalid call to '{}': {e}.", tool.as_str());
    match tool {
        ToolName::Move | ToolName::Smelt => {
            let from = slot_arg(args, "slot_from").map_err(bad)?;
            let to = slot_arg(args, "slot_to").map_err(bad)?;
            let quantity = match args.get("quantity") {
                None => return Err(bad("missing required argument 'quantity'".into())),
                Some(v) => v.as_u64().ok_or_else(|| bad(format!("'quantity' must be a positive integer, got {v}")))?,
            };
            if quantity == 0 || quantity > u32::MAX as u64 {
                return Err(bad("'quantity' must be a positive integer".into()));
            }
            if to == SlotId::Output {
                return Err(bad("you cannot move or smelt items into slot 0".into()));
            }
            if tool == ToolName::Smelt && from == SlotId::Output {
                return Err(bad("you cannot smelt from slot 0".into()));
            }
            let quantity = quantity as u32;
            Ok(ValidCall::Env {
                action: if tool == ToolName::Move {
                    EnvAction::Move { from, to, quantity }
                } else {
                    EnvAction::Smelt { from, to, quantity }
                },
            })
        }
        ToolName::Impossible => Ok(ValidCall::Env {
            action: EnvAction::Impossible {
                reason: string_arg(args, "reason").map_err(bad)?.to_string(),
            },
        }),
        ToolName::Think => Ok(ValidCall::Think {
            thought: string_arg(args, "thought").map_err(bad)?.to_string(),
        }),
        ToolName::ReadMemory => {
            let recipe = string_arg(args, "recipe").map_err(bad)?.trim();
            if recipe.is_empty() {
                return Err(bad("'recipe' must not be empty".into()));
            }
            Ok(ValidCall::ReadMemory { recipe: recipe.to_string() })
        }
    }
}

/// Replaces a non-environment call by a no-op once `limit` of them have
/// happened in a row. Returns the call to dispatch and whether it was
/// replaced. The counter is updated for the returned call.
pub fn enforce_nonenv_limit(counter: &mut u32, call: ValidCall, limit: u32) -> (ValidCall, bool) {
    if call.is_env() {
        *counter = 0;
        return (call, false);
    }
    if *counter >= limit {
        *counter = 0;
        return (ValidCall::noop(), true);
    }
    *counter += 1;
    (call, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    How2,
    JustAsk,
    MemoryOnly,
    ParseOnly,
    RelevanceOnly,
    Base,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::How2,
        Mode::JustAsk,
        Mode::MemoryOnly,
        Mode::ParseOnly,
        Mode::RelevanceOnly,
        Mode::Base,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::How2 => "how2",
            Mode::JustAsk => "just_ask",
            Mode::MemoryOnly => "memory_only",
            Mode::ParseOnly => "parse_only",
            Mode::RelevanceOnly => "relevance_only",
            Mode::Base => "base",
        }
    }

    /// Roles actually used by the read-memory tool, given the configured
    /// relevance/parse/ask implementations.
    pub fn effective_roles(self, configured: MemoryRoles) -> MemoryRoles {
        let mut r = configured;
        match self {
            Mode::How2 | Mode::JustAsk | Mode::Base => {}
            Mode::MemoryOnly => {
                r.relevance = RelevanceMode::Always;
                r.parse = ParseMode::Identity;
            }
            Mode::ParseOnly => r.relevance = RelevanceMode::Always,
            Mode::RelevanceOnly => r.parse = ParseMode::Identity,
        }
        r
    }

    pub fn tools(self, think_enabled: bool) -> Vec<ToolName> {
        ToolName::ALL
            .into_iter()
            .filter(|t| match t {
                ToolName::ReadMemory => self != Mode::Base,
                ToolName::Think => think_enabled,
                _ => true,
            })
            .collect()
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Scripted,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorPolicy {
    pub kind: PolicyKind,
    #[serde(default)]
    pub fixed_ask_first: bool,
    #[serde(default = "default_true")]
    pub think_enabled: bool,
    #[serde(default = "default_limit")]
    pub max_consecutive_nonenv: u32,
    #[serde(default = "default_retry")]
    pub retry_cap: u32,
}

fn default_true() -> bool {
    true
}
fn default_limit() -> u32 {
    MAX_CONSECUTIVE_NONENV
}
fn default_retry() -> u32 {
    INVALID_RETRY_CAP
}

impl ActorPolicy {
    pub fn scripted() -> Self {
        ActorPolicy {
            kind: PolicyKind::Scripted,
            fixed_ask_first: false,
            think_enabled: true,
            max_consecutive_nonenv: MAX_CONSECUTIVE_NONENV,
            retry_cap: INVALID_RETRY_CAP,
        }
    }

    pub fn llm() -> Self {
        ActorPolicy {
            kind: PolicyKind::Llm,
            ..ActorPolicy::scripted()
        }
    }
}

/// Rejected attempt within one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvalidAttempt {
    pub raw: String,
    pub feedback: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub call: ValidCall,
    pub invalid: Vec<InvalidAttempt>,
    /// Retry cap exhausted; `call` is a forced no-op.
    pub protocol_failure: bool,
}

impl Decision {
    fn of(call: ValidCall) -> Self {
        Decision {
            call,
            invalid: vec![],
            protocol_failure: false,
        }
    }
}

/// Replays instruction lines from memory responses one per turn.
#[derive(Debug, Clone, Default)]
pub struct ScriptedActor {
    asked: bool,
    awaiting_response: bool,
    queue: VecDeque<Instruction>,
}

/// The block to follow: the one for the target, else one that extracts
/// the target, else the first.
pub fn select_block<'a>(response: &'a str, target: &ItemId) -> &'a str {
    let blocks: Vec<&str> = response.split("\n\n").filter(|b| !b.trim().is_empty()).collect();
    let header = format!("RECIPE: {target}");
    if let Some(b) = blocks.iter().find(|b| b.lines().next().is_some_and(|l| l.trim() == header)) {
        return b;
    }
    if let Some(b) = blocks.iter().find(|b| {
        b.lines()
            .any(|l| matches!(parse_instruction(l), Some(Instruction::Extract { item }) if &item == target))
    }) {
        return b;
    }
    blocks.first().copied().unwrap_or("")
}

/// Resolves an item-level instruction against the current slots.
pub fn ground_instruction(ins: &Instruction, state: &GameState) -> Option<EnvAction> {
    let free = state.first_free_inventory();
    Some(match ins {
        Instruction::Exact(a) => a.clone(),
        Instruction::Place { item, to } => EnvAction::Move {
            from: state.find_in_inventory(item)?,
            to: *to,
            quantity: 1,
        },
        Instruction::Extract { .. } => EnvAction::Move {
            from: SlotId::Output,
            to: free?,
            quantity: state.slot(SlotId::Output)?.count,
        },
        Instruction::Clear { from, .. } => EnvAction::Move {
            from: *from,
            to: free?,
            quantity: state.slot(*from)?.count,
        },
        Instruction::Smelt { item, quantity } => EnvAction::Smelt {
            from: state.find_in_inventory(item)?,
            to: free?,
            quantity: *quantity,
        },
        Instruction::Impossible { reason } => EnvAction::Impossible {
            reason: if reason.is_empty() { "impossible".into() } else { reason.clone() },
        },
    })
}

impl ScriptedActor {
    pub fn new() -> Self {
        ScriptedActor::default()
    }

    /// Loads the instructions of a read-memory response.
    pub fn observe_memory(&mut self, response: &str, target: &ItemId) {
        self.awaiting_response = false;
        self.queue = select_block(response, target).lines().filter_map(parse_instruction).collect();
    }

    pub fn decide(&mut self, state: &GameState, target: &ItemId, tools: &[ToolName]) -> Decision {
        if !self.asked && tools.contains(&ToolName::ReadMemory) {
            self.asked = true;
            self.awaiting_response = true;
            return Decision::of(ValidCall::ReadMemory { recipe: target.to_string() });
        }
        let Some(ins) = self.queue.pop_front() else {
            return Decision::of(ValidCall::noop());
        };
        let call = ground_instruction(&ins, state)
            .and_then(|a| ToolCall::from_env(&a))
            .and_then(|c| validate(&c, tools).ok())
            .unwrap_or_else(ValidCall::noop);
        Decision::of(call)
    }
}

/// First JSON object in free text, for backends that answer in prose.
fn tool_call_from_text(text: &str) -> Option<ToolCall> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    let v: Value = serde_json::from_str(text.get(start..=end)?).ok()?;
    let name = v.get("name")?.as_str()?.to_string();
    let arguments = v.get("arguments").or_else(|| v.get("parameters")).cloned().unwrap_or(Value::Null);
    let arguments = match arguments {
        Value::String(s) => serde_json::from_str(&s).unwrap_or(Value::String(s)),
        a => a,
    };
    Some(ToolCall { name, arguments })
}

fn actor_messages(state: &GameState) -> Vec<ChatMessage> {
    let mut msgs = vec![ChatMessage::system(prompts::SYSTEM_PROMPT)];
    msgs.extend(state.dialogue.iter().map(|d| ChatMessage {
        speaker: d.speaker,
        content: d.content.clone(),
    }));
    msgs
}

/// One LLM turn with feedback-and-retry. Rejected attempts and their
/// feedback are appended to the dialogue.
pub fn llm_decide(
    policy: &ActorPolicy,
    state: &mut GameState,
    tools: &[ToolName],
    gateway: &mut Gateway,
) -> Result<Decision, GatewayError> {
    let schemas: Vec<Value> = tools
        .iter()
        .map(|t| serde_json::from_str(t.schema()).expect("bundled schemas are JSON"))
        .collect();
    let mut invalid = Vec::new();
    for _ in 0..policy.retry_cap.max(1) {
        let req = ChatRequest::new(Role::Actor, actor_messages(state)).with_tools(schemas.clone());
        let resp = gateway.complete(req)?;
        let (raw, call) = match &resp.output {
            ChatOutput::ToolCall { name, arguments } => (
                format!("{name}: {arguments}"),
                Some(ToolCall {
                    name: name.clone(),
                    arguments: arguments.clone(),
                }),
            ),
            ChatOutput::Text { content } => (content.clone(), tool_call_from_text(content)),
        };
        let result = match call {
            Some(c) => validate(&c, tools),
            None => Err("No tool call found. Respond with exactly one tool call.".to_string()),
        };
        match result {
            Ok(call) => {
                return Ok(Decision {
                    call,
                    invalid,
                    protocol_failure: false,
                })
            }
            Err(feedback) => {
                state.push_dialogue(Speaker::Assistant, raw.clone());
                state.push_dialogue(Speaker::User, feedback.clone());
                invalid.push(InvalidAttempt { raw, feedback });
            }
        }
    }
    Ok(Decision {
        call: ValidCall::noop(),
        invalid,
        protocol_failure: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StepEvent {
    Invalid {
        turn: u32,
        raw: String,
        feedback: String,
    },
    Env {
        turn: u32,
        action: EnvAction,
        feedback: Option<String>,
        /// Substituted for a call over the non-environment limit or after
        /// the retry cap.
        forced: bool,
    },
    Think {
        turn: u32,
        thought: String,
    },
    ReadMemory {
        turn: u32,
        query: String,
        response: String,
        memory: MemoryEvent,
    },
}

impl StepEvent {
    pub fn is_action(&self) -> bool {
        !matches!(self, StepEvent::Invalid { .. })
    }

    pub fn is_env(&self) -> bool {
        matches!(self, StepEvent::Env { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub mode: Mode,
    pub policy: ActorPolicy,
    pub roles: MemoryRoles,
    pub max_steps: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub example_id: String,
    pub target: ItemId,
    pub mode: Mode,
    pub teacher: Option<TeacherKind>,
    pub solvable: bool,
    pub status: Status,
    pub success: bool,
    pub declared_impossible: bool,
    pub env_steps_taken: u32,
    pub optimal_env_steps: u32,
    pub events: Vec<StepEvent>,
    pub cache_hits: u32,
    pub cache_misses: u32,
    /// Turn of the first read-memory call.
    pub first_read_turn: Option<u32>,
    pub protocol_failures: u32,
    pub usage: Usage,
    pub usage_by_role: BTreeMap<Role, Usage>,
    pub gateway_calls: Vec<CallRecord>,
    pub infra_error: Option<String>,
}

impl EpisodeRecord {
    pub fn env_actions(&self) -> impl Iterator<Item = &EnvAction> {
        self.events.iter().filter_map(|e| match e {
            StepEvent::Env { action, .. } => Some(action),
            _ => None,
        })
    }

    pub fn memory_events(&self) -> impl Iterator<Item = &MemoryEvent> {
        self.events.iter().filter_map(|e| match e {
            StepEvent::ReadMemory { memory, .. } => Some(memory),
            _ => None,
        })
    }

    /// Longest run of consecutive non-environment actions.
    pub fn max_nonenv_run(&self) -> u32 {
        let mut best = 0;
        let mut run = 0;
        for e in self.events.iter().filter(|e| e.is_action()) {
            if e.is_env() {
                run = 0;
            } else {
                run += 1;
                best = best.max(run);
            }
        }
        best
    }
}

pub struct EpisodeContext<'a> {
    pub recipes: &'a RecipeBook,
    pub teacher: &'a Teacher,
    pub store: &'a mut MemoryStore,
    pub gateway: Option<&'a mut Gateway>,
    pub episode: usize,
}

fn observation_message(feedback: Option<&str>, state: &GameState, target: &ItemId) -> String {
    match feedback {
        Some(f) => format!("{f}\n{}", render_observation(state, target)),
        None => render_observation(state, target),
    }
}

/// Runs one episode to termination.
pub fn run_episode(example: &TaskExample, config: &EpisodeConfig, ctx: EpisodeContext) -> EpisodeRecord {
    let EpisodeContext {
        recipes,
        teacher,
        store,
        mut gateway,
        episode,
    } = ctx;
    if let Some(g) = gateway.as_deref_mut() {
        g.set_episode(episode);
    }
    let target = &example.target;
    let tools = config.mode.tools(config.policy.think_enabled);
    let roles = config.mode.effective_roles(config.roles);
    let limit = config.policy.max_consecutive_nonenv;
    let mut state = example.initial_state(recipes, config.max_steps);
    state.push_dialogue(Speaker::User, render_observation(&state, target));

    let mut scripted = ScriptedActor::new();
    let mut events = Vec::new();
    let mut infra_error = None;
    let mut protocol_failures = 0;
    let mut first_read_turn = None;
    let (mut hits, mut misses) = (0, 0);
    let mut turn = 0u32;

    while state.is_running() {
        turn += 1;
        let decision = match config.policy.kind {
            PolicyKind::Scripted => Ok(scripted.decide(&state, target, &tools)),
            PolicyKind::Llm => match gateway.as_deref_mut() {
                Some(g) => llm_decide(&config.policy, &mut state, &tools, g),
                None => Err(GatewayError::Config("the LLM actor needs a gateway".into())),
            },
        };
        let mut decision = match decision {
            Ok(d) => d,
            Err(e) => {
                infra_error = Some(e.to_string());
                break;
            }
        };
        for a in &decision.invalid {
            events.push(StepEvent::Invalid {
                turn,
                raw: a.raw.clone(),
                feedback: a.feedback.clone(),
            });
        }
        if decision.protocol_failure {
            protocol_failures += 1;
        }
        if turn == 1 && config.policy.fixed_ask_first && tools.contains(&ToolName::ReadMemory) {
            decision.call = ValidCall::ReadMemory { recipe: target.to_string() };
        }
        let (call, replaced) = enforce_nonenv_limit(&mut state.consecutive_nonenv_actions, decision.call, limit);
        state.push_dialogue(Speaker::Assistant, call.to_string());
        match call {
            ValidCall::Env { action } => {
                let feedback = match state.apply(&action, recipes) {
                    Ok(f) => f,
                    Err(e) => Some(e.to_string()),
                };
                if check_success(&state, target) {
                    state.status = Status::Success;
                }
                let obs = observation_message(feedback.as_deref(), &state, target);
                state.push_dialogue(Speaker::Tool, obs);
                events.push(StepEvent::Env {
                    turn,
                    action,
                    feedback,
                    forced: replaced || decision.protocol_failure,
                });
            }
            ValidCall::Think { thought } => {
                state.push_dialogue(Speaker::Tool, "Ok");
                events.push(StepEvent::Think { turn, thought });
            }
            ValidCall::ReadMemory { recipe } => {
                first_read_turn.get_or_insert(turn);
                let mut rctx = RoleContext {
                    recipes,
                    teacher,
                    gateway: gateway.as_deref_mut(),
                    episode,
                };
                let outcome = if config.mode == Mode::JustAsk {
                    just_ask(&state, target, &recipe, &roles, &mut rctx)
                } else {
                    read_memory(store, &state, target, &recipe, &roles, &mut rctx)
                };
                match outcome {
                    Ok(o) => {
                        if o.event.is_miss() {
                            misses += 1;
                        } else {
                            hits += 1;
                        }
                        scripted.observe_memory(&o.response, target);
                        state.push_dialogue(Speaker::Tool, o.response.clone());
                        events.push(StepEvent::ReadMemory {
                            turn,
                            query: recipe,
                            response: o.response,
                            memory: o.event,
                        });
                    }
                    Err(e) => {
                        infra_error = Some(e.to_string());
                        break;
                    }
                }
            }
        }
    }

    let (usage, usage_by_role, gateway_calls) = match gateway.as_deref_mut() {
        Some(g) => (g.ledger.episode_total(episode), g.ledger.episode_by_role(episode), g.drain_calls()),
        None => (Usage::default(), BTreeMap::new(), vec![]),
    };
    let declared_impossible = state.status == Status::ImpossibleDeclared;
    let success = if example.solvable {
        state.status == Status::Success
    } else {
        declared_impossible
    };
    EpisodeRecord {
        episode,
        example_id: example.id.clone(),
        target: target.clone(),
        mode: config.mode,
        teacher: (config.mode != Mode::Base).then_some(teacher.kind),
        solvable: example.solvable,
        status: state.status,
        success,
        declared_impossible,
        env_steps_taken: state.env_steps_taken,
        optimal_env_steps: example.optimal_env_steps,
        events,
        cache_hits: hits,
        cache_misses: misses,
        first_read_turn,
        protocol_failures,
        usage,
        usage_by_role,
        gateway_calls,
        infra_error,
    }
}
