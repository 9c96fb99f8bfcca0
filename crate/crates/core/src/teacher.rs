//! Teachers answering how-to questions at four levels of abstraction.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvAction, GameState, SlotId};
use crate::gateway::{ChatMessage, ChatRequest, Gateway, GatewayError, Role};
use crate::planner::{self, GroundError, GroundedPlan, RecipePlan, SolveOutcome};
use crate::prompts;
use crate::recipe::{ItemId, RecipeBook, RecipeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    Executable,
    PartiallyExecutable,
    SubgoalPartiallyExecutable,
    NonExecutable,
}

impl TeacherKind {
    pub const ALL: [TeacherKind; 4] = [
        TeacherKind::Executable,
        TeacherKind::PartiallyExecutable,
        TeacherKind::SubgoalPartiallyExecutable,
        TeacherKind::NonExecutable,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TeacherKind::Executable => "executable",
            TeacherKind::PartiallyExecutable => "partially_executable",
            TeacherKind::SubgoalPartiallyExecutable => "subgoal_partially_executable",
            TeacherKind::NonExecutable => "non_executable",
        }
    }
}

impl fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TeacherKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TeacherKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown teacher {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherAnswer {
    pub kind: TeacherKind,
    pub text: String,
    pub plan: Option<RecipePlan>,
    /// Abstracted planner string given to the non-executable teacher.
    pub planner_str: Option<String>,
    pub impossible: bool,
}

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("grounding failed: {0}")]
    Ground(#[from] GroundError),
    #[error("slot token {token:?} would leak into the teacher input")]
    Leakage { token: String },
    #[error("the non-executable teacher needs a gateway")]
    NoGateway,
    #[error("cannot abstract an empty plan")]
    EmptyPlan,
}

pub const HEADER_SUFFIX: &str = ", follow these steps:";

pub fn header(target: &ItemId) -> String {
    format!("To craft a {target}{HEADER_SUFFIX}")
}

pub fn impossible_sentence(missing: &ItemId) -> String {
    format!("This task is impossible: no way to obtain {missing}.")
}

pub fn slot_token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(I[0-9]+|A[1-3]|B[1-3]|C[1-3])\b").unwrap())
}

/// Spatial name of a grid cell; `None` for non-grid slots.
pub fn spatial_name(slot: SlotId) -> Option<&'static str> {
    const NAMES: [[&str; 3]; 3] = [
        ["top left", "top middle", "top right"],
        ["middle left", "middle", "middle right"],
        ["bottom left", "bottom middle", "bottom right"],
    ];
    match slot {
        SlotId::Grid { row, col } => Some(NAMES[row as usize][col as usize]),
        _ => None,
    }
}

/// Observation with slot identifiers removed: inventory totals per item,
/// grid cells named spatially, the output slot named in words.
pub fn abstract_observation(state: &GameState, target: &ItemId) -> String {
    let mut out = format!("Craft an item of type: {target}\ninventory:");
    let mut totals: BTreeMap<&ItemId, u32> = BTreeMap::new();
    for slot in SlotId::inventory() {
        if let Some(st) = state.slot(slot) {
            *totals.entry(&st.item).or_insert(0) += st.count;
        }
    }
    for (item, n) in totals {
        out.push_str(&format!("\n- {item}: {n}"));
    }
    let grid: Vec<String> = SlotId::grid_cells()
        .filter_map(|s| {
            state
                .slot(s)
                .map(|st| format!("- {} in the {}: {}", st.item, spatial_name(s).unwrap(), st.count))
        })
        .collect();
    if !grid.is_empty() {
        out.push_str("\ncrafting grid:\n");
        out.push_str(&grid.join("\n"));
    }
    if let Some(st) = state.slot(SlotId::Output) {
        out.push_str(&format!("\nthe output slot: {} {}", st.item, st.count));
    }
    out
}

/// Planner output with slot tokens replaced by spatial names and
/// inventory sources replaced by item names.
pub fn abstract_planner_output(plan: &GroundedPlan) -> Result<String, TeacherError> {
    if plan.actions.is_empty() {
        return Err(TeacherError::EmptyPlan);
    }
    let lines: Vec<String> = plan
        .actions
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let body = match &a.action {
                EnvAction::Move { from, to, .. } if to.is_grid() => match spatial_name(*from) {
                    Some(src) => format!("move the {} from the {src} to the {}", a.item, spatial_name(*to).unwrap()),
                    None => format!("move the {} to the {}", a.item, spatial_name(*to).unwrap()),
                },
                EnvAction::Move { from, .. } => {
                    let src = match from {
                        SlotId::Output => "the output slot".to_string(),
                        s => match spatial_name(*s) {
                            Some(n) => format!("the {n}"),
                            None => "the inventory".to_string(),
                        },
                    };
                    format!("move the {} from {src} to a free inventory slot", a.item)
                }
                EnvAction::Smelt { quantity, .. } => {
                    format!("smelt the {} to a free inventory slot with quantity {quantity}", a.item)
                }
                other => other.to_string(),
            };
            format!("{}. {body}", i + 1)
        })
        .collect();
    Ok(lines.join("\n"))
}

fn render_executable(target: &ItemId, plan: &GroundedPlan) -> String {
    let mut out = header(target);
    for (i, a) in plan.actions.iter().enumerate() {
        out.push_str(&format!("\n{}. {}", i + 1, a.action));
    }
    out
}

fn render_partial(target: &ItemId, plan: &GroundedPlan) -> String {
    let mut out = header(target);
    for (i, a) in plan.actions.iter().enumerate() {
        let line = match &a.action {
            EnvAction::Move { from, to, .. } if to.is_grid() => {
                if from.is_grid() {
                    format!("move the {} from {from} to {to}", a.item)
                } else {
                    format!("move the {} to {to}", a.item)
                }
            }
            EnvAction::Move { from, .. } => {
                format!("move the {} from {from} to a free inventory slot", a.item)
            }
            EnvAction::Smelt { quantity, .. } => {
                format!("smelt the {} to a free inventory slot with quantity {quantity}", a.item)
            }
            other => other.to_string(),
        };
        out.push_str(&format!("\n{}. {line}", i + 1));
    }
    out
}

fn render_subgoals(target: &ItemId, plan: &GroundedPlan, recipes: &RecipeBook) -> String {
    let mut out = header(target);
    let mut k = 0;
    let clearing: Vec<_> = plan.actions.iter().filter(|a| a.application.is_none()).collect();
    if !clearing.is_empty() {
        k += 1;
        out.push_str(&format!("\n{k}. Clear the crafting grid"));
        for (j, a) in clearing.iter().enumerate() {
            if let EnvAction::Move { from, .. } = a.action {
                out.push_str(&format!(
                    "\n{k}.{}. move {} from {from} to a free inventory slot",
                    j + 1,
                    a.item
                ));
            }
        }
    }
    for app in &plan.applications {
        let recipe = recipes.get(&app.recipe_id).expect("grounded recipe exists");
        for _ in 0..app.times {
            k += 1;
            if app.kind == RecipeKind::Smelting {
                let input = recipe.ingredients().into_keys().next().unwrap();
                out.push_str(&format!("\n{k}. Smelt {}", app.output_item));
                out.push_str(&format!("\n{k}.1. smelt {input} to a free inventory slot with quantity 1"));
                continue;
            }
            out.push_str(&format!("\n{k}. Craft {}", app.output_item));
            let placement = recipe.canonical_placement();
            for (j, ((r, c), item)) in placement.iter().enumerate() {
                out.push_str(&format!("\n{k}.{}. move {item} to {}", j + 1, SlotId::grid(*r, *c)));
            }
            out.push_str(&format!(
                "\n{k}.{}. move {} to a free inventory slot",
                placement.len() + 1,
                app.output_item
            ));
        }
    }
    out
}

/// Replaces slot tokens with state-derived names so a free-form question
/// can be shown to the non-executable teacher.
pub fn sanitize_slots(text: &str, state: &GameState) -> String {
    slot_token_regex()
        .replace_all(text, |caps: &regex::Captures| {
            let token = &caps[0];
            match token.parse::<SlotId>() {
                Ok(s) if s.is_grid() => format!("the {}", spatial_name(s).unwrap()),
                Ok(s) => state
                    .slot(s)
                    .map(|st| st.item.to_string())
                    .unwrap_or_else(|| "an inventory slot".to_string()),
                Err(_) => "a slot".to_string(),
            }
        })
        .into_owned()
}

pub fn check_leakage(text: &str) -> Result<(), TeacherError> {
    match slot_token_regex().find(text) {
        Some(m) => Err(TeacherError::Leakage { token: m.as_str().to_string() }),
        None => Ok(()),
    }
}

/// Builds the non-executable teacher request, enforcing the leakage guard.
pub fn non_executable_request(
    state: &GameState,
    target: &ItemId,
    question: &str,
    planner_str: &str,
) -> Result<ChatRequest, TeacherError> {
    let context = abstract_observation(state, target);
    let question = sanitize_slots(question, state);
    for part in [context.as_str(), planner_str, question.as_str()] {
        check_leakage(part)?;
    }
    let system = prompts::fill(
        prompts::NON_EXECUTABLE_TEACHER_PROMPT,
        &[("context", &context), ("planner_str", planner_str)],
    );
    Ok(ChatRequest::new(
        Role::Teacher,
        vec![ChatMessage::system(system), ChatMessage::user(question)],
    ))
}

#[derive(Debug, Clone)]
pub struct Teacher {
    pub kind: TeacherKind,
    pub recipes: Arc<RecipeBook>,
}

impl Teacher {
    pub fn new(kind: TeacherKind, recipes: Arc<RecipeBook>) -> Self {
        Teacher { kind, recipes }
    }

    pub fn answer(
        &self,
        state: &GameState,
        target: &ItemId,
        question: &str,
        gateway: Option<&mut Gateway>,
    ) -> Result<TeacherAnswer, TeacherError> {
        let (outcome, grounded) = planner::plan_for_state(state, target, &self.recipes)?;
        let plan = outcome.plan().cloned();
        let verdict = match (&outcome, &grounded) {
            (SolveOutcome::Plan(_), Some(g)) if !g.actions.is_empty() => Ok(g),
            (SolveOutcome::Plan(_), _) => Err(format!("You already have {target} in your inventory.")),
            (SolveOutcome::Impossible { missing }, _) => {
                Err(impossible_sentence(missing.as_ref().unwrap_or(target)))
            }
            (SolveOutcome::BoundExhausted, _) => Err(impossible_sentence(target)),
        };
        let impossible = !matches!(outcome, SolveOutcome::Plan(_));

        if self.kind == TeacherKind::NonExecutable {
            let planner_str = match &verdict {
                Ok(g) => abstract_planner_output(g)?,
                Err(sentence) => sentence.clone(),
            };
            let gateway = gateway.ok_or(TeacherError::NoGateway)?;
            let request = non_executable_request(state, target, question, &planner_str)?;
            let text = gateway.complete_text(request)?;
            return Ok(TeacherAnswer {
                kind: self.kind,
                text,
                plan,
                planner_str: Some(planner_str),
                impossible,
            });
        }

        let text = match verdict {
            Err(sentence) => sentence,
            Ok(g) => match self.kind {
                TeacherKind::Executable => render_executable(target, g),
                TeacherKind::PartiallyExecutable => render_partial(target, g),
                TeacherKind::SubgoalPartiallyExecutable => render_subgoals(target, g, &self.recipes),
                TeacherKind::NonExecutable => unreachable!(),
            },
        };
        Ok(TeacherAnswer {
            kind: self.kind,
            text,
            plan,
            planner_str: None,
            impossible,
        })
    }
}

/// Parses `N. move: from X to Y with quantity Q` (and `smelt:`) lines.
pub fn parse_executable_line(line: &str) -> Option<EnvAction> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"^\s*(?:\d+(?:\.\d+)*\.\s*)?(move|smelt):\s*from\s+(\S+)\s+to\s+(\S+)\s+with\s+quantity\s+(\d+)\s*$")
            .unwrap()
    });
    let caps = re.captures(line)?;
    let from = caps[2].parse().ok()?;
    let to = caps[3].parse().ok()?;
    let quantity = caps[4].parse().ok()?;
    Some(match &caps[1] {
        "move" => EnvAction::Move { from, to, quantity },
        _ => EnvAction::Smelt { from, to, quantity },
    })
}

pub fn parse_executable_answer(text: &str) -> Vec<EnvAction> {
    text.lines().filter_map(parse_executable_line).collect()
}
