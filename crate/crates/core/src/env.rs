//! The crafting episode state machine.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::recipe::{Grid, ItemId, RecipeBook};

pub const DEFAULT_MAX_STEPS: u32 = 30;
pub const INVENTORY_SLOTS: u8 = 36;
const SLOT_COUNT: usize = 1 + 9 + INVENTORY_SLOTS as usize;

/// A slot address: the output slot `0`, grid cells `A1`..`C3`, or
/// inventory slots `I1`..`I36`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SlotId {
    Output,
    Grid { row: u8, col: u8 },
    Inv(u8),
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid slot {0:?}: expected 0, A1-C3 or I1-I36")]
pub struct InvalidSlot(pub String);

impl SlotId {
    pub fn grid(row: usize, col: usize) -> SlotId {
        assert!(row < 3 && col < 3);
        SlotId::Grid {
            row: row as u8,
            col: col as u8,
        }
    }

    pub fn inv(index: u8) -> SlotId {
        assert!((1..=INVENTORY_SLOTS).contains(&index));
        SlotId::Inv(index)
    }

    /// Position in the canonical order: output, A1..C3, I1..I36.
    pub fn index(self) -> usize {
        match self {
            SlotId::Output => 0,
            SlotId::Grid { row, col } => 1 + 3 * row as usize + col as usize,
            SlotId::Inv(i) => 9 + i as usize,
        }
    }

    pub fn from_index(idx: usize) -> SlotId {
        match idx {
            0 => SlotId::Output,
            1..=9 => SlotId::grid((idx - 1) / 3, (idx - 1) % 3),
            _ => SlotId::inv((idx - 9) as u8),
        }
    }

    pub fn all() -> impl Iterator<Item = SlotId> {
        (0..SLOT_COUNT).map(SlotId::from_index)
    }

    pub fn grid_cells() -> impl Iterator<Item = SlotId> {
        (1..=9).map(SlotId::from_index)
    }

    pub fn inventory() -> impl Iterator<Item = SlotId> {
        (1..=INVENTORY_SLOTS).map(SlotId::Inv)
    }

    pub fn is_grid(self) -> bool {
        matches!(self, SlotId::Grid { .. })
    }

    pub fn is_inventory(self) -> bool {
        matches!(self, SlotId::Inv(_))
    }
}

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlotId::Output => f.write_str("0"),
            SlotId::Grid { row, col } => write!(f, "{}{}", (b'A' + row) as char, col + 1),
            SlotId::Inv(i) => write!(f, "I{i}"),
        }
    }
}

impl FromStr for SlotId {
    type Err = InvalidSlot;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || InvalidSlot(s.to_string());
        let bytes = s.as_bytes();
        match bytes {
            [b'0'] => Ok(SlotId::Output),
            [r @ b'A'..=b'C', c @ b'1'..=b'3'] => Ok(SlotId::Grid {
                row: r - b'A',
                col: c - b'1',
            }),
            [b'I', rest @ ..] if !rest.is_empty() && rest.len() <= 2 && rest[0] != b'0' => {
                let n: u8 = std::str::from_utf8(rest)
                    .ok()
                    .and_then(|d| d.parse().ok())
                    .ok_or_else(bad)?;
                if (1..=INVENTORY_SLOTS).contains(&n) {
                    Ok(SlotId::Inv(n))
                } else {
                    Err(bad())
                }
            }
            _ => Err(bad()),
        }
    }
}

impl Serialize for SlotId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SlotId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Stack {
    pub item: ItemId,
    pub count: u32,
}

impl Stack {
    pub fn new(item: ItemId, count: u32) -> Self {
        assert!(count >= 1, "stacks are never empty");
        Stack { item, count }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    /// Target observed in an inventory slot.
    Success,
    ImpossibleDeclared,
    MaxSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueEntry {
    pub speaker: Speaker,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GameState {
    slots: Vec<Option<Stack>>,
    pub env_steps_taken: u32,
    pub consecutive_nonenv_actions: u32,
    pub dialogue: Vec<DialogueEntry>,
    pub status: Status,
    pub max_steps: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum EnvAction {
    Move {
        from: SlotId,
        to: SlotId,
        quantity: u32,
    },
    Smelt {
        from: SlotId,
        to: SlotId,
        quantity: u32,
    },
    Impossible {
        reason: String,
    },
    NoOp,
}

impl fmt::Display for EnvAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvAction::Move { from, to, quantity } => {
                write!(f, "move: from {from} to {to} with quantity {quantity}")
            }
            EnvAction::Smelt { from, to, quantity } => {
                write!(f, "smelt: from {from} to {to} with quantity {quantity}")
            }
            EnvAction::Impossible { reason } => write!(f, "impossible: {reason}"),
            EnvAction::NoOp => f.write_str("no-op"),
        }
    }
}

/// Protocol errors: the call is rejected and no environment step is used.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum InvalidAction {
    #[error("You cannot move or smelt items into slot 0")]
    OutputDestination,
    #[error("quantity must be a positive integer")]
    NonPositiveQuantity,
    #[error("the episode has already ended")]
    Terminated,
}

pub const NOTHING_HAPPENED: &str = "Nothing happened: the destination slot already contains an item.";

impl GameState {
    pub fn new(max_steps: u32) -> Self {
        GameState {
            slots: vec![None; SLOT_COUNT],
            env_steps_taken: 0,
            consecutive_nonenv_actions: 0,
            dialogue: Vec::new(),
            status: Status::Running,
            max_steps,
        }
    }

    /// Builds a state from inventory contents; the output slot is derived.
    pub fn with_slots(
        contents: impl IntoIterator<Item = (SlotId, Stack)>,
        recipes: &RecipeBook,
        max_steps: u32,
    ) -> Self {
        let mut s = GameState::new(max_steps);
        for (slot, stack) in contents {
            assert_ne!(slot, SlotId::Output, "the output slot is derived");
            s.slots[slot.index()] = Some(stack);
        }
        s.refresh_output(recipes);
        s
    }

    pub fn slot(&self, slot: SlotId) -> Option<&Stack> {
        self.slots[slot.index()].as_ref()
    }

    fn take(&mut self, slot: SlotId, n: u32) {
        let cell = &mut self.slots[slot.index()];
        let stack = cell.as_mut().expect("taking from an occupied slot");
        stack.count -= n;
        if stack.count == 0 {
            *cell = None;
        }
    }

    /// Occupied slots in canonical order.
    pub fn occupied(&self) -> impl Iterator<Item = (SlotId, &Stack)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|s| (SlotId::from_index(i), s)))
    }

    pub fn grid(&self) -> Grid {
        let mut g: Grid = Default::default();
        for slot in SlotId::grid_cells() {
            if let (SlotId::Grid { row, col }, Some(st)) = (slot, self.slot(slot)) {
                g[row as usize][col as usize] = Some((st.item.clone(), st.count));
            }
        }
        g
    }

    pub fn refresh_output(&mut self, recipes: &RecipeBook) {
        self.slots[0] = recipes
            .match_grid(&self.grid())
            .map(|(_, item, n)| Stack::new(item, n));
    }

    /// Item totals over every slot except the derived output slot.
    pub fn item_totals(&self) -> BTreeMap<ItemId, u32> {
        let mut out = BTreeMap::new();
        for (slot, st) in self.occupied() {
            if slot != SlotId::Output {
                *out.entry(st.item.clone()).or_insert(0) += st.count;
            }
        }
        out
    }

    /// Lowest-index inventory slot holding `item`.
    pub fn find_in_inventory(&self, item: &ItemId) -> Option<SlotId> {
        SlotId::inventory().find(|&s| self.slot(s).is_some_and(|st| &st.item == item))
    }

    pub fn first_free_inventory(&self) -> Option<SlotId> {
        SlotId::inventory().find(|&s| self.slot(s).is_none())
    }

    pub fn is_running(&self) -> bool {
        self.status == Status::Running
    }

    pub fn push_dialogue(&mut self, speaker: Speaker, content: impl Into<String>) {
        self.dialogue.push(DialogueEntry {
            speaker,
            content: content.into(),
        });
    }

    /// Applies one environment action in place. Rejected calls leave the
    /// state untouched; accepted ones always consume one step.
    pub fn apply(
        &mut self,
        action: &EnvAction,
        recipes: &RecipeBook,
    ) -> Result<Option<String>, InvalidAction> {
        if !self.is_running() {
            return Err(InvalidAction::Terminated);
        }
        match action {
            EnvAction::Move { to, quantity, .. } | EnvAction::Smelt { to, quantity, .. } => {
                if *to == SlotId::Output {
                    return Err(InvalidAction::OutputDestination);
                }
                if *quantity == 0 {
                    return Err(InvalidAction::NonPositiveQuantity);
                }
            }
            _ => {}
        }

        let feedback = match action {
            EnvAction::Move { from, to, quantity } => self.do_move(*from, *to, *quantity, recipes),
            EnvAction::Smelt { from, to, quantity } => {
                self.do_smelt(*from, *to, *quantity, recipes)
            }
            EnvAction::Impossible { .. } => {
                self.status = Status::ImpossibleDeclared;
                None
            }
            EnvAction::NoOp => None,
        };
        self.env_steps_taken += 1;
        self.consecutive_nonenv_actions = 0;
        if self.status == Status::Running && self.env_steps_taken >= self.max_steps {
            self.status = Status::MaxSteps;
        }
        Ok(feedback)
    }

    fn do_move(
        &mut self,
        from: SlotId,
        to: SlotId,
        quantity: u32,
        recipes: &RecipeBook,
    ) -> Option<String> {
        if self.slot(to).is_some() {
            return Some(NOTHING_HAPPENED.to_string());
        }
        let Some(src) = self.slot(from).cloned() else {
            return Some(format!("Nothing happened: slot {from} is empty."));
        };
        if from == SlotId::Output {
            if quantity != src.count {
                return Some(format!(
                    "Nothing happened: the output slot holds {} {}; move the full quantity.",
                    src.count, src.item
                ));
            }
            for cell in SlotId::grid_cells() {
                if self.slot(cell).is_some() {
                    self.take(cell, 1);
                }
            }
            self.slots[to.index()] = Some(src);
        } else {
            let n = quantity.min(src.count);
            self.take(from, n);
            self.slots[to.index()] = Some(Stack::new(src.item, n));
        }
        self.refresh_output(recipes);
        None
    }

    fn do_smelt(
        &mut self,
        from: SlotId,
        to: SlotId,
        quantity: u32,
        recipes: &RecipeBook,
    ) -> Option<String> {
        if from == SlotId::Output {
            return Some("Nothing happened: cannot smelt from slot 0.".to_string());
        }
        let Some(src) = self.slot(from).cloned() else {
            return Some(format!("Nothing happened: slot {from} is empty."));
        };
        let Some((out, per_unit)) = recipes.match_smelt(&src.item) else {
            return Some(format!("Nothing happened: {} cannot be smelted.", src.item));
        };
        if self.slot(to).is_some() {
            return Some(NOTHING_HAPPENED.to_string());
        }
        let n = quantity.min(src.count);
        self.take(from, n);
        self.slots[to.index()] = Some(Stack::new(out, n * per_unit));
        self.refresh_output(recipes);
        None
    }
}

/// Pure variant of [`GameState::apply`].
pub fn apply_action(
    state: &GameState,
    action: &EnvAction,
    recipes: &RecipeBook,
) -> Result<(GameState, Option<String>), InvalidAction> {
    let mut next = state.clone();
    let feedback = next.apply(action, recipes)?;
    Ok((next, feedback))
}

pub fn render_observation(state: &GameState, target: &ItemId) -> String {
    let mut out = format!("Craft an item of type: {target}\ninventory:");
    for (slot, st) in state.occupied() {
        out.push_str(&format!("\n- {} {} quantity {}", st.item, slot, st.count));
    }
    out
}

/// The target counts as crafted once it sits in an inventory slot.
pub fn check_success(state: &GameState, target: &ItemId) -> bool {
    SlotId::inventory().any(|s| state.slot(s).is_some_and(|st| &st.item == target))
}
