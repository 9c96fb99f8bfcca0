//! Shortest recipe-level plans over abstract inventories, impossibility
//! analysis, and lowering of plans to concrete slot actions.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{check_success, EnvAction, GameState, SlotId};
use crate::recipe::{ItemId, Recipe, RecipeBook, RecipeKind};

pub const DEFAULT_DEPTH_BOUND: u32 = 12;

/// Ordered recipe applications; consecutive repeats are merged.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecipePlan {
    pub steps: Vec<(String, u32)>,
}

impl RecipePlan {
    pub fn from_applications(ids: impl IntoIterator<Item = String>) -> Self {
        let mut steps: Vec<(String, u32)> = Vec::new();
        for id in ids {
            match steps.last_mut() {
                Some((last, n)) if *last == id => *n += 1,
                _ => steps.push((id, 1)),
            }
        }
        RecipePlan { steps }
    }

    pub fn applications(&self) -> impl Iterator<Item = &str> {
        self.steps
            .iter()
            .flat_map(|(id, n)| std::iter::repeat(id.as_str()).take(*n as usize))
    }

    pub fn total_applications(&self) -> u32 {
        self.steps.iter().map(|(_, n)| n).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Items consumed by the plan (with multiplicity), in sorted order.
    pub fn consumed_items(&self, recipes: &RecipeBook) -> BTreeMap<ItemId, u32> {
        let mut out = BTreeMap::new();
        for id in self.applications() {
            if let Some(r) = recipes.get(id) {
                for (item, n) in r.ingredients() {
                    *out.entry(item).or_insert(0) += n;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum SolveOutcome {
    Plan(RecipePlan),
    /// Proven: the reachable set closed without producing the target.
    Impossible { missing: Option<ItemId> },
    /// The depth bound cut off a search that was still expanding.
    BoundExhausted,
}

impl SolveOutcome {
    pub fn plan(&self) -> Option<&RecipePlan> {
        match self {
            SolveOutcome::Plan(p) => Some(p),
            _ => None,
        }
    }
}

/// Recipes that can contribute to producing `target`, sorted by id.
pub fn relevant_recipes<'a>(target: &ItemId, recipes: &'a RecipeBook) -> Vec<&'a Recipe> {
    let mut seen_items = BTreeSet::new();
    let mut stack = vec![target.clone()];
    let mut out: BTreeMap<&str, &Recipe> = BTreeMap::new();
    while let Some(item) = stack.pop() {
        if !seen_items.insert(item.clone()) {
            continue;
        }
        for r in recipes.producers(&item) {
            out.insert(&r.id, r);
            stack.extend(r.ingredients().into_keys());
        }
    }
    out.into_values().collect()
}

struct Compiled {
    items: Vec<ItemId>,
    /// (recipe id, consumed (item idx, n), output item idx, output count)
    rules: Vec<(String, Vec<(usize, u16)>, usize, u16)>,
    target: usize,
}

fn compile(target: &ItemId, recipes: &RecipeBook) -> Compiled {
    let relevant = relevant_recipes(target, recipes);
    let mut items: BTreeSet<ItemId> = BTreeSet::from([target.clone()]);
    for r in &relevant {
        items.insert(r.output.clone());
        items.extend(r.ingredients().into_keys());
    }
    let items: Vec<ItemId> = items.into_iter().collect();
    let idx: HashMap<&ItemId, usize> = items.iter().enumerate().map(|(i, it)| (it, i)).collect();
    let rules = relevant
        .iter()
        .map(|r| {
            let consumed = r
                .ingredients()
                .iter()
                .map(|(it, n)| (idx[it], *n as u16))
                .collect();
            (r.id.clone(), consumed, idx[&r.output], r.output_count as u16)
        })
        .collect();
    let target = idx[target];
    Compiled {
        items,
        rules,
        target,
    }
}

/// Breadth-first search for the lexicographically smallest among the
/// shortest application sequences.
pub fn solve(
    inventory: &BTreeMap<ItemId, u32>,
    target: &ItemId,
    recipes: &RecipeBook,
    depth_bound: u32,
) -> SolveOutcome {
    if inventory.get(target).copied().unwrap_or(0) > 0 {
        return SolveOutcome::Plan(RecipePlan::default());
    }
    // Kind-level reachability is necessary, and settles most impossible
    // inventories before the search can hit the depth bound.
    let have = inventory.iter().filter(|(_, n)| **n > 0).map(|(i, _)| i.clone());
    if !reachable_kinds(have, recipes).contains(target) {
        return SolveOutcome::Impossible {
            missing: missing_requirement(inventory, target, recipes),
        };
    }
    let c = compile(target, recipes);
    let start: Vec<u16> = c
        .items
        .iter()
        .map(|it| inventory.get(it).copied().unwrap_or(0).min(u16::MAX as u32) as u16)
        .collect();

    // Arena of (state, parent, rule, depth).
    let mut nodes: Vec<(Vec<u16>, usize, usize, u32)> = vec![(start.clone(), usize::MAX, 0, 0)];
    let mut visited: std::collections::HashSet<Vec<u16>> = std::collections::HashSet::from([start]);
    let mut queue = VecDeque::from([0usize]);
    let mut cut_off = false;

    while let Some(n) = queue.pop_front() {
        let (state, _, _, depth) = nodes[n].clone();
        if state[c.target] > 0 {
            let mut ids = Vec::new();
            let mut cur = n;
            while nodes[cur].1 != usize::MAX {
                ids.push(c.rules[nodes[cur].2].0.clone());
                cur = nodes[cur].1;
            }
            ids.reverse();
            return SolveOutcome::Plan(RecipePlan::from_applications(ids));
        }
        for (ri, (_, consumed, out, out_n)) in c.rules.iter().enumerate() {
            if consumed.iter().any(|&(i, k)| state[i] < k) {
                continue;
            }
            let mut next = state.clone();
            for &(i, k) in consumed {
                next[i] -= k;
            }
            next[*out] = next[*out].saturating_add(*out_n);
            if visited.contains(&next) {
                continue;
            }
            if depth >= depth_bound {
                cut_off = true;
                continue;
            }
            visited.insert(next.clone());
            nodes.push((next, n, ri, depth + 1));
            queue.push_back(nodes.len() - 1);
        }
    }
    if cut_off {
        SolveOutcome::BoundExhausted
    } else {
        SolveOutcome::Impossible {
            missing: missing_requirement(inventory, target, recipes),
        }
    }
}

pub fn solve_default(
    inventory: &BTreeMap<ItemId, u32>,
    target: &ItemId,
    recipes: &RecipeBook,
) -> SolveOutcome {
    solve(inventory, target, recipes, DEFAULT_DEPTH_BOUND)
}

/// Item kinds obtainable from the kinds present, ignoring quantities.
pub fn reachable_kinds(have: impl IntoIterator<Item = ItemId>, recipes: &RecipeBook) -> BTreeSet<ItemId> {
    let mut reach: BTreeSet<ItemId> = have.into_iter().collect();
    loop {
        let before = reach.len();
        for r in recipes.recipes() {
            if r.ingredients().keys().all(|i| reach.contains(i)) {
                reach.insert(r.output.clone());
            }
        }
        if reach.len() == before {
            return reach;
        }
    }
}

/// Names the first requirement blocking `target`: the highest-level
/// unobtainable ingredient along the first-producer tree, or else the first
/// raw item whose stock falls short.
pub fn missing_requirement(
    inventory: &BTreeMap<ItemId, u32>,
    target: &ItemId,
    recipes: &RecipeBook,
) -> Option<ItemId> {
    let present = inventory.iter().filter(|(_, n)| **n > 0).map(|(i, _)| i.clone());
    let reach = reachable_kinds(present, recipes);
    if !reach.contains(target) {
        let mut path = BTreeSet::new();
        return unreachable_ingredient(target, &reach, recipes, &mut path).or(Some(target.clone()));
    }
    let mut stock = inventory.clone();
    let mut path = BTreeSet::new();
    deficit(target, 1, &mut stock, recipes, &mut path)
}

fn unreachable_ingredient(
    item: &ItemId,
    reach: &BTreeSet<ItemId>,
    recipes: &RecipeBook,
    path: &mut BTreeSet<ItemId>,
) -> Option<ItemId> {
    let producers = recipes.producers(item);
    let first = producers.first()?;
    path.insert(item.clone());
    let found = first
        .ingredients()
        .into_keys()
        .find(|ing| !reach.contains(ing) && !path.contains(ing));
    path.remove(item);
    found
}

fn deficit(
    item: &ItemId,
    qty: u32,
    stock: &mut BTreeMap<ItemId, u32>,
    recipes: &RecipeBook,
    path: &mut BTreeSet<ItemId>,
) -> Option<ItemId> {
    let have = stock.entry(item.clone()).or_insert(0);
    let used = (*have).min(qty);
    *have -= used;
    let remaining = qty - used;
    if remaining == 0 {
        return None;
    }
    let producers = recipes.producers(item);
    let Some(r) = producers
        .iter()
        .find(|r| r.ingredients().keys().all(|i| !path.contains(i)))
    else {
        return Some(item.clone());
    };
    let apps = remaining.div_ceil(r.output_count);
    path.insert(item.clone());
    let mut result = None;
    for (ing, n) in r.ingredients() {
        if let Some(m) = deficit(&ing, apps * n, stock, recipes, path) {
            result = Some(m);
            break;
        }
    }
    path.remove(item);
    if result.is_none() {
        *stock.entry(item.clone()).or_insert(0) += apps * r.output_count - remaining;
    }
    result
}

/// Solvability of the task from every item currently held outside slot 0.
pub fn replan_solvable(state: &GameState, target: &ItemId, recipes: &RecipeBook) -> bool {
    check_success(state, target)
        || matches!(
            solve_default(&state.item_totals(), target, recipes),
            SolveOutcome::Plan(_)
        )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedAction {
    pub action: EnvAction,
    /// Item being moved or smelted.
    pub item: ItemId,
    /// Index into [`GroundedPlan::applications`]; `None` for grid clearing.
    pub application: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Application {
    pub recipe_id: String,
    pub kind: RecipeKind,
    pub output_item: ItemId,
    pub times: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedPlan {
    pub actions: Vec<GroundedAction>,
    pub applications: Vec<Application>,
}

impl GroundedPlan {
    pub fn env_actions(&self) -> Vec<EnvAction> {
        self.actions.iter().map(|a| a.action.clone()).collect()
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GroundError {
    #[error("no inventory slot holds {0}")]
    NoSource(ItemId),
    #[error("no free inventory slot for {0}")]
    NoFreeSlot(ItemId),
    #[error("unknown recipe {0}")]
    UnknownRecipe(String),
    #[error("placement for {recipe} produced {produced:?}")]
    WrongOutput {
        recipe: String,
        produced: Option<ItemId>,
    },
}

/// Lowers a recipe plan to slot actions by simulating it on a copy of the
/// state. Occupied grid cells are first cleared to free inventory slots.
pub fn ground(
    plan: &RecipePlan,
    state: &GameState,
    recipes: &RecipeBook,
) -> Result<GroundedPlan, GroundError> {
    let mut sim = state.clone();
    sim.max_steps = u32::MAX;
    let mut out = GroundedPlan::default();

    let push = |sim: &mut GameState, out: &mut GroundedPlan, action: EnvAction, item: ItemId, app| {
        sim.apply(&action, recipes)
            .expect("grounded actions are well-formed");
        out.actions.push(GroundedAction {
            action,
            item,
            application: app,
        });
    };

    for cell in SlotId::grid_cells() {
        if let Some(st) = sim.slot(cell).cloned() {
            let to = sim
                .first_free_inventory()
                .ok_or_else(|| GroundError::NoFreeSlot(st.item.clone()))?;
            let action = EnvAction::Move {
                from: cell,
                to,
                quantity: st.count,
            };
            push(&mut sim, &mut out, action, st.item, None);
        }
    }

    for (id, times) in &plan.steps {
        let recipe = recipes
            .get(id)
            .ok_or_else(|| GroundError::UnknownRecipe(id.clone()))?;
        let app_index = out.applications.len();
        out.applications.push(Application {
            recipe_id: id.clone(),
            kind: recipe.kind(),
            output_item: recipe.output.clone(),
            times: *times,
        });
        if let crate::recipe::Pattern::Smelting(input) = &recipe.pattern {
            let mut remaining = *times;
            while remaining > 0 {
                let from = sim
                    .find_in_inventory(input)
                    .ok_or_else(|| GroundError::NoSource(input.clone()))?;
                let q = remaining.min(sim.slot(from).map_or(0, |s| s.count));
                let to = sim
                    .first_free_inventory()
                    .ok_or_else(|| GroundError::NoFreeSlot(recipe.output.clone()))?;
                let action = EnvAction::Smelt {
                    from,
                    to,
                    quantity: q,
                };
                push(&mut sim, &mut out, action, input.clone(), Some(app_index));
                remaining -= q;
            }
            continue;
        }
        for _ in 0..*times {
            for ((r, c), item) in recipe.canonical_placement() {
                let from = sim
                    .find_in_inventory(&item)
                    .ok_or_else(|| GroundError::NoSource(item.clone()))?;
                let action = EnvAction::Move {
                    from,
                    to: SlotId::grid(r, c),
                    quantity: 1,
                };
                push(&mut sim, &mut out, action, item, Some(app_index));
            }
            let produced = sim.slot(SlotId::Output).cloned();
            let Some(st) = produced.filter(|s| s.item == recipe.output) else {
                return Err(GroundError::WrongOutput {
                    recipe: id.clone(),
                    produced: sim.slot(SlotId::Output).map(|s| s.item.clone()),
                });
            };
            let to = sim
                .first_free_inventory()
                .ok_or_else(|| GroundError::NoFreeSlot(recipe.output.clone()))?;
            let action = EnvAction::Move {
                from: SlotId::Output,
                to,
                quantity: st.count,
            };
            push(&mut sim, &mut out, action, st.item, Some(app_index));
        }
    }
    Ok(out)
}

/// Planner verdict for a state: solve over its item totals, then ground.
pub fn plan_for_state(
    state: &GameState,
    target: &ItemId,
    recipes: &RecipeBook,
) -> Result<(SolveOutcome, Option<GroundedPlan>), GroundError> {
    let outcome = solve_default(&state.item_totals(), target, recipes);
    let grounded = match &outcome {
        SolveOutcome::Plan(p) => Some(ground(p, state, recipes)?),
        _ => None,
    };
    Ok((outcome, grounded))
}
