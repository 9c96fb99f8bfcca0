//! Task generation, low/high repetition splits and curriculum ordering.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{GameState, SlotId, Stack, DEFAULT_MAX_STEPS};
use crate::planner::{ground, solve_default, RecipePlan, SolveOutcome};
use crate::recipe::{ItemId, RecipeBook, RecipeGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Complexity {
    Easy,
    Medium,
    Hard,
    Impossible,
}

impl Complexity {
    pub const ALL: [Complexity; 4] = [
        Complexity::Easy,
        Complexity::Medium,
        Complexity::Hard,
        Complexity::Impossible,
    ];

    /// Class of a solvable plan with `applications` recipe applications.
    pub fn for_applications(applications: u32) -> Option<Complexity> {
        match applications {
            0 => None,
            1 => Some(Complexity::Easy),
            2..=3 => Some(Complexity::Medium),
            _ => Some(Complexity::Hard),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Complexity::Easy => "easy",
            Complexity::Medium => "medium",
            Complexity::Hard => "hard",
            Complexity::Impossible => "impossible",
        }
    }
}

impl fmt::Display for Complexity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub id: String,
    pub target: ItemId,
    pub initial_slots: BTreeMap<SlotId, Stack>,
    pub distractor_count: u32,
    pub complexity: Complexity,
    pub solvable: bool,
    pub optimal_recipe_applications: u32,
    pub optimal_env_steps: u32,
}

impl TaskExample {
    pub fn initial_state(&self, recipes: &RecipeBook, max_steps: u32) -> GameState {
        GameState::with_slots(self.initial_slots.iter().map(|(s, st)| (*s, st.clone())), recipes, max_steps)
    }

    pub fn item_totals(&self) -> BTreeMap<ItemId, u32> {
        let mut out = BTreeMap::new();
        for st in self.initial_slots.values() {
            *out.entry(st.item.clone()).or_insert(0) += st.count;
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot generate a {complexity} example for {target}: {constraint}")]
    Infeasible {
        target: ItemId,
        complexity: Complexity,
        constraint: String,
    },
    #[error("split {split}: {message}")]
    Split { split: SplitName, message: String },
    #[error("distractor count must be 4, 8 or 16, got {0}")]
    DistractorCount(u32),
    #[error("split file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const DISTRACTOR_COUNTS: [u32; 3] = [4, 8, 16];
const ATTEMPTS: usize = 300;
const MAX_RECURSION: usize = 6;

/// Raw material multiset for one target, grown by randomly expanding
/// ingredients into the recipes that make them.
fn expand_materials(
    rng: &mut ChaCha8Rng,
    target: &ItemId,
    recipes: &RecipeBook,
    expand_prob: f64,
) -> Option<BTreeMap<ItemId, u32>> {
    fn go(
        rng: &mut ChaCha8Rng,
        item: &ItemId,
        need: u32,
        recipes: &RecipeBook,
        expand_prob: f64,
        path: &mut Vec<ItemId>,
        out: &mut BTreeMap<ItemId, u32>,
        top: bool,
    ) {
        let producers: Vec<_> = recipes
            .producers(item)
            .into_iter()
            .filter(|r| r.ingredients().keys().all(|i| !path.contains(i) && i != item))
            .collect();
        let craft = !producers.is_empty()
            && path.len() < MAX_RECURSION
            && (top || rng.gen_bool(expand_prob));
        if !craft {
            *out.entry(item.clone()).or_insert(0) += need;
            return;
        }
        let r = *producers.choose(rng).expect("non-empty");
        let times = need.div_ceil(r.output_count);
        path.push(item.clone());
        for (ing, n) in r.ingredients() {
            go(rng, &ing, n * times, recipes, expand_prob, path, out, false);
        }
        path.pop();
    }
    if recipes.producers(target).is_empty() {
        return None;
    }
    let mut out = BTreeMap::new();
    go(rng, target, 1, recipes, expand_prob, &mut Vec::new(), &mut out, true);
    Some(out)
}

fn expand_prob_for(complexity: Complexity, attempt: usize) -> f64 {
    match complexity {
        Complexity::Easy => 0.0,
        Complexity::Medium => 0.5,
        Complexity::Hard => {
            if attempt % 2 == 0 {
                1.0
            } else {
                0.75
            }
        }
        Complexity::Impossible => 0.5,
    }
}

/// Places each kind as one stack in a distinct random inventory slot.
fn place(rng: &mut ChaCha8Rng, kinds: &BTreeMap<ItemId, u32>) -> Option<BTreeMap<SlotId, Stack>> {
    let mut slots: Vec<SlotId> = SlotId::inventory().collect();
    if kinds.len() > slots.len() {
        return None;
    }
    slots.shuffle(rng);
    Some(
        kinds
            .iter()
            .zip(slots)
            .map(|((item, n), s)| (s, Stack::new(item.clone(), *n)))
            .collect(),
    )
}

fn pick_distractors(
    rng: &mut ChaCha8Rng,
    count: u32,
    exclude: &BTreeSet<ItemId>,
    recipes: &RecipeBook,
) -> Option<BTreeMap<ItemId, u32>> {
    let pool: Vec<ItemId> = recipes.items().into_iter().filter(|i| !exclude.contains(i)).collect();
    if pool.len() < count as usize {
        return None;
    }
    Some(
        pool.choose_multiple(rng, count as usize)
            .map(|i| (i.clone(), rng.gen_range(1..=8)))
            .collect(),
    )
}

struct Labels {
    solvable: bool,
    applications: u32,
    env_steps: u32,
    consumed: BTreeSet<ItemId>,
}

fn label(slots: &BTreeMap<SlotId, Stack>, target: &ItemId, recipes: &RecipeBook) -> Option<Labels> {
    let state = GameState::with_slots(slots.iter().map(|(s, st)| (*s, st.clone())), recipes, DEFAULT_MAX_STEPS);
    match solve_default(&state.item_totals(), target, recipes) {
        SolveOutcome::Plan(plan) => {
            let grounded = ground(&plan, &state, recipes).ok()?;
            Some(Labels {
                solvable: true,
                applications: plan.total_applications(),
                env_steps: grounded.actions.len() as u32,
                consumed: plan.consumed_items(recipes).into_keys().collect(),
            })
        }
        SolveOutcome::Impossible { .. } => Some(Labels {
            solvable: false,
            applications: 0,
            env_steps: 0,
            consumed: BTreeSet::new(),
        }),
        SolveOutcome::BoundExhausted => None,
    }
}

/// Tries one material set; returns the example if it carries the requested
/// labels.
fn realize(
    rng: &mut ChaCha8Rng,
    id: &str,
    target: &ItemId,
    complexity: Complexity,
    distractors: u32,
    materials: &BTreeMap<ItemId, u32>,
    recipes: &RecipeBook,
) -> Option<TaskExample> {
    let mut exclude: BTreeSet<ItemId> = materials.keys().cloned().collect();
    exclude.insert(target.clone());
    let extra = pick_distractors(rng, distractors, &exclude, recipes)?;
    let mut all = materials.clone();
    all.extend(extra.iter().map(|(i, n)| (i.clone(), *n)));
    let slots = place(rng, &all)?;
    let labels = label(&slots, target, recipes)?;
    if labels.solvable != (complexity != Complexity::Impossible) {
        return None;
    }
    if labels.solvable {
        if Complexity::for_applications(labels.applications) != Some(complexity)
            || labels.env_steps > DEFAULT_MAX_STEPS
            || extra.keys().any(|d| labels.consumed.contains(d))
            || materials.keys().any(|k| !labels.consumed.contains(k))
        {
            return None;
        }
    }
    Some(TaskExample {
        id: id.to_string(),
        target: target.clone(),
        initial_slots: slots,
        distractor_count: distractors,
        complexity,
        solvable: labels.solvable,
        optimal_recipe_applications: labels.applications,
        optimal_env_steps: labels.env_steps,
    })
}

/// Material set for a target at a complexity class. Impossible sets are a
/// solvable set with one raw kind withheld.
fn materials_for(
    rng: &mut ChaCha8Rng,
    target: &ItemId,
    complexity: Complexity,
    recipes: &RecipeBook,
    attempt: usize,
) -> Option<BTreeMap<ItemId, u32>> {
    let mut m = expand_materials(rng, target, recipes, expand_prob_for(complexity, attempt))?;
    if complexity == Complexity::Impossible {
        let kinds: Vec<ItemId> = m.keys().cloned().collect();
        let drop = kinds.choose(rng)?;
        m.remove(drop);
        if m.is_empty() {
            return None;
        }
    }
    Some(m)
}

pub fn generate_example(
    rng: &mut ChaCha8Rng,
    id: &str,
    target: &ItemId,
    complexity: Complexity,
    distractors: u32,
    recipes: &RecipeBook,
) -> Result<TaskExample, DatasetError> {
    generate_with_materials(rng, id, target, complexity, distractors, recipes).map(|(ex, _)| ex)
}

/// Like [`generate_example`], also returning the non-distractor materials.
pub fn generate_with_materials(
    rng: &mut ChaCha8Rng,
    id: &str,
    target: &ItemId,
    complexity: Complexity,
    distractors: u32,
    recipes: &RecipeBook,
) -> Result<(TaskExample, BTreeMap<ItemId, u32>), DatasetError> {
    if !DISTRACTOR_COUNTS.contains(&distractors) {
        return Err(DatasetError::DistractorCount(distractors));
    }
    for attempt in 0..ATTEMPTS {
        let Some(m) = materials_for(rng, target, complexity, recipes, attempt) else {
            continue;
        };
        if let Some(ex) = realize(rng, id, target, complexity, distractors, &m, recipes) {
            return Ok((ex, m));
        }
    }
    Err(DatasetError::Infeasible {
        target: target.clone(),
        complexity,
        constraint: match complexity {
            Complexity::Easy => "one recipe application".into(),
            Complexity::Medium => "two or three recipe applications".into(),
            Complexity::Hard => format!("at least four applications within {DEFAULT_MAX_STEPS} steps"),
            Complexity::Impossible => "a withheld raw item with no alternative path".into(),
        },
    })
}

/// Same target, class and materials in a fresh random arrangement with
/// fresh distractors.
pub fn regenerate_like(
    rng: &mut ChaCha8Rng,
    id: &str,
    target: &ItemId,
    complexity: Complexity,
    materials: &BTreeMap<ItemId, u32>,
    distractors: u32,
    recipes: &RecipeBook,
) -> Result<TaskExample, DatasetError> {
    for _ in 0..ATTEMPTS {
        if let Some(ex) = realize(rng, id, target, complexity, distractors, materials, recipes) {
            return Ok(ex);
        }
    }
    Err(DatasetError::Infeasible {
        target: target.clone(),
        complexity,
        constraint: "re-arranging the template materials".into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Low,
    High,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Low => "low",
            SplitName::High => "high",
        })
    }
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "low" => Ok(SplitName::Low),
            "high" => Ok(SplitName::High),
            _ => Err(format!("unknown split {s:?}; expected low or high")),
        }
    }
}

/// Class counts of the full-size evaluation set.
pub const FULL_HISTOGRAM: [u32; 4] = [200, 100, 170, 100];
pub const FULL_SIZE: u32 = 570;
pub const FULL_UNIQUE_LOW: u32 = 347;
pub const FULL_UNIQUE_HIGH: u32 = 107;
pub const DESK_SIZE: u32 = 80;
pub const HIGH_EXAMPLES_PER_TARGET: f64 = 5.3;
/// Distractor frequencies of the full-size set, per 4/8/16.
pub const DISTRACTOR_WEIGHTS: [u32; 3] = [190, 190, 190];

/// Largest-remainder apportionment of `total` in proportion to `weights`.
pub fn apportion(total: u32, weights: &[u32]) -> Vec<u32> {
    let sum: u64 = weights.iter().map(|&w| w as u64).sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<u32> = weights.iter().map(|&w| (total as u64 * w as u64 / sum) as u32).collect();
    let mut rem: Vec<(u64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| ((total as u64 * w as u64) % sum, i))
        .collect();
    // Larger remainder first, earlier class on ties.
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = total - out.iter().sum::<u32>();
    for &(_, i) in rem.iter().take(missing as usize) {
        out[i] += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: SplitName,
    pub size: u32,
    /// Examples per class, in `Complexity::ALL` order.
    pub histogram: [u32; 4],
    pub unique_target_budget: u32,
}

impl SplitSpec {
    /// Split of `size` examples with the full set's class proportions.
    pub fn scaled(name: SplitName, size: u32) -> Self {
        let h = apportion(size, &FULL_HISTOGRAM);
        let budget = match name {
            SplitName::Low => (size as f64 * FULL_UNIQUE_LOW as f64 / FULL_SIZE as f64).round() as u32,
            SplitName::High => (size as f64 / HIGH_EXAMPLES_PER_TARGET).round() as u32,
        };
        SplitSpec {
            name,
            size,
            histogram: [h[0], h[1], h[2], h[3]],
            unique_target_budget: budget.max(4),
        }
    }

    pub fn desk(name: SplitName) -> Self {
        SplitSpec::scaled(name, DESK_SIZE)
    }

    pub fn full(name: SplitName) -> Self {
        let mut spec = SplitSpec::scaled(name, FULL_SIZE);
        spec.unique_target_budget = match name {
            SplitName::Low => FULL_UNIQUE_LOW,
            SplitName::High => FULL_UNIQUE_HIGH,
        };
        spec
    }
}

/// Targets for which a class can be generated, probed with a fixed seed.
pub fn feasible_targets(complexity: Complexity, recipes: &RecipeBook) -> Vec<ItemId> {
    let outputs: BTreeSet<ItemId> = recipes.recipes().iter().map(|r| r.output.clone()).collect();
    outputs
        .into_iter()
        .filter(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            generate_example(&mut rng, "probe", t, complexity, 4, recipes).is_ok()
        })
        .collect()
}

fn distractor_schedule(rng: &mut ChaCha8Rng, size: u32) -> Vec<u32> {
    let counts = apportion(size, &DISTRACTOR_WEIGHTS);
    let mut out: Vec<u32> = DISTRACTOR_COUNTS
        .iter()
        .zip(counts)
        .flat_map(|(&d, n)| std::iter::repeat_n(d, n as usize))
        .collect();
    out.shuffle(rng);
    out
}

/// Splits `count` examples over `targets`, each target at least once.
fn spread(rng: &mut ChaCha8Rng, count: u32, targets: &[ItemId]) -> Vec<ItemId> {
    let mut out: Vec<ItemId> = targets.iter().take(count as usize).cloned().collect();
    let mut i = 0;
    while (out.len() as u32) < count {
        out.push(targets[i % targets.len()].clone());
        i += 1;
    }
    out.shuffle(rng);
    out
}

pub fn build_split(spec: &SplitSpec, seed: u64, recipes: &RecipeBook) -> Result<Vec<TaskExample>, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (spec.name as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let per_class_targets = apportion(spec.unique_target_budget, &spec.histogram);
    let mut distractors = distractor_schedule(&mut rng, spec.size).into_iter();
    let mut used_targets: BTreeSet<ItemId> = BTreeSet::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut out = Vec::with_capacity(spec.size as usize);

    for (ci, &complexity) in Complexity::ALL.iter().enumerate() {
        let count = spec.histogram[ci];
        if count == 0 {
            continue;
        }
        let mut pool = feasible_targets(complexity, recipes);
        pool.shuffle(&mut rng);
        // Fresh targets first. While the book has enough of them, classes
        // get distinct targets and repetition is exactly the budgeted amount.
        pool.sort_by_key(|t| used_targets.contains(t));
        let mut want = per_class_targets[ci].clamp(1, count) as usize;
        if pool.is_empty() {
            return Err(DatasetError::Split {
                split: spec.name,
                message: format!("no target supports the {complexity} class"),
            });
        }
        if pool.len() < want {
            log::warn!(
                "{} split: {complexity} budgets {want} targets but the recipe book offers {}",
                spec.name,
                pool.len()
            );
            want = pool.len();
        }
        let chosen: Vec<ItemId> = pool.into_iter().take(want).collect();
        used_targets.extend(chosen.iter().cloned());
        let mut templates: BTreeMap<ItemId, BTreeMap<ItemId, u32>> = BTreeMap::new();
        for target in spread(&mut rng, count, &chosen) {
            let d = distractors.next().expect("schedule covers the split");
            let mut made = None;
            for _ in 0..20 {
                let id = format!("{}-{:04}", spec.name, out.len());
                let (ex, m) = match (spec.name, templates.get(&target)) {
                    (SplitName::High, Some(m)) => {
                        (regenerate_like(&mut rng, &id, &target, complexity, m, d, recipes)?, m.clone())
                    }
                    _ => generate_with_materials(&mut rng, &id, &target, complexity, d, recipes)?,
                };
                if seen.insert(uniqueness_key(&ex)) {
                    made = Some((ex, m));
                    break;
                }
            }
            let (ex, m) = made.ok_or_else(|| DatasetError::Split {
                split: spec.name,
                message: format!("could not draw a fresh initial state for {target}"),
            })?;
            templates.entry(target).or_insert(m);
            out.push(ex);
        }
    }
    // Interleave classes so lifelong runs see a mixed stream.
    out.shuffle(&mut rng);
    for (i, ex) in out.iter_mut().enumerate() {
        ex.id = format!("{}-{:04}", spec.name, i);
    }
    Ok(out)
}

fn uniqueness_key(ex: &TaskExample) -> String {
    serde_json::to_string(&(&ex.target, &ex.initial_slots)).expect("serializable")
}

pub fn histogram(examples: &[TaskExample]) -> [u32; 4] {
    let mut h = [0; 4];
    for ex in examples {
        h[Complexity::ALL.iter().position(|c| *c == ex.complexity).unwrap()] += 1;
    }
    h
}

pub fn unique_targets(examples: &[TaskExample]) -> usize {
    examples.iter().map(|e| &e.target).collect::<BTreeSet<_>>().len()
}

/// Removes seeded-random edges from every cycle until the graph is acyclic.
pub fn break_cycles(graph: &RecipeGraph, rng: &mut ChaCha8Rng) -> BTreeSet<(String, String)> {
    let mut edges = graph.edges.clone();
    loop {
        let Some(cycle) = find_cycle(&graph.nodes, &edges) else {
            return edges;
        };
        let victim = cycle.choose(rng).expect("cycles have edges").clone();
        edges.remove(&victim);
    }
}

fn find_cycle(nodes: &[String], edges: &BTreeSet<(String, String)>) -> Option<Vec<(String, String)>> {
    let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (a, b) in edges {
        adj.entry(a.as_str()).or_default().push(b.as_str());
    }
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut color: BTreeMap<&str, u8> = nodes.iter().map(|n| (n.as_str(), 0)).collect();
    let mut stack: Vec<&str> = Vec::new();
    fn dfs<'a>(
        n: &'a str,
        adj: &BTreeMap<&'a str, Vec<&'a str>>,
        color: &mut BTreeMap<&'a str, u8>,
        stack: &mut Vec<&'a str>,
    ) -> Option<Vec<(String, String)>> {
        color.insert(n, 1);
        stack.push(n);
        for &m in adj.get(n).map(|v| v.as_slice()).unwrap_or(&[]) {
            match color.get(m).copied().unwrap_or(0) {
                1 => {
                    let start = stack.iter().position(|&s| s == m).unwrap();
                    let mut cyc: Vec<(String, String)> = stack[start..]
                        .windows(2)
                        .map(|w| (w[0].to_string(), w[1].to_string()))
                        .collect();
                    cyc.push((n.to_string(), m.to_string()));
                    return Some(cyc);
                }
                0 => {
                    if let Some(c) = dfs(m, adj, color, stack) {
                        return Some(c);
                    }
                }
                _ => {}
            }
        }
        stack.pop();
        color.insert(n, 2);
        None
    }
    for n in nodes {
        if color[n.as_str()] == 0 {
            if let Some(c) = dfs(n, &adj, &mut color, &mut stack) {
                return Some(c);
            }
        }
    }
    None
}

/// Kahn order with dependencies first; ties broken by node name.
pub fn topo_ranks(nodes: &[String], edges: &BTreeSet<(String, String)>) -> BTreeMap<String, usize> {
    let mut indeg: BTreeMap<&str, usize> = nodes.iter().map(|n| (n.as_str(), 0)).collect();
    // (r, s) means r needs s, so s comes first.
    let mut users: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (r, s) in edges {
        *indeg.entry(r.as_str()).or_insert(0) += 1;
        users.entry(s.as_str()).or_default().push(r.as_str());
    }
    let mut ready: BTreeSet<&str> = indeg.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
    let mut ranks = BTreeMap::new();
    while let Some(n) = ready.pop_first() {
        ranks.insert(n.to_string(), ranks.len());
        for &u in users.get(n).map(|v| v.as_slice()).unwrap_or(&[]) {
            let d = indeg.get_mut(u).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.insert(u);
            }
        }
    }
    ranks
}

/// Orders examples by the rank of the earliest recipe producing their
/// target, ties by id. Also returns the reduced edge set used.
pub fn curriculum_order(
    examples: &[TaskExample],
    graph: &RecipeGraph,
    recipes: &RecipeBook,
    rng: &mut ChaCha8Rng,
) -> (Vec<TaskExample>, BTreeSet<(String, String)>) {
    let edges = break_cycles(graph, rng);
    let ranks = topo_ranks(&graph.nodes, &edges);
    let rank_of = |t: &ItemId| {
        recipes
            .producers(t)
            .iter()
            .filter_map(|r| ranks.get(&r.id).copied())
            .min()
            .unwrap_or(usize::MAX)
    };
    let mut out = examples.to_vec();
    out.sort_by(|a, b| rank_of(&a.target).cmp(&rank_of(&b.target)).then_with(|| a.id.cmp(&b.id)));
    (out, edges)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitHeader {
    pub spec: SplitSpec,
    pub seed: u64,
    pub recipes_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum SplitRecord {
    Header(SplitHeader),
    Example(TaskExample),
}

pub fn write_split(path: &Path, header: &SplitHeader, examples: &[TaskExample]) -> Result<(), DatasetError> {
    std::fs::write(path, split_to_jsonl(header, examples))?;
    Ok(())
}

pub fn split_to_jsonl(header: &SplitHeader, examples: &[TaskExample]) -> String {
    let mut out = serde_json::to_string(&SplitRecord::Header(header.clone())).expect("serializable");
    out.push('\n');
    for ex in examples {
        out.push_str(&serde_json::to_string(&SplitRecord::Example(ex.clone())).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn parse_split(text: &str) -> Result<(SplitHeader, Vec<TaskExample>), DatasetError> {
    let mut header = None;
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: SplitRecord = serde_json::from_str(line).map_err(|e| DatasetError::Format {
            line: i + 1,
            message: e.to_string(),
        })?;
        match rec {
            SplitRecord::Header(h) if header.is_none() && examples.is_empty() => header = Some(h),
            SplitRecord::Header(_) => {
                return Err(DatasetError::Format {
                    line: i + 1,
                    message: "header must be the first record".into(),
                })
            }
            SplitRecord::Example(ex) => examples.push(ex),
        }
    }
    let header = header.ok_or(DatasetError::Format {
        line: 1,
        message: "missing header record".into(),
    })?;
    Ok((header, examples))
}

pub fn read_split(path: &Path) -> Result<(SplitHeader, Vec<TaskExample>), DatasetError> {
    parse_split(&std::fs::read_to_string(path)?)
}

/// Applications of a plan rendered as "recipe×n" for logs.
pub fn describe_plan(plan: &RecipePlan) -> String {
    plan.steps
        .iter()
        .map(|(r, n)| format!("{r}x{n}"))
        .collect::<Vec<_>>()
        .join(", ")
}
