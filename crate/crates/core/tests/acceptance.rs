//! Acceptance suite. Each test prints one `PASS`/`FAIL` line and fails on
//! `FAIL`. Run with `cargo test -p how2-core --test acceptance -- --nocapture`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use num_rational::Ratio;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde_json::{json, Value};

use how2_core::agent::{run_episode, ActorPolicy, EpisodeConfig, EpisodeContext, EpisodeRecord, Mode, StepEvent};
use how2_core::dataset::{
    build_split, feasible_targets, generate_example, histogram, unique_targets, Complexity, SplitHeader, SplitName,
    SplitSpec, TaskExample, DISTRACTOR_COUNTS,
};
use how2_core::env::{apply_action, check_success, EnvAction, SlotId, Stack, Status, DEFAULT_MAX_STEPS};
use how2_core::gateway::{
    BackendError, ChatBackend, ChatRequest, ChatResponse, Gateway, MockBackend, MockResponse, MockRule, Role, Usage,
};
use how2_core::harness::{classify_failure, compute_metrics, run_examples, FailureClass, FailureInfo, RunConfig, RunOutput};
use how2_core::memory::{MemoryEvent, MemoryRoles, MemoryStore};
use how2_core::planner::{ground, solve, solve_default, SolveOutcome, DEFAULT_DEPTH_BOUND};
use how2_core::recipe::{ItemId, RecipeBook};
use how2_core::teacher::{non_executable_request, Teacher, TeacherError, TeacherKind};

type Q = Ratio<i64>;

// Pinned tolerances.
const C1_MIN_SOLVABLE: usize = 200;
const C1_TIME_LIMIT: Duration = Duration::from_secs(60);
const C2_MAX_SUBSET: usize = 6;
const C2_MAX_KINDS: usize = 4;
const C2_MAX_COUNT: u32 = 4;
const C4_SLACK: f64 = 0.05;
const C5_MIN_MEMORY_ONLY_FAILURE: f64 = 0.5;
const C6_LEAKAGE_STATES: usize = 1000;
const C9_HIGH_EXAMPLES_PER_TARGET: f64 = 5.3;
const C9_UNIQUE_SLACK: i64 = 1;
const C9_FULL_HISTOGRAM: [u32; 4] = [200, 100, 170, 100];
const C10_MAX_NONENV_RUN: u32 = 3;
const C10_CASES: u32 = 48;

fn criterion(n: u32, name: &str, body: impl FnOnce() -> Result<String, String>) {
    let outcome = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match outcome {
        Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail})"),
        Err(why) => {
            println!("criterion {n:>2} {name}: FAIL ({why})");
            panic!("criterion {n} failed: {why}");
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn item(s: &str) -> ItemId {
    ItemId::new(s).unwrap()
}

fn book() -> Arc<RecipeBook> {
    static BOOK: OnceLock<Arc<RecipeBook>> = OnceLock::new();
    BOOK.get_or_init(|| Arc::new(RecipeBook::bundled())).clone()
}

fn desk_split(name: SplitName) -> &'static (SplitHeader, Vec<TaskExample>) {
    static LOW: OnceLock<(SplitHeader, Vec<TaskExample>)> = OnceLock::new();
    static HIGH: OnceLock<(SplitHeader, Vec<TaskExample>)> = OnceLock::new();
    let cell = match name {
        SplitName::Low => &LOW,
        SplitName::High => &HIGH,
    };
    cell.get_or_init(|| {
        let b = book();
        let spec = SplitSpec::desk(name);
        let examples = build_split(&spec, 0, &b).expect("desk split builds");
        let header = SplitHeader {
            spec,
            seed: 0,
            recipes_fingerprint: b.fingerprint().to_string(),
        };
        (header, examples)
    })
}

fn run_split(mode: Mode, teacher: TeacherKind, split: SplitName) -> RunOutput {
    let (header, examples) = desk_split(split);
    let config = RunConfig::scripted(mode, teacher, format!("{split}.jsonl").into(), 0);
    let mut gateway = Gateway::mock(MockBackend::offline_default());
    run_examples(&config, header, examples, book(), &mut gateway)
}

/// Episodes whose target already appeared earlier in the run.
fn repeated_ids(out: &RunOutput) -> Vec<String> {
    let mut seen = HashSet::new();
    out.records
        .iter()
        .filter(|r| !seen.insert(r.target.clone()))
        .map(|r| r.example_id.clone())
        .collect()
}

fn example(id: &str, target: &str, cells: &[(&str, &str, u32)]) -> TaskExample {
    let b = book();
    let initial_slots: BTreeMap<SlotId, Stack> =
        cells.iter().map(|&(s, i, n)| (s.parse().unwrap(), Stack::new(item(i), n))).collect();
    let mut totals = BTreeMap::new();
    for st in initial_slots.values() {
        *totals.entry(st.item.clone()).or_insert(0) += st.count;
    }
    let (solvable, apps, steps) = match solve_default(&totals, &item(target), &b) {
        SolveOutcome::Plan(p) => {
            let state = how2_core::env::GameState::with_slots(initial_slots.clone(), &b, DEFAULT_MAX_STEPS);
            let g = ground(&p, &state, &b).unwrap();
            (true, p.total_applications(), g.actions.len() as u32)
        }
        _ => (false, 0, 1),
    };
    TaskExample {
        id: id.into(),
        target: item(target),
        initial_slots,
        distractor_count: 0,
        complexity: Complexity::for_applications(apps).unwrap_or(Complexity::Impossible),
        solvable,
        optimal_recipe_applications: apps,
        optimal_env_steps: steps,
    }
}

// ---------------------------------------------------------------- 1

#[test]
fn c01_planner_soundness() {
    criterion(1, "planner soundness", || {
        let start = Instant::now();
        let b = book();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut corpus = Vec::new();
        for name in [SplitName::Low, SplitName::High] {
            corpus.extend(desk_split(name).1.iter().filter(|e| e.solvable).cloned());
        }
        let mut per_class = BTreeMap::new();
        'outer: for c in [Complexity::Easy, Complexity::Medium, Complexity::Hard] {
            for target in feasible_targets(c, &b) {
                for d in DISTRACTOR_COUNTS {
                    if corpus.len() >= 2 * C1_MIN_SOLVABLE {
                        break 'outer;
                    }
                    let id = format!("c1-{}", corpus.len());
                    if let Ok(ex) = generate_example(&mut rng, &id, &target, c, d, &b) {
                        corpus.push(ex);
                    }
                }
            }
        }
        for ex in &corpus {
            *per_class.entry(ex.complexity.as_str()).or_insert(0) += 1;
        }
        ensure(corpus.len() >= C1_MIN_SOLVABLE, || format!("only {} solvable examples", corpus.len()))?;
        ensure(per_class.len() == 3, || format!("classes covered: {per_class:?}"))?;
        for ex in &corpus {
            let mut state = ex.initial_state(&b, DEFAULT_MAX_STEPS);
            let SolveOutcome::Plan(plan) = solve_default(&state.item_totals(), &ex.target, &b) else {
                return Err(format!("{}: no plan", ex.id));
            };
            let grounded = ground(&plan, &state, &b).map_err(|e| format!("{}: {e}", ex.id))?;
            for a in grounded.env_actions() {
                state = apply_action(&state, &a, &b).map_err(|e| format!("{}: {e}", ex.id))?.0;
            }
            ensure(check_success(&state, &ex.target), || format!("{}: replay did not craft {}", ex.id, ex.target))?;
        }
        let elapsed = start.elapsed();
        ensure(elapsed < C1_TIME_LIMIT, || format!("took {elapsed:?}"))?;
        Ok(format!("{} examples {per_class:?} in {:.2?}", corpus.len(), elapsed))
    });
}

// ---------------------------------------------------------------- 2

/// Exhaustive oracle over item multisets.
struct Brute {
    items: Vec<ItemId>,
    rules: Vec<(Vec<(usize, u32)>, usize, u32)>,
}

impl Brute {
    fn new(book: &RecipeBook, extra: &[ItemId]) -> Self {
        let mut items: BTreeSet<ItemId> = extra.iter().cloned().collect();
        for r in book.recipes() {
            items.insert(r.output.clone());
            items.extend(r.ingredients().into_keys());
        }
        let items: Vec<ItemId> = items.into_iter().collect();
        let idx = |it: &ItemId| items.iter().position(|x| x == it).unwrap();
        let rules = book
            .recipes()
            .iter()
            .map(|r| {
                let needs = r.ingredients().iter().map(|(it, n)| (idx(it), *n)).collect();
                (needs, idx(&r.output), r.output_count)
            })
            .collect();
        Brute { items, rules }
    }

    fn state(&self, inv: &BTreeMap<ItemId, u32>) -> Vec<u32> {
        self.items.iter().map(|it| inv.get(it).copied().unwrap_or(0)).collect()
    }

    fn successors<'a>(&'a self, s: &'a [u32]) -> impl Iterator<Item = Vec<u32>> + 'a {
        self.rules.iter().filter(|(needs, _, _)| needs.iter().all(|&(i, n)| s[i] >= n)).map(move |(needs, out, k)| {
            let mut t = s.to_vec();
            for &(i, n) in needs {
                t[i] -= n;
            }
            t[*out] += k;
            t
        })
    }

    /// Whether any reachable multiset holds the target (depth-unbounded).
    fn reachable(&self, start: &[u32], target: usize) -> bool {
        let mut seen = HashSet::new();
        let mut stack = vec![start.to_vec()];
        while let Some(s) = stack.pop() {
            if s[target] > 0 {
                return true;
            }
            if !seen.insert(s.clone()) {
                continue;
            }
            stack.extend(self.successors(&s));
        }
        false
    }

    /// Fewest applications by iterative deepening.
    fn min_applications(&self, start: &[u32], target: usize, bound: u32) -> Option<u32> {
        fn dfs(b: &Brute, s: &[u32], t: usize, left: u32, memo: &mut HashMap<Vec<u32>, u32>) -> bool {
            if s[t] > 0 {
                return true;
            }
            if left == 0 || memo.get(s).is_some_and(|&l| l >= left) {
                return false;
            }
            memo.insert(s.to_vec(), left);
            b.successors(s).any(|n| dfs(b, &n, t, left - 1, memo))
        }
        (0..=bound).find(|&d| dfs(self, start, target, d, &mut HashMap::new()))
    }
}

fn subsets(n: usize, max: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize <= max)
        .map(|m| (0..n).filter(|i| m & (1 << i) != 0).collect())
        .collect()
}

/// All inventories over `universe` with at most `kinds` non-zero counts.
fn inventories(universe: &[ItemId], kinds: usize, max_count: u32) -> Vec<BTreeMap<ItemId, u32>> {
    let mut out = vec![BTreeMap::new()];
    for it in universe {
        let mut next = Vec::new();
        for inv in &out {
            next.push(inv.clone());
            if inv.len() < kinds {
                for c in 1..=max_count {
                    let mut v = inv.clone();
                    v.insert(it.clone(), c);
                    next.push(v);
                }
            }
        }
        out = next;
    }
    out
}

#[test]
fn c02_planner_matches_brute_force() {
    criterion(2, "planner/brute-force equivalence", || {
        let full = book();
        // Two recipe families: a branching wood/coal family with a smelting
        // edge, and the iron family with its ingot/block cycle.
        let families: [(&[&str], &[&str]); 2] = [
            (
                &["oak_planks", "stick", "crafting_table", "oak_button", "wooden_sword", "torch", "charcoal", "campfire"],
                &["oak_log", "oak_planks", "stick", "coal"],
            ),
            (
                &["iron_ingot", "iron_block", "iron_ingot_from_iron_block", "bucket", "shears"],
                &["iron_ore", "iron_ingot", "iron_block", "coal"],
            ),
        ];
        let (mut instances, mut solvable, mut subsets_seen) = (0usize, 0usize, 0usize);
        for (ids, universe) in families {
            let universe: Vec<ItemId> = universe.iter().map(|s| item(s)).collect();
            let invs = inventories(&universe, C2_MAX_KINDS, C2_MAX_COUNT);
            for subset in subsets(ids.len(), C2_MAX_SUBSET) {
                subsets_seen += 1;
                let sub = full.subset(subset.iter().map(|&i| ids[i]));
                let brute = Brute::new(&sub, &universe);
                let targets: BTreeSet<ItemId> = sub.recipes().iter().map(|r| r.output.clone()).collect();
                for target in &targets {
                    let t = brute.items.iter().position(|x| x == target).unwrap();
                    for inv in &invs {
                        instances += 1;
                        let start = brute.state(inv);
                        let reachable = brute.reachable(&start, t);
                        let outcome = solve(inv, target, &sub, DEFAULT_DEPTH_BOUND);
                        let ctx = || format!("subset {:?}, target {target}, inventory {inv:?}", sub.recipes().iter().map(|r| &r.id).collect::<Vec<_>>());
                        match (&outcome, reachable) {
                            (SolveOutcome::Plan(p), true) => {
                                solvable += 1;
                                let best = brute.min_applications(&start, t, DEFAULT_DEPTH_BOUND);
                                ensure(best == Some(p.total_applications()), || {
                                    format!("{}: planner {} vs brute {best:?}", ctx(), p.total_applications())
                                })?;
                            }
                            (SolveOutcome::Impossible { .. }, false) => {}
                            (o, r) => return Err(format!("{}: planner {o:?}, brute reachable={r}", ctx())),
                        }
                    }
                }
            }
        }
        Ok(format!("{instances} instances over {subsets_seen} subsets, {solvable} solvable"))
    });
}

// ---------------------------------------------------------------- 3

#[test]
fn c03_just_ask_executable_corner() {
    criterion(3, "just_ask + executable corner", || {
        let out = run_split(Mode::JustAsk, TeacherKind::Executable, SplitName::Low);
        let a = &out.report.aggregates;
        let one = Some(Q::from_integer(1));
        ensure(a.episodes == 80, || format!("{} episodes", a.episodes))?;
        ensure(a.success_rate_solvable == one, || format!("SR_solvable {:?}", a.success_rate_solvable))?;
        ensure(a.impossible_f1 == one, || format!("impossible F1 {:?}", a.impossible_f1))?;
        ensure(a.intervention_rate_solvable == one, || format!("intervention {:?}", a.intervention_rate_solvable))?;
        ensure(a.action_efficiency == Some(Q::from_integer(0)), || format!("efficiency {:?}", a.action_efficiency))?;
        Ok("SR_solvable=1 F1=1 intervention_solvable=1 efficiency=0".into())
    });
}

// ---------------------------------------------------------------- 4

#[test]
fn c04_cache_semantics() {
    criterion(4, "cache semantics", || {
        let (_, examples) = desk_split(SplitName::High);
        let k = examples.len() as f64 / unique_targets(examples) as f64;
        let bound = 1.0 / k + C4_SLACK;
        let mut detail = Vec::new();
        for teacher in TeacherKind::ALL {
            let out = run_split(Mode::How2, teacher, SplitName::High);
            let rate = out.report.aggregates.intervention_rate.expect("non-empty run");
            let rate = *rate.numer() as f64 / *rate.denom() as f64;
            ensure(rate <= bound, || format!("{teacher}: intervention {rate:.4} > {bound:.4}"))?;
            let repeats: BTreeSet<String> = repeated_ids(&out).into_iter().collect();
            for r in out.records.iter().filter(|r| repeats.contains(&r.example_id)) {
                ensure(r.cache_misses == 0, || format!("{teacher}: repeat {} missed {} times", r.example_id, r.cache_misses))?;
            }
            detail.push(format!("{teacher}={rate:.4}"));
        }
        Ok(format!("k={k:.2} bound={bound:.4} {}", detail.join(" ")))
    });
}

// ---------------------------------------------------------------- 5

#[test]
fn c05_ablation_direction() {
    criterion(5, "ablation direction", || {
        let replay = run_split(Mode::MemoryOnly, TeacherKind::Executable, SplitName::High);
        let repeats: BTreeSet<String> = repeated_ids(&replay).into_iter().collect();
        ensure(!repeats.is_empty(), || "no repeated targets".into())?;
        let failed = replay.records.iter().filter(|r| repeats.contains(&r.example_id) && !r.success).count();
        let fail_rate = failed as f64 / repeats.len() as f64;
        ensure(fail_rate >= C5_MIN_MEMORY_ONLY_FAILURE, || format!("memory_only failed {failed}/{}", repeats.len()))?;
        for mode in [Mode::How2, Mode::ParseOnly] {
            let out = run_split(mode, TeacherKind::Executable, SplitName::High);
            let bad: Vec<_> =
                out.records.iter().filter(|r| repeats.contains(&r.example_id) && !r.success).map(|r| &r.example_id).collect();
            ensure(bad.is_empty(), || format!("{mode} failed repeats {bad:?}"))?;
        }
        Ok(format!("memory_only failed {failed}/{} repeats; how2 and parse_only solved all", repeats.len()))
    });
}

// ---------------------------------------------------------------- 6

const CRIMSON_PLANKS_SUBGOAL: &str = "To craft a crimson_planks, follow these steps:
1. Craft crimson_planks
1.1. move crimson_hyphae to A1
1.2. move crimson_planks to a free inventory slot";

const LIME_WOOL_EXECUTABLE: &str = "To craft a lime_wool, follow these steps:
1. move: from I7 to A1 with quantity 1
2. move: from I15 to A2 with quantity 1
3. move: from 0 to I1 with quantity 1";

/// Forwards to a shared mock so the test can inspect the requests.
struct Shared(Arc<MockBackend>);

impl ChatBackend for Shared {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.0.complete(request)
    }
}

#[test]
fn c06_teacher_fidelity_and_leakage() {
    criterion(6, "teacher answer fidelity", || {
        let b = book();
        let crimson = example(
            "VAL0531",
            "crimson_planks",
            &[("I7", "mooshroom_spawn_egg", 14), ("I12", "netherite_ingot", 5), ("I15", "crimson_hyphae", 1)],
        );
        let lime = example(
            "VAL0336",
            "lime_wool",
            &[("I2", "jungle_stairs", 45), ("I3", "dark_oak_fence", 37), ("I7", "lime_dye", 1), ("I15", "white_wool", 1)],
        );
        for (ex, kind, expected) in [
            (&crimson, TeacherKind::SubgoalPartiallyExecutable, CRIMSON_PLANKS_SUBGOAL),
            (&lime, TeacherKind::Executable, LIME_WOOL_EXECUTABLE),
        ] {
            let q = format!("How do I craft {}?", ex.target);
            let got = Teacher::new(kind, b.clone())
                .answer(&ex.initial_state(&b, DEFAULT_MAX_STEPS), &ex.target, &q, None)
                .map_err(|e| e.to_string())?;
            ensure(got.text == expected, || format!("{}: got {:?}", ex.id, got.text))?;
        }

        // Leakage guard over randomized states.
        let slot_token = Regex::new(r"\b(?:I(?:[1-9]|[12][0-9]|3[0-6])|[ABC][123])\b").unwrap();
        let mock = Arc::new(MockBackend::offline_default());
        let mut gateway = Gateway::new(Box::new(Shared(mock.clone())));
        let teacher = Teacher::new(TeacherKind::NonExecutable, b.clone());
        let items: Vec<ItemId> = b.items().into_iter().collect();
        let outputs: Vec<ItemId> = b.recipes().iter().map(|r| r.output.clone()).collect();
        let slots: Vec<SlotId> = SlotId::all().filter(|s| *s != SlotId::Output).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut impossible = 0;
        let seeded: Vec<&TaskExample> = desk_split(SplitName::Low).1.iter().filter(|e| e.solvable).collect();
        for i in 0..C6_LEAKAGE_STATES {
            // Alternate between solvable dataset states with one stack
            // pushed into the grid, and uniformly random states.
            let (cells, target) = if i % 2 == 0 {
                let ex = seeded[rng.gen_range(0..seeded.len())];
                let mut cells: Vec<(SlotId, Stack)> = ex.initial_slots.clone().into_iter().collect();
                let k = rng.gen_range(0..cells.len());
                cells[k].0 = SlotId::grid(rng.gen_range(0..3), rng.gen_range(0..3));
                (cells, ex.target.clone())
            } else {
                let mut free = slots.clone();
                let mut cells = Vec::new();
                for _ in 0..rng.gen_range(1..=6) {
                    let slot = free.swap_remove(rng.gen_range(0..free.len()));
                    cells.push((slot, Stack::new(items[rng.gen_range(0..items.len())].clone(), rng.gen_range(1..=16))));
                }
                (cells, outputs[rng.gen_range(0..outputs.len())].clone())
            };
            let state = how2_core::env::GameState::with_slots(cells.clone(), &b, DEFAULT_MAX_STEPS);
            let target = &target;
            let q = format!("How do I craft {target} using the items in {}?", cells[0].0);
            let answer = teacher.answer(&state, target, &q, Some(&mut gateway)).map_err(|e| e.to_string())?;
            impossible += answer.impossible as usize;
        }
        let requests = mock.requests();
        ensure(requests.len() == C6_LEAKAGE_STATES, || format!("{} teacher requests", requests.len()))?;
        for req in &requests {
            for m in &req.messages {
                if let Some(tok) = slot_token.find(&m.content) {
                    return Err(format!("slot token {:?} reached the teacher", tok.as_str()));
                }
            }
        }
        let probe = non_executable_request(&crimson.initial_state(&b, 30), &crimson.target, "q", "move I15 to A1");
        ensure(matches!(probe, Err(TeacherError::Leakage { .. })), || "guard did not fire on a leaking planner string".into())?;
        Ok(format!("VAL0531 and VAL0336 byte-exact; {C6_LEAKAGE_STATES} states clean ({impossible} impossible)"))
    });
}

// ---------------------------------------------------------------- 7

fn tool(name: &str, arguments: Value) -> MockResponse {
    MockResponse::ToolCall {
        name: name.into(),
        arguments,
    }
}

fn mv(from: &str, to: &str, q: u32) -> MockResponse {
    tool("move", json!({"slot_from": from, "slot_to": to, "quantity": q}))
}

fn scripted_actor(calls: Vec<MockResponse>) -> Gateway {
    Gateway::mock(MockBackend::new(vec![
        MockRule {
            role: Some(Role::Actor),
            contains: None,
            response: MockResponse::Sequence { items: calls },
        },
        MockRule {
            role: Some(Role::Teacher),
            contains: None,
            response: MockResponse::EchoPlanner,
        },
    ]))
}

fn run_fixture(
    ex: &TaskExample,
    mode: Mode,
    policy: ActorPolicy,
    max_steps: u32,
    gateway: Option<&mut Gateway>,
) -> (EpisodeRecord, FailureInfo) {
    let b = book();
    let teacher = Teacher::new(TeacherKind::Executable, b.clone());
    let mut store = MemoryStore::new();
    let cfg = EpisodeConfig {
        mode,
        policy,
        roles: MemoryRoles::rule_based(),
        max_steps,
    };
    let record = run_episode(
        ex,
        &cfg,
        EpisodeContext {
            recipes: &b,
            teacher: &teacher,
            store: &mut store,
            gateway,
            episode: 0,
        },
    );
    let info = classify_failure(&record, ex, &b);
    (record, info)
}

fn mocked(ex: &TaskExample, calls: Vec<MockResponse>) -> (EpisodeRecord, FailureInfo) {
    let mut g = scripted_actor(calls);
    run_fixture(ex, Mode::How2, ActorPolicy::llm(), DEFAULT_MAX_STEPS, Some(&mut g))
}

#[test]
fn c07_failure_taxonomy() {
    criterion(7, "failure taxonomy", || {
        let give_up = tool("impossible", json!({"reason": "the target can no longer be crafted"}));
        let oak_boat = example(
            "VAL0356",
            "oak_boat",
            &[("I3", "turtle_spawn_egg", 19), ("I4", "orange_bed", 1), ("I20", "oak_planks", 5)],
        );
        let brown_banner = example(
            "VAL0288",
            "brown_banner",
            &[("I7", "brown_wool", 6), ("I9", "terracotta", 19), ("I14", "stick", 1)],
        );
        let crafting_table = example(
            "VAL0540",
            "crafting_table",
            &[("I1", "elder_guardian_spawn_egg", 5), ("I2", "blue_bed", 1), ("I8", "oak_log", 1)],
        );
        let truncated = example("truncated", "oak_boat", &[("I3", "oak_log", 2), ("I9", "cobblestone", 4)]);
        for ex in [&oak_boat, &brown_banner, &crafting_table, &truncated] {
            ensure(ex.solvable, || format!("fixture {} must start solvable", ex.id))?;
        }

        let cases: Vec<(&str, Box<dyn Fn() -> (EpisodeRecord, FailureInfo)>, FailureClass)> = vec![
            (
                "VAL0356",
                Box::new(|| {
                    mocked(
                        &oak_boat,
                        vec![
                            tool("read_memory", json!({"recipe": "oak_boat"})),
                            tool("think", json!({"thought": "the planks are in I20"})),
                            mv("I20", "A1", 1),
                            mv("0", "I1", 1),
                            give_up.clone(),
                        ],
                    )
                }),
                FailureClass::EagerCraftingError,
            ),
            (
                "VAL0288",
                Box::new(|| {
                    mocked(
                        &brown_banner,
                        vec![
                            tool("read_memory", json!({"recipe": "brown_banner"})),
                            mv("I7", "A1", 1),
                            mv("I7", "A2", 1),
                            mv("0", "I35", 3),
                            give_up.clone(),
                        ],
                    )
                }),
                FailureClass::EagerCraftingError,
            ),
            (
                "VAL0540",
                Box::new(|| {
                    mocked(
                        &crafting_table,
                        vec![
                            tool("think", json!({"thought": "a crafting table needs 4 oak logs"})),
                            tool("impossible", json!({"reason": "not enough oak logs"})),
                        ],
                    )
                }),
                FailureClass::ImpossibleError,
            ),
            (
                "truncated",
                Box::new(|| {
                    let mut g = Gateway::mock(MockBackend::offline_default());
                    run_fixture(
                        &truncated,
                        Mode::JustAsk,
                        ActorPolicy::scripted(),
                        truncated.optimal_env_steps - 1,
                        Some(&mut g),
                    )
                }),
                FailureClass::MaxStepsError,
            ),
        ];
        let mut detail = Vec::new();
        for (name, run, expected) in &cases {
            let (first, info) = run();
            let (second, again) = run();
            ensure(first.infra_error.is_none(), || format!("{name}: {:?}", first.infra_error))?;
            ensure(!first.success, || format!("{name}: fixture succeeded"))?;
            ensure(info.class == Some(*expected), || format!("{name}: classified {:?}, expected {expected:?}", info.class))?;
            ensure(first == second && info == again, || format!("{name}: not deterministic"))?;
            detail.push(format!("{name}={}", expected.as_str()));
        }
        ensure(cases[0].1().1.eager_crafting, || "VAL0356 not flagged eager".into())?;
        ensure(cases[1].1().0.status == Status::ImpossibleDeclared, || "VAL0288 did not end by declaration".into())?;
        Ok(detail.join(" "))
    });
}

// ---------------------------------------------------------------- 8

fn synthetic(solvable: bool, success: bool, declared: bool, misses: u32, steps: u32, optimal: u32) -> EpisodeRecord {
    EpisodeRecord {
        episode: 0,
        example_id: "x".into(),
        target: item("stick"),
        mode: Mode::How2,
        teacher: Some(TeacherKind::Executable),
        solvable,
        status: if declared {
            Status::ImpossibleDeclared
        } else if success {
            Status::Success
        } else {
            Status::MaxSteps
        },
        success,
        declared_impossible: declared,
        env_steps_taken: steps,
        optimal_env_steps: optimal,
        events: Vec::new(),
        cache_hits: 0,
        cache_misses: misses,
        first_read_turn: None,
        protocol_failures: 0,
        usage: Usage::default(),
        usage_by_role: BTreeMap::new(),
        gateway_calls: Vec::new(),
        infra_error: None,
    }
}

#[derive(Debug, Clone)]
struct Spec8 {
    solvable: bool,
    success: bool,
    declared: bool,
    misses: u32,
    extra_steps: u32,
    optimal: u32,
}

#[test]
fn c08_metric_algebra() {
    criterion(8, "metric algebra", || {
        let mut records = Vec::new();
        // 8 true positives, 3 false negatives, 1 false positive.
        for _ in 0..8 {
            records.push(synthetic(false, true, true, 1, 1, 1));
        }
        for _ in 0..3 {
            records.push(synthetic(false, false, false, 0, 30, 1));
        }
        records.push(synthetic(true, false, true, 2, 3, 4));
        for (misses, steps) in [(0, 4), (0, 4), (1, 5), (1, 6), (3, 4), (0, 8), (0, 4), (0, 4)] {
            records.push(synthetic(true, true, false, misses, steps, 4));
        }
        let mut broken = synthetic(true, false, false, 5, 0, 4);
        broken.infra_error = Some("connection refused".into());
        records.push(broken);
        let none = FailureInfo {
            class: None,
            eager_crafting: false,
        };
        let a = compute_metrics(&records, &vec![none; records.len()]);
        let expect = [
            ("impossible_f1", a.impossible_f1, Q::new(4, 5)),
            ("success_rate", a.success_rate, Q::new(16, 20)),
            ("success_rate_solvable", a.success_rate_solvable, Q::new(8, 9)),
            ("avg_cache_miss", a.avg_cache_miss, Q::new(15, 20)),
            ("intervention_rate", a.intervention_rate, Q::new(12, 20)),
            ("intervention_rate_solvable", a.intervention_rate_solvable, Q::new(4, 9)),
            ("action_efficiency", a.action_efficiency, Q::new(7, 32)),
        ];
        for (name, got, want) in expect {
            ensure(got == Some(want), || format!("{name}: {got:?} != {want}"))?;
        }
        ensure(a.episodes == 20 && a.infra_failures == 1, || format!("{} episodes, {} infra", a.episodes, a.infra_failures))?;
        let empty = compute_metrics(&[], &[]);
        ensure(empty.success_rate.is_none() && empty.impossible_f1.is_none(), || "empty run must be undefined".into())?;

        // Random record sets against a direct recount.
        let strategy = prop::collection::vec(
            (any::<bool>(), any::<bool>(), any::<bool>(), 0u32..4, 0u32..5, 1u32..9).prop_map(
                |(solvable, success, declared, misses, extra_steps, optimal)| Spec8 {
                    solvable,
                    success,
                    declared,
                    misses,
                    extra_steps,
                    optimal,
                },
            ),
            0..40,
        );
        let mut runner = TestRunner::new(PropConfig {
            cases: 256,
            failure_persistence: None,
            ..PropConfig::default()
        });
        runner
            .run(&strategy, |specs| {
                let recs: Vec<_> = specs
                    .iter()
                    .map(|s| synthetic(s.solvable, s.success, s.declared, s.misses, s.optimal + s.extra_steps, s.optimal))
                    .collect();
                let a = compute_metrics(&recs, &vec![none; recs.len()]);
                let n = specs.len() as i64;
                let tp = specs.iter().filter(|s| s.declared && !s.solvable).count() as i64;
                let fp = specs.iter().filter(|s| s.declared && s.solvable).count() as i64;
                let fn_ = specs.iter().filter(|s| !s.declared && !s.solvable).count() as i64;
                let f1 = (tp + fp + fn_ > 0).then(|| Q::new(2 * tp, 2 * tp + fp + fn_));
                let misses: i64 = specs.iter().map(|s| s.misses as i64).sum();
                let touched = specs.iter().filter(|s| s.misses > 0).count() as i64;
                let good: Vec<&Spec8> = specs.iter().filter(|s| s.solvable && s.success).collect();
                let eff = (!good.is_empty()).then(|| {
                    good.iter().map(|s| Q::new(s.extra_steps as i64, s.optimal as i64)).sum::<Q>() / Q::from_integer(good.len() as i64)
                });
                prop_assert_eq!(a.impossible_f1, f1);
                prop_assert_eq!(a.avg_cache_miss, (n > 0).then(|| Q::new(misses, n)));
                prop_assert_eq!(a.intervention_rate, (n > 0).then(|| Q::new(touched, n)));
                prop_assert_eq!(a.action_efficiency, eff);
                Ok(())
            })
            .map_err(|e| e.to_string())?;
        Ok("hand-computed set exact; 256 random sets exact".into())
    });
}

// ---------------------------------------------------------------- 9

#[test]
fn c09_dataset_invariants() {
    criterion(9, "dataset invariants", || {
        let b = book();
        let low = &desk_split(SplitName::Low).1;
        let high = &desk_split(SplitName::High).1;
        let (hl, hh) = (histogram(low), histogram(high));
        ensure(hl == hh, || format!("low {hl:?} vs high {hh:?}"))?;
        let want_unique = (high.len() as f64 / C9_HIGH_EXAMPLES_PER_TARGET).round() as i64;
        let got_unique = unique_targets(high) as i64;
        ensure((got_unique - want_unique).abs() <= C9_UNIQUE_SLACK, || format!("high split has {got_unique} targets, want {want_unique}±1"))?;
        for name in [SplitName::Low, SplitName::High] {
            let spec = SplitSpec::full(name);
            ensure(spec.histogram == C9_FULL_HISTOGRAM, || format!("{name} full spec {:?}", spec.histogram))?;
        }
        let full_high = build_split(&SplitSpec::full(SplitName::High), 0, &b).map_err(|e| e.to_string())?;
        ensure(histogram(&full_high) == C9_FULL_HISTOGRAM, || format!("full high split {:?}", histogram(&full_high)))?;
        Ok(format!(
            "desk histogram {hl:?}; high unique {got_unique} (want {want_unique}); full {:?} from {} examples",
            histogram(&full_high),
            full_high.len()
        ))
    });
}

// ---------------------------------------------------------------- 10

fn slot_text() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => (1u8..=40).prop_map(|i| format!("I{i}")),
        3 => (0usize..3, 1u8..=4).prop_map(|(r, c)| format!("{}{c}", ['A', 'B', 'C'][r])),
        2 => Just("0".to_string()),
        1 => "[a-z]{1,3}",
    ]
}

fn fuzz_call() -> impl Strategy<Value = MockResponse> {
    let quantity = prop_oneof![
        6 => (0u64..6).prop_map(Value::from),
        1 => Just(json!("2")),
        1 => Just(json!(-1)),
    ];
    prop_oneof![
        8 => (prop_oneof![Just("move"), Just("smelt")], slot_text(), slot_text(), quantity)
            .prop_map(|(n, f, t, q)| tool(n, json!({"slot_from": f, "slot_to": t, "quantity": q}))),
        3 => "[a-z ]{0,12}".prop_map(|t| tool("think", json!({"thought": t}))),
        3 => prop_oneof![Just("stick".to_string()), Just(String::new()), "[a-z_]{1,10}"]
            .prop_map(|r| tool("read_memory", json!({"recipe": r}))),
        1 => Just(tool("impossible", json!({"reason": "stuck"}))),
        1 => Just(tool("craft", json!({"item": "stick"}))),
        1 => Just(tool("move", Value::Null)),
        1 => Just(tool("move", json!({"slot_from": "I1"}))),
        2 => "[a-z ]{0,16}".prop_map(|content| MockResponse::Text { content }),
        1 => (slot_text(), slot_text()).prop_map(|(f, t)| MockResponse::Text {
            content: format!(r#"{{"name": "move", "arguments": {{"slot_from": "{f}", "slot_to": "{t}", "quantity": 1}}}}"#),
        }),
    ]
}

/// Independent check that a dispatched action could have come from a valid call.
fn dispatchable(action: &EnvAction) -> bool {
    match action {
        EnvAction::Move { to, quantity, .. } => *to != SlotId::Output && *quantity >= 1,
        EnvAction::Smelt { from, to, quantity } => *from != SlotId::Output && *to != SlotId::Output && *quantity >= 1,
        EnvAction::Impossible { .. } | EnvAction::NoOp => true,
    }
}

#[test]
fn c10_protocol_invariants() {
    criterion(10, "protocol invariants", || {
        let (_, examples) = desk_split(SplitName::High);
        let strategy = (
            0usize..Mode::ALL.len(),
            0usize..examples.len(),
            0usize..TeacherKind::ALL.len(),
            prop::collection::vec(fuzz_call(), 1..24),
        );
        let mut runner = TestRunner::new(PropConfig {
            cases: C10_CASES,
            failure_persistence: None,
            ..PropConfig::default()
        });
        let stats = std::sync::Mutex::new((0usize, 0usize, 0usize));
        runner
            .run(&strategy, |(m, e, t, calls)| {
                let b = book();
                let mode = Mode::ALL[m];
                let ex = &examples[e];
                let teacher = Teacher::new(TeacherKind::ALL[t], b.clone());
                let mut store = MemoryStore::new();
                let mut g = scripted_actor(calls);
                g.max_attempts = 1;
                let cfg = EpisodeConfig {
                    mode,
                    policy: ActorPolicy::llm(),
                    roles: MemoryRoles::rule_based(),
                    max_steps: DEFAULT_MAX_STEPS,
                };
                let r = run_episode(
                    ex,
                    &cfg,
                    EpisodeContext {
                        recipes: &b,
                        teacher: &teacher,
                        store: &mut store,
                        gateway: Some(&mut g),
                        episode: 0,
                    },
                );
                prop_assert!(r.infra_error.is_none(), "{:?}", r.infra_error);
                let mut run = 0;
                let mut env_events = 0;
                for ev in &r.events {
                    match ev {
                        StepEvent::Env { action, .. } => {
                            run = 0;
                            env_events += 1;
                            prop_assert!(dispatchable(action), "dispatched {:?}", action);
                        }
                        StepEvent::Think { .. } | StepEvent::ReadMemory { .. } => {
                            run += 1;
                            prop_assert!(run <= C10_MAX_NONENV_RUN, "{} non-environment actions in a row", run);
                        }
                        StepEvent::Invalid { .. } => {}
                    }
                }
                prop_assert_eq!(r.env_steps_taken, env_events);
                prop_assert!(r.env_steps_taken <= DEFAULT_MAX_STEPS);
                if mode == Mode::Base {
                    prop_assert!(r.memory_events().next().is_none());
                    prop_assert_eq!(r.cache_hits + r.cache_misses, 0);
                    prop_assert!(r.gateway_calls.iter().all(|c| c.role == Role::Actor));
                    prop_assert!(r.teacher.is_none());
                    prop_assert!(store.is_empty());
                }
                let mut s = stats.lock().unwrap();
                s.0 += 1;
                s.1 += r.events.iter().filter(|e| matches!(e, StepEvent::Invalid { .. })).count();
                s.2 += r.memory_events().filter(|m| matches!(m, MemoryEvent::CacheMiss { .. })).count();
                Ok(())
            })
            .map_err(|e| e.to_string())?;

        // Scripted base runs over a whole split.
        let base = run_split(Mode::Base, TeacherKind::Executable, SplitName::High);
        for r in &base.records {
            ensure(r.memory_events().next().is_none() && r.gateway_calls.is_empty(), || {
                format!("base episode {} touched memory", r.example_id)
            })?;
            ensure(r.max_nonenv_run() <= C10_MAX_NONENV_RUN, || format!("{}: non-env run", r.example_id))?;
        }
        ensure(base.store.is_empty(), || "base run stored memories".into())?;
        let s = stats.into_inner().unwrap();
        Ok(format!(
            "{} fuzzed episodes, {} rejected calls, {} teacher consultations; {} base episodes clean",
            s.0,
            s.1,
            s.2,
            base.records.len()
        ))
    });
}
