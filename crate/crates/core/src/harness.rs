//! Lifelong runs, metrics, failure taxonomy and report aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use num_rational::Ratio;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{run_episode, ActorPolicy, EpisodeConfig, EpisodeContext, EpisodeRecord, Mode};
use crate::dataset::{curriculum_order, read_split, DatasetError, SplitHeader, TaskExample};
use crate::env::{EnvAction, SlotId, Status, DEFAULT_MAX_STEPS};
use crate::gateway::{Gateway, GatewayError, HttpBackend, HttpConfig, MockBackend, MockRule};
use crate::memory::{MemoryRoles, MemoryStore};
use crate::planner::replan_solvable;
use crate::recipe::{build_graph, hex, RecipeBook};
use crate::teacher::{Teacher, TeacherKind};

pub type Rational = Ratio<i64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureClass {
    ImpossibleError,
    MaxStepsError,
    EagerCraftingError,
    Other,
}

impl FailureClass {
    pub const ALL: [FailureClass; 4] = [
        FailureClass::ImpossibleError,
        FailureClass::MaxStepsError,
        FailureClass::EagerCraftingError,
        FailureClass::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureClass::ImpossibleError => "impossible_error",
            FailureClass::MaxStepsError => "max_steps_error",
            FailureClass::EagerCraftingError => "eager_crafting_error",
            FailureClass::Other => "other",
        }
    }
}

impl fmt::Display for FailureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureInfo {
    pub class: Option<FailureClass>,
    /// Some output extraction made the target unreachable.
    pub eager_crafting: bool,
}

/// Replays the record's environment actions from the example's initial
/// state. Classes are checked in order: impossible declared while the state
/// still had a plan, budget cut an active trajectory, an extraction made
/// the target unreachable, anything else.
pub fn classify_failure(record: &EpisodeRecord, example: &TaskExample, recipes: &RecipeBook) -> FailureInfo {
    let target = &example.target;
    let mut state = example.initial_state(recipes, u32::MAX);
    let mut eager = false;
    let mut impossible_while_solvable = false;
    for action in record.env_actions() {
        let before = replan_solvable(&state, target, recipes);
        match action {
            EnvAction::Impossible { .. } => {
                impossible_while_solvable = before;
                break;
            }
            EnvAction::Move { from: SlotId::Output, .. } => {
                let _ = state.apply(action, recipes);
                if before && !replan_solvable(&state, target, recipes) {
                    eager = true;
                }
            }
            _ => {
                let _ = state.apply(action, recipes);
            }
        }
    }
    if record.success {
        return FailureInfo {
            class: None,
            eager_crafting: eager,
        };
    }
    let idled_out = record.env_actions().last() == Some(&EnvAction::NoOp);
    let class = if record.declared_impossible && impossible_while_solvable {
        FailureClass::ImpossibleError
    } else if record.status == Status::MaxSteps && !idled_out {
        FailureClass::MaxStepsError
    } else if eager {
        FailureClass::EagerCraftingError
    } else {
        FailureClass::Other
    };
    FailureInfo {
        class: Some(class),
        eager_crafting: eager,
    }
}

/// Run-level aggregates. `None` marks an undefined metric (zero
/// denominator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub episodes: u32,
    pub solvable_episodes: u32,
    pub success_rate: Option<Rational>,
    pub success_rate_solvable: Option<Rational>,
    pub impossible_f1: Option<Rational>,
    pub avg_cache_miss: Option<Rational>,
    pub intervention_rate: Option<Rational>,
    pub intervention_rate_solvable: Option<Rational>,
    /// Mean excess-step ratio over successful solvable episodes.
    pub action_efficiency: Option<Rational>,
    pub total_tokens: u64,
    pub error_counts: BTreeMap<FailureClass, u32>,
    pub eager_crafting_flags: u32,
    pub infra_failures: u32,
    pub protocol_failures: u32,
}

fn ratio(n: usize, d: usize) -> Option<Rational> {
    (d > 0).then(|| Rational::new(n as i64, d as i64))
}

pub fn f1(tp: usize, fp: usize, fn_: usize) -> Option<Rational> {
    ratio(2 * tp, 2 * tp + fp + fn_)
}

/// Pure reduction over episode records; infra failures are counted but
/// excluded from every rate.
pub fn compute_metrics(records: &[EpisodeRecord], failures: &[FailureInfo]) -> Aggregates {
    assert_eq!(records.len(), failures.len(), "one failure entry per record");
    let pairs: Vec<(&EpisodeRecord, &FailureInfo)> = records
        .iter()
        .zip(failures)
        .filter(|(r, _)| r.infra_error.is_none())
        .collect();
    let n = pairs.len();
    let solvable: Vec<_> = pairs.iter().filter(|(r, _)| r.solvable).collect();
    let successes = pairs.iter().filter(|(r, _)| r.success).count();
    let solvable_successes = solvable.iter().filter(|(r, _)| r.success).count();
    let tp = pairs.iter().filter(|(r, _)| r.declared_impossible && !r.solvable).count();
    let fp = pairs.iter().filter(|(r, _)| r.declared_impossible && r.solvable).count();
    let fn_ = pairs.iter().filter(|(r, _)| !r.declared_impossible && !r.solvable).count();
    let misses: usize = pairs.iter().map(|(r, _)| r.cache_misses as usize).sum();
    let intervened = pairs.iter().filter(|(r, _)| r.cache_misses > 0).count();
    let intervened_solvable = solvable.iter().filter(|(r, _)| r.cache_misses > 0).count();
    let efficient: Vec<Rational> = solvable
        .iter()
        .filter(|(r, _)| r.success && r.optimal_env_steps > 0)
        .map(|(r, _)| {
            Rational::new(
                r.env_steps_taken as i64 - r.optimal_env_steps as i64,
                r.optimal_env_steps as i64,
            )
        })
        .collect();
    let action_efficiency = (!efficient.is_empty())
        .then(|| efficient.iter().copied().sum::<Rational>() / Rational::from_integer(efficient.len() as i64));
    let mut error_counts: BTreeMap<FailureClass, u32> = FailureClass::ALL.iter().map(|c| (*c, 0)).collect();
    for (_, f) in &pairs {
        if let Some(c) = f.class {
            *error_counts.get_mut(&c).unwrap() += 1;
        }
    }
    Aggregates {
        episodes: n as u32,
        solvable_episodes: solvable.len() as u32,
        success_rate: ratio(successes, n),
        success_rate_solvable: ratio(solvable_successes, solvable.len()),
        impossible_f1: f1(tp, fp, fn_),
        avg_cache_miss: ratio(misses, n),
        intervention_rate: ratio(intervened, n),
        intervention_rate_solvable: ratio(intervened_solvable, solvable.len()),
        action_efficiency,
        total_tokens: pairs.iter().map(|(r, _)| r.usage.total()).sum(),
        error_counts,
        eager_crafting_flags: pairs.iter().filter(|(_, f)| f.eager_crafting).count() as u32,
        infra_failures: (records.len() - n) as u32,
        protocol_failures: pairs.iter().map(|(r, _)| r.protocol_failures).sum(),
    }
}

pub fn to_f64(r: &Option<Rational>) -> Option<f64> {
    r.map(|r| *r.numer() as f64 / *r.denom() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    /// Deterministic scenario backend; without a file the offline default
    /// table is used.
    Mock {
        #[serde(default)]
        scenario: Option<PathBuf>,
    },
    Http(HttpConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub teacher: TeacherKind,
    pub split: PathBuf,
    pub seed: u64,
    pub policy: ActorPolicy,
    #[serde(default)]
    pub curriculum: bool,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
    #[serde(default = "MemoryRoles::rule_based")]
    pub roles: MemoryRoles,
    pub backend: BackendConfig,
    /// Recipe file; the bundled book when absent.
    #[serde(default)]
    pub recipes: Option<PathBuf>,
}

fn default_max_steps() -> u32 {
    DEFAULT_MAX_STEPS
}

impl RunConfig {
    pub fn scripted(mode: Mode, teacher: TeacherKind, split: PathBuf, seed: u64) -> Self {
        RunConfig {
            mode,
            teacher,
            split,
            seed,
            policy: ActorPolicy::scripted(),
            curriculum: false,
            max_steps: DEFAULT_MAX_STEPS,
            roles: MemoryRoles::rule_based(),
            backend: BackendConfig::Mock { scenario: None },
            recipes: None,
        }
    }

    /// Hash of everything but the seed, so seeds of one config share it.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().unwrap().remove("seed");
        hex(&Sha256::digest(v.to_string().as_bytes()))[..12].to_string()
    }

    pub fn run_dir(&self, root: &Path, split_name: &str) -> PathBuf {
        root.join(format!(
            "{}-{}-{}-{}",
            self.mode,
            self.teacher_label(),
            split_name,
            self.config_hash()
        ))
        .join(format!("seed-{}", self.seed))
    }

    pub fn teacher_label(&self) -> &'static str {
        if self.mode == Mode::Base {
            "none"
        } else {
            self.teacher.as_str()
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Recipes(#[from] crate::recipe::RecipeError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("split was generated from a different recipe file ({split} vs {book})")]
    RecipeMismatch { split: String, book: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn build_gateway(backend: &BackendConfig) -> Result<Gateway, HarnessError> {
    match backend {
        BackendConfig::Mock { scenario: None } => Ok(Gateway::mock(MockBackend::offline_default())),
        BackendConfig::Mock { scenario: Some(path) } => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let rules: Vec<MockRule> = serde_json::from_str(&text).map_err(|e| HarnessError::Format {
                path: path.clone(),
                message: e.to_string(),
            })?;
            Ok(Gateway::mock(MockBackend::new(rules)))
        }
        BackendConfig::Http(cfg) => Ok(Gateway::new(Box::new(HttpBackend::from_env(cfg.clone())?))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub example_id: String,
    pub target: String,
    pub solvable: bool,
    pub success: bool,
    pub status: Status,
    pub env_steps_taken: u32,
    pub cache_hits: u32,
    pub cache_misses: u32,
    pub first_read_turn: Option<u32>,
    pub tokens: u64,
    pub failure: FailureInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub config_hash: String,
    pub split_name: String,
    pub aggregates: Aggregates,
    pub episodes: Vec<EpisodeSummary>,
}

/// A finished run: the report plus full episode records.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub records: Vec<EpisodeRecord>,
    pub failures: Vec<FailureInfo>,
    pub store: MemoryStore,
}

pub fn load_recipes(path: Option<&Path>) -> Result<RecipeBook, HarnessError> {
    Ok(match path {
        Some(p) => RecipeBook::load(p)?,
        None => RecipeBook::bundled(),
    })
}

/// Episode order for a run: split order, or the curriculum order drawn
/// with the run seed.
pub fn episode_order(examples: &[TaskExample], curriculum: bool, seed: u64, recipes: &RecipeBook) -> Vec<TaskExample> {
    if !curriculum {
        return examples.to_vec();
    }
    let graph = build_graph(recipes.recipes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    curriculum_order(examples, &graph, recipes, &mut rng).0
}

/// Runs the episodes in order against one fresh store.
pub fn run_examples(
    config: &RunConfig,
    header: &SplitHeader,
    examples: &[TaskExample],
    recipes: Arc<RecipeBook>,
    gateway: &mut Gateway,
) -> RunOutput {
    let teacher = Teacher::new(config.teacher, recipes.clone());
    let mut store = MemoryStore::new();
    let episode_cfg = EpisodeConfig {
        mode: config.mode,
        policy: config.policy.clone(),
        roles: config.roles,
        max_steps: config.max_steps,
    };
    let ordered = episode_order(examples, config.curriculum, config.seed, &recipes);
    let mut records = Vec::with_capacity(ordered.len());
    let mut failures = Vec::with_capacity(ordered.len());
    for (i, ex) in ordered.iter().enumerate() {
        let record = run_episode(
            ex,
            &episode_cfg,
            EpisodeContext {
                recipes: &recipes,
                teacher: &teacher,
                store: &mut store,
                gateway: Some(&mut *gateway),
                episode: i,
            },
        );
        if let Some(e) = &record.infra_error {
            log::warn!("episode {i} ({}) failed: {e}", ex.id);
        }
        failures.push(classify_failure(&record, ex, &recipes));
        records.push(record);
    }
    let aggregates = compute_metrics(&records, &failures);
    let episodes = records
        .iter()
        .zip(&failures)
        .map(|(r, f)| EpisodeSummary {
            episode: r.episode,
            example_id: r.example_id.clone(),
            target: r.target.to_string(),
            solvable: r.solvable,
            success: r.success,
            status: r.status,
            env_steps_taken: r.env_steps_taken,
            cache_hits: r.cache_hits,
            cache_misses: r.cache_misses,
            first_read_turn: r.first_read_turn,
            tokens: r.usage.total(),
            failure: *f,
        })
        .collect();
    RunOutput {
        report: RunReport {
            config: config.clone(),
            config_hash: config.config_hash(),
            split_name: header.spec.name.to_string(),
            aggregates,
            episodes,
        },
        records,
        failures,
        store,
    }
}

pub const REPORT_FILE: &str = "report.json";
pub const TRAJECTORY_FILE: &str = "trajectories.jsonl";
pub const MEMORY_FILE: &str = "memory.jsonl";
pub const CONFIG_FILE: &str = "config.json";

/// Loads the split, runs it and writes the run directory under `root`.
pub fn run(config: &RunConfig, root: &Path) -> Result<(PathBuf, RunOutput), HarnessError> {
    let recipes = Arc::new(load_recipes(config.recipes.as_deref())?);
    let (header, examples) = read_split(&config.split)?;
    if header.recipes_fingerprint != recipes.fingerprint() {
        return Err(HarnessError::RecipeMismatch {
            split: header.recipes_fingerprint,
            book: recipes.fingerprint().to_string(),
        });
    }
    let mut gateway = build_gateway(&config.backend)?;
    let out = run_examples(config, &header, &examples, recipes, &mut gateway);
    let dir = config.run_dir(root, &out.report.split_name);
    write_run(&dir, &out)?;
    Ok((dir, out))
}

pub fn write_run(dir: &Path, out: &RunOutput) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io_err(&p))
    };
    write(CONFIG_FILE, serde_json::to_string_pretty(&out.report.config).unwrap())?;
    write(REPORT_FILE, serde_json::to_string_pretty(&out.report).unwrap())?;
    let mut traj = String::new();
    for r in &out.records {
        traj.push_str(&serde_json::to_string(r).unwrap());
        traj.push('\n');
    }
    write(TRAJECTORY_FILE, traj)?;
    write(MEMORY_FILE, out.store.export_jsonl())?;
    Ok(())
}

pub fn load_report(dir: &Path) -> Result<RunReport, HarnessError> {
    let p = dir.join(REPORT_FILE);
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Format {
        path: p,
        message: e.to_string(),
    })
}

pub fn load_records(dir: &Path) -> Result<Vec<EpisodeRecord>, HarnessError> {
    let p = dir.join(TRAJECTORY_FILE);
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| HarnessError::Format {
                path: p.clone(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Recomputes a run directory's aggregates from its trajectories and the
/// split file.
pub fn recompute(dir: &Path) -> Result<Aggregates, HarnessError> {
    let report = load_report(dir)?;
    let records = load_records(dir)?;
    let recipes = load_recipes(report.config.recipes.as_deref())?;
    let (_, examples) = read_split(&report.config.split)?;
    let by_id: BTreeMap<&str, &TaskExample> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let failures: Vec<FailureInfo> = records
        .iter()
        .map(|r| {
            by_id
                .get(r.example_id.as_str())
                .map(|ex| classify_failure(r, ex, &recipes))
                .ok_or_else(|| HarnessError::Format {
                    path: dir.to_path_buf(),
                    message: format!("example {} not in split", r.example_id),
                })
        })
        .collect::<Result<_, _>>()?;
    Ok(compute_metrics(&records, &failures))
}

/// Cross product of modes, teachers and seeds. Base mode ignores the
/// teacher and runs once per seed.
pub fn sweep_configs(template: &RunConfig, modes: &[Mode], teachers: &[TeacherKind], seeds: &[u64]) -> Vec<RunConfig> {
    let mut out = Vec::new();
    for &mode in modes {
        let ts: Vec<TeacherKind> = if mode == Mode::Base {
            vec![TeacherKind::Executable]
        } else {
            teachers.to_vec()
        };
        for teacher in ts {
            for &seed in seeds {
                out.push(RunConfig {
                    mode,
                    teacher,
                    seed,
                    ..template.clone()
                });
            }
        }
    }
    out
}

/// Runs configs on up to `jobs` threads; results keep the input order.
pub fn sweep(configs: &[RunConfig], root: &Path, jobs: usize) -> Vec<Result<PathBuf, HarnessError>> {
    let jobs = jobs.max(1);
    let mut results: Vec<Option<Result<PathBuf, HarnessError>>> = (0..configs.len()).map(|_| None).collect();
    for (chunk_idx, chunk) in configs.chunks(jobs).enumerate() {
        let chunk_results: Vec<Result<PathBuf, HarnessError>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|c| s.spawn(move || run(c, root).map(|(d, _)| d))).collect();
            handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
        });
        for (i, r) in chunk_results.into_iter().enumerate() {
            results[chunk_idx * jobs + i] = Some(r);
        }
    }
    results.into_iter().map(|r| r.expect("every config ran")).collect()
}

/// Every run directory (holding a report) below `root`.
pub fn find_runs(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(REPORT_FILE).is_file() {
            out.push(dir);
            continue;
        }
        if let Ok(rd) = fs::read_dir(&dir) {
            for e in rd.flatten() {
                if e.path().is_dir() {
                    stack.push(e.path());
                }
            }
        }
    }
    out.sort();
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

pub const TABLE_HEADER: &str =
    "mode,teacher,split,seeds,SR,SR_std,ImpF1,CacheMiss,Intervention,ActionEfficiency,TokensK,per_seed_SR";

/// Table-shaped CSV: one row per (mode, teacher, split). Rows without
/// runs are marked missing.
pub fn table_csv(reports: &[RunReport]) -> String {
    let mut splits: BTreeSet<String> = reports.iter().map(|r| r.split_name.clone()).collect();
    if splits.is_empty() {
        splits.insert("low".into());
    }
    let mut rows = vec![TABLE_HEADER.to_string()];
    let mut cells: Vec<(Mode, &str)> = vec![(Mode::Base, "none")];
    for mode in Mode::ALL.into_iter().filter(|m| *m != Mode::Base) {
        for t in TeacherKind::ALL {
            cells.push((mode, t.as_str()));
        }
    }
    for split in &splits {
        for &(mode, teacher) in &cells {
            let mut group: Vec<&RunReport> = reports
                .iter()
                .filter(|r| r.config.mode == mode && r.config.teacher_label() == teacher && &r.split_name == split)
                .collect();
            group.sort_by_key(|r| r.config.seed);
            if group.is_empty() {
                rows.push(format!("{mode},{teacher},{split},0,missing,missing,missing,missing,missing,missing,missing,"));
                continue;
            }
            let col = |f: fn(&Aggregates) -> Option<f64>| {
                let vals: Vec<f64> = group.iter().filter_map(|r| f(&r.aggregates)).collect();
                mean_std(&vals)
            };
            let sr = col(|a| to_f64(&a.success_rate));
            let per_seed: Vec<String> = group
                .iter()
                .map(|r| format!("{}:{}", r.config.seed, fmt_opt(to_f64(&r.aggregates.success_rate))))
                .collect();
            rows.push(format!(
                "{mode},{teacher},{split},{},{},{},{},{},{},{},{},{}",
                group.len(),
                fmt_opt(sr.0),
                fmt_opt(sr.1),
                fmt_opt(col(|a| to_f64(&a.impossible_f1)).0),
                fmt_opt(col(|a| to_f64(&a.avg_cache_miss)).0),
                fmt_opt(col(|a| to_f64(&a.intervention_rate)).0),
                fmt_opt(col(|a| to_f64(&a.action_efficiency)).0),
                fmt_opt(col(|a| Some(a.total_tokens as f64 / 1000.0)).0),
                per_seed.join(" "),
            ));
        }
    }
    rows.join("\n") + "\n"
}

fn run_label(r: &RunReport) -> String {
    format!("{}-{}-{}-seed{}", r.config.mode, r.config.teacher_label(), r.split_name, r.config.seed)
}

/// (first read-memory turn, success) per episode.
pub fn call_position_csv(reports: &[RunReport]) -> String {
    let mut out = String::from("run,episode,example_id,first_read_turn,success\n");
    for r in reports {
        for e in &r.episodes {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                run_label(r),
                e.episode,
                e.example_id,
                e.first_read_turn.map_or("NA".into(), |t| t.to_string()),
                e.success as u8
            ));
        }
    }
    out
}

/// Cache hits and misses per episode, in run order.
pub fn hit_miss_csv(reports: &[RunReport]) -> String {
    let mut out = String::from("run,episode,target,cache_hits,cache_misses\n");
    for r in reports {
        for e in &r.episodes {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                run_label(r),
                e.episode,
                e.target,
                e.cache_hits,
                e.cache_misses
            ));
        }
    }
    out
}

/// Per-episode rows for external statistics.
pub fn episodes_csv(reports: &[RunReport]) -> String {
    let mut out = String::from(
        "run,mode,teacher,split,seed,episode,example_id,target,solvable,success,status,env_steps,cache_hits,cache_misses,tokens,failure,eager_crafting\n",
    );
    for r in reports {
        for e in &r.episodes {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                run_label(r),
                r.config.mode,
                r.config.teacher_label(),
                r.split_name,
                r.config.seed,
                e.episode,
                e.example_id,
                e.target,
                e.solvable as u8,
                e.success as u8,
                serde_json::to_value(e.status).unwrap().as_str().unwrap(),
                e.env_steps_taken,
                e.cache_hits,
                e.cache_misses,
                e.tokens,
                e.failure.class.map_or("", |c| c.as_str()),
                e.failure.eager_crafting as u8
            ));
        }
    }
    out
}

/// Writes the aggregate CSVs into `out_dir`; returns the file paths.
pub fn write_report(root: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let reports: Vec<RunReport> = find_runs(root).iter().map(|d| load_report(d)).collect::<Result<_, _>>()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let files = [
        ("table.csv", table_csv(&reports)),
        ("call_position.csv", call_position_csv(&reports)),
        ("hit_miss.csv", hit_miss_csv(&reports)),
        ("episodes.csv", episodes_csv(&reports)),
    ];
    let mut paths = Vec::new();
    for (name, body) in files {
        let p = out_dir.join(name);
        fs::write(&p, body).map_err(io_err(&p))?;
        paths.push(p);
    }
    Ok(paths)
}

pub fn parse_list<T: FromStr<Err = String>>(s: &str, all: &[T]) -> Result<Vec<T>, String>
where
    T: Clone,
{
    if s == "all" {
        return Ok(all.to_vec());
    }
    s.split(',').map(|p| p.trim().parse()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::StepEvent;
    use crate::dataset::{build_split, split_to_jsonl, Complexity, SplitName, SplitSpec};
    use crate::env::Stack;
    use crate::gateway::Usage;
    use crate::recipe::ItemId;

    fn item(s: &str) -> ItemId {
        ItemId::new(s).unwrap()
    }

    fn record(solvable: bool, success: bool, impossible: bool, misses: u32) -> EpisodeRecord {
        EpisodeRecord {
            episode: 0,
            example_id: "x".into(),
            target: item("stick"),
            mode: Mode::How2,
            teacher: Some(TeacherKind::Executable),
            solvable,
            status: if impossible { Status::ImpossibleDeclared } else if success { Status::Success } else { Status::MaxSteps },
            success,
            declared_impossible: impossible,
            env_steps_taken: 4,
            optimal_env_steps: 4,
            events: vec![],
            cache_hits: 0,
            cache_misses: misses,
            first_read_turn: None,
            protocol_failures: 0,
            usage: Usage::default(),
            usage_by_role: BTreeMap::new(),
            gateway_calls: vec![],
            infra_error: None,
        }
    }

    fn none() -> FailureInfo {
        FailureInfo { class: None, eager_crafting: false }
    }

    #[test]
    fn f1_hand_check() {
        assert_eq!(f1(8, 1, 3), Some(Rational::new(4, 5)));
        assert_eq!(f1(0, 0, 0), None);
    }

    #[test]
    fn intervention_and_undefined() {
        let recs = vec![record(true, true, false, 1), record(true, true, false, 2), record(true, true, false, 1), record(true, true, false, 0)];
        let agg = compute_metrics(&recs, &vec![none(); 4]);
        assert_eq!(agg.intervention_rate, Some(Rational::new(3, 4)));
        assert_eq!(agg.avg_cache_miss, Some(Rational::new(1, 1)));
        assert_eq!(agg.impossible_f1, None);
        assert_eq!(agg.action_efficiency, Some(Rational::from_integer(0)));
        let empty = compute_metrics(&[], &[]);
        assert_eq!(empty.success_rate, None);
    }

    #[test]
    fn infra_failures_are_excluded() {
        let mut bad = record(true, false, false, 0);
        bad.infra_error = Some("down".into());
        let agg = compute_metrics(&[record(true, true, false, 0), bad], &[none(), none()]);
        assert_eq!(agg.success_rate, Some(Rational::from_integer(1)));
        assert_eq!(agg.infra_failures, 1);
    }

    fn example(target: &str, cells: &[(&str, &str, u32)]) -> TaskExample {
        TaskExample {
            id: "x".into(),
            target: item(target),
            initial_slots: cells.iter().map(|&(s, i, n)| (s.parse().unwrap(), Stack::new(item(i), n))).collect(),
            distractor_count: 4,
            complexity: Complexity::Medium,
            solvable: true,
            optimal_recipe_applications: 2,
            optimal_env_steps: 4,
        }
    }

    fn with_actions(mut r: EpisodeRecord, actions: &[EnvAction]) -> EpisodeRecord {
        r.events = actions
            .iter()
            .enumerate()
            .map(|(i, a)| StepEvent::Env { turn: i as u32 + 1, action: a.clone(), feedback: None, forced: false })
            .collect();
        r
    }

    fn mv(f: &str, t: &str, q: u32) -> EnvAction {
        EnvAction::Move { from: f.parse().unwrap(), to: t.parse().unwrap(), quantity: q }
    }

    #[test]
    fn classification_order() {
        let book = RecipeBook::bundled();
        let ex = example("crimson_planks", &[("I15", "crimson_hyphae", 1)]);
        let imp = with_actions(record(true, false, true, 0), &[EnvAction::Impossible { reason: "no".into() }]);
        assert_eq!(classify_failure(&imp, &ex, &book).class, Some(FailureClass::ImpossibleError));
        let cut = with_actions(record(true, false, false, 0), &[mv("I15", "A1", 1)]);
        assert_eq!(classify_failure(&cut, &ex, &book).class, Some(FailureClass::MaxStepsError));
        let idle = with_actions(record(true, false, false, 0), &[EnvAction::NoOp]);
        assert_eq!(classify_failure(&idle, &ex, &book).class, Some(FailureClass::Other));
    }

    #[test]
    fn run_directory_recomputes() {
        let book = RecipeBook::bundled();
        let tmp = tempfile::tempdir().unwrap();
        let spec = SplitSpec { name: SplitName::Low, size: 12, histogram: [4, 3, 3, 2], unique_target_budget: 8 };
        let split = build_split(&spec, 3, &book).unwrap();
        let header = SplitHeader { spec, seed: 3, recipes_fingerprint: book.fingerprint().to_string() };
        let split_path = tmp.path().join("low.jsonl");
        fs::write(&split_path, split_to_jsonl(&header, &split)).unwrap();
        let cfg = RunConfig::scripted(Mode::How2, TeacherKind::SubgoalPartiallyExecutable, split_path, 1);
        let (dir, out) = run(&cfg, &tmp.path().join("runs")).unwrap();
        assert_eq!(recompute(&dir).unwrap(), out.report.aggregates);
        let (_, again) = run(&cfg, &tmp.path().join("runs2")).unwrap();
        assert_eq!(again.report, out.report);
        let paths = write_report(&tmp.path().join("runs"), &tmp.path().join("agg")).unwrap();
        let table = fs::read_to_string(&paths[0]).unwrap();
        assert_eq!(table.lines().count(), 1 + 21);
        assert!(table.contains("how2,subgoal_partially_executable,low,1,"));
        assert!(table.contains("base,none,low,0,missing"));
    }

    #[test]
    fn sweep_enumeration() {
        let t = RunConfig::scripted(Mode::How2, TeacherKind::Executable, "x".into(), 0);
        let cfgs = sweep_configs(&t, &[Mode::How2, Mode::JustAsk], &TeacherKind::ALL, &[0, 1, 2]);
        assert_eq!(cfgs.len(), 24);
        let dirs: BTreeSet<PathBuf> = cfgs.iter().map(|c| c.run_dir(Path::new("r"), "low")).collect();
        assert_eq!(dirs.len(), 24);
        assert_eq!(sweep_configs(&t, &[Mode::Base], &TeacherKind::ALL, &[0]).len(), 1);
    }
}
