//! Procedural memory: a query-keyed store of parsed teacher answers and the
//! read-memory algorithm with its relevance, ask and parse roles.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{render_observation, EnvAction, GameState, SlotId};
use crate::gateway::{ChatMessage, ChatRequest, Gateway, GatewayError, Role};
use crate::instruction::{parse_instruction, peak_draw, strip_numbering, Instruction};
use crate::planner::{reachable_kinds, relevant_recipes};
use crate::prompts;
use crate::recipe::{hex, ItemId, RecipeBook};
use crate::teacher::{Teacher, TeacherAnswer, TeacherError, TeacherKind, HEADER_SUFFIX};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub recipe_name: String,
    pub requirements: Vec<(ItemId, u32)>,
    pub procedure: Vec<String>,
    pub related_items: Vec<ItemId>,
    pub raw_answer: String,
    pub source_kind: TeacherKind,
    pub created_at: usize,
    /// Stored without structure: the raw answer is the whole entry.
    #[serde(default)]
    pub degraded: bool,
}

impl MemoryEntry {
    /// Hash over the structured content; provenance fields are excluded.
    pub fn content_hash(&self) -> String {
        let value = serde_json::json!([
            self.recipe_name,
            self.requirements,
            self.procedure,
            self.related_items,
            self.degraded,
        ]);
        hex(&Sha256::digest(value.to_string().as_bytes()))
    }

    /// Text handed back to the actor.
    pub fn render(&self) -> String {
        if self.degraded {
            return self.raw_answer.clone();
        }
        let mut out = format!("RECIPE: {}\nREQUIREMENTS:", self.recipe_name);
        for (item, n) in &self.requirements {
            out.push_str(&format!("\n- {n} {item}"));
        }
        out.push_str("\nPROCEDURE:");
        for line in &self.procedure {
            out.push('\n');
            out.push_str(line);
        }
        let related: Vec<String> = self.related_items.iter().map(|i| format!("'{i}'")).collect();
        out.push_str(&format!("\nRELATED ITEMS: [{}]", related.join(", ")));
        out
    }
}

pub fn normalize_query(query: &str) -> String {
    query.trim().to_lowercase()
}

/// Query-keyed entry sets. Entries are shared across keys by content hash
/// and never removed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryStore {
    table: BTreeMap<String, Vec<String>>,
    entries: HashMap<String, MemoryEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SnapshotRecord {
    key: String,
    hash: String,
    entry: MemoryEntry,
}

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("empty memory query")]
    EmptyQuery,
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("bad snapshot line {line}: {message}")]
    Snapshot { line: usize, message: String },
}

impl MemoryStore {
    pub fn new() -> Self {
        MemoryStore::default()
    }

    pub fn contains_key(&self, query: &str) -> bool {
        self.table.contains_key(&normalize_query(query))
    }

    pub fn get(&self, query: &str) -> Vec<&MemoryEntry> {
        self.table
            .get(&normalize_query(query))
            .map(|hs| hs.iter().map(|h| &self.entries[h]).collect())
            .unwrap_or_default()
    }

    /// Inserts under every key; returns the entry hash. Re-inserting equal
    /// content under a key is a no-op.
    pub fn insert(&mut self, entry: MemoryEntry, keys: &[String]) -> String {
        let hash = entry.content_hash();
        self.entries.entry(hash.clone()).or_insert(entry);
        for key in keys {
            let slot = self.table.entry(normalize_query(key)).or_default();
            if !slot.contains(&hash) {
                slot.push(hash.clone());
            }
        }
        hash
    }

    pub fn keys_for(&self, hash: &str) -> Vec<&str> {
        self.table
            .iter()
            .filter(|(_, hs)| hs.iter().any(|h| h == hash))
            .map(|(k, _)| k.as_str())
            .collect()
    }

    /// Number of distinct entries.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn key_count(&self) -> usize {
        self.table.len()
    }

    pub fn export_jsonl(&self) -> String {
        let mut out = String::new();
        for (key, hashes) in &self.table {
            for h in hashes {
                let rec = SnapshotRecord {
                    key: key.clone(),
                    hash: h.clone(),
                    entry: self.entries[h].clone(),
                };
                out.push_str(&serde_json::to_string(&rec).expect("entries serialize"));
                out.push('\n');
            }
        }
        out
    }

    pub fn import_jsonl(text: &str) -> Result<Self, MemoryError> {
        let mut store = MemoryStore::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: SnapshotRecord = serde_json::from_str(line).map_err(|e| MemoryError::Snapshot {
                line: i + 1,
                message: e.to_string(),
            })?;
            if rec.entry.content_hash() != rec.hash {
                return Err(MemoryError::Snapshot {
                    line: i + 1,
                    message: "content hash mismatch".into(),
                });
            }
            store.insert(rec.entry, &[rec.key]);
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceMode {
    Always,
    Rule,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    Identity,
    Rule,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AskMode {
    Rule,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryRoles {
    pub relevance: RelevanceMode,
    pub parse: ParseMode,
    pub ask: AskMode,
}

impl MemoryRoles {
    pub fn rule_based() -> Self {
        MemoryRoles {
            relevance: RelevanceMode::Rule,
            parse: ParseMode::Rule,
            ask: AskMode::Rule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MemoryEvent {
    CacheHit {
        query: String,
        entries_returned: usize,
        checked: usize,
    },
    CacheMiss {
        query: String,
        question: String,
        answer: String,
        teacher: TeacherKind,
        stored_hash: Option<String>,
        tags: Vec<String>,
        /// Entries under the key that all failed the relevance check.
        rejected: usize,
        degraded: bool,
    },
}

impl MemoryEvent {
    pub fn is_miss(&self) -> bool {
        matches!(self, MemoryEvent::CacheMiss { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReadOutcome {
    pub response: String,
    pub event: MemoryEvent,
}

/// Everything a role needs besides the store.
pub struct RoleContext<'a> {
    pub recipes: &'a RecipeBook,
    pub teacher: &'a Teacher,
    pub gateway: Option<&'a mut Gateway>,
    pub episode: usize,
}

impl RoleContext<'_> {
    fn gateway(&mut self) -> Result<&mut Gateway, MemoryError> {
        self.gateway
            .as_deref_mut()
            .ok_or_else(|| MemoryError::Gateway(GatewayError::Config("no gateway for a model-backed role".into())))
    }
}

fn memory_messages(user: String) -> Vec<ChatMessage> {
    vec![ChatMessage::system(prompts::memory_system_prompt()), ChatMessage::user(user)]
}

pub fn ask_question(
    mode: AskMode,
    state: &GameState,
    target: &ItemId,
    query: &str,
    ctx: &mut RoleContext,
) -> Result<String, MemoryError> {
    assert!(!query.is_empty(), "ask_question needs a query");
    match mode {
        AskMode::Rule => Ok(format!("How do I craft {query}?")),
        AskMode::Llm => {
            let user = prompts::fill(
                prompts::ASK_PROMPT,
                &[("context", &render_observation(state, target)), ("recipe_name", query)],
            );
            let text = ctx
                .gateway()?
                .complete_text(ChatRequest::new(Role::Ask, memory_messages(user)))?;
            let line = text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
            Ok(if line.is_empty() {
                format!("How do I craft {query}?")
            } else {
                line.to_string()
            })
        }
    }
}

/// Item named by an impossibility procedure line.
fn impossible_missing(entry: &MemoryEntry) -> Option<ItemId> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"This task is impossible: no way to obtain ([a-z0-9_]+)").unwrap());
    entry
        .procedure
        .iter()
        .chain(std::iter::once(&entry.raw_answer))
        .find_map(|l| re.captures(l))
        .and_then(|c| ItemId::new(&c[1]).ok())
}

/// Rule-based relevance: an impossibility note is relevant while its
/// missing item is still unobtainable; a procedure is relevant when its
/// requirements are held and it makes the target or one of its ingredients.
pub fn rule_relevant(state: &GameState, target: &ItemId, entry: &MemoryEntry, recipes: &RecipeBook) -> bool {
    let totals = state.item_totals();
    if let Some(missing) = impossible_missing(entry) {
        return entry.recipe_name == target.as_str()
            && !reachable_kinds(totals.keys().cloned(), recipes).contains(&missing);
    }
    if entry.degraded && entry.procedure.iter().any(|l| inventory_token_regex().is_match(l)) {
        return false;
    }
    let covered = entry
        .requirements
        .iter()
        .all(|(item, n)| totals.get(item).copied().unwrap_or(0) >= *n);
    if !covered {
        return false;
    }
    if entry.recipe_name == target.as_str() {
        return true;
    }
    relevant_recipes(target, recipes)
        .iter()
        .any(|r| r.ingredients().keys().any(|i| i.as_str() == entry.recipe_name))
}

pub fn is_relevant(
    mode: RelevanceMode,
    state: &GameState,
    target: &ItemId,
    entry: &MemoryEntry,
    ctx: &mut RoleContext,
) -> Result<bool, MemoryError> {
    match mode {
        RelevanceMode::Always => Ok(true),
        RelevanceMode::Rule => Ok(rule_relevant(state, target, entry, ctx.recipes)),
        RelevanceMode::Llm => {
            let user = prompts::fill(
                prompts::RELEVANCE_PROMPT,
                &[
                    ("context", &render_observation(state, target)),
                    ("recipe_name", &entry.recipe_name),
                    ("memory", &entry.render()),
                ],
            );
            let text = ctx
                .gateway()?
                .complete_text(ChatRequest::new(Role::Relevance, memory_messages(user)))?;
            Ok(match text.trim().to_lowercase().as_str() {
                "yes" => true,
                "no" => false,
                other => {
                    log::warn!("relevance answer {other:?} is neither yes nor no; treating as no");
                    false
                }
            })
        }
    }
}

/// Answer lines without the "To craft a X, follow these steps:" header.
fn answer_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty())
        .filter(|l| !(l.starts_with("To craft a ") && l.ends_with(HEADER_SUFFIX)))
        .map(str::to_string)
        .collect()
}

fn inventory_token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\bI[0-9]+\b").unwrap())
}

/// Replaces inventory slot tokens by the item they hold in `state`.
pub fn substitute_inventory_slots(line: &str, state: &GameState) -> String {
    inventory_token_regex().replace_all(line, |c: &regex::Captures| {
        match c[0].parse::<SlotId>().ok().and_then(|s| state.slot(s)) {
            Some(st) => st.item.to_string(),
            None => "an inventory slot".to_string(),
        }
    })
    .into_owned()
}

fn number_prefix(line: &str) -> &str {
    let rest = strip_numbering(line);
    line[..line.len() - rest.len()].trim_start()
}

/// Rewrites literal slot actions into item-level instructions by replaying
/// them on a copy of the state.
fn rewrite_exact_lines(lines: &[String], state: &GameState, recipes: &RecipeBook) -> Vec<String> {
    let mut sim = state.clone();
    sim.max_steps = u32::MAX;
    lines
        .iter()
        .map(|line| {
            let Some(Instruction::Exact(action)) = parse_instruction(line) else {
                return substitute_inventory_slots(line, state);
            };
            let rewritten = match &action {
                EnvAction::Move { from, to, .. } | EnvAction::Smelt { from, to, .. } => {
                    sim.slot(*from).map(|st| st.item.clone()).and_then(|item| match (&action, from, to) {
                        (EnvAction::Smelt { quantity, .. }, _, _) => {
                            Some(Instruction::Smelt { item, quantity: *quantity })
                        }
                        (_, SlotId::Output, _) => Some(Instruction::Extract { item }),
                        (_, f, t) if f.is_grid() && t.is_inventory() => Some(Instruction::Clear { item, from: *f }),
                        (_, _, t) if t.is_grid() => Some(Instruction::Place { item, to: *t }),
                        _ => None,
                    })
                }
                _ => None,
            };
            let _ = sim.apply(&action, recipes);
            match rewritten {
                Some(ins) => format!("{}{}", number_prefix(line), ins.render()),
                None => substitute_inventory_slots(line, state),
            }
        })
        .collect()
}

fn dedup_items(items: impl IntoIterator<Item = ItemId>) -> Vec<ItemId> {
    let set: BTreeSet<ItemId> = items.into_iter().collect();
    set.into_iter().collect()
}

pub fn rule_parse(
    state: &GameState,
    query: &str,
    answer: &TeacherAnswer,
    recipes: &RecipeBook,
    episode: usize,
) -> (MemoryEntry, Vec<String>) {
    let lines = answer_lines(&answer.text);
    let procedure = rewrite_exact_lines(&lines, state, recipes);
    let instructions: Vec<Instruction> = procedure.iter().filter_map(|l| parse_instruction(l)).collect();
    let requirements: Vec<(ItemId, u32)> = peak_draw(&instructions, recipes).into_iter().collect();
    let mut related = Vec::new();
    for ins in &instructions {
        match ins {
            Instruction::Place { item, .. }
            | Instruction::Extract { item }
            | Instruction::Clear { item, .. }
            | Instruction::Smelt { item, .. } => related.push(item.clone()),
            Instruction::Impossible { .. } | Instruction::Exact(_) => {}
        }
    }
    let entry = MemoryEntry {
        recipe_name: query.to_string(),
        requirements,
        procedure: if procedure.is_empty() { vec![answer.text.clone()] } else { procedure },
        related_items: dedup_items(related.into_iter().chain(impossible_note_item(answer))),
        raw_answer: answer.text.clone(),
        source_kind: answer.kind,
        created_at: episode,
        degraded: false,
    };
    let tags = tags_for(query, &entry);
    (entry, tags)
}

fn impossible_note_item(answer: &TeacherAnswer) -> Option<ItemId> {
    if !answer.impossible {
        return None;
    }
    impossible_missing(&MemoryEntry {
        recipe_name: String::new(),
        requirements: vec![],
        procedure: vec![],
        related_items: vec![],
        raw_answer: answer.text.clone(),
        source_kind: answer.kind,
        created_at: 0,
        degraded: false,
    })
}

fn tags_for(query: &str, entry: &MemoryEntry) -> Vec<String> {
    let mut tags: BTreeSet<String> = BTreeSet::from([normalize_query(query), normalize_query(&entry.recipe_name)]);
    tags.extend(entry.related_items.iter().map(|i| i.to_string()));
    tags.into_iter().collect()
}

pub fn identity_parse(query: &str, answer: &TeacherAnswer, episode: usize) -> (MemoryEntry, Vec<String>) {
    let entry = MemoryEntry {
        recipe_name: query.to_string(),
        requirements: vec![],
        procedure: answer.text.lines().map(str::to_string).collect(),
        related_items: vec![],
        raw_answer: answer.text.clone(),
        source_kind: answer.kind,
        created_at: episode,
        degraded: true,
    };
    (entry, vec![normalize_query(query)])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSections {
    pub recipe: String,
    pub requirements: Vec<(ItemId, u32)>,
    pub procedure: Vec<String>,
    pub related_items: Vec<ItemId>,
}

/// Splits a RECIPE / REQUIREMENTS / PROCEDURE / RELATED ITEMS reply.
/// Returns the names of missing mandatory sections on failure.
pub fn parse_sections(text: &str) -> Result<ParsedSections, Vec<&'static str>> {
    #[derive(PartialEq)]
    enum Sec {
        None,
        Req,
        Proc,
        Rel,
    }
    static REQ: OnceLock<Regex> = OnceLock::new();
    static QUOTED: OnceLock<Regex> = OnceLock::new();
    let req_re = REQ.get_or_init(|| Regex::new(r"^[-*]?\s*(?:(\d+)\s*x?\s+)?([a-z0-9_]+)\s*(?:x\s*(\d+))?$").unwrap());
    let quoted = QUOTED.get_or_init(|| Regex::new(r#"'([a-z0-9_]+)'|"([a-z0-9_]+)""#).unwrap());

    let mut recipe = None;
    let mut requirements = Vec::new();
    let mut procedure = Vec::new();
    let mut related = Vec::new();
    let mut saw_proc = false;
    let mut sec = Sec::None;
    let mut related_text = String::new();
    for raw in text.lines() {
        let line = raw.trim().trim_start_matches(['*', '#', ' ']).trim_end_matches('*');
        let upper = line.to_uppercase();
        let (head, rest) = match line.split_once(':') {
            Some((h, r)) => (h.trim().trim_end_matches('*').to_uppercase(), r.trim()),
            None => (String::new(), ""),
        };
        match head.as_str() {
            "RECIPE" => {
                recipe = Some(rest.trim_matches('*').trim().to_string()).filter(|s| !s.is_empty());
                sec = Sec::None;
                continue;
            }
            "REQUIREMENTS" => {
                sec = Sec::Req;
                if rest.is_empty() {
                    continue;
                }
            }
            "PROCEDURE" => {
                sec = Sec::Proc;
                saw_proc = true;
                if rest.is_empty() {
                    continue;
                }
            }
            "RELATED ITEMS" => {
                sec = Sec::Rel;
                related_text.push_str(rest);
                continue;
            }
            _ => {}
        }
        let content = if matches!(head.as_str(), "REQUIREMENTS" | "PROCEDURE") { rest } else { line };
        if content.is_empty() && upper.is_empty() {
            continue;
        }
        match sec {
            Sec::Req => {
                for part in content.split(',') {
                    if let Some(c) = req_re.captures(part.trim()) {
                        let n = c.get(1).or(c.get(3)).map_or(1, |m| m.as_str().parse().unwrap_or(1));
                        if let Ok(item) = ItemId::new(&c[2]) {
                            requirements.push((item, n));
                        }
                    }
                }
            }
            Sec::Proc if !content.is_empty() => procedure.push(content.to_string()),
            Sec::Rel => related_text.push_str(content),
            _ => {}
        }
    }
    for c in quoted.captures_iter(&related_text) {
        if let Ok(item) = ItemId::new(c.get(1).or(c.get(2)).unwrap().as_str()) {
            related.push(item);
        }
    }
    let mut missing = Vec::new();
    if recipe.is_none() {
        missing.push("RECIPE");
    }
    if !saw_proc || procedure.is_empty() {
        missing.push("PROCEDURE");
    }
    if !missing.is_empty() {
        return Err(missing);
    }
    Ok(ParsedSections {
        recipe: recipe.unwrap(),
        requirements,
        procedure,
        related_items: dedup_items(related),
    })
}

pub fn llm_parse(
    state: &GameState,
    target: &ItemId,
    query: &str,
    question: &str,
    answer: &TeacherAnswer,
    ctx: &mut RoleContext,
) -> Result<(MemoryEntry, Vec<String>), MemoryError> {
    let user = prompts::fill(
        prompts::PARSE_PROMPT,
        &[
            ("recipe_name", query),
            ("context", &render_observation(state, target)),
            ("question", question),
            ("answer", &answer.text),
        ],
    );
    let mut messages = memory_messages(user);
    let episode = ctx.episode;
    for attempt in 0..2 {
        let reply = ctx
            .gateway()?
            .complete_text(ChatRequest::new(Role::Parse, messages.clone()))?;
        match parse_sections(&reply) {
            Ok(p) => {
                let entry = MemoryEntry {
                    recipe_name: p.recipe,
                    requirements: p.requirements,
                    procedure: p.procedure.iter().map(|l| substitute_inventory_slots(l, state)).collect(),
                    related_items: p.related_items,
                    raw_answer: answer.text.clone(),
                    source_kind: answer.kind,
                    created_at: episode,
                    degraded: false,
                };
                let tags = tags_for(query, &entry);
                return Ok((entry, tags));
            }
            Err(missing) if attempt == 0 => {
                log::warn!("parse reply missing {missing:?}; reprompting");
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(format!(
                    "Your entry is missing the {} section(s). Reply again using the RECIPE, REQUIREMENTS, PROCEDURE and RELATED ITEMS sections.",
                    missing.join(" and ")
                )));
            }
            Err(missing) => log::warn!("parse reply still missing {missing:?}; storing raw answer"),
        }
    }
    let mut entry = identity_parse(query, answer, episode).0;
    entry.procedure = entry
        .procedure
        .iter()
        .map(|l| substitute_inventory_slots(l, state))
        .collect();
    Ok((entry, vec![normalize_query(query)]))
}

pub fn parse_answer(
    mode: ParseMode,
    state: &GameState,
    target: &ItemId,
    query: &str,
    question: &str,
    answer: &TeacherAnswer,
    ctx: &mut RoleContext,
) -> Result<(MemoryEntry, Vec<String>), MemoryError> {
    match mode {
        ParseMode::Identity => Ok(identity_parse(query, answer, ctx.episode)),
        ParseMode::Rule => Ok(rule_parse(state, query, answer, ctx.recipes, ctx.episode)),
        ParseMode::Llm => llm_parse(state, target, query, question, answer, ctx),
    }
}

/// The item the teacher is asked about: the query when it names a known
/// item, else the episode target.
pub fn teacher_target(query: &str, target: &ItemId, recipes: &RecipeBook) -> ItemId {
    ItemId::new(normalize_query(query))
        .ok()
        .filter(|i| recipes.items().contains(i))
        .unwrap_or_else(|| target.clone())
}

fn consult(
    state: &GameState,
    target: &ItemId,
    query: &str,
    roles: &MemoryRoles,
    ctx: &mut RoleContext,
) -> Result<(String, TeacherAnswer), MemoryError> {
    let question = ask_question(roles.ask, state, target, query, ctx)?;
    let subject = teacher_target(query, target, ctx.recipes);
    let teacher = ctx.teacher;
    let answer = teacher.answer(state, &subject, &question, ctx.gateway.as_deref_mut())?;
    Ok((question, answer))
}

/// Memory lookup with teacher fallback: relevant stored entries are returned
/// together; otherwise the teacher is asked and the parsed answer stored
/// under the query and each of its tags.
pub fn read_memory(
    store: &mut MemoryStore,
    state: &GameState,
    target: &ItemId,
    query: &str,
    roles: &MemoryRoles,
    ctx: &mut RoleContext,
) -> Result<ReadOutcome, MemoryError> {
    let theta = normalize_query(query);
    if theta.is_empty() {
        return Err(MemoryError::EmptyQuery);
    }
    let candidates: Vec<MemoryEntry> = store.get(&theta).into_iter().cloned().collect();
    let mut relevant = Vec::new();
    for entry in &candidates {
        if is_relevant(roles.relevance, state, target, entry, ctx)? {
            relevant.push(entry);
        }
    }
    if !relevant.is_empty() {
        let response = relevant.iter().map(|e| e.render()).collect::<Vec<_>>().join("\n\n");
        return Ok(ReadOutcome {
            response,
            event: MemoryEvent::CacheHit {
                query: theta,
                entries_returned: relevant.len(),
                checked: candidates.len(),
            },
        });
    }
    let (question, answer) = consult(state, target, &theta, roles, ctx)?;
    let (entry, mut tags) = parse_answer(roles.parse, state, target, &theta, &question, &answer, ctx)?;
    if !tags.contains(&theta) {
        tags.insert(0, theta.clone());
    }
    let response = entry.render();
    let degraded = entry.degraded;
    let hash = store.insert(entry, &tags);
    Ok(ReadOutcome {
        response,
        event: MemoryEvent::CacheMiss {
            query: theta,
            question,
            answer: answer.text,
            teacher: answer.kind,
            stored_hash: Some(hash),
            tags,
            rejected: candidates.len(),
            degraded,
        },
    })
}

/// Teacher consultation that bypasses the store entirely.
pub fn just_ask(
    state: &GameState,
    target: &ItemId,
    query: &str,
    roles: &MemoryRoles,
    ctx: &mut RoleContext,
) -> Result<ReadOutcome, MemoryError> {
    let theta = normalize_query(query);
    if theta.is_empty() {
        return Err(MemoryError::EmptyQuery);
    }
    let (question, answer) = consult(state, target, &theta, roles, ctx)?;
    Ok(ReadOutcome {
        response: answer.text.clone(),
        event: MemoryEvent::CacheMiss {
            query: theta,
            question,
            answer: answer.text,
            teacher: answer.kind,
            stored_hash: None,
            tags: vec![],
            rejected: 0,
            degraded: false,
        },
    })
}
