//! Recipe data model, grid matching and the recipe dependency graph.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// The recipe file shipped with the crate.
pub const BUNDLED_RECIPES: &str = include_str!("../data/recipes.jsonl");

/// Lowercase snake-case item name, e.g. `oak_planks`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ItemId(String);

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid item id {0:?}: expected [a-z0-9_]+")]
pub struct InvalidItemId(pub String);

impl ItemId {
    pub fn new(name: impl Into<String>) -> Result<Self, InvalidItemId> {
        let name = name.into();
        if !name.is_empty()
            && name
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
        {
            Ok(ItemId(name))
        } else {
            Err(InvalidItemId(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for ItemId {
    type Err = InvalidItemId;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ItemId::new(s)
    }
}

impl Serialize for ItemId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for ItemId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ItemId::new(s).map_err(serde::de::Error::custom)
    }
}

/// Ingredient layout of a recipe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pattern {
    /// Rows of cells, trimmed to the bounding box of the occupied cells.
    Shaped(Vec<Vec<Option<ItemId>>>),
    /// Ingredient multiset, one unit per occupied grid cell.
    Shapeless(Vec<ItemId>),
    Smelting(ItemId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecipeKind {
    Shaped,
    Shapeless,
    Smelting,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recipe {
    pub id: String,
    pub pattern: Pattern,
    pub output: ItemId,
    pub output_count: u32,
}

impl Recipe {
    pub fn kind(&self) -> RecipeKind {
        match self.pattern {
            Pattern::Shaped(_) => RecipeKind::Shaped,
            Pattern::Shapeless(_) => RecipeKind::Shapeless,
            Pattern::Smelting(_) => RecipeKind::Smelting,
        }
    }

    /// Units consumed per item for one application.
    pub fn ingredients(&self) -> BTreeMap<ItemId, u32> {
        let mut out = BTreeMap::new();
        let mut add = |item: &ItemId| *out.entry(item.clone()).or_insert(0) += 1;
        match &self.pattern {
            Pattern::Shaped(rows) => rows.iter().flatten().flatten().for_each(&mut add),
            Pattern::Shapeless(items) => items.iter().for_each(&mut add),
            Pattern::Smelting(input) => add(input),
        }
        out
    }

    /// Number of grid cells one application occupies (0 for smelting).
    pub fn occupied_cells(&self) -> usize {
        match &self.pattern {
            Pattern::Shaped(rows) => rows.iter().flatten().filter(|c| c.is_some()).count(),
            Pattern::Shapeless(items) => items.len(),
            Pattern::Smelting(_) => 0,
        }
    }

    /// Canonical grid placement: shaped patterns anchored at A1, shapeless
    /// ingredients filled A1, A2, A3, B1, ... in listing order.
    pub fn canonical_placement(&self) -> Vec<((usize, usize), ItemId)> {
        match &self.pattern {
            Pattern::Shaped(rows) => rows
                .iter()
                .enumerate()
                .flat_map(|(r, row)| {
                    row.iter()
                        .enumerate()
                        .filter_map(move |(c, cell)| cell.clone().map(|item| ((r, c), item)))
                })
                .collect(),
            Pattern::Shapeless(items) => items
                .iter()
                .enumerate()
                .map(|(i, item)| ((i / 3, i % 3), item.clone()))
                .collect(),
            Pattern::Smelting(_) => Vec::new(),
        }
    }
}

/// One cell of a crafting grid.
pub type GridCell = Option<(ItemId, u32)>;
/// A 3x3 crafting grid, row-major (A, B, C) x (1, 2, 3).
pub type Grid = [[GridCell; 3]; 3];

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("recipe {id}: {message}")]
    Invalid { id: String, message: String },
    #[error("duplicate recipe id {0}")]
    DuplicateId(String),
    #[error("recipes {first} and {second} match the same grid arrangement")]
    Ambiguous { first: String, second: String },
    #[error("recipes {first} and {second} both smelt {input}")]
    DuplicateSmelt {
        first: String,
        second: String,
        input: ItemId,
    },
    #[error("reading recipe file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Deserialize)]
struct RecipeRecord {
    id: String,
    kind: RecipeKind,
    pattern: serde_json::Value,
    output_item: String,
    output_count: u32,
}

#[derive(Serialize)]
struct RecipeRecordOut<'a> {
    id: &'a str,
    kind: RecipeKind,
    pattern: serde_json::Value,
    output_item: &'a str,
    output_count: u32,
}

fn item_token(v: &serde_json::Value, id: &str) -> Result<Option<ItemId>, RecipeError> {
    let s = v.as_str().ok_or_else(|| RecipeError::Invalid {
        id: id.to_string(),
        message: format!("pattern cell {v} is not a string"),
    })?;
    if s == "_" {
        return Ok(None);
    }
    ItemId::new(s).map(Some).map_err(|e| RecipeError::Invalid {
        id: id.to_string(),
        message: e.to_string(),
    })
}

fn invalid(id: &str, message: impl Into<String>) -> RecipeError {
    RecipeError::Invalid {
        id: id.to_string(),
        message: message.into(),
    }
}

fn trim_shaped(rows: Vec<Vec<Option<ItemId>>>) -> Vec<Vec<Option<ItemId>>> {
    let occupied: Vec<(usize, usize)> = rows
        .iter()
        .enumerate()
        .flat_map(|(r, row)| {
            row.iter()
                .enumerate()
                .filter(|(_, c)| c.is_some())
                .map(move |(c, _)| (r, c))
        })
        .collect();
    let r0 = occupied.iter().map(|p| p.0).min().unwrap_or(0);
    let r1 = occupied.iter().map(|p| p.0).max().unwrap_or(0);
    let c0 = occupied.iter().map(|p| p.1).min().unwrap_or(0);
    let c1 = occupied.iter().map(|p| p.1).max().unwrap_or(0);
    (r0..=r1)
        .map(|r| (c0..=c1).map(|c| rows[r].get(c).cloned().flatten()).collect())
        .collect()
}

impl RecipeRecord {
    fn into_recipe(self) -> Result<Recipe, RecipeError> {
        let id = self.id;
        if id.trim().is_empty() {
            return Err(invalid(&id, "empty recipe id"));
        }
        let output = ItemId::new(self.output_item).map_err(|e| invalid(&id, e.to_string()))?;
        if self.output_count == 0 {
            return Err(invalid(&id, "output_count must be at least 1"));
        }
        let pattern = match self.kind {
            RecipeKind::Shaped => {
                let rows = self
                    .pattern
                    .as_array()
                    .ok_or_else(|| invalid(&id, "shaped pattern must be a list of rows"))?;
                if rows.is_empty() || rows.len() > 3 {
                    return Err(invalid(&id, "shaped pattern must have 1 to 3 rows"));
                }
                let mut parsed = Vec::with_capacity(rows.len());
                let width = rows[0].as_array().map(|r| r.len()).unwrap_or(0);
                for row in rows {
                    let cells = row
                        .as_array()
                        .ok_or_else(|| invalid(&id, "shaped row must be a list"))?;
                    if cells.is_empty() || cells.len() > 3 || cells.len() != width {
                        return Err(invalid(&id, "shaped rows must share a width of 1 to 3"));
                    }
                    parsed.push(
                        cells
                            .iter()
                            .map(|c| item_token(c, &id))
                            .collect::<Result<Vec<_>, _>>()?,
                    );
                }
                if parsed.iter().flatten().all(|c| c.is_none()) {
                    return Err(invalid(&id, "shaped pattern has no occupied cell"));
                }
                Pattern::Shaped(trim_shaped(parsed))
            }
            RecipeKind::Shapeless => {
                let items = self
                    .pattern
                    .as_array()
                    .ok_or_else(|| invalid(&id, "shapeless pattern must be a list"))?;
                if items.is_empty() || items.len() > 9 {
                    return Err(invalid(&id, "shapeless pattern must hold 1 to 9 items"));
                }
                let items = items
                    .iter()
                    .map(|c| {
                        item_token(c, &id)?.ok_or_else(|| invalid(&id, "empty shapeless cell"))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Pattern::Shapeless(items)
            }
            RecipeKind::Smelting => {
                let input = item_token(&self.pattern, &id)?
                    .ok_or_else(|| invalid(&id, "smelting input must be an item"))?;
                Pattern::Smelting(input)
            }
        };
        Ok(Recipe {
            id,
            pattern,
            output,
            output_count: self.output_count,
        })
    }
}

/// A validated, immutable recipe collection.
#[derive(Debug, Clone)]
pub struct RecipeBook {
    recipes: Vec<Recipe>,
    fingerprint: String,
}

impl RecipeBook {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_RECIPES).expect("bundled recipe file is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RecipeError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Parses a line-delimited recipe file. Blank lines and lines starting
    /// with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self, RecipeError> {
        let mut recipes = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let record: RecipeRecord =
                serde_json::from_str(trimmed).map_err(|e| RecipeError::Parse {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            recipes.push(record.into_recipe()?);
        }
        Self::from_recipes(recipes)
    }

    pub fn from_recipes(recipes: Vec<Recipe>) -> Result<Self, RecipeError> {
        let mut ids = BTreeSet::new();
        for r in &recipes {
            if !ids.insert(r.id.clone()) {
                return Err(RecipeError::DuplicateId(r.id.clone()));
            }
        }
        let mut smelt: BTreeMap<&ItemId, &str> = BTreeMap::new();
        for r in &recipes {
            if let Pattern::Smelting(input) = &r.pattern {
                if let Some(first) = smelt.insert(input, &r.id) {
                    return Err(RecipeError::DuplicateSmelt {
                        first: first.to_string(),
                        second: r.id.clone(),
                        input: input.clone(),
                    });
                }
            }
        }
        check_unambiguous(&recipes)?;
        let fingerprint = {
            let mut hasher = Sha256::new();
            for r in &recipes {
                hasher.update(serialize_recipe(r).as_bytes());
                hasher.update(b"\n");
            }
            hex(&hasher.finalize())
        };
        Ok(RecipeBook {
            recipes,
            fingerprint,
        })
    }

    pub fn recipes(&self) -> &[Recipe] {
        &self.recipes
    }

    pub fn get(&self, id: &str) -> Option<&Recipe> {
        self.recipes.iter().find(|r| r.id == id)
    }

    /// SHA-256 over the canonical serialization of every recipe.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Recipes producing `item`, sorted by id.
    pub fn producers(&self, item: &ItemId) -> Vec<&Recipe> {
        let mut out: Vec<&Recipe> = self.recipes.iter().filter(|r| &r.output == item).collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    /// Every item named anywhere in the book, sorted.
    pub fn items(&self) -> BTreeSet<ItemId> {
        let mut out = BTreeSet::new();
        for r in &self.recipes {
            out.insert(r.output.clone());
            out.extend(r.ingredients().into_keys());
        }
        out
    }

    pub fn match_grid(&self, grid: &Grid) -> Option<(&Recipe, ItemId, u32)> {
        match_grid(grid, &self.recipes)
    }

    pub fn match_smelt(&self, item: &ItemId) -> Option<(ItemId, u32)> {
        match_smelt(item, &self.recipes)
    }

    /// Subset of this book restricted to the given recipe ids (validation is
    /// inherited, so no re-check is needed).
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> RecipeBook {
        let keep: BTreeSet<&str> = ids.into_iter().collect();
        let recipes: Vec<Recipe> = self
            .recipes
            .iter()
            .filter(|r| keep.contains(r.id.as_str()))
            .cloned()
            .collect();
        RecipeBook {
            fingerprint: format!("{}:{}", self.fingerprint, recipes.len()),
            recipes,
        }
    }

    pub fn to_jsonl(&self) -> String {
        self.recipes
            .iter()
            .map(|r| serialize_recipe(r) + "\n")
            .collect()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn serialize_recipe(r: &Recipe) -> String {
    let pattern = match &r.pattern {
        Pattern::Shaped(rows) => serde_json::Value::Array(
            rows.iter()
                .map(|row| {
                    serde_json::Value::Array(
                        row.iter()
                            .map(|c| {
                                serde_json::Value::String(
                                    c.as_ref().map_or("_".to_string(), |i| i.to_string()),
                                )
                            })
                            .collect(),
                    )
                })
                .collect(),
        ),
        Pattern::Shapeless(items) => serde_json::Value::Array(
            items
                .iter()
                .map(|i| serde_json::Value::String(i.to_string()))
                .collect(),
        ),
        Pattern::Smelting(input) => serde_json::Value::String(input.to_string()),
    };
    serde_json::to_string(&RecipeRecordOut {
        id: &r.id,
        kind: r.kind(),
        pattern,
        output_item: r.output.as_str(),
        output_count: r.output_count,
    })
    .expect("recipe serializes")
}

fn grid_matches(grid: &Grid, recipe: &Recipe) -> bool {
    match &recipe.pattern {
        Pattern::Smelting(_) => false,
        Pattern::Shaped(rows) => {
            let mut occupied = Vec::new();
            for (r, row) in grid.iter().enumerate() {
                for (c, cell) in row.iter().enumerate() {
                    if cell.is_some() {
                        occupied.push((r, c));
                    }
                }
            }
            let Some(r0) = occupied.iter().map(|p| p.0).min() else {
                return false;
            };
            let r1 = occupied.iter().map(|p| p.0).max().unwrap();
            let c0 = occupied.iter().map(|p| p.1).min().unwrap();
            let c1 = occupied.iter().map(|p| p.1).max().unwrap();
            if r1 - r0 + 1 != rows.len() || c1 - c0 + 1 != rows[0].len() {
                return false;
            }
            rows.iter().enumerate().all(|(r, row)| {
                row.iter().enumerate().all(|(c, want)| {
                    let have = grid[r0 + r][c0 + c].as_ref().map(|(i, _)| i);
                    have == want.as_ref()
                })
            })
        }
        Pattern::Shapeless(items) => {
            let mut have: Vec<&ItemId> = grid.iter().flatten().flatten().map(|(i, _)| i).collect();
            let mut want: Vec<&ItemId> = items.iter().collect();
            have.sort();
            want.sort();
            have == want
        }
    }
}

/// Finds the recipe whose pattern matches the grid. Shaped patterns match
/// under translation (not mirroring) with every other cell empty.
pub fn match_grid<'a>(grid: &Grid, recipes: &'a [Recipe]) -> Option<(&'a Recipe, ItemId, u32)> {
    recipes
        .iter()
        .find(|r| grid_matches(grid, r))
        .map(|r| (r, r.output.clone(), r.output_count))
}

/// Smelting output for one unit of `item`.
pub fn match_smelt(item: &ItemId, recipes: &[Recipe]) -> Option<(ItemId, u32)> {
    recipes.iter().find_map(|r| match &r.pattern {
        Pattern::Smelting(input) if input == item => Some((r.output.clone(), r.output_count)),
        _ => None,
    })
}

/// Every arrangement a recipe can legitimately appear in: all translations
/// of shaped patterns, the canonical fill for shapeless ones.
pub fn arrangements(recipe: &Recipe) -> Vec<Grid> {
    let mut out = Vec::new();
    match &recipe.pattern {
        Pattern::Smelting(_) => {}
        Pattern::Shaped(rows) => {
            let h = rows.len();
            let w = rows[0].len();
            for dr in 0..=(3 - h) {
                for dc in 0..=(3 - w) {
                    let mut grid: Grid = Default::default();
                    for (r, row) in rows.iter().enumerate() {
                        for (c, cell) in row.iter().enumerate() {
                            grid[dr + r][dc + c] = cell.clone().map(|i| (i, 1));
                        }
                    }
                    out.push(grid);
                }
            }
        }
        Pattern::Shapeless(_) => {
            let mut grid: Grid = Default::default();
            for ((r, c), item) in recipe.canonical_placement() {
                grid[r][c] = Some((item, 1));
            }
            out.push(grid);
        }
    }
    out
}

fn check_unambiguous(recipes: &[Recipe]) -> Result<(), RecipeError> {
    for recipe in recipes {
        for grid in arrangements(recipe) {
            let mut matching = recipes.iter().filter(|r| grid_matches(&grid, r));
            if let (Some(first), Some(second)) = (matching.next(), matching.next()) {
                return Err(RecipeError::Ambiguous {
                    first: first.id.clone(),
                    second: second.id.clone(),
                });
            }
        }
    }
    Ok(())
}

/// Recipe dependency graph: an edge `r -> s` means some ingredient of `r`
/// is produced by `s`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecipeGraph {
    pub nodes: Vec<String>,
    pub edges: BTreeSet<(String, String)>,
}

impl RecipeGraph {
    pub fn dependencies<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges
            .iter()
            .filter(move |(from, _)| from == id)
            .map(|(_, to)| to.as_str())
    }
}

pub fn build_graph(recipes: &[Recipe]) -> RecipeGraph {
    let mut nodes: Vec<String> = recipes.iter().map(|r| r.id.clone()).collect();
    nodes.sort();
    let mut edges = BTreeSet::new();
    for r in recipes {
        let needs = r.ingredients();
        for s in recipes {
            if needs.contains_key(&s.output) {
                edges.insert((r.id.clone(), s.id.clone()));
            }
        }
    }
    RecipeGraph { nodes, edges }
}
