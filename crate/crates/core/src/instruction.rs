//! Instruction lines understood by the rule-based parser and the scripted
//! actor.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;

use crate::env::{EnvAction, SlotId};
use crate::recipe::{Grid, ItemId, RecipeBook};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instruction {
    /// A literal `move:`/`smelt:` line with concrete slots.
    Exact(EnvAction),
    Place { item: ItemId, to: SlotId },
    /// Take the crafted output to a free inventory slot.
    Extract { item: ItemId },
    /// Return an item from the grid to a free inventory slot.
    Clear { item: ItemId, from: SlotId },
    Smelt { item: ItemId, quantity: u32 },
    Impossible { reason: String },
}

impl Instruction {
    /// Canonical slot-free rendering (exact lines keep their slots).
    pub fn render(&self) -> String {
        match self {
            Instruction::Exact(a) => a.to_string(),
            Instruction::Place { item, to } => format!("move {item} to {to}"),
            Instruction::Extract { item } => format!("move {item} to a free inventory slot"),
            Instruction::Clear { item, from } => {
                format!("move {item} from {from} to a free inventory slot")
            }
            Instruction::Smelt { item, quantity } => {
                format!("smelt {item} to a free inventory slot with quantity {quantity}")
            }
            Instruction::Impossible { reason } => format!("This task is impossible: {reason}"),
        }
    }
}

const SPATIAL: &str = r"(?:the\s+)?(?:top|middle|bottom)(?:\s+(?:left|middle|right))?";

struct Patterns {
    number: Regex,
    exact: Regex,
    smelt: Regex,
    extract_from: Regex,
    extract: Regex,
    place: Regex,
    impossible: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| {
        let grid = format!(r"(?:(?:the\s+)?([A-C][1-3])|({SPATIAL}))");
        Patterns {
            number: Regex::new(r"^\s*(?:[-*]\s*)?(?:\d+(?:\.\d+)*\.?\s+)?").unwrap(),
            exact: Regex::new(r"^(?i:(move|smelt)):\s*from\s+(\S+)\s+to\s+(\S+)\s+with\s+quantity\s+(\d+)$").unwrap(),
            smelt: Regex::new(
                r"^(?i:smelt)\s+(?:the\s+)?(?:\d+\s+)?([a-z0-9_]+)(?:\s+from\s+\S+)?\s+to\s+a\s+free\s+inventory\s+slot(?:\s+with\s+quantity\s+(\d+))?$",
            )
            .unwrap(),
            extract_from: Regex::new(&format!(
                r"^(?i:move)\s+(?:the\s+)?(?:resulting\s+)?([a-z0-9_]+)\s+from\s+(?:(0|the\s+output\s+slot)|{grid})(?:\s+slot)?\s+to\s+a\s+free\s+inventory\s+slot$"
            ))
            .unwrap(),
            extract: Regex::new(r"^(?i:move)\s+(?:the\s+)?(?:resulting\s+)?([a-z0-9_]+)\s+to\s+a\s+free\s+inventory\s+slot$").unwrap(),
            place: Regex::new(&format!(
                r"^(?i:move|place)\s+(?:the\s+|one\s+|1\s+)?([a-z0-9_]+)\s+(?:from\s+\S+\s+)?(?:to|in|into)\s+{grid}(?:\s+slot)?$"
            ))
            .unwrap(),
            impossible: Regex::new(r"^This task is impossible(?::\s*(.*))?$").unwrap(),
        }
    })
}

/// Grid slot named by a spatial phrase such as "the top left".
pub fn spatial_slot(phrase: &str) -> Option<SlotId> {
    let words: Vec<&str> = phrase.split_whitespace().filter(|w| *w != "the").collect();
    let row = match words.first()? {
        &"top" => 0,
        &"middle" => 1,
        &"bottom" => 2,
        _ => return None,
    };
    let col = match words.get(1) {
        None => {
            if row == 1 {
                1
            } else {
                return None;
            }
        }
        Some(&"left") => 0,
        Some(&"middle") => 1,
        Some(&"right") => 2,
        _ => return None,
    };
    Some(SlotId::grid(row, col))
}

fn grid_slot(caps: &regex::Captures, token: usize, phrase: usize) -> Option<SlotId> {
    if let Some(t) = caps.get(token) {
        return t.as_str().parse().ok();
    }
    spatial_slot(caps.get(phrase)?.as_str())
}

/// Removes list numbering such as `1.`, `2.3.` or `- `.
pub fn strip_numbering(line: &str) -> &str {
    let p = patterns();
    let m = p.number.find(line).map_or(0, |m| m.end());
    &line[m..]
}

pub fn parse_instruction(line: &str) -> Option<Instruction> {
    let p = patterns();
    let body = strip_numbering(line).trim().trim_end_matches('.').trim();
    if let Some(c) = p.exact.captures(body) {
        let from = c[2].parse().ok()?;
        let to = c[3].parse().ok()?;
        let quantity = c[4].parse().ok()?;
        return Some(Instruction::Exact(if c[1].eq_ignore_ascii_case("move") {
            EnvAction::Move { from, to, quantity }
        } else {
            EnvAction::Smelt { from, to, quantity }
        }));
    }
    if let Some(c) = p.impossible.captures(body) {
        let reason = c.get(1).map_or("", |m| m.as_str()).trim().to_string();
        return Some(Instruction::Impossible { reason });
    }
    if let Some(c) = p.smelt.captures(body) {
        let item = ItemId::new(&c[1]).ok()?;
        let quantity = c.get(2).map_or(Some(1), |m| m.as_str().parse().ok())?;
        return Some(Instruction::Smelt { item, quantity });
    }
    if let Some(c) = p.extract_from.captures(body) {
        let item = ItemId::new(&c[1]).ok()?;
        if c.get(2).is_some() {
            return Some(Instruction::Extract { item });
        }
        let from = grid_slot(&c, 3, 4)?;
        return Some(Instruction::Clear { item, from });
    }
    if let Some(c) = p.extract.captures(body) {
        return Some(Instruction::Extract { item: ItemId::new(&c[1]).ok()? });
    }
    if let Some(c) = p.place.captures(body) {
        let item = ItemId::new(&c[1]).ok()?;
        let to = grid_slot(&c, 2, 3)?;
        return Some(Instruction::Place { item, to });
    }
    None
}

/// Net quantity of each item drawn from the inventory by a slot-free
/// instruction sequence: the deepest deficit reached while simulating it.
pub fn peak_draw(instructions: &[Instruction], recipes: &RecipeBook) -> BTreeMap<ItemId, u32> {
    let mut balance: BTreeMap<ItemId, i64> = BTreeMap::new();
    let mut low: BTreeMap<ItemId, i64> = BTreeMap::new();
    let mut grid: Grid = Default::default();
    let mut bump = |balance: &mut BTreeMap<ItemId, i64>, item: &ItemId, delta: i64| {
        let b = balance.entry(item.clone()).or_insert(0);
        *b += delta;
        let l = low.entry(item.clone()).or_insert(0);
        *l = (*l).min(*b);
    };
    for ins in instructions {
        match ins {
            Instruction::Place { item, to: SlotId::Grid { row, col } } => {
                let cell = &mut grid[*row as usize][*col as usize];
                if cell.is_some() {
                    continue;
                }
                *cell = Some((item.clone(), 1));
                bump(&mut balance, item, -1);
            }
            Instruction::Extract { .. } => {
                if let Some((_, out, n)) = recipes.match_grid(&grid) {
                    bump(&mut balance, &out, n as i64);
                    for cell in grid.iter_mut().flatten() {
                        if let Some((_, c)) = cell {
                            *c -= 1;
                            if *c == 0 {
                                *cell = None;
                            }
                        }
                    }
                }
            }
            Instruction::Clear { from: SlotId::Grid { row, col }, .. } => {
                if let Some((i, n)) = grid[*row as usize][*col as usize].take() {
                    bump(&mut balance, &i, n as i64);
                }
            }
            Instruction::Smelt { item, quantity } => {
                bump(&mut balance, item, -(*quantity as i64));
                if let Some((out, per)) = recipes.match_smelt(item) {
                    bump(&mut balance, &out, (*quantity * per) as i64);
                }
            }
            _ => {}
        }
    }
    low.into_iter()
        .filter(|(_, l)| *l < 0)
        .map(|(i, l)| (i, (-l) as u32))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(s: &str) -> ItemId {
        ItemId::new(s).unwrap()
    }

    fn slot(s: &str) -> SlotId {
        s.parse().unwrap()
    }

    #[test]
    fn grammar() {
        let cases = [
            ("1.1. move crimson_hyphae to A1", Instruction::Place { item: item("crimson_hyphae"), to: slot("A1") }),
            ("2. move the glass to B2", Instruction::Place { item: item("glass"), to: slot("B2") }),
            ("1. move the lime_dye to the top left", Instruction::Place { item: item("lime_dye"), to: slot("A1") }),
            ("move the sand to the middle", Instruction::Place { item: item("sand"), to: slot("B2") }),
            ("1.2. move crimson_planks to a free inventory slot", Instruction::Extract { item: item("crimson_planks") }),
            ("3. move the lime_wool from 0 to a free inventory slot", Instruction::Extract { item: item("lime_wool") }),
            (
                "4. Move the acacia_pressure_plate from the output slot to a free inventory slot.",
                Instruction::Extract { item: item("acacia_pressure_plate") },
            ),
            ("1. move the stick from C2 to a free inventory slot", Instruction::Clear { item: item("stick"), from: slot("C2") }),
            ("smelt the sand to a free inventory slot with quantity 3", Instruction::Smelt { item: item("sand"), quantity: 3 }),
            ("1.1. smelt sand to a free inventory slot with quantity 1", Instruction::Smelt { item: item("sand"), quantity: 1 }),
            (
                "2. move: from I15 to A2 with quantity 1",
                Instruction::Exact(EnvAction::Move { from: slot("I15"), to: slot("A2"), quantity: 1 }),
            ),
            (
                "This task is impossible: no way to obtain stick.",
                Instruction::Impossible { reason: "no way to obtain stick".into() },
            ),
        ];
        for (line, want) in cases {
            assert_eq!(parse_instruction(line), Some(want), "{line}");
        }
        assert_eq!(
            parse_instruction("2. Place one acacia_plank in the top left (A1) and the other in the top middle (A2)."),
            None
        );
        assert_eq!(parse_instruction("1. Craft crimson_planks"), None);
        assert_eq!(parse_instruction("To craft a stick, follow these steps:"), None);
    }

    #[test]
    fn render_parse_round_trip() {
        let all = [
            Instruction::Place { item: item("oak_planks"), to: slot("C3") },
            Instruction::Extract { item: item("stick") },
            Instruction::Clear { item: item("stick"), from: slot("A2") },
            Instruction::Smelt { item: item("sand"), quantity: 2 },
            Instruction::Exact(EnvAction::Smelt { from: slot("I1"), to: slot("I2"), quantity: 2 }),
        ];
        for ins in all {
            assert_eq!(parse_instruction(&ins.render()), Some(ins.clone()));
        }
    }

    #[test]
    fn spatial_words() {
        assert_eq!(spatial_slot("the bottom middle"), Some(slot("C2")));
        assert_eq!(spatial_slot("middle"), Some(slot("B2")));
        assert_eq!(spatial_slot("top"), None);
    }

    #[test]
    fn draw_of_stick_chain() {
        let book = RecipeBook::bundled();
        let ins = [
            Instruction::Place { item: item("oak_log"), to: slot("A1") },
            Instruction::Extract { item: item("oak_planks") },
            Instruction::Place { item: item("oak_planks"), to: slot("A1") },
            Instruction::Place { item: item("oak_planks"), to: slot("B1") },
            Instruction::Extract { item: item("stick") },
        ];
        assert_eq!(peak_draw(&ins, &book), BTreeMap::from([(item("oak_log"), 1)]));
        let smelt = [Instruction::Smelt { item: item("sand"), quantity: 3 }];
        assert_eq!(peak_draw(&smelt, &book), BTreeMap::from([(item("sand"), 3)]));
    }
}
