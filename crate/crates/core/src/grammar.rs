//! Listener action language: `Deselect E select F`, `Select A C`.
//!
//! Canonical form puts the deselect group first, letters ascending, with the
//! leading verb capitalized. Parsing is case-insensitive and accepts either
//! verb order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Number of context slots in a game.
pub const NUM_LETTERS: usize = 10;

/// Default number of operations the policy may emit per turn.
pub const DEFAULT_MAX_OPS: usize = 2;

/// A per-game position code, `A` through `J`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Letter(u8);

impl Letter {
    pub fn new(index: usize) -> Option<Letter> {
        (index < NUM_LETTERS).then_some(Letter(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn as_char(self) -> char {
        (b'A' + self.0) as char
    }

    pub fn from_char(c: char) -> Option<Letter> {
        let upper = c.to_ascii_uppercase();
        if ('A'..='J').contains(&upper) {
            Some(Letter(upper as u8 - b'A'))
        } else {
            None
        }
    }

    pub fn all() -> impl Iterator<Item = Letter> {
        (0..NUM_LETTERS as u8).map(Letter)
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl Serialize for Letter {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_char(self.as_char())
    }
}

impl<'de> Deserialize<'de> for Letter {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let c = char::deserialize(d)?;
        Letter::from_char(c).ok_or_else(|| serde::de::Error::custom(format!("bad letter {c:?}")))
    }
}

/// Set of letters stored as a bitmask; iteration is ascending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct LetterSet(u16);

impl LetterSet {
    pub const EMPTY: LetterSet = LetterSet(0);

    pub fn from_bits(bits: u16) -> LetterSet {
        LetterSet(bits & ((1 << NUM_LETTERS) - 1))
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn full() -> LetterSet {
        LetterSet((1 << NUM_LETTERS) - 1)
    }

    pub fn contains(self, l: Letter) -> bool {
        self.0 & (1 << l.0) != 0
    }

    pub fn insert(&mut self, l: Letter) -> bool {
        let had = self.contains(l);
        self.0 |= 1 << l.0;
        !had
    }

    pub fn remove(&mut self, l: Letter) -> bool {
        let had = self.contains(l);
        self.0 &= !(1 << l.0);
        had
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: LetterSet) -> LetterSet {
        LetterSet(self.0 | other.0)
    }

    pub fn intersection(self, other: LetterSet) -> LetterSet {
        LetterSet(self.0 & other.0)
    }

    pub fn difference(self, other: LetterSet) -> LetterSet {
        LetterSet(self.0 & !other.0)
    }

    pub fn is_subset(self, other: LetterSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Letter> {
        Letter::all().filter(move |l| self.contains(*l))
    }

    pub fn complement(self) -> LetterSet {
        LetterSet::full().difference(self)
    }

    /// Space-separated ascending letters, e.g. `F G`.
    pub fn spaced(self) -> String {
        self.iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl FromIterator<Letter> for LetterSet {
    fn from_iter<I: IntoIterator<Item = Letter>>(iter: I) -> Self {
        let mut s = LetterSet::EMPTY;
        for l in iter {
            s.insert(l);
        }
        s
    }
}

impl Serialize for LetterSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.iter().map(Letter::as_char).collect::<String>())
    }
}

impl<'de> Deserialize<'de> for LetterSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.chars()
            .map(|c| {
                Letter::from_char(c)
                    .ok_or_else(|| serde::de::Error::custom(format!("bad letter {c:?}")))
            })
            .collect()
    }
}

/// A set of select and deselect operations taken in one listener turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActionSpec {
    selects: LetterSet,
    deselects: LetterSet,
}

impl ActionSpec {
    pub fn new(selects: LetterSet, deselects: LetterSet) -> Result<ActionSpec> {
        if selects.is_empty() && deselects.is_empty() {
            return Err(Error::Grammar("action has no operations".into()));
        }
        let both = selects.intersection(deselects);
        if !both.is_empty() {
            return Err(Error::Grammar(format!(
                "letters {} both selected and deselected",
                both.spaced()
            )));
        }
        Ok(ActionSpec { selects, deselects })
    }

    pub fn select(letters: impl IntoIterator<Item = Letter>) -> Result<ActionSpec> {
        ActionSpec::new(letters.into_iter().collect(), LetterSet::EMPTY)
    }

    pub fn deselect(letters: impl IntoIterator<Item = Letter>) -> Result<ActionSpec> {
        ActionSpec::new(LetterSet::EMPTY, letters.into_iter().collect())
    }

    pub fn selects(&self) -> LetterSet {
        self.selects
    }

    pub fn deselects(&self) -> LetterSet {
        self.deselects
    }

    /// Letters touched by any operation.
    pub fn letters(&self) -> LetterSet {
        self.selects.union(self.deselects)
    }

    pub fn op_count(&self) -> usize {
        self.selects.len() + self.deselects.len()
    }

    /// Canonical action string.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        if !self.deselects.is_empty() {
            out.push_str("Deselect ");
            out.push_str(&self.deselects.spaced());
        }
        if !self.selects.is_empty() {
            if out.is_empty() {
                out.push_str("Select ");
            } else {
                out.push_str(" select ");
            }
            out.push_str(&self.selects.spaced());
        }
        out
    }

    /// Apply a letter relabeling `perm[old] = new`.
    pub fn relabel(&self, perm: &[Letter; NUM_LETTERS]) -> ActionSpec {
        let map = |s: LetterSet| s.iter().map(|l| perm[l.index()]).collect::<LetterSet>();
        ActionSpec {
            selects: map(self.selects),
            deselects: map(self.deselects),
        }
    }

    /// Whether the action can be applied to the given selection.
    pub fn is_legal_for(&self, selected: LetterSet) -> bool {
        self.selects.intersection(selected).is_empty() && self.deselects.is_subset(selected)
    }
}

impl fmt::Display for ActionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

impl FromStr for ActionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<ActionSpec> {
        parse(s)
    }
}

impl Serialize for ActionSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&ActionSpec::serialize(self))
    }
}

impl<'de> Deserialize<'de> for ActionSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Verb {
    Select,
    Deselect,
}

/// Parse an action string.
pub fn parse(s: &str) -> Result<ActionSpec> {
    let mut selects = LetterSet::EMPTY;
    let mut deselects = LetterSet::EMPTY;
    let mut verb: Option<Verb> = None;
    let mut group_len = 0usize;

    for tok in s.split_whitespace() {
        let lower = tok.to_ascii_lowercase();
        let next_verb = match lower.as_str() {
            "select" => Some(Verb::Select),
            "deselect" => Some(Verb::Deselect),
            _ => None,
        };
        if let Some(v) = next_verb {
            if verb.is_some() && group_len == 0 {
                return Err(Error::Grammar(format!("verb without letters in {s:?}")));
            }
            verb = Some(v);
            group_len = 0;
            continue;
        }
        let letter = {
            let mut chars = tok.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => Letter::from_char(c),
                _ => None,
            }
        }
        .ok_or_else(|| Error::Grammar(format!("unexpected token {tok:?} in {s:?}")))?;
        match verb {
            None => return Err(Error::Grammar(format!("letter before any verb in {s:?}"))),
            Some(Verb::Select) => selects.insert(letter),
            Some(Verb::Deselect) => deselects.insert(letter),
        };
        group_len += 1;
    }
    if verb.is_none() {
        return Err(Error::Grammar(format!("no verb in {s:?}")));
    }
    if group_len == 0 {
        return Err(Error::Grammar(format!("verb without letters in {s:?}")));
    }
    ActionSpec::new(selects, deselects)
}

/// Every action with `1..=max_ops` operations that is legal for `selected`:
/// unselected letters can only be selected, selected letters only deselected.
///
/// Ordered by operation count, then by ascending letter combination.
pub fn legal_actions(selected: LetterSet, max_ops: usize) -> Vec<ActionSpec> {
    let max_ops = max_ops.clamp(1, NUM_LETTERS);
    let mut masks: Vec<LetterSet> = (1u16..1 << NUM_LETTERS)
        .map(LetterSet)
        .filter(|m| m.len() <= max_ops)
        .collect();
    masks.sort_by_cached_key(|m| (m.len(), m.iter().collect::<Vec<_>>()));
    masks
        .into_iter()
        .map(|touched| ActionSpec {
            selects: touched.difference(selected),
            deselects: touched.intersection(selected),
        })
        .collect()
}
