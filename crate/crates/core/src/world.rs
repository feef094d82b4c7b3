//! Synthetic referent universe and game-context sampling.
//!
//! Items carry a small set of attribute tokens drawn from a closed vocabulary;
//! each attribute also has synonym surface forms the speaker may use. The
//! ambiguity between items is controlled by a popularity skew over the
//! vocabulary, tuned until the mean pairwise Jaccard overlap hits the
//! configured target.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{Letter, LetterSet, NUM_LETTERS};
use crate::seeds::derive_seed;

pub const CONTEXT_SIZE: usize = NUM_LETTERS;
pub const MIN_TARGETS: usize = 3;
pub const MAX_TARGETS: usize = 5;

/// Tolerance on the realized mean pairwise Jaccard overlap.
pub const OVERLAP_TOLERANCE: f64 = 0.05;

const WORLD_SCHEMA: &str = "refgame.world/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "item-{:04}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: ItemId,
    /// Canonical attribute tokens, sorted.
    pub attributes: Vec<String>,
    /// Synonym surface tokens per attribute.
    pub aliases: BTreeMap<String, Vec<String>>,
}

impl Item {
    pub fn jaccard(&self, other: &Item) -> f64 {
        jaccard(&self.attributes, &other.attributes)
    }
}

fn jaccard<T: Ord>(a: &[T], b: &[T]) -> f64 {
    // both sorted
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub item_count: usize,
    pub attribute_vocab_size: usize,
    /// Inclusive range of attributes per item.
    pub attributes_per_item: (usize, usize),
    pub pairwise_overlap_target: f64,
    pub synonym_count: usize,
    pub rng_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            item_count: 128,
            attribute_vocab_size: 60,
            attributes_per_item: (3, 5),
            pairwise_overlap_target: 0.1,
            synonym_count: 2,
            rng_seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.attributes_per_item;
        if self.item_count == 0 || self.attribute_vocab_size == 0 {
            return Err(Error::InvalidConfig("item_count and vocab size must be positive".into()));
        }
        if lo == 0 || lo > hi {
            return Err(Error::InvalidConfig(format!("bad attributes_per_item range {lo}..={hi}")));
        }
        if hi > self.attribute_vocab_size {
            return Err(Error::InvalidConfig(format!(
                "attributes_per_item max {hi} exceeds vocab size {}",
                self.attribute_vocab_size
            )));
        }
        if !(0.0..=1.0).contains(&self.pairwise_overlap_target) {
            return Err(Error::InvalidConfig("overlap target must lie in [0,1]".into()));
        }
        if self.attribute_vocab_size > u16::MAX as usize {
            return Err(Error::InvalidConfig("vocabulary too large".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Dev,
    Main,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub name: SplitName,
    pub item_ids: Vec<ItemId>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    pub synonyms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub vocabulary: Vec<AttributeDef>,
    pub items: Vec<Item>,
    pub dev: Split,
    pub main: Split,
}

/// Words the attribute vocabulary must never collide with: speaker
/// templates, cue lexicons and the action grammar.
fn reserved_words() -> HashSet<&'static str> {
    crate::lexicon::reserved_tokens().into_iter().collect()
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "br", "tr", "kl",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "", "", "n", "r", "l", "sk", "m"];

fn pseudo_word(rng: &mut impl Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
    }
    w.push_str(CODAS.choose(rng).unwrap());
    w
}

fn build_vocabulary(cfg: &WorldConfig) -> Vec<AttributeDef> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, &[0x766f63]));
    let reserved = reserved_words();
    let mut used: HashSet<String> = HashSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng| loop {
        let w = pseudo_word(rng);
        if !reserved.contains(w.as_str()) && used.insert(w.clone()) {
            return w;
        }
    };
    (0..cfg.attribute_vocab_size)
        .map(|_| {
            let name = fresh(&mut rng);
            let synonyms = (0..cfg.synonym_count).map(|_| fresh(&mut rng)).collect();
            AttributeDef { name, synonyms }
        })
        .collect()
}

/// Sample attribute index sets for every item under a popularity skew.
fn sample_attribute_sets(cfg: &WorldConfig, skew: f64) -> Result<Vec<Vec<u16>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, &[0x6974656d]));
    let mut ranks: Vec<u16> = (0..cfg.attribute_vocab_size as u16).collect();
    ranks.shuffle(&mut rng);
    let weights: Vec<f64> = (0..ranks.len())
        .map(|r| (r as f64 + 1.0).powf(-skew))
        .collect();
    let (lo, hi) = cfg.attributes_per_item;
    let mut seen: HashSet<Vec<u16>> = HashSet::new();
    let mut out = Vec::with_capacity(cfg.item_count);
    for _ in 0..cfg.item_count {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::InfeasibleWorld(
                    "cannot draw distinct attribute sets at this overlap".into(),
                ));
            }
            let size = rng.gen_range(lo..=hi);
            let mut w = weights.clone();
            let mut set = Vec::with_capacity(size);
            for _ in 0..size {
                let total: f64 = w.iter().sum();
                let mut x = rng.gen::<f64>() * total;
                let mut pick = w.len() - 1;
                for (k, wk) in w.iter().enumerate() {
                    if *wk > 0.0 && x < *wk {
                        pick = k;
                        break;
                    }
                    x -= wk;
                }
                while w[pick] == 0.0 {
                    pick -= 1;
                }
                w[pick] = 0.0;
                set.push(ranks[pick]);
            }
            set.sort_unstable();
            if seen.insert(set.clone()) {
                out.push(set);
                break;
            }
        }
    }
    Ok(out)
}

pub fn mean_pairwise_jaccard(sets: &[Vec<u16>]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            total += jaccard(&sets[i], &sets[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Mean pairwise Jaccard over the attribute sets of `items`.
pub fn realized_overlap(items: &[Item]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            total += items[i].jaccard(&items[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Build a world: vocabulary, items at the target overlap, and dev/main splits.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let target = cfg.pairwise_overlap_target;
    let eval = |skew: f64| -> Result<(f64, Vec<Vec<u16>>)> {
        let sets = sample_attribute_sets(cfg, skew)?;
        Ok((mean_pairwise_jaccard(&sets), sets))
    };

    let (mut lo, mut hi) = (0.0f64, 6.0f64);
    let mut best: Option<(f64, Vec<Vec<u16>>)> = None;
    let consider = |j: f64, sets: Vec<Vec<u16>>, best: &mut Option<(f64, Vec<Vec<u16>>)>| {
        let better = best.as_ref().is_none_or(|(bj, _)| (j - target).abs() < (bj - target).abs());
        if better {
            *best = Some((j, sets));
        }
    };
    match eval(lo) {
        Ok((j, sets)) => consider(j, sets, &mut best),
        Err(e) => return Err(e),
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        match eval(mid) {
            Ok((j, sets)) => {
                let above = j > target;
                consider(j, sets, &mut best);
                if above {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            // too much skew to keep items distinct
            Err(_) => hi = mid,
        }
        if best
            .as_ref()
            .is_some_and(|(j, _)| (j - target).abs() < OVERLAP_TOLERANCE / 10.0)
        {
            break;
        }
    }
    let (realized, sets) = best.expect("at least one evaluation");
    if (realized - target).abs() > OVERLAP_TOLERANCE {
        return Err(Error::InfeasibleWorld(format!(
            "overlap target {target} unreachable (closest {realized:.3})"
        )));
    }

    let vocabulary = build_vocabulary(cfg);
    let items: Vec<Item> = sets
        .into_iter()
        .enumerate()
        .map(|(i, set)| {
            let mut attributes: Vec<String> = set
                .iter()
                .map(|&k| vocabulary[k as usize].name.clone())
                .collect();
            attributes.sort();
            let aliases = set
                .iter()
                .map(|&k| {
                    let def = &vocabulary[k as usize];
                    (def.name.clone(), def.synonyms.clone())
                })
                .collect();
            Item {
                id: ItemId(i as u32),
                attributes,
                aliases,
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, &[0x73706c74]));
    let mut ids: Vec<ItemId> = items.iter().map(|it| it.id).collect();
    ids.shuffle(&mut rng);
    let dev_count = cfg.item_count * 101 / 1013;
    let mut dev_ids = ids[..dev_count].to_vec();
    let mut main_ids = ids[dev_count..].to_vec();
    dev_ids.sort();
    main_ids.sort();

    Ok(World {
        config: cfg.clone(),
        vocabulary,
        items,
        dev: Split {
            name: SplitName::Dev,
            item_ids: dev_ids,
        },
        main: Split {
            name: SplitName::Main,
            item_ids: main_ids,
        },
    })
}

impl World {
    pub fn item(&self, id: ItemId) -> &Item {
        &self.items[id.0 as usize]
    }

    pub fn split(&self, name: SplitName) -> &Split {
        match name {
            SplitName::Dev => &self.dev,
            SplitName::Main => &self.main,
        }
    }

    /// Every surface token (canonical names and synonyms).
    pub fn surface_tokens(&self) -> BTreeSet<String> {
        self.vocabulary
            .iter()
            .flat_map(|d| std::iter::once(d.name.clone()).chain(d.synonyms.iter().cloned()))
            .collect()
    }

    pub fn sample_game(&self, split: SplitName, rng: &mut impl Rng) -> Result<GameSpec> {
        sample_game(&self.items, self.split(split), rng)
    }

    /// Writes a header record followed by one item per line.
    pub fn write_lines(&self, mut w: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            schema: &'a str,
            config: &'a WorldConfig,
            vocabulary: &'a [AttributeDef],
        }
        serde_json::to_writer(
            &mut w,
            &Header {
                schema: WORLD_SCHEMA,
                config: &self.config,
                vocabulary: &self.vocabulary,
            },
        )?;
        writeln!(w)?;
        for item in &self.items {
            let split = if self.dev.item_ids.binary_search(&item.id).is_ok() {
                SplitName::Dev
            } else {
                SplitName::Main
            };
            serde_json::to_writer(&mut w, &ItemRecord { split, item: item.clone() })?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_lines(r: impl BufRead) -> Result<World> {
        #[derive(Deserialize)]
        struct Header {
            schema: String,
            config: WorldConfig,
            vocabulary: Vec<AttributeDef>,
        }
        let mut lines = r.lines();
        let header: Header = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::Schema("empty world file".into())),
        };
        if header.schema != WORLD_SCHEMA {
            return Err(Error::Schema(format!("unknown world schema {}", header.schema)));
        }
        let mut items = Vec::new();
        let (mut dev, mut main) = (Vec::new(), Vec::new());
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ItemRecord = serde_json::from_str(&line)?;
            match rec.split {
                SplitName::Dev => dev.push(rec.item.id),
                SplitName::Main => main.push(rec.item.id),
            }
            items.push(rec.item);
        }
        items.sort_by_key(|it| it.id);
        Ok(World {
            config: header.config,
            vocabulary: header.vocabulary,
            items,
            dev: Split {
                name: SplitName::Dev,
                item_ids: dev,
            },
            main: Split {
                name: SplitName::Main,
                item_ids: main,
            },
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ItemRecord {
    split: SplitName,
    #[serde(flatten)]
    item: Item,
}

/// One game: ten context items, 3 to 5 hidden targets, and the two
/// display orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSpec {
    pub context: Vec<Item>,
    pub targets: Vec<ItemId>,
    /// `listener_order[i]` is the context index shown as letter `i`.
    pub listener_order: Vec<usize>,
    pub speaker_order: Vec<usize>,
}

impl GameSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::InvalidConfig(format!("game spec: {m}")));
        if self.context.len() != CONTEXT_SIZE {
            return err(format!("context has {} items", self.context.len()));
        }
        if !(MIN_TARGETS..=MAX_TARGETS).contains(&self.targets.len()) {
            return err(format!("{} targets", self.targets.len()));
        }
        let ids: BTreeSet<ItemId> = self.context.iter().map(|i| i.id).collect();
        if ids.len() != CONTEXT_SIZE {
            return err("duplicate context items".into());
        }
        if !self.targets.iter().all(|t| ids.contains(t)) {
            return err("target outside context".into());
        }
        for order in [&self.listener_order, &self.speaker_order] {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != (0..CONTEXT_SIZE).collect::<Vec<_>>() {
                return err("order is not a permutation".into());
            }
        }
        Ok(())
    }

    pub fn item_at(&self, letter: Letter) -> &Item {
        &self.context[self.listener_order[letter.index()]]
    }

    pub fn letter_of(&self, id: ItemId) -> Option<Letter> {
        (0..CONTEXT_SIZE)
            .find(|&i| self.context[self.listener_order[i]].id == id)
            .and_then(Letter::new)
    }

    pub fn target_letters(&self) -> LetterSet {
        self.targets.iter().filter_map(|t| self.letter_of(*t)).collect()
    }
}

/// Uniform sample of 10 items, a uniform target count in 3..=5, and two
/// independent display permutations.
pub fn sample_game(items: &[Item], split: &Split, rng: &mut impl Rng) -> Result<GameSpec> {
    if split.len() < CONTEXT_SIZE {
        return Err(Error::SplitTooSmall {
            name: format!("{:?}", split.name).to_lowercase(),
            have: split.len(),
            need: CONTEXT_SIZE,
        });
    }
    let chosen: Vec<ItemId> = split
        .item_ids
        .choose_multiple(rng, CONTEXT_SIZE)
        .copied()
        .collect();
    let context: Vec<Item> = chosen
        .iter()
        .map(|id| {
            items
                .iter()
                .find(|it| it.id == *id)
                .cloned()
                .ok_or_else(|| Error::InvalidConfig(format!("split references unknown {id}")))
        })
        .collect::<Result<_>>()?;
    let n_targets = rng.gen_range(MIN_TARGETS..=MAX_TARGETS);
    let targets: Vec<ItemId> = chosen.choose_multiple(rng, n_targets).copied().collect();
    let mut listener_order: Vec<usize> = (0..CONTEXT_SIZE).collect();
    listener_order.shuffle(rng);
    let mut speaker_order: Vec<usize> = (0..CONTEXT_SIZE).collect();
    speaker_order.shuffle(rng);
    let spec = GameSpec {
        context,
        targets,
        listener_order,
        speaker_order,
    };
    debug_assert!(spec.validate().is_ok());
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> WorldConfig {
        WorldConfig {
            item_count: 64,
            attribute_vocab_size: 40,
            pairwise_overlap_target: 0.2,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_world(&small_cfg()).unwrap();
        let b = generate_world(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let other = generate_world(&WorldConfig {
            rng_seed: 8,
            ..small_cfg()
        })
        .unwrap();
        assert_ne!(a.items, other.items);
    }

    #[test]
    fn attribute_counts_in_range() {
        let w = generate_world(&small_cfg()).unwrap();
        for it in &w.items {
            assert!((3..=5).contains(&it.attributes.len()));
            for a in &it.attributes {
                assert!(!it.aliases[a].is_empty());
            }
        }
    }

    #[test]
    fn realized_overlap_hits_target() {
        // oracle: recompute Jaccard over all pairs from the item attribute sets
        let w = generate_world(&small_cfg()).unwrap();
        let mut total = 0.0;
        let mut n = 0;
        for (i, a) in w.items.iter().enumerate() {
            for b in &w.items[i + 1..] {
                let sa: BTreeSet<_> = a.attributes.iter().collect();
                let sb: BTreeSet<_> = b.attributes.iter().collect();
                total += sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64;
                n += 1;
            }
        }
        let mean = total / n as f64;
        assert!((0.15..=0.25).contains(&mean), "mean jaccard {mean}");
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        assert_eq!(w.dev.len(), 12);
        assert_eq!(w.main.len(), 116);
        let dev: BTreeSet<_> = w.dev.item_ids.iter().collect();
        assert!(w.main.item_ids.iter().all(|id| !dev.contains(id)));
    }

    #[test]
    fn infeasible_overlap_is_rejected() {
        let cfg = WorldConfig {
            item_count: 64,
            attribute_vocab_size: 200,
            attributes_per_item: (3, 3),
            pairwise_overlap_target: 0.95,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(&cfg), Err(Error::InfeasibleWorld(_))));
        let bad = WorldConfig {
            attributes_per_item: (3, 50),
            attribute_vocab_size: 40,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(&bad), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn game_sampling_invariants() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let g = w.sample_game(SplitName::Main, &mut rng).unwrap();
            g.validate().unwrap();
            assert!(g.context.iter().all(|it| w.main.item_ids.contains(&it.id)));
            assert_eq!(g.target_letters().len(), g.targets.len());
        }
    }

    #[test]
    fn target_count_histogram_is_uniform() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let g = w.sample_game(SplitName::Main, &mut rng).unwrap();
            counts[g.targets.len() - 3] += 1;
        }
        // multinomial: each cell ~ Binomial(n, 1/3)
        let expected = n as f64 / 3.0;
        let sigma = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn small_split_errors() {
        let w = generate_world(&small_cfg()).unwrap();
        let split = Split {
            name: SplitName::Dev,
            item_ids: w.items.iter().take(9).map(|i| i.id).collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_game(&w.items, &split, &mut rng),
            Err(Error::SplitTooSmall { have: 9, .. })
        ));
    }

    #[test]
    fn line_format_round_trips() {
        let w = generate_world(&small_cfg()).unwrap();
        let mut buf = Vec::new();
        w.write_lines(&mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 65);
        let back = World::read_lines(&buf[..]).unwrap();
        assert_eq!(back, w);
    }
}
