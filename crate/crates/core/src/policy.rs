//! The listener: a log-linear softmax over the legal action candidates.
//!
//! Features never mention letters. Each operation contributes features built
//! from the operated item's attributes and the dialogue, and each candidate
//! adds shape features for its operation counts, so relabeling letters
//! permutes the distribution exactly.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{state_line, Utterance};
use crate::grammar::{legal_actions, ActionSpec, Letter, LetterSet, DEFAULT_MAX_OPS, NUM_LETTERS};
use crate::seeds::fnv1a;

pub const FEATURE_VERSION: u32 = 1;
const CKPT_HEADER: &str = "refgame.policy/1";

/// Everything the listener sees before acting: the items behind each
/// letter, the selection, the dialogue so far, and the new utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyContext {
    /// Attribute tokens of the item shown as each letter, indexed by letter.
    pub letter_items: Vec<Vec<String>>,
    pub selected: LetterSet,
    pub history: Vec<(Utterance, ActionSpec)>,
    pub current_utterance: Option<Utterance>,
}

impl PolicyContext {
    pub fn new(
        letter_items: Vec<Vec<String>>,
        history: Vec<(Utterance, ActionSpec)>,
        current_utterance: Option<Utterance>,
    ) -> PolicyContext {
        let selected = history.iter().fold(LetterSet::EMPTY, |s, (_, a)| {
            s.union(a.selects()).difference(a.deselects())
        });
        PolicyContext {
            letter_items,
            selected,
            history,
            current_utterance,
        }
    }

    pub fn last_action(&self) -> Option<&ActionSpec> {
        self.history.last().map(|(_, a)| a)
    }

    /// Canonical transcript text; item placeholders stand in for images.
    pub fn transcript(&self) -> String {
        let header: Vec<String> = Letter::all().map(|l| format!("<ref> {l}")).collect();
        let mut lines = vec![format!("System: {}", header.join(" "))];
        let mut selected = LetterSet::EMPTY;
        for (u, a) in &self.history {
            lines.push(format!("System: {}", state_line(selected)));
            lines.push(format!("User: {u}"));
            lines.push(format!("Assistant: {a}"));
            selected = selected.union(a.selects()).difference(a.deselects());
        }
        lines.push(format!("System: {}", state_line(selected)));
        if let Some(u) = &self.current_utterance {
            lines.push(format!("User: {u}"));
        }
        lines.join("\n")
    }

    /// Move the item at letter `l` to letter `perm[l]`, consistently across
    /// the selection and every past action.
    pub fn relabel(&self, perm: &[Letter; NUM_LETTERS]) -> PolicyContext {
        let mut letter_items = vec![Vec::new(); NUM_LETTERS];
        for (i, attrs) in self.letter_items.iter().enumerate() {
            letter_items[perm[i].index()] = attrs.clone();
        }
        PolicyContext {
            letter_items,
            selected: self.selected.iter().map(|l| perm[l.index()]).collect(),
            history: self
                .history
                .iter()
                .map(|(u, a)| (u.clone(), a.relabel(perm)))
                .collect(),
            current_utterance: self.current_utterance.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpKind {
    Select = 0,
    Deselect = 1,
}

mod tag {
    pub const CROSS: u8 = 1;
    pub const PREV_CROSS: u8 = 2;
    pub const MATCH: u8 = 3;
    pub const PREV_MATCH: u8 = 4;
    pub const LAST: u8 = 5;
    pub const LAST_TOK: u8 = 6;
    pub const OTHER_TOK: u8 = 7;
    pub const KIND: u8 = 8;
    pub const SHAPE: u8 = 9;
    pub const SHAPE_TOK: u8 = 10;
    pub const MENTIONED: u8 = 11;
}

fn fid(tag: u8, kind: u8, a: &str, b: &str) -> u64 {
    let mut buf = Vec::with_capacity(a.len() + b.len() + 4);
    buf.push(tag);
    buf.push(kind);
    buf.extend_from_slice(a.as_bytes());
    buf.push(0xff);
    buf.extend_from_slice(b.as_bytes());
    fnv1a(&buf)
}

/// Number of (op kind, letter) slots.
const SLOTS: usize = 2 * NUM_LETTERS;
/// Operation-count shapes of candidates with at most two operations.
const SHAPES: [(usize, usize); 5] = [(1, 0), (0, 1), (2, 0), (1, 1), (0, 2)];

fn slot(kind: OpKind, l: Letter) -> usize {
    kind as usize * NUM_LETTERS + l.index()
}

fn shape_index(ns: usize, nd: usize) -> Option<usize> {
    SHAPES.iter().position(|s| *s == (ns, nd))
}

fn dedup(tokens: &[String]) -> Vec<&str> {
    let mut out: Vec<&str> = Vec::new();
    for t in tokens {
        if !out.contains(&t.as_str()) {
            out.push(t);
        }
    }
    out
}

/// Feature ids of one context, grouped by operation slot and by shape.
struct ContextFeatures {
    ops: Vec<Vec<u64>>,
    shapes: Vec<Vec<u64>>,
}

fn extract(x: &PolicyContext) -> ContextFeatures {
    let current: Vec<&str> = x
        .current_utterance
        .as_ref()
        .map(|u| dedup(u.tokens()))
        .unwrap_or_default();
    let previous: Vec<&str> = x
        .history
        .last()
        .map(|(u, _)| dedup(u.tokens()))
        .unwrap_or_default();
    let last = x.last_action().map(|a| a.letters()).unwrap_or_default();
    let mut ops = vec![Vec::new(); SLOTS];
    for l in Letter::all() {
        let attrs = &x.letter_items[l.index()];
        for kind in [OpKind::Select, OpKind::Deselect] {
            let legal = match kind {
                OpKind::Select => !x.selected.contains(l),
                OpKind::Deselect => x.selected.contains(l),
            };
            if !legal {
                continue;
            }
            let k = kind as u8;
            let f = &mut ops[slot(kind, l)];
            f.push(fid(tag::KIND, k, "", ""));
            let mut mentioned = 0usize;
            for u in &current {
                for a in attrs {
                    f.push(fid(tag::CROSS, k, u, a));
                    if u == a {
                        mentioned += 1;
                        f.push(fid(tag::MATCH, k, "", ""));
                    }
                }
            }
            if mentioned > 0 {
                f.push(fid(tag::MENTIONED, k, "", ""));
            }
            for u in &previous {
                for a in attrs {
                    f.push(fid(tag::PREV_CROSS, k, u, a));
                    if u == a {
                        f.push(fid(tag::PREV_MATCH, k, "", ""));
                    }
                }
            }
            let rel = if last.contains(l) {
                f.push(fid(tag::LAST, k, "", ""));
                tag::LAST_TOK
            } else {
                tag::OTHER_TOK
            };
            for u in &current {
                f.push(fid(rel, k, u, ""));
            }
        }
    }
    let shapes = SHAPES
        .iter()
        .map(|&(ns, nd)| {
            let key = format!("{ns}{nd}");
            let mut f = vec![fid(tag::SHAPE, 0, &key, "")];
            f.extend(current.iter().map(|u| fid(tag::SHAPE_TOK, 0, &key, u)));
            f
        })
        .collect();
    ContextFeatures { ops, shapes }
}

fn op_slots(a: &ActionSpec) -> impl Iterator<Item = usize> + '_ {
    a.selects()
        .iter()
        .map(|l| slot(OpKind::Select, l))
        .chain(a.deselects().iter().map(|l| slot(OpKind::Deselect, l)))
}

/// Sparse feature vector: id → value.
pub type FeatureVector = HashMap<u64, f64>;

/// Unnormalized feature counts of taking `a` in `x`.
pub fn featurize(x: &PolicyContext, a: &ActionSpec) -> Result<FeatureVector> {
    check_candidate(x, a, usize::MAX)?;
    let cf = extract(x);
    let mut out = FeatureVector::new();
    for s in op_slots(a) {
        for id in &cf.ops[s] {
            *out.entry(*id).or_insert(0.0) += 1.0;
        }
    }
    if let Some(si) = shape_index(a.selects().len(), a.deselects().len()) {
        for id in &cf.shapes[si] {
            *out.entry(*id).or_insert(0.0) += 1.0;
        }
    }
    Ok(out)
}

fn check_candidate(x: &PolicyContext, a: &ActionSpec, max_ops: usize) -> Result<()> {
    if !a.is_legal_for(x.selected) {
        return Err(Error::IllegalAction {
            action: a.serialize(),
            reason: format!("not applicable with {}", state_line(x.selected)),
        });
    }
    if a.op_count() > max_ops {
        return Err(Error::IllegalAction {
            action: a.serialize(),
            reason: format!("more than {max_ops} operations"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub weights: HashMap<u64, f64>,
    pub feature_version: u32,
    pub temperature: f64,
    pub max_ops: usize,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams {
            weights: HashMap::new(),
            feature_version: FEATURE_VERSION,
            temperature: 1.0,
            max_ops: DEFAULT_MAX_OPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Sample,
    Argmax,
}

impl PolicyParams {
    fn weight(&self, id: u64) -> f64 {
        self.weights.get(&id).copied().unwrap_or(0.0)
    }

    /// Probabilities of every legal candidate, in candidate order.
    pub fn action_distribution(&self, x: &PolicyContext) -> Vec<(ActionSpec, f64)> {
        let cf = extract(x);
        let op: Vec<f64> = cf
            .ops
            .iter()
            .map(|ids| ids.iter().map(|id| self.weight(*id)).sum())
            .collect();
        let shape: Vec<f64> = cf
            .shapes
            .iter()
            .map(|ids| ids.iter().map(|id| self.weight(*id)).sum())
            .collect();
        let cands = legal_actions(x.selected, self.max_ops);
        let scores: Vec<f64> = cands
            .iter()
            .map(|a| {
                let n = a.op_count();
                let mut s: f64 = op_slots(a).map(|i| op[i]).sum();
                if let Some(si) = shape_index(a.selects().len(), a.deselects().len()) {
                    s += shape[si];
                }
                s / (n as f64 * self.temperature)
            })
            .collect();
        let probs = softmax(&scores);
        cands.into_iter().zip(probs).collect()
    }

    pub fn prob_of(&self, x: &PolicyContext, a: &ActionSpec) -> Result<f64> {
        check_candidate(x, a, self.max_ops)?;
        Ok(self
            .action_distribution(x)
            .into_iter()
            .find(|(c, _)| c == a)
            .map(|(_, p)| p)
            .expect("legal candidate"))
    }

    /// Choose an action and report the probability it had when chosen.
    pub fn act(&self, x: &PolicyContext, mode: DecodeMode, rng: &mut impl Rng) -> (ActionSpec, f64) {
        let dist = self.action_distribution(x);
        match mode {
            DecodeMode::Argmax => argmax(&dist),
            DecodeMode::Sample => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (a, p) in &dist {
                    acc += p;
                    if u < acc {
                        return (*a, *p);
                    }
                }
                *dist.last().expect("non-empty candidate set")
            }
        }
    }

    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        let mut ids: Vec<(&u64, &f64)> = self.weights.iter().filter(|(_, v)| **v != 0.0).collect();
        ids.sort_unstable_by_key(|(k, _)| **k);
        writeln!(w, "{CKPT_HEADER}")?;
        writeln!(w, "feature_version {}", self.feature_version)?;
        writeln!(w, "temperature {}", self.temperature)?;
        writeln!(w, "max_ops {}", self.max_ops)?;
        writeln!(w, "weights {}", ids.len())?;
        for (k, v) in ids {
            writeln!(w, "{k:016x} {v}")?;
        }
        Ok(())
    }

    pub fn read_checkpoint(r: impl BufRead) -> Result<PolicyParams> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| bad("truncated checkpoint".into()))?
                .map_err(Error::from)
        };
        if next()? != CKPT_HEADER {
            return Err(bad("unknown checkpoint header".into()));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = next()?;
            line.strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected `{name}`, got {line:?}")))
        };
        let feature_version: u32 = field("feature_version")?
            .parse()
            .map_err(|e| bad(format!("feature_version: {e}")))?;
        if feature_version != FEATURE_VERSION {
            return Err(bad(format!("feature version {feature_version} unsupported")));
        }
        let temperature: f64 = field("temperature")?
            .parse()
            .map_err(|e| bad(format!("temperature: {e}")))?;
        let max_ops: usize = field("max_ops")?
            .parse()
            .map_err(|e| bad(format!("max_ops: {e}")))?;
        let n: usize = field("weights")?
            .parse()
            .map_err(|e| bad(format!("weights: {e}")))?;
        let mut weights = HashMap::with_capacity(n);
        for _ in 0..n {
            let line = next()?;
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("weight line {line:?}")))?;
            let k = u64::from_str_radix(k, 16).map_err(|e| bad(format!("{k}: {e}")))?;
            let v: f64 = v.parse().map_err(|e| bad(format!("{v}: {e}")))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite weight for {k:016x}")));
            }
            weights.insert(k, v);
        }
        if !(temperature > 0.0) || max_ops == 0 {
            return Err(bad("temperature and max_ops must be positive".into()));
        }
        Ok(PolicyParams {
            weights,
            feature_version,
            temperature,
            max_ops,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<PolicyParams> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        PolicyParams::read_checkpoint(std::io::BufReader::new(f))
    }
}

fn argmax(dist: &[(ActionSpec, f64)]) -> (ActionSpec, f64) {
    // first maximum in candidate order
    let mut best = dist[0];
    for d in &dist[1..] {
        if d.1 > best.1 {
            best = *d;
        }
    }
    best
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Feature-id to dense-index map used while training.
#[derive(Debug, Default, Clone)]
pub struct FeatureIndex {
    index: HashMap<u64, u32>,
    ids: Vec<u64>,
}

impl FeatureIndex {
    pub fn intern(&mut self, id: u64) -> u32 {
        if let Some(i) = self.index.get(&id) {
            return *i;
        }
        let i = self.ids.len() as u32;
        self.index.insert(id, i);
        self.ids.push(id);
        i
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn dense(&self, params: &PolicyParams) -> Vec<f64> {
        self.ids.iter().map(|id| params.weight(*id)).collect()
    }

    pub fn sparse(&self, dense: &[f64], like: &PolicyParams) -> PolicyParams {
        PolicyParams {
            weights: self
                .ids
                .iter()
                .zip(dense)
                .filter(|(_, w)| **w != 0.0)
                .map(|(id, w)| (*id, *w))
                .collect(),
            ..like.clone()
        }
    }
}

/// One candidate of a compiled context.
#[derive(Debug, Clone)]
pub struct CompiledCandidate {
    pub action: ActionSpec,
    slots: [u8; 2],
    n: u8,
    shape: u8,
}

/// A context with its features resolved to dense indices, for fast repeated
/// scoring during training.
#[derive(Debug, Clone)]
pub struct CompiledContext {
    ops: Vec<Vec<u32>>,
    shapes: Vec<Vec<u32>>,
    pub candidates: Vec<CompiledCandidate>,
    temperature: f64,
}

impl CompiledContext {
    pub fn new(x: &PolicyContext, params: &PolicyParams, index: &mut FeatureIndex) -> Self {
        assert!(params.max_ops <= 2, "compiled scoring supports at most two operations");
        let cf = extract(x);
        let mut map = |ids: Vec<u64>| ids.into_iter().map(|id| index.intern(id)).collect();
        let ops = cf.ops.into_iter().map(&mut map).collect();
        let shapes = cf.shapes.into_iter().map(&mut map).collect();
        let candidates = legal_actions(x.selected, params.max_ops)
            .into_iter()
            .map(|a| {
                let mut slots = [0u8; 2];
                let mut n = 0;
                for s in op_slots(&a) {
                    slots[n] = s as u8;
                    n += 1;
                }
                let shape = shape_index(a.selects().len(), a.deselects().len())
                    .expect("at most two operations") as u8;
                CompiledCandidate {
                    action: a,
                    slots,
                    n: n as u8,
                    shape,
                }
            })
            .collect();
        CompiledContext {
            ops,
            shapes,
            candidates,
            temperature: params.temperature,
        }
    }

    pub fn position(&self, a: &ActionSpec) -> Option<usize> {
        self.candidates.iter().position(|c| c.action == *a)
    }

    /// Candidate probabilities under dense weights `w`.
    pub fn probs(&self, w: &[f64]) -> Vec<f64> {
        let op: Vec<f64> = self
            .ops
            .iter()
            .map(|ids| ids.iter().map(|i| w[*i as usize]).sum())
            .collect();
        let shape: Vec<f64> = self
            .shapes
            .iter()
            .map(|ids| ids.iter().map(|i| w[*i as usize]).sum())
            .collect();
        let scores: Vec<f64> = self
            .candidates
            .iter()
            .map(|c| {
                let s: f64 = c.slots[..c.n as usize]
                    .iter()
                    .map(|s| op[*s as usize])
                    .sum::<f64>()
                    + shape[c.shape as usize];
                s / (c.n as f64 * self.temperature)
            })
            .collect();
        softmax(&scores)
    }

    /// Add `Σ_c coef[c] · ∂score_c/∂w` into `grad`.
    pub fn accumulate(&self, coef: &[f64], grad: &mut [f64]) {
        let mut op = vec![0.0; SLOTS];
        let mut shape = [0.0; SHAPES.len()];
        for (c, k) in self.candidates.iter().zip(coef) {
            if *k == 0.0 {
                continue;
            }
            let scaled = k / (c.n as f64 * self.temperature);
            for s in &c.slots[..c.n as usize] {
                op[*s as usize] += scaled;
            }
            shape[c.shape as usize] += scaled;
        }
        for (ids, k) in self.ops.iter().zip(&op) {
            if *k != 0.0 {
                for i in ids {
                    grad[*i as usize] += k;
                }
            }
        }
        for (ids, k) in self.shapes.iter().zip(&shape) {
            if *k != 0.0 {
                for i in ids {
                    grad[*i as usize] += k;
                }
            }
        }
    }

    /// Index of the most probable candidate, first on ties.
    pub fn argmax(&self, w: &[f64]) -> usize {
        let p = self.probs(w);
        let mut best = 0;
        for i in 1..p.len() {
            if p[i] > p[best] {
                best = i;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn letter(c: char) -> Letter {
        Letter::from_char(c).unwrap()
    }

    fn toy_context() -> PolicyContext {
        let items: Vec<Vec<String>> = (0..10)
            .map(|i| vec![format!("attr{i}"), format!("attr{}", (i + 3) % 10)])
            .collect();
        PolicyContext::new(
            items,
            vec![(
                Utterance::new("pick the attr1 one"),
                ActionSpec::select([letter('B')]).unwrap(),
            )],
            Some(Utterance::new("no, deselect that, the attr5 one")),
        )
    }

    #[test]
    fn zero_weights_give_uniform() {
        let x = toy_context();
        let dist = PolicyParams::default().action_distribution(&x);
        assert_eq!(dist.len(), 55);
        for (_, p) in &dist {
            assert!((p - 1.0 / 55.0).abs() < 1e-15);
        }
    }

    #[test]
    fn probabilities_normalize_and_stay_positive() {
        let x = toy_context();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = PolicyParams::default();
        for a in legal_actions(x.selected, 2) {
            for id in featurize(&x, &a).unwrap().keys() {
                params.weights.insert(*id, rng.gen_range(-3.0..3.0));
            }
        }
        let dist = params.action_distribution(&x);
        let total: f64 = dist.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(dist.iter().all(|(_, p)| *p > 0.0));
    }

    #[test]
    fn scores_equal_dot_product_over_op_count() {
        let x = toy_context();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = PolicyParams::default();
        let cands = legal_actions(x.selected, 2);
        for a in &cands {
            for id in featurize(&x, a).unwrap().keys() {
                params.weights.insert(*id, rng.gen_range(-1.0..1.0));
            }
        }
        // independent oracle: softmax of w·φ/n built from featurize
        let scores: Vec<f64> = cands
            .iter()
            .map(|a| {
                let phi = featurize(&x, a).unwrap();
                let dot: f64 = phi.iter().map(|(k, v)| params.weight(*k) * v).sum();
                dot / a.op_count() as f64
            })
            .collect();
        let oracle = softmax(&scores);
        for ((_, p), q) in params.action_distribution(&x).iter().zip(oracle) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn boosting_a_feature_raises_its_action() {
        let x = toy_context();
        let target = ActionSpec::deselect([letter('B')]).unwrap();
        let mut params = PolicyParams::default();
        let before = params.prob_of(&x, &target).unwrap();
        let phi = featurize(&x, &target).unwrap();
        let last = fid(tag::LAST, OpKind::Deselect as u8, "", "");
        assert!(phi.contains_key(&last));
        params.weights.insert(last, 0.5);
        assert!(params.prob_of(&x, &target).unwrap() > before);
    }

    #[test]
    fn featurize_is_deterministic_and_bounded() {
        let x = toy_context();
        let a = ActionSpec::new(
            [letter('F')].into_iter().collect(),
            [letter('B')].into_iter().collect(),
        )
        .unwrap();
        assert_eq!(featurize(&x, &a).unwrap(), featurize(&x, &a).unwrap());
        let cur = x.current_utterance.as_ref().unwrap().tokens().len();
        let prev = x.history[0].0.tokens().len();
        let attrs = 2;
        let per_op = 2 + 2 * (cur + prev) * attrs + 1 + cur + 1;
        let bound = 2 * per_op + 1 + cur;
        let total: f64 = featurize(&x, &a).unwrap().values().sum();
        assert!(total as usize <= bound);
        assert!(featurize(&x, &ActionSpec::select([letter('B')]).unwrap()).is_err());
    }

    #[test]
    fn empty_utterance_only_fires_structural_features() {
        let mut x = toy_context();
        x.history.clear();
        x.selected = LetterSet::EMPTY;
        x.current_utterance = Some(Utterance::new(""));
        let phi = featurize(&x, &ActionSpec::select([letter('A')]).unwrap()).unwrap();
        let mut expected: Vec<u64> = vec![
            fid(tag::KIND, 0, "", ""),
            fid(tag::SHAPE, 0, "10", ""),
        ];
        expected.sort_unstable();
        let mut got: Vec<u64> = phi.keys().copied().collect();
        got.sort_unstable();
        assert_eq!(got, expected);
    }

    #[test]
    fn argmax_and_sampling() {
        let x = toy_context();
        let target = ActionSpec::deselect([letter('B')]).unwrap();
        let mut params = PolicyParams::default();
        for id in featurize(&x, &target).unwrap().keys() {
            params.weights.insert(*id, 1.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, p) = params.act(&x, DecodeMode::Argmax, &mut rng);
        assert_eq!(a, target);
        assert_eq!(p, params.prob_of(&x, &a).unwrap());
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| params.act(&x, DecodeMode::Sample, &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(4), run(4));
        for (a, p) in run(9) {
            assert_eq!(p.to_bits(), params.prob_of(&x, &a).unwrap().to_bits());
        }
    }

    #[test]
    fn relabeling_permutes_the_distribution() {
        let x = toy_context();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = PolicyParams::default();
        for a in legal_actions(x.selected, 2) {
            for id in featurize(&x, &a).unwrap().keys() {
                params.weights.insert(*id, rng.gen_range(-2.0..2.0));
            }
        }
        let mut perm: Vec<Letter> = Letter::all().collect();
        perm.shuffle(&mut rng);
        let perm: [Letter; NUM_LETTERS] = perm.try_into().unwrap();
        let y = x.relabel(&perm);
        let py: HashMap<ActionSpec, f64> = params.action_distribution(&y).into_iter().collect();
        for (a, p) in params.action_distribution(&x) {
            assert!((py[&a.relabel(&perm)] - p).abs() < 1e-12);
        }
    }

    #[test]
    fn compiled_scoring_matches_sparse() {
        let x = toy_context();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = PolicyParams::default();
        for a in legal_actions(x.selected, 2) {
            for id in featurize(&x, &a).unwrap().keys() {
                params.weights.insert(*id, rng.gen_range(-2.0..2.0));
            }
        }
        let mut index = FeatureIndex::default();
        let cc = CompiledContext::new(&x, &params, &mut index);
        let w = index.dense(&params);
        let dense = cc.probs(&w);
        for ((a, p), (c, q)) in params.action_distribution(&x).iter().zip(cc.candidates.iter().zip(dense)) {
            assert_eq!(*a, c.action);
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut params = PolicyParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            params.weights.insert(rng.gen(), rng.gen_range(-1e3..1e3) * rng.gen::<f64>().powi(9));
        }
        params.temperature = 0.7;
        let mut buf = Vec::new();
        params.write_checkpoint(&mut buf).unwrap();
        let back = PolicyParams::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, params);
        let mut again = Vec::new();
        back.write_checkpoint(&mut again).unwrap();
        assert_eq!(buf, again);
        assert!(PolicyParams::read_checkpoint(&b"garbage\n"[..]).is_err());
    }

    #[test]
    fn transcript_lists_turns_and_state() {
        let text = toy_context().transcript();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("System: <ref> A <ref> B"));
        assert_eq!(lines[1], "System: none is selected");
        assert_eq!(lines[2], "User: pick the attr1 one");
        assert_eq!(lines[3], "Assistant: Select B");
        assert_eq!(lines[4], "System: B currently selected");
        assert_eq!(lines[5], "User: no, deselect that, the attr5 one");
    }
}
