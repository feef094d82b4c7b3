#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use refgame_core::dataset::{DecodedExample, Provenance, RawTurnExample};
use refgame_core::feedback::FeedbackLabel;
use refgame_core::game::Utterance;
use refgame_core::grammar::{legal_actions, ActionSpec, Letter, LetterSet, NUM_LETTERS};
use refgame_core::policy::{featurize, PolicyContext, PolicyParams};

const VOCAB: [&str; 12] = [
    "red", "blue", "round", "tall", "bird", "house", "striped", "dotted", "wing", "roof",
    "small", "curved",
];

pub fn random_items(rng: &mut impl Rng) -> Vec<Vec<String>> {
    (0..NUM_LETTERS)
        .map(|_| {
            let k = rng.gen_range(2..5);
            let mut v: Vec<String> = VOCAB
                .choose_multiple(rng, k)
                .map(|s| s.to_string())
                .collect();
            v.sort();
            v
        })
        .collect()
}

pub fn random_utterance(rng: &mut impl Rng) -> Utterance {
    let extras = ["the", "one", "no", "yes", "deselect", "pick", "with", "good"];
    let n = rng.gen_range(1..6);
    let words: Vec<&str> = (0..n)
        .map(|_| {
            if rng.gen_bool(0.6) {
                *VOCAB.choose(rng).unwrap()
            } else {
                *extras.choose(rng).unwrap()
            }
        })
        .collect();
    Utterance::new(words.join(" "))
}

pub fn random_legal(rng: &mut impl Rng, selected: LetterSet, max_ops: usize) -> ActionSpec {
    *legal_actions(selected, max_ops).choose(rng).unwrap()
}

/// A context with up to `max_history` past turns and a pending utterance.
pub fn random_context(rng: &mut impl Rng, max_history: usize) -> PolicyContext {
    let items = random_items(rng);
    let mut history = Vec::new();
    let mut selected = LetterSet::EMPTY;
    for _ in 0..rng.gen_range(0..=max_history) {
        let a = random_legal(rng, selected, 2);
        selected = selected.union(a.selects()).difference(a.deselects());
        history.push((random_utterance(rng), a));
    }
    PolicyContext::new(items, history, Some(random_utterance(rng)))
}

/// Every feature id that fires for some candidate of `x`.
pub fn active_features(x: &PolicyContext, max_ops: usize) -> BTreeSet<u64> {
    legal_actions(x.selected, max_ops)
        .iter()
        .flat_map(|a| featurize(x, a).unwrap().into_keys())
        .collect()
}

pub fn random_params(rng: &mut impl Rng, features: &BTreeSet<u64>, scale: f64) -> PolicyParams {
    let mut p = PolicyParams::default();
    for id in features {
        p.weights.insert(*id, rng.gen_range(-scale..scale));
    }
    p
}

pub fn example(
    context: PolicyContext,
    action: ActionSpec,
    prob: f64,
    label: FeedbackLabel,
) -> DecodedExample {
    DecodedExample {
        raw: RawTurnExample {
            provenance: Provenance {
                game_id: "t".into(),
                arm: "t".into(),
                round: 1,
                turn: 0,
                synthetic: false,
            },
            context,
            action,
            prob,
            window: None,
            ground_truth: None,
            reference_action: None,
        },
        label,
    }
}

pub fn random_action(rng: &mut impl Rng, max_ops: usize) -> ActionSpec {
    loop {
        let n = rng.gen_range(1..=max_ops);
        let mut letters: Vec<Letter> = Letter::all().collect();
        letters.shuffle(rng);
        let (mut s, mut d) = (LetterSet::EMPTY, LetterSet::EMPTY);
        for l in letters.into_iter().take(n) {
            if rng.gen_bool(0.5) {
                s.insert(l);
            } else {
                d.insert(l);
            }
        }
        if let Ok(a) = ActionSpec::new(s, d) {
            return a;
        }
    }
}

pub fn random_permutation(rng: &mut impl Rng) -> [Letter; NUM_LETTERS] {
    let mut v: Vec<Letter> = Letter::all().collect();
    v.shuffle(rng);
    v.try_into().unwrap()
}

/// Straightforward restatement of the composite similarity using plain
/// hash sets and letters as characters.
pub fn brute_force_sim(pred: &ActionSpec, truth: &ActionSpec, items: &[Vec<String>]) -> f64 {
    let letters = |s: LetterSet| -> Vec<char> { s.iter().map(|l| l.as_char()).collect() };
    let attrs = |c: char| -> HashSet<&str> {
        items[(c as u8 - b'A') as usize].iter().map(String::as_str).collect()
    };
    let f = |a: char, b: char| -> f64 {
        let (x, y) = (attrs(a), attrs(b));
        let inter = x.intersection(&y).count() as f64;
        let uni = x.union(&y).count() as f64;
        if uni == 0.0 {
            1.0
        } else {
            2.0 * inter / uni - 1.0
        }
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, t) in [
        (letters(pred.selects()), letters(truth.selects())),
        (letters(pred.deselects()), letters(truth.deselects())),
    ] {
        if p.is_empty() && t.is_empty() {
            continue;
        }
        if p.is_empty() || t.is_empty() {
            let m = p.len().max(t.len()) as f64;
            num -= m;
            den += m;
            continue;
        }
        for a in &p {
            for b in &t {
                num += f(*a, *b);
            }
        }
        den += (p.len() * t.len()) as f64;
    }
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// Central finite-difference gradient of `f` over the given weight ids.
pub fn finite_difference(
    params: &PolicyParams,
    ids: &BTreeSet<u64>,
    h: f64,
    f: impl Fn(&PolicyParams) -> f64,
) -> Vec<(u64, f64)> {
    ids.iter()
        .map(|id| {
            let mut up = params.clone();
            *up.weights.entry(*id).or_insert(0.0) += h;
            let mut dn = params.clone();
            *dn.weights.entry(*id).or_insert(0.0) -= h;
            (*id, (f(&up) - f(&dn)) / (2.0 * h))
        })
        .collect()
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, floor).
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(floor)
}
