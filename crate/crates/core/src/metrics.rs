//! Interaction-, turn- and corpus-level evaluation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::InteractionLog;
use crate::error::{Error, Result};
use crate::feedback::FeedbackLabel;
use crate::game::{Payload, Status};
use crate::grammar::{ActionSpec, LetterSet};
use crate::lexicon;
use crate::speaker::GroundTruthFeedback;

pub fn success_rate(logs: &[InteractionLog]) -> Result<f64> {
    if logs.is_empty() {
        return Err(Error::EmptyInput("interactions"));
    }
    let wins = logs.iter().filter(|l| l.outcome == Status::Success).count();
    Ok(wins as f64 / logs.len() as f64)
}

/// Mean listener turns per interaction.
pub fn mean_turns(logs: &[InteractionLog]) -> Result<f64> {
    if logs.is_empty() {
        return Err(Error::EmptyInput("interactions"));
    }
    let turns: usize = logs.iter().map(|l| l.listener_turns()).sum();
    Ok(turns as f64 / logs.len() as f64)
}

pub fn exact_match(pred: &ActionSpec, truth: &ActionSpec) -> bool {
    pred.selects() == truth.selects() && pred.deselects() == truth.deselects()
}

/// Similarity of two items given their attribute sets.
pub type ItemSimilarity = fn(&[String], &[String]) -> f64;

/// Signed Jaccard: 2·|A∩B|/|A∪B| − 1.
pub fn signed_jaccard(a: &[String], b: &[String]) -> f64 {
    let a: BTreeSet<&String> = a.iter().collect();
    let b: BTreeSet<&String> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    2.0 * a.intersection(&b).count() as f64 / union as f64 - 1.0
}

#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    pub item_similarity: ItemSimilarity,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            item_similarity: signed_jaccard,
        }
    }
}

/// Pairwise sum over one operation group and its denominator share. A
/// group present on only one side scores −1 per missed operation.
fn group_terms(
    pred: LetterSet,
    truth: LetterSet,
    items: &[Vec<String>],
    f: ItemSimilarity,
) -> (f64, f64) {
    let (n_pred, n_truth) = (pred.len(), truth.len());
    match (n_pred, n_truth) {
        (0, 0) => (0.0, 0.0),
        (0, n) | (n, 0) => (-(n as f64), n as f64),
        _ => {
            let mut sum = 0.0;
            for p in pred.iter() {
                for q in truth.iter() {
                    sum += f(&items[p.index()], &items[q.index()]);
                }
            }
            (sum, (n_pred * n_truth) as f64)
        }
    }
}

/// Composite similarity between a predicted and a reference action, with
/// `items[letter]` giving the attribute set behind each letter.
pub fn action_similarity(
    pred: &ActionSpec,
    truth: &ActionSpec,
    items: &[Vec<String>],
    cfg: &SimConfig,
) -> f64 {
    let (s_num, s_den) = group_terms(pred.selects(), truth.selects(), items, cfg.item_similarity);
    let (d_num, d_den) = group_terms(pred.deselects(), truth.deselects(), items, cfg.item_similarity);
    let den = s_den + d_den;
    if den == 0.0 {
        return 1.0;
    }
    (s_num + d_num) / den
}

/// Share of listener operations that select a target or deselect a
/// non-target.
pub fn click_accuracy(logs: &[InteractionLog]) -> Result<f64> {
    let (mut good, mut total) = (0usize, 0usize);
    for log in logs {
        let targets = log.spec.target_letters();
        for e in &log.transcript {
            if let Payload::Listener(a) = &e.payload {
                good += a.selects().intersection(targets).len();
                good += a.deselects().difference(targets).len();
                total += a.op_count();
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("listener operations"));
    }
    Ok(good as f64 / total as f64)
}

/// Share of judged turns the speaker was satisfied with.
pub fn positive_feedback_rate(truth: &[GroundTruthFeedback]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::EmptyInput("judged turns"));
    }
    let pos = truth
        .iter()
        .filter(|t| t.label == FeedbackLabel::Positive)
        .count();
    Ok(pos as f64 / truth.len() as f64)
}

/// All recorded satisfaction labels across the logs.
pub fn ground_truth_of(logs: &[InteractionLog]) -> Vec<GroundTruthFeedback> {
    logs.iter()
        .flat_map(|l| l.turns.iter().filter_map(|t| t.ground_truth))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LanguageStats {
    pub vocab_size: usize,
    pub mean_utterance_len: f64,
    pub reset_count: usize,
    pub tryagain_count: usize,
}

pub fn language_stats(logs: &[InteractionLog]) -> LanguageStats {
    let mut vocab: BTreeSet<&str> = BTreeSet::new();
    let (mut n, mut len) = (0usize, 0usize);
    let mut stats = LanguageStats::default();
    for log in logs {
        for e in &log.transcript {
            if let Payload::Speaker(u) = &e.payload {
                let toks = u.tokens();
                vocab.extend(toks.iter().map(String::as_str));
                n += 1;
                len += toks.len();
                stats.reset_count += lexicon::count_any(toks, lexicon::RESET_PHRASES);
                stats.tryagain_count += lexicon::count_any(toks, lexicon::TRY_AGAIN_PHRASES);
            }
        }
    }
    stats.vocab_size = vocab.len();
    stats.mean_utterance_len = if n == 0 { 0.0 } else { len as f64 / n as f64 };
    stats
}

/// Exact-match rate and mean similarity of logged actions against the
/// speaker's intended actions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnAgreement {
    pub turns: usize,
    pub exact_match: f64,
    pub sim_mean: f64,
}

pub fn turn_agreement(logs: &[InteractionLog], cfg: &SimConfig) -> Result<TurnAgreement> {
    let (mut n, mut em, mut sim) = (0usize, 0usize, 0.0);
    for log in logs {
        let items: Vec<Vec<String>> = crate::grammar::Letter::all()
            .map(|l| log.spec.item_at(l).attributes.clone())
            .collect();
        let actions = log.transcript.iter().filter_map(|e| match &e.payload {
            Payload::Listener(a) => Some(a),
            Payload::Speaker(_) => None,
        });
        for (a, rec) in actions.zip(&log.turns) {
            if let Some(r) = &rec.reference_action {
                n += 1;
                em += exact_match(a, r) as usize;
                sim += action_similarity(a, r, &items, cfg);
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput("turns with reference actions"));
    }
    Ok(TurnAgreement {
        turns: n,
        exact_match: em as f64 / n as f64,
        sim_mean: sim / n as f64,
    })
}
