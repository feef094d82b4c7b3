//! Scripted speakers.
//!
//! A speaker relays one or two unresolved targets per turn as noisy attribute
//! descriptions and reacts to the listener's last action with implicit
//! feedback: an optional approval word before moving on, or a correction
//! (negative cue, deselect request, try-again or reset phrasing). It also
//! reports the privileged satisfaction label for that last action, which is
//! used for evaluation only.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{InteractionLog, LogSource, TurnRecord, LOG_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::feedback::FeedbackLabel;
use crate::game::{GameState, Status, Utterance};
use crate::grammar::{ActionSpec, Letter, LetterSet};
use crate::lexicon;
use crate::seeds::derive_seed;
use crate::world::{GameSpec, Item, Split, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeakerConfig {
    /// Inclusive range of targets described per turn.
    pub describe_per_turn: (usize, usize),
    pub attribute_drop_prob: f64,
    pub synonym_prob: f64,
    /// Chance of an approval word before moving on; otherwise a silent move-on.
    pub explicit_positive_cue_prob: f64,
    /// Chance of a negative keyword in a correction; otherwise a bare corrective.
    pub negative_cue_prob: f64,
    pub tryagain_prob: f64,
    /// Wrong selections held at once before the speaker asks for a reset.
    pub reset_threshold: usize,
    /// Chance of letting an extra wrong selection slide for now and moving on
    /// when the rest of the action did what was asked.
    pub tolerate_wrong_prob: f64,
    pub rng_seed: u64,
    /// Per-round drift of speaker behavior; off by default.
    pub adaptation: Option<Adaptation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adaptation {
    /// Per-round growth of the attribute drop rate (shorter descriptions).
    pub length_decay: f64,
    /// Per-round multiplicative decay of try-again usage.
    pub tryagain_decay: f64,
}

impl Default for SpeakerConfig {
    fn default() -> Self {
        SpeakerConfig {
            describe_per_turn: (1, 2),
            attribute_drop_prob: 0.4,
            synonym_prob: 0.3,
            explicit_positive_cue_prob: 0.3,
            negative_cue_prob: 0.7,
            tryagain_prob: 0.25,
            reset_threshold: 3,
            tolerate_wrong_prob: 0.05,
            rng_seed: 17,
            adaptation: None,
        }
    }
}

impl SpeakerConfig {
    /// Cue probabilities at 1 and description noise at 0.
    pub fn noiseless() -> SpeakerConfig {
        SpeakerConfig {
            attribute_drop_prob: 0.0,
            synonym_prob: 0.0,
            explicit_positive_cue_prob: 1.0,
            negative_cue_prob: 1.0,
            tolerate_wrong_prob: 0.0,
            ..SpeakerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("attribute_drop_prob", self.attribute_drop_prob),
            ("synonym_prob", self.synonym_prob),
            ("explicit_positive_cue_prob", self.explicit_positive_cue_prob),
            ("negative_cue_prob", self.negative_cue_prob),
            ("tryagain_prob", self.tryagain_prob),
            ("tolerate_wrong_prob", self.tolerate_wrong_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name}={p} outside [0,1]")));
            }
        }
        let (lo, hi) = self.describe_per_turn;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidConfig(format!("describe_per_turn {lo}..={hi}")));
        }
        if self.reset_threshold == 0 {
            return Err(Error::InvalidConfig("reset_threshold must be positive".into()));
        }
        Ok(())
    }

    /// Effective behavior in round `round` under the adaptation schedule.
    pub fn for_round(&self, round: usize) -> SpeakerConfig {
        let mut cfg = self.clone();
        if let Some(ad) = &self.adaptation {
            let r = round as i32;
            cfg.attribute_drop_prob =
                1.0 - (1.0 - self.attribute_drop_prob) * (1.0 - ad.length_decay).powi(r);
            cfg.tryagain_prob = self.tryagain_prob * (1.0 - ad.tryagain_decay).powi(r);
        }
        cfg
    }
}

/// The four satisfaction options of the post-hoc survey.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Satisfaction {
    /// (a) Yes.
    Yes,
    /// (b) Yes, though not all required operations were done.
    YesIncomplete,
    /// (c) Yes, though some operations were not the intended ones.
    YesIncorrect,
    /// (d) No.
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthFeedback {
    pub label: FeedbackLabel,
    pub satisfied_variant: Satisfaction,
}

/// A described referent: the letter the speaker means and the surface
/// tokens used for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mention {
    pub letter: Letter,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerTurn {
    pub utterance: Utterance,
    /// What the speaker wants done next; the reference action for this turn.
    pub intent: ActionSpec,
    pub mentions: Vec<Mention>,
    /// Satisfaction with the previous listener action, if there was one.
    pub feedback: Option<GroundTruthFeedback>,
}

/// Judge a listener action against the targets and the speaker's request.
///
/// With a request, the action satisfies the speaker when it carries out at
/// least one requested operation and nothing else; unrequested operations
/// are guesses and count as incorrect even when they happen to help.
/// Without a request, selecting a target or removing a non-target is
/// helpful and anything else is not.
pub fn judge_action(
    targets: LetterSet,
    action: &ActionSpec,
    intent: Option<&ActionSpec>,
) -> GroundTruthFeedback {
    let negative = GroundTruthFeedback {
        label: FeedbackLabel::Negative,
        satisfied_variant: Satisfaction::No,
    };
    let Some(intent) = intent else {
        let harmful = !action.selects().difference(targets).is_empty()
            || !action.deselects().intersection(targets).is_empty();
        return if harmful {
            negative
        } else {
            GroundTruthFeedback {
                label: FeedbackLabel::Positive,
                satisfied_variant: Satisfaction::Yes,
            }
        };
    };
    let (want_sel, want_desel) = (intent.selects(), intent.deselects());
    let extra = action
        .selects()
        .difference(want_sel)
        .union(action.deselects().difference(want_desel));
    let progress = action.selects().intersection(want_sel).len()
        + action.deselects().intersection(want_desel).len();
    if !extra.is_empty() || progress == 0 {
        return negative;
    }
    let missing = want_sel
        .difference(action.selects())
        .union(want_desel.difference(action.deselects()));
    GroundTruthFeedback {
        label: FeedbackLabel::Positive,
        satisfied_variant: if missing.is_empty() {
            Satisfaction::Yes
        } else {
            Satisfaction::YesIncomplete
        },
    }
}

const DESCRIBE_LEADS: &[&str] = &["select", "pick", "now", "find", ""];
const POSITIVE_PREFIXES: &[&str] = &["good", "yes", "correct", "okay", "great", "perfect", "yes good"];
const NEGATIVE_PREFIXES: &[&str] = &["no", "wrong", "not that one", "no don't pick that", "no wrong one"];
const CORRECT_ONE: &[&str] = &["deselect that", "unselect that one", "remove that one", "undo that"];
const CORRECT_MANY: &[&str] = &["deselect those", "unselect those", "remove those"];
const RESET_REQUESTS: &[&str] = &[
    "deselect everything",
    "deselect all",
    "clear everything",
    "clear all",
    "start over",
    "remove everything",
    "unselect all",
    "reset",
];

/// One speaker bound to one game.
pub struct SpeakerAgent {
    cfg: SpeakerConfig,
    rng: ChaCha8Rng,
    spec: Arc<GameSpec>,
    pending: LetterSet,
    last_intent: Option<ActionSpec>,
    last_mentions: HashMap<Letter, Vec<String>>,
}

impl SpeakerAgent {
    pub fn new(cfg: SpeakerConfig, spec: Arc<GameSpec>, seed: u64) -> SpeakerAgent {
        SpeakerAgent {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            spec,
            pending: LetterSet::EMPTY,
            last_intent: None,
            last_mentions: HashMap::new(),
        }
    }

    pub fn last_intent(&self) -> Option<&ActionSpec> {
        self.last_intent.as_ref()
    }

    fn chance(&mut self, p: f64) -> bool {
        p > 0.0 && self.rng.gen::<f64>() < p
    }

    fn pick<'a>(&mut self, options: &[&'a str]) -> &'a str {
        options.choose(&mut self.rng).copied().unwrap_or("")
    }

    /// Produce the next utterance for an ongoing game.
    pub fn speak(&mut self, st: &GameState, last_action: Option<&ActionSpec>) -> SpeakerTurn {
        let targets = st.target_letters();
        let selected = st.selected();
        let wrong_now = selected.difference(targets);
        let missing = targets.difference(selected);

        let mut tolerated = false;
        let feedback = last_action.map(|a| {
            let fb = judge_action(targets, a, self.last_intent.as_ref());
            let only_wrong_selects = a.deselects().intersection(targets).is_empty();
            let progressed = self.last_intent.is_some_and(|i| {
                !a.selects().intersection(i.selects()).is_empty()
                    || !a.deselects().intersection(i.deselects()).is_empty()
            });
            if fb.label == FeedbackLabel::Negative
                && only_wrong_selects
                && progressed
                && self.chance(self.cfg.tolerate_wrong_prob)
            {
                tolerated = true;
                GroundTruthFeedback {
                    label: FeedbackLabel::Positive,
                    satisfied_variant: Satisfaction::YesIncorrect,
                }
            } else {
                fb
            }
        });

        let mut parts: Vec<String> = Vec::new();
        let mut mentions: Vec<Mention> = Vec::new();
        let intent: ActionSpec;

        let negative = feedback.is_some_and(|f| f.label == FeedbackLabel::Negative);
        if negative {
            let a = last_action.expect("feedback implies an action");
            let cued = self.chance(self.cfg.negative_cue_prob);
            if cued {
                parts.push(self.pick(NEGATIVE_PREFIXES).to_string());
            }
            let just_wrong = a.selects().intersection(wrong_now);
            let undone = a.deselects().intersection(targets).difference(selected);
            if wrong_now.len() >= self.cfg.reset_threshold {
                parts.push(self.pick(RESET_REQUESTS).to_string());
                intent = ActionSpec::deselect(selected.iter()).expect("non-empty selection");
            } else if !just_wrong.is_empty() {
                let redo: Vec<Letter> = self
                    .pending
                    .intersection(missing)
                    .iter()
                    .take(2usize.saturating_sub(just_wrong.len()))
                    .collect();
                if self.chance(self.cfg.tryagain_prob) {
                    parts.push(self.pick(lexicon::TRY_AGAIN_PHRASES).to_string());
                    for l in &redo {
                        if let Some(tokens) = self.last_mentions.get(l) {
                            mentions.push(Mention {
                                letter: *l,
                                tokens: tokens.clone(),
                            });
                        }
                    }
                } else {
                    let phrase = if just_wrong.len() > 1 {
                        self.pick(CORRECT_MANY)
                    } else {
                        self.pick(CORRECT_ONE)
                    };
                    parts.push(phrase.to_string());
                    for l in &redo {
                        let tokens = self.describe(*l);
                        parts.push(format!("the {} one", tokens.join(" ")));
                        mentions.push(Mention {
                            letter: *l,
                            tokens,
                        });
                    }
                }
                intent = ActionSpec::new(redo.iter().copied().collect(), just_wrong)
                    .expect("disjoint select and deselect sets");
            } else if !undone.is_empty() {
                let back: Vec<Letter> = undone.iter().take(2).collect();
                let descs: Vec<String> = back
                    .iter()
                    .map(|l| {
                        let tokens = self.describe(*l);
                        let d = format!("the {} one", tokens.join(" "));
                        mentions.push(Mention {
                            letter: *l,
                            tokens,
                        });
                        d
                    })
                    .collect();
                parts.push(format!("select {} again", descs.join(" and ")));
                intent = ActionSpec::select(back).expect("non-empty");
            } else {
                // nothing requested was done; ask again
                if !cued {
                    parts.push(self.pick(lexicon::TRY_AGAIN_PHRASES).to_string());
                }
                intent = self.describe_targets(missing, wrong_now, &mut parts, &mut mentions);
            }
        } else {
            if last_action.is_some() && self.chance(self.cfg.explicit_positive_cue_prob) {
                parts.push(self.pick(POSITIVE_PREFIXES).to_string());
            }
            if !wrong_now.is_empty() && (!tolerated || missing.is_empty()) {
                let l = wrong_now.iter().next().expect("non-empty");
                let tokens = self.describe(l);
                parts.push(format!("deselect the {} one", tokens.join(" ")));
                mentions.push(Mention {
                    letter: l,
                    tokens,
                });
                intent = ActionSpec::deselect([l]).expect("non-empty");
            } else {
                intent = self.describe_targets(missing, wrong_now, &mut parts, &mut mentions);
            }
        }

        self.pending = intent.selects();
        for m in &mentions {
            self.last_mentions.insert(m.letter, m.tokens.clone());
        }
        self.last_intent = Some(intent);
        SpeakerTurn {
            utterance: Utterance::new(parts.join(", ")),
            intent,
            mentions,
            feedback,
        }
    }

    fn describe_targets(
        &mut self,
        missing: LetterSet,
        wrong_now: LetterSet,
        parts: &mut Vec<String>,
        mentions: &mut Vec<Mention>,
    ) -> ActionSpec {
        if missing.is_empty() {
            // only wrong selections remain
            return ActionSpec::deselect(wrong_now.iter()).expect("game is ongoing");
        }
        let (lo, hi) = self.cfg.describe_per_turn;
        let k = self.rng.gen_range(lo..=hi).min(missing.len());
        let mut order: Vec<Letter> = self.pending.intersection(missing).iter().collect();
        let mut rest: Vec<Letter> = missing.difference(self.pending).iter().collect();
        rest.shuffle(&mut self.rng);
        order.extend(rest);
        order.truncate(k);
        let descs: Vec<String> = order
            .iter()
            .map(|l| {
                let tokens = self.describe(*l);
                let d = format!("the {} one", tokens.join(" "));
                mentions.push(Mention {
                    letter: *l,
                    tokens,
                });
                d
            })
            .collect();
        let lead = self.pick(DESCRIBE_LEADS);
        let body = descs.join(" and ");
        parts.push(if lead.is_empty() {
            body
        } else {
            format!("{lead} {body}")
        });
        ActionSpec::select(order).expect("non-empty")
    }

    /// Noisy surface rendering of one item that still singles it out among
    /// the context when the item's attributes allow it.
    fn describe(&mut self, letter: Letter) -> Vec<String> {
        let spec = self.spec.clone();
        let item = spec.item_at(letter).clone();
        let others: Vec<&Item> = Letter::all()
            .filter(|l| *l != letter)
            .map(|l| spec.item_at(l))
            .collect();
        let mut attrs = item.attributes.clone();
        attrs.shuffle(&mut self.rng);
        let drop = self.cfg.attribute_drop_prob;
        let mut keep: Vec<String> = attrs
            .iter()
            .filter(|_| !self.chance(drop))
            .cloned()
            .collect();
        if keep.is_empty() {
            keep.push(attrs[0].clone());
        }
        loop {
            let confusers: Vec<&&Item> = others
                .iter()
                .filter(|o| keep.iter().all(|a| o.attributes.contains(a)))
                .collect();
            if confusers.is_empty() {
                break;
            }
            let best = attrs
                .iter()
                .filter(|a| !keep.contains(a))
                .map(|a| {
                    let removed = confusers
                        .iter()
                        .filter(|o| !o.attributes.contains(a))
                        .count();
                    (removed, a)
                })
                .filter(|(removed, _)| *removed > 0)
                .max_by_key(|(removed, _)| *removed);
            match best {
                Some((_, a)) => keep.push(a.clone()),
                None => break,
            }
        }
        let syn = self.cfg.synonym_prob;
        keep.iter()
            .map(|a| {
                let aliases = &item.aliases[a];
                if !aliases.is_empty() && self.chance(syn) {
                    aliases.choose(&mut self.rng).expect("non-empty").clone()
                } else {
                    a.clone()
                }
            })
            .collect()
    }
}

/// The listener that produced seed data: resolves each described referent by
/// attribute overlap, breaking ties toward the speaker's intended item, and
/// carries out requested corrections exactly.
pub fn oracle_listener(spec: &GameSpec, st: &GameState, turn: &SpeakerTurn) -> ActionSpec {
    let selected = st.selected();
    if lexicon::contains_any(turn.utterance.tokens(), lexicon::RESET_PHRASES) && !selected.is_empty()
    {
        return ActionSpec::deselect(selected.iter()).expect("non-empty");
    }
    let mut surface: HashMap<&str, &str> = HashMap::new();
    for item in &spec.context {
        for (attr, aliases) in &item.aliases {
            surface.insert(attr, attr);
            for al in aliases {
                surface.insert(al, attr);
            }
        }
    }
    let mut selects = LetterSet::EMPTY;
    let mut deselects = turn.intent.deselects().intersection(selected);
    let mut resolved = LetterSet::EMPTY;
    for m in &turn.mentions {
        let wanted: Vec<&str> = m.tokens.iter().filter_map(|t| surface.get(t.as_str()).copied()).collect();
        let mentioned_selected = selected.contains(m.letter);
        // a mention of a selected item is a deselect request
        let pool = if mentioned_selected {
            selected.difference(resolved)
        } else {
            selected.complement().difference(resolved)
        };
        let score = |l: Letter| {
            let attrs = &spec.item_at(l).attributes;
            wanted.iter().filter(|w| attrs.iter().any(|a| a == *w)).count()
        };
        let best = pool.iter().map(score).max().unwrap_or(0);
        let choice = if pool.contains(m.letter) && score(m.letter) == best {
            Some(m.letter)
        } else {
            pool.iter().find(|l| score(*l) == best)
        };
        if let Some(l) = choice {
            resolved.insert(l);
            if mentioned_selected {
                deselects.insert(l);
            } else {
                selects.insert(l);
            }
        }
    }
    // referents re-requested without a description (try again)
    let undescribed = turn
        .intent
        .selects()
        .difference(turn.mentions.iter().map(|m| m.letter).collect());
    selects = selects.union(undescribed.difference(selected));
    ActionSpec::new(selects, deselects).unwrap_or(turn.intent)
}

/// Drive one game between a scripted speaker and an arbitrary listener.
///
/// The listener returns its action and the probability it assigned to it.
pub fn simulate_game(
    spec: Arc<GameSpec>,
    cfg: &SpeakerConfig,
    speaker_seed: u64,
    max_listener_turns: usize,
    mut listener: impl FnMut(&GameState, &SpeakerTurn) -> Result<(ActionSpec, f64)>,
) -> Result<(GameState, Vec<TurnRecord>)> {
    let mut speaker = SpeakerAgent::new(cfg.clone(), spec.clone(), speaker_seed);
    let mut st = GameState::with_budget(spec, max_listener_turns);
    let mut records: Vec<TurnRecord> = Vec::new();
    let mut last: Option<ActionSpec> = None;
    while st.status() == Status::Ongoing {
        let turn = speaker.speak(&st, last.as_ref());
        if let (Some(fb), Some(rec)) = (turn.feedback, records.last_mut()) {
            rec.ground_truth = Some(fb);
        }
        st.record_utterance(turn.utterance.clone())?;
        let (action, prob) = listener(&st, &turn)?;
        st.apply_action(&action)?;
        records.push(TurnRecord {
            prob,
            reference_action: Some(turn.intent),
            ground_truth: None,
        });
        last = Some(action);
    }
    // nobody speaks after the final action; judge it directly
    if let (Some(a), Some(rec)) = (last, records.last_mut()) {
        rec.ground_truth = Some(judge_action(
            st.target_letters(),
            &a,
            speaker.last_intent(),
        ));
    }
    Ok((st, records))
}

/// Speaker plus oracle-listener games on the given split.
pub fn generate_seed_games(
    n: usize,
    world: &World,
    split: &Split,
    cfg: &SpeakerConfig,
    seed: u64,
) -> Result<Vec<InteractionLog>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x73656564]));
    (0..n)
        .map(|g| {
            let spec = Arc::new(crate::world::sample_game(&world.items, split, &mut rng)?);
            let speaker_seed = derive_seed(seed, &[0x73706b, g as u64]);
            let (st, turns) = simulate_game(
                spec.clone(),
                cfg,
                speaker_seed,
                crate::game::MAX_LISTENER_TURNS,
                |st, turn| Ok((oracle_listener(&spec, st, turn), 1.0)),
            )?;
            Ok(InteractionLog {
                schema_version: LOG_SCHEMA_VERSION,
                game_id: format!("seed-g{g:04}"),
                spec: (*spec).clone(),
                transcript: st.transcript().to_vec(),
                turns,
                outcome: st.status(),
                arm: "seed".into(),
                round: 0,
                source: LogSource::Sim,
                max_listener_turns: st.max_listener_turns(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, SplitName, WorldConfig};

    fn world() -> World {
        generate_world(&WorldConfig::default()).unwrap()
    }

    fn spec(world: &World, seed: u64) -> Arc<GameSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arc::new(world.sample_game(SplitName::Main, &mut rng).unwrap())
    }

    #[test]
    fn first_turn_describes_targets_without_letters() {
        let w = world();
        for seed in 0..50 {
            let spec = spec(&w, seed);
            let st = GameState::new(spec.clone());
            let mut sp = SpeakerAgent::new(SpeakerConfig::default(), spec.clone(), seed);
            let turn = sp.speak(&st, None);
            assert!(turn.feedback.is_none());
            assert!(!turn.intent.selects().is_empty());
            assert!(turn.intent.selects().is_subset(st.target_letters()));
            for tok in turn.utterance.tokens() {
                assert!(
                    !(tok.len() == 1 && ('a'..='j').contains(&tok.chars().next().unwrap())),
                    "letter leaked in {:?}",
                    turn.utterance.text()
                );
            }
        }
    }

    #[test]
    fn correct_selection_is_positive() {
        let w = world();
        let spec = spec(&w, 1);
        let mut st = GameState::new(spec.clone());
        let mut sp = SpeakerAgent::new(SpeakerConfig::default(), spec.clone(), 9);
        let turn = sp.speak(&st, None);
        st.record_utterance(turn.utterance.clone()).unwrap();
        st.apply_action(&turn.intent).unwrap();
        if st.status() == Status::Ongoing {
            let next = sp.speak(&st, Some(&turn.intent));
            let fb = next.feedback.unwrap();
            assert_eq!(fb.label, FeedbackLabel::Positive);
            assert_eq!(fb.satisfied_variant, Satisfaction::Yes);
            let neg = lexicon::contains_any(next.utterance.tokens(), lexicon::NEGATIVE_CUES);
            assert!(!neg, "{}", next.utterance.text());
        }
    }

    #[test]
    fn wrong_selection_gets_correction() {
        let w = world();
        let cfg = SpeakerConfig {
            tolerate_wrong_prob: 0.0,
            negative_cue_prob: 1.0,
            ..SpeakerConfig::default()
        };
        let spec = spec(&w, 2);
        let mut st = GameState::new(spec.clone());
        let mut sp = SpeakerAgent::new(cfg, spec.clone(), 3);
        let turn = sp.speak(&st, None);
        st.record_utterance(turn.utterance.clone()).unwrap();
        let wrong = st.target_letters().complement().iter().next().unwrap();
        let a = ActionSpec::select([wrong]).unwrap();
        st.apply_action(&a).unwrap();
        let next = sp.speak(&st, Some(&a));
        let fb = next.feedback.unwrap();
        assert_eq!(fb.label, FeedbackLabel::Negative);
        assert_eq!(fb.satisfied_variant, Satisfaction::No);
        assert!(next.intent.deselects().contains(wrong));
        assert!(lexicon::contains_any(next.utterance.tokens(), lexicon::NEGATIVE_CUES));
    }

    #[test]
    fn tolerated_wrong_selection_moves_on() {
        let w = world();
        let cfg = cfg_tol();
        let spec = spec(&w, 4);
        let mut st = GameState::new(spec.clone());
        let mut sp = SpeakerAgent::new(cfg, spec.clone(), 3);
        let turn = sp.speak(&st, None);
        st.record_utterance(turn.utterance.clone()).unwrap();
        let wrong = st.target_letters().complement().iter().next().unwrap();
        let asked = turn.intent.selects().iter().next().unwrap();
        let a = ActionSpec::select([asked, wrong]).unwrap();
        st.apply_action(&a).unwrap();
        let next = sp.speak(&st, Some(&a));
        let fb = next.feedback.unwrap();
        assert_eq!(fb.label, FeedbackLabel::Positive);
        assert_eq!(fb.satisfied_variant, Satisfaction::YesIncorrect);
        // nothing requested done: not tolerated
        let mut st = GameState::new(spec.clone());
        let mut sp = SpeakerAgent::new(cfg_tol(), spec.clone(), 3);
        let turn = sp.speak(&st, None);
        st.record_utterance(turn.utterance.clone()).unwrap();
        let a = ActionSpec::select([wrong]).unwrap();
        st.apply_action(&a).unwrap();
        let next = sp.speak(&st, Some(&a));
        assert_eq!(next.feedback.unwrap().label, FeedbackLabel::Negative);
    }

    fn cfg_tol() -> SpeakerConfig {
        SpeakerConfig {
            tolerate_wrong_prob: 1.0,
            explicit_positive_cue_prob: 0.0,
            ..SpeakerConfig::default()
        }
    }

    #[test]
    fn judge_variants() {
        let l = |c| Letter::from_char(c).unwrap();
        let targets: LetterSet = "ABC".chars().map(l).collect();
        let intent = ActionSpec::select([l('A'), l('B')]).unwrap();
        let full = judge_action(targets, &intent, Some(&intent));
        assert_eq!(full.satisfied_variant, Satisfaction::Yes);
        let part = judge_action(targets, &ActionSpec::select([l('A')]).unwrap(), Some(&intent));
        assert_eq!(part.satisfied_variant, Satisfaction::YesIncomplete);
        let guess = judge_action(targets, &ActionSpec::select([l('A'), l('C')]).unwrap(), Some(&intent));
        assert_eq!(guess.label, FeedbackLabel::Negative);
        let lucky = judge_action(targets, &ActionSpec::select([l('C')]).unwrap(), Some(&intent));
        assert_eq!(lucky.label, FeedbackLabel::Negative);
        let free = judge_action(targets, &ActionSpec::select([l('C')]).unwrap(), None);
        assert_eq!(free.satisfied_variant, Satisfaction::Yes);
        let bad = judge_action(targets, &ActionSpec::select([l('D')]).unwrap(), Some(&intent));
        assert_eq!(bad.label, FeedbackLabel::Negative);
        // a requested reset that removes targets is still what was asked for
        let reset = ActionSpec::deselect([l('A'), l('D')]).unwrap();
        assert_eq!(judge_action(targets, &reset, Some(&reset)).label, FeedbackLabel::Positive);
    }

    #[test]
    fn oracle_executes_reset() {
        let w = world();
        let spec = spec(&w, 6);
        let mut st = GameState::new(spec.clone());
        let l = |c| Letter::from_char(c).unwrap();
        st.record_utterance(Utterance::new("x")).unwrap();
        st.apply_action(&ActionSpec::select([l('A'), l('B')]).unwrap()).unwrap();
        let turn = SpeakerTurn {
            utterance: Utterance::new("deselect everything"),
            intent: ActionSpec::deselect([l('A'), l('B')]).unwrap(),
            mentions: vec![],
            feedback: None,
        };
        st.record_utterance(turn.utterance.clone()).unwrap();
        assert_eq!(oracle_listener(&spec, &st, &turn).serialize(), "Deselect A B");
    }

    #[test]
    fn oracle_resolves_unique_and_double_mentions() {
        let w = world();
        let spec = spec(&w, 8);
        let mut st = GameState::new(spec.clone());
        let mut sp = SpeakerAgent::new(SpeakerConfig::noiseless(), spec.clone(), 1);
        let mut saw_double = false;
        while st.status() == Status::Ongoing {
            let turn = sp.speak(&st, st.turns().last().and_then(|t| t.1));
            st.record_utterance(turn.utterance.clone()).unwrap();
            let a = oracle_listener(&spec, &st, &turn);
            assert_eq!(a, turn.intent);
            saw_double |= a.selects().len() == 2;
            st.apply_action(&a).unwrap();
        }
        assert_eq!(st.status(), Status::Success);
        let _ = saw_double;
    }

    #[test]
    fn seed_games_all_succeed_and_are_deterministic() {
        let w = world();
        let cfg = SpeakerConfig::default();
        let a = generate_seed_games(25, &w, &w.dev, &cfg, 1).unwrap();
        let b = generate_seed_games(25, &w, &w.dev, &cfg, 1).unwrap();
        assert_eq!(a.len(), 25);
        assert!(a.iter().all(|g| g.outcome == Status::Success));
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let dev: std::collections::BTreeSet<_> = w.dev.item_ids.iter().collect();
        assert!(a
            .iter()
            .all(|g| g.spec.context.iter().all(|it| dev.contains(&it.id))));
        let turns: usize = a.iter().map(|g| g.turns.len()).sum();
        let targets: usize = a.iter().map(|g| g.spec.targets.len()).sum();
        // the oracle never errs, so turns track targets relayed per turn
        assert!(turns <= targets, "{turns} turns for {targets} targets");
        assert!(turns * 2 >= targets);
    }

    #[test]
    fn adaptation_schedule() {
        let cfg = SpeakerConfig {
            adaptation: Some(Adaptation {
                length_decay: 0.1,
                tryagain_decay: 0.5,
            }),
            ..SpeakerConfig::default()
        };
        let r2 = cfg.for_round(2);
        assert!(r2.attribute_drop_prob > cfg.attribute_drop_prob);
        assert!((r2.tryagain_prob - cfg.tryagain_prob * 0.25).abs() < 1e-12);
        assert_eq!(SpeakerConfig::default().for_round(5), SpeakerConfig::default());
    }
}
