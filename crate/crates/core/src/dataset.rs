//! Interaction logs and the training examples cut from them.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::{DecoderMode, DecoderWindow, FeedbackDecoder, FeedbackLabel};
use crate::game::{GameState, Status, TurnEvent, Utterance};
use crate::grammar::{ActionSpec, Letter};
use crate::policy::PolicyContext;
use crate::seeds::derive_seed;
use crate::speaker::GroundTruthFeedback;
use crate::world::GameSpec;

pub const LOG_SCHEMA_VERSION: u32 = 1;

/// Seed turns per synthesized deselection turn.
pub const AUGMENT_RATIO: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogSource {
    Sim,
    Human,
}

/// What was recorded alongside each listener action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    /// Probability of the action when it was chosen.
    pub prob: f64,
    /// The action the speaker wanted, when known.
    pub reference_action: Option<ActionSpec>,
    /// Privileged satisfaction label, for evaluation only.
    pub ground_truth: Option<GroundTruthFeedback>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionLog {
    pub schema_version: u32,
    pub game_id: String,
    pub spec: GameSpec,
    pub transcript: Vec<TurnEvent>,
    /// One record per listener turn.
    pub turns: Vec<TurnRecord>,
    pub outcome: Status,
    pub arm: String,
    pub round: usize,
    pub source: LogSource,
    pub max_listener_turns: usize,
}

impl InteractionLog {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptLog {
            game_id: self.game_id.clone(),
            reason: reason.into(),
        }
    }

    /// Replay the transcript and check every recorded field against it.
    pub fn replay(&self) -> Result<GameState> {
        if self.schema_version != LOG_SCHEMA_VERSION {
            return Err(self.corrupt(format!("schema version {}", self.schema_version)));
        }
        self.spec.validate().map_err(|e| self.corrupt(e.to_string()))?;
        let st = GameState::replay(
            Arc::new(self.spec.clone()),
            &self.transcript,
            self.max_listener_turns,
        )
        .map_err(|e| self.corrupt(e.to_string()))?;
        if st.status() != self.outcome {
            return Err(self.corrupt(format!(
                "outcome {:?} but replay ends {:?}",
                self.outcome,
                st.status()
            )));
        }
        if st.turn_index() != self.turns.len() {
            return Err(self.corrupt(format!(
                "{} turn records for {} listener turns",
                self.turns.len(),
                st.turn_index()
            )));
        }
        if let Some(r) = self.turns.iter().find(|r| !(r.prob > 0.0 && r.prob <= 1.0)) {
            return Err(self.corrupt(format!("probability {} outside (0,1]", r.prob)));
        }
        Ok(st)
    }

    pub fn listener_turns(&self) -> usize {
        self.turns.len()
    }
}

/// Where an example came from: a listener turn of a logged game, or a
/// synthesized deselection turn derived from one.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub game_id: String,
    pub arm: String,
    pub round: usize,
    pub turn: usize,
    pub synthetic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTurnExample {
    pub provenance: Provenance,
    pub context: PolicyContext,
    pub action: ActionSpec,
    pub prob: f64,
    /// Absent only for synthesized turns, which carry no follow-up.
    pub window: Option<DecoderWindow>,
    pub ground_truth: Option<GroundTruthFeedback>,
    pub reference_action: Option<ActionSpec>,
}

impl RawTurnExample {
    /// Re-render the context from the source log and compare.
    pub fn verify_against(&self, log: &InteractionLog) -> Result<()> {
        let p = &self.provenance;
        if p.synthetic {
            return Ok(());
        }
        if p.game_id != log.game_id {
            return Err(log.corrupt(format!("example from {}", p.game_id)));
        }
        let st = log.replay()?;
        let ctx = st.render_context(p.turn)?;
        if ctx.transcript() != self.context.transcript() || ctx != self.context {
            return Err(log.corrupt(format!("context of turn {} differs", p.turn)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedExample {
    pub raw: RawTurnExample,
    pub label: FeedbackLabel,
}

fn provenance(log: &InteractionLog, turn: usize) -> Provenance {
    Provenance {
        game_id: log.game_id.clone(),
        arm: log.arm.clone(),
        round: log.round,
        turn,
        synthetic: false,
    }
}

/// One example per listener turn that received a follow-up, so every turn
/// but the last.
pub fn split_turns(log: &InteractionLog) -> Result<Vec<RawTurnExample>> {
    let st = log.replay()?;
    let turns = st.turns();
    let acted: Vec<(&Utterance, &ActionSpec)> = turns
        .iter()
        .filter_map(|(u, a)| a.map(|a| (*u, a)))
        .collect();
    let mut out = Vec::with_capacity(acted.len().saturating_sub(1));
    for t in 0..acted.len().saturating_sub(1) {
        let (instruction, action) = acted[t];
        let window = DecoderWindow {
            prev_action: t.checked_sub(1).map(|p| *acted[p].1),
            prev_followup: Some(instruction.clone()),
            action: *action,
            followup: acted[t + 1].0.clone(),
        };
        let rec = &log.turns[t];
        out.push(RawTurnExample {
            provenance: provenance(log, t),
            context: st.render_context(t)?,
            action: *action,
            prob: rec.prob,
            window: Some(window),
            ground_truth: rec.ground_truth,
            reference_action: rec.reference_action,
        });
    }
    Ok(out)
}

pub fn attach_feedback(
    raws: Vec<RawTurnExample>,
    decoder: &dyn FeedbackDecoder,
    mode: DecoderMode,
) -> Result<Vec<DecodedExample>> {
    let (decodable, synthetic): (Vec<_>, Vec<_>) = raws.into_iter().partition(|r| r.window.is_some());
    if !synthetic.is_empty() {
        return Err(Error::Schema("synthesized turns have no follow-up to decode".into()));
    }
    let windows: Vec<DecoderWindow> = decodable
        .iter()
        .map(|r| r.window.clone().expect("partitioned"))
        .collect();
    let labels = decoder.decode_all(&windows, mode)?;
    Ok(decodable
        .into_iter()
        .zip(labels)
        .map(|(raw, label)| DecodedExample { raw, label })
        .collect())
}

/// Every turn of the seed games, labeled positive. Seed games are played by
/// an oracle listener, so the final turn needs no follow-up to be trusted.
pub fn seed_examples(logs: &[InteractionLog]) -> Result<Vec<DecodedExample>> {
    let mut out = Vec::new();
    for log in logs {
        let st = log.replay()?;
        let acted: Vec<ActionSpec> = st.turns().iter().filter_map(|(_, a)| a.copied()).collect();
        for (t, action) in acted.into_iter().enumerate() {
            let rec = &log.turns[t];
            out.push(DecodedExample {
                raw: RawTurnExample {
                    provenance: provenance(log, t),
                    context: st.render_context(t)?,
                    action,
                    prob: rec.prob,
                    window: None,
                    ground_truth: rec.ground_truth,
                    reference_action: rec.reference_action,
                },
                label: FeedbackLabel::Positive,
            });
        }
    }
    Ok(out)
}

const UNDO_REQUESTS: &[&str] = &[
    "wrong, undo what you selected",
    "no, deselect that",
    "not that one, undo it",
    "wrong one, remove it",
];

/// Synthesize ⌈N/12⌉ turns in which a wrong selection is followed by a
/// request to undo it and the listener deselects exactly that item.
pub fn augment_deselection(seed: &[DecodedExample], rng_seed: u64) -> Vec<DecodedExample> {
    if seed.is_empty() {
        return Vec::new();
    }
    let count = seed.len().div_ceil(AUGMENT_RATIO);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rng_seed, &[0x6175676d]));
    let mut out = Vec::with_capacity(count);
    let mut order: Vec<usize> = (0..seed.len()).collect();
    order.shuffle(&mut rng);
    for (k, &i) in order.iter().cycle().take(count).enumerate() {
        let src = &seed[i].raw;
        let Some(instruction) = src.context.current_utterance.clone() else {
            continue;
        };
        let want = src.reference_action.unwrap_or(src.action).selects();
        let wrong: Vec<Letter> = src
            .context
            .selected
            .complement()
            .difference(want)
            .iter()
            .collect();
        let Some(&w) = wrong.choose(&mut rng) else {
            continue;
        };
        let mistake = ActionSpec::select([w]).expect("one letter");
        let mut history = src.context.history.clone();
        history.push((instruction, mistake));
        let request = UNDO_REQUESTS[k % UNDO_REQUESTS.len()];
        let context = PolicyContext::new(
            src.context.letter_items.clone(),
            history,
            Some(Utterance::new(request)),
        );
        let action = ActionSpec::deselect([w]).expect("one letter");
        out.push(DecodedExample {
            raw: RawTurnExample {
                provenance: Provenance {
                    synthetic: true,
                    ..src.provenance.clone()
                },
                context,
                action,
                prob: 1.0,
                window: None,
                ground_truth: None,
                reference_action: Some(action),
            },
            label: FeedbackLabel::Positive,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Fft,
    Rl,
    Kto,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Fft => "fft",
            Objective::Rl => "rl",
            Objective::Kto => "kto",
        }
    }
}

/// Most negatives allowed alongside `pos` positives: 5:4, rounded up.
pub fn negative_cap(pos: usize) -> usize {
    (4 * pos).div_ceil(5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub objective: Objective,
    pub examples: Vec<DecodedExample>,
}

impl TrainingSet {
    pub fn count(&self, label: FeedbackLabel) -> usize {
        self.examples.iter().filter(|e| e.label == label).count()
    }
}

/// Union of all rounds plus the seed set, filtered for the objective.
pub fn build_training_set(
    rounds: &[Vec<DecodedExample>],
    d0: &[DecodedExample],
    objective: Objective,
    seed: u64,
) -> Result<TrainingSet> {
    let all: Vec<&DecodedExample> = d0.iter().chain(rounds.iter().flatten()).collect();
    let pos = all.iter().filter(|e| e.label == FeedbackLabel::Positive).count();
    if pos == 0 {
        return Err(Error::EmptyPositiveSet);
    }
    let keep_label = |l: FeedbackLabel| match objective {
        Objective::Fft => l == FeedbackLabel::Positive,
        Objective::Rl => true,
        Objective::Kto => l != FeedbackLabel::Neutral,
    };
    let mut kept: Vec<&DecodedExample> = all.into_iter().filter(|e| keep_label(e.label)).collect();
    let neg: Vec<usize> = kept
        .iter()
        .enumerate()
        .filter(|(_, e)| e.label == FeedbackLabel::Negative)
        .map(|(i, _)| i)
        .collect();
    let cap = negative_cap(pos);
    if neg.len() > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x35, 0x34]));
        let mut drop = neg.clone();
        drop.shuffle(&mut rng);
        let mut dropped = vec![false; kept.len()];
        for i in &drop[cap..] {
            dropped[*i] = true;
        }
        kept = kept
            .into_iter()
            .enumerate()
            .filter(|(i, _)| !dropped[*i])
            .map(|(_, e)| e)
            .collect();
    }
    Ok(TrainingSet {
        objective,
        examples: kept.into_iter().cloned().collect(),
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}
