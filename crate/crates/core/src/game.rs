//! Turn alternation, selection state, timeout and success detection.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::grammar::{ActionSpec, Letter, LetterSet};
use crate::lexicon::tokenize;
use crate::policy::PolicyContext;
use crate::world::GameSpec;

/// Listener turns per game; twice that many alternating half-turns.
pub const MAX_LISTENER_TURNS: usize = 10;

/// A free-form speaker message with its derived token list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    text: String,
    tokens: Vec<String>,
}

impl Utterance {
    pub fn new(text: impl Into<String>) -> Utterance {
        let text = text.into();
        let tokens = tokenize(&text);
        Utterance { text, tokens }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_blank(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl fmt::Display for Utterance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl Serialize for Utterance {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for Utterance {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(Utterance::new(String::deserialize(d)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Speaker,
    Listener,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", content = "payload", rename_all = "lowercase")]
pub enum Payload {
    Speaker(Utterance),
    Listener(ActionSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnEvent {
    #[serde(flatten)]
    pub payload: Payload,
    pub state_after: LetterSet,
}

impl TurnEvent {
    pub fn role(&self) -> Role {
        match self.payload {
            Payload::Speaker(_) => Role::Speaker,
            Payload::Listener(_) => Role::Listener,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ongoing,
    Success,
    Timeout,
}

impl Status {
    pub fn is_terminal(self) -> bool {
        self != Status::Ongoing
    }
}

#[derive(Debug, Clone)]
pub struct GameState {
    spec: Arc<GameSpec>,
    targets: LetterSet,
    selected: LetterSet,
    turn_index: usize,
    transcript: Vec<TurnEvent>,
    status: Status,
    max_listener_turns: usize,
}

impl GameState {
    pub fn new(spec: Arc<GameSpec>) -> GameState {
        GameState::with_budget(spec, MAX_LISTENER_TURNS)
    }

    pub fn with_budget(spec: Arc<GameSpec>, max_listener_turns: usize) -> GameState {
        let targets = spec.target_letters();
        GameState {
            spec,
            targets,
            selected: LetterSet::EMPTY,
            turn_index: 0,
            transcript: Vec::new(),
            status: Status::Ongoing,
            max_listener_turns: max_listener_turns.max(1),
        }
    }

    pub fn spec(&self) -> &Arc<GameSpec> {
        &self.spec
    }

    pub fn selected(&self) -> LetterSet {
        self.selected
    }

    pub fn turn_index(&self) -> usize {
        self.turn_index
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn transcript(&self) -> &[TurnEvent] {
        &self.transcript
    }

    pub fn max_listener_turns(&self) -> usize {
        self.max_listener_turns
    }

    pub fn target_letters(&self) -> LetterSet {
        self.targets
    }

    pub fn awaiting_listener(&self) -> bool {
        self.status == Status::Ongoing
            && self
                .transcript
                .last()
                .is_some_and(|e| e.role() == Role::Speaker)
    }

    pub fn record_utterance(&mut self, u: Utterance) -> Result<()> {
        if self.status.is_terminal() {
            return Err(Error::GameOver);
        }
        if self.awaiting_listener() {
            return Err(Error::OutOfTurn("listener has not acted yet".into()));
        }
        self.transcript.push(TurnEvent {
            payload: Payload::Speaker(u),
            state_after: self.selected,
        });
        Ok(())
    }

    pub fn apply_action(&mut self, a: &ActionSpec) -> Result<()> {
        if self.status.is_terminal() {
            return Err(Error::GameOver);
        }
        if !self.awaiting_listener() {
            return Err(Error::OutOfTurn("speaker has not spoken yet".into()));
        }
        if let Some(l) = a.selects().intersection(self.selected).iter().next() {
            return Err(Error::IllegalAction {
                action: a.serialize(),
                reason: format!("{l} is already selected"),
            });
        }
        if let Some(l) = a.deselects().difference(self.selected).iter().next() {
            return Err(Error::IllegalAction {
                action: a.serialize(),
                reason: format!("{l} is not selected"),
            });
        }
        self.selected = self.selected.union(a.selects()).difference(a.deselects());
        self.turn_index += 1;
        self.transcript.push(TurnEvent {
            payload: Payload::Listener(*a),
            state_after: self.selected,
        });
        self.status = if self.selected == self.targets {
            Status::Success
        } else if self.turn_index >= self.max_listener_turns {
            Status::Timeout
        } else {
            Status::Ongoing
        };
        Ok(())
    }

    /// Speaker utterances and listener actions, paired per listener turn.
    pub fn turns(&self) -> Vec<(&Utterance, Option<&ActionSpec>)> {
        let mut out: Vec<(&Utterance, Option<&ActionSpec>)> = Vec::new();
        for e in &self.transcript {
            match &e.payload {
                Payload::Speaker(u) => out.push((u, None)),
                Payload::Listener(a) => {
                    if let Some(last) = out.last_mut() {
                        last.1 = Some(a);
                    }
                }
            }
        }
        out
    }

    /// The listener's view just before its action at turn `upto_turn`.
    pub fn render_context(&self, upto_turn: usize) -> Result<PolicyContext> {
        if upto_turn > self.turn_index {
            return Err(Error::OutOfTurn(format!(
                "turn {upto_turn} is beyond turn index {}",
                self.turn_index
            )));
        }
        let turns = self.turns();
        let history: Vec<(Utterance, ActionSpec)> = turns[..upto_turn]
            .iter()
            .map(|(u, a)| ((*u).clone(), *a.expect("completed turn has an action")))
            .collect();
        let current = turns.get(upto_turn).map(|(u, _)| (*u).clone());
        Ok(PolicyContext::new(
            self.letter_items(),
            history,
            current,
        ))
    }

    pub fn letter_items(&self) -> Vec<Vec<String>> {
        Letter::all()
            .map(|l| self.spec.item_at(l).attributes.clone())
            .collect()
    }

    /// Full canonical transcript of the game so far.
    pub fn transcript_text(&self) -> String {
        let turns = self.turns();
        let complete = turns.iter().filter(|(_, a)| a.is_some()).count();
        self.render_context(complete)
            .map(|c| c.transcript())
            .unwrap_or_default()
    }

    /// Rebuild a game by folding its transcript, checking every snapshot.
    pub fn replay(
        spec: Arc<GameSpec>,
        transcript: &[TurnEvent],
        max_listener_turns: usize,
    ) -> Result<GameState> {
        let mut st = GameState::with_budget(spec, max_listener_turns);
        for (i, e) in transcript.iter().enumerate() {
            match &e.payload {
                Payload::Speaker(u) => st.record_utterance(u.clone())?,
                Payload::Listener(a) => st.apply_action(a)?,
            }
            if st.selected != e.state_after {
                return Err(Error::CorruptLog {
                    game_id: String::new(),
                    reason: format!("state mismatch at event {i}"),
                });
            }
        }
        Ok(st)
    }
}

pub fn state_line(selected: LetterSet) -> String {
    if selected.is_empty() {
        "none is selected".to_string()
    } else {
        format!("{} currently selected", selected.spaced())
    }
}

/// Parse a canonical transcript back into (utterance, action) turns. The
/// final turn's action may be absent.
pub fn parse_transcript(text: &str) -> Result<Vec<(Utterance, Option<ActionSpec>)>> {
    let mut out: Vec<(Utterance, Option<ActionSpec>)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if let Some(rest) = line.strip_prefix("User: ") {
            out.push((Utterance::new(rest), None));
        } else if let Some(rest) = line.strip_prefix("Assistant: ") {
            let action = crate::grammar::parse(rest)?;
            match out.last_mut() {
                Some(last) if last.1.is_none() => last.1 = Some(action),
                _ => {
                    return Err(Error::Schema(format!(
                        "line {}: action without a preceding utterance",
                        n + 1
                    )))
                }
            }
        } else if line.starts_with("System: ") || line.is_empty() {
            continue;
        } else {
            return Err(Error::Schema(format!("line {}: unrecognized {line:?}", n + 1)));
        }
    }
    Ok(out)
}
