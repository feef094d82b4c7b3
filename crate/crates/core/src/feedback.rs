//! Decoding implicit feedback from follow-up utterances.
//!
//! The rule decoder looks only at the two most recent action-utterance
//! pairs. The external decoder renders the same window into a completion
//! prompt and asks a language model for a single-word verdict.

use std::collections::HashSet;
use std::fmt;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::Utterance;
use crate::grammar::ActionSpec;
use crate::lexicon;
use crate::speaker::GroundTruthFeedback;

/// Environment variable naming the completion endpoint of the external decoder.
pub const DECODER_URL_ENV: &str = "REFGAME_DECODER_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackLabel {
    Positive,
    Neutral,
    Negative,
}

impl FeedbackLabel {
    pub const ALL: [FeedbackLabel; 3] = [
        FeedbackLabel::Positive,
        FeedbackLabel::Neutral,
        FeedbackLabel::Negative,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackLabel::Positive => "positive",
            FeedbackLabel::Neutral => "neutral",
            FeedbackLabel::Negative => "negative",
        }
    }

    /// The binary reading of a label: neutral leans negative.
    pub fn to_binary(self) -> FeedbackLabel {
        match self {
            FeedbackLabel::Neutral => FeedbackLabel::Negative,
            l => l,
        }
    }
}

impl fmt::Display for FeedbackLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderMode {
    Binary,
    Ternary,
}

impl std::str::FromStr for DecoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<DecoderMode> {
        match s.to_ascii_lowercase().as_str() {
            "binary" | "b" => Ok(DecoderMode::Binary),
            "ternary" | "t" => Ok(DecoderMode::Ternary),
            _ => Err(Error::InvalidConfig(format!("unknown decoder mode {s:?}"))),
        }
    }
}

/// The last two action-utterance pairs ending at the action being judged.
///
/// `prev_followup` is the utterance the judged action responded to; for a
/// game's first action it is the opening instruction and `prev_action` is
/// absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderWindow {
    pub prev_action: Option<ActionSpec>,
    pub prev_followup: Option<Utterance>,
    pub action: ActionSpec,
    pub followup: Utterance,
}

impl DecoderWindow {
    fn conversation(&self) -> String {
        let mut lines = Vec::new();
        if let Some(a) = &self.prev_action {
            lines.push(format!("Listener: {a}"));
        }
        if let Some(u) = &self.prev_followup {
            lines.push(format!("Speaker: {u}"));
        }
        lines.push(format!("Listener: {}", self.action));
        lines.push(format!("Speaker: {}", self.followup));
        lines.join("\n")
    }
}

pub fn render_decoder_prompt(w: &DecoderWindow, mode: DecoderMode) -> String {
    let (question, lean, answer) = match mode {
        DecoderMode::Binary => (
            "positive or negative",
            " Lean towards negative if it sounds neutral.",
            "Positive, or Negative",
        ),
        DecoderMode::Ternary => ("positive, neutral, or negative", "", "Positive, Neutral or Negative"),
    };
    format!(
        "User: Please carefully read the following conversation and answer: Is the very last \
         utterance from the speaker {question} feedback? Often negative feedback include \
         corrections and keywords like no, not, undo, don't, with generally negative sentiment, \
         while positive feedback often includes good, yes, correct, okay, or simply move on to \
         the next stage.{lean}\n(start of the conversation)\n{}\n(end of the conversation)\n\
         Answer a single word, {answer}.\nAssistant:",
        w.conversation()
    )
}

pub trait FeedbackDecoder: Sync {
    fn decode(&self, w: &DecoderWindow, mode: DecoderMode) -> Result<FeedbackLabel>;

    fn decode_all(&self, windows: &[DecoderWindow], mode: DecoderMode) -> Result<Vec<FeedbackLabel>> {
        windows.iter().map(|w| self.decode(w, mode)).collect()
    }
}

/// Lexicon and move-on rules over the follow-up utterance.
#[derive(Debug, Clone, Default)]
pub struct RuleDecoder {
    /// Known description words; when absent any word outside the fixed
    /// template and cue lexicons counts as description.
    surface: Option<HashSet<String>>,
}

const REPEAT_MARKERS: &[&str] = &["again"];

impl RuleDecoder {
    pub fn new() -> RuleDecoder {
        RuleDecoder::default()
    }

    pub fn with_surface_vocabulary(words: impl IntoIterator<Item = String>) -> RuleDecoder {
        RuleDecoder {
            surface: Some(words.into_iter().collect()),
        }
    }

    fn is_description(&self, token: &str, reserved: &HashSet<&str>) -> bool {
        match &self.surface {
            Some(words) => words.contains(token),
            None => !reserved.contains(token) && !token.chars().all(|c| c.is_ascii_digit()),
        }
    }

    pub fn decode_rule(&self, w: &DecoderWindow, mode: DecoderMode) -> FeedbackLabel {
        let toks = w.followup.tokens();
        let corrective = [
            lexicon::NEGATIVE_CUES,
            lexicon::RESET_PHRASES,
            lexicon::TRY_AGAIN_PHRASES,
            REPEAT_MARKERS,
        ];
        if corrective.iter().any(|lex| lexicon::contains_any(toks, lex)) || lexicon::takes_back_last(toks) {
            return FeedbackLabel::Negative;
        }
        if lexicon::contains_any(toks, lexicon::POSITIVE_CUES) {
            return FeedbackLabel::Positive;
        }
        // a described removal may or may not target the last action
        if lexicon::contains_any(toks, lexicon::CORRECTIVE_VERBS) {
            return FeedbackLabel::Negative;
        }
        let reserved: HashSet<&str> = lexicon::reserved_tokens().into_iter().collect();
        let before: HashSet<&str> = w
            .prev_followup
            .as_ref()
            .map(|u| u.tokens().iter().map(String::as_str).collect())
            .unwrap_or_default();
        let moves_on = toks
            .iter()
            .any(|t| self.is_description(t, &reserved) && !before.contains(t.as_str()));
        if moves_on {
            FeedbackLabel::Positive
        } else {
            match mode {
                DecoderMode::Binary => FeedbackLabel::Negative,
                DecoderMode::Ternary => FeedbackLabel::Neutral,
            }
        }
    }
}

impl FeedbackDecoder for RuleDecoder {
    fn decode(&self, w: &DecoderWindow, mode: DecoderMode) -> Result<FeedbackLabel> {
        Ok(self.decode_rule(w, mode))
    }

    fn decode_all(&self, windows: &[DecoderWindow], mode: DecoderMode) -> Result<Vec<FeedbackLabel>> {
        Ok(windows.par_iter().map(|w| self.decode_rule(w, mode)).collect())
    }
}

/// Parse the first alphabetic word of a completion into a label.
pub fn parse_response(text: &str, mode: DecoderMode) -> Result<FeedbackLabel> {
    let word: String = text
        .trim_start_matches(|c: char| !c.is_alphabetic())
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    let label = match word.as_str() {
        "positive" => FeedbackLabel::Positive,
        "negative" => FeedbackLabel::Negative,
        "neutral" => FeedbackLabel::Neutral,
        _ => return Err(Error::UnparseableResponse(text.to_string())),
    };
    Ok(match mode {
        DecoderMode::Binary => label.to_binary(),
        DecoderMode::Ternary => label,
    })
}

/// One text-completion round trip.
pub trait CompletionTransport: Send + Sync {
    fn complete(&self, prompt: &str, max_tokens: u32) -> std::result::Result<String, String>;
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

/// JSON over HTTP: POST `{prompt, max_tokens, temperature}` and read `{text}`.
pub struct HttpTransport {
    url: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, timeout: Duration) -> HttpTransport {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpTransport {
            url: url.into(),
            agent,
        }
    }
}

impl CompletionTransport for HttpTransport {
    fn complete(&self, prompt: &str, max_tokens: u32) -> std::result::Result<String, String> {
        let req = CompletionRequest {
            prompt,
            max_tokens,
            temperature: 0.0,
        };
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(&req)
            .map_err(|e| e.to_string())?;
        let body: CompletionResponse = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        Ok(body.text)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExternalDecoderConfig {
    pub url: Option<String>,
    pub max_attempts: usize,
    pub backoff_ms: u64,
    pub timeout_ms: u64,
    pub max_concurrency: usize,
    pub max_tokens: u32,
}

impl Default for ExternalDecoderConfig {
    fn default() -> Self {
        ExternalDecoderConfig {
            url: None,
            max_attempts: 3,
            backoff_ms: 200,
            timeout_ms: 30_000,
            max_concurrency: 4,
            max_tokens: 4,
        }
    }
}

pub struct ExternalDecoder {
    transport: Box<dyn CompletionTransport>,
    cfg: ExternalDecoderConfig,
}

impl ExternalDecoder {
    pub fn new(transport: Box<dyn CompletionTransport>, cfg: ExternalDecoderConfig) -> ExternalDecoder {
        ExternalDecoder { transport, cfg }
    }

    /// HTTP decoder from the config URL, or the environment when unset.
    pub fn from_config(cfg: ExternalDecoderConfig) -> Result<ExternalDecoder> {
        let url = cfg
            .url
            .clone()
            .or_else(|| std::env::var(DECODER_URL_ENV).ok())
            .ok_or_else(|| {
                Error::InvalidConfig(format!("no decoder url in config or ${DECODER_URL_ENV}"))
            })?;
        let transport = HttpTransport::new(url, Duration::from_millis(cfg.timeout_ms));
        Ok(ExternalDecoder::new(Box::new(transport), cfg))
    }
}

impl FeedbackDecoder for ExternalDecoder {
    fn decode(&self, w: &DecoderWindow, mode: DecoderMode) -> Result<FeedbackLabel> {
        let prompt = render_decoder_prompt(w, mode);
        let attempts = self.cfg.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms << (attempt - 1)));
            }
            match self.transport.complete(&prompt, self.cfg.max_tokens) {
                Ok(text) => return parse_response(&text, mode),
                Err(e) => last = e,
            }
        }
        Err(Error::Transport { attempts, last })
    }

    fn decode_all(&self, windows: &[DecoderWindow], mode: DecoderMode) -> Result<Vec<FeedbackLabel>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.max_concurrency.max(1))
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        pool.install(|| windows.par_iter().map(|w| self.decode(w, mode)).collect())
    }
}

/// Counts indexed `[truth][prediction]` over positive, neutral, negative.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub mode: DecoderMode,
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn get(&self, truth: FeedbackLabel, pred: FeedbackLabel) -> u64 {
        self.counts[truth.index()][pred.index()]
    }

    pub fn labels(&self) -> &'static [FeedbackLabel] {
        match self.mode {
            DecoderMode::Binary => &[FeedbackLabel::Positive, FeedbackLabel::Negative],
            DecoderMode::Ternary => &FeedbackLabel::ALL,
        }
    }

    pub fn precision(&self, label: FeedbackLabel) -> f64 {
        let col: u64 = FeedbackLabel::ALL.iter().map(|t| self.get(*t, label)).sum();
        ratio(self.get(label, label), col)
    }

    pub fn recall(&self, label: FeedbackLabel) -> f64 {
        let row: u64 = FeedbackLabel::ALL.iter().map(|p| self.get(label, *p)).sum();
        ratio(self.get(label, label), row)
    }

    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..3).map(|i| self.counts[i][i]).sum();
        ratio(diag, self.total())
    }

    /// Share of all predictions that call a positive turn negative.
    pub fn false_negative_rate(&self) -> f64 {
        ratio(
            self.get(FeedbackLabel::Positive, FeedbackLabel::Negative),
            self.total(),
        )
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn evaluate_decoder(
    preds: &[FeedbackLabel],
    truth: &[GroundTruthFeedback],
    mode: DecoderMode,
) -> Result<ConfusionMatrix> {
    if preds.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: truth.len(),
        });
    }
    let mut counts = [[0u64; 3]; 3];
    for (p, t) in preds.iter().zip(truth) {
        let (t, p) = match mode {
            DecoderMode::Binary => {
                let t = match t.label {
                    FeedbackLabel::Neutral => FeedbackLabel::Positive,
                    l => l,
                };
                (t, p.to_binary())
            }
            DecoderMode::Ternary => (t.label, *p),
        };
        counts[t.index()][p.index()] += 1;
    }
    Ok(ConfusionMatrix { mode, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse;
    use crate::speaker::Satisfaction;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn window(prev: Option<&str>, instr: Option<&str>, action: &str, followup: &str) -> DecoderWindow {
        DecoderWindow {
            prev_action: prev.map(|a| parse(a).unwrap()),
            prev_followup: instr.map(Utterance::new),
            action: parse(action).unwrap(),
            followup: Utterance::new(followup),
        }
    }

    fn figure_window() -> DecoderWindow {
        window(
            Some("Deselect F select G"),
            Some("yes, pick the thin person with a triangle head"),
            "Select A",
            "yes, pick the house with chimney",
        )
    }

    #[test]
    fn rule_examples() {
        let d = RuleDecoder::new();
        assert_eq!(d.decode_rule(&figure_window(), DecoderMode::Binary), FeedbackLabel::Positive);
        let w = window(None, Some("bird"), "Select C", "no that is a bird, try again");
        assert_eq!(d.decode_rule(&w, DecoderMode::Binary), FeedbackLabel::Negative);
        let w = window(None, Some("house"), "Select F", "horned roof");
        assert_eq!(d.decode_rule(&w, DecoderMode::Binary), FeedbackLabel::Positive);
        let w = window(None, Some("house"), "Select F", "house");
        assert_eq!(d.decode_rule(&w, DecoderMode::Binary), FeedbackLabel::Negative);
        assert_eq!(d.decode_rule(&w, DecoderMode::Ternary), FeedbackLabel::Neutral);
        let w = window(None, Some("house"), "Select F", "no, good try");
        assert_eq!(d.decode_rule(&w, DecoderMode::Ternary), FeedbackLabel::Negative);
        let w = window(None, Some("house"), "Select F", "good, undo that");
        assert_eq!(d.decode_rule(&w, DecoderMode::Binary), FeedbackLabel::Negative);
        let w = window(None, Some("house"), "Select F", "good, deselect the bird one");
        assert_eq!(d.decode_rule(&w, DecoderMode::Binary), FeedbackLabel::Positive);
        let w = window(None, Some("house"), "Select F", "deselect the bird one");
        assert_eq!(d.decode_rule(&w, DecoderMode::Ternary), FeedbackLabel::Negative);
    }

    #[test]
    fn surface_vocabulary_limits_move_on() {
        let d = RuleDecoder::with_surface_vocabulary(["roof".to_string()]);
        let w = window(None, Some("house"), "Select F", "horned");
        assert_eq!(d.decode_rule(&w, DecoderMode::Binary), FeedbackLabel::Negative);
        let w = window(None, Some("house"), "Select F", "horned roof");
        assert_eq!(d.decode_rule(&w, DecoderMode::Binary), FeedbackLabel::Positive);
    }

    #[test]
    fn prompt_matches_template() {
        let p = render_decoder_prompt(&figure_window(), DecoderMode::Binary);
        assert!(p.contains("speaker positive or negative feedback?"));
        assert!(p.contains("Lean towards negative if it sounds neutral."));
        let block = "(start of the conversation)\nListener: Deselect F select G\nSpeaker: yes, pick the thin person with a triangle head\nListener: Select A\nSpeaker: yes, pick the house with chimney\n(end of the conversation)\n";
        assert!(p.contains(block));
        assert!(p.ends_with("Answer a single word, Positive, or Negative.\nAssistant:"));
        let t = render_decoder_prompt(&figure_window(), DecoderMode::Ternary);
        assert!(t.contains("positive, neutral, or negative feedback?"));
        assert!(t.contains("Positive, Neutral or Negative"));
        assert!(!t.contains("Lean towards"));
        assert!(t.contains("or simply move on to the next stage.\n(start"));
    }

    #[test]
    fn response_parsing() {
        assert_eq!(parse_response("Positive", DecoderMode::Binary).unwrap(), FeedbackLabel::Positive);
        assert_eq!(parse_response(" negative.", DecoderMode::Binary).unwrap(), FeedbackLabel::Negative);
        assert_eq!(parse_response("Neutral", DecoderMode::Binary).unwrap(), FeedbackLabel::Negative);
        assert_eq!(parse_response("neutral!", DecoderMode::Ternary).unwrap(), FeedbackLabel::Neutral);
        assert!(matches!(
            parse_response("maybe", DecoderMode::Binary),
            Err(Error::UnparseableResponse(_))
        ));
    }

    struct Flaky {
        fail_first: usize,
        calls: AtomicUsize,
        reply: &'static str,
    }

    impl CompletionTransport for Flaky {
        fn complete(&self, prompt: &str, _: u32) -> std::result::Result<String, String> {
            assert!(prompt.ends_with("Assistant:"));
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err("connection refused".into())
            } else {
                Ok(self.reply.into())
            }
        }
    }

    fn external(fail_first: usize, reply: &'static str) -> ExternalDecoder {
        ExternalDecoder::new(
            Box::new(Flaky {
                fail_first,
                calls: AtomicUsize::new(0),
                reply,
            }),
            ExternalDecoderConfig {
                backoff_ms: 1,
                ..ExternalDecoderConfig::default()
            },
        )
    }

    #[test]
    fn external_retries_then_parses() {
        let d = external(2, "Positive");
        assert_eq!(d.decode(&figure_window(), DecoderMode::Binary).unwrap(), FeedbackLabel::Positive);
        let d = external(5, "Positive");
        assert!(matches!(
            d.decode(&figure_window(), DecoderMode::Binary),
            Err(Error::Transport { attempts: 3, .. })
        ));
        let d = external(0, "dunno");
        assert!(d.decode(&figure_window(), DecoderMode::Binary).is_err());
        let d = external(0, "negative");
        let out = d.decode_all(&vec![figure_window(); 9], DecoderMode::Binary).unwrap();
        assert_eq!(out, vec![FeedbackLabel::Negative; 9]);
    }

    fn gt(label: FeedbackLabel) -> GroundTruthFeedback {
        GroundTruthFeedback {
            label,
            satisfied_variant: Satisfaction::Yes,
        }
    }

    #[test]
    fn confusion_counts() {
        use FeedbackLabel::*;
        let truth = [gt(Positive), gt(Negative), gt(Neutral), gt(Positive)];
        let preds = [Positive, Negative, Positive, Negative];
        let m = evaluate_decoder(&preds, &truth, DecoderMode::Binary).unwrap();
        assert_eq!(m.get(Positive, Positive), 2);
        assert_eq!(m.get(Positive, Negative), 1);
        assert_eq!(m.precision(Positive), 1.0);
        assert!((m.false_negative_rate() - 0.25).abs() < 1e-12);
        let m = evaluate_decoder(&preds, &truth, DecoderMode::Ternary).unwrap();
        assert_eq!(m.get(Neutral, Positive), 1);
        assert!(evaluate_decoder(&preds[..2], &truth, DecoderMode::Binary).is_err());
        let ident = evaluate_decoder(&[Positive, Negative], &[gt(Positive), gt(Negative)], DecoderMode::Binary)
            .unwrap();
        assert_eq!(ident.accuracy(), 1.0);
        assert_eq!(ident.precision(Positive), 1.0);
    }
}
