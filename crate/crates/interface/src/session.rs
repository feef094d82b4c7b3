//! Live games between a human speaker and a deployed listener policy.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refgame_core::dataset::{write_jsonl, InteractionLog, LogSource, TurnRecord, LOG_SCHEMA_VERSION};
use refgame_core::game::{GameState, Payload, Status, Utterance};
use refgame_core::grammar::Letter;
use refgame_core::policy::{DecodeMode, PolicyParams};
use refgame_core::seeds::derive_seed;
use refgame_core::world::{SplitName, World};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

pub const VIEW_SCHEMA_VERSION: u32 = 1;

/// Advisory countdowns shown by the console; never enforced here.
pub const SPEAKER_TURN_SECS: u32 = 25;
pub const LISTENER_TURN_SECS: u32 = 45;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionError {
    NotFound(String),
    Closed,
    OutOfTurn { expected: usize, got: usize },
    EmptyUtterance,
    CheckpointMissing(String),
    Internal(String),
}

impl SessionError {
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::NotFound(_) => "session-not-found",
            SessionError::Closed => "session-closed",
            SessionError::OutOfTurn { .. } => "out-of-turn",
            SessionError::EmptyUtterance => "empty-utterance",
            SessionError::CheckpointMissing(_) => "checkpoint-missing",
            SessionError::Internal(_) => "internal",
        }
    }
}

impl std::fmt::Display for SessionError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SessionError::NotFound(id) => write!(f, "no session {id}"),
            SessionError::Closed => write!(f, "the game is over"),
            SessionError::OutOfTurn { expected, got } => {
                write!(f, "utterance for turn {got} but the game is at turn {expected}")
            }
            SessionError::EmptyUtterance => write!(f, "utterance is empty"),
            SessionError::CheckpointMissing(what) => write!(f, "no checkpoint for {what}"),
            SessionError::Internal(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for SessionError {}

impl From<refgame_core::Error> for SessionError {
    fn from(e: refgame_core::Error) -> Self {
        SessionError::Internal(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mark {
    Green,
    Red,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub letter: Letter,
    pub attributes: Vec<String>,
    pub target: bool,
    pub selected: bool,
    /// Green for a selected target, red for a selected non-target.
    pub mark: Option<Mark>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatLine {
    pub role: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timers {
    pub speaker_secs: u32,
    pub listener_secs: u32,
    pub advisory: bool,
}

/// What the speaker sees. Targets are shown; the policy never sees this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub schema_version: u32,
    pub session_id: String,
    pub arm: String,
    pub status: Status,
    pub turn_index: usize,
    pub max_listener_turns: usize,
    pub items: Vec<ItemView>,
    pub chat: Vec<ChatLine>,
    pub timers: Timers,
    /// Where the finished game was written, once it is over.
    pub log_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub action: String,
    pub prob: f64,
    pub view: SessionView,
}

/// Which policy a new session should play against.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PolicyRef {
    pub arm: Option<String>,
    pub checkpoint: Option<PathBuf>,
}

struct Session {
    id: String,
    arm: String,
    params: Arc<PolicyParams>,
    state: GameState,
    turns: Vec<TurnRecord>,
    rng: ChaCha8Rng,
    events: broadcast::Sender<SessionView>,
    log_path: Option<PathBuf>,
}

impl Session {
    fn view(&self) -> SessionView {
        let targets = self.state.target_letters();
        let selected = self.state.selected();
        let items = Letter::all()
            .map(|l| {
                let target = targets.contains(l);
                let sel = selected.contains(l);
                ItemView {
                    letter: l,
                    attributes: self.state.spec().item_at(l).attributes.clone(),
                    target,
                    selected: sel,
                    mark: sel.then_some(if target { Mark::Green } else { Mark::Red }),
                }
            })
            .collect();
        let chat = self
            .state
            .transcript()
            .iter()
            .map(|e| match &e.payload {
                Payload::Speaker(u) => ChatLine {
                    role: "speaker".into(),
                    text: u.text().to_string(),
                },
                Payload::Listener(a) => ChatLine {
                    role: "listener".into(),
                    text: a.serialize(),
                },
            })
            .collect();
        SessionView {
            schema_version: VIEW_SCHEMA_VERSION,
            session_id: self.id.clone(),
            arm: self.arm.clone(),
            status: self.state.status(),
            turn_index: self.state.turn_index(),
            max_listener_turns: self.state.max_listener_turns(),
            items,
            chat,
            timers: Timers {
                speaker_secs: SPEAKER_TURN_SECS,
                listener_secs: LISTENER_TURN_SECS,
                advisory: true,
            },
            log_path: self.log_path.as_ref().map(|p| p.display().to_string()),
        }
    }

    fn log(&self) -> InteractionLog {
        InteractionLog {
            schema_version: LOG_SCHEMA_VERSION,
            game_id: format!("human-{}", self.id),
            spec: (**self.state.spec()).clone(),
            transcript: self.state.transcript().to_vec(),
            turns: self.turns.clone(),
            outcome: self.state.status(),
            arm: self.arm.clone(),
            round: 0,
            source: LogSource::Human,
            max_listener_turns: self.state.max_listener_turns(),
        }
    }
}

pub struct HubConfig {
    pub world: World,
    pub seed: u64,
    pub max_listener_turns: usize,
    pub decode_mode: DecodeMode,
    /// Finished games are written to `<log_dir>/<game_id>.jsonl`.
    pub log_dir: Option<PathBuf>,
    pub default_arm: String,
}

/// All live sessions plus the read-only policies they play against.
pub struct Hub {
    cfg: HubConfig,
    policies: RwLock<HashMap<String, Arc<PolicyParams>>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    counter: AtomicU64,
}

impl Hub {
    pub fn new(cfg: HubConfig) -> Hub {
        Hub {
            cfg,
            policies: RwLock::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
            counter: AtomicU64::new(0),
        }
    }

    pub fn add_policy(&self, arm: impl Into<String>, params: PolicyParams) {
        self.policies
            .write()
            .expect("policy lock")
            .insert(arm.into(), Arc::new(params));
    }

    pub fn arms(&self) -> Vec<String> {
        let mut v: Vec<String> = self.policies.read().expect("policy lock").keys().cloned().collect();
        v.sort();
        v
    }

    fn resolve(&self, r: &PolicyRef) -> Result<(String, Arc<PolicyParams>), SessionError> {
        if let Some(path) = &r.checkpoint {
            let params = PolicyParams::load(path)
                .map_err(|e| SessionError::CheckpointMissing(format!("{}: {e}", path.display())))?;
            let arm = r.arm.clone().unwrap_or_else(|| checkpoint_arm(path));
            return Ok((arm, Arc::new(params)));
        }
        let arm = r.arm.clone().unwrap_or_else(|| self.cfg.default_arm.clone());
        let params = self
            .policies
            .read()
            .expect("policy lock")
            .get(&arm)
            .cloned()
            .ok_or_else(|| SessionError::CheckpointMissing(format!("arm {arm}")))?;
        Ok((arm, params))
    }

    pub fn create(&self, r: &PolicyRef) -> Result<SessionView, SessionError> {
        let (arm, params) = self.resolve(r)?;
        let n = self.counter.fetch_add(1, Ordering::SeqCst);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[n]));
        let id = format!("{:016x}", rng.gen::<u64>());
        let spec = Arc::new(self.cfg.world.sample_game(SplitName::Main, &mut rng)?);
        let (events, _) = broadcast::channel(64);
        let session = Session {
            id: id.clone(),
            arm,
            params,
            state: GameState::with_budget(spec, self.cfg.max_listener_turns),
            turns: Vec::new(),
            rng,
            events,
            log_path: None,
        };
        let view = session.view();
        self.sessions
            .lock()
            .expect("session table")
            .insert(id, Arc::new(Mutex::new(session)));
        Ok(view)
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, SessionError> {
        self.sessions
            .lock()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(id.to_string()))
    }

    pub fn view(&self, id: &str) -> Result<SessionView, SessionError> {
        let s = self.session(id)?;
        let s = s.lock().expect("session");
        Ok(s.view())
    }

    /// Current view plus a receiver for every later update.
    pub fn subscribe(&self, id: &str) -> Result<(SessionView, broadcast::Receiver<SessionView>), SessionError> {
        let s = self.session(id)?;
        let s = s.lock().expect("session");
        Ok((s.view(), s.events.subscribe()))
    }

    /// Record the speaker's utterance and let the policy act on it. `turn`
    /// is the turn index the client believes it is speaking in.
    pub fn speak(&self, id: &str, text: &str, turn: Option<usize>) -> Result<TurnResult, SessionError> {
        let s = self.session(id)?;
        let mut s = s.lock().expect("session");
        if s.state.status().is_terminal() {
            return Err(SessionError::Closed);
        }
        if let Some(got) = turn {
            let expected = s.state.turn_index();
            if got != expected {
                return Err(SessionError::OutOfTurn { expected, got });
            }
        }
        let u = Utterance::new(text);
        if u.is_blank() {
            return Err(SessionError::EmptyUtterance);
        }
        s.state.record_utterance(u)?;
        let x = s.state.render_context(s.state.turn_index())?;
        let params = s.params.clone();
        let mode = self.cfg.decode_mode;
        let (action, prob) = params.act(&x, mode, &mut s.rng);
        s.state.apply_action(&action)?;
        s.turns.push(TurnRecord {
            prob,
            reference_action: None,
            ground_truth: None,
        });
        if s.state.status().is_terminal() {
            if let Some(dir) = &self.cfg.log_dir {
                let log = s.log();
                let path = dir.join(format!("{}.jsonl", log.game_id));
                write_jsonl(&path, &[log])?;
                s.log_path = Some(path);
            }
        }
        let view = s.view();
        let _ = s.events.send(view.clone());
        Ok(TurnResult {
            action: action.serialize(),
            prob,
            view,
        })
    }

    /// The finished game in the standard log schema.
    pub fn interaction_log(&self, id: &str) -> Result<InteractionLog, SessionError> {
        let s = self.session(id)?;
        let s = s.lock().expect("session");
        Ok(s.log())
    }
}

fn checkpoint_arm(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes() {
        assert_eq!(SessionError::Closed.code(), "session-closed");
        assert_eq!(SessionError::OutOfTurn { expected: 1, got: 2 }.code(), "out-of-turn");
        assert_eq!(SessionError::EmptyUtterance.code(), "empty-utterance");
        assert_eq!(SessionError::CheckpointMissing("x".into()).code(), "checkpoint-missing");
    }

    #[test]
    fn arm_from_checkpoint_name() {
        assert_eq!(checkpoint_arm(Path::new("/a/policy_round_3.ckpt")), "policy_round_3");
    }
}
