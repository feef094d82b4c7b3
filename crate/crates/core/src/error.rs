use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("infeasible world config: {0}")]
    InfeasibleWorld(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("split `{name}` has {have} items, need at least {need}")]
    SplitTooSmall {
        name: String,
        have: usize,
        need: usize,
    },
    #[error("action grammar: {0}")]
    Grammar(String),
    #[error("illegal action `{action}`: {reason}")]
    IllegalAction { action: String, reason: String },
    #[error("out of turn: {0}")]
    OutOfTurn(String),
    #[error("game already finished")]
    GameOver,
    #[error("corrupt interaction log {game_id}: {reason}")]
    CorruptLog { game_id: String, reason: String },
    #[error("length mismatch: {left} predictions vs {right} labels")]
    LengthMismatch { left: usize, right: usize },
    #[error("decoder transport failed after {attempts} attempts: {last}")]
    Transport { attempts: usize, last: String },
    #[error("unparseable decoder response: {0:?}")]
    UnparseableResponse(String),
    #[error("training set has no positive examples")]
    EmptyPositiveSet,
    #[error("KTO batch lacks {0} examples; reference point undefined")]
    EmptyClass(&'static str),
    #[error("expected a positively labeled example")]
    NonPositiveExample,
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("no {0} to evaluate")]
    EmptyInput(&'static str),
    #[error("schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
