//! A reference-game listener that improves from the implicit feedback in
//! its own past interactions.
//!
//! A scripted speaker describes hidden targets among ten items; the
//! listener selects and deselects letters. After each deployment round the
//! follow-up utterances are decoded into positive, neutral or negative
//! labels, which drive one of three retraining objectives.

pub mod config;
pub mod dataset;
pub mod error;
pub mod feedback;
pub mod game;
pub mod grammar;
pub mod learn;
pub mod lexicon;
pub mod metrics;
pub mod policy;
pub mod rounds;
pub mod seeds;
pub mod speaker;
pub mod world;

pub use error::{Error, Result};
