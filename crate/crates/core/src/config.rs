//! Study configuration, read from TOML.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::Objective;
use crate::error::{Error, Result};
use crate::feedback::{DecoderMode, ExternalDecoderConfig};
use crate::learn::{KtoConfig, TrainConfig};
use crate::policy::DecodeMode;
use crate::speaker::SpeakerConfig;
use crate::world::WorldConfig;

/// A system variant: feedback decoder mode plus training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Variant {
    pub mode: DecoderMode,
    pub objective: Objective,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::new(DecoderMode::Binary, Objective::Fft),
        Variant::new(DecoderMode::Ternary, Objective::Fft),
        Variant::new(DecoderMode::Binary, Objective::Rl),
        Variant::new(DecoderMode::Ternary, Objective::Rl),
        Variant::new(DecoderMode::Binary, Objective::Kto),
        Variant::new(DecoderMode::Ternary, Objective::Kto),
    ];

    pub const fn new(mode: DecoderMode, objective: Objective) -> Variant {
        Variant { mode, objective }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = match self.mode {
            DecoderMode::Binary => "b",
            DecoderMode::Ternary => "t",
        };
        write!(f, "{m}-{}", self.objective.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        let bad = || Error::InvalidConfig(format!("unknown variant {s:?}; expected e.g. b-fft"));
        let (m, o) = s.trim().split_once('-').ok_or_else(bad)?;
        let mode: DecoderMode = m.parse().map_err(|_| bad())?;
        let objective = match o.to_ascii_lowercase().as_str() {
            "fft" => Objective::Fft,
            "rl" => Objective::Rl,
            "kto" => Objective::Kto,
            _ => return Err(bad()),
        };
        Ok(Variant { mode, objective })
    }
}

impl Serialize for Variant {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoundConfig {
    pub name: String,
    /// Retraining rounds; deployments run for rounds 0 through this value.
    pub rounds: usize,
    pub games_per_round: usize,
    pub variants: Vec<Variant>,
    /// Redeploy the seed policy alongside the arms in the final round.
    pub control_enabled: bool,
    pub seed: u64,
    pub seed_games: usize,
    /// Held-out dev-split oracle games for checking the seed policy.
    pub seed_validation_games: usize,
    /// Main-split oracle games whose turns select checkpoints.
    pub validation_games: usize,
    pub deploy_mode: DecodeMode,
    pub max_listener_turns: usize,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            name: "study".into(),
            rounds: 6,
            games_per_round: 300,
            variants: vec![Variant::new(DecoderMode::Binary, Objective::Fft)],
            control_enabled: true,
            seed: 2024,
            seed_games: 25,
            seed_validation_games: 10,
            validation_games: 40,
            deploy_mode: DecodeMode::Sample,
            max_listener_turns: crate::game::MAX_LISTENER_TURNS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KtoSection {
    #[serde(flatten)]
    pub loss: KtoConfig,
    pub entropy_weight: f64,
}

impl Default for KtoSection {
    fn default() -> Self {
        KtoSection {
            loss: KtoConfig::default(),
            entropy_weight: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Rule,
    External,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderSection {
    pub kind: DecoderKind,
    #[serde(flatten)]
    pub external: ExternalDecoderConfig,
}

impl Default for DecoderSection {
    fn default() -> Self {
        DecoderSection {
            kind: DecoderKind::Rule,
            external: ExternalDecoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicySection {
    pub temperature: f64,
    pub max_ops: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            temperature: 1.0,
            max_ops: crate::grammar::DEFAULT_MAX_OPS,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub world: WorldConfig,
    pub speaker: SpeakerConfig,
    pub train: TrainConfig,
    pub kto: KtoSection,
    pub rounds: RoundConfig,
    pub policy: PolicySection,
    pub decoder: DecoderSection,
}

impl StudyConfig {
    pub fn from_toml(text: &str) -> Result<StudyConfig> {
        let cfg: StudyConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<StudyConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        StudyConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The CI profile: default settings with six rounds of 300 games on
    /// b-fft plus the control arm.
    pub fn fast() -> StudyConfig {
        StudyConfig::default()
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.speaker.validate()?;
        self.train.validate()?;
        let r = &self.rounds;
        if r.rounds == 0 || r.games_per_round == 0 {
            return Err(Error::InvalidConfig("rounds and games_per_round must be ≥ 1".into()));
        }
        if r.variants.is_empty() {
            return Err(Error::InvalidConfig("no variants configured".into()));
        }
        if r.seed_games == 0 || r.validation_games == 0 {
            return Err(Error::InvalidConfig("seed_games and validation_games must be ≥ 1".into()));
        }
        if !(self.policy.temperature > 0.0) || self.policy.max_ops == 0 || self.policy.max_ops > 2 {
            return Err(Error::InvalidConfig(
                "policy temperature must be positive and max_ops 1 or 2".into(),
            ));
        }
        let k = &self.kto.loss;
        if !(k.beta > 0.0 && k.lambda_desired > 0.0 && k.lambda_undesired > 0.0) {
            return Err(Error::InvalidConfig("kto beta and lambdas must be positive".into()));
        }
        Ok(())
    }

    /// Training settings for one objective.
    pub fn train_for(&self, objective: Objective) -> TrainConfig {
        let mut t = self.train.clone();
        t.objective = objective;
        if objective == Objective::Kto {
            t.entropy_weight = self.kto.entropy_weight;
        }
        t
    }
}
