//! Deploy, retrospect, retrain: the continual-learning loop.
//!
//! Round 0 deploys the seed policy once and its logs are shared by every
//! arm. Each later round deploys every arm on the same freshly sampled
//! games, with the same speaker randomness per game, then decodes the new
//! logs and retrains. The control arm replays the seed policy in the final
//! round.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DecoderKind, StudyConfig, Variant};
use crate::dataset::{
    attach_feedback, augment_deselection, build_training_set, seed_examples, split_turns,
    write_jsonl, DecodedExample, InteractionLog, LogSource, Objective, LOG_SCHEMA_VERSION,
};
use crate::error::{Error, Result};
use crate::feedback::{
    evaluate_decoder, DecoderMode, ExternalDecoder, FeedbackDecoder, FeedbackLabel, RuleDecoder,
};
use crate::learn::{train_round, TrainOutcome, ValidationSet};
use crate::metrics::{
    click_accuracy, ground_truth_of, language_stats, mean_turns, positive_feedback_rate,
    success_rate, turn_agreement, LanguageStats, SimConfig,
};
use crate::policy::PolicyParams;
use crate::seeds::{derive_seed, fnv1a};
use crate::speaker::{generate_seed_games, simulate_game};
use crate::world::{generate_world, sample_game, GameSpec, World};

pub const INITIAL_ARM: &str = "initial";
pub const CONTROL_ARM: &str = "control";

const TAG_SPECS: u64 = 0x7370656373;
const TAG_SPEAKER: u64 = 0x737063;
const TAG_POLICY: u64 = 0x706f6c;
const TAG_TRAIN: u64 = 0x74726e;
const TAG_SUBSAMPLE: u64 = 0x737562;
const TAG_SEED: u64 = 0x73656564;
const TAG_SEED_VAL: u64 = 0x7376616c;
const TAG_VAL: u64 = 0x76616c;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderSummary {
    pub mode: DecoderMode,
    pub turns: u64,
    pub accuracy: f64,
    pub positive_precision: f64,
    pub false_negative_rate: f64,
    pub counts: [[u64; 3]; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub examples: usize,
    pub positives: usize,
    pub negatives: usize,
    pub neutrals: usize,
    pub validation_exact_match: f64,
    pub restart: usize,
    pub epoch: usize,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub games: usize,
    pub success_rate: f64,
    pub mean_turns: f64,
    pub click_accuracy: f64,
    pub exact_match: f64,
    pub sim_mean: f64,
    pub positive_feedback_rate: f64,
    pub decoder: Option<DecoderSummary>,
    pub language: LanguageStats,
    pub cumulative_interactions: usize,
    /// Retraining that followed this deployment.
    pub training: Option<TrainSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub arms: Vec<ArmReport>,
}

impl RoundReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.arm == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub games: usize,
    pub turns: usize,
    pub augmented: usize,
    pub validation_exact_match: f64,
    pub uniform_exact_match: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub name: String,
    pub seed: SeedSummary,
    pub rounds: Vec<RoundReport>,
}

impl StudyReport {
    /// Success rate of an arm in a round; round 0 reads the shared
    /// initial deployment.
    pub fn success(&self, round: usize, arm: &str) -> Option<f64> {
        let r = self.rounds.iter().find(|r| r.round == round)?;
        let name = if round == 0 { INITIAL_ARM } else { arm };
        r.arm(name).map(|a| a.success_rate)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width text table, one row per round and arm.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "study {}", self.name);
        let s = &self.seed;
        let _ = writeln!(
            out,
            "seed policy: {} games, {} turns + {} augmented, validation exact match {:.1} (uniform {:.1})",
            s.games,
            s.turns,
            s.augmented,
            100.0 * s.validation_exact_match,
            100.0 * s.uniform_exact_match
        );
        let _ = writeln!(
            out,
            "{:<5} {:<8} {:>5} {:>7} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
            "round", "arm", "games", "success", "turns", "click", "exact", "sim", "posfb",
            "d.prec", "d.fnr", "vocab", "reset", "again"
        );
        for r in &self.rounds {
            for a in &r.arms {
                let (prec, fnr) = a
                    .decoder
                    .as_ref()
                    .map(|d| {
                        (
                            format!("{:.1}", 100.0 * d.positive_precision),
                            format!("{:.1}", 100.0 * d.false_negative_rate),
                        )
                    })
                    .unwrap_or(("-".into(), "-".into()));
                let _ = writeln!(
                    out,
                    "{:<5} {:<8} {:>5} {:>7.1} {:>6.2} {:>6.1} {:>6.1} {:>6.3} {:>6.1} {:>6} {:>6} {:>6} {:>6} {:>6}",
                    r.round,
                    a.arm,
                    a.games,
                    100.0 * a.success_rate,
                    a.mean_turns,
                    100.0 * a.click_accuracy,
                    100.0 * a.exact_match,
                    a.sim_mean,
                    100.0 * a.positive_feedback_rate,
                    prec,
                    fnr,
                    a.language.vocab_size,
                    a.language.reset_count,
                    a.language.tryagain_count
                );
            }
        }
        out
    }
}

/// Turns of oracle-played games with the speaker's intended actions.
pub fn oracle_validation(logs: &[InteractionLog]) -> Result<ValidationSet> {
    let mut turns = Vec::new();
    for log in logs {
        let st = log.replay()?;
        for (t, rec) in log.turns.iter().enumerate() {
            if let Some(r) = rec.reference_action {
                turns.push((st.render_context(t)?, r));
            }
        }
    }
    Ok(ValidationSet { turns })
}

pub struct SeedOutcome {
    pub params: PolicyParams,
    pub logs: Vec<InteractionLog>,
    /// Seed turns plus synthesized deselection turns, all positive.
    pub d0: Vec<DecodedExample>,
    pub summary: SeedSummary,
    pub train: TrainOutcome,
}

fn base_params(cfg: &StudyConfig) -> PolicyParams {
    PolicyParams {
        temperature: cfg.policy.temperature,
        max_ops: cfg.policy.max_ops,
        ..PolicyParams::default()
    }
}

/// Train the seed policy on oracle games from the dev split.
pub fn seed_round(cfg: &StudyConfig, world: &World) -> Result<SeedOutcome> {
    let r = &cfg.rounds;
    let master = r.seed;
    let logs = generate_seed_games(
        r.seed_games,
        world,
        &world.dev,
        &cfg.speaker,
        derive_seed(master, &[TAG_SEED]),
    )?;
    let turns = seed_examples(&logs)?;
    let augmented = augment_deselection(&turns, derive_seed(master, &[TAG_SEED, 1]));
    let mut d0 = turns.clone();
    d0.extend(augmented.iter().cloned());
    let val_logs = generate_seed_games(
        r.seed_validation_games.max(1),
        world,
        &world.dev,
        &cfg.speaker,
        derive_seed(master, &[TAG_SEED_VAL]),
    )?;
    let validation = oracle_validation(&val_logs)?;
    let set = build_training_set(&[], &d0, Objective::Fft, master)?;
    let mut tcfg = cfg.train_for(Objective::Fft);
    tcfg.seed = derive_seed(master, &[TAG_TRAIN, TAG_SEED]);
    let zero = base_params(cfg);
    let train = train_round(&zero, &set, &validation, &tcfg, None)?;
    let summary = SeedSummary {
        games: logs.len(),
        turns: turns.len(),
        augmented: augmented.len(),
        validation_exact_match: validation.exact_match(&train.params),
        uniform_exact_match: validation.exact_match(&zero),
    };
    Ok(SeedOutcome {
        params: train.params.clone(),
        logs,
        d0,
        summary,
        train,
    })
}

/// The games of one round, shared by every arm.
pub fn round_specs(cfg: &StudyConfig, world: &World, round: usize) -> Result<Vec<Arc<GameSpec>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rounds.seed, &[TAG_SPECS, round as u64]));
    (0..cfg.rounds.games_per_round)
        .map(|_| sample_game(&world.items, &world.main, &mut rng).map(Arc::new))
        .collect()
}

/// Play every game of a round with one policy.
pub fn deploy(
    cfg: &StudyConfig,
    specs: &[Arc<GameSpec>],
    params: &PolicyParams,
    round: usize,
    arm: &str,
) -> Result<Vec<InteractionLog>> {
    let master = cfg.rounds.seed;
    let speaker = cfg.speaker.for_round(round);
    let mode = cfg.rounds.deploy_mode;
    let arm_tag = fnv1a(arm.as_bytes());
    specs
        .par_iter()
        .enumerate()
        .map(|(g, spec)| {
            let speaker_seed = derive_seed(master, &[TAG_SPEAKER, round as u64, g as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                master,
                &[TAG_POLICY, round as u64, arm_tag, g as u64],
            ));
            let (st, turns) = simulate_game(
                spec.clone(),
                &speaker,
                speaker_seed,
                cfg.rounds.max_listener_turns,
                |st, _| {
                    let x = st.render_context(st.turn_index())?;
                    Ok(params.act(&x, mode, &mut rng))
                },
            )?;
            Ok(InteractionLog {
                schema_version: LOG_SCHEMA_VERSION,
                game_id: format!("r{round}-{arm}-g{g:04}"),
                spec: (**spec).clone(),
                transcript: st.transcript().to_vec(),
                turns,
                outcome: st.status(),
                arm: arm.to_string(),
                round,
                source: LogSource::Sim,
                max_listener_turns: st.max_listener_turns(),
            })
        })
        .collect()
}

fn make_decoder(cfg: &StudyConfig) -> Result<Box<dyn FeedbackDecoder>> {
    Ok(match cfg.decoder.kind {
        DecoderKind::Rule => Box::new(RuleDecoder::new()),
        DecoderKind::External => Box::new(ExternalDecoder::from_config(cfg.decoder.external.clone())?),
    })
}

/// Decode every follow-up in the logs.
pub fn decode_logs(
    logs: &[InteractionLog],
    decoder: &dyn FeedbackDecoder,
    mode: DecoderMode,
) -> Result<Vec<DecodedExample>> {
    let raws: Vec<_> = logs
        .par_iter()
        .map(split_turns)
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    attach_feedback(raws, decoder, mode)
}

fn decoder_summary(decoded: &[DecodedExample], mode: DecoderMode) -> Result<Option<DecoderSummary>> {
    let pairs: Vec<(FeedbackLabel, _)> = decoded
        .iter()
        .filter_map(|d| d.raw.ground_truth.map(|g| (d.label, g)))
        .collect();
    if pairs.is_empty() {
        return Ok(None);
    }
    let preds: Vec<FeedbackLabel> = pairs.iter().map(|p| p.0).collect();
    let truth: Vec<_> = pairs.iter().map(|p| p.1).collect();
    let m = evaluate_decoder(&preds, &truth, mode)?;
    Ok(Some(DecoderSummary {
        mode,
        turns: m.total(),
        accuracy: m.accuracy(),
        positive_precision: m.precision(FeedbackLabel::Positive),
        false_negative_rate: m.false_negative_rate(),
        counts: m.counts,
    }))
}

fn arm_report(
    arm: &str,
    logs: &[InteractionLog],
    decoded: Option<(&[DecodedExample], DecoderMode)>,
    cumulative: usize,
) -> Result<ArmReport> {
    let agreement = turn_agreement(logs, &SimConfig::default())?;
    let truth = ground_truth_of(logs);
    Ok(ArmReport {
        arm: arm.to_string(),
        games: logs.len(),
        success_rate: success_rate(logs)?,
        mean_turns: mean_turns(logs)?,
        click_accuracy: click_accuracy(logs)?,
        exact_match: agreement.exact_match,
        sim_mean: agreement.sim_mean,
        positive_feedback_rate: positive_feedback_rate(&truth)?,
        decoder: match decoded {
            Some((d, mode)) => decoder_summary(d, mode)?,
            None => None,
        },
        language: language_stats(logs),
        cumulative_interactions: cumulative,
        training: None,
    })
}

struct Arm {
    variant: Variant,
    name: String,
    params: PolicyParams,
    history: Vec<Vec<DecodedExample>>,
    interactions: usize,
}

pub struct StudyResult {
    pub report: StudyReport,
    pub seed: PolicyParams,
    pub final_params: Vec<(String, PolicyParams)>,
}

fn persist_round(
    dir: &Path,
    round: usize,
    arm: &str,
    logs: &[InteractionLog],
    examples: Option<&[DecodedExample]>,
    params: &PolicyParams,
) -> Result<()> {
    let d = dir.join(format!("round_{round}")).join(arm);
    std::fs::create_dir_all(&d)?;
    write_jsonl(&d.join("interactions.jsonl"), logs)?;
    if let Some(ex) = examples {
        write_jsonl(&d.join("examples.jsonl"), ex)?;
    }
    params.save(&d.join(format!("policy_round_{round}.ckpt")))?;
    Ok(())
}

fn persist_report(dir: &Path, report: &StudyReport) -> Result<()> {
    std::fs::write(dir.join("report.txt"), report.to_text())?;
    std::fs::write(dir.join("report.json"), report.to_json())?;
    Ok(())
}

/// Run the whole study; when `out` is given, logs, examples, checkpoints
/// and the report are written there as each round completes.
pub fn run_continual(cfg: &StudyConfig, out: Option<&Path>) -> Result<StudyResult> {
    cfg.validate()?;
    let master = cfg.rounds.seed;
    let world = generate_world(&cfg.world)?;
    let decoder = make_decoder(cfg)?;
    let seed = seed_round(cfg, &world)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let f = std::fs::File::create(dir.join("world.jsonl"))?;
        world.write_lines(std::io::BufWriter::new(f))?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
        let d = dir.join("seed");
        std::fs::create_dir_all(&d)?;
        write_jsonl(&d.join("interactions.jsonl"), &seed.logs)?;
        write_jsonl(&d.join("examples.jsonl"), &seed.d0)?;
        seed.params.save(&d.join("policy_seed.ckpt"))?;
    }
    let mut report = StudyReport {
        name: cfg.rounds.name.clone(),
        seed: seed.summary.clone(),
        rounds: Vec::new(),
    };
    let val_logs = generate_seed_games(
        cfg.rounds.validation_games,
        &world,
        &world.main,
        &cfg.speaker,
        derive_seed(master, &[TAG_VAL]),
    )?;
    let validation = oracle_validation(&val_logs)?;

    let mut arms: Vec<Arm> = cfg
        .rounds
        .variants
        .iter()
        .map(|v| Arm {
            variant: *v,
            name: v.to_string(),
            params: seed.params.clone(),
            history: Vec::new(),
            interactions: 0,
        })
        .collect();

    let last = cfg.rounds.rounds;
    for round in 0..=last {
        let specs = round_specs(cfg, &world, round)?;
        // deployment
        let deployments: Vec<(String, Vec<InteractionLog>)> = if round == 0 {
            vec![(INITIAL_ARM.to_string(), deploy(cfg, &specs, &seed.params, 0, INITIAL_ARM)?)]
        } else {
            let mut d: Vec<(String, Vec<InteractionLog>)> = arms
                .iter()
                .map(|a| Ok((a.name.clone(), deploy(cfg, &specs, &a.params, round, &a.name)?)))
                .collect::<Result<_>>()?;
            if round == last && cfg.rounds.control_enabled {
                d.push((CONTROL_ARM.to_string(), deploy(cfg, &specs, &seed.params, round, CONTROL_ARM)?));
            }
            d
        };
        for a in &mut arms {
            a.interactions += specs.len();
        }

        // retrospection: decode this round's logs for each arm
        let modes: Vec<DecoderMode> = {
            let mut m: Vec<DecoderMode> = arms.iter().map(|a| a.variant.mode).collect();
            m.push(DecoderMode::Binary);
            m.dedup();
            m
        };
        let mut round_report = RoundReport {
            round,
            arms: Vec::new(),
        };
        let mut decoded_by_arm: Vec<Vec<DecodedExample>> = Vec::with_capacity(arms.len());
        if round == 0 {
            let logs = &deployments[0].1;
            let mut by_mode: Vec<(DecoderMode, Vec<DecodedExample>)> = Vec::new();
            for m in [DecoderMode::Binary, DecoderMode::Ternary] {
                if modes.contains(&m) || arms.iter().any(|a| a.variant.mode == m) {
                    by_mode.push((m, decode_logs(logs, decoder.as_ref(), m)?));
                }
            }
            let binary = &by_mode
                .iter()
                .find(|(m, _)| *m == DecoderMode::Binary)
                .expect("binary decoding always runs")
                .1;
            round_report.arms.push(arm_report(
                INITIAL_ARM,
                logs,
                Some((binary, DecoderMode::Binary)),
                specs.len(),
            )?);
            for a in &arms {
                let ex = by_mode
                    .iter()
                    .find(|(m, _)| *m == a.variant.mode)
                    .expect("decoded for every arm mode")
                    .1
                    .clone();
                decoded_by_arm.push(ex);
            }
            if let Some(dir) = out {
                persist_round(dir, 0, INITIAL_ARM, logs, Some(binary), &seed.params)?;
            }
        } else {
            for (a, (name, logs)) in arms.iter().zip(&deployments) {
                let ex = decode_logs(logs, decoder.as_ref(), a.variant.mode)?;
                round_report.arms.push(arm_report(
                    name,
                    logs,
                    Some((&ex, a.variant.mode)),
                    a.interactions,
                )?);
                if let Some(dir) = out {
                    persist_round(dir, round, name, logs, Some(&ex), &a.params)?;
                }
                decoded_by_arm.push(ex);
            }
            if let Some((name, logs)) = deployments.get(arms.len()) {
                let ex = decode_logs(logs, decoder.as_ref(), DecoderMode::Binary)?;
                round_report.arms.push(arm_report(
                    name,
                    logs,
                    Some((&ex, DecoderMode::Binary)),
                    specs.len(),
                )?);
                if let Some(dir) = out {
                    persist_round(dir, round, name, logs, Some(&ex), &seed.params)?;
                }
            }
        }

        // retraining, except after the final deployment
        if round < last {
            for (a, ex) in arms.iter_mut().zip(decoded_by_arm) {
                a.history.push(ex);
            }
            let outcomes: Vec<Result<(TrainSummary, Option<PolicyParams>)>> = arms
                .par_iter()
                .map(|a| retrain(cfg, a, &seed, &validation, round))
                .collect();
            for (i, o) in outcomes.into_iter().enumerate() {
                let (summary, params) = o?;
                if let Some(p) = params {
                    arms[i].params = p;
                }
                let name = if round == 0 { INITIAL_ARM } else { arms[i].name.as_str() };
                if round == 0 {
                    // the shared deployment feeds every arm; report the first
                    if i == 0 {
                        if let Some(r) = round_report.arms.iter_mut().find(|r| r.arm == name) {
                            r.training = Some(summary);
                        }
                    }
                } else if let Some(r) = round_report.arms.iter_mut().find(|r| r.arm == name) {
                    r.training = Some(summary);
                }
            }
        }
        report.rounds.push(round_report);
        if let Some(dir) = out {
            persist_report(dir, &report)?;
        }
    }
    Ok(StudyResult {
        report,
        seed: seed.params,
        final_params: arms.into_iter().map(|a| (a.name, a.params)).collect(),
    })
}

fn retrain(
    cfg: &StudyConfig,
    arm: &Arm,
    seed: &SeedOutcome,
    validation: &ValidationSet,
    round: usize,
) -> Result<(TrainSummary, Option<PolicyParams>)> {
    let master = cfg.rounds.seed;
    let objective = arm.variant.objective;
    let arm_tag = fnv1a(arm.name.as_bytes());
    let set = build_training_set(
        &arm.history,
        &seed.d0,
        objective,
        derive_seed(master, &[TAG_SUBSAMPLE, round as u64, arm_tag]),
    )?;
    let mut tcfg = cfg.train_for(objective);
    tcfg.seed = derive_seed(master, &[TAG_TRAIN, round as u64, arm_tag]);
    let result = match objective {
        Objective::Kto => train_round(
            &arm.params,
            &set,
            validation,
            &tcfg,
            Some((&cfg.kto.loss, &arm.params)),
        ),
        _ => train_round(&seed.params, &set, validation, &tcfg, None),
    };
    let mut summary = TrainSummary {
        examples: set.examples.len(),
        positives: set.count(FeedbackLabel::Positive),
        negatives: set.count(FeedbackLabel::Negative),
        neutrals: set.count(FeedbackLabel::Neutral),
        validation_exact_match: 0.0,
        restart: 0,
        epoch: 0,
        diverged: false,
    };
    match result {
        Ok(t) => {
            summary.validation_exact_match = t.validation_exact_match;
            summary.restart = t.restart;
            summary.epoch = t.epoch;
            Ok((summary, Some(t.params)))
        }
        Err(Error::Divergence(_)) => {
            summary.diverged = true;
            summary.validation_exact_match = validation.exact_match(&arm.params);
            Ok((summary, None))
        }
        Err(e) => Err(e),
    }
}

/// Default run directory for a study name.
pub fn run_dir(root: &Path, name: &str) -> PathBuf {
    root.join("runs").join(name)
}
