//! The `refgame` command line.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use refgame_core::config::{StudyConfig, Variant};
use refgame_core::dataset::{read_jsonl, write_jsonl, InteractionLog};
use refgame_core::feedback::{DecoderMode, DecoderWindow, ExternalDecoder, FeedbackDecoder, RuleDecoder};
use refgame_core::game::parse_transcript;
use refgame_core::metrics::{
    click_accuracy, ground_truth_of, mean_turns, positive_feedback_rate, success_rate,
    turn_agreement, SimConfig,
};
use refgame_core::policy::PolicyParams;
use refgame_core::rounds::{run_continual, run_dir, seed_round};
use refgame_core::world::{generate_world, World};

use crate::session::{Hub, HubConfig};

#[derive(Debug, Parser)]
#[command(name = "refgame", version, about = "Train and serve a reference-game listener")]
pub struct Cli {
    /// Study configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Use the CI profile's round and game counts.
    #[arg(long, global = true)]
    pub fast: bool,
    /// System variant(s), e.g. b-fft; for serving, the default arm.
    #[arg(long, global = true)]
    pub arm: Vec<String>,
    #[arg(long, global = true)]
    pub rounds: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Serve live sessions on this address instead of running a command.
    #[arg(long, value_name = "ADDR")]
    pub serve: Option<String>,
    /// Policy checkpoint to serve.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Run directory whose world and latest checkpoints are served.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Where finished live games are written.
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the whole continual-learning study.
    Run {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train only the seed policy.
    Seed {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute metrics over a run directory.
    Eval { dir: PathBuf },
    /// Decode feedback for every follow-up in a transcript file.
    Decode {
        #[arg(long, value_enum, default_value_t = ModeArg::Binary)]
        mode: ModeArg,
        #[arg(long = "in")]
        input: PathBuf,
        /// Ask the external completion endpoint instead of the rules.
        #[arg(long)]
        external: bool,
    },
    /// Write every interaction of a run directory to one JSONL file.
    Export {
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Binary,
    Ternary,
}

impl From<ModeArg> for DecoderMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Binary => DecoderMode::Binary,
            ModeArg::Ternary => DecoderMode::Ternary,
        }
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli, &mut std::io::stdout()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

pub fn study_config(cli: &Cli) -> Result<StudyConfig> {
    let mut cfg = match &cli.config {
        Some(p) => StudyConfig::load(p)?,
        None => StudyConfig::default(),
    };
    if cli.fast {
        let fast = StudyConfig::fast();
        cfg.rounds.rounds = fast.rounds.rounds;
        cfg.rounds.games_per_round = fast.rounds.games_per_round;
    }
    if let Some(r) = cli.rounds {
        cfg.rounds.rounds = r;
    }
    if let Some(s) = cli.seed {
        cfg.rounds.seed = s;
    }
    if cli.serve.is_none() && !cli.arm.is_empty() {
        cfg.rounds.variants = cli
            .arm
            .iter()
            .map(|a| a.parse::<Variant>())
            .collect::<refgame_core::Result<_>>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli, out: &mut impl std::io::Write) -> Result<()> {
    if let Some(addr) = &cli.serve {
        let hub = Arc::new(build_hub(cli)?);
        let rt = tokio::runtime::Runtime::new()?;
        return rt.block_on(crate::server::serve(hub, addr)).context("server");
    }
    let Some(cmd) = &cli.command else {
        bail!("nothing to do; give a subcommand or --serve <addr>");
    };
    match cmd {
        Command::Run { out: dir } => {
            let cfg = study_config(cli)?;
            let dir = dir.clone().unwrap_or_else(|| run_dir(Path::new("."), &cfg.rounds.name));
            let res = run_continual(&cfg, Some(&dir))?;
            write!(out, "{}", res.report.to_text())?;
            writeln!(out, "wrote {}", dir.display())?;
        }
        Command::Seed { out: dir } => {
            let cfg = study_config(cli)?;
            let dir = dir.clone().unwrap_or_else(|| run_dir(Path::new("."), &cfg.rounds.name));
            let world = generate_world(&cfg.world)?;
            let seed = seed_round(&cfg, &world)?;
            let d = dir.join("seed");
            fs::create_dir_all(&d)?;
            write_jsonl(&d.join("interactions.jsonl"), &seed.logs)?;
            write_jsonl(&d.join("examples.jsonl"), &seed.d0)?;
            seed.params.save(&d.join("policy_seed.ckpt"))?;
            let s = &seed.summary;
            writeln!(
                out,
                "seed policy: {} games, {} turns + {} augmented, validation exact match {:.1} (uniform {:.1})",
                s.games,
                s.turns,
                s.augmented,
                100.0 * s.validation_exact_match,
                100.0 * s.uniform_exact_match
            )?;
        }
        Command::Eval { dir } => write!(out, "{}", evaluate_run(dir)?)?,
        Command::Decode { mode, input, external } => {
            let text = fs::read_to_string(input).with_context(|| input.display().to_string())?;
            let cfg = study_config(cli)?;
            let decoder: Box<dyn FeedbackDecoder> = if *external {
                Box::new(ExternalDecoder::from_config(cfg.decoder.external.clone())?)
            } else {
                Box::new(RuleDecoder::new())
            };
            for label in decode_transcript(&text, decoder.as_ref(), (*mode).into())? {
                writeln!(out, "{}", label.as_str())?;
            }
        }
        Command::Export { dir, out: path } => {
            let logs = collect_logs(dir)?;
            write_jsonl(path, &logs)?;
            writeln!(out, "exported {} interactions to {}", logs.len(), path.display())?;
        }
    }
    Ok(())
}

/// One window per action that received a follow-up.
pub fn transcript_windows(text: &str) -> Result<Vec<DecoderWindow>> {
    let turns = parse_transcript(text)?;
    let mut windows = Vec::new();
    for t in 0..turns.len().saturating_sub(1) {
        let Some(action) = turns[t].1 else {
            bail!("turn {t} has no action but is followed by another utterance");
        };
        windows.push(DecoderWindow {
            prev_action: t.checked_sub(1).and_then(|p| turns[p].1),
            prev_followup: Some(turns[t].0.clone()),
            action,
            followup: turns[t + 1].0.clone(),
        });
    }
    Ok(windows)
}

pub fn decode_transcript(
    text: &str,
    decoder: &dyn FeedbackDecoder,
    mode: DecoderMode,
) -> Result<Vec<refgame_core::feedback::FeedbackLabel>> {
    Ok(decoder.decode_all(&transcript_windows(text)?, mode)?)
}

fn interaction_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).with_context(|| d.display().to_string())? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "jsonl") && p.file_name() != Some("world.jsonl".as_ref()) && p.file_name() != Some("examples.jsonl".as_ref()) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Every logged interaction under `dir`, each checked by replay.
pub fn collect_logs(dir: &Path) -> Result<Vec<InteractionLog>> {
    let mut logs = Vec::new();
    for f in interaction_files(dir)? {
        let batch: Vec<InteractionLog> = read_jsonl(&f).with_context(|| f.display().to_string())?;
        for log in &batch {
            log.replay()?;
        }
        logs.extend(batch);
    }
    Ok(logs)
}

fn round_of(name: &str) -> Option<usize> {
    name.strip_prefix("round_")?.parse().ok()
}

/// Metrics table over `round_*/<arm>/interactions.jsonl`.
pub fn evaluate_run(dir: &Path) -> Result<String> {
    let mut rows: BTreeMap<(usize, String), Vec<InteractionLog>> = BTreeMap::new();
    for e in fs::read_dir(dir).with_context(|| dir.display().to_string())? {
        let p = e?.path();
        let Some(round) = p.file_name().and_then(|n| round_of(&n.to_string_lossy())) else {
            continue;
        };
        for a in fs::read_dir(&p)? {
            let a = a?.path();
            let f = a.join("interactions.jsonl");
            if f.is_file() {
                let arm = a.file_name().unwrap_or_default().to_string_lossy().into_owned();
                rows.insert((round, arm), read_jsonl(&f)?);
            }
        }
    }
    if rows.is_empty() {
        bail!("no round directories under {}", dir.display());
    }
    let mut s = format!(
        "{:<5} {:<8} {:>5} {:>7} {:>6} {:>6} {:>6} {:>7} {:>6}\n",
        "round", "arm", "games", "success", "turns", "click", "exact", "sim", "posfb"
    );
    for ((round, arm), logs) in &rows {
        let agree = turn_agreement(logs, &SimConfig::default()).ok();
        let truth = ground_truth_of(logs);
        let pf = positive_feedback_rate(&truth).ok();
        let opt = |x: Option<f64>, scale: f64, prec: usize| {
            x.map(|v| format!("{:.*}", prec, scale * v)).unwrap_or_else(|| "-".into())
        };
        s.push_str(&format!(
            "{:<5} {:<8} {:>5} {:>7.1} {:>6.2} {:>6.1} {:>6} {:>7} {:>6}\n",
            round,
            arm,
            logs.len(),
            100.0 * success_rate(logs)?,
            mean_turns(logs)?,
            100.0 * click_accuracy(logs)?,
            opt(agree.map(|a| a.exact_match), 100.0, 1),
            opt(agree.map(|a| a.sim_mean), 1.0, 3),
            opt(pf, 100.0, 1),
        ));
    }
    Ok(s)
}

/// Checkpoint files of the latest round per arm in a run directory, plus
/// the seed policy as `initial`.
pub fn latest_checkpoints(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut best: BTreeMap<String, (usize, PathBuf)> = BTreeMap::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        let Some(round) = p.file_name().and_then(|n| round_of(&n.to_string_lossy())) else {
            continue;
        };
        for a in fs::read_dir(&p)? {
            let a = a?.path();
            let ckpt = a.join(format!("policy_round_{round}.ckpt"));
            let arm = a.file_name().unwrap_or_default().to_string_lossy().into_owned();
            if ckpt.is_file() && best.get(&arm).is_none_or(|(r, _)| *r < round) {
                best.insert(arm, (round, ckpt));
            }
        }
    }
    let mut out: BTreeMap<String, PathBuf> = best.into_iter().map(|(k, (_, p))| (k, p)).collect();
    let seed = dir.join("seed").join("policy_seed.ckpt");
    if seed.is_file() {
        out.insert("initial".into(), seed);
    }
    Ok(out)
}

pub fn build_hub(cli: &Cli) -> Result<Hub> {
    let (cfg, world) = match &cli.run {
        Some(dir) => {
            let cfg = StudyConfig::load(&dir.join("config.toml"))?;
            let f = fs::File::open(dir.join("world.jsonl")).context("world.jsonl")?;
            (cfg, World::read_lines(BufReader::new(f))?)
        }
        None => {
            let cfg = study_config(cli)?;
            let world = generate_world(&cfg.world)?;
            (cfg, world)
        }
    };
    let mut policies: Vec<(String, PolicyParams)> = Vec::new();
    if let Some(dir) = &cli.run {
        for (arm, path) in latest_checkpoints(dir)? {
            policies.push((arm, PolicyParams::load(&path)?));
        }
    }
    if let Some(path) = &cli.checkpoint {
        let arm = cli.arm.first().cloned().unwrap_or_else(|| "default".into());
        policies.push((arm, PolicyParams::load(path)?));
    }
    if policies.is_empty() {
        bail!("serving needs --checkpoint or --run");
    }
    let default_arm = cli
        .arm
        .first()
        .cloned()
        .unwrap_or_else(|| policies[0].0.clone());
    let hub = Hub::new(HubConfig {
        world,
        seed: cli.seed.unwrap_or(cfg.rounds.seed),
        max_listener_turns: cfg.rounds.max_listener_turns,
        decode_mode: cfg.rounds.deploy_mode,
        log_dir: cli.log_dir.clone().or_else(|| cli.run.as_ref().map(|d| d.join("human"))),
        default_arm,
    });
    for (arm, p) in policies {
        hub.add_policy(arm, p);
    }
    Ok(hub)
}
