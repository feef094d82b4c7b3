use proptest::prelude::*;
use refgame_core::config::StudyConfig;
use refgame_core::dataset::DecodedExample;
use refgame_core::feedback::{
    evaluate_decoder, parse_response, render_decoder_prompt, DecoderMode, DecoderWindow,
    FeedbackLabel, RuleDecoder,
};
use refgame_core::game::Utterance;
use refgame_core::grammar::parse;
use refgame_core::rounds::{decode_logs, deploy, round_specs, seed_round};
use refgame_core::speaker::SpeakerConfig;
use refgame_core::world::generate_world;

fn window(prev: &str, action: &str, followup: &str) -> DecoderWindow {
    DecoderWindow {
        prev_action: None,
        prev_followup: Some(Utterance::new(prev)),
        action: parse(action).unwrap(),
        followup: Utterance::new(followup),
    }
}

#[test]
fn documented_examples() {
    let d = RuleDecoder::new();
    let b = DecoderMode::Binary;
    let cases = [
        ("the bird", "yes, pick the house with chimney", FeedbackLabel::Positive),
        ("the bird", "no that is a bird, try again", FeedbackLabel::Negative),
        ("the bird with wings", "horned roof", FeedbackLabel::Positive),
        ("the bird", "no, good try", FeedbackLabel::Negative),
        ("the bird", "the bird", FeedbackLabel::Negative),
    ];
    for (prev, follow, want) in cases {
        assert_eq!(d.decode_rule(&window(prev, "Select A", follow), b), want, "{follow}");
    }
    assert_eq!(
        d.decode_rule(&window("the bird", "Select A", "the bird"), DecoderMode::Ternary),
        FeedbackLabel::Neutral
    );
}

#[test]
fn prompts_differ_by_mode() {
    let w = window("the bird", "Select A", "yes");
    let b = render_decoder_prompt(&w, DecoderMode::Binary);
    let t = render_decoder_prompt(&w, DecoderMode::Ternary);
    assert!(b.contains("Lean towards negative if it sounds neutral."));
    assert!(t.contains("Positive, Neutral or Negative"));
    assert!(b.contains("Listener: Select A\nSpeaker: yes"));
    assert_eq!(parse_response(" negative.", DecoderMode::Binary).unwrap(), FeedbackLabel::Negative);
    assert!(parse_response("maybe", DecoderMode::Binary).is_err());
}

const WORDS: &[&str] = &[
    "the", "one", "bird", "house", "roof", "good", "yes", "no", "not", "deselect", "that", "it",
    "try", "again", "start", "over", "with", "other", "and", "pick", "wing",
];

fn utterance() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS), 1..8).prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn negative_cue_never_flips_to_positive(
        prev in utterance(),
        follow in utterance(),
        cue in prop::sample::select(&["no", "not", "wrong", "undo", "don't"][..]),
    ) {
        let d = RuleDecoder::new();
        for mode in [DecoderMode::Binary, DecoderMode::Ternary] {
            let w = window(&prev, "Select B", &follow);
            let before = d.decode_rule(&w, mode);
            let w2 = window(&prev, "Select B", &format!("{follow} {cue}"));
            let after = d.decode_rule(&w2, mode);
            if before == FeedbackLabel::Negative {
                prop_assert_eq!(after, FeedbackLabel::Negative);
            }
            prop_assert_ne!(after, FeedbackLabel::Positive);
        }
    }

    #[test]
    fn ternary_neutral_is_binary_negative(prev in utterance(), follow in utterance()) {
        let d = RuleDecoder::new();
        let w = window(&prev, "Deselect A select C", &follow);
        let b = d.decode_rule(&w, DecoderMode::Binary);
        let t = d.decode_rule(&w, DecoderMode::Ternary);
        prop_assert_ne!(b, FeedbackLabel::Neutral);
        prop_assert_eq!(t.to_binary(), b);
    }
}

fn deployment_turns(cfg: &StudyConfig, games: usize) -> Vec<DecodedExample> {
    let mut cfg = cfg.clone();
    cfg.rounds.games_per_round = games;
    let world = generate_world(&cfg.world).unwrap();
    let seed = seed_round(&cfg, &world).unwrap();
    let specs = round_specs(&cfg, &world, 0).unwrap();
    let logs = deploy(&cfg, &specs, &seed.params, 0, "initial").unwrap();
    decode_logs(&logs, &RuleDecoder::new(), DecoderMode::Binary).unwrap()
}

fn matrix(ex: &[DecodedExample], mode: DecoderMode) -> refgame_core::feedback::ConfusionMatrix {
    let preds: Vec<_> = ex.iter().map(|e| e.label).collect();
    let truth: Vec<_> = ex.iter().map(|e| e.raw.ground_truth.unwrap()).collect();
    evaluate_decoder(&preds, &truth, mode).unwrap()
}

#[test]
fn calibrated_on_default_speaker() {
    let ex = deployment_turns(&StudyConfig::fast(), 300);
    assert!(ex.len() >= 2000, "{} turns", ex.len());
    let m = matrix(&ex, DecoderMode::Binary);
    assert!(m.precision(FeedbackLabel::Positive) >= 0.9, "{m:?}");
    let fnr = m.false_negative_rate();
    assert!((0.10..=0.20).contains(&fnr), "fnr {fnr}");
}

#[test]
fn exact_without_cue_noise() {
    let mut cfg = StudyConfig::fast();
    cfg.speaker = SpeakerConfig {
        explicit_positive_cue_prob: 1.0,
        negative_cue_prob: 1.0,
        tolerate_wrong_prob: 0.0,
        ..SpeakerConfig::default()
    };
    let ex = deployment_turns(&cfg, 120);
    let m = matrix(&ex, DecoderMode::Binary);
    assert_eq!(m.accuracy(), 1.0, "{m:?}");
}

#[test]
fn evaluation_rejects_length_mismatch() {
    assert!(evaluate_decoder(&[FeedbackLabel::Positive], &[], DecoderMode::Binary).is_err());
}
