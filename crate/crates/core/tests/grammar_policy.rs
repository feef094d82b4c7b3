mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refgame_core::game::GameState;
use refgame_core::grammar::{legal_actions, parse, ActionSpec, Letter, LetterSet};
use refgame_core::policy::{DecodeMode, PolicyParams};
use refgame_core::world::{generate_world, SplitName, WorldConfig};

fn canonical_shape(s: &str) -> bool {
    // [Deselect L+] [Select|select L+], letters strictly ascending
    fn letters<'a>(w: &[&'a str]) -> usize {
        let n = w.iter().take_while(|t| t.len() == 1 && ("A"..="J").contains(*t)).count();
        if w[..n].windows(2).all(|p| p[0] < p[1]) { n } else { 0 }
    }
    let w: Vec<&str> = s.split(' ').collect();
    let mut i = 0;
    if w.first() == Some(&"Deselect") {
        let n = letters(&w[1..]);
        if n == 0 {
            return false;
        }
        i = 1 + n;
    }
    if i < w.len() {
        let verb = if i == 0 { "Select" } else { "select" };
        if w[i] != verb {
            return false;
        }
        let n = letters(&w[i + 1..]);
        if n == 0 {
            return false;
        }
        i += 1 + n;
    }
    i == w.len() && i > 0
}

#[test]
fn exhaustive_round_trip_up_to_two_ops() {
    let mut count = 0;
    for bits in 0..1u32 << 10 {
        let sel = LetterSet::from_bits(bits as u16);
        for a in legal_actions(sel, 2) {
            let s = a.serialize();
            assert!(canonical_shape(&s), "{s}");
            assert_eq!(parse(&s).unwrap(), a);
            assert_eq!(parse(&s.to_lowercase()).unwrap(), a);
            assert!(a.is_legal_for(sel));
            count += 1;
        }
    }
    assert!(count > 0);
}

#[test]
fn random_round_trip_up_to_ten_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let a = random_action(&mut rng, 10);
        let s = a.serialize();
        assert!(canonical_shape(&s), "{s}");
        assert_eq!(parse(&s).unwrap(), a);
    }
}

#[test]
fn illegal_strings_rejected() {
    for s in ["Deselect select", "Select K", "Select A deselect A", "", "A B", "select"] {
        assert!(parse(s).is_err(), "{s:?}");
    }
    assert_eq!(parse("Select C A").unwrap().serialize(), "Select A C");
    assert_eq!(parse("select F deselect E").unwrap().serialize(), "Deselect E select F");
    assert_eq!(parse("Select A A").unwrap().serialize(), "Select A");
    for bad in ["Select C A", "select A", "Deselect A Select B", "Select A  B", "Deselect", "Select A deselect B"] {
        assert!(!canonical_shape(bad), "{bad}");
    }
}

#[test]
fn legal_action_counts() {
    assert_eq!(legal_actions(LetterSet::EMPTY, 1).len(), 10);
    let mut a = LetterSet::EMPTY;
    a.insert(Letter::new(0).unwrap());
    assert_eq!(legal_actions(a, 1).len(), 10);
    assert_eq!(legal_actions(a, 2).len(), 55);
    // every letter admits exactly one legal op, so 10 + C(10,2)
    for bits in [0u16, 1, 0b1010101, 0x3ff] {
        let v = legal_actions(LetterSet::from_bits(bits), 2);
        assert_eq!(v.len(), 55);
        let uniq: std::collections::HashSet<_> = v.iter().collect();
        assert_eq!(uniq.len(), v.len());
    }
}

#[test]
fn legal_actions_apply_in_real_games() {
    let w = generate_world(&WorldConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let spec = std::sync::Arc::new(w.sample_game(SplitName::Main, &mut rng).unwrap());
    let mut st = GameState::new(spec);
    st.record_utterance(refgame_core::game::Utterance::new("pick it")).unwrap();
    for a in legal_actions(st.selected(), 2) {
        let mut s = st.clone();
        s.apply_action(&a).unwrap();
        assert_eq!(s.turn_index(), st.turn_index() + 1);
    }
}

proptest! {
    #[test]
    fn parse_is_inverse_of_serialize(sel in 0u16..1024, des in 0u16..1024) {
        let sel = LetterSet::from_bits(sel);
        let des = LetterSet::from_bits(des).difference(sel);
        if let Ok(a) = ActionSpec::new(sel, des) {
            prop_assert_eq!(parse(&a.serialize()).unwrap(), a);
        } else {
            prop_assert!(sel.is_empty() && des.is_empty());
        }
    }

    #[test]
    fn distribution_is_normalized_and_equivariant(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_context(&mut rng, 3);
        let ids = active_features(&x, 2);
        let params = random_params(&mut rng, &ids, 2.0);
        let dist = params.action_distribution(&x);
        let total: f64 = dist.iter().map(|(_, p)| p).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert_eq!(dist.len(), legal_actions(x.selected, 2).len());
        let perm = random_permutation(&mut rng);
        let y = x.relabel(&perm);
        for (a, p) in &dist {
            let q = params.prob_of(&y, &a.relabel(&perm)).unwrap();
            prop_assert!((p - q).abs() < 1e-9, "{} {} {}", a, p, q);
        }
    }

    #[test]
    fn boosting_a_feature_raises_its_top_action(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_context(&mut rng, 2);
        let ids = active_features(&x, 2);
        let params = random_params(&mut rng, &ids, 1.0);
        let cands = legal_actions(x.selected, 2);
        let phis: Vec<_> = cands
            .iter()
            .map(|a| refgame_core::policy::featurize(&x, a).unwrap())
            .collect();
        for id in ids.iter().take(8) {
            // scores are length-normalized
            let v: Vec<f64> = phis
                .iter()
                .zip(&cands)
                .map(|(f, a)| f.get(id).copied().unwrap_or(0.0) / a.op_count() as f64)
                .collect();
            let max = v.iter().cloned().fold(f64::MIN, f64::max);
            let min = v.iter().cloned().fold(f64::MAX, f64::min);
            if max - min < 1e-9 {
                continue;
            }
            let top = v.iter().position(|x| *x == max).unwrap();
            let mut boosted = params.clone();
            *boosted.weights.get_mut(id).unwrap() += 0.5;
            let before = params.prob_of(&x, &cands[top]).unwrap();
            let after = boosted.prob_of(&x, &cands[top]).unwrap();
            prop_assert!(after > before);
        }
    }
}

#[test]
fn argmax_and_sample_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_context(&mut rng, 2);
    let ids = active_features(&x, 2);
    let params = random_params(&mut rng, &ids, 1.0);
    let best = params
        .action_distribution(&x)
        .into_iter()
        .fold(None::<(ActionSpec, f64)>, |b, c| match b {
            Some(b) if b.1 >= c.1 => Some(b),
            _ => Some(c),
        })
        .unwrap();
    let (a, p) = params.act(&x, DecodeMode::Argmax, &mut rng);
    assert_eq!(a, best.0);
    assert_eq!(p, best.1);
    let mut r1 = ChaCha8Rng::seed_from_u64(5);
    let mut r2 = ChaCha8Rng::seed_from_u64(5);
    assert_eq!(
        params.act(&x, DecodeMode::Sample, &mut r1),
        params.act(&x, DecodeMode::Sample, &mut r2)
    );
    let zero = PolicyParams::default();
    let d = zero.action_distribution(&x);
    assert!(d.iter().all(|(_, p)| (p - d[0].1).abs() < 1e-12));
}
