mod common;

use lva_core::action::{
    normalize_answer, parse_action, structural_validity, truncate_at_stop, ActionKind,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{oracle_valid, random_pieces, render};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn validity_agrees_with_shape_oracle(seed in any::<u64>()) {
        let pieces = random_pieces(&mut ChaCha8Rng::seed_from_u64(seed));
        let text = render(&pieces);
        prop_assert_eq!(structural_validity(&text).valid, oracle_valid(&pieces), "{:?}", text);
    }

    #[test]
    fn valid_turns_parse(seed in any::<u64>()) {
        let pieces = random_pieces(&mut ChaCha8Rng::seed_from_u64(seed));
        let text = render(&pieces);
        if structural_validity(&text).valid {
            let a = parse_action(&text);
            prop_assert!(a.is_some(), "{:?}", text);
            let a = a.unwrap();
            prop_assert!(text.get(a.raw_span.clone()).is_some());
        }
    }

    #[test]
    fn normalize_is_idempotent(s in "\\PC{0,40}") {
        let once = normalize_answer(&s);
        let twice = normalize_answer(&once.text);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn truncation_is_a_prefix(s in "[a-z<>/_ ]{0,60}") {
        let t = truncate_at_stop(&s, "<eos>");
        prop_assert!(s.starts_with(t));
        prop_assert_eq!(truncate_at_stop(t, "<eos>"), t);
    }
}

/// The literal normalization recipe, written out independently.
fn reference_normalize(raw: &str) -> String {
    let punct = |c: char| c.is_whitespace() || c.is_ascii_punctuation();
    raw.trim_matches(punct)
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[test]
fn normalize_matches_reference_on_ascii() {
    for raw in [
        "  A3: A Bus Stop. ",
        "a0",
        "\"The Left  Side\"!",
        "...?",
        "",
        "Multiple\n\nlines\there",
        "(a2) maybe",
    ] {
        assert_eq!(normalize_answer(raw).text, reference_normalize(raw), "{raw:?}");
    }
}

#[test]
fn labels() {
    assert_eq!(normalize_answer("A3: a bus stop").label.as_deref(), Some("a3"));
    assert_eq!(normalize_answer("a4").label.as_deref(), Some("a4"));
    assert_eq!(normalize_answer("a35").label, None);
    assert_eq!(normalize_answer("apple").label, None);
}

#[test]
fn first_wellformed_element_wins() {
    let a = parse_action("<answer>a1</answer><answer>a2</answer>").unwrap();
    assert_eq!(a.kind, ActionKind::Answer);
    assert_eq!(a.payload, "a1");
    assert!(!structural_validity("<answer>a1</answer><answer>a2</answer>").valid);
}
