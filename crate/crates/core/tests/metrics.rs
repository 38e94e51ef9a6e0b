mod common;

use common::{reference_wer, word_distance};
use gasr_core::metrics::{edit_distance, normalize, rtf, wer, word_errors};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_sentence(rng: &mut impl Rng) -> String {
    let words = ["a", "b", "ab", "ba", "abc", "c"];
    let n = rng.gen_range(0..7);
    (0..n).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" ")
}

#[test]
fn wer_agrees_with_a_full_table_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    while refs.len() < 1000 {
        let r = random_sentence(&mut rng);
        if r.is_empty() {
            continue;
        }
        let h = random_sentence(&mut rng);
        assert_eq!(word_errors(&r, &h).0, word_distance(&r, &h), "{r:?} / {h:?}");
        refs.push(r);
        hyps.push(h);
    }
    assert_eq!(wer(&refs, &hyps).unwrap(), reference_wer(&refs, &hyps));
}

#[test]
fn case_and_spacing_do_not_count() {
    assert_eq!(normalize("  Hello   World "), "hello world");
    assert_eq!(word_errors("a b c", "A  b   C"), (0, 3));
}

#[test]
fn mismatched_or_empty_inputs_are_rejected() {
    assert!(wer(&["a"], &["a", "b"]).is_err());
    assert!(wer(&[""], &["a"]).is_err());
    assert!(rtf(0.0, 10).is_err());
    assert!((rtf(0.5, 100).unwrap() - 0.5).abs() < 1e-12);
}

proptest! {
    #[test]
    fn edit_distance_is_a_metric(
        a in proptest::collection::vec(0u8..4, 0..8),
        b in proptest::collection::vec(0u8..4, 0..8),
        c in proptest::collection::vec(0u8..4, 0..8),
    ) {
        let d = |x: &[u8], y: &[u8]| edit_distance(x, y);
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert!(d(&a, &b) <= a.len().max(b.len()));
        prop_assert!(d(&a, &b) >= a.len().abs_diff(b.len()));
    }
}
