use gasr_core::ctc::{best_path_decode, collapse, ctc_loss, ctc_loss_node, logaddexp, CtcPrefixScorer};
use gasr_core::Token;
use gasr_tensor::{finite_difference_check, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_log_softmax(rng: &mut impl Rng, frames: usize, classes: usize) -> Tensor<f64> {
    let mut t = Tensor::from_fn(&[frames, classes], |_| rng.gen_range(-2.0..2.0));
    for r in 0..frames {
        let row = &mut t.data_mut()[r * classes..(r + 1) * classes];
        let lse = row.iter().fold(f64::NEG_INFINITY, |a, &b| logaddexp(a, b));
        row.iter_mut().for_each(|v| *v -= lse);
    }
    t
}

/// Sum over every alignment that collapses to `target`.
fn brute_force_log_prob(le: &Tensor<f64>, target: &[Token]) -> f64 {
    let (frames, classes) = (le.rows(), le.cols());
    let mut total = f64::NEG_INFINITY;
    let mut path = vec![0usize; frames];
    loop {
        if collapse(&path) == target {
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| le.get2(t, k)).sum();
            total = logaddexp(total, lp);
        }
        let mut i = 0;
        loop {
            if i == frames {
                return total;
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn random_feasible_target(rng: &mut impl Rng, frames: usize, classes: usize) -> Vec<Token> {
    loop {
        let n = rng.gen_range(0..=3);
        let target: Vec<Token> = (0..n).map(|_| rng.gen_range(1..classes)).collect();
        if gasr_core::Vocabulary::min_ctc_frames(&target) <= frames {
            return target;
        }
    }
}

#[test]
fn loss_matches_alignment_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let frames = rng.gen_range(1..=6);
        let classes = rng.gen_range(2..=5);
        let le = random_log_softmax(&mut rng, frames, classes);
        let target = random_feasible_target(&mut rng, frames, classes);
        let got = ctc_loss(&le, &target).unwrap().loss;
        let want = -brute_force_log_prob(&le, &target);
        assert!((got - want).abs() < 1e-6, "{target:?}: {got} vs {want}");
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let frames = rng.gen_range(1..=6);
        let classes = rng.gen_range(2..=5);
        let logits = Tensor::<f64>::from_fn(&[frames, classes], |_| rng.gen_range(-2.0..2.0));
        let target = random_feasible_target(&mut rng, frames, classes);
        let mut store = ParamStore::<f64>::new();
        let id = store.add("logits", logits).unwrap();
        let report = finite_difference_check(
            &mut store,
            |g, s| {
                let x = g.param(s, id);
                let lp = g.log_softmax(x)?;
                Ok(ctc_loss_node(g, lp, &target).unwrap())
            },
            1e-5,
            usize::MAX,
            i,
        )
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    assert!(worst <= 1e-3, "max relative error {worst}");
}

#[test]
fn four_frame_two_token_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::<f64>::new();
    let id = store.add("logits", Tensor::from_fn(&[4, 3], |_| rng.gen_range(-1.0..1.0))).unwrap();
    let r = finite_difference_check(
        &mut store,
        |g, s| {
            let x = g.param(s, id);
            let lp = g.log_softmax(x)?;
            Ok(ctc_loss_node(g, lp, &[1, 2]).unwrap())
        },
        1e-4,
        usize::MAX,
        0,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-3);
}

#[test]
fn prefix_scores_complete_to_ctc_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let frames = rng.gen_range(1..=6);
        let classes = rng.gen_range(2..=5);
        let le = random_log_softmax(&mut rng, frames, classes);
        let target = random_feasible_target(&mut rng, frames, classes);
        let scorer = CtcPrefixScorer::new(&le);
        let got = scorer.sequence_score(&target).unwrap();
        let want = -ctc_loss(&le, &target).unwrap().loss;
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }
}

#[test]
fn all_candidate_scores_match_single_extensions() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let le = random_log_softmax(&mut rng, 7, 5);
    let scorer = CtcPrefixScorer::new(&le);
    let (state, _) = scorer.extend(&scorer.init(), 2).unwrap();
    let all = scorer.extension_scores(&state);
    for (k, &v) in all.iter().enumerate().skip(1) {
        let (_, inc) = scorer.extend(&state, k).unwrap();
        assert_eq!(v, inc);
    }
}

#[test]
fn best_path_matches_explicit_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..20 {
        let le = random_log_softmax(&mut rng, 5, 4);
        let mut path = Vec::new();
        for t in 0..5 {
            let row = le.row_slice(t);
            let mut best = 0;
            for k in 1..4 {
                if row[k] > row[best] {
                    best = k;
                }
            }
            path.push(best);
        }
        assert_eq!(best_path_decode(&le), collapse(&path));
    }
}

fn arb_instance() -> impl Strategy<Value = (Tensor<f64>, usize)> {
    (1usize..=4, 2usize..=3, any::<u64>()).prop_map(|(frames, classes, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (random_log_softmax(&mut rng, frames, classes), classes)
    })
}

fn all_targets(classes: usize, max_len: usize) -> Vec<Vec<Token>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for k in 1..classes {
                let mut q: Vec<Token> = p.clone();
                q.push(k);
                next.push(q);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

proptest! {
    #[test]
    fn labelings_form_a_sub_distribution((le, classes) in arb_instance()) {
        let frames = le.rows();
        let mut short = 0.0;
        let mut every = 0.0;
        for target in all_targets(classes, frames) {
            let Ok(out) = ctc_loss(&le, &target) else { continue };
            let p = (-out.loss).exp();
            every += p;
            if target.len() <= 2 {
                short += p;
            }
        }
        prop_assert!(short <= 1.0 + 1e-6);
        prop_assert!((every - 1.0).abs() < 1e-6);
    }

    #[test]
    fn collapse_is_identity_on_clean_sequences(seq in proptest::collection::vec(1usize..6, 0..10)) {
        let mut clean = seq.clone();
        clean.dedup();
        prop_assert_eq!(collapse(&clean), clean.clone());
        prop_assert_eq!(collapse(&collapse(&seq)), collapse(&seq));
    }

    #[test]
    fn prefix_mass_never_increases((le, classes) in arb_instance(), tokens in proptest::collection::vec(1usize..3, 0..5)) {
        let scorer = CtcPrefixScorer::new(&le);
        let mut state = scorer.init();
        for &t in tokens.iter().filter(|&&t| t < classes) {
            let (next, inc) = scorer.extend(&state, t).unwrap();
            prop_assert!(inc <= 1e-12);
            prop_assert!(next.prefix_score() <= state.prefix_score() + 1e-12);
            state = next;
        }
    }
}
