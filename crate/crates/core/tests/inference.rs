mod common;

use common::*;
use proptest::prelude::*;
use taskseq::features::{assemble, History, LAYOUT};
use taskseq::model::{loss_augmented_argmax, predict, predict_in, score, top_k, CandidateSpace, WeightVector};
use taskseq::world::{check_preconditions, Action, Primitive};

#[test]
fn assembled_features_match_reference() {
    let mut r = rng(11);
    let cfg = small_config();
    for _ in 0..40 {
        let (state, task, history) = random_situation(&mut r, &cfg);
        for a in all_actions(&state).iter().step_by(7) {
            let got = assemble(&state, &task, a, &history);
            assert_eq!(got.values, reference_phi(&state, &task, a, &history), "{a} under {task}");
        }
    }
}

#[test]
fn predict_matches_enumeration() {
    let mut r = rng(12);
    let cfg = small_config();
    for _ in 0..150 {
        let (state, task, history) = random_situation(&mut r, &cfg);
        let w = random_weights(&mut r);
        let wv = WeightVector::new(w.clone()).unwrap();
        let (best, ties) = brute_force(&w, &state, &task, &history, &all_actions(&state), None);
        let got = predict(&wv, &state, &task, &history);
        assert!(ties.contains(&got.action), "{} not among {:?}", got.action, ties);
        assert!((got.score - best).abs() < 1e-9 * best.abs().max(1.0));
    }
}

#[test]
fn loss_augmented_matches_enumeration() {
    let mut r = rng(13);
    let cfg = small_config();
    for _ in 0..150 {
        let (state, task, history) = random_situation(&mut r, &cfg);
        let w: Vec<f64> = random_weights(&mut r).iter().map(|x| x * 0.2).collect();
        let wv = WeightVector::new(w.clone()).unwrap();
        let actions = all_actions(&state);
        let truth = actions[(actions.len() * 7919 / 10007) % actions.len()];
        let (best, ties) = brute_force(&w, &state, &task, &history, &actions, Some(&truth));
        let got = loss_augmented_argmax(&wv, &state, &task, &history, &truth);
        assert!(ties.contains(&got.action));
        let augmented = got.score + reference_loss(&truth, &got.action);
        assert!((augmented - best).abs() < 1e-9 * best.abs().max(1.0));
    }
}

#[test]
fn executable_space_matches_filtered_enumeration() {
    let mut r = rng(14);
    let cfg = small_config();
    for _ in 0..100 {
        let (state, task, history) = random_situation(&mut r, &cfg);
        let w = random_weights(&mut r);
        let wv = WeightVector::new(w.clone()).unwrap();
        let exec: Vec<Action> =
            all_actions(&state).into_iter().filter(|a| check_preconditions(&state, a).is_ok()).collect();
        let (_, ties) = brute_force(&w, &state, &task, &history, &exec, None);
        let got = predict_in(&wv, &state, &task, &history, CandidateSpace::Executable);
        assert!(ties.contains(&got.action));
        assert!(check_preconditions(&state, &got.action).is_ok());
    }
}

#[test]
fn top_k_is_the_sorted_enumeration_prefix() {
    let mut r = rng(15);
    let cfg = small_config();
    for _ in 0..30 {
        let (state, task, history) = random_situation(&mut r, &cfg);
        let w = random_weights(&mut r);
        let wv = WeightVector::new(w.clone()).unwrap();
        let mut all: Vec<f64> =
            all_actions(&state).iter().map(|a| dot(&w, &reference_phi(&state, &task, a, &history))).collect();
        all.sort_by(|a, b| b.total_cmp(a));
        let top = top_k(&wv, &state, &task, &history, 5);
        assert_eq!(top.len(), 5);
        for (got, want) in top.iter().zip(&all) {
            assert!((got.score - want).abs() < 1e-9 * want.abs().max(1.0));
            assert!((score(&wv, &state, &task, &got.action, &history) - got.score).abs() < 1e-9 * want.abs().max(1.0));
        }
    }
}

#[test]
fn done_without_history_touches_only_pt() {
    let mut r = rng(16);
    let (state, task, _) = random_situation(&mut r, &small_config());
    let phi = assemble(&state, &task, &Action::DONE, &History::default());
    for b in LAYOUT {
        let nz = phi.block(b).iter().filter(|v| **v != 0.0).count();
        assert_eq!(nz, if b.name == "pt" { 1 } else { 0 }, "block {}", b.name);
    }
}

#[test]
fn grasp_then_hold_then_pour_indexes() {
    let mut r = rng(17);
    let (state, _, _) = random_situation(&mut r, &small_config());
    let ids: Vec<_> = state.ids().collect();
    let task = taskseq::world::TaskSpec::new(taskseq::world::Task::Pour, ids[0], None).unwrap();
    let (a, b) = (ids[1], ids[2]);
    let h = History::default().push(Action::unary(Primitive::Grasp, a)).push(Action::binary(Primitive::HoldAbove, a, b));
    let pour = Action::binary(Primitive::FollowTrajPour, a, b);
    let phi = assemble(&state, &task, &pour, &h);
    let t = 2;
    let (g, ha, p) = (1, 4, 6);
    assert_eq!(phi.values[237 + t * 64 + g * 8 + p], 1.0);
    assert_eq!(phi.values[557 + t * 64 + ha * 8 + p], 1.0);
    // pour(A,B) after hold_above(A,B): a1 = prev1.a1 and a2 = prev1.a2
    assert_eq!(&phi.values[877 + p * 8..877 + p * 8 + 4], &[1.0, 0.0, 0.0, 1.0]);
    // and a1 = prev2.a1
    assert_eq!(&phi.values[877 + p * 8 + 4..877 + p * 8 + 8], &[1.0, 0.0, 0.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feature_ranges_and_sparsity(seed in 0u64..10_000, pick in 0usize..10_000) {
        let mut r = rng(seed);
        let (state, task, history) = random_situation(&mut r, &small_config());
        let actions = all_actions(&state);
        let a = actions[pick % actions.len()];
        let phi = assemble(&state, &task, &a, &history);
        prop_assert_eq!(phi.values.len(), 941);
        prop_assert!(phi.values.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(phi.nonzeros() <= 4 + 3 + 1 + 8 + 2 * 14 + 2 * 14 + 2 + 2 + 8);
        if a.a2.is_none() {
            for b in LAYOUT.iter().filter(|b| matches!(b.name, "ae2" | "aet2" | "pae2")) {
                prop_assert!(phi.block(*b).iter().all(|v| *v == 0.0));
            }
        }
        if a.a1.is_none() {
            for b in LAYOUT.iter().filter(|b| matches!(b.name, "ae1" | "aet1" | "pae1" | "paae")) {
                prop_assert!(phi.block(*b).iter().all(|v| *v == 0.0));
            }
        }
        let pae = phi.block(LAYOUT[5]).iter().chain(phi.block(LAYOUT[6])).filter(|v| **v != 0.0).count();
        prop_assert!(pae <= 2);
        prop_assert_eq!(assemble(&state, &task, &a, &history), phi);
    }
}
