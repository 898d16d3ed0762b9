mod common;

use common::*;
use rand::Rng;
use taskseq::corpus::{generate_corpus, GeneratorConfig, SequenceExample};
use taskseq::features::History;
use taskseq::learn::{
    most_violated, solve_qp, train, train_multiclass, train_set, CuttingPlaneConstraint, LearnError, QpSolver,
    TrainConfig, TrainingSet,
};
use taskseq::model::{predict_in, ModelKind};
use taskseq::world::{apply_primitive, check_preconditions, Action, Primitive};

fn con(psi: Vec<f64>, l: f64) -> CuttingPlaneConstraint {
    CuttingPlaneConstraint { delta_psi: psi, mean_loss: l }
}

#[test]
fn qp_single_constraint_matches_closed_form() {
    let mut r = rng(21);
    for _ in 0..200 {
        let dim = r.gen_range(1..8);
        let psi: Vec<f64> = (0..dim).map(|_| r.gen_range(-2.0..2.0)).collect();
        let l = r.gen_range(0.0..3.0);
        let c = [0.01, 0.5, 10.0, 1000.0][r.gen_range(0..4)];
        let n2 = dot(&psi, &psi);
        let scale = (l / n2).min(c);
        let xi = l - scale * n2;
        let objective = 0.5 * scale * scale * n2 + c * xi;
        let sol = solve_qp(&[con(psi.clone(), l)], c, 1e-12);
        for (got, p) in sol.w.iter().zip(&psi) {
            assert!((got - scale * p).abs() < 1e-9, "w {got} vs {}", scale * p);
        }
        assert!((sol.xi - xi).abs() < 1e-9 * c.max(1.0));
        assert!((sol.objective - objective).abs() < 1e-9 * objective.max(1.0));
        assert!((sol.alpha[0] - scale).abs() < 1e-9 * c.max(1.0));
    }
}

#[test]
fn qp_is_bracketed_by_projected_gradient() {
    let mut r = rng(22);
    for case in 0..200 {
        let (cons, c) = random_qp(&mut r, 5, false);
        let reference = reference_solve(&cons, c, 20_000);
        let sol = solve_qp(&cons, c, 1e-12);
        let p = primal(&sol.w, &cons, c);
        let scale = p.abs().max(1.0);
        // weak duality: any feasible dual point lower-bounds the optimum
        assert!(p >= reference.dual - 1e-9 * scale, "case {case}: {p} below dual {}", reference.dual);
        assert!(p <= reference.primal + 1e-9 * scale, "case {case}: {p} above reference {}", reference.primal);
        assert!(sol.alpha.iter().all(|a| *a >= 0.0));
        assert!(sol.alpha.iter().sum::<f64>() <= c * (1.0 + 1e-12));
    }
}

#[test]
fn qp_matches_active_set_enumeration() {
    let mut r = rng(25);
    for case in 0..200 {
        let (cons, c) = random_qp(&mut r, 5, case % 2 == 0);
        let exact = reference_kkt(&cons, c);
        let sol = solve_qp(&cons, c, 1e-12);
        assert!((primal(&sol.w, &cons, c) - exact).abs() <= 1e-6, "case {case}: {} vs {exact}", sol.objective);
        assert!((sol.objective - exact).abs() <= 1e-6);
    }
}

#[test]
fn qp_warm_start_equals_cold_solve() {
    let mut r = rng(23);
    for _ in 0..50 {
        let (cons, c) = random_qp(&mut r, 5, false);
        let mut solver = QpSolver::new(c, 1e-12);
        let mut last = None;
        for k in &cons {
            solver.push(k.clone());
            last = Some(solver.solve());
        }
        let warm = last.unwrap();
        let cold = solve_qp(&cons, c, 1e-12);
        assert!((warm.objective - cold.objective).abs() < 1e-8 * cold.objective.max(1.0));
        assert!(warm.objective >= warm.dual_objective - 1e-9);
    }
}

fn small_corpus(n: usize, seed: u64) -> Vec<SequenceExample> {
    generate_corpus(&GeneratorConfig { n_scenarios: n, seed, ..small_config() }).unwrap()
}

#[test]
fn training_converges_with_feasible_duals_and_monotone_objective() {
    let corpus = small_corpus(20, 3);
    let config = TrainConfig::default();
    let (model, report) = train(&corpus, &config).unwrap();
    assert!(report.converged);
    assert!(report.iterations <= config.max_iterations);
    assert!(report.final_violation <= config.epsilon);
    assert!(report.dual_values.iter().all(|a| *a >= 0.0));
    assert!(report.dual_values.iter().sum::<f64>() <= config.c * (1.0 + 1e-12));
    for pair in report.log.windows(2) {
        assert!(pair[1].objective >= pair[0].objective - 1e-6 * pair[0].objective.abs().max(1.0));
    }
    assert_eq!(model.kind, ModelKind::Structured);
    assert_eq!(report.log.len(), report.iterations);

    let set = TrainingSet::new(&corpus, ModelKind::Structured).unwrap();
    assert!(set.accuracy(model.weights.as_slice()) > 0.9);
}

#[test]
fn most_violated_at_zero_counts_max_losses() {
    let corpus = small_corpus(10, 4);
    let set = TrainingSet::new(&corpus, ModelKind::Structured).unwrap();
    let (c, violation) = most_violated(&vec![0.0; D], 0.0, &set);
    let mut total = 0.0;
    let mut steps = 0;
    for ex in &corpus {
        let mut state = ex.initial_state.clone();
        for truth in &ex.steps {
            let exec: Vec<Action> =
                all_actions(&state).into_iter().filter(|a| check_preconditions(&state, a).is_ok()).collect();
            total += exec.iter().map(|a| reference_loss(truth, a)).fold(0.0, f64::max);
            steps += 1;
            state = apply_primitive(&state, truth).unwrap();
        }
    }
    assert_eq!(set.steps.len(), steps);
    assert!((c.mean_loss - total / steps as f64).abs() < 1e-12);
    assert!((violation - c.mean_loss).abs() < 1e-12);
}

#[test]
fn most_violated_recount_under_random_weights() {
    let corpus = small_corpus(8, 5);
    let set = TrainingSet::new(&corpus, ModelKind::Structured).unwrap();
    let mut r = rng(24);
    let w = random_weights(&mut r);
    let xi = 0.3;
    let (c, violation) = most_violated(&w, xi, &set);

    let mut delta = vec![0.0; D];
    let mut total = 0.0;
    let mut n = 0.0;
    for ex in &corpus {
        let mut state = ex.initial_state.clone();
        let mut history = History::default();
        for truth in &ex.steps {
            let exec: Vec<Action> =
                all_actions(&state).into_iter().filter(|a| check_preconditions(&state, a).is_ok()).collect();
            let (_, ties) = brute_force(&w, &state, &ex.task, &history, &exec, Some(truth));
            assert_eq!(ties.len(), 1);
            let y = ties[0];
            let (pt, py) = (reference_phi(&state, &ex.task, truth, &history), reference_phi(&state, &ex.task, &y, &history));
            for i in 0..D {
                delta[i] += pt[i] - py[i];
            }
            total += reference_loss(truth, &y);
            n += 1.0;
            state = apply_primitive(&state, truth).unwrap();
            history = history.push(*truth);
        }
    }
    for (got, want) in c.delta_psi.iter().zip(&delta) {
        assert!((got - want / n).abs() < 1e-12);
    }
    assert!((c.mean_loss - total / n).abs() < 1e-12);
    let expected = total / n - dot(&w, &delta) / n - xi;
    assert!((violation - expected).abs() < 1e-9);
}

#[test]
fn training_report_is_deterministic() {
    let corpus = small_corpus(10, 6);
    let config = TrainConfig { c: 100.0, ..Default::default() };
    let (m1, r1) = train(&corpus, &config).unwrap();
    let (m2, r2) = train(&corpus, &config).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(r1, r2);
    assert_eq!(m1.to_json(), m2.to_json());
}

#[test]
fn multiclass_predicts_bare_primitives() {
    let corpus = small_corpus(10, 7);
    let (model, report) = train_multiclass(&corpus, &TrainConfig::default()).unwrap();
    assert!(report.converged);
    assert_eq!(model.kind, ModelKind::Multiclass);
    let ex = &corpus[0];
    let got = predict_in(&model.weights, &ex.initial_state, &ex.task, &History::default(), model.space());
    assert_eq!((got.action.a1, got.action.a2), (None, None));
}

#[test]
fn multiclass_single_class_corpus() {
    // every step relabelled DONE: a one-class problem
    let mut corpus = small_corpus(5, 8);
    for ex in &mut corpus {
        ex.steps = vec![Action::DONE];
    }
    let (model, report) = train_multiclass(&corpus, &TrainConfig::default()).unwrap();
    assert!(report.converged);
    for ex in &corpus {
        let got = predict_in(&model.weights, &ex.initial_state, &ex.task, &History::default(), model.space());
        assert_eq!(got.action.primitive, Primitive::Done);
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(matches!(train(&[], &TrainConfig::default()), Err(LearnError::EmptyCorpus)));
    let corpus = small_corpus(5, 9);
    for bad in [
        TrainConfig { c: 0.0, ..Default::default() },
        TrainConfig { epsilon: -1.0, ..Default::default() },
        TrainConfig { max_iterations: 0, ..Default::default() },
        TrainConfig { c: f64::NAN, ..Default::default() },
    ] {
        assert!(matches!(train(&corpus, &bad), Err(LearnError::Config(_))));
    }
    let mut broken = corpus.clone();
    let g = broken[0].task.g_a1;
    broken[0].steps.insert(0, Action::binary(Primitive::FollowTrajPour, g, g));
    assert!(matches!(train(&broken, &TrainConfig::default()), Err(LearnError::CorpusIntegrity { step: 0, .. })));
}

#[test]
fn iteration_cap_reports_not_converged() {
    let corpus = small_corpus(10, 10);
    let set = TrainingSet::new(&corpus, ModelKind::Structured).unwrap();
    let (_, report) = train_set(&set, &TrainConfig { max_iterations: 2, ..Default::default() }).unwrap();
    assert!(!report.converged);
    assert_eq!(report.iterations, 2);
}
