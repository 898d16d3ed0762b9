#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskseq::corpus::{generate_environment, GeneratorConfig};
use taskseq::features::History;
use taskseq::learn::CuttingPlaneConstraint;
use taskseq::world::{
    aabb_overlap_topview, apply_primitive, check_preconditions, distance_to, executable_actions, in_collision,
    object_beneath, Action, ObjectId, Primitive, Task, TaskSpec, WorldError, WorldState,
};

pub const D: usize = 941;

/// Feature vector written out from the block definitions, without the library's helpers.
pub fn reference_phi(state: &WorldState, task: &TaskSpec, action: &Action, history: &History) -> Vec<f64> {
    let mut phi = vec![0.0; D];
    let b = |x: bool| if x { 1.0 } else { 0.0 };
    let held = |id: ObjectId| state.robot.gripper == Some(id);
    let nd = |id: ObjectId| distance_to(state, id).unwrap().min(10.0) / 10.0;
    let norm = |id: ObjectId| -> Vec<f64> {
        let a = &state.objects[&id].attributes;
        let raw = [
            a.height / 2.0,
            a.max_wl / 2.0,
            a.min_wl / 2.0,
            a.volume / 0.2,
            a.min_over_max,
            a.median_over_max,
            b(a.cylinder_shape),
            b(a.box_shape),
            b(a.liquid),
            b(a.container),
            b(a.handle),
            b(a.movable),
            b(a.large_horizontal_surface),
            b(a.multiple_large_horizontal_surface),
        ];
        raw.iter().map(|v| v.clamp(0.0, 1.0)).collect()
    };
    let ti = task.task as usize;
    let pi = action.primitive as usize;

    if let Some(a1) = action.a1 {
        phi[0] = b(held(a1));
        phi[1] = nd(a1);
        if let Some(a2) = action.a2 {
            phi[2] = b(in_collision(state, a1, a2).unwrap());
        }
    }
    if let Some(a2) = action.a2 {
        phi[3] = b(held(a2));
        phi[4] = nd(a2);
    }
    phi[5 + ti * 8 + pi] = 1.0;

    let identity = |phi: &mut Vec<f64>, base: usize, a: ObjectId| {
        phi[base] = b(a == task.g_a1);
        phi[base + 1] = b(Some(a) == task.g_a2);
        phi[base + 2] = b(aabb_overlap_topview(state, a, task.g_a1).unwrap());
        phi[base + 3] = task.g_a2.map_or(0.0, |g| b(aabb_overlap_topview(state, a, g).unwrap()));
    };
    if let Some(a1) = action.a1 {
        identity(&mut phi, 45, a1);
        if let Some(below) = object_beneath(state, a1).unwrap() {
            let off = if held(a1) { 45 + 4 } else { 45 + 4 + 14 };
            for (k, v) in norm(below).into_iter().enumerate() {
                phi[off + k] = v;
            }
        }
        for (k, v) in norm(a1).into_iter().enumerate() {
            phi[45 + 32 + k * 5 + ti] = v;
        }
    }
    if let Some(a2) = action.a2 {
        identity(&mut phi, 147, a2);
        for (k, v) in norm(a2).into_iter().enumerate() {
            phi[147 + 4 + k * 5 + ti] = v;
        }
    }
    if let Some(a1) = action.a1 {
        phi[221 + pi] = b(held(a1));
    }
    if let Some(a2) = action.a2 {
        phi[229 + pi] = b(held(a2));
    }
    if let Some(p2) = history.prev2 {
        phi[237 + ti * 64 + p2.primitive as usize * 8 + pi] = 1.0;
    }
    if let Some(p1) = history.prev1 {
        phi[557 + ti * 64 + p1.primitive as usize * 8 + pi] = 1.0;
    }
    let same = |x: Option<ObjectId>, y: Option<ObjectId>| x.is_some() && x == y;
    for (h, prev) in [history.prev1, history.prev2].into_iter().enumerate() {
        if let Some(prev) = prev {
            let bits = [
                same(action.a1, prev.a1),
                same(action.a1, prev.a2),
                same(action.a2, prev.a1),
                same(action.a2, prev.a2),
            ];
            for (k, bit) in bits.into_iter().enumerate() {
                phi[877 + pi * 8 + 4 * h + k] = b(bit);
            }
        }
    }
    phi
}

pub fn dot(w: &[f64], v: &[f64]) -> f64 {
    w.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn reference_loss(t: &Action, c: &Action) -> f64 {
    (t.primitive != c.primitive) as u8 as f64 + (t.a1 != c.a1) as u8 as f64 + (t.a2 != c.a2) as u8 as f64
}

/// Every well-formed action, enumerated from scratch: primitive order, then a1, then a2.
pub fn all_actions(state: &WorldState) -> Vec<Action> {
    let ids: Vec<ObjectId> = state.objects.keys().copied().collect();
    let mut out = Vec::new();
    for p in Primitive::ALL {
        let slots: Vec<Option<ObjectId>> = std::iter::once(None).chain(ids.iter().copied().map(Some)).collect();
        for &a1 in &slots {
            for &a2 in &slots {
                let a = Action { primitive: p, a1, a2 };
                if a.is_well_formed() {
                    out.push(a);
                }
            }
        }
    }
    out
}

/// Argmax by full enumeration; returns every action within `tol` of the best.
pub fn brute_force(
    w: &[f64],
    state: &WorldState,
    task: &TaskSpec,
    history: &History,
    candidates: &[Action],
    truth: Option<&Action>,
) -> (f64, Vec<Action>) {
    let scored: Vec<(Action, f64)> = candidates
        .iter()
        .map(|a| {
            let s = dot(w, &reference_phi(state, task, a, history)) + truth.map_or(0.0, |t| reference_loss(t, a));
            (*a, s)
        })
        .collect();
    let best = scored.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-9 * best.abs().max(1.0);
    (best, scored.into_iter().filter(|x| x.1 >= best - tol).map(|x| x.0).collect())
}

pub fn small_config() -> GeneratorConfig {
    GeneratorConfig { objects_per_environment: (15, 17), ..Default::default() }
}

/// A reachable state: a generated environment after a random executable walk.
pub fn random_situation(rng: &mut ChaCha8Rng, config: &GeneratorConfig) -> (WorldState, TaskSpec, History) {
    let env = generate_environment(config, rng.gen_range(0..config.n_environments)).unwrap();
    let mut state = env;
    let mut history = History::default();
    for _ in 0..rng.gen_range(0..8) {
        let options: Vec<Action> = executable_actions(&state).into_iter().filter(|a| *a != Action::DONE).collect();
        let Some(a) = options.choose(rng) else { break };
        state = apply_primitive(&state, a).unwrap();
        history = history.push(*a);
    }
    let ids: Vec<ObjectId> = state.objects.keys().copied().collect();
    let task = *Task::ALL.choose(rng).unwrap();
    let g1 = *ids.choose(rng).unwrap();
    let others: Vec<ObjectId> = ids.iter().copied().filter(|&i| i != g1).collect();
    let g2 = if task.takes_second_argument() { others.choose(rng).copied() } else { None };
    (state, TaskSpec::new(task, g1, g2).unwrap(), history)
}

pub fn liquids(state: &WorldState) -> BTreeSet<ObjectId> {
    state.objects.values().filter(|o| o.is_liquid()).map(|o| o.id).collect()
}

pub fn contained(state: &WorldState) -> Vec<ObjectId> {
    let mut all: Vec<ObjectId> = state.objects.values().flat_map(|o| o.contained_liquid.iter().copied()).collect();
    all.sort();
    all
}

/// Random walk mixing executable and arbitrary well-formed actions, checking every transition.
pub fn fuzz_walk(seed: u64, steps: usize) -> (usize, usize) {
    let mut r = rng(seed);
    let cfg = small_config();
    let mut state = generate_environment(&cfg, r.gen_range(0..cfg.n_environments)).unwrap();
    state.check_invariants().unwrap();
    let liquid_ids = liquids(&state);
    let (mut applied, mut rejected) = (0, 0);
    for _ in 0..steps {
        let action = if r.gen_bool(0.6) {
            *executable_actions(&state).choose(&mut r).unwrap()
        } else {
            *all_actions(&state).choose(&mut r).unwrap()
        };
        let before = state.clone();
        match apply_primitive(&state, &action) {
            Ok(next) => {
                assert!(check_preconditions(&before, &action).is_ok());
                next.check_invariants().unwrap_or_else(|e| panic!("{action} broke invariants: {e}"));
                assert_eq!(liquids(&next), liquid_ids);
                assert_eq!(contained(&next), liquid_ids.iter().copied().collect::<Vec<_>>());
                let expected = before.step_index + (action != Action::DONE) as u32;
                assert_eq!(next.step_index, expected);
                if action == Action::DONE {
                    assert_eq!(next, before);
                }
                state = next;
                applied += 1;
            }
            Err(WorldError::Rejected { action: a, reason }) => {
                assert_eq!(a, action);
                assert_eq!(check_preconditions(&before, &action), Err(reason));
                assert_eq!(state, before);
                rejected += 1;
            }
            Err(e) => panic!("unexpected error {e}"),
        }
    }
    (applied, rejected)
}

pub fn random_weights(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..D).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// QP references.

pub fn primal(w: &[f64], cons: &[CuttingPlaneConstraint], c: f64) -> f64 {
    let xi = cons.iter().map(|k| k.mean_loss - dot(w, &k.delta_psi)).fold(0.0, f64::max);
    0.5 * dot(w, w) + c * xi
}

/// Euclidean projection onto `{α ≥ 0, Σα ≤ c}`.
pub fn project_capped_simplex(v: &[f64], c: f64) -> Vec<f64> {
    let clipped: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
    if clipped.iter().sum::<f64>() <= c {
        return clipped;
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, x) in u.iter().enumerate() {
        cum += x;
        let t = (cum - c) / (j + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

pub struct Reference {
    pub primal: f64,
    pub dual: f64,
}

/// Accelerated projected gradient on the dual, with the primal recovered from `w = Σα ψ`.
pub fn reference_solve(cons: &[CuttingPlaneConstraint], c: f64, iterations: usize) -> Reference {
    let m = cons.len();
    let gram: Vec<Vec<f64>> =
        cons.iter().map(|a| cons.iter().map(|b| dot(&a.delta_psi, &b.delta_psi)).collect()).collect();
    let l: Vec<f64> = cons.iter().map(|k| k.mean_loss).collect();
    let lip = (0..m).map(|i| gram[i][i]).sum::<f64>().max(1e-12);
    let grad = |a: &[f64]| -> Vec<f64> { (0..m).map(|i| l[i] - dot(&gram[i], a)).collect() };
    let dual_of = |a: &[f64]| dot(&l, a) - 0.5 * (0..m).map(|i| a[i] * dot(&gram[i], a)).sum::<f64>();
    let w_of = |a: &[f64]| -> Vec<f64> {
        let mut w = vec![0.0; cons[0].delta_psi.len()];
        for (k, ai) in cons.iter().zip(a) {
            for (wj, pj) in w.iter_mut().zip(&k.delta_psi) {
                *wj += ai * pj;
            }
        }
        w
    };
    let mut x = vec![0.0; m];
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..iterations {
        let g = grad(&y);
        let step: Vec<f64> = (0..m).map(|i| y[i] + g[i] / lip).collect();
        let next = project_capped_simplex(&step, c);
        if dual_of(&next) < dual_of(&x) {
            // restart momentum
            t = 1.0;
            y = x.clone();
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        y = (0..m).map(|i| next[i] + (t - 1.0) / t_next * (next[i] - x[i])).collect();
        x = next;
        t = t_next;
        if primal(&w_of(&x), cons, c) - dual_of(&x) < 1e-10 * dual_of(&x).abs().max(1.0) {
            break;
        }
    }
    Reference { primal: primal(&w_of(&x), cons, c), dual: dual_of(&x) }
}


/// Dense Gaussian elimination with partial pivoting; `None` when singular.
pub fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Exact optimum by enumerating active sets. Every optimal `w` solves the
/// stationarity system of its support, and the primal is an upper bound
/// everywhere, so the minimum over all candidates is the optimum.
pub fn reference_kkt(cons: &[CuttingPlaneConstraint], c: f64) -> f64 {
    let m = cons.len();
    let dim = cons[0].delta_psi.len();
    let mut best = primal(&vec![0.0; dim], cons, c);
    for mask in 1u32..(1 << m) {
        let s: Vec<usize> = (0..m).filter(|j| mask & (1 << j) != 0).collect();
        let g = |i: usize, j: usize| dot(&cons[i].delta_psi, &cons[j].delta_psi);
        let w_of = |alpha: &[f64]| -> Vec<f64> {
            (0..dim).map(|d| s.iter().zip(alpha).map(|(&j, a)| a * cons[j].delta_psi[d]).sum()).collect()
        };
        // slack zero: G α = ℓ on the support
        let a: Vec<Vec<f64>> = s.iter().map(|&i| s.iter().map(|&j| g(i, j)).collect()).collect();
        let b: Vec<f64> = s.iter().map(|&i| cons[i].mean_loss).collect();
        if let Some(alpha) = solve_linear(a.clone(), b.clone()) {
            best = best.min(primal(&w_of(&alpha), cons, c));
        }
        // budget tight: G α + ξ 1 = ℓ, Σα = C
        let mut a2: Vec<Vec<f64>> = a.into_iter().map(|mut row| {
            row.push(1.0);
            row
        }).collect();
        let mut last = vec![1.0; s.len()];
        last.push(0.0);
        a2.push(last);
        let mut b2 = b;
        b2.push(c);
        if let Some(sol) = solve_linear(a2, b2) {
            best = best.min(primal(&w_of(&sol[..s.len()]), cons, c));
        }
    }
    best
}

/// Random working set: up to `max_constraints` cutting planes, possibly rank deficient unless `full_rank`.
pub fn random_qp(rng: &mut ChaCha8Rng, max_constraints: usize, full_rank: bool) -> (Vec<CuttingPlaneConstraint>, f64) {
    let m = rng.gen_range(1..=max_constraints);
    let dim = if full_rank { rng.gen_range(m..=m + 3) } else { rng.gen_range(2..=6) };
    let cons = (0..m)
        .map(|_| CuttingPlaneConstraint {
            delta_psi: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            mean_loss: rng.gen_range(0.0..3.0),
        })
        .collect();
    let c = [0.1, 1.0, 10.0, 100.0][rng.gen_range(0..4)];
    (cons, c)
}
