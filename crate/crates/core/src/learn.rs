//! 1-slack structural SVM training by cutting planes.
//!
//! The inner QP is solved in the dual,
//!
//! ```text
//! max  Σ α_j ℓ_j − ½ αᵀ G α     s.t.  α ≥ 0,  Σ α_j ≤ C
//! ```
//!
//! with `G_ij = Δψ_i · Δψ_j`. An implicit slack coordinate with zero loss and
//! zero Gram row turns the inequality into an equality, after which pairwise
//! closed-form updates on the maximal violating pair converge to the optimum.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SequenceExample;
use crate::features::{History, SparseVec, StepFeatures, DIM};
use crate::model::{candidates, loss, Candidate, CandidateSpace, ModelKind, ScoreTable, TrainedModel, WeightVector};
use crate::world::{apply_primitive, check_preconditions, Action, Reason, WorldState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(rename = "C")]
    pub c: f64,
    pub epsilon: f64,
    pub max_iterations: usize,
    pub qp_tolerance: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { c: 1000.0, epsilon: 0.01, max_iterations: 500, qp_tolerance: 1e-8, seed: 0 }
    }
}

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("sequence {scenario_id} step {step}: {action} not executable ({reason})")]
    CorpusIntegrity { scenario_id: String, step: usize, action: Action, reason: Reason },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CuttingPlaneConstraint {
    pub delta_psi: Vec<f64>,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub objective: f64,
    pub xi: f64,
    pub violation: f64,
    pub working_set: usize,
    pub alpha_sum: f64,
    pub alpha_min: f64,
}

impl IterationLog {
    pub fn to_line(&self) -> String {
        format!(
            "iter={} objective={:.9} xi={:.9} violation={:.9} working_set={} alpha_sum={:.9}",
            self.iteration, self.objective, self.xi, self.violation, self.working_set, self.alpha_sum
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub iterations: usize,
    pub converged: bool,
    pub final_objective: f64,
    pub final_violation: f64,
    pub dual_values: Vec<f64>,
    pub log: Vec<IterationLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub w: Vec<f64>,
    pub xi: f64,
    pub alpha: Vec<f64>,
    /// Primal objective `½‖w‖² + Cξ`.
    pub objective: f64,
    pub dual_objective: f64,
    pub kkt_violation: f64,
}

/// Warm-started dual solver over a growing working set.
#[derive(Clone, Debug)]
pub struct QpSolver {
    c: f64,
    tolerance: f64,
    psi: Vec<Vec<f64>>,
    losses: Vec<f64>,
    gram: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    slack: f64,
    max_sweeps: usize,
}

impl QpSolver {
    pub fn new(c: f64, tolerance: f64) -> Self {
        Self { c, tolerance, psi: Vec::new(), losses: Vec::new(), gram: Vec::new(), alpha: Vec::new(), slack: c, max_sweeps: 10_000_000 }
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    pub fn push(&mut self, constraint: CuttingPlaneConstraint) {
        let row: Vec<f64> = self.psi.iter().map(|p| dot(p, &constraint.delta_psi)).collect();
        for (g, v) in self.gram.iter_mut().zip(&row) {
            g.push(*v);
        }
        let mut row = row;
        row.push(dot(&constraint.delta_psi, &constraint.delta_psi));
        self.gram.push(row);
        self.psi.push(constraint.delta_psi);
        self.losses.push(constraint.mean_loss);
        self.alpha.push(0.0);
    }

    /// Gradient of the dual objective: `ℓ_j − (Gα)_j`.
    fn gradient(&self) -> Vec<f64> {
        (0..self.len())
            .map(|j| self.losses[j] - self.gram[j].iter().zip(&self.alpha).map(|(g, a)| g * a).sum::<f64>())
            .collect()
    }

    pub fn solve(&mut self) -> QpSolution {
        let n = self.len();
        let mut grad = self.gradient();
        // index n stands for the slack coordinate: gradient 0, Gram row 0
        let g_of = |grad: &[f64], k: usize| if k == n { 0.0 } else { grad[k] };
        for _ in 0..self.max_sweeps {
            let mut up = n;
            let mut up_g = 0.0;
            for (j, g) in grad.iter().enumerate() {
                if *g > up_g {
                    up = j;
                    up_g = *g;
                }
            }
            let mut down = usize::MAX;
            let mut down_g = f64::INFINITY;
            for k in 0..=n {
                let a = if k == n { self.slack } else { self.alpha[k] };
                let g = g_of(&grad, k);
                if a > 0.0 && g < down_g {
                    down = k;
                    down_g = g;
                }
            }
            if down == usize::MAX || up_g - down_g <= self.tolerance || up == down {
                break;
            }
            let gram = |a: usize, b: usize| if a == n || b == n { 0.0 } else { self.gram[a][b] };
            let curvature = gram(up, up) + gram(down, down) - 2.0 * gram(up, down);
            let avail = if down == n { self.slack } else { self.alpha[down] };
            let step = if curvature > 1e-300 { ((up_g - down_g) / curvature).min(avail) } else { avail };
            if step <= 0.0 {
                break;
            }
            if up == n {
                self.slack += step;
            } else {
                self.alpha[up] += step;
            }
            if down == n {
                self.slack -= step;
            } else {
                self.alpha[down] = if step == avail { 0.0 } else { self.alpha[down] - step };
            }
            for (j, g) in grad.iter_mut().enumerate() {
                *g -= step * (gram(j, up) - gram(j, down));
            }
        }
        // resync to shed accumulated rounding
        self.slack = (self.c - self.alpha.iter().sum::<f64>()).max(0.0);
        let grad = self.gradient();
        self.solution(&grad)
    }

    fn solution(&self, grad: &[f64]) -> QpSolution {
        let dim = self.psi.first().map_or(0, Vec::len);
        let mut w = vec![0.0; dim];
        for (a, p) in self.alpha.iter().zip(&self.psi) {
            if *a != 0.0 {
                for (wi, pi) in w.iter_mut().zip(p) {
                    *wi += a * pi;
                }
            }
        }
        let xi = grad.iter().copied().fold(0.0, f64::max);
        let ww = dot(&w, &w);
        let dual = self.alpha.iter().zip(&self.losses).map(|(a, l)| a * l).sum::<f64>() - 0.5 * ww;
        let n = self.len();
        let max_g = grad.iter().copied().fold(0.0, f64::max);
        let mut min_g = if self.slack > 0.0 { 0.0 } else { f64::INFINITY };
        for k in 0..n {
            if self.alpha[k] > 0.0 {
                min_g = min_g.min(grad[k]);
            }
        }
        QpSolution {
            w,
            xi,
            alpha: self.alpha.clone(),
            objective: 0.5 * ww + self.c * xi,
            dual_objective: dual,
            kkt_violation: (max_g - min_g).max(0.0),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `min ½‖w‖² + Cξ  s.t.  w·Δψ_j ≥ ℓ_j − ξ, ξ ≥ 0` from scratch.
pub fn solve_qp(working_set: &[CuttingPlaneConstraint], c: f64, qp_tolerance: f64) -> QpSolution {
    let mut solver = QpSolver::new(c, qp_tolerance);
    for con in working_set {
        solver.push(con.clone());
    }
    solver.solve()
}

/// One replayed step of a demonstration, ready for repeated inference.
#[derive(Clone, Debug)]
pub struct TrainingStep {
    pub feats: StepFeatures,
    pub candidates: Vec<Candidate>,
    pub truth: Candidate,
    truth_phi: SparseVec,
}

impl TrainingStep {
    pub fn truth_action(&self) -> Action {
        self.truth.action(&self.feats)
    }
}

/// The corpus replayed into per-step inference problems.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub kind: ModelKind,
    pub steps: Vec<TrainingStep>,
}

impl TrainingSet {
    pub fn new(corpus: &[SequenceExample], kind: ModelKind) -> Result<Self, LearnError> {
        if corpus.is_empty() {
            return Err(LearnError::EmptyCorpus);
        }
        let per_seq: Vec<Result<Vec<TrainingStep>, LearnError>> =
            corpus.par_iter().map(|ex| replay_steps(ex, kind)).collect();
        let mut steps = Vec::new();
        for s in per_seq {
            steps.extend(s?);
        }
        Ok(Self { kind, steps })
    }

    fn step_loss(&self, truth: &Action, cand: &Action) -> f64 {
        match self.kind {
            ModelKind::Structured => loss(truth, cand),
            ModelKind::Multiclass => (truth.primitive != cand.primitive) as u8 as f64,
        }
    }

    /// Fraction of steps where the argmax equals the truth.
    pub fn accuracy(&self, w: &[f64]) -> f64 {
        let hits: usize = self
            .steps
            .par_iter()
            .map(|s| {
                let table = ScoreTable::new(w, &s.feats);
                let (k, _) = table.argmax_by(&s.candidates, |_| 0.0).expect("non-empty");
                (s.candidates[k] == s.truth) as usize
            })
            .sum();
        hits as f64 / self.steps.len() as f64
    }
}

fn replay_steps(ex: &SequenceExample, kind: ModelKind) -> Result<Vec<TrainingStep>, LearnError> {
    let mut state: WorldState = ex.initial_state.clone();
    let mut out = Vec::with_capacity(ex.steps.len());
    for (t, action) in ex.steps.iter().enumerate() {
        let integrity = |reason| LearnError::CorpusIntegrity { scenario_id: ex.scenario_id.clone(), step: t, action: *action, reason };
        check_preconditions(&state, action).map_err(integrity)?;
        let feats = StepFeatures::new(&state, &ex.task, &History::at(&ex.steps, t));
        let (space, truth) = match kind {
            ModelKind::Structured => (CandidateSpace::Executable, Candidate::from_action(&feats, action)),
            ModelKind::Multiclass => (CandidateSpace::PrimitivesOnly, Candidate { primitive: action.primitive, a1: None, a2: None }),
        };
        let cands = candidates(&state, &feats, space);
        let truth_phi = feats.sparse(truth.primitive, truth.a1.map(usize::from), truth.a2.map(usize::from));
        state = apply_primitive(&state, action).map_err(|_| integrity(Reason::Malformed))?;
        out.push(TrainingStep { feats, candidates: cands, truth, truth_phi });
    }
    Ok(out)
}

/// Most violated 1-slack constraint under `w`, and its violation `mean_loss − w·Δψ − ξ`.
pub fn most_violated(w: &[f64], xi: f64, set: &TrainingSet) -> (CuttingPlaneConstraint, f64) {
    let per_step: Vec<(SparseVec, f64)> = set
        .steps
        .par_iter()
        .map(|s| {
            let truth = s.truth_action();
            let table = ScoreTable::new(w, &s.feats);
            let (k, _) = table
                .argmax_by(&s.candidates, |c| set.step_loss(&truth, &c.action(&s.feats)))
                .expect("non-empty");
            let c = s.candidates[k];
            let l = set.step_loss(&truth, &c.action(&s.feats));
            if c == s.truth {
                return (Vec::new(), 0.0);
            }
            let viol = s.feats.sparse(c.primitive, c.a1.map(usize::from), c.a2.map(usize::from));
            let mut diff = s.truth_phi.clone();
            diff.extend(viol.into_iter().map(|(i, v)| (i, -v)));
            (diff, l)
        })
        .collect();
    let n = set.steps.len() as f64;
    let mut delta_psi = vec![0.0; DIM];
    let mut total_loss = 0.0;
    for (diff, l) in &per_step {
        for &(i, v) in diff {
            delta_psi[i as usize] += v;
        }
        total_loss += l;
    }
    for v in &mut delta_psi {
        *v /= n;
    }
    let mean_loss = total_loss / n;
    let violation = mean_loss - dot(w, &delta_psi) - xi;
    (CuttingPlaneConstraint { delta_psi, mean_loss }, violation)
}

fn validate(config: &TrainConfig) -> Result<(), LearnError> {
    let ok = config.c > 0.0 && config.epsilon > 0.0 && config.max_iterations > 0 && config.qp_tolerance > 0.0;
    if ok && config.c.is_finite() && config.epsilon.is_finite() {
        Ok(())
    } else {
        Err(LearnError::Config(format!("{config:?}")))
    }
}

/// Cutting-plane training on a prepared set.
pub fn train_set(set: &TrainingSet, config: &TrainConfig) -> Result<(WeightVector, TrainReport), LearnError> {
    validate(config)?;
    let mut solver = QpSolver::new(config.c, config.qp_tolerance);
    let mut w = vec![0.0; DIM];
    let mut xi = 0.0;
    let mut objective = 0.0;
    let mut alpha = Vec::new();
    let mut log = Vec::new();
    let mut converged = false;
    let mut violation = f64::INFINITY;
    let mut iterations = 0;
    for iteration in 1..=config.max_iterations {
        iterations = iteration;
        let (con, v) = most_violated(&w, xi, set);
        violation = v;
        if violation <= config.epsilon {
            log.push(entry(iteration, objective, xi, violation, solver.len(), &alpha));
            converged = true;
            break;
        }
        solver.push(con);
        let sol = solver.solve();
        let sum: f64 = sol.alpha.iter().sum();
        assert!(
            sol.alpha.iter().all(|a| *a >= 0.0) && sum <= config.c * (1.0 + 1e-12),
            "dual infeasible: sum {sum}"
        );
        w = sol.w;
        xi = sol.xi;
        objective = sol.objective;
        alpha = sol.alpha;
        log.push(entry(iteration, objective, xi, violation, solver.len(), &alpha));
    }
    let weights = WeightVector::new(w).expect("finite weights");
    Ok((weights, TrainReport { iterations, converged, final_objective: objective, final_violation: violation, dual_values: alpha, log }))
}

fn entry(iteration: usize, objective: f64, xi: f64, violation: f64, working_set: usize, alpha: &[f64]) -> IterationLog {
    IterationLog {
        iteration,
        objective,
        xi,
        violation,
        working_set,
        alpha_sum: alpha.iter().sum(),
        alpha_min: alpha.iter().copied().fold(0.0, f64::min),
    }
}

/// Structured model over primitives and arguments.
pub fn train(corpus: &[SequenceExample], config: &TrainConfig) -> Result<(TrainedModel, TrainReport), LearnError> {
    let set = TrainingSet::new(corpus, ModelKind::Structured)?;
    let (weights, report) = train_set(&set, config)?;
    Ok((TrainedModel { kind: ModelKind::Structured, weights, config: config.clone() }, report))
}

/// Primitive-only baseline: arguments NULL, loss `1(p≠p̂)`.
pub fn train_multiclass(corpus: &[SequenceExample], config: &TrainConfig) -> Result<(TrainedModel, TrainReport), LearnError> {
    let set = TrainingSet::new(corpus, ModelKind::Multiclass)?;
    let (weights, report) = train_set(&set, config)?;
    Ok((TrainedModel { kind: ModelKind::Multiclass, weights, config: config.clone() }, report))
}
