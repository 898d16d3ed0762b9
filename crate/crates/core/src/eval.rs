//! Cross-validation, metrics, noise sweeps, feedback and recipe chaining.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{example_to_json, expert_next, perturb_attributes, CorpusError, SequenceExample};
use crate::features::History;
use crate::learn::{train, train_multiclass, LearnError, TrainConfig};
use crate::model::{
    predict_in, rollout, top_k_in, Advisor, AttributeOverlay, ModelError, ModelKind, RolloutOptions, ScoredAction,
    TrainedModel,
};
use crate::world::{apply_primitive, task_goal_satisfied, Action, Primitive, Task, TaskSpec, WorldError, WorldState};

const P: usize = Primitive::COUNT;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0} predictions vs {1} truths")]
    LengthMismatch(usize, usize),
    #[error("corpus has {0} sequences, fewer than {1} folds")]
    TooFewSequences(usize, usize),
    #[error("interactive feedback requires a connected session")]
    SessionRequired,
    #[error("flip probability {0} outside [0, 1]")]
    Probability(f64),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    World(#[from] WorldError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FeedbackMode {
    None,
    OracleTopk,
    Interactive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FeedbackScope {
    FirstStep,
    AllSteps,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackPolicy {
    pub mode: FeedbackMode,
    pub k: usize,
    pub scope: FeedbackScope,
}

impl FeedbackPolicy {
    pub const NONE: FeedbackPolicy = FeedbackPolicy { mode: FeedbackMode::None, k: 1, scope: FeedbackScope::AllSteps };

    pub fn oracle(k: usize, scope: FeedbackScope) -> Self {
        Self { mode: FeedbackMode::OracleTopk, k, scope }
    }

    fn in_scope(&self, step: usize) -> bool {
        self.mode != FeedbackMode::None && (self.scope == FeedbackScope::AllSteps || step == 0)
    }
}

/// Simulated observer who picks the recorded action whenever it is offered.
pub struct OracleAdvisor<'a> {
    pub policy: FeedbackPolicy,
    pub truth: &'a [Action],
}

impl Advisor for OracleAdvisor<'_> {
    fn proposals_wanted(&self, step: usize) -> usize {
        if self.policy.in_scope(step) {
            self.policy.k
        } else {
            1
        }
    }

    fn choose(&mut self, step: usize, _state: &WorldState, proposals: &[ScoredAction]) -> Result<usize, ModelError> {
        let truth = self.truth.get(step);
        Ok(proposals.iter().position(|p| Some(&p.action) == truth).unwrap_or(0))
    }
}

/// Observer who follows the scripted expert from whatever state the robot is in.
pub struct ExpertAdvisor {
    pub k: usize,
    pub task: TaskSpec,
}

impl Advisor for ExpertAdvisor {
    fn proposals_wanted(&self, _step: usize) -> usize {
        self.k
    }

    fn choose(&mut self, _step: usize, state: &WorldState, proposals: &[ScoredAction]) -> Result<usize, ModelError> {
        let want = expert_next(state, &self.task).ok();
        Ok(proposals.iter().position(|p| Some(p.action) == want).unwrap_or(0))
    }
}

/// Uniform primitive among the seven controllers, then uniform well-formed arguments.
pub fn chance_baseline(state: &WorldState, rng: &mut impl Rng) -> Action {
    let p = *Primitive::CONTROLLERS.choose(rng).expect("non-empty");
    let ids: Vec<_> = state.ids().collect();
    match p.arity() {
        1 => Action::unary(p, *ids.choose(rng).expect("objects")),
        _ => {
            let pair: Vec<_> = ids.choose_multiple(rng, 2).copied().collect();
            Action::binary(p, pair[0], pair[1])
        }
    }
}

pub fn confusion_matrix(predictions: &[Primitive], truths: &[Primitive]) -> Result<[[u64; P]; P], EvalError> {
    if predictions.len() != truths.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), truths.len()));
    }
    let mut m = [[0u64; P]; P];
    for (p, t) in predictions.iter().zip(truths) {
        m[t.index()][p.index()] += 1;
    }
    Ok(m)
}

/// One teacher-forced prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub scenario_id: String,
    pub step: usize,
    pub truth: Action,
    /// `None` when the predictor emits a primitive without arguments.
    pub predicted: Action,
    pub top_k: Vec<ScoredAction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceOutcome {
    pub scenario_id: String,
    pub task: Task,
    pub executed: Vec<Action>,
    pub prim_correct: bool,
    pub full_correct: bool,
    pub goal_satisfied: bool,
}

/// Something that proposes next actions.
pub enum Predictor<'a> {
    Model(&'a TrainedModel),
    Chance { seed: u64 },
}

const DUMP_K: usize = 3;

/// Teacher-forced predictions at every step of every sequence.
pub fn evaluate_steps(predictor: &Predictor<'_>, examples: &[SequenceExample]) -> Result<Vec<StepRecord>, EvalError> {
    let per_seq: Vec<Result<Vec<StepRecord>, EvalError>> = examples
        .par_iter()
        .enumerate()
        .map(|(n, ex)| {
            let states = ex.replay()?;
            let mut rng = ChaCha8Rng::seed_from_u64(match predictor {
                Predictor::Chance { seed } => *seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                Predictor::Model(_) => 0,
            });
            let mut out = Vec::with_capacity(ex.steps.len());
            for (t, truth) in ex.steps.iter().enumerate() {
                let history = History::at(&ex.steps, t);
                let (predicted, top_k) = match predictor {
                    Predictor::Model(m) => {
                        let top = top_k_in(&m.weights, &states[t], &ex.task, &history, DUMP_K, m.space());
                        (predict_in(&m.weights, &states[t], &ex.task, &history, m.space()).action, top)
                    }
                    Predictor::Chance { .. } => (chance_baseline(&states[t], &mut rng), Vec::new()),
                };
                out.push(StepRecord { scenario_id: ex.scenario_id.clone(), step: t, truth: *truth, predicted, top_k });
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for s in per_seq {
        all.extend(s?);
    }
    Ok(all)
}

/// Closed-loop rollout of each example, exact-match scored against the recording.
pub fn evaluate_sequences(
    model: &TrainedModel,
    examples: &[SequenceExample],
    policy: FeedbackPolicy,
    observed: Option<&[SequenceExample]>,
) -> Result<Vec<SequenceOutcome>, EvalError> {
    if policy.mode == FeedbackMode::Interactive {
        return Err(EvalError::SessionRequired);
    }
    examples
        .par_iter()
        .enumerate()
        .map(|(n, ex)| {
            let overlay = observed.map(|o| AttributeOverlay::from_state(&o[n].initial_state));
            let mut advisor = OracleAdvisor { policy, truth: &ex.steps };
            let opts = RolloutOptions {
                max_steps: None,
                advisor: (policy.mode == FeedbackMode::OracleTopk).then_some(&mut advisor as &mut dyn Advisor),
                overlay: overlay.as_ref(),
            };
            let r = rollout(&model.weights, &ex.initial_state, &ex.task, opts)?;
            let prims = |v: &[Action]| v.iter().map(|a| a.primitive).collect::<Vec<_>>();
            Ok(SequenceOutcome {
                scenario_id: ex.scenario_id.clone(),
                task: ex.task.task,
                prim_correct: prims(&r.actions) == prims(&ex.steps),
                full_correct: r.actions == ex.steps,
                goal_satisfied: task_goal_satisfied(&r.final_state, &ex.task)?,
                executed: r.actions,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveMetrics {
    pub prim_accuracy: f64,
    pub arg_accuracy: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Teacher-forced accuracies per true primitive, percent.
    pub per_primitive: BTreeMap<String, PrimitiveMetrics>,
    /// Macro average over the seven controller primitives, percent.
    pub macro_average: (f64, f64),
    /// Closed-loop (primitive-only, full) sequence accuracy averaged over tasks, percent.
    pub sequence_accuracy: Option<(f64, f64)>,
    /// Counts of (true primitive, predicted primitive), DONE included.
    pub confusion: Vec<Vec<u64>>,
    pub steps: usize,
    pub sequences: usize,
    /// Fraction of recorded positions reproduced during closed-loop rollout, percent.
    pub closed_loop_step_accuracy: Option<f64>,
    pub teacher_forced_step_accuracy: f64,
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Aggregates teacher-forced records and closed-loop outcomes.
pub fn metrics(steps: &[StepRecord], sequences: Option<(&[SequenceOutcome], &[SequenceExample])>) -> MetricsReport {
    let mut per_primitive = BTreeMap::new();
    let mut macro_sum = (0.0, 0.0);
    let mut macro_n = 0;
    for p in Primitive::ALL {
        let rows: Vec<&StepRecord> = steps.iter().filter(|s| s.truth.primitive == p).collect();
        let prim = rows.iter().filter(|s| s.predicted.primitive == p).count();
        let full = rows.iter().filter(|s| s.predicted == s.truth).count();
        let m = PrimitiveMetrics { prim_accuracy: pct(prim, rows.len()), arg_accuracy: pct(full, rows.len()), support: rows.len() as u64 };
        if p != Primitive::Done && !rows.is_empty() {
            macro_sum.0 += m.prim_accuracy;
            macro_sum.1 += m.arg_accuracy;
            macro_n += 1;
        }
        per_primitive.insert(p.name().to_string(), m);
    }
    let preds: Vec<Primitive> = steps.iter().map(|s| s.predicted.primitive).collect();
    let truths: Vec<Primitive> = steps.iter().map(|s| s.truth.primitive).collect();
    let confusion = confusion_matrix(&preds, &truths).expect("aligned").iter().map(|r| r.to_vec()).collect();
    let denom = macro_n.max(1) as f64;
    let (sequence_accuracy, closed_loop_step_accuracy, n_seq) = match sequences {
        Some((outcomes, examples)) => {
            let mut by_task: BTreeMap<Task, (usize, usize, usize)> = BTreeMap::new();
            let mut matched = 0;
            let mut total = 0;
            for (o, ex) in outcomes.iter().zip(examples) {
                let e = by_task.entry(o.task).or_default();
                e.0 += 1;
                e.1 += o.prim_correct as usize;
                e.2 += o.full_correct as usize;
                matched += ex.steps.iter().zip(&o.executed).filter(|(a, b)| a == b).count();
                total += ex.steps.len();
            }
            let k = by_task.len().max(1) as f64;
            let prim = by_task.values().map(|(n, p, _)| pct(*p, *n)).sum::<f64>() / k;
            let full = by_task.values().map(|(n, _, f)| pct(*f, *n)).sum::<f64>() / k;
            (Some((prim, full)), Some(pct(matched, total)), outcomes.len())
        }
        None => (None, None, steps.iter().map(|s| &s.scenario_id).collect::<std::collections::BTreeSet<_>>().len()),
    };
    MetricsReport {
        per_primitive,
        macro_average: (macro_sum.0 / denom, macro_sum.1 / denom),
        sequence_accuracy,
        confusion,
        steps: steps.len(),
        sequences: n_seq,
        closed_loop_step_accuracy,
        teacher_forced_step_accuracy: pct(steps.iter().filter(|s| s.predicted == s.truth).count(), steps.len()),
    }
}

/// Full-sequence exact-match accuracy, percent of sequences.
pub fn sequence_accuracy(outcomes: &[SequenceOutcome]) -> f64 {
    pct(outcomes.iter().filter(|o| o.full_correct).count(), outcomes.len())
}

/// A trained fold: held-out indices and the models fit on the rest.
#[derive(Clone, Debug)]
pub struct Fold {
    pub test: Vec<usize>,
    pub structured: TrainedModel,
    pub multiclass: Option<TrainedModel>,
    pub iterations: usize,
    pub converged: bool,
}

impl Fold {
    pub fn test_examples(&self, corpus: &[SequenceExample]) -> Vec<SequenceExample> {
        self.test.iter().map(|&i| corpus[i].clone()).collect()
    }
}

/// Seeded assignment of sequences to folds.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    fold_of
}

/// Trains one structured (and optionally one multiclass) model per fold.
pub fn train_folds(
    corpus: &[SequenceExample],
    config: &TrainConfig,
    folds: usize,
    with_multiclass: bool,
) -> Result<Vec<Fold>, EvalError> {
    if folds < 2 || corpus.len() < folds {
        return Err(EvalError::TooFewSequences(corpus.len(), folds));
    }
    let fold_of = fold_assignment(corpus.len(), folds, config.seed);
    (0..folds)
        .into_par_iter()
        .map(|f| {
            let test: Vec<usize> = (0..corpus.len()).filter(|&i| fold_of[i] == f).collect();
            let train_set: Vec<SequenceExample> = (0..corpus.len()).filter(|&i| fold_of[i] != f).map(|i| corpus[i].clone()).collect();
            let (structured, report) = train(&train_set, config)?;
            let multiclass = if with_multiclass { Some(train_multiclass(&train_set, config)?.0) } else { None };
            Ok(Fold { test, structured, multiclass, iterations: report.iterations, converged: report.converged })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub seed: u64,
    pub corpus_hash: String,
    pub folds: usize,
    pub full: MetricsReport,
    pub multiclass: Option<MetricsReport>,
    pub chance: MetricsReport,
    /// Teacher-forced minus closed-loop per-step accuracy, per fold.
    pub fold_step_accuracy: Vec<(f64, f64)>,
    pub predictions: Vec<StepRecord>,
    pub rollouts: Vec<SequenceOutcome>,
}

/// Hex SHA-256 over the serialized corpus.
pub fn corpus_hash(corpus: &[SequenceExample]) -> String {
    let mut h = Sha256::new();
    for ex in corpus {
        h.update(example_to_json(ex).as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Metrics for already-trained folds.
pub fn cross_validate_folds(corpus: &[SequenceExample], folds: &[Fold], seed: u64) -> Result<CrossValidation, EvalError> {
    let mut steps = Vec::new();
    let mut mc_steps = Vec::new();
    let mut outcomes = Vec::new();
    let mut ordered = Vec::new();
    let mut fold_step_accuracy = Vec::new();
    for fold in folds {
        let test = fold.test_examples(corpus);
        let s = evaluate_steps(&Predictor::Model(&fold.structured), &test)?;
        let o = evaluate_sequences(&fold.structured, &test, FeedbackPolicy::NONE, None)?;
        let m = metrics(&s, Some((&o, &test)));
        fold_step_accuracy.push((m.teacher_forced_step_accuracy, m.closed_loop_step_accuracy.unwrap_or(0.0)));
        if let Some(mc) = &fold.multiclass {
            mc_steps.extend(evaluate_steps(&Predictor::Model(mc), &test)?);
        }
        steps.extend(s);
        outcomes.extend(o);
        ordered.extend(test);
    }
    let chance_steps = evaluate_steps(&Predictor::Chance { seed }, &ordered)?;
    let chance_outcomes: Vec<SequenceOutcome> = ordered
        .iter()
        .enumerate()
        .map(|(n, ex)| chance_rollout(ex, seed ^ n as u64))
        .collect::<Result<_, _>>()?;
    Ok(CrossValidation {
        seed,
        corpus_hash: corpus_hash(corpus),
        folds: folds.len(),
        full: metrics(&steps, Some((&outcomes, &ordered))),
        multiclass: (!mc_steps.is_empty()).then(|| metrics(&mc_steps, None)),
        chance: metrics(&chance_steps, Some((&chance_outcomes, &ordered))),
        fold_step_accuracy,
        predictions: steps,
        rollouts: outcomes,
    })
}

/// Closed-loop chance policy: random draws, skipping inexecutable ones, until DONE or the horizon.
fn chance_rollout(ex: &SequenceExample, seed: u64) -> Result<SequenceOutcome, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ex.initial_state.clone();
    let mut executed = Vec::new();
    for _ in 0..crate::model::DEFAULT_MAX_STEPS {
        let mut a = chance_baseline(&state, &mut rng);
        for _ in 0..100 {
            if crate::world::check_preconditions(&state, &a).is_ok() {
                break;
            }
            a = chance_baseline(&state, &mut rng);
        }
        if crate::world::check_preconditions(&state, &a).is_err() {
            a = Action::DONE;
        }
        state = apply_primitive(&state, &a)?;
        executed.push(a);
        if a == Action::DONE {
            break;
        }
    }
    let prims = |v: &[Action]| v.iter().map(|a| a.primitive).collect::<Vec<_>>();
    Ok(SequenceOutcome {
        scenario_id: ex.scenario_id.clone(),
        task: ex.task.task,
        prim_correct: prims(&executed) == prims(&ex.steps),
        full_correct: executed == ex.steps,
        goal_satisfied: task_goal_satisfied(&state, &ex.task)?,
        executed,
    })
}

/// k-fold cross-validation of the structured model against both baselines.
pub fn cross_validate(corpus: &[SequenceExample], config: &TrainConfig, folds: usize) -> Result<CrossValidation, EvalError> {
    let trained = train_folds(corpus, config, folds, true)?;
    cross_validate_folds(corpus, &trained, config.seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub p: f64,
    pub accuracy: f64,
    pub per_seed: Vec<f64>,
}

/// Held-out sequence accuracy when the model observes flipped attributes.
pub fn noise_sweep(corpus: &[SequenceExample], folds: &[Fold], probabilities: &[f64], seeds: &[u64]) -> Result<Vec<NoisePoint>, EvalError> {
    let mut out = Vec::new();
    for &p in probabilities {
        if !(0.0..=1.0).contains(&p) {
            return Err(EvalError::Probability(p));
        }
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let mut correct = 0;
            let mut total = 0;
            for fold in folds {
                let test = fold.test_examples(corpus);
                let noisy = perturb_attributes(&test, p, seed);
                let o = evaluate_sequences(&fold.structured, &test, FeedbackPolicy::NONE, Some(&noisy))?;
                correct += o.iter().filter(|x| x.full_correct).count();
                total += o.len();
            }
            per_seed.push(pct(correct, total));
        }
        let accuracy = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
        out.push(NoisePoint { p, accuracy, per_seed });
    }
    Ok(out)
}

/// Sequence accuracy of `model` on `corpus` under a feedback policy.
pub fn feedback_eval(corpus: &[SequenceExample], model: &TrainedModel, policy: FeedbackPolicy) -> Result<f64, EvalError> {
    Ok(sequence_accuracy(&evaluate_sequences(model, corpus, policy, None)?))
}

/// Held-out sequence accuracy under a feedback policy, pooled over folds.
pub fn feedback_eval_folds(corpus: &[SequenceExample], folds: &[Fold], policy: FeedbackPolicy) -> Result<f64, EvalError> {
    let mut outcomes = Vec::new();
    for fold in folds {
        outcomes.extend(evaluate_sequences(&fold.structured, &fold.test_examples(corpus), policy, None)?);
    }
    Ok(sequence_accuracy(&outcomes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainOutcome {
    pub success: bool,
    pub completed_tasks: usize,
    pub trace: Vec<Action>,
    pub error: Option<String>,
}

/// Runs each task in turn from the previous task's final state.
pub fn chain_tasks(recipe: &[TaskSpec], initial: &WorldState, model: &TrainedModel, oracle_k: Option<usize>) -> ChainOutcome {
    let mut state = initial.clone();
    let mut trace = Vec::new();
    for (i, task) in recipe.iter().enumerate() {
        let mut advisor = oracle_k.map(|k| ExpertAdvisor { k, task: *task });
        let opts = RolloutOptions { advisor: advisor.as_mut().map(|a| a as &mut dyn Advisor), ..Default::default() };
        let r = match rollout(&model.weights, &state, task, opts) {
            Ok(r) => r,
            Err(e) => return ChainOutcome { success: false, completed_tasks: i, trace, error: Some(e.to_string()) },
        };
        trace.extend(&r.actions);
        state = r.final_state;
        if !task_goal_satisfied(&state, task).unwrap_or(false) {
            return ChainOutcome { success: false, completed_tasks: i, trace, error: None };
        }
    }
    ChainOutcome { success: true, completed_tasks: recipe.len(), trace, error: None }
}

/// Predictor kind of a model, for report labels.
pub fn kind_label(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Structured => "full",
        ModelKind::Multiclass => "multiclass",
    }
}
