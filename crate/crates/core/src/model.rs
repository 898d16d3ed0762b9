//! Linear score function, exact inference and closed-loop rollout.

use std::collections::BTreeMap;
use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{assemble, layout_hash, sparse_dot, History, StepFeatures, DIM, LAYOUT};
use crate::learn::TrainConfig;
use crate::world::{
    apply_primitive, check_preconditions, enumerate_actions, executable_actions, Action, AttributeVector, ObjectId,
    Primitive, TaskSpec, WorldError, WorldState,
};

pub const DEFAULT_MAX_STEPS: usize = 25;
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("weight vector has dimension {0}, expected {DIM}")]
    Dimension(usize),
    #[error("weight vector has a non-finite entry at {0}")]
    NonFinite(usize),
    #[error("rollout aborted at step {step}: no executable action")]
    Aborted { step: usize, trace: Vec<Action> },
    #[error("feedback: {0}")]
    Feedback(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("model file: {0}")]
    Format(String),
    #[error("model file layout hash {found} does not match {expected}")]
    LayoutMismatch { found: String, expected: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    pub values: Vec<f64>,
}

impl WeightVector {
    pub fn zeros() -> Self {
        Self { values: vec![0.0; DIM] }
    }

    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != DIM {
            return Err(ModelError::Dimension(values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(i));
        }
        Ok(Self { values })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredAction {
    pub action: Action,
    pub score: f64,
}

/// `w · φ` computed from the dense feature vector.
pub fn score(w: &WeightVector, state: &WorldState, task: &TaskSpec, action: &Action, history: &History) -> f64 {
    let phi = assemble(state, task, action, history);
    w.values.iter().zip(&phi.values).map(|(a, b)| a * b).sum()
}

/// Per-block contributions to the score, in layout order. They sum to [`score`].
pub fn block_scores(
    w: &WeightVector,
    state: &WorldState,
    task: &TaskSpec,
    action: &Action,
    history: &History,
) -> Vec<(&'static str, f64)> {
    let phi = assemble(state, task, action, history);
    LAYOUT
        .iter()
        .map(|b| (b.name, b.range().map(|i| w.values[i] * phi.values[i]).sum()))
        .collect()
}

/// `1(p≠p̂) + 1(a1≠â1) + 1(a2≠â2)`; NULL compares as a value.
pub fn loss(truth: &Action, candidate: &Action) -> f64 {
    (truth.primitive != candidate.primitive) as u8 as f64
        + (truth.a1 != candidate.a1) as u8 as f64
        + (truth.a2 != candidate.a2) as u8 as f64
}

/// Which actions inference ranges over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSpace {
    /// Every well-formed action.
    All,
    /// Well-formed actions whose preconditions hold in the true state.
    Executable,
    /// One argument-free candidate per primitive.
    PrimitivesOnly,
}

/// An action with arguments given as positions into [`StepFeatures::ids`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Candidate {
    pub primitive: Primitive,
    pub a1: Option<u16>,
    pub a2: Option<u16>,
}

impl Candidate {
    pub fn from_action(feats: &StepFeatures, action: &Action) -> Self {
        let pos = |a: Option<ObjectId>| a.map(|id| feats.index_of(id).expect("argument exists") as u16);
        Self { primitive: action.primitive, a1: pos(action.a1), a2: pos(action.a2) }
    }

    pub fn action(&self, feats: &StepFeatures) -> Action {
        Action {
            primitive: self.primitive,
            a1: self.a1.map(|i| feats.ids[i as usize]),
            a2: self.a2.map(|i| feats.ids[i as usize]),
        }
    }
}

/// Candidate list for `space`, in enumeration order.
pub fn candidates(state: &WorldState, feats: &StepFeatures, space: CandidateSpace) -> Vec<Candidate> {
    let actions = match space {
        CandidateSpace::All => enumerate_actions(state),
        CandidateSpace::Executable => executable_actions(state),
        CandidateSpace::PrimitivesOnly => {
            return Primitive::ALL.iter().map(|&p| Candidate { primitive: p, a1: None, a2: None }).collect()
        }
    };
    actions.iter().map(|a| Candidate::from_action(feats, a)).collect()
}

/// Decomposed scores for one step: `S(p,a1,a2) = prim[p] + s1[a1][p] + s2[a2][p] + wc·collision(a1,a2)`.
#[derive(Clone, Debug)]
pub struct ScoreTable<'a> {
    feats: &'a StepFeatures,
    prim: [f64; Primitive::COUNT],
    s1: Vec<[f64; Primitive::COUNT]>,
    s2: Vec<[f64; Primitive::COUNT]>,
    wc: f64,
}

impl<'a> ScoreTable<'a> {
    pub fn new(w: &[f64], feats: &'a StepFeatures) -> Self {
        let mut prim = [0.0; Primitive::COUNT];
        for p in Primitive::ALL {
            prim[p.index()] = sparse_dot(w, &feats.primitive_part(p));
        }
        let table = |slot: usize| -> Vec<[f64; Primitive::COUNT]> {
            (0..feats.len())
                .map(|i| {
                    let mut row = [0.0; Primitive::COUNT];
                    for p in Primitive::ALL {
                        row[p.index()] = feats.slot_score(w, p, slot, i);
                    }
                    row
                })
                .collect()
        };
        Self { feats, prim, s1: table(1), s2: table(2), wc: w[crate::features::AE1.start + 2] }
    }

    pub fn score(&self, c: &Candidate) -> f64 {
        let p = c.primitive.index();
        let mut s = self.prim[p];
        if let Some(i) = c.a1 {
            s += self.s1[i as usize][p];
        }
        if let Some(j) = c.a2 {
            s += self.s2[j as usize][p];
        }
        if let (Some(i), Some(j)) = (c.a1, c.a2) {
            if self.feats.collides(i as usize, j as usize) {
                s += self.wc;
            }
        }
        s
    }

    /// First maximizer of `score + extra` in candidate order.
    pub fn argmax_by(&self, cands: &[Candidate], extra: impl Fn(&Candidate) -> f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (k, c) in cands.iter().enumerate() {
            let s = self.score(c) + extra(c);
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((k, s));
            }
        }
        best
    }

    /// The `k` best candidates, descending; ties keep candidate order.
    pub fn top_k(&self, cands: &[Candidate], k: usize) -> Vec<(Candidate, f64)> {
        let mut scored: Vec<(Candidate, f64)> = cands.iter().map(|c| (*c, self.score(c))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        scored.truncate(k);
        scored
    }
}

fn ranked(
    w: &WeightVector,
    observed: &WorldState,
    actual: &WorldState,
    task: &TaskSpec,
    history: &History,
    space: CandidateSpace,
    k: usize,
) -> Vec<ScoredAction> {
    let feats = StepFeatures::new(observed, task, history);
    let cands = candidates(actual, &feats, space);
    let table = ScoreTable::new(&w.values, &feats);
    table
        .top_k(&cands, k)
        .into_iter()
        .map(|(c, score)| ScoredAction { action: c.action(&feats), score })
        .collect()
}

/// Top-`k` actions from `space`, descending score, ties in enumeration order.
pub fn top_k_in(
    w: &WeightVector,
    state: &WorldState,
    task: &TaskSpec,
    history: &History,
    k: usize,
    space: CandidateSpace,
) -> Vec<ScoredAction> {
    ranked(w, state, state, task, history, space, k.max(1))
}

/// The `k` highest-scoring well-formed actions.
pub fn top_k(w: &WeightVector, state: &WorldState, task: &TaskSpec, history: &History, k: usize) -> Vec<ScoredAction> {
    top_k_in(w, state, task, history, k, CandidateSpace::All)
}

/// Highest-scoring well-formed action; ties go to the first in enumeration order.
pub fn predict(w: &WeightVector, state: &WorldState, task: &TaskSpec, history: &History) -> ScoredAction {
    predict_in(w, state, task, history, CandidateSpace::All)
}

pub fn predict_in(
    w: &WeightVector,
    state: &WorldState,
    task: &TaskSpec,
    history: &History,
    space: CandidateSpace,
) -> ScoredAction {
    let feats = StepFeatures::new(state, task, history);
    let cands = candidates(state, &feats, space);
    let table = ScoreTable::new(&w.values, &feats);
    let (k, score) = table.argmax_by(&cands, |_| 0.0).expect("DONE is always a candidate");
    ScoredAction { action: cands[k].action(&feats), score }
}

/// `argmax_a S(a) + Δ(truth, a)` over every well-formed action; the returned score excludes the loss.
pub fn loss_augmented_argmax(
    w: &WeightVector,
    state: &WorldState,
    task: &TaskSpec,
    history: &History,
    truth: &Action,
) -> ScoredAction {
    let feats = StepFeatures::new(state, task, history);
    let cands = candidates(state, &feats, CandidateSpace::All);
    let table = ScoreTable::new(&w.values, &feats);
    let (k, _) = table.argmax_by(&cands, |c| loss(truth, &c.action(&feats))).expect("non-empty");
    ScoredAction { action: cands[k].action(&feats), score: table.score(&cands[k]) }
}

/// Replaces object attributes in what the model observes; the simulator keeps the true state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttributeOverlay(pub BTreeMap<ObjectId, AttributeVector>);

impl AttributeOverlay {
    pub fn from_state(state: &WorldState) -> Self {
        Self(state.objects.iter().map(|(id, o)| (*id, o.attributes)).collect())
    }

    pub fn observe(&self, state: &WorldState) -> WorldState {
        let mut seen = state.clone();
        for (id, attrs) in &self.0 {
            if let Some(o) = seen.objects.get_mut(id) {
                o.attributes = *attrs;
            }
        }
        seen
    }
}

/// Chooses among ranked proposals during rollout.
pub trait Advisor {
    /// Number of proposals to show at `step`; 1 or less means no consultation.
    fn proposals_wanted(&self, step: usize) -> usize;
    /// Index into `proposals` of the action to execute.
    fn choose(&mut self, step: usize, state: &WorldState, proposals: &[ScoredAction]) -> Result<usize, ModelError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RolloutStatus {
    Done,
    MaxSteps,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub actions: Vec<Action>,
    pub final_state: WorldState,
    pub status: RolloutStatus,
}

#[derive(Default)]
pub struct RolloutOptions<'a> {
    pub max_steps: Option<usize>,
    pub advisor: Option<&'a mut dyn Advisor>,
    pub overlay: Option<&'a AttributeOverlay>,
}

/// Closed-loop execution: rank executable actions, optionally consult the
/// advisor, apply, repeat until DONE or the step limit.
pub fn rollout(
    w: &WeightVector,
    initial: &WorldState,
    task: &TaskSpec,
    mut opts: RolloutOptions<'_>,
) -> Result<Rollout, ModelError> {
    let max_steps = opts.max_steps.unwrap_or(DEFAULT_MAX_STEPS).max(1);
    let mut state = initial.clone();
    let mut history = History::default();
    let mut actions = Vec::new();
    for step in 0..max_steps {
        let observed = match opts.overlay {
            Some(o) => o.observe(&state),
            None => state.clone(),
        };
        let k = opts.advisor.as_ref().map_or(1, |a| a.proposals_wanted(step)).max(1);
        let proposals = ranked(w, &observed, &state, task, &history, CandidateSpace::Executable, k);
        if proposals.is_empty() {
            return Err(ModelError::Aborted { step, trace: actions });
        }
        let pick = match opts.advisor.as_deref_mut() {
            Some(adv) if k > 1 => adv.choose(step, &state, &proposals)?,
            _ => 0,
        };
        let action = proposals
            .get(pick)
            .ok_or_else(|| ModelError::Feedback(format!("choice {pick} out of {} proposals", proposals.len())))?
            .action;
        debug_assert!(check_preconditions(&state, &action).is_ok());
        state = apply_primitive(&state, &action)?;
        actions.push(action);
        history = history.push(action);
        if action.primitive == Primitive::Done {
            return Ok(Rollout { actions, final_state: state, status: RolloutStatus::Done });
        }
    }
    Ok(Rollout { actions, final_state: state, status: RolloutStatus::MaxSteps })
}

/// Which inference problem a weight vector was trained for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Structured,
    Multiclass,
}

/// Weights plus the configuration they were trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub weights: WeightVector,
    pub config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    layout_hash: String,
    kind: ModelKind,
    config: TrainConfig,
    dim: usize,
    /// Little-endian f64 weights, base64.
    weights: String,
}

impl TrainedModel {
    pub fn to_json(&self) -> String {
        let bytes: Vec<u8> = self.weights.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            layout_hash: layout_hash(),
            kind: self.kind,
            config: self.config.clone(),
            dim: DIM,
            weights: base64::engine::general_purpose::STANDARD.encode(bytes),
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(ModelError::Format(format!("unsupported format_version {}", file.format_version)));
        }
        let expected = layout_hash();
        if file.layout_hash != expected {
            return Err(ModelError::LayoutMismatch { found: file.layout_hash, expected });
        }
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(file.weights.as_bytes())
            .map_err(|e| ModelError::Format(e.to_string()))?;
        if bytes.len() != 8 * file.dim {
            return Err(ModelError::Format(format!("{} weight bytes for dim {}", bytes.len(), file.dim)));
        }
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Self { kind: file.kind, weights: WeightVector::new(values)?, config: file.config })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Candidate space this model predicts over when rolled out or evaluated per step.
    pub fn space(&self) -> CandidateSpace {
        match self.kind {
            ModelKind::Structured => CandidateSpace::Executable,
            ModelKind::Multiclass => CandidateSpace::PrimitivesOnly,
        }
    }
}
