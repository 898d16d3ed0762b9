//! Structured prediction of robot primitive sequences.

pub mod corpus;
pub mod eval;
pub mod features;
pub mod learn;
pub mod model;
pub mod world;

pub use corpus::{generate_corpus, load_corpus, save_corpus, GeneratorConfig, SequenceExample};
pub use eval::{cross_validate, FeedbackMode, FeedbackPolicy, FeedbackScope, MetricsReport};
pub use features::{assemble, History, JointFeatureVector, DIM};
pub use learn::{train, train_multiclass, TrainConfig, TrainReport};
pub use model::{predict, rollout, top_k, ModelKind, ScoredAction, TrainedModel, WeightVector};
pub use world::{apply_primitive, Action, ObjectId, Primitive, Task, TaskSpec, WorldError, WorldState};
