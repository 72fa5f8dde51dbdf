//! Committee distillation for small recommendation models.
//!
//! A student asks each teacher in a committee a learned "question" (a
//! projection of its own embedding output injected into the teacher),
//! turns the teacher's hidden state back into an "answer" in its own
//! space, and learns from the answers weighted by per-teacher importance.
//!
//! Modules, bottom up: [`tensor`] (tensors, reverse-mode tape, optimizers),
//! [`data`] (rating datasets, encodings, synthetic generator), [`models`]
//! (embedding + MLP models with tap and injection points), [`committee`]
//! (question/answer augmenters, importance, distillation loss) and
//! [`training`] (loops, baselines, reports).

pub mod committee;
pub mod data;
pub mod error;
pub mod models;
pub mod tensor;
pub mod training;

pub use committee::{
    distill_loss, select_teachers, write_importance_csv, AnswerAugmenter, DistillModule, ImportanceVector,
    QuestionAugmenter, TeacherDims,
};
pub use data::{Batch, Dataset, DatasetSchema, FeatureView, RatingExample, SyntheticConfig};
pub use error::{Error, Result};
pub use models::{build, ModelSpec, Role, TapModel};
pub use tensor::{HasParams, Parameter, Tape, Tensor, Var};
pub use training::{CommitteeConfig, RunReport, TrainConfig, TrainData};
