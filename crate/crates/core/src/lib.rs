//! Textbook question answering pipeline: terminology-corpus curation, span
//! masking, cross-guided multimodal attention and a gated model ensemble.

pub mod cgma;
pub mod config;
pub mod corpus;
pub mod gme;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod retrieval;
pub mod scalar;
pub mod text;
pub mod trainer;

pub use config::{ModelConfig, RunConfig};
pub use gme::{EnsembleWeights, OptionScores};
pub use model::MocaModel;
pub use numerics::{Matrix, ParamStore, Tape, Var};
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type Model64 = MocaModel<f64>;
pub type Model32 = MocaModel<f32>;
