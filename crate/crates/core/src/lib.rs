//! Text-only pre-alignment: align a frozen language backbone to video
//! features using textual videos only, then project real image features
//! into the text feature space at inference.

pub mod autodiff;
pub mod scalar;
pub mod tensor;
pub mod tideo_data;
pub mod seeding;
pub mod tideo_gen;
pub mod dual_encoder;
pub mod memory_projection;
pub mod tokenizer;
pub mod tensorfile;
pub mod optim;
pub mod backbone;
pub mod fingerprint;
pub mod aligner;
pub mod synthetic_world;
pub mod eval_harness;
pub mod experiment;
#[cfg(test)]
mod testing;

pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type SequenceRepresentation32 = dual_encoder::SequenceRepresentation<f32>;
pub type SequenceRepresentation64 = dual_encoder::SequenceRepresentation<f64>;
pub type SupportMemory32 = memory_projection::SupportMemory<f32>;
pub type SupportMemory64 = memory_projection::SupportMemory<f64>;
pub type TinyTransformer32 = backbone::TinyTransformer<f32>;
pub type TinyTransformer64 = backbone::TinyTransformer<f64>;
pub type AlignParams32 = aligner::AlignParams<f32>;
pub type AlignParams64 = aligner::AlignParams<f64>;
pub type Checkpoint32 = aligner::Checkpoint<f32>;
pub type Checkpoint64 = aligner::Checkpoint<f64>;
