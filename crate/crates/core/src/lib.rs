pub mod autodiff;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod image_head;
pub mod model;
pub mod objectives;
pub mod params;
pub mod retrieval_eval;
pub mod scalar;
pub mod tensor;
pub mod text_encoder;
pub mod trainer;

pub use error::{Error, Result};

pub type Matrix32 = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Embedding32 = embedding::JointEmbedding<f32>;
pub type Embedding64 = embedding::JointEmbedding<f64>;
