//! Guided-tutoring fine-tuning pipeline at desk scale.
//!
//! The numeric modules are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root pick `f64` for training and algebra, which is
//! what the CLI and service use.

pub mod astseg;
pub mod corpus;
pub mod eval;
pub mod embed;
pub mod fixtures;
pub mod lora;
pub mod overlap;
pub mod scalar;
pub mod train;
pub mod tutor;
pub mod vectordb;

pub use scalar::Scalar;

pub type Model = train::TinyModel<f64>;
pub type Net = overlap::OverlapNet<f64>;
pub type Index = vectordb::VectorIndex<f64>;
pub type Adapter = lora::LoraAdapter<f64>;
pub type Vector = embed::Embedding<f64>;
