pub mod corpus;
pub mod error;
pub mod eval;
pub mod mdp;
pub mod model;
pub mod pipeline;
pub mod rewards;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod trainers;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, ParamStore};

pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type PolicyModel32 = model::PolicyModel<f32>;
pub type PolicyModel64 = model::PolicyModel<f64>;
