#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod harness;
pub mod io;
pub mod lgssm;
pub mod linalg;
pub mod model;
pub mod neural;
pub mod objective;
pub mod optim;
pub mod params;
pub mod radar;
pub mod scalar;
pub mod seeds;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision instantiations, used for training.
pub mod f32 {
    pub type Tensor = crate::tensor::Tensor<f32>;
    pub type Graph = crate::autodiff::Graph<f32>;
    pub type ParamStore = crate::params::ParamStore<f32>;
    pub type ScalarField = crate::grid::ScalarField<f32>;
    pub type VectorField = crate::grid::VectorField<f32>;
    pub type Frame = crate::grid::Frame<f32>;
    pub type FieldSequence = crate::grid::FieldSequence<f32>;
    pub type RadarSet = crate::radar::RadarSet<f32>;
    pub type Observation = crate::radar::Observation<f32>;
    pub type Sample = crate::data::Sample<f32>;
    pub type LgssmParams = crate::lgssm::LgssmParams<f32>;
    pub type SmootherResult = crate::lgssm::SmootherResult<f32>;
}

/// Double-precision instantiations, used for evaluation, oracles and storage.
pub mod f64 {
    pub type Tensor = crate::tensor::Tensor<f64>;
    pub type Graph = crate::autodiff::Graph<f64>;
    pub type ParamStore = crate::params::ParamStore<f64>;
    pub type ScalarField = crate::grid::ScalarField<f64>;
    pub type VectorField = crate::grid::VectorField<f64>;
    pub type Frame = crate::grid::Frame<f64>;
    pub type FieldSequence = crate::grid::FieldSequence<f64>;
    pub type RadarSet = crate::radar::RadarSet<f64>;
    pub type Observation = crate::radar::Observation<f64>;
    pub type Sample = crate::data::Sample<f64>;
    pub type LgssmParams = crate::lgssm::LgssmParams<f64>;
    pub type SmootherResult = crate::lgssm::SmootherResult<f64>;
}
