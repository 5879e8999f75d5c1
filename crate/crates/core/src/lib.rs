//! Probabilistic forecasting for graph-structured sensor series: a
//! parameter-free graph diffusion ODE supplies a preliminary forecast, and a
//! residual-blended denoising diffusion model refines it.

pub mod config;
pub mod datasets;
pub mod error;
pub mod fsd;
pub mod graph;
pub mod metrics;
pub mod numerics;
pub mod ode_prior;
pub mod pipeline;
pub mod resfusion;
pub mod scalar;
pub mod schedule;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use numerics::Tensor;
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph32 = graph::SensorGraph<f32>;
pub type Graph64 = graph::SensorGraph<f64>;
pub type Schedule32 = schedule::NoiseSchedule<f32>;
pub type Schedule64 = schedule::NoiseSchedule<f64>;
pub type FsdModel32 = fsd::FsdModel<f32>;
pub type FsdModel64 = fsd::FsdModel<f64>;
pub type Checkpoint32 = resfusion::Checkpoint<f32>;
pub type Checkpoint64 = resfusion::Checkpoint<f64>;
