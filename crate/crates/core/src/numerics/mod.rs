//! Dense arrays, symmetric eigensolver, seeded randomness, and the gradient tape.

mod eigh;
mod optim;
mod params;
mod rng;
mod tape;
mod tensor;

pub use eigh::{eigh_symmetric, SymmetricEigen};
pub use optim::{Adam, AdamConfig};
pub use params::ParamStore;
pub use rng::RngStream;
pub use tape::{Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
