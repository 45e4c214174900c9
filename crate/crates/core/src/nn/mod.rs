//! Minimal neural-network substrate: autodiff tape, parameter store, layers.

pub mod layers;
pub mod params;
pub mod tape;

pub use params::{Adam, ParamStore};
pub use tape::{Grads, Tape, Var};
