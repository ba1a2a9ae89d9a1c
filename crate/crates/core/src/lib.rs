//! Gridded pollution forecasting from sparse mobile-sensor data.

pub mod ablate;
pub mod deeponet;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod grid;
pub mod par;
pub mod pde;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
