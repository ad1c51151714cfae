pub mod cli;
pub mod data_store;
pub mod model;
pub mod error;
pub mod features;
pub mod eval;
pub mod nas;
pub mod nn;
pub mod protocol;
pub mod seed;
pub mod synth_hydro;
pub mod verify;
pub mod windowing;

pub use error::{Error, Result};
