//! Differentiable building blocks, written out by hand in double precision.

pub mod activation;
pub mod dense;
pub mod gradcheck;
pub mod init;
pub mod loss;
pub mod nadam;
pub mod recurrent;

pub use activation::Activation;
pub use dense::{Dense, DenseCache, DenseGrads};
pub use gradcheck::{GradCheckReport, Objective};
pub use loss::{mae_loss, RegSpec};
pub use nadam::{NadamConfig, NadamState};
pub use recurrent::{CellType, Recurrent, RecurrentGrads, RecurrentTape};

use ndarray::{Array, Dimension};

/// Row-major copy of an array's elements.
pub fn flat<D: Dimension>(a: &Array<f64, D>) -> Vec<f64> {
    a.iter().copied().collect()
}
