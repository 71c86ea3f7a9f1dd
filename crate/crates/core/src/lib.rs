//! Regression with sequences of affine maps and kernel-generated
//! diffeomorphisms, trained by discrete adjoint gradients and L-BFGS.
//!
//! A model is a chain such as `ADA`: an affine map, an Euler-integrated flow
//! of a vector field expanded over anchor points with a Matérn kernel, and a
//! final affine map. [`trainer::train`] runs the full pipeline from raw data;
//! [`predictor::predict`] transports new points along the cached anchor
//! trajectories.

pub mod adjoint;
pub mod baseline;
pub mod cli;
pub mod error;
pub mod flow;
pub mod kernels;
mod linalg;
pub mod objective;
pub mod optimizer;
pub mod points;
pub mod predictor;
pub mod preprocess;
pub mod sequence;
pub mod trainer;

pub use error::{Error, Result};
pub use points::Points;
pub use sequence::{parse_sequence, SequenceOverrides, SequenceSpec};
pub use trainer::{train, TrainConfig, TrainedModel};

/// Caps the global thread pool from `FINEMORPHS_THREADS`, if set. Returns the
/// cap that was applied.
pub fn init_thread_pool_from_env() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var("FINEMORPHS_THREADS") else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::invalid(format!("FINEMORPHS_THREADS must be a positive integer, got {raw:?}")))?;
    // a pool that was already built keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}
