//! Files, checkpoints and batch runs around `vilu-core`.
//!
//! The `vilu` binary wraps the entry points here: [`dataset`] for the NRRD
//! case store and its manifest, [`run::train`] and [`eval::evaluate`] for
//! file-based training and scoring, [`overlay`] for PNG inspection slices.

pub mod checkpoint;
pub mod config;
pub mod dataset;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod nrrd;
pub mod overlay;
pub mod run;

pub use error::{Error, Result};

/// Caps the global rayon pool at `VILU_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("VILU_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("VILU_THREADS must be a positive integer, got {v:?}")))?;
    // A second initialisation in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
