//! Action-sufficient state representations for linear-Gaussian POMDPs.

pub mod belief;
pub mod bench;
pub mod env;
pub mod harness;
pub mod identify;
pub mod io;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod objective;
pub mod policy;

pub use env::{LinearEnv, LinearModelParams, Trajectory, TrajectoryBatch};
pub use error::{AsrError, Result};
pub use graph::{asr_indices, StructuralGraph};
