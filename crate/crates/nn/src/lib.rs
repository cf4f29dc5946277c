//! Minimal tensor math with reverse-mode automatic differentiation.
//!
//! Everything the registration network needs and nothing else: dense
//! row-major matrices on a single-use tape, MLP and multi-head attention
//! blocks, a differentiable weighted rigid-alignment op, Adam with a
//! plateau schedule, finite-difference gradient checking, and a versioned
//! binary checkpoint container.
//!
//! A graph is single-threaded; independent graphs (one per point-set
//! pair) can run on separate threads.

mod adam;
mod blocks;
mod error;
mod gradcheck;
mod graph;
mod params;
mod procrustes;
mod scalar;

pub use adam::{Adam, AdamConfig, PlateauScheduler};
pub use blocks::{affine, scaled_dot_attention, BoundParams, MhaSpec, MlpSpec};
pub use error::{Error, Result};
pub use gradcheck::{
    check_primitives, grad_check, grad_check_strided, GradCheckFailure, GradCheckReport,
    PrimitiveCheck,
};
pub use graph::{Graph, TensorId};
pub use params::{ParamEntry, ParamStore};
pub use scalar::Scalar;
