//! Tensors, parameter registry, seeded randomness and the gradient-check oracle.

pub mod checkpoint;
pub mod gradcheck;
pub mod linalg;
pub mod params;
pub mod rng;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointEntry};
pub use gradcheck::{grad_check, FnObjective, grad_check_with, GradCheckOptions, GradCheckReport, Objective};
pub use params::{ParamGrads, ParamId, ParamValues, ParameterSet};
pub use rng::{trunc_normal_init, Rng};
pub use tensor::Tensor;
