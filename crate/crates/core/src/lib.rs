//! Interactive imitation learning with consensus-based action arbitration.
//!
//! The executed action is the weighted L_p-norm central tendency of an
//! ensemble policy's candidates and the expert's action; the ensemble is
//! trained with an explicit constraint on its disagreement with the expert
//! and explores with unit-variance red noise.

pub mod checkpoint;
pub mod consensus;
pub mod envs;
pub mod exploration;
pub mod interaction;
pub mod optim;
pub mod policy;
pub mod teleop;
pub mod training;

/// An action in normalised bounds, one entry per action dimension.
pub type ActionVector = Vec<f64>;
