//! Anchor-function tasks, a small float64 autodiff engine, three model
//! families and closed-form gradient-flow oracles for studying how the
//! initialization scale biases training toward rule-based reasoning over
//! memorization.

pub mod analysis;
pub mod linalg;
pub mod models;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod theory;
pub mod training;
