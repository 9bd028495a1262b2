//! Evolutionary reinforcement learning with learning-based variation
//! operators.
//!
//! A population of directly encoded policy networks evolves alongside an
//! off-policy actor-critic agent. Offspring are produced by Q-filtered
//! distillation crossover and sensitivity-scaled (proximal) mutation, or by
//! the classic n-point crossover and Gaussian mutation for comparison.

pub mod analysis;
pub mod bench;
pub mod config;
pub mod env;
pub mod evolution;
pub mod experiment;
pub mod memory;
pub mod nn;
pub mod operators;
pub mod rl;
pub mod seeding;
