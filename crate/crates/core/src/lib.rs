//! Simulation of the Abelian sandpile with and without dissipation on boxes
//! of Z² and Z³: toppling, the burning test, the spanning-tree coding,
//! Wilson sampling with coupled arrow stacks, and rate-of-convergence
//! experiments.

pub mod bijection;
pub mod burning;
pub mod cli;
pub mod coupling;
pub mod error;
pub mod lattice;
pub mod oracle;
pub mod par;
pub mod rng;
pub mod sandpile;
pub mod stats;
pub mod walks;
pub mod wilson;

pub use error::{Error, Result};
