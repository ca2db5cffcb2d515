//! Desk-scale laboratory for memory-persistent graph navigation.
//!
//! The crate is organized around a pipeline: [`env`] generates synthetic
//! viewpoint-graph scenes and tours, [`world`] trains a latent dynamics
//! model whose imagined rollouts query the dual-bank memory in [`memory`],
//! [`nav`] fuses three scoring branches into navigation decisions, and
//! [`metrics`] evaluates the resulting traces. [`harness`] wires these into
//! reproducible, seeded experiments.

pub mod env;
pub mod memory;
pub mod tensor;
pub mod world;
