//! Simulation lab for representation fine-tuning (AdaptRep) versus frozen
//! representations (FrozenRep) on synthetic multi-task regression,
//! classification and two-layer network families.
//!
//! Pipeline: [`env_gen`] builds ground-truth task environments, [`source_train`]
//! learns a representation from the source tasks, [`target_adapt`] fine-tunes
//! it on a target task with projected gradient descent ([`pgd`]), and
//! [`metrics`] scores the result. [`hardcase`] holds the adversarial families
//! on which FrozenRep learns the wrong subspace, and [`experiment`] drives the
//! end-to-end separation study.

pub mod env_gen;
pub mod error;
pub mod experiment;
pub mod hardcase;
pub mod io;
pub mod lbfgs;
pub mod linalg;
pub mod metrics;
pub mod par;
pub mod pgd;
pub mod plot;
pub mod rng;
pub mod source_train;
pub mod target_adapt;
pub mod validate;

pub use error::{Error, Result};
