//! Variational coarse-graining of Boltzmann densities.
//!
//! A latent-variable model `q(z) q(x|z)` is fit to `p(x) ~ exp(-beta U(x))`
//! by maximizing a lower bound on `log Z`, using only energies and forces.
//! The inverse temperature is raised adaptively from near zero to the target.

pub mod autodiff;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod objective;
pub mod potentials;
pub mod reference;
pub mod stats;
pub mod tempering;
pub mod train;

pub use config::{Preset, RunConfig};
pub use error::{Error, Result};
pub use model::{Architecture, CgModel, Checkpoint, JointNoise, JointSample, LayerSpec};
pub use objective::{AdamConfig, AdamState, GradBatch, ObjectiveEstimate};
pub use potentials::{Potential, PotentialSpec};
