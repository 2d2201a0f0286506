//! Learning an environment-independent internal representation of a
//! redundant arm's end-effector configuration from proprioception and
//! unordered exteroception, and reaching with the learned map's Jacobian.
//!
//! The pipeline: [`exploration`] samples postures and records what the
//! exteroceptor sees, [`isomap`] pre-trains the [`mlp`] onto an unfolding of
//! the exteroceptive set, [`trainer`] refines it with the pairwise
//! distance-preserving cost, and [`jacobian`] / [`reaching`] evaluate the
//! result against the arm's true kinematics in [`arm`].

pub mod arm;
pub mod error;
pub mod exploration;
pub mod isomap;
pub mod jacobian;
pub mod mlp;
pub mod pipeline;
pub mod reaching;
pub mod rprop;
pub mod sensors;
pub mod trainer;

pub use arm::{ArmGeometry, EndEffectorConfig, ProprioState, WorkspaceLimits};
pub use error::{Error, Result};
pub use exploration::{Dataset, ExplorationConfig, NormalizationStats};
pub use jacobian::{DivergenceReport, LearnedMap};
pub use mlp::NetworkParams;
pub use pipeline::{RunConfig, RunManifest, Scenario, Stage};
pub use reaching::{ReachTask, Trajectory};
pub use sensors::{Environment, ExteroState, RetinaGeometry};
pub use trainer::TrainConfig;
