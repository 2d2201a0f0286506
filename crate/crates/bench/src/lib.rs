//! Fixtures shared by the benchmarks.

use kinemap_core::arm::{ArmGeometry, WorkspaceLimits};
use kinemap_core::exploration::{explore, ExplorationConfig};
use kinemap_core::sensors::PositionSensor;
use kinemap_core::Dataset;

/// Scenario-1 exploration of `n` samples.
pub fn position_dataset(n: usize, seed: u64) -> Dataset {
    let cfg = ExplorationConfig {
        n_samples: n,
        seed,
        ..ExplorationConfig::default()
    };
    explore(&cfg, &PositionSensor, &WorkspaceLimits::default(), &ArmGeometry::default(), None)
        .expect("default exploration succeeds")
}
