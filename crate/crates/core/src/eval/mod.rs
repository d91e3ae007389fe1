//! Evaluation protocols: verification, accuracy, operating points, the
//! branch-depth grid and linear probes.

mod grid;
mod metrics;
mod operating;
mod probe;
mod verify;

pub use grid::{branch_grid, grid_task, GridConfig, GridResult, GridTask};
pub use metrics::{accuracy, cosine_similarity};
pub use operating::{above_one, rates_at, select_operating_point, OperatingPoint};
pub use probe::{invariance_probe, probe_config, ProbeFactor, ProbeResult};
pub use verify::{best_threshold, verify, verify_scores, SplitResult, VerificationPair, VerifyReport};
