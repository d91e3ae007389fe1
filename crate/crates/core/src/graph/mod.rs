//! Trunk architecture description, accounting, resolution of stage
//! repeat counts, and graph evaluation.

mod accounting;
mod arch;
mod exec;
mod resolver;
mod spec;

pub use accounting::{
    count_flops, count_params, head_cost, head_params, FlopConvention, FlopCount, LayerFlops,
    ParamCount,
};
pub use arch::{ArchConfig, Scale, StageConfig};
pub use exec::{backward, backward_to, forward, infer_nodes, run_from, run_range, ForwardPass, Gradients, Mode};
pub use resolver::{evaluate_candidate, resolve_architecture, Candidate, Constraints, Resolution, SoftResidual, SoftTarget};
pub use spec::{
    build_trunk, linear_graph, Dims, GraphSpec, LayerKind, LayerNode, BRANCH_POINTS, INPUT,
};
