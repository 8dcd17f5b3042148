//! Multi-stage (scenario-tree) robust NMPC and training-data generation.

pub mod dataset;
pub mod newton;
pub mod ocp;
pub mod solver;
pub mod tree;

pub use dataset::{generate_dataset, Dataset, DatasetConfig, DatasetKind, DatasetMeta, FeasibleBox, Sample};
pub use newton::{minimize_newton, Arrowhead, ArrowheadObjective};
pub use ocp::{kappa_ms, KappaMs, MsNmpc, NlpSolution, OcpConfig};
pub use solver::{
    minimize_box, BoxObjective, BoxSolution, SolveStatus, SolverMethod, SolverOptions,
};
pub use tree::{build_tree, Branch, ScenarioTree, TreeConfig};
