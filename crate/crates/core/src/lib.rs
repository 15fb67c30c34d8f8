//! Holomorphic equilibrium propagation.
//!
//! Convergent networks are driven to fixed points under complex teaching
//! signals `beta`, and loss gradients are read off as the first Fourier
//! coefficient of `dF/dtheta` along a circle of nudges.

// `!(x > 0.0)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod estimators;
pub mod experiments;
pub mod model;
pub mod oracle;
pub mod tensor;
pub mod trainer;

pub use dynamics::{settle, Equilibrium, NetProblem, NudgePath, SettleConfig, SettleResult, StepNoise, ToyModel};
pub use estimators::{
    classic_ep, hep_estimate, online_estimate, EstimatorError, EstimatorKind, GradientEstimate, OnlineConfig, PhaseConfig,
};
pub use experiments::{cosine_sweep, orbit_trace, stability_map, StabilityGrid, StabilityMap, SweepAxis, SweepResult};
pub use model::{
    Activation, LayerParams, LayerSpec, ModelError, Network, NetworkSpec, NetworkState, ParamIndex, ParamSet, Params,
    PoolSpec,
};
pub use oracle::{cosine_similarity, unrolled_adjoint_gradient, AdjointOracle, SimilarityReport};
pub use tensor::{ComplexScalar, ComplexTensor, RealTensor, Scalar, Tensor, C64};
pub use trainer::{evaluate, load_mnist, synth_dataset, train, Checkpoint, Dataset, TrainConfig};
