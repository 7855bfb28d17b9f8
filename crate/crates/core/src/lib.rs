//! Data-driven analysis and stabilization of linear discrete-time descriptor
//! systems `E x_{k+1} = A x_k + B u_k`.
//!
//! The pipeline only touches the plant through [`experiments::Plant`]: three
//! experiment families produce data matrices `(D_E, D_A, D_B)` from which the
//! system type, causality and C-/Y-/R-controllability are decided, and a
//! state-feedback gain for the slow subsystem is computed from an LMI.

pub mod analysis;
pub mod campaign;
pub mod error;
pub mod experiments;
pub mod io;
pub mod kernels;
pub mod lmi;
pub mod model;
pub mod rng;
pub mod stabilization;

pub use analysis::{
    ControllabilityReport, Delta, NoiseMode, RankTest, SystemKind, TypeVerdict, Verdicts,
};
pub use error::{Error, LmiFailure, Result};
pub use experiments::{DataMatrices, ExperimentConfig, Plant, RecordedPlant, SimulatedPlant};
pub use kernels::{Matrix, RankTolerance, Vector, C64};
pub use model::{DescriptorSystem, NoiseSpec, SlowFastForm, Trajectory};
pub use stabilization::StabilizationResult;
