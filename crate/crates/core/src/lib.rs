//! Online generalized method of moments for streaming, serially dependent data.

pub mod error;
pub mod estimator;
pub mod experiment;
pub mod inference;
pub mod linalg;
pub mod lrv;
pub mod model;
pub mod moments;
pub mod modwt;
pub mod offline;
pub mod sgmm;
pub mod simgen;

pub use error::{OgmmError, Result};
pub use estimator::{Diagnostics, ImplicitConfig, OgmmState, UpdateOptions, WeightingMode};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentResult, MetricsRow};
pub use inference::{AnomalySnapshot, ConfidenceRegion, TestReport};
pub use linalg::{Matrix, Vector};
pub use lrv::{KernelLrvConfig, KernelLrvState, WelfordState};
pub use model::{Batch, MomentModel, ObsContext, RowVisitor};
pub use moments::{GmwmMoment, IvMoment, Leqr, OlsMoment, SmoothedQuantileMoment};
pub use modwt::{ModwtState, WaveletStream};
pub use sgmm::{SgmmConfig, SgmmState};
pub use simgen::{Generator, SimModel};
