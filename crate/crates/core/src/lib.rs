//! Robust flexible auto-weighted local-coordinate concept factorization,
//! the CF / LCCF / LCF baselines and the clustering evaluation metrics.

pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod factor;
pub mod linalg;
pub mod rfa;
pub mod seed;
pub mod trace;

pub use baselines::{BaselineParams, GraphWeights};
pub use data::{CorruptionSpec, DataMatrix, Preprocess};
pub use error::{Error, Result};
pub use eval::{ClusteringResult, EvalScores};
pub use factor::{FactorState, Hyperparams, ObjectiveBreakdown, UpdateIntermediates};
pub use trace::{FitTrace, IterRecord};
