//! Doubly robust estimation of the average causal effect of a binary exposure on
//! a continuous outcome: AIPW and TMLE with Super Learner nuisance models and
//! K-fold cross-fitting, plus a simulation harness for evaluating them.

pub mod data;
pub mod error;
pub mod folds;
pub mod learners;
pub mod rng;
pub mod superlearner;
pub mod estimators;
pub mod crossfit;
pub mod dgm;
pub mod metrics;
pub mod harness;

pub use crossfit::{estimate_effect, EstimatorConfig, LibraryRef};
pub use data::{Dataset, Schema};
pub use dgm::{DgmSpec, TruthRecord};
pub use error::{Error, Result};
pub use estimators::{EffectEstimate, Method, NuisancePredictions};
pub use folds::FoldPlan;
pub use harness::{run_benchmark, BenchmarkConfig};
pub use metrics::{PerformanceReport, ReplicationRecord};
pub use rng::RngStream;
pub use superlearner::Library;
