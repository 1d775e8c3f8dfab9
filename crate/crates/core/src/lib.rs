//! Online multi-entity probabilistic load forecasting.
//!
//! The state is the vector of K entity loads, modeled per calendar type
//! by Gaussian transition and observation conditionals. Parameters are
//! learned by exponentially-weighted recursive updates; forecasts fuse
//! the transition roll-forward with observation information, carrying a
//! full cross-entity error covariance that can be sparsified without
//! losing positive semidefiniteness.

pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod forecaster;
pub mod gaussian;
pub mod learner;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod sparsifier;

pub use config::{LearnScope, RunConfig};
pub use error::{Error, Result};
pub use forecaster::{prediction_step, ProbabilisticForecast};
pub use gaussian::{GaussianDensity, SymMatrix};
pub use learner::{learning_step, recursive_update, TrainingSlice, UpdateOrder};
pub use metrics::{ScoreAccumulator, Scores};
pub use model::{init_model, CalendarModel, ConditionalModel, ModelBank};
