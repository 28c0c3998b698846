//! End-to-end drivers: smoothed nuclear-norm matrix completion and
//! Gaussian-process hyperparameter learning.

pub mod completion;
pub mod data;
pub mod gp;

pub use completion::{completion_objective, completion_train, CompletionProblem, CompletionResult};
pub use data::{load_movielens, RatingFormat, RatingSet};
pub use gp::{gp_negloglik, gp_train, GPProblem};
