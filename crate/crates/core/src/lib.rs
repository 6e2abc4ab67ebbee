//! Covariate adjustment for randomized trials: data handling, variable
//! selection, imputation, treatment-effect estimators and a simulation lab.

pub mod dataset;
pub mod error;
pub mod estimators;
pub mod glm;
pub mod imputer;
pub mod lasso;
pub mod linalg;
pub mod pipeline;
pub mod selector;
pub mod simlab;
pub mod stats;

pub use error::{Error, Result};
