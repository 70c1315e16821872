//! Estimation, simulation and reporting for multivariate ordered-logit panels of
//! repeated opinion ratings collected over a series of deliberative workshops.

pub mod cli;
pub mod config;
pub mod data;
pub mod design;
pub mod draws;
pub mod error;
pub mod estimation;
pub mod inference;
pub mod likelihood;
pub mod model;
pub mod optimize;
pub mod params;
pub mod reporting;
pub mod synthesis;

pub use config::ModelConfig;
pub use data::{load_dataset, write_dataset, Dataset, Stakeholder};
pub use error::{Error, Result};
pub use params::{ParamLayout, ParameterVector};
