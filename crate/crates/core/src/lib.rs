pub mod beta_posterior;
pub mod cli;
pub mod closed_form;
pub mod divergence;
pub mod error;
pub mod gibbs;
pub mod imputation;
pub mod linalg;
pub mod mcse;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod quadrature;
pub mod rng;
pub mod synthetic;

pub use error::{Error, ErrorKind, Result};
