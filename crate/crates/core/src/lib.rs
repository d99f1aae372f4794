//! Global variational inference for unsupervised domain adaptation.

pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod data;
pub mod nets;
pub mod priors;
pub mod codebook;
pub mod robust;
pub mod adversarial;
pub mod trainer;
pub mod baselines;
pub mod cli;
