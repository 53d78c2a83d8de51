#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Unsupervised prompt tuning for frozen graph neural networks.
//!
//! A small GNN is pre-trained on a source split, frozen, and then adapted to a
//! covariate-shifted target split by training only an additive feature prompt
//! with pseudo-label consistency, diversity and adversarial regularization.

pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod gnn;
pub mod graphdata;
pub mod objectives;
pub mod prompting;
pub mod shiftsplit;
pub mod trainer;

pub use autodiff::Tensor;
pub use error::{Error, Result};
pub use graphdata::{Dataset, Graph};
