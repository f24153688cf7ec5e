//! Federated meta-learning on softmax regression: FedML, a distributionally
//! robust variant, fast adaptation at target nodes, and numerical checks of
//! the convergence analysis.

pub mod analysis;
pub mod data;
pub mod error;
pub mod federation;
pub mod linalg;
pub mod model;
pub mod robust;

pub use error::{Error, Result};
