//! Causal mediation analysis with zero-inflated mixture mediators.

pub mod effects;
pub mod em;
pub mod error;
pub mod exec;
mod gradient;
pub mod io;
pub mod likelihood;
pub mod mediator;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod quadrature;
pub mod select;
pub mod simulate;

pub use error::{Error, Result};
pub use exec::Execution;
pub use model::*;
