//! Split and splitfed learning alongside federated averaging, over a framed
//! transport with a byte-accurate communication ledger.

// `!(x > 0.0)` style checks deliberately reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod privacy;
pub mod protocols;
pub mod rng;
pub mod transport;

pub use error::{Error, Result};
