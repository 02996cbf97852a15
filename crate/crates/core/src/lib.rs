//! Passivity-based decentralized controller synthesis for discrete-time
//! coupled LTI networks, with a DC-microgrid case study.

pub mod certification;
pub mod config;
pub mod discretization;
mod error;
pub mod linalg;
pub mod lqr;
pub mod microgrid;
pub mod model;
pub mod simulation;
pub mod synthesis;

pub use error::{Error, Result};
pub use passivnet_conic as conic;
