//! Oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

pub mod adjoint;
pub mod block;
pub mod metric_oracles;
