//! Uplink fractional power control optimisation from measurement statistics.

pub mod baseline;
pub mod evaluate;
pub mod measurements;
pub mod netmodel;
pub mod optcore;
pub mod pipeline;
pub mod rng;
pub mod solver_ce;
pub mod solver_sl;
pub mod units;
