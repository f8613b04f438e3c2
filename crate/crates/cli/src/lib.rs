//! Command-line front end and live-trial service for `pairsim`.

pub mod cli;
pub mod serve;
