//! Experiment orchestration for the attack lab: sweeps over attacked-view
//! counts and patch sizes, CSV tables, SVG plots and the `nerfattack` CLI.

pub mod artifacts;
pub mod cli;
pub mod plot;
pub mod provenance;
pub mod report;
pub mod sweep;
pub mod table;
