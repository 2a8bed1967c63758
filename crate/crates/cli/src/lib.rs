//! Operator commands behind the `ros` binary.

pub mod bench;
pub mod exit;
pub mod synth;
pub mod workers;
