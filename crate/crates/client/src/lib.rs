//! Worker-side handles for reference-oriented tensor storage.
//!
//! A [`ShardHandle`] registers a set of named byte regions, publishes them
//! as versions, and replicates versions other workers published. The
//! reference server only brokers references; bytes move directly between
//! workers through a [`DataPlane`].

mod config;
mod conn;
pub mod core;
mod error;
pub mod fill;
mod handle;

pub use config::{ClientConfig, DataPlane};
pub use conn::Connection;
pub use core::{HandleCore, HandleState, Resolution};
pub use error::ClientError;
pub use fill::FillJob;
pub use handle::{close_group, on_each, ShardHandle};
