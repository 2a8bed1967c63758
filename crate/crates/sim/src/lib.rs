//! Deterministic simulation of reference-oriented tensor storage.
//!
//! A [`Script`] describes actors (shard handles), the nodes they run on and
//! timed steps. [`run_script`] drives the real reference server and client
//! state machines through it on a virtual clock and returns the ordered
//! trace of every server decision and client transition. Running the same
//! script twice yields the same trace, byte for byte.
//!
//! Steps in an unordered group are issued at one instant in an order left
//! open; [`explore_interleavings`] runs every order and checks the script's
//! assertions against each trace.

pub mod bench;
mod explore;
pub mod script;
pub mod trace;
mod world;

pub use explore::{explore_interleavings, permutations, Exploration, Failure};
pub use script::{Action, Assertion, Script, Step};
pub use trace::Trace;
pub use world::{entry_word, FillRecord, Run};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("invalid script: {0}")]
    Parse(String),
    #[error("invalid script: unknown actor {0:?}")]
    UnknownActor(String),
    #[error("invalid script: {0}")]
    Invalid(String),
    #[error("{count} interleavings exceed the bound of {bound}")]
    TooManyInterleavings { count: u128, bound: u128 },
}

/// Runs a script, issuing grouped steps in declaration order.
pub fn run_script(script: &Script) -> Result<Run, SimError> {
    script.check()?;
    let orders: Vec<Vec<usize>> = script.groups.iter().map(|g| (0..g.steps.len()).collect()).collect();
    Ok(world::World::new(&script.linearize(&orders)).run())
}
