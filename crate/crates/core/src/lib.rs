pub mod error;
pub mod eval;
pub mod cli;
pub mod client;
pub mod extract;
pub mod generator;
pub mod numerics;
pub mod orchestrator;
pub mod privacy;
pub mod server;

pub use error::{Error, Result};
