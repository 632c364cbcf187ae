pub mod agent;
pub mod checks;
pub mod dataset;
pub mod error;
pub mod freekd;
pub mod gnn;
pub mod graph;
pub mod multi;
pub mod prompt;
pub mod synthetic;
pub mod train;

pub use error::{CoreError, Result};
