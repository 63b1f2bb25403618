pub mod backend;
pub mod ecm;
pub mod error;
pub mod evalx;
pub mod formats;
pub mod grid;
pub mod pipeline;
pub mod scheduler;
pub mod trainer;

pub use error::{Error, Result};
