//! LEXNet: a small prototype CNN, interpretable by construction, for classifying
//! encrypted traffic flows from the size and direction of their first packets.

pub mod backbone;
pub mod bench;
pub mod error;
pub mod exec;
pub mod explain;
pub mod flowdata;
pub mod io;
pub mod lproto;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Execution;
