pub mod blocks;
pub mod error;
pub mod evalkit;
pub mod gradsuite;
pub mod io;
pub mod hilbert;
pub mod init;
pub mod memory;
pub mod metrics;
pub mod net;
pub mod numkernel;
pub mod prompt;
pub mod ssm;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
