#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adapt;
pub mod dataflow;
pub mod error;
pub mod mcache;
pub mod reuse;
pub mod rpq;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
