//! C ABI surface. See `include/psm.h` for the matching header.

pub mod capi;

pub use capi::*;
