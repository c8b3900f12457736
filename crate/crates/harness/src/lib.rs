//! Sequence I/O, synthetic data, `.flo` files and the experiment presets
//! behind the `rsdflow` binary.

pub mod error;
pub mod flo;
pub mod io;
pub mod presets;
pub mod report;
pub mod synth;
