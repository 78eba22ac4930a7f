//! Library half of the `hla` binary: kernel dispatch, timing and the
//! verification suites, shared with the acceptance target.

pub mod bench;
pub mod kernels;
pub mod suites;
