//! Higher-order linear attention kernels.
//!
//! Second-order HLA, its asymmetric variant (AHLA) and third-order HLA as
//! strictly causal streaming recurrences; a chunk-parallel associative-scan
//! path that reproduces the serial second-order and AHLA recurrences;
//! brute-force oracles for every operator; and a reverse-mode pass for the
//! masked second-order kernel.
//!
//! Everything operates on a single head. Inputs and outputs are `f64`; the
//! second-order and AHLA states accumulate in double-double (see [`dd`]).

pub mod ahla;
pub mod batch;
pub mod dd;
pub mod error;
pub mod fixtures;
pub mod grad;
pub mod hla2;
pub mod hla3;
pub mod matrix;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod scan;
pub mod tensor_io;

pub use ahla::{ahla_forward, StateA};
pub use batch::{KernelConfig, OutputBatch, TokenBatch};
pub use dd::{Dd, DdMatrix};
pub use error::{HlaError, Result};
pub use grad::{fd_gradient, hla2_backward, GradTriple};
pub use hla2::{hla2_forward, hla2_unmasked_forward, State2};
pub use hla3::{hla3_forward, State3};
pub use matrix::Matrix;
pub use metrics::max_rel_err;
pub use oracle::{
    affinity_masked, linear_attention_identity, oracle_ahla, oracle_hla2, oracle_hla2_unmasked,
    oracle_hla2_value_adjoint, oracle_hla3, oracle_t2_factorization, MaskedAffinity,
};
pub use rng::{gauss_tokens, splitmix64_next, SplitMix64};
pub use scan::{
    ahla_chunked_forward, exclusive_scan, hla2_chunked_forward, ScanSegment, Segment2, SegmentA,
};
pub use tensor_io::{read_tensor, write_tensor, Dtype};
