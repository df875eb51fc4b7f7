//! Discretization, selective-scan recurrences and the surrounding block
//! (embedding, short convolutions, gate, output head).

mod block;
mod discretize;
mod layers;
mod scan;

pub use block::{
    block_forward, BlockTrace, DeltaProj, Evaluator, MambaBlock, Provenance, SsmParams,
};
pub use discretize::{euler_discretize_b, zoh_discretize, zoh_gain};
pub use layers::{gate, short_conv, Act, ConvKernel, Gate, Linear};
pub(crate) use scan::scan_with_states;
pub use scan::{
    scan_dual, scan_parallel, scan_sequential, scan_with, InputDisc, MixerKind, ScanAlgo,
    ScanInputs, ScanOutput,
};
