//! Closed-form weights for the recall tasks, Mamba basis functions and Haar
//! wavelets, and Johnson-Lindenstrauss embeddings.

mod basis;
mod builders;
mod jl;

pub use basis::{
    build_wavelet_triplet, eval_basis_grid, eval_mamba_basis, haar, triplet_grid, BasisSpec,
    WaveletIndex, DEFAULT_QUAD_STEP,
};
pub use builders::{
    build_induction_heads_dt, build_keep_nth, build_mqar_mamba, build_mqar_mamba2, build_mqar_s4d,
    build_time_recovery, EmbedMode, TimeRecovery, DEFAULT_EPSILON, KEEP_B_SCALE, KEEP_DELTA_WRITE,
    W_DELTA,
};
pub use jl::{
    jl_dim, jl_projection, jl_projection_with_ones, JlProjection, DEFAULT_MAX_RESAMPLES, JL_DELTA,
};
