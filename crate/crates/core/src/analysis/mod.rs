mod approx;
mod histogram;
mod sensitivity;

pub use approx::{
    approx_rate, fourier_errors, ols_slope, select_wavelets, wavelet_errors, ApproxConfig,
    ApproxMethod, ApproxRateReport, PiecewiseConstant,
};
pub use histogram::{
    bin_index, block_exponent_sums, decay_histogram, DecayHistogram, GroupBy, DEFAULT_BINS,
};
pub use sensitivity::{
    check_lemma3_condition, sensitivity_analytic, sensitivity_fd, sensitivity_report, Lemma3Check,
    ScalarSsm, SensKind, SensitivityReport,
};
