use crate::error::{bail_invalid, Result};

/// (1 - e^{-z}) / z, continuous at z = 0.
pub fn zoh_gain(z: f64) -> f64 {
    if z.abs() < 1e-5 {
        1.0 - z / 2.0 + z * z / 6.0 - z * z * z / 24.0
    } else {
        -(-z).exp_m1() / z
    }
}

/// Zero-order hold for a scalar diagonal entry: returns (λ̄, b̄).
pub fn zoh_discretize(lambda: f64, delta: f64, b: f64) -> Result<(f64, f64)> {
    if delta < 0.0 || delta.is_nan() {
        bail_invalid!("negative step size {}", delta);
    }
    if lambda < 0.0 || lambda.is_nan() {
        bail_invalid!("negative rate {}", lambda);
    }
    let z = lambda * delta;
    Ok(((-z).exp(), zoh_gain(z) * b * delta))
}

/// Forward-Euler input coefficient b̄ = bΔ.
pub fn euler_discretize_b(delta: f64, b: f64) -> f64 {
    b * delta
}
