//! Finite-difference gradient verification.
//!
//! Central differences with h = 1e-5 against the tape's analytic gradients.
//! Callers must make the evaluated function deterministic: any sampling
//! inside the closure has to draw from a freshly seeded generator so both
//! side evaluations see identical noise, which keeps discrete decisions
//! (boundary thresholds) frozen across the +/-h evaluations.

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative error between an analytic and a numeric derivative, guarded for
/// tiny magnitudes.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-8 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Check analytic gradients of `loss(params)` for one flat parameter buffer.
///
/// `eval` maps the parameter values to the scalar loss; `analytic` is the
/// gradient produced by a backward pass over the same function. Only the
/// entries in `indices` are perturbed (pass all indices for small tensors).
/// Returns the worst relative error observed.
pub fn check_grad_entries(
    params: &mut [f64],
    indices: &[usize],
    analytic: &[f64],
    mut eval: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for &i in indices {
        let saved = params[i];
        params[i] = saved + FD_STEP;
        let up = eval(params);
        params[i] = saved - FD_STEP;
        let down = eval(params);
        params[i] = saved;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

/// Evenly spread sample of `count` indices over `len` entries, always
/// including the first and last.
pub fn sample_indices(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut out: Vec<usize> = (0..count)
        .map(|i| i * (len - 1) / (count - 1).max(1))
        .collect();
    out.dedup();
    out
}
