//! Helpers shared across unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Relative error with an absolute floor on the denominator, the usual
/// guard for comparing analytic and finite-difference gradients.
pub(crate) fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// One-sided DFT magnitudes by direct O(n^2) summation, the independent
/// oracle for everything FFT-shaped. `samples` are zero-padded to `n_fft`.
pub(crate) fn naive_dft_magnitude(samples: &[f64], n_fft: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_fft / 2 + 1);
    for k in 0..=n_fft / 2 {
        let (mut re, mut im) = (0.0f64, 0.0f64);
        for (n, &x) in samples.iter().enumerate().take(n_fft) {
            let angle = -2.0 * std::f64::consts::PI * k as f64 * n as f64 / n_fft as f64;
            re += x * angle.cos();
            im += x * angle.sin();
        }
        out.push((re * re + im * im).sqrt());
    }
    out
}
