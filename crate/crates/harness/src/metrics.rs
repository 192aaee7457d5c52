//! CIR comparison and reference curves.

use backsim_core::ranging::CirEstimate;
use libm::erfc;

use crate::{HarnessError, Result};

fn peak(m: &[f64]) -> (usize, f64) {
    m.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
}

/// Max-normalize both magnitude profiles, rotate `measured` so its peak
/// sits on the analytic peak, and return `(Σ|a−b| / Σ|b|, shift)` with
/// `b` the analytic profile. `shift` is how far `measured` was rotated.
pub fn nmae_align(analytic: &CirEstimate, measured: &CirEstimate) -> Result<(f64, usize)> {
    let n = analytic.taps.len();
    if measured.taps.len() != n {
        return Err(HarnessError::Invalid("CIRs differ in length".into()));
    }
    let a = analytic.magnitude();
    let b = measured.magnitude();
    let (ia, ma) = peak(&a);
    let (ib, mb) = peak(&b);
    if !(ma > 0.0) || !(mb > 0.0) {
        return Err(HarnessError::Invalid("all-zero CIR".into()));
    }
    let shift = (ia + n - ib) % n;
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..n {
        let m = b[(k + n - shift) % n] / mb;
        let r = a[k] / ma;
        num += (m - r).abs();
        den += r;
    }
    Ok((num / den, shift))
}

/// Gaussian tail `Q(x)`.
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Coherent BPSK bit error rate at per-bit SNR `γ_b` (linear).
pub fn bpsk_ber(gamma_b: f64) -> f64 {
    q_function((2.0 * gamma_b).sqrt())
}
