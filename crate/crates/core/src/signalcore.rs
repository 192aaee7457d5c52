//! Numeric primitives shared by every other module.
//!
//! Transforms are unitary in both directions:
//! `y[k] = N^{-1/2} Σ x[n] e^{-j2πkn/N}` and its adjoint. Arbitrary sizes are
//! supported (odd `N = 23` and `N' = 4096` are both used).

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, Result};

pub type ComplexVec = Vec<Complex64>;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(size: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(size)
        } else {
            p.plan_fft_forward(size)
        }
    })
}

/// In-place unitary forward transform.
pub fn fft_inplace(buf: &mut [Complex64]) {
    if buf.is_empty() {
        return;
    }
    plan(buf.len(), false).process(buf);
    let s = 1.0 / (buf.len() as f64).sqrt();
    buf.iter_mut().for_each(|v| *v *= s);
}

/// In-place unitary inverse transform.
pub fn ifft_inplace(buf: &mut [Complex64]) {
    if buf.is_empty() {
        return;
    }
    plan(buf.len(), true).process(buf);
    let s = 1.0 / (buf.len() as f64).sqrt();
    buf.iter_mut().for_each(|v| *v *= s);
}

fn check_size(x: &[Complex64], size: usize) -> Result<()> {
    if size == 0 || size != x.len() {
        return invalid(format!("transform size {size} does not match length {}", x.len()));
    }
    Ok(())
}

/// Unitary DFT of `x`; `size` must equal `x.len()`.
pub fn dft(x: &[Complex64], size: usize) -> Result<ComplexVec> {
    check_size(x, size)?;
    let mut y = x.to_vec();
    fft_inplace(&mut y);
    Ok(y)
}

/// Unitary inverse DFT of `x`; `size` must equal `x.len()`.
pub fn idft(x: &[Complex64], size: usize) -> Result<ComplexVec> {
    check_size(x, size)?;
    let mut y = x.to_vec();
    ifft_inplace(&mut y);
    Ok(y)
}

/// Magnitude of the cross-correlation `|Σ t*[n] s[lag+n]|` at every lag, and
/// the lag of the maximum (first one on ties).
pub fn sliding_correlate(stream: &[Complex64], template: &[Complex64]) -> Result<(usize, Vec<f64>)> {
    if template.is_empty() || template.len() > stream.len() {
        return invalid("template must be non-empty and no longer than the stream");
    }
    let lags = stream.len() - template.len() + 1;
    let mut mags = Vec::with_capacity(lags);
    for lag in 0..lags {
        let acc: Complex64 = template
            .iter()
            .zip(&stream[lag..])
            .map(|(t, s)| t.conj() * s)
            .sum();
        mags.push(acc.norm());
    }
    let mut best = 0;
    for (i, &m) in mags.iter().enumerate() {
        if m > mags[best] {
            best = i;
        }
    }
    Ok((best, mags))
}

/// `Σ_{n=0}^{N-1} e^{-j2πnx} = e^{-jπ(N-1)x} sin(πNx)/sin(πx)`.
///
/// `nprime` only documents the oversampled grid the offset lives on.
pub fn dirichlet(n: usize, nprime: usize, x: f64) -> Complex64 {
    debug_assert!(n <= nprime);
    let s = (std::f64::consts::PI * x).sin();
    if s.abs() < 1e-9 {
        // Near an integer the ratio is numerically 0/0; the finite sum is exact.
        return (0..n)
            .map(|m| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * m as f64 * x))
            .sum();
    }
    let nf = n as f64;
    let ratio = (std::f64::consts::PI * nf * x).sin() / s;
    Complex64::from_polar(ratio, -std::f64::consts::PI * (nf - 1.0) * x)
}

/// Seeded ChaCha8 generator; every stochastic component goes through this.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent child seed from `(seed, stream)`.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser over a mixed pair
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Circularly symmetric complex Gaussian noise drawn from `rng`.
pub fn awgn_from<R: rand::Rng + ?Sized>(rng: &mut R, length: usize, variance: f64) -> Result<ComplexVec> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return invalid(format!("noise variance must be finite and >= 0, got {variance}"));
    }
    let sd = (variance / 2.0).sqrt();
    Ok((0..length)
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(re * sd, im * sd)
        })
        .collect())
}

/// i.i.d. CN(0, variance) samples, deterministic in `seed`.
pub fn awgn(length: usize, variance: f64, seed: u64) -> Result<ComplexVec> {
    awgn_from(&mut rng_from_seed(seed), length, variance)
}
