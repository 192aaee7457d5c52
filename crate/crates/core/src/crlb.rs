//! Cramér–Rao bounds for the TX-RX range `d₀` and the bistatic range
//! `d₁,₂ = d₁ + d₂`, with a finite-difference Fisher oracle.
//!
//! Observation models are the noiseless averaged channel estimates:
//! `μ₀ = ½𝓗₀` and `μ∓ = ∓(j/π)𝓗₁⊙𝓗₂∓`, in white noise of variance σ² per
//! subcarrier. Fisher information for a delay τ (1/B units) converts to
//! range via `d = cτ/B`: `𝓘(d) = (2B²/c²σ²)‖∂μ/∂τ‖²`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{cfr, MultipathChannel};
use crate::error::{invalid, Result};
use crate::signalcore::{rng_from_seed, ComplexVec};
use crate::tag::band_coefficient;
use crate::waveform::{Band, OfdmConfig};
use crate::SPEED_OF_LIGHT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrlbInputs {
    pub h0: MultipathChannel,
    pub h1: MultipathChannel,
    pub h2: MultipathChannel,
    pub sigma0_sq: f64,
    pub sigma12_sq: f64,
    pub config: OfdmConfig,
    /// `τ₁⁰/τ₁,₂⁰`.
    pub beta: f64,
}

impl CrlbInputs {
    /// β from the LoS delays.
    pub fn geometric_beta(h1: &MultipathChannel, h2: &MultipathChannel) -> f64 {
        let t1 = h1.los().delay_samples;
        let t2 = h2.los().delay_samples;
        t1 / (t1 + t2)
    }

    fn check(&self) -> Result<()> {
        if !(self.sigma0_sq > 0.0) || !(self.sigma12_sq > 0.0) {
            return invalid("noise variances must be > 0");
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return invalid("beta must lie in (0, 1)");
        }
        Ok(())
    }

    fn scale(&self, sigma_sq: f64) -> f64 {
        let b = self.config.bandwidth();
        2.0 * b * b / (SPEED_OF_LIGHT * SPEED_OF_LIGHT * sigma_sq)
    }
}

/// Closed-form Fisher information of `d₀` (LoS delay only).
pub fn fisher_d0(inputs: &CrlbInputs) -> Result<f64> {
    inputs.check()?;
    let c = &inputs.config;
    let n = c.n as f64;
    let fcb = c.fc / c.bandwidth();
    let a = inputs.h0.los().gain.norm_sqr();
    Ok(inputs.scale(inputs.sigma0_sq) * PI * PI * a * (n * fcb * fcb + (n * n - 1.0) / (12.0 * n)))
}

/// `c²σ₀²/(2B²π²|α₀⁰|²(N·F_c²/B² + (N²−1)/(12N)))`; infinite for a zero
/// LoS gain.
pub fn crlb_d0(inputs: &CrlbInputs) -> Result<f64> {
    let i = fisher_d0(inputs)?;
    Ok(if i > 0.0 { 1.0 / i } else { f64::INFINITY })
}

/// `∂𝓗/∂τ⁰` of the LoS path in closed form at carrier `f_b`:
/// `−j2πα⁰e^{−j2π(f_b/B + n/N)τ⁰}(f_b/B + n/N)`.
pub fn los_derivative(ch: &MultipathChannel, config: &OfdmConfig, carrier_hz: f64) -> ComplexVec {
    let los = ch.los();
    let fb = carrier_hz / config.bandwidth();
    let n = config.n as f64;
    config
        .subcarriers()
        .map(|k| {
            let w = fb + k as f64 / n;
            Complex64::new(0.0, -2.0 * PI * w) * los.gain * Complex64::from_polar(1.0, -2.0 * PI * w * los.delay_samples)
        })
        .collect()
}

/// Fisher information of `d₁,₂` in a side band from the weighted
/// derivative `β(∂𝓗₁⊙𝓗₂) + (1−β)(𝓗₁⊙∂𝓗₂)`.
pub fn fisher_d12(inputs: &CrlbInputs, band: Band) -> Result<f64> {
    inputs.check()?;
    if band == Band::Center {
        return invalid("d12 bound is defined for the side bands");
    }
    if inputs.h1.los().delay_samples + inputs.h2.los().delay_samples <= 0.0 {
        return invalid("tau12 must be > 0");
    }
    let c = &inputs.config;
    let h1 = cfr(&inputs.h1, c, Band::Center)?;
    let h2 = cfr(&inputs.h2, c, band)?;
    let d1 = los_derivative(&inputs.h1, c, c.fc);
    let d2 = los_derivative(&inputs.h2, c, c.band_center_hz(band));
    let b = inputs.beta;
    let norm: f64 = (0..c.n).map(|i| (b * d1[i] * h2[i] + (1.0 - b) * h1[i] * d2[i]).norm_sqr()).sum();
    Ok(inputs.scale(inputs.sigma12_sq) * norm / (PI * PI))
}

/// `c²σ²π²/(2B²‖β∂𝓗₁⊙𝓗₂ + (1−β)𝓗₁⊙∂𝓗₂‖²)`.
pub fn crlb_d12(inputs: &CrlbInputs, band: Band) -> Result<f64> {
    let i = fisher_d12(inputs, band)?;
    Ok(if i > 0.0 { 1.0 / i } else { f64::INFINITY })
}

/// `CRLB(d₀) + CRLB(d₁,₂)`, variance in m².
pub fn crlb_total(inputs: &CrlbInputs, band: Band) -> Result<f64> {
    Ok(crlb_d0(inputs)? + crlb_d12(inputs, band)?)
}

/// `μ₀(τ)` with the TX-RX LoS delay replaced by `tau`.
pub fn mu_d0(inputs: &CrlbInputs, tau: f64) -> Result<ComplexVec> {
    let h = cfr(&inputs.h0.with_los_delay(tau), &inputs.config, Band::Center)?;
    Ok(h.iter().map(|v| 0.5 * v).collect())
}

/// `μ∓(τ₁,₂)` with the LoS delays split as `βτ₁,₂` and `(1−β)τ₁,₂`.
pub fn mu_d12(inputs: &CrlbInputs, band: Band, tau12: f64) -> Result<ComplexVec> {
    let c = &inputs.config;
    let h1 = cfr(&inputs.h1.with_los_delay(inputs.beta * tau12), c, Band::Center)?;
    let h2 = cfr(&inputs.h2.with_los_delay((1.0 - inputs.beta) * tau12), c, band)?;
    let k = band_coefficient(band);
    Ok(h1.iter().zip(&h2).map(|(a, b)| k * a * b).collect())
}

/// `(2B²/c²σ²)‖∂μ/∂τ‖²` with the derivative from central differences,
/// Richardson-extrapolated over steps `h` and `h/2`.
pub fn numerical_fisher_oracle(
    mu: impl Fn(f64) -> Result<ComplexVec>,
    tau: f64,
    sigma_sq: f64,
    step: f64,
    bandwidth: f64,
) -> Result<f64> {
    if !(step > 0.0) || tau + step / 2.0 == tau || tau - step / 2.0 == tau {
        return invalid("finite-difference step underflows");
    }
    if !(sigma_sq > 0.0) {
        return invalid("noise variance must be > 0");
    }
    let diff = |h: f64| -> Result<ComplexVec> {
        let p = mu(tau + h)?;
        let m = mu(tau - h)?;
        Ok(p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    };
    let d1 = diff(step)?;
    let d2 = diff(step / 2.0)?;
    let norm: f64 = d1.iter().zip(&d2).map(|(a, b)| ((4.0 * b - a) / 3.0).norm_sqr()).sum();
    Ok(2.0 * bandwidth * bandwidth * norm / (SPEED_OF_LIGHT * SPEED_OF_LIGHT * sigma_sq))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StochasticCrlb {
    pub crlb_d0: f64,
    pub crlb_d12: f64,
    pub total: f64,
    /// `𝔼[1/𝓘]` of the total, for comparison with the information average.
    pub mean_of_bounds: f64,
}

/// Average the Fisher information over `trials` sampled realizations (the
/// sampler draws the NLoS nuisance), then invert.
pub fn stochastic_crlb(
    mut sample: impl FnMut(&mut ChaCha8Rng) -> Result<CrlbInputs>,
    band: Band,
    trials: usize,
    seed: u64,
) -> Result<StochasticCrlb> {
    if trials == 0 {
        return invalid("trials must be >= 1");
    }
    let mut rng = rng_from_seed(seed);
    let (mut i0, mut i12, mut bounds) = (0.0, 0.0, 0.0);
    for _ in 0..trials {
        let inp = sample(&mut rng)?;
        let a = fisher_d0(&inp)?;
        let b = fisher_d12(&inp, band)?;
        i0 += a;
        i12 += b;
        bounds += 1.0 / a + 1.0 / b;
    }
    let t = trials as f64;
    let crlb_d0 = t / i0;
    let crlb_d12 = t / i12;
    Ok(StochasticCrlb { crlb_d0, crlb_d12, total: crlb_d0 + crlb_d12, mean_of_bounds: bounds / t })
}
