//! OFDM illumination: subcarrier grid, frequency-domain symbols and their
//! periodic time-domain serialization.
//!
//! Subcarriers are indexed by the symmetric set `n ∈ {-(N-1)/2 .. (N-1)/2}`;
//! vectors of length `N` store subcarrier `n` at position `n + (N-1)/2`.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::signalcore::{ifft_inplace, rng_from_seed, ComplexVec};
use crate::SPEED_OF_LIGHT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfdmConfig {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "deltaF")]
    pub delta_f: f64,
    #[serde(rename = "Fc")]
    pub fc: f64,
    #[serde(rename = "Fshift")]
    pub fshift: f64,
    #[serde(rename = "Q")]
    pub q: u32,
    #[serde(rename = "Fsamp")]
    pub fsamp: f64,
    #[serde(rename = "Nprime")]
    pub nprime: usize,
    #[serde(default = "one")]
    pub oversample: usize,
}

fn one() -> usize {
    1
}

impl Default for OfdmConfig {
    fn default() -> Self {
        Self {
            n: 23,
            delta_f: 960e3,
            fc: 897.5e6,
            fshift: 45e6,
            q: 375,
            fsamp: 61.44e6,
            nprime: 4096,
            oversample: 1,
        }
    }
}

impl OfdmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n.is_multiple_of(2) {
            return invalid(format!("N must be odd, got {}", self.n));
        }
        if !(self.delta_f > 0.0) || !(self.fc > 0.0) {
            return invalid("deltaF and Fc must be positive");
        }
        if self.bandwidth() > self.fsamp {
            return invalid("B = N·deltaF exceeds Fsamp");
        }
        if !(self.fshift > self.bandwidth()) {
            return invalid("Fshift must exceed B so the bands are disjoint");
        }
        if self.nprime < self.n || !self.nprime.is_multiple_of(2) {
            return invalid("Nprime must be even and >= N");
        }
        if self.q < 1 || self.oversample < 1 {
            return invalid("Q and oversample must be >= 1");
        }
        Ok(())
    }

    /// `B = N·ΔF`.
    pub fn bandwidth(&self) -> f64 {
        self.n as f64 * self.delta_f
    }

    /// `(N-1)/2`.
    pub fn half(&self) -> i64 {
        (self.n as i64 - 1) / 2
    }

    /// Subcarrier index stored at vector position `i`.
    pub fn subcarrier(&self, i: usize) -> i64 {
        i as i64 - self.half()
    }

    pub fn subcarriers(&self) -> impl Iterator<Item = i64> {
        let h = self.half();
        -h..=h
    }

    /// Sample rate of the simulated front end, `B·oversample`.
    pub fn grid_rate(&self) -> f64 {
        self.bandwidth() * self.oversample as f64
    }

    /// Samples per OFDM symbol at the front-end rate.
    pub fn symbol_len(&self) -> usize {
        self.n * self.oversample
    }

    /// OFDM symbol duration `1/ΔF`.
    pub fn t_ofdm(&self) -> f64 {
        1.0 / self.delta_f
    }

    /// Metres per unit of delay on the `1/B` grid, `c/B`.
    pub fn meters_per_sample(&self) -> f64 {
        SPEED_OF_LIGHT / self.bandwidth()
    }

    /// Maximum unambiguous range `c/ΔF`.
    pub fn d_max(&self) -> f64 {
        SPEED_OF_LIGHT / self.delta_f
    }

    /// Oversampled CIR bin width `c/(N'ΔF)`.
    pub fn bin_m(&self) -> f64 {
        SPEED_OF_LIGHT / (self.nprime as f64 * self.delta_f)
    }

    /// Finest range granularity of a bin difference, `2c/(N'ΔF)`.
    pub fn granularity_floor(&self) -> f64 {
        2.0 * self.bin_m()
    }

    pub fn band_center_hz(&self, band: Band) -> f64 {
        self.fc + band.sign() * self.fshift
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Center,
    Lower,
    Upper,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Center, Band::Lower, Band::Upper];
    pub const SIDE: [Band; 2] = [Band::Lower, Band::Upper];

    /// 0 for the center band, -1 lower, +1 upper.
    pub fn sign(self) -> f64 {
        match self {
            Band::Center => 0.0,
            Band::Lower => -1.0,
            Band::Upper => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Band::Center => "center",
            Band::Lower => "lower",
            Band::Upper => "upper",
        }
    }
}

/// One value per band.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PerBand<T> {
    pub center: T,
    pub lower: T,
    pub upper: T,
}

impl<T> PerBand<T> {
    pub fn new(center: T, lower: T, upper: T) -> Self {
        Self { center, lower, upper }
    }

    pub fn from_fn(mut f: impl FnMut(Band) -> T) -> Self {
        Self { center: f(Band::Center), lower: f(Band::Lower), upper: f(Band::Upper) }
    }

    pub fn get(&self, band: Band) -> &T {
        match band {
            Band::Center => &self.center,
            Band::Lower => &self.lower,
            Band::Upper => &self.upper,
        }
    }

    pub fn get_mut(&mut self, band: Band) -> &mut T {
        match band {
            Band::Center => &mut self.center,
            Band::Lower => &mut self.lower,
            Band::Upper => &mut self.upper,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Band, &T) -> U) -> PerBand<U> {
        PerBand {
            center: f(Band::Center, &self.center),
            lower: f(Band::Lower, &self.lower),
            upper: f(Band::Upper, &self.upper),
        }
    }
}

impl<T: Clone> PerBand<T> {
    pub fn splat(v: T) -> Self {
        Self { center: v.clone(), lower: v.clone(), upper: v }
    }
}

/// Absolute subcarrier frequencies of `band`, in Hz.
pub fn subcarrier_grid(config: &OfdmConfig, band: Band) -> Vec<f64> {
    let fb = config.band_center_hz(band);
    config.subcarriers().map(|n| fb + n as f64 * config.delta_f).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymbolKind {
    RandomPsk { seed: u64 },
    ZadoffChu { root: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfdmSymbol {
    /// Subcarrier values on the symmetric index set.
    pub freq: ComplexVec,
    /// One period at the front-end rate, `N·oversample` samples.
    pub time: ComplexVec,
    pub oversample: usize,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Time-domain period of a spectrum given on the symmetric index set.
///
/// The spectrum is zero-stuffed onto an `N·os`-point grid and scaled by
/// `√os` so per-sample power does not depend on the oversampling factor.
pub fn synthesize(freq: &[Complex64], oversample: usize) -> ComplexVec {
    let n = freq.len();
    let m = n * oversample;
    let h = (n as i64 - 1) / 2;
    let mut buf = vec![Complex64::new(0.0, 0.0); m];
    for (i, v) in freq.iter().enumerate() {
        let k = (i as i64 - h).rem_euclid(m as i64) as usize;
        buf[k] = *v;
    }
    ifft_inplace(&mut buf);
    let s = (oversample as f64).sqrt();
    buf.iter_mut().for_each(|v| *v *= s);
    buf
}

pub fn make_symbol(config: &OfdmConfig, kind: SymbolKind) -> Result<OfdmSymbol> {
    config.validate()?;
    let n = config.n;
    let freq: ComplexVec = match kind {
        SymbolKind::RandomPsk { seed } => {
            let mut rng = rng_from_seed(seed);
            let a = std::f64::consts::FRAC_1_SQRT_2;
            (0..n)
                .map(|_| {
                    let re = if rng.random::<bool>() { a } else { -a };
                    let im = if rng.random::<bool>() { a } else { -a };
                    Complex64::new(re, im)
                })
                .collect()
        }
        SymbolKind::ZadoffChu { root } => {
            if root % n as u64 == 0 || gcd(root, n as u64) != 1 {
                return invalid(format!("Zadoff-Chu root {root} is not coprime with N = {n}"));
            }
            (0..n)
                .map(|m| {
                    let m = m as f64;
                    let ph = -std::f64::consts::PI * root as f64 * m * (m + 1.0) / n as f64;
                    Complex64::from_polar(1.0, ph)
                })
                .collect()
        }
    };
    let time = synthesize(&freq, config.oversample);
    Ok(OfdmSymbol { freq, time, oversample: config.oversample })
}

/// Back-to-back repetitions of one symbol period, no cyclic prefix.
pub fn serialize(symbol: &OfdmSymbol, repetitions: usize) -> Result<ComplexVec> {
    if repetitions == 0 {
        return invalid("repetitions must be >= 1");
    }
    let mut out = Vec::with_capacity(symbol.time.len() * repetitions);
    for _ in 0..repetitions {
        out.extend_from_slice(&symbol.time);
    }
    Ok(out)
}
