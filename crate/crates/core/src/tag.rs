//! Backscatter tag: BPSK packet, square-wave shifting clock, reflection and
//! the first-harmonic per-band spectra.
//!
//! `Γ(t) = x_pkt(t)·κ(t)` with κ a ±1 clock (+1 on the first half period).
//! Its Fourier coefficients are `−2j/(πk)` for odd k and zero for even k, so
//! the reflected signal `y·(A_s − Γ)` lands in the lower band with weight
//! `−j/π` and in the upper band with `+j/π` (baseband-equivalent ½ included).

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::signalcore::{rng_from_seed, ComplexVec};
use crate::waveform::{Band, OfdmConfig, OfdmSymbol};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagMode {
    Cw,
    Burst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagConfig {
    pub gamma0: Complex64,
    pub gamma1: Complex64,
    pub structural: Complex64,
    /// Tag symbol period, s.
    pub tsym: f64,
    /// `F_shift = Q·F_sym`.
    pub q: u32,
    /// Shifting-clock frequency error, Hz.
    pub f_off_tag: f64,
    pub mode: TagMode,
    /// Burst cycle period, s.
    pub duty: f64,
}

impl TagConfig {
    /// Defaults: ±1 BPSK states, no structural term, 8 OFDM symbols per tag
    /// symbol, one packet per 50 ms burst cycle.
    pub fn for_ofdm(config: &OfdmConfig, mode: TagMode) -> Self {
        Self {
            gamma0: Complex64::new(1.0, 0.0),
            gamma1: Complex64::new(-1.0, 0.0),
            structural: Complex64::new(0.0, 0.0),
            tsym: 8.0 * config.t_ofdm(),
            q: config.q,
            f_off_tag: 0.0,
            mode,
            duty: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma0.norm() > 1.0 + 1e-12 || self.gamma1.norm() > 1.0 + 1e-12 {
            return invalid("reflection states must satisfy |Γ| <= 1");
        }
        if !(self.tsym > 0.0) || self.q < 1 {
            return invalid("Tsym must be positive and Q >= 1");
        }
        Ok(())
    }

    /// Nominal shift frequency `Q/Tsym`.
    pub fn fshift(&self) -> f64 {
        self.q as f64 / self.tsym
    }

    /// Clock frequency including the tag CFO.
    pub fn clock_hz(&self) -> f64 {
        self.fshift() + self.f_off_tag
    }

    /// Symbol period as realized by the (offset) tag clock.
    pub fn tsym_actual(&self) -> f64 {
        self.tsym * self.fshift() / self.clock_hz()
    }

    /// Integer number of OFDM symbols per tag symbol.
    pub fn ofdm_per_symbol(&self, config: &OfdmConfig) -> Result<usize> {
        let r = self.tsym / config.t_ofdm();
        if (r - r.round()).abs() > 1e-9 || r.round() < 1.0 {
            return invalid("Tsym must be an integer multiple of the OFDM symbol duration");
        }
        Ok(r.round() as usize)
    }

    pub fn state(&self, bit: u8) -> Complex64 {
        if bit == 0 {
            self.gamma0
        } else {
            self.gamma1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagPacket {
    pub preamble: Vec<u8>,
    pub payload: Vec<u8>,
}

/// Barker-13 extended to 16 symbols.
pub const DEFAULT_PREAMBLE: [u8; 16] = [0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1, 0, 1];

impl TagPacket {
    pub fn new(preamble: Vec<u8>, payload: Vec<u8>) -> Result<Self> {
        if preamble.is_empty() {
            return invalid("preamble must be non-empty");
        }
        if preamble.iter().chain(&payload).any(|&b| b > 1) {
            return invalid("bits must be 0 or 1");
        }
        Ok(Self { preamble, payload })
    }

    pub fn random(payload_bits: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let payload = (0..payload_bits).map(|_| rng.random_range(0..=1u8)).collect();
        Self { preamble: DEFAULT_PREAMBLE.to_vec(), payload }
    }

    /// Payload bits from a hex string, most significant bit first.
    pub fn from_hex(payload_hex: &str) -> Result<Self> {
        let mut payload = Vec::with_capacity(payload_hex.len() * 4);
        for ch in payload_hex.trim().chars() {
            let v = ch.to_digit(16).ok_or_else(|| crate::Error::InvalidArgument(format!("bad hex digit {ch:?}")))?;
            for k in (0..4).rev() {
                payload.push(((v >> k) & 1) as u8);
            }
        }
        Self::new(DEFAULT_PREAMBLE.to_vec(), payload)
    }

    /// Total symbol count `M`.
    pub fn m(&self) -> usize {
        self.preamble.len() + self.payload.len()
    }

    pub fn bits(&self) -> impl Iterator<Item = u8> + '_ {
        self.preamble.iter().chain(&self.payload).copied()
    }

    pub fn symbols(&self, config: &TagConfig) -> ComplexVec {
        self.bits().map(|b| config.state(b)).collect()
    }
}

/// Value of the ±1 shifting clock at time `t` for clock frequency `f`.
pub fn clock_value(t: f64, f: f64) -> f64 {
    if (t * f).rem_euclid(1.0) < 0.5 {
        1.0
    } else {
        -1.0
    }
}

/// Fourier coefficient of the clock at harmonic `k` (frequency `k·F_shift`).
pub fn clock_harmonic(k: i64) -> Complex64 {
    if k % 2 == 0 {
        Complex64::new(0.0, 0.0)
    } else {
        Complex64::new(0.0, -2.0 / (PI * k as f64))
    }
}

/// Baseband weight of the tag reflection in `band` for a unit symbol:
/// `½·A_s` handled separately in the center band, `∓j/π` in the side bands.
pub fn band_coefficient(band: Band) -> Complex64 {
    match band {
        Band::Center => Complex64::new(0.0, 0.0),
        Band::Lower => Complex64::new(0.0, -1.0 / PI),
        Band::Upper => Complex64::new(0.0, 1.0 / PI),
    }
}

/// Packet value `x_pkt(t)`, periodically extended over the packet.
pub fn packet_value(config: &TagConfig, symbols: &[Complex64], t: f64) -> Complex64 {
    match config.mode {
        TagMode::Cw => Complex64::new(1.0, 0.0),
        TagMode::Burst => {
            let m = (t / config.tsym_actual()).floor() as i64;
            symbols[m.rem_euclid(symbols.len() as i64) as usize]
        }
    }
}

/// `Γ(t) = x_pkt(t)·κ(t)` sampled at `t_samples` (uniform grid, seconds).
pub fn modulation_waveform(config: &TagConfig, packet: &TagPacket, t_samples: &[f64]) -> Result<ComplexVec> {
    config.validate()?;
    if t_samples.len() >= 2 {
        let dt = t_samples[1] - t_samples[0];
        if !(dt > 0.0) || 1.0 / dt < 2.0 * config.clock_hz() {
            return invalid("sample grid too coarse to represent the shifting clock");
        }
    }
    let symbols = packet.symbols(config);
    let f = config.clock_hz();
    Ok(t_samples.iter().map(|&t| packet_value(config, &symbols, t) * clock_value(t, f)).collect())
}

/// `b[k] = incident[k]·(A_s − Γ[k])`.
pub fn reflect(incident: &[Complex64], gamma: &[Complex64], structural: Complex64) -> Result<ComplexVec> {
    if incident.len() != gamma.len() {
        return invalid("incident and gamma lengths differ");
    }
    Ok(incident.iter().zip(gamma).map(|(y, g)| y * (structural - g)).collect())
}

/// Flat per-band tag and illuminator responses.
#[derive(Debug, Clone, PartialEq)]
pub struct TagGains {
    pub tx: ComplexVec,
    pub tag_center: ComplexVec,
    pub tag_lower: ComplexVec,
    pub tag_upper: ComplexVec,
}

impl TagGains {
    pub fn unit(n: usize) -> Self {
        let v = vec![Complex64::new(1.0, 0.0); n];
        Self { tx: v.clone(), tag_center: v.clone(), tag_lower: v.clone(), tag_upper: v }
    }
}

/// Reflected spectra in the three bands for one OFDM symbol, with `x_m`
/// held constant over the symbol.
pub fn band_spectra(
    illum: &OfdmSymbol,
    h1_cfr: &[Complex64],
    gains: &TagGains,
    x_m: Complex64,
    phi_tx: f64,
    structural: Complex64,
) -> Result<(ComplexVec, ComplexVec, ComplexVec)> {
    let n = illum.freq.len();
    if h1_cfr.len() != n || gains.tx.len() != n || gains.tag_center.len() != n || gains.tag_lower.len() != n || gains.tag_upper.len() != n {
        return invalid("all vectors must have length N");
    }
    let rot = Complex64::from_polar(1.0, phi_tx);
    let base: ComplexVec = (0..n).map(|i| rot * h1_cfr[i] * gains.tx[i] * illum.freq[i]).collect();
    let b0 = (0..n).map(|i| 0.5 * structural * base[i] * gains.tag_center[i]).collect();
    let bm = (0..n).map(|i| band_coefficient(Band::Lower) * x_m * base[i] * gains.tag_lower[i]).collect();
    let bp = (0..n).map(|i| band_coefficient(Band::Upper) * x_m * base[i] * gains.tag_upper[i]).collect();
    Ok((b0, bm, bp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signalcore::dft;
    use crate::waveform::{make_symbol, SymbolKind};

    fn cw_config() -> TagConfig {
        TagConfig::for_ofdm(&OfdmConfig::default(), TagMode::Cw)
    }

    #[test]
    fn clock_harmonics_from_sampled_square_wave() {
        // Numerical Fourier series of one clock period.
        let m = 4096;
        let coef = |k: i64| -> Complex64 {
            (0..m)
                .map(|i| {
                    let t = (i as f64 + 0.5) / m as f64;
                    clock_value(t, 1.0) * Complex64::from_polar(1.0, -2.0 * PI * k as f64 * t)
                })
                .sum::<Complex64>()
                / m as f64
        };
        assert!((coef(-1) - Complex64::new(0.0, 2.0 / PI)).norm() < 1e-5);
        assert!((coef(1) - Complex64::new(0.0, -2.0 / PI)).norm() < 1e-5);
        for k in [0, 2, -2, 4] {
            assert!(coef(k).norm() < 1e-9, "k={k}");
            assert_eq!(clock_harmonic(k), Complex64::new(0.0, 0.0));
        }
        assert!((clock_harmonic(-1) - coef(-1)).norm() < 1e-5);
        assert!((clock_harmonic(3) - coef(3)).norm() < 1e-5);
        // Band weights are −½ of the clock harmonic at ∓F_shift.
        assert!((band_coefficient(Band::Lower) + 0.5 * clock_harmonic(-1)).norm() < 1e-15);
        assert!((band_coefficient(Band::Upper) + 0.5 * clock_harmonic(1)).norm() < 1e-15);
    }

    #[test]
    fn cw_waveform_is_periodic() {
        let c = cw_config();
        let p = TagPacket::random(8, 1);
        let fs = 64.0 * c.fshift();
        let t: Vec<f64> = (0..2048).map(|k| (k as f64 + 0.25) / fs).collect();
        let g = modulation_waveform(&c, &p, &t).unwrap();
        for k in 0..2048 - 64 {
            assert_eq!(g[k], g[k + 64]);
        }
        let coarse: Vec<f64> = (0..16).map(|k| k as f64 / c.fshift()).collect();
        assert!(modulation_waveform(&c, &p, &coarse).is_err());
    }

    #[test]
    fn burst_waveform_follows_symbols() {
        let ofdm = OfdmConfig::default();
        let mut c = TagConfig::for_ofdm(&ofdm, TagMode::Burst);
        c.q = 4; // keep the clock slow for a cheap grid
        let p = TagPacket::new(vec![0, 1], vec![1, 0]).unwrap();
        let fs = 64.0 * c.fshift();
        let t: Vec<f64> = (0..(4.0 * c.tsym * fs) as usize).map(|k| (k as f64 + 0.25) / fs).collect();
        let g = modulation_waveform(&c, &p, &t).unwrap();
        let syms = p.symbols(&c);
        for (k, &tk) in t.iter().enumerate() {
            let m = (tk / c.tsym).floor() as usize;
            assert_eq!(g[k], syms[m] * clock_value(tk, c.fshift()));
        }
    }

    #[test]
    fn reflect_contract() {
        let y: ComplexVec = (0..8).map(|k| Complex64::new(k as f64, 1.0)).collect();
        let a = Complex64::new(0.3, -0.1);
        assert!(reflect(&y, &[a; 8], a).unwrap().iter().all(|v| v.norm() == 0.0));
        let g: ComplexVec = (0..8).map(|k| Complex64::new(if k % 2 == 0 { 1.0 } else { -1.0 }, 0.0)).collect();
        let b = reflect(&y, &g, Complex64::new(0.0, 0.0)).unwrap();
        for k in 0..8 {
            assert_eq!(b[k], -y[k] * g[k]);
        }
        assert!(reflect(&y, &g[..4], a).is_err());
    }

    #[test]
    fn reflected_tone_line_powers() {
        // Unit tone reflected by the CW clock: lines at ±F_shift with power
        // (2/π)² and at ±3F_shift with (2/(3π))², from an FFT of a long record.
        let periods = 64;
        let per = 32;
        let len = periods * per;
        let t: Vec<f64> = (0..len).map(|k| (k as f64 + 0.5) / per as f64).collect();
        let g: ComplexVec = t.iter().map(|&tk| Complex64::new(clock_value(tk, 1.0), 0.0)).collect();
        let y = vec![Complex64::new(1.0, 0.0); len];
        let b = reflect(&y, &g, Complex64::new(0.0, 0.0)).unwrap();
        let spec = dft(&b, len).unwrap();
        let line = |k: i64| spec[(k * periods as i64).rem_euclid(len as i64) as usize].norm_sqr() / len as f64;
        assert!((line(1) - (2.0 / PI).powi(2)).abs() < 2e-3);
        assert!((line(-1) - (2.0 / PI).powi(2)).abs() < 2e-3);
        assert!((line(3) - (2.0 / (3.0 * PI)).powi(2)).abs() < 2e-3);
        assert!(line(2) < 1e-20 && line(0) < 1e-20);
    }

    #[test]
    fn band_spectra_contract() {
        let ofdm = OfdmConfig::default();
        let s = make_symbol(&ofdm, SymbolKind::RandomPsk { seed: 2 }).unwrap();
        let h1: ComplexVec = (0..ofdm.n).map(|i| Complex64::from_polar(0.5 + 0.01 * i as f64, i as f64)).collect();
        let g = TagGains::unit(ofdm.n);
        let a = Complex64::new(0.2, 0.1);
        let (b0, bm, bp) = band_spectra(&s, &h1, &g, Complex64::new(0.0, 0.0), 0.4, a).unwrap();
        assert!(bm.iter().chain(&bp).all(|v| v.norm() == 0.0));
        let (b0x, bm, bp) = band_spectra(&s, &h1, &g, Complex64::new(-1.0, 0.0), 0.4, a).unwrap();
        assert_eq!(b0, b0x);
        for i in 0..ofdm.n {
            assert!(((bm[i] / bp[i]).norm() - 1.0).abs() < 1e-12);
            assert!((bm[i].norm() - h1[i].norm() * s.freq[i].norm() / PI).abs() < 1e-12);
            assert!((b0[i] - 0.5 * a * Complex64::from_polar(1.0, 0.4) * h1[i] * s.freq[i]).norm() < 1e-12);
        }
        assert!(band_spectra(&s, &h1[..3], &g, Complex64::new(1.0, 0.0), 0.0, a).is_err());
    }

    #[test]
    fn hex_payload() {
        let p = TagPacket::from_hex("A5").unwrap();
        assert_eq!(p.payload, vec![1, 0, 1, 0, 0, 1, 0, 1]);
        assert_eq!(p.m(), 24);
        assert!(TagPacket::from_hex("xz").is_err());
    }

    #[test]
    fn tsym_integer_multiple() {
        let ofdm = OfdmConfig::default();
        let c = TagConfig::for_ofdm(&ofdm, TagMode::Cw);
        assert_eq!(c.ofdm_per_symbol(&ofdm).unwrap(), 8);
        assert!((c.fshift() - ofdm.fshift).abs() < 1e-3);
        let mut bad = c.clone();
        bad.tsym *= 1.1;
        assert!(bad.ofdm_per_symbol(&ofdm).is_err());
    }
}
