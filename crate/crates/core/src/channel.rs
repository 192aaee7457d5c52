//! Geometric multipath channels for the three links and their per-band
//! frequency responses.
//!
//! Delays are kept in units of `1/B` (the OFDM grid sample period), so a
//! path of length `d` has delay `τ = d·B/c`. The band CFR is
//! `H(n) = Σ_l α_l exp[-j2π(f_b/B + n/N) τ_l]` with `f_b` the band center.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::signalcore::{fft_inplace, ifft_inplace, rng_from_seed, ComplexVec};
use crate::waveform::{Band, OfdmConfig};
use crate::SPEED_OF_LIGHT;

pub type Point = [f64; 2];

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub tx: Point,
    pub rx: Point,
    pub tag: Point,
    #[serde(default)]
    pub scatterers: Vec<Point>,
}

impl Geometry {
    pub fn d0(&self) -> f64 {
        dist(self.tx, self.rx)
    }
    pub fn d1(&self) -> f64 {
        dist(self.tx, self.tag)
    }
    pub fn d2(&self) -> f64 {
        dist(self.tag, self.rx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    TxRx,
    TxTag,
    TagRx,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub length_m: f64,
    /// Delay in units of `1/B`.
    pub delay_samples: f64,
    pub gain: Complex64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultipathChannel {
    pub link: Link,
    pub paths: Vec<Path>,
}

impl MultipathChannel {
    /// Build from `(delay in 1/B units, gain)` taps. The first tap is the LoS.
    pub fn from_taps(link: Link, taps: &[(f64, Complex64)], bandwidth: f64) -> Result<Self> {
        if taps.is_empty() {
            return invalid("a channel needs at least one path");
        }
        let paths: Vec<Path> = taps
            .iter()
            .map(|&(d, g)| Path { length_m: d * SPEED_OF_LIGHT / bandwidth, delay_samples: d, gain: g })
            .collect();
        let ch = Self { link, paths };
        ch.check()?;
        Ok(ch)
    }

    pub fn check(&self) -> Result<()> {
        if self.paths.is_empty() {
            return invalid("a channel needs at least one path");
        }
        for w in self.paths.windows(2) {
            if w[1].delay_samples < w[0].delay_samples {
                return invalid("paths must be sorted by nondecreasing delay");
            }
        }
        for p in &self.paths {
            if !(p.delay_samples >= 0.0) || !p.gain.re.is_finite() || !p.gain.im.is_finite() {
                return invalid("delays must be >= 0 and gains finite");
            }
        }
        Ok(())
    }

    pub fn los(&self) -> &Path {
        &self.paths[0]
    }

    /// Total power `Σ|α|²`.
    pub fn power(&self) -> f64 {
        self.paths.iter().map(|p| p.gain.norm_sqr()).sum()
    }

    /// Copy with the LoS delay replaced (NLoS paths unchanged). Used by
    /// the Fisher-information oracles, so ordering is not re-checked.
    pub fn with_los_delay(&self, delay: f64) -> Self {
        let mut c = self.clone();
        c.paths[0].delay_samples = delay;
        c
    }
}

fn link_channel<R: Rng>(a: Point, b: Point, scat: &[Point], link: Link, bw: f64, rng: &mut R) -> Result<MultipathChannel> {
    let d_los = dist(a, b);
    if d_los <= 0.0 {
        return Err(Error::DegenerateGeometry(format!("{link:?} endpoints coincide")));
    }
    let mut paths = Vec::with_capacity(1 + scat.len());
    let mut push = |len: f64, rng: &mut R| {
        let ph = rng.random_range(0.0..2.0 * PI);
        paths.push(Path {
            length_m: len,
            delay_samples: len * bw / SPEED_OF_LIGHT,
            gain: Complex64::from_polar(d_los / len, ph),
        });
    };
    push(d_los, rng);
    for &s in scat {
        let (da, db) = (dist(a, s), dist(s, b));
        if da < 1e-9 || db < 1e-9 {
            return Err(Error::DegenerateGeometry(format!("scatterer at {s:?} coincides with a {link:?} endpoint")));
        }
        push(da + db, rng);
    }
    // Stable sort keeps the LoS first on ties (scatterer on the segment).
    paths[1..].sort_by(|x, y| x.delay_samples.total_cmp(&y.delay_samples));
    Ok(MultipathChannel { link, paths })
}

/// Single-bounce channels for TX→RX, TX→tag and tag→RX.
///
/// Every scatterer contributes one path per link; amplitudes are
/// `d_LoS/d_path` (LoS magnitude 1) and phases are i.i.d. uniform.
pub fn geometry_to_channels(
    geometry: &Geometry,
    config: &OfdmConfig,
    seed: u64,
) -> Result<(MultipathChannel, MultipathChannel, MultipathChannel)> {
    if dist(geometry.tx, geometry.rx) <= 0.0 {
        return Err(Error::DegenerateGeometry("tx and rx coincide".into()));
    }
    let all = [geometry.tx, geometry.rx, geometry.tag];
    if all.iter().chain(&geometry.scatterers).any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return invalid("non-finite coordinate");
    }
    let bw = config.bandwidth();
    let mut rng = rng_from_seed(seed);
    let sc = &geometry.scatterers;
    let h0 = link_channel(geometry.tx, geometry.rx, sc, Link::TxRx, bw, &mut rng)?;
    let h1 = link_channel(geometry.tx, geometry.tag, sc, Link::TxTag, bw, &mut rng)?;
    let h2 = link_channel(geometry.tag, geometry.rx, sc, Link::TagRx, bw, &mut rng)?;
    Ok((h0, h1, h2))
}

fn check_band(link: Link, band: Band) -> Result<()> {
    let ok = match link {
        Link::TxRx | Link::TxTag => band == Band::Center,
        Link::TagRx => band != Band::Center,
    };
    if ok {
        Ok(())
    } else {
        invalid(format!("{link:?} link has no response in the {} band", band.name()))
    }
}

/// CFR at an arbitrary carrier, without the link/band pairing check.
pub fn cfr_at(channel: &MultipathChannel, config: &OfdmConfig, carrier_hz: f64) -> ComplexVec {
    let b = config.bandwidth();
    let n = config.n as f64;
    config
        .subcarriers()
        .map(|k| {
            channel
                .paths
                .iter()
                .map(|p| p.gain * Complex64::from_polar(1.0, -2.0 * PI * (carrier_hz / b + k as f64 / n) * p.delay_samples))
                .sum()
        })
        .collect()
}

/// Per-subcarrier response of `channel` in `band` (direct double sum).
pub fn cfr(channel: &MultipathChannel, config: &OfdmConfig, band: Band) -> Result<ComplexVec> {
    check_band(channel.link, band)?;
    Ok(cfr_at(channel, config, config.band_center_hz(band)))
}

/// Matrix factors `(𝓕, 𝓒, 𝓓)` with `H = 𝓕·diag(𝓒)·diag(𝓓)·α`.
///
/// `𝓕(n,l) = e^{-j2πnτ_l/N}`, `𝓒_l = e^{-j2πF_cτ_l/B}`; `𝓓` is all ones in
/// the center band, `e^{+j2πF_shiftτ/B}` in the lower band and its conjugate
/// in the upper band.
pub fn cfr_factors(channel: &MultipathChannel, config: &OfdmConfig, band: Band) -> Result<(DMatrix<Complex64>, ComplexVec, ComplexVec)> {
    check_band(channel.link, band)?;
    let b = config.bandwidth();
    let n = config.n as f64;
    let taus: Vec<f64> = channel.paths.iter().map(|p| p.delay_samples).collect();
    let f = DMatrix::from_fn(config.n, taus.len(), |i, l| {
        Complex64::from_polar(1.0, -2.0 * PI * config.subcarrier(i) as f64 * taus[l] / n)
    });
    let c: ComplexVec = taus.iter().map(|t| Complex64::from_polar(1.0, -2.0 * PI * config.fc / b * t)).collect();
    let d2: ComplexVec = taus.iter().map(|t| Complex64::from_polar(1.0, 2.0 * PI * config.fshift / b * t)).collect();
    let d = match band {
        Band::Center => vec![Complex64::new(1.0, 0.0); taus.len()],
        Band::Lower => d2,
        Band::Upper => d2.iter().map(|v| v.conj()).collect(),
    };
    Ok((f, c, d))
}

/// CFR evaluated through the matrix factorization.
pub fn cfr_factored(channel: &MultipathChannel, config: &OfdmConfig, band: Band) -> Result<ComplexVec> {
    let (f, c, d) = cfr_factors(channel, config, band)?;
    let a = nalgebra::DVector::from_iterator(
        c.len(),
        channel.paths.iter().zip(c.iter().zip(&d)).map(|(p, (c, d))| p.gain * c * d),
    );
    Ok((f * a).iter().copied().collect())
}

/// How a record is extended when a delay is applied in the frequency domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extension {
    /// Zero-pad so the output is the linear convolution (record grows by
    /// the maximum delay plus a guard).
    ZeroPad,
    /// Treat the record as one period of a periodic signal; exact for
    /// tiled OFDM symbols and periodic tag sequences.
    Circular,
}

/// Signed frequency (cycles/sample) of FFT bin `k` of a length-`len` record.
fn bin_freq(k: usize, len: usize) -> f64 {
    let k = k as f64;
    let l = len as f64;
    if 2 * (k as usize) < len {
        k / l
    } else {
        k / l - 1.0
    }
}

/// Apply an arbitrary frequency response `resp(f)` (f in cycles/sample,
/// signed) to `samples`. At an even-length Nyquist bin the two aliases are
/// averaged so real responses stay real.
pub fn apply_response(samples: &[Complex64], ext: Extension, pad: usize, resp: impl Fn(f64) -> Complex64) -> ComplexVec {
    let len = match ext {
        Extension::ZeroPad => samples.len() + pad,
        Extension::Circular => samples.len(),
    };
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    buf[..samples.len()].copy_from_slice(samples);
    fft_inplace(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let r = if len % 2 == 0 && 2 * k == len { 0.5 * (resp(0.5) + resp(-0.5)) } else { resp(bin_freq(k, len)) };
        *v *= r;
    }
    ifft_inplace(&mut buf);
    buf
}

/// Propagate baseband `samples` (rate `B·oversample`, centered at
/// `band_center_hz`) through `channel`: `Σ α_l e^{-j2πf_b t_l} x(t - t_l)`.
/// Fractional delays are realized as linear phase over the whole record.
pub fn apply_channel(
    samples: &[Complex64],
    channel: &MultipathChannel,
    config: &OfdmConfig,
    band_center_hz: f64,
    ext: Extension,
) -> ComplexVec {
    let os = config.oversample as f64;
    let b = config.bandwidth();
    let taps: Vec<(Complex64, f64)> = channel
        .paths
        .iter()
        .map(|p| (p.gain * Complex64::from_polar(1.0, -2.0 * PI * band_center_hz / b * p.delay_samples), p.delay_samples * os))
        .collect();
    let max_delay = taps.iter().map(|t| t.1).fold(0.0, f64::max);
    let pad = max_delay.ceil() as usize + 8 * config.symbol_len();
    apply_response(samples, ext, pad, |f| taps.iter().map(|(g, d)| g * Complex64::from_polar(1.0, -2.0 * PI * f * d)).sum())
}

/// Delay `samples` by `delay` samples (fractional) with no carrier rotation.
pub fn fractional_delay(samples: &[Complex64], delay: f64, ext: Extension) -> ComplexVec {
    let pad = delay.abs().ceil() as usize + 64;
    apply_response(samples, ext, pad, |f| Complex64::from_polar(1.0, -2.0 * PI * f * delay))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signalcore::dft;
    use crate::waveform::{make_symbol, serialize, SymbolKind};

    fn cfg() -> OfdmConfig {
        OfdmConfig::default()
    }

    fn random_channel(link: Link, paths: usize, seed: u64) -> MultipathChannel {
        let mut rng = rng_from_seed(seed);
        let mut taps: Vec<(f64, Complex64)> = (0..paths)
            .map(|_| (rng.random_range(0.0..6.0), Complex64::from_polar(rng.random_range(0.1..1.0), rng.random_range(0.0..2.0 * PI))))
            .collect();
        taps.sort_by(|a, b| a.0.total_cmp(&b.0));
        MultipathChannel::from_taps(link, &taps, cfg().bandwidth()).unwrap()
    }

    #[test]
    fn reference_geometry_distances() {
        let g = Geometry { tx: [-8.0, 0.0], rx: [8.0, 0.0], tag: [0.0, 4.0], scatterers: vec![] };
        let (h0, h1, h2) = geometry_to_channels(&g, &cfg(), 1).unwrap();
        assert!((h0.los().length_m - 16.0).abs() < 1e-12);
        assert!((h1.los().length_m - 80f64.sqrt()).abs() < 1e-12);
        assert!((h2.los().length_m - 8.944_271_909_999_16).abs() < 1e-9);
        assert!((h1.los().length_m + h2.los().length_m - 17.888_543_82).abs() < 1e-6);
        assert_eq!((h0.paths.len(), h1.paths.len(), h2.paths.len()), (1, 1, 1));
        assert!((h0.los().gain.norm() - 1.0).abs() < 1e-12);
        let bw = cfg().bandwidth();
        assert!((h0.los().delay_samples - 16.0 * bw / SPEED_OF_LIGHT).abs() < 1e-12);
    }

    #[test]
    fn scatterers_add_one_path_per_link_and_los_is_shortest() {
        let g = Geometry {
            tx: [-8.0, 0.0],
            rx: [8.0, 0.0],
            tag: [1.0, -3.0],
            scatterers: vec![[0.0, 5.0], [3.0, 2.0], [-2.0, -6.0]],
        };
        let (h0, h1, h2) = geometry_to_channels(&g, &cfg(), 9).unwrap();
        for h in [&h0, &h1, &h2] {
            assert_eq!(h.paths.len(), 4);
            h.check().unwrap();
            for p in &h.paths[1..] {
                assert!(p.delay_samples > h.los().delay_samples);
                assert!((p.gain.norm() - h.los().length_m / p.length_m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_geometry_is_an_error() {
        let g = Geometry { tx: [-8.0, 0.0], rx: [8.0, 0.0], tag: [0.0, 4.0], scatterers: vec![[8.0, 0.0]] };
        assert!(matches!(geometry_to_channels(&g, &cfg(), 1), Err(Error::DegenerateGeometry(_))));
        let g = Geometry { tx: [1.0, 1.0], rx: [1.0, 1.0], tag: [0.0, 4.0], scatterers: vec![] };
        assert!(geometry_to_channels(&g, &cfg(), 1).is_err());
    }

    #[test]
    fn zero_delay_path_is_flat() {
        let c = cfg();
        let h = MultipathChannel::from_taps(Link::TxRx, &[(0.0, Complex64::new(1.0, 0.0))], c.bandwidth()).unwrap();
        assert!(cfr(&h, &c, Band::Center).unwrap().iter().all(|v| (v - 1.0).norm() < 1e-15));
        let h2 = MultipathChannel::from_taps(Link::TagRx, &[(0.0, Complex64::new(1.0, 0.0))], c.bandwidth()).unwrap();
        for b in Band::SIDE {
            assert!(cfr(&h2, &c, b).unwrap().iter().all(|v| (v - 1.0).norm() < 1e-15));
        }
    }

    #[test]
    fn pure_delay_is_linear_phase() {
        let c = cfg();
        let tau = 2.37;
        let h = MultipathChannel::from_taps(Link::TxTag, &[(tau, Complex64::new(1.0, 0.0))], c.bandwidth()).unwrap();
        let r = cfr(&h, &c, Band::Center).unwrap();
        for i in 0..c.n - 1 {
            assert!((r[i].norm() - 1.0).abs() < 1e-12);
            let step = (r[i + 1] / r[i]).arg();
            let want = -2.0 * PI * tau / c.n as f64;
            assert!((step - want).abs() < 1e-12);
        }
        let carrier = (r[11]).arg();
        let want = Complex64::from_polar(1.0, -2.0 * PI * c.fc / c.bandwidth() * tau).arg();
        assert!((carrier - want).abs() < 1e-9);
    }

    #[test]
    fn band_link_mismatch_rejected() {
        let c = cfg();
        let h = random_channel(Link::TxRx, 2, 1);
        assert!(cfr(&h, &c, Band::Upper).is_err());
        let h = random_channel(Link::TagRx, 2, 1);
        assert!(cfr(&h, &c, Band::Center).is_err());
    }

    #[test]
    fn factorization_matches_direct_sum() {
        let c = cfg();
        for seed in 0..20 {
            let paths = 1 + (seed as usize % 12);
            for (link, bands) in [(Link::TxRx, vec![Band::Center]), (Link::TagRx, vec![Band::Lower, Band::Upper])] {
                let h = random_channel(link, paths, seed);
                for b in bands {
                    let direct = cfr(&h, &c, b).unwrap();
                    let fact = cfr_factored(&h, &c, b).unwrap();
                    for (x, y) in direct.iter().zip(&fact) {
                        assert!((x - y).norm() < 1e-12 * (paths as f64));
                    }
                }
            }
        }
    }

    #[test]
    fn lower_and_upper_differ_by_shift_factor() {
        let c = cfg();
        let h = random_channel(Link::TagRx, 1, 4);
        let (_, _, dl) = cfr_factors(&h, &c, Band::Lower).unwrap();
        let (_, _, du) = cfr_factors(&h, &c, Band::Upper).unwrap();
        for (a, b) in dl.iter().zip(&du) {
            assert!((a - b.conj()).norm() < 1e-15);
        }
        // Single path: ratio lower/upper has unit modulus and phase 4πF_shift t.
        let lo = cfr(&h, &c, Band::Lower).unwrap();
        let up = cfr(&h, &c, Band::Upper).unwrap();
        let t = h.los().delay_samples / c.bandwidth();
        let want = Complex64::from_polar(1.0, 4.0 * PI * c.fshift * t);
        for (a, b) in lo.iter().zip(&up) {
            let r = a / b;
            assert!((r.norm() - 1.0).abs() < 1e-12);
            assert!((r - want).norm() < 1e-9);
        }
    }

    #[test]
    fn integer_delays_reproduce_taps() {
        let c = cfg();
        let taps = [(0.0, Complex64::new(1.0, 0.5)), (3.0, Complex64::new(-0.4, 0.2)), (7.0, Complex64::new(0.1, 0.3))];
        let h = MultipathChannel::from_taps(Link::TxRx, &taps, c.bandwidth()).unwrap();
        // Baseband response (carrier removed) on the natural DFT ordering.
        let resp = cfr_at(&h, &c, 0.0);
        let mut natural = vec![Complex64::new(0.0, 0.0); c.n];
        for (i, v) in resp.iter().enumerate() {
            natural[c.subcarrier(i).rem_euclid(c.n as i64) as usize] = *v;
        }
        let cir = crate::signalcore::idft(&natural, c.n).unwrap();
        let s = (c.n as f64).sqrt();
        for (k, v) in cir.iter().enumerate() {
            let want = taps.iter().find(|t| t.0 as usize == k).map(|t| t.1).unwrap_or_default();
            assert!((v / s - want).norm() < 1e-12);
        }
    }

    #[test]
    fn apply_channel_identity_and_integer_shift() {
        let c = cfg();
        let sym = make_symbol(&c, SymbolKind::RandomPsk { seed: 3 }).unwrap();
        let rec = serialize(&sym, 4).unwrap();
        let id = MultipathChannel::from_taps(Link::TxRx, &[(0.0, Complex64::new(1.0, 0.0))], c.bandwidth()).unwrap();
        let out = apply_channel(&rec, &id, &c, c.fc, Extension::ZeroPad);
        for (a, b) in rec.iter().zip(&out) {
            assert!((a - b).norm() < 1e-12);
        }
        // Integer delay with a carrier that is a multiple of the sample rate:
        // interior symbol is a circular shift.
        let k = 4usize;
        let d = MultipathChannel::from_taps(Link::TxRx, &[(k as f64, Complex64::new(1.0, 0.0))], c.bandwidth()).unwrap();
        let out = apply_channel(&rec, &d, &c, 40.0 * c.bandwidth(), Extension::ZeroPad);
        for m in 0..c.n {
            let want = sym.time[(m + c.n - k) % c.n];
            assert!((out[2 * c.n + m] - want).norm() < 1e-9);
        }
    }

    #[test]
    fn apply_channel_matches_cfr_on_interior_symbol() {
        let c = cfg();
        let sym = make_symbol(&c, SymbolKind::RandomPsk { seed: 8 }).unwrap();
        let h = MultipathChannel::from_taps(
            Link::TxRx,
            &[(0.7, Complex64::new(1.0, 0.2)), (2.9, Complex64::new(-0.3, 0.5))],
            c.bandwidth(),
        )
        .unwrap();
        let h_f = cfr(&h, &c, Band::Center).unwrap();
        // Circular extension is exact for a periodic record.
        let rec = serialize(&sym, 6).unwrap();
        let out = apply_channel(&rec, &h, &c, c.fc, Extension::Circular);
        let check = |window: &[Complex64], tol: f64| {
            let y = dft(window, c.n).unwrap();
            for (i, s) in sym.freq.iter().enumerate() {
                let k = c.subcarrier(i).rem_euclid(c.n as i64) as usize;
                assert!((y[k] - h_f[i] * s).norm() < tol, "bin {i}");
            }
        };
        check(&out[3 * c.n..4 * c.n], 1e-9);
        // Zero padding approaches it in the middle of a long record.
        let rec = serialize(&sym, 400).unwrap();
        let out = apply_channel(&rec, &h, &c, c.fc, Extension::ZeroPad);
        assert!(out.len() > rec.len());
        check(&out[200 * c.n..201 * c.n], 2e-2);
    }

    #[test]
    fn fractional_delay_roundtrip() {
        let c = cfg();
        let sym = make_symbol(&c, SymbolKind::RandomPsk { seed: 8 }).unwrap();
        let rec = serialize(&sym, 3).unwrap();
        let there = fractional_delay(&rec, 1.37, Extension::Circular);
        let back = fractional_delay(&there, -1.37, Extension::Circular);
        for (a, b) in rec.iter().zip(&back) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
