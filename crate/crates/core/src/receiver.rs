//! Reader front end and DSP chain.
//!
//! Captures are one complex stream per band at the grid rate `B`. All CFOs
//! here are normalized: cycles/sample for capture-level quantities and
//! cycles/window (one OFDM symbol) for per-window streams.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{apply_response, fractional_delay, Extension};
use crate::error::{invalid, Error, Result};
use crate::signalcore::{awgn_from, dft, idft, rng_from_seed, sliding_correlate, ComplexVec};
use crate::tag::TagConfig;
use crate::waveform::{Band, OfdmConfig, PerBand};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontEndConfig {
    /// Receive response on the N subcarriers of each band.
    pub gains: PerBand<ComplexVec>,
    /// Group delays in 1/B units.
    pub group_delays: PerBand<f64>,
    pub noise_var: PerBand<f64>,
    /// `None` is an ideal (unquantized) converter.
    pub adc_bits: Option<u32>,
    /// RX oscillator offset, Hz.
    pub f_off_rx: f64,
    pub phases: PerBand<f64>,
}

impl FrontEndConfig {
    pub fn ideal(n: usize) -> Self {
        Self {
            gains: PerBand::splat(vec![Complex64::new(1.0, 0.0); n]),
            group_delays: PerBand::splat(0.0),
            noise_var: PerBand::splat(0.0),
            adc_bits: None,
            f_off_rx: 0.0,
            phases: PerBand::splat(0.0),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for b in Band::ALL {
            if self.gains.get(b).len() != n {
                return invalid(format!("{} gains must have length {n}", b.name()));
            }
            if !(*self.noise_var.get(b) >= 0.0) {
                return invalid("noise variances must be >= 0");
            }
            if !self.group_delays.get(b).is_finite() || !self.phases.get(b).is_finite() {
                return invalid("group delays and phases must be finite");
            }
        }
        if let Some(bits) = self.adc_bits {
            if !(4..=16).contains(&bits) {
                return invalid("adc_bits must lie in [4, 16]");
            }
        }
        Ok(())
    }

    /// Capture-level CFO of `band` in cycles/sample: `f_off_rx ∓ f_off_tag`.
    pub fn band_cfo(&self, band: Band, tag_cfo_hz: f64, rate: f64) -> f64 {
        (self.f_off_rx + band.sign() * tag_cfo_hz) / rate
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SyncState {
    /// Applied capture-level CFO correction, cycles/sample.
    pub cfo_est: PerBand<f64>,
    /// Residual per-window CFO estimated after correction, cycles/window.
    pub cfo_residual: PerBand<f64>,
    pub k0: usize,
    /// Fractional timing offset. From `timing_sync` this is the parabolic
    /// refinement of the correlation peak; the analytic CIR model expects
    /// the true offset between the illumination start and `k0`.
    pub zeta: f64,
    pub phase_offsets: PerBand<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandCapture {
    pub band: Band,
    pub samples: ComplexVec,
    pub snr_true: f64,
}

/// Continuous receive response obtained by trigonometric interpolation of
/// the N-point response: exact on the subcarrier grid.
fn gain_response(gains: &[Complex64]) -> impl Fn(f64) -> Complex64 {
    let n = gains.len();
    let h = (n as i64 - 1) / 2;
    let mut natural = vec![Complex64::new(0.0, 0.0); n];
    for (i, g) in gains.iter().enumerate() {
        natural[(i as i64 - h).rem_euclid(n as i64) as usize] = *g;
    }
    // Taps g(k), k ∈ [-h, h], of the N-periodic impulse response.
    let taps = idft(&natural, n).expect("non-empty");
    let scale = 1.0 / (n as f64).sqrt();
    let taps: Vec<(f64, Complex64)> = (-h..=h).map(|k| (k as f64, taps[k.rem_euclid(n as i64) as usize] * scale)).collect();
    move |f: f64| taps.iter().map(|(k, g)| g * Complex64::from_polar(1.0, -2.0 * PI * f * k)).sum()
}

/// Deterministic part of the front end: receive filter, group delay and
/// oscillator. Records are treated as periodic.
pub fn front_end_clean(
    rx_input: &PerBand<ComplexVec>,
    config: &FrontEndConfig,
    ofdm: &OfdmConfig,
    tag_cfo_hz: f64,
) -> Result<PerBand<ComplexVec>> {
    config.validate(ofdm.n)?;
    let rate = ofdm.grid_rate();
    let run = |band: Band| -> ComplexVec {
        let mut x = rx_input.get(band).clone();
        let g = config.gains.get(band);
        if g.iter().any(|v| *v != Complex64::new(1.0, 0.0)) {
            x = apply_response(&x, Extension::Circular, 0, gain_response(g));
        }
        let tg = *config.group_delays.get(band) * ofdm.oversample as f64;
        if tg != 0.0 {
            x = fractional_delay(&x, tg, Extension::Circular);
        }
        let nu = config.band_cfo(band, tag_cfo_hz, rate);
        let phi = *config.phases.get(band);
        for (k, v) in x.iter_mut().enumerate() {
            *v *= Complex64::from_polar(1.0, 2.0 * PI * nu * k as f64 - phi);
        }
        x
    };
    Ok(PerBand::from_fn(run))
}

/// Full front end: deterministic part, AWGN of the configured variance and
/// optional quantization.
pub fn front_end(
    rx_input: &PerBand<ComplexVec>,
    config: &FrontEndConfig,
    ofdm: &OfdmConfig,
    tag_cfo_hz: f64,
    seed: u64,
) -> Result<PerBand<BandCapture>> {
    let clean = front_end_clean(rx_input, config, ofdm, tag_cfo_hz)?;
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::with_capacity(3);
    for band in Band::ALL {
        let x = clean.get(band);
        let var = *config.noise_var.get(band);
        let sig = mean_power(x);
        let mut y = x.clone();
        if var > 0.0 {
            let v = awgn_from(&mut rng, y.len(), var)?;
            y.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
        }
        if let Some(bits) = config.adc_bits {
            y = quantize(&y, bits);
        }
        let snr_true = if var > 0.0 { 10.0 * (sig / var).log10() } else { f64::INFINITY };
        out.push(BandCapture { band, samples: y, snr_true });
    }
    let mut it = out.into_iter();
    let (c, l, u) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    Ok(PerBand::new(c, l, u))
}

pub fn mean_power(x: &[Complex64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v.norm_sqr()).sum::<f64>() / x.len() as f64
}

/// Uniform mid-rise quantizer on I and Q with full scale 4× the complex RMS
/// of the input. Out-of-range values clip to the outermost level.
pub fn quantize(x: &[Complex64], bits: u32) -> ComplexVec {
    let rms = mean_power(x).sqrt();
    if rms == 0.0 {
        return x.to_vec();
    }
    let fs = 4.0 * rms;
    let levels = (1u64 << bits) as f64;
    let step = 2.0 * fs / levels;
    let top = fs - step / 2.0;
    let q = |v: f64| (step * ((v / step).floor() + 0.5)).clamp(-top, top);
    x.iter().map(|v| Complex64::new(q(v.re), q(v.im))).collect()
}

/// Repetition phase-slope estimator, cycles/sample.
pub fn estimate_cfo(samples: &[Complex64], period: usize) -> Result<f64> {
    if period == 0 || samples.len() < 2 * period {
        return invalid("CFO estimation needs at least two periods");
    }
    let acc: Complex64 = samples.iter().zip(&samples[period..]).map(|(a, b)| a.conj() * b).sum();
    Ok(acc.arg() / (2.0 * PI * period as f64))
}

pub fn correct_cfo(samples: &[Complex64], nu: f64) -> ComplexVec {
    samples
        .iter()
        .enumerate()
        .map(|(k, v)| v * Complex64::from_polar(1.0, -2.0 * PI * nu * k as f64))
        .collect()
}

const SYNC_BLOCK: usize = 64;

/// Symbol timing from the center band: the capture is folded modulo one
/// symbol period, correlated circularly with the template and the peak is
/// refined by a 3-point parabola.
pub fn timing_sync(capture: &[Complex64], template: &[Complex64]) -> Result<SyncState> {
    let p = template.len();
    if p == 0 || capture.len() < p {
        return invalid("capture shorter than one template period");
    }
    // Coherent fold over blocks of SYNC_BLOCK periods, magnitudes summed
    // across blocks: a residual CFO would cancel a fold over a long capture.
    let periods = capture.len() / p;
    let mut mags = vec![0.0; p];
    for block in capture[..periods * p].chunks(SYNC_BLOCK * p) {
        let mut folded = vec![Complex64::new(0.0, 0.0); p];
        for (k, v) in block.iter().enumerate() {
            folded[k % p] += v;
        }
        let mut ext = folded.clone();
        ext.extend_from_slice(&folded[..p - 1]);
        let (_, m) = sliding_correlate(&ext, template)?;
        mags.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
    }
    let k0 = mags.iter().enumerate().fold(0, |b, (i, &m)| if m > mags[b] { i } else { b });
    let mean = mags.iter().sum::<f64>() / mags.len() as f64;
    if !(mags[k0] > 2.0 * mean) {
        return Err(Error::NoSignal);
    }
    let m0 = mags[k0];
    let mm = mags[(k0 + p - 1) % p];
    let mp = mags[(k0 + 1) % p];
    let den = mm - 2.0 * m0 + mp;
    let zeta = if den.abs() > 1e-300 { (0.5 * (mm - mp) / den).clamp(-0.5, 0.5) } else { 0.0 };
    Ok(SyncState { k0, zeta, ..Default::default() })
}

/// N-point spectra of consecutive windows starting at `k0`, on the
/// symmetric subcarrier order.
pub fn demod_ofdm(capture: &[Complex64], k0: usize, n: usize) -> Result<Vec<ComplexVec>> {
    if n == 0 || k0 + n > capture.len() {
        return invalid("demodulation window overruns the capture");
    }
    let h = (n as i64 - 1) / 2;
    let count = (capture.len() - k0) / n;
    let mut out = Vec::with_capacity(count);
    for j in 0..count {
        let s = k0 + j * n;
        let spec = dft(&capture[s..s + n], n)?;
        out.push((0..n).map(|i| spec[(i as i64 - h).rem_euclid(n as i64) as usize]).collect());
    }
    Ok(out)
}

/// ICI matrix for a residual CFO `f_eps` (cycles/sample) within one
/// window: `Y = D·X` for `y(k) = e^{j2πf k}x(k)`, `k = 0..N-1`.
pub fn ici_matrix(f_eps: f64, n: usize) -> DMatrix<Complex64> {
    let nf = n as f64;
    DMatrix::from_fn(n, n, |n1, n2| {
        let m = n2 as i64 - n1 as i64;
        let r = nf * f_eps;
        let u = m as f64 + r;
        // reduce u by the nearest multiple qN to keep sin(pi u) accurate
        let q = (u / nf).round() as i64;
        let v = (m - q * n as i64) as f64 + r;
        let sign = if (q * (n as i64 - 1)).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
        let s = (PI * v / nf).sin();
        let mag = sign * if s.abs() < 1e-12 { nf } else { (PI * v).sin() / s };
        Complex64::from_polar(mag / nf, PI * (nf - 1.0) * u / nf)
    })
}

/// `Ĥ = R ⊘ S` per window.
pub fn estimate_channels(r_hat: &[Complex64], s: &[Complex64]) -> Result<ComplexVec> {
    if r_hat.len() != s.len() {
        return invalid("received and reference spectra differ in length");
    }
    if s.iter().any(|v| v.norm() == 0.0) {
        return invalid("reference symbol has an empty subcarrier");
    }
    Ok(r_hat.iter().zip(s).map(|(r, s)| r / s).collect())
}

fn ml_objective(windows: &[ComplexVec], nu: f64) -> f64 {
    let n = windows[0].len();
    let mut acc = vec![Complex64::new(0.0, 0.0); n];
    for (j, w) in windows.iter().enumerate() {
        let r = Complex64::from_polar(1.0, -2.0 * PI * nu * j as f64);
        acc.iter_mut().zip(w).for_each(|(a, y)| *a += y * r);
    }
    acc.iter().map(|v| v.norm_sqr()).sum()
}

/// Maximum-likelihood residual CFO (cycles/window) of a window sequence
/// with a constant channel: maximizes `Σ_n |Σ_j Y_n(j)e^{-j2πνj}|²` over
/// `|ν| ≤ nu_max` by a zero-padded FFT grid and golden-section refinement.
pub fn estimate_window_cfo(windows: &[ComplexVec], nu_max: f64) -> Result<f64> {
    if windows.is_empty() {
        return invalid("no windows to average");
    }
    let w = windows.len();
    if w == 1 || nu_max <= 0.0 {
        return Ok(0.0);
    }
    let nu_max = nu_max.min(0.5);
    let size = (4 * w).next_power_of_two().max(64);
    let n = windows[0].len();
    let mut power = vec![0.0; size];
    let mut buf = vec![Complex64::new(0.0, 0.0); size];
    for i in 0..n {
        buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        for (j, win) in windows.iter().enumerate() {
            buf[j] = win[i];
        }
        crate::signalcore::fft_inplace(&mut buf);
        power.iter_mut().zip(&buf).for_each(|(p, v)| *p += v.norm_sqr());
    }
    // Bin k of the forward transform tests ν = k/size.
    let mut best = (f64::NEG_INFINITY, 0.0);
    for (k, p) in power.iter().enumerate() {
        let nu = if 2 * k < size { k as f64 / size as f64 } else { k as f64 / size as f64 - 1.0 };
        if nu.abs() <= nu_max && *p > best.0 {
            best = (*p, nu);
        }
    }
    let step = 1.0 / size as f64;
    let (mut a, mut b) = ((best.1 - step).max(-nu_max), (best.1 + step).min(nu_max));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (ml_objective(windows, c), ml_objective(windows, d));
    for _ in 0..60 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = ml_objective(windows, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = ml_objective(windows, d);
        }
        if b - a < 1e-15 {
            break;
        }
    }
    // Golden section stalls at √ε around a smooth maximum; finish with
    // Newton steps on the analytic derivative.
    let mut nu = 0.5 * (a + b);
    for _ in 0..3 {
        let (d1, d2) = ml_derivatives(windows, nu);
        if !(d2 < 0.0) {
            break;
        }
        let next = nu - d1 / d2;
        if (next - nu).abs() > step || next.abs() > nu_max {
            break;
        }
        nu = next;
    }
    Ok(nu)
}

fn ml_derivatives(windows: &[ComplexVec], nu: f64) -> (f64, f64) {
    let n = windows[0].len();
    let mut a = vec![Complex64::new(0.0, 0.0); n];
    let mut a1 = a.clone();
    let mut a2 = a.clone();
    for (j, w) in windows.iter().enumerate() {
        let r = Complex64::from_polar(1.0, -2.0 * PI * nu * j as f64);
        let k = Complex64::new(0.0, -2.0 * PI * j as f64);
        for i in 0..n {
            let v = w[i] * r;
            a[i] += v;
            a1[i] += k * v;
            a2[i] += k * k * v;
        }
    }
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for i in 0..n {
        d1 += 2.0 * (a[i].conj() * a1[i]).re;
        d2 += 2.0 * (a1[i].norm_sqr() + (a[i].conj() * a2[i]).re);
    }
    (d1, d2)
}

/// Average per-window channel estimates after removing the ML residual
/// CFO. Phases are referenced to window 0. Returns `(Ĥ, ν̂)`.
pub fn average_cfr(windows: &[ComplexVec], nu_max: f64) -> Result<(ComplexVec, f64)> {
    let nu = estimate_window_cfo(windows, nu_max)?;
    Ok((derotate_mean(windows, nu), nu))
}

pub fn derotate_mean(windows: &[ComplexVec], nu: f64) -> ComplexVec {
    let n = windows[0].len();
    let mut acc = vec![Complex64::new(0.0, 0.0); n];
    for (j, w) in windows.iter().enumerate() {
        let r = Complex64::from_polar(1.0, -2.0 * PI * nu * j as f64);
        acc.iter_mut().zip(w).for_each(|(a, y)| *a += y * r);
    }
    let s = 1.0 / windows.len() as f64;
    acc.iter_mut().for_each(|v| *v *= s);
    acc
}

/// Matched projection `z(j) = Ĥᴴ Y(j) e^{-j2πνj}` of each window onto a
/// reference channel.
pub fn matched_stream(windows: &[ComplexVec], h_ref: &[Complex64], nu: f64) -> ComplexVec {
    windows
        .iter()
        .enumerate()
        .map(|(j, w)| {
            let dot: Complex64 = h_ref.iter().zip(w).map(|(h, y)| h.conj() * y).sum();
            dot * Complex64::from_polar(1.0, -2.0 * PI * nu * j as f64)
        })
        .collect()
}

/// Where tag symbols sit relative to the demodulation windows.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamLayout {
    /// Samples per window.
    pub window_len: usize,
    /// Sample index of the start of window 0.
    pub k0: usize,
    /// First window that may carry packets (training windows are skipped).
    pub first_window: usize,
    /// Tag symbol period in samples.
    pub tsym_samples: f64,
    /// Windows accumulated per tag symbol by the matched filter.
    pub k_mf: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacketDecode {
    /// Estimated start of the packet in samples (window-grid time).
    pub start_sample: f64,
    /// Matched-filter outputs, one per tag symbol (preamble included).
    pub samples: ComplexVec,
    pub payload_bits: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagDecode {
    pub packets: Vec<PacketDecode>,
    pub mrc_phase: f64,
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Windows `j` whose starts satisfy `start ≥ from`, the first `count` of them.
fn mf_windows(layout: &StreamLayout, from: f64, count: usize, total: usize) -> Option<std::ops::Range<usize>> {
    let n = layout.window_len as f64;
    let j = ((from - layout.k0 as f64) / n).ceil().max(0.0) as usize;
    (j + count <= total).then_some(j..j + count)
}

/// Decode contiguous tag packets from the per-window matched projections of
/// the two side bands. Packets of `packet`'s length repeat back to back; only
/// the preamble is used as known data.
pub fn extract_tag_symbols(
    z_minus: &[Complex64],
    z_plus: &[Complex64],
    preamble: &[u8],
    payload_len: usize,
    config: &TagConfig,
    layout: &StreamLayout,
) -> Result<TagDecode> {
    if z_minus.len() != z_plus.len() {
        return invalid("band streams differ in length");
    }
    let total = z_plus.len();
    let n = layout.window_len as f64;
    let t = layout.tsym_samples;
    let m_sym = preamble.len() + payload_len;
    let spw = t / n;
    let pre_states: Vec<Complex64> = preamble.iter().map(|&b| config.state(b)).collect();

    // Coarse search: noncoherent preamble correlation folded over the
    // packet cycle.
    let up: ComplexVec = (0..(preamble.len() as f64 * spw).floor() as usize)
        .map(|j| pre_states[((j as f64 + 0.5) / spw) as usize])
        .collect();
    let first = layout.first_window;
    if first + up.len() > total {
        return Err(Error::NoPacket("stream shorter than one preamble".into()));
    }
    let corr = |z: &[Complex64]| sliding_correlate(&z[first..], &up).map(|r| r.1);
    let cm = corr(z_minus)?;
    let cp = corr(z_plus)?;
    let metric: Vec<f64> = cm.iter().zip(&cp).map(|(a, b)| a * a + b * b).collect();
    let cycle = m_sym as f64 * spw;
    let n_packets = ((total - first) as f64 / cycle).floor() as usize;
    if n_packets == 0 {
        return Err(Error::NoPacket("stream shorter than one packet".into()));
    }
    let span = (cycle.ceil() as usize).min(metric.len());
    let folded: Vec<f64> = (0..span)
        .map(|j| (0..n_packets).filter_map(|q| metric.get(j + (q as f64 * cycle).round() as usize)).sum())
        .collect();
    let (j_star, peak) = folded.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b });
    let mut sorted = folded.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    if !(peak > 4.0 * median) {
        return Err(Error::NoPacket("no preamble correlation peak".into()));
    }

    let mut packets = Vec::new();
    // Fine boundary: sample-resolution overlap model of the preamble,
    // scored per packet and summed over packets (one common offset; the
    // packets are contiguous, and per-packet estimates jitter at low SNR).
    let pre_end = preamble.len() as f64 * t;
    let coarse = |q: usize| layout.k0 as f64 + (first as f64 + j_star as f64 + q as f64 * cycle) * n;
    let score_at = |b: f64| -> Option<f64> {
        let j_lo = ((b - layout.k0 as f64) / n).ceil().max(0.0) as usize;
        let j_hi = (((b + pre_end - layout.k0 as f64) / n).floor().max(0.0) as usize).min(total);
        if j_lo + 2 > j_hi {
            return None;
        }
        let (mut am, mut ap, mut e) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0), 0.0);
        for j in j_lo..j_hi {
            let w0 = layout.k0 as f64 + j as f64 * n;
            let mut model = Complex64::new(0.0, 0.0);
            let m_lo = ((w0 - b) / t).floor().max(0.0) as usize;
            for (m, st) in pre_states.iter().enumerate().skip(m_lo) {
                let s0 = b + m as f64 * t;
                if s0 >= w0 + n {
                    break;
                }
                model += st * overlap(w0, w0 + n, s0, s0 + t) / n;
            }
            am += model.conj() * z_minus[j];
            ap += model.conj() * z_plus[j];
            e += model.norm_sqr();
        }
        Some((am.norm_sqr() + ap.norm_sqr()) / e)
    };
    let w = layout.window_len as i64;
    let mut best = (f64::NEG_INFINITY, 0i64);
    for off in -w..=w {
        let total_score: f64 = (0..n_packets).filter_map(|q| score_at(coarse(q) + off as f64)).sum();
        if total_score > best.0 {
            best = (total_score, off);
        }
    }
    let mut prelim = Vec::new();
    for q in 0..n_packets {
        let b = coarse(q) + best.1 as f64;
        let mut ym = Vec::with_capacity(m_sym);
        let mut yp = Vec::with_capacity(m_sym);
        let mut ok = true;
        for m in 0..m_sym {
            match mf_windows(layout, b + m as f64 * t + n / 2.0, layout.k_mf, total) {
                Some(r) => {
                    ym.push(z_minus[r.clone()].iter().sum::<Complex64>());
                    yp.push(z_plus[r].iter().sum::<Complex64>());
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            prelim.push((b, ym, yp));
        }
    }
    if prelim.is_empty() {
        return Err(Error::NoPacket("no complete packet in the stream".into()));
    }

    // Combining phase from all preambles.
    let acc: Complex64 = prelim
        .iter()
        .flat_map(|(_, ym, yp)| ym[..preamble.len()].iter().zip(&yp[..preamble.len()]).map(|(a, b)| a * b.conj()))
        .sum();
    let mrc_phase = acc.arg();
    let rot = Complex64::from_polar(1.0, -mrc_phase);

    for (b, ym, yp) in prelim {
        let y: ComplexVec = ym.iter().zip(&yp).map(|(a, p)| p + a * rot).collect();
        let decide = |c: Complex64, v: Complex64| -> u8 {
            if (v - c * config.gamma0).norm_sqr() <= (v - c * config.gamma1).norm_sqr() {
                0
            } else {
                1
            }
        };
        let gain = |y: &[Complex64], states: &mut dyn Iterator<Item = Complex64>| -> Complex64 {
            let (mut num, mut den) = (Complex64::new(0.0, 0.0), 0.0);
            for (s, v) in states.zip(y) {
                num += v * s.conj();
                den += s.norm_sqr();
            }
            if den > 0.0 {
                num / den
            } else {
                Complex64::new(1.0, 0.0)
            }
        };
        // Pass 1: combined stream, gain from the preamble. Pass 2: per-band
        // gains from all pass-1 decisions (tracks slow relative phase drift
        // between the bands), joint two-band decisions.
        let c1 = gain(&y, &mut pre_states.iter().copied());
        let bits1: Vec<u8> = y[preamble.len()..].iter().map(|v| decide(c1, *v)).collect();
        let states: Vec<Complex64> =
            pre_states.iter().copied().chain(bits1.iter().map(|&bit| config.state(bit))).collect();
        let cm = gain(&ym, &mut states.iter().copied());
        let cp = gain(&yp, &mut states.iter().copied());
        let cost = |i: usize, g: Complex64| (ym[i] - cm * g).norm_sqr() + (yp[i] - cp * g).norm_sqr();
        let payload_bits =
            (preamble.len()..m_sym).map(|i| u8::from(cost(i, config.gamma1) < cost(i, config.gamma0))).collect();
        packets.push(PacketDecode { start_sample: b, samples: y, payload_bits });
    }
    Ok(TagDecode { packets, mrc_phase })
}

/// `(P_sn/P_n − 1)·(Tsym/Tofdm)`; negative excess power clamps to 0.
pub fn estimate_snr(p_sn: f64, p_n: f64, tsym: f64, tofdm: f64) -> Result<f64> {
    if !(p_n > 0.0) || !(tofdm > 0.0) || !(tsym > 0.0) {
        return invalid("noise power and durations must be positive");
    }
    Ok(((p_sn / p_n) - 1.0).max(0.0) * tsym / tofdm)
}

/// Random unit-modulus phases for the oscillator bookkeeping.
pub fn random_phases<R: Rng>(rng: &mut R) -> PerBand<f64> {
    PerBand::from_fn(|_| rng.random_range(0.0..2.0 * PI))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signalcore::{awgn, rng_from_seed};
    use crate::waveform::{make_symbol, serialize, SymbolKind};

    fn cfg() -> OfdmConfig {
        OfdmConfig::default()
    }

    fn tone(len: usize, f: f64) -> ComplexVec {
        (0..len).map(|k| Complex64::from_polar(1.0, 2.0 * PI * f * k as f64)).collect()
    }

    #[test]
    fn ideal_front_end_only_rotates() {
        let c = cfg();
        let sym = make_symbol(&c, SymbolKind::ZadoffChu { root: 1 }).unwrap();
        let x = serialize(&sym, 6).unwrap();
        let mut fe = FrontEndConfig::ideal(c.n);
        fe.phases = PerBand::new(0.3, -1.1, 2.0);
        fe.adc_bits = Some(16);
        let out = front_end(&PerBand::splat(x.clone()), &fe, &c, 0.0, 1).unwrap();
        for b in Band::ALL {
            let rot = Complex64::from_polar(1.0, -fe.phases.get(b));
            let cap = out.get(b);
            let err = cap.samples.iter().zip(&x).map(|(y, v)| (y - v * rot).norm()).fold(0.0, f64::max);
            // 16-bit steps at 4× RMS full scale
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn common_clock_cfo_contract() {
        let c = cfg();
        let mut fe = FrontEndConfig::ideal(c.n);
        fe.f_off_rx = 2500.0;
        let ftag = 130.0;
        let rate = c.grid_rate();
        assert_eq!(fe.band_cfo(Band::Lower, ftag, rate), (2500.0 - 130.0) / rate);
        assert_eq!(fe.band_cfo(Band::Upper, ftag, rate), (2500.0 + 130.0) / rate);
        assert_eq!(fe.band_cfo(Band::Center, ftag, rate), 2500.0 / rate);
        let ones = vec![Complex64::new(1.0, 0.0); 230];
        let out = front_end_clean(&PerBand::splat(ones), &fe, &c, ftag).unwrap();
        for b in Band::ALL {
            let est = estimate_cfo(out.get(b), 1).unwrap();
            assert!((est - fe.band_cfo(b, ftag, rate)).abs() < 1e-12);
        }
    }

    #[test]
    fn quantizer_snr_matches_loading_formula() {
        let x = awgn(200_000, 1.0, 5).unwrap();
        for bits in [8u32, 12] {
            let q = quantize(&x, bits);
            let e: f64 = q.iter().zip(&x).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / x.len() as f64;
            let snr = 10.0 * (mean_power(&x) / e).log10();
            let want = 6.02 * bits as f64 + 1.76 - 12.2;
            assert!((snr - want).abs() < 1.0, "bits {bits}: {snr} vs {want}");
        }
    }

    #[test]
    fn receive_gain_exact_on_subcarriers() {
        let c = cfg();
        let gains: ComplexVec = (0..c.n).map(|i| Complex64::from_polar(1.0 + 0.02 * i as f64, 0.1 * i as f64)).collect();
        let sym = make_symbol(&c, SymbolKind::RandomPsk { seed: 4 }).unwrap();
        let x = serialize(&sym, 3).unwrap();
        let mut fe = FrontEndConfig::ideal(c.n);
        fe.gains.center = gains.clone();
        let out = front_end_clean(&PerBand::splat(x), &fe, &c, 0.0).unwrap();
        let w = demod_ofdm(&out.center, 0, c.n).unwrap();
        for i in 0..c.n {
            assert!((w[1][i] - gains[i] * sym.freq[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn cfo_tone_exact_and_aliasing() {
        let x = tone(4000, 0.001);
        assert!((estimate_cfo(&x, 23).unwrap() - 0.001).abs() < 1e-12);
        let p = 23usize;
        let f = 1.5 / (2.0 * p as f64);
        let est = estimate_cfo(&tone(4000, f), p).unwrap();
        assert!((est - (f - 1.0 / p as f64)).abs() < 1e-12);
        assert!(estimate_cfo(&x[..40], 23).is_err());
    }

    #[test]
    fn cfo_monte_carlo_20db() {
        let c = cfg();
        let sym = make_symbol(&c, SymbolKind::ZadoffChu { root: 1 }).unwrap();
        let base = serialize(&sym, 100).unwrap();
        let p = mean_power(&base);
        let mut rng = rng_from_seed(8);
        let mut se = 0.0;
        let trials = 200;
        for t in 0..trials {
            let f: f64 = rng.random_range(-0.01..0.01);
            let noise = awgn(base.len(), p / 100.0, 1000 + t).unwrap();
            let x: ComplexVec = base
                .iter()
                .enumerate()
                .map(|(k, v)| v * Complex64::from_polar(1.0, 2.0 * PI * f * k as f64) + noise[k])
                .collect();
            se += (estimate_cfo(&x, c.n).unwrap() - f).powi(2);
        }
        let rmse = (se / trials as f64).sqrt();
        assert!(rmse <= 1e-5, "{rmse}");
    }

    #[test]
    fn timing_integer_and_fractional() {
        let c = cfg();
        let sym = make_symbol(&c, SymbolKind::ZadoffChu { root: 1 }).unwrap();
        let x = serialize(&sym, 10).unwrap();
        let d = fractional_delay(&x, 40.0, Extension::Circular);
        let s = timing_sync(&d, &sym.time).unwrap();
        assert_eq!(s.k0, 40 % c.n);
        assert!(s.zeta.abs() < 1e-9);
        let d = fractional_delay(&x, 0.5, Extension::Circular);
        let s = timing_sync(&d, &sym.time).unwrap();
        let est = s.k0 as f64 + s.zeta;
        assert!((0.4..=0.6).contains(&est), "{est}");
        let zeros = vec![Complex64::new(0.0, 0.0); 230];
        assert_eq!(timing_sync(&zeros, &sym.time).unwrap_err(), Error::NoSignal);
    }

    #[test]
    fn timing_at_0db() {
        let c = cfg();
        let sym = make_symbol(&c, SymbolKind::ZadoffChu { root: 1 }).unwrap();
        let x = serialize(&sym, 8).unwrap();
        let p = mean_power(&x);
        let mut rng = rng_from_seed(2);
        let mut errors = 0;
        for t in 0..1000 {
            let shift: usize = rng.random_range(0..c.n);
            let mut y = fractional_delay(&x, shift as f64, Extension::Circular);
            let v = awgn(y.len(), p, 50_000 + t).unwrap();
            y.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
            if timing_sync(&y, &sym.time).map(|s| s.k0) != Ok(shift) {
                errors += 1;
            }
        }
        assert!(errors < 10, "{errors} timing errors");
    }

    #[test]
    fn demod_loopback_and_delay() {
        let c = cfg();
        let sym = make_symbol(&c, SymbolKind::RandomPsk { seed: 9 }).unwrap();
        let x = serialize(&sym, 5).unwrap();
        let w = demod_ofdm(&x, 0, c.n).unwrap();
        assert_eq!(w.len(), 5);
        for v in &w {
            for (a, b) in v.iter().zip(&sym.freq) {
                assert!((a - b).norm() < 1e-12);
            }
        }
        let k = 3.0;
        let d = fractional_delay(&x, k, Extension::Circular);
        let w = demod_ofdm(&d, 0, c.n).unwrap();
        for (i, n) in c.subcarriers().enumerate() {
            let want = sym.freq[i] * Complex64::from_polar(1.0, -2.0 * PI * n as f64 * k / c.n as f64);
            assert!((w[2][i] - want).norm() < 1e-12);
        }
        assert!(demod_ofdm(&x[..20], 0, c.n).is_err());
    }

    #[test]
    fn ici_identity_shift_and_unit_rows() {
        let n = 23;
        let d = ici_matrix(0.0, n);
        assert!((d.clone() - DMatrix::identity(n, n)).norm() < 1e-12);
        let d = ici_matrix(1.0 / n as f64, n);
        for n1 in 0..n {
            for n2 in 0..n {
                let want = if (n2 + 1) % n == n1 { 1.0 } else { 0.0 };
                assert!((d[(n1, n2)].norm() - want).abs() < 1e-12, "{n1},{n2}");
            }
        }
        let mut rng = rng_from_seed(3);
        for _ in 0..20 {
            let f: f64 = rng.random_range(-0.49..0.49);
            let d = ici_matrix(f, n);
            for r in 0..n {
                let e: f64 = d.row(r).iter().map(|v| v.norm_sqr()).sum();
                assert!((e - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn demod_with_cfo_matches_ici_prediction() {
        // Natural DFT ordering is what the matrix acts on.
        let c = cfg();
        let n = c.n;
        let sym = make_symbol(&c, SymbolKind::RandomPsk { seed: 12 }).unwrap();
        let x = sym.time.clone();
        for f in [0.003, -0.017, 0.2] {
            let y: ComplexVec = x.iter().enumerate().map(|(k, v)| v * Complex64::from_polar(1.0, 2.0 * PI * f * k as f64)).collect();
            let yf = dft(&y, n).unwrap();
            let xf = dft(&x, n).unwrap();
            let d = ici_matrix(f, n);
            let pred = &d * nalgebra::DVector::from_vec(xf);
            for i in 0..n {
                assert!((pred[i] - yf[i]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn channel_estimate_constants() {
        let c = cfg();
        let sym = make_symbol(&c, SymbolKind::RandomPsk { seed: 1 }).unwrap();
        let r: ComplexVec = sym.freq.iter().map(|s| s * Complex64::new(0.0, 1.0 / PI)).collect();
        let h = estimate_channels(&r, &sym.freq).unwrap();
        assert!(h.iter().all(|v| (v.norm() - 1.0 / PI).abs() < 1e-15));
        let mut bad = sym.freq.clone();
        bad[4] = Complex64::new(0.0, 0.0);
        assert!(estimate_channels(&r, &bad).is_err());
    }

    #[test]
    fn channel_estimate_noise_variance() {
        let c = cfg();
        let sym = make_symbol(&c, SymbolKind::RandomPsk { seed: 1 }).unwrap();
        let var = 0.3;
        let trials = 20_000;
        let mut m = vec![Complex64::new(0.0, 0.0); c.n];
        let mut p = vec![0.0; c.n];
        for t in 0..trials {
            let v = awgn(c.n, var, 7_000 + t).unwrap();
            let r = dft(&v, c.n).unwrap();
            let h = estimate_channels(&r, &sym.freq).unwrap();
            for i in 0..c.n {
                m[i] += h[i];
                p[i] += h[i].norm_sqr();
            }
        }
        for i in 0..c.n {
            let mean = m[i] / trials as f64;
            let v = p[i] / trials as f64;
            let want = var / sym.freq[i].norm_sqr();
            assert!(mean.norm() < 5.0 * (want / trials as f64).sqrt());
            assert!((v / want - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn window_cfo_recovered() {
        let h: ComplexVec = (0..23).map(|i| Complex64::from_polar(1.0, i as f64)).collect();
        for nu in [0.0, 0.0013, -0.004] {
            let w: Vec<ComplexVec> = (0..300)
                .map(|j| h.iter().map(|v| v * Complex64::from_polar(1.0, 2.0 * PI * nu * j as f64)).collect())
                .collect();
            let (avg, est) = average_cfr(&w, 0.01).unwrap();
            assert!((est - nu).abs() < 1e-10, "{est} vs {nu}");
            for (a, b) in avg.iter().zip(&h) {
                assert!((a - b).norm() < 1e-7);
            }
        }
    }

    #[test]
    fn snr_formula() {
        assert!((estimate_snr(2.0, 1.0, 8.0, 1.0).unwrap() - 8.0).abs() < 1e-15);
        assert_eq!(estimate_snr(1.0, 1.0, 8.0, 1.0).unwrap(), 0.0);
        assert_eq!(estimate_snr(0.5, 1.0, 8.0, 1.0).unwrap(), 0.0);
        assert!(estimate_snr(1.0, 0.0, 8.0, 1.0).is_err());
    }

    #[test]
    fn snr_estimate_from_subcarrier_powers() {
        // 10 dB per subcarrier, Tsym/Tofdm = 8 → 19.03 dB.
        let c = cfg();
        let sym = make_symbol(&c, SymbolKind::ZadoffChu { root: 1 }).unwrap();
        let mut est = Vec::new();
        for t in 0..100u64 {
            let w = 64;
            let x = serialize(&sym, w).unwrap();
            let sig = mean_power(&x);
            let v = awgn(x.len(), sig / 10.0, 90_000 + 2 * t).unwrap();
            let only = awgn(x.len(), sig / 10.0, 90_001 + 2 * t).unwrap();
            let y: ComplexVec = x.iter().zip(&v).map(|(a, b)| a + b).collect();
            let pw = |s: &[Complex64]| -> f64 {
                demod_ofdm(s, 0, c.n).unwrap().iter().flat_map(|r| r.iter().map(|v| v.norm_sqr())).sum::<f64>()
            };
            let snr = estimate_snr(pw(&y), pw(&only), 8.0, 1.0).unwrap();
            est.push(10.0 * snr.log10());
        }
        let mean = est.iter().sum::<f64>() / est.len() as f64;
        assert!((mean - 19.03).abs() < 0.3, "{mean}");
    }
}
