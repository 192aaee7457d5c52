//! Range estimation from per-band channel estimates: oversampled CIRs, the
//! analytic blurred-CIR model, IR-First, MUSIC and calibration.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{Link, MultipathChannel};
use crate::error::{invalid, Error, Result};
use crate::link::{estimate_link_channels, LinkScenario, TagSchedule};
use crate::receiver::{FrontEndConfig, SyncState};
use crate::signalcore::{dirichlet, fft_inplace, idft, ifft_inplace, rng_from_seed, ComplexVec};
use crate::tag::band_coefficient;
use crate::waveform::{Band, OfdmConfig, PerBand};
use crate::SPEED_OF_LIGHT;

#[derive(Debug, Clone, PartialEq)]
pub struct CirEstimate {
    pub band: Band,
    pub taps: ComplexVec,
    /// Meters per bin, `c/(N′ΔF)`.
    pub grid_m: f64,
    /// Subcarriers behind the estimate; `N′/N` bins make one `c/B` cell.
    pub n: usize,
}

impl CirEstimate {
    pub fn nprime(&self) -> usize {
        self.taps.len()
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.taps.iter().map(|v| v.norm()).collect()
    }

    /// Copy rotated so that bin `k` moves to `k + shift`.
    pub fn rotated(&self, shift: usize) -> Self {
        let n = self.taps.len();
        let mut taps = vec![Complex64::new(0.0, 0.0); n];
        for (k, v) in self.taps.iter().enumerate() {
            taps[(k + shift) % n] = *v;
        }
        Self { taps, ..self.clone() }
    }
}

fn check_nprime(n: usize, nprime: usize) -> Result<()> {
    if nprime < n || !nprime.is_multiple_of(2) || n.is_multiple_of(2) {
        return invalid(format!("N' = {nprime} must be even and >= N = {n} (N odd)"));
    }
    Ok(())
}

/// Zero-pad `Ĥ` with `Z = (N′−N+1)/2` leading and `Z−1` trailing zeros
/// and apply the size-`N′` inverse transform.
pub fn oversampled_cir(band: Band, h_hat: &[Complex64], nprime: usize, delta_f: f64) -> Result<CirEstimate> {
    let n = h_hat.len();
    check_nprime(n, nprime)?;
    let z = (nprime - n).div_ceil(2);
    let mut buf = vec![Complex64::new(0.0, 0.0); nprime];
    buf[z..z + n].copy_from_slice(h_hat);
    let taps = idft(&buf, nprime)?;
    Ok(CirEstimate { band, taps, grid_m: SPEED_OF_LIGHT / (nprime as f64 * delta_f), n })
}

/// `Σ_{n=-h}^{h} G_n e^{j2πnu}`; closed-form Dirichlet kernel for unit gains.
fn kernel(gains: Option<&[Complex64]>, n: usize, nprime: usize, u: f64) -> Complex64 {
    let h = (n - 1) / 2;
    match gains {
        None => {
            // shift the one-sided sum to the symmetric index set
            Complex64::from_polar(1.0, -2.0 * PI * h as f64 * u) * dirichlet(n, nprime, -u)
        }
        Some(g) => g
            .iter()
            .enumerate()
            .map(|(i, gi)| gi * Complex64::from_polar(1.0, 2.0 * PI * (i as f64 - h as f64) * u))
            .sum(),
    }
}

/// Blurring matrix `Φ` (N′ × L): column `l` is the oversampled CIR of a
/// unit path at delay `delays[l] + offset` (1/B units) with carrier
/// rotation `e^{-j2π(f_b/B)τ_l}` and receive response `gains`.
pub fn phi_matrix(
    delays: &[f64],
    offset: f64,
    carrier_over_b: f64,
    gains: Option<&[Complex64]>,
    n: usize,
    nprime: usize,
) -> Result<DMatrix<Complex64>> {
    check_nprime(n, nprime)?;
    if let Some(g) = gains {
        if g.len() != n {
            return invalid("gain vector must have length N");
        }
    }
    let gains = gains.filter(|g| g.iter().any(|v| *v != Complex64::new(1.0, 0.0)));
    let s = 1.0 / (nprime as f64).sqrt();
    Ok(DMatrix::from_fn(nprime, delays.len(), |k, l| {
        let u = k as f64 / nprime as f64 - (delays[l] + offset) / n as f64;
        let sign = if k % 2 == 0 { s } else { -s };
        Complex64::from_polar(sign, -2.0 * PI * carrier_over_b * delays[l]) * kernel(gains, n, nprime, u)
    }))
}

fn blurred(ch: &MultipathChannel, offset: f64, carrier_hz: f64, gains: Option<&[Complex64]>, scale: Complex64, ofdm: &OfdmConfig) -> Result<ComplexVec> {
    let delays: Vec<f64> = ch.paths.iter().map(|p| p.delay_samples).collect();
    let phi = phi_matrix(&delays, offset, carrier_hz / ofdm.bandwidth(), gains, ofdm.n, ofdm.nprime)?;
    let alpha = nalgebra::DVector::from_iterator(delays.len(), ch.paths.iter().map(|p| p.gain * scale));
    Ok((phi * alpha).iter().copied().collect())
}

/// `(1/√N′)·(a ⊛ b)` (circular), the CIR of a product of two spectra.
pub fn compound(a: &[Complex64], b: &[Complex64]) -> ComplexVec {
    let mut fa = a.to_vec();
    let mut fb = b.to_vec();
    fft_inplace(&mut fa);
    fft_inplace(&mut fb);
    fa.iter_mut().zip(&fb).for_each(|(x, y)| *x *= y);
    ifft_inplace(&mut fa);
    fa
}

/// Noiseless CIR prediction per band from the channel parameters, the
/// front end and the (true) sync state.
pub fn analytic_cir(
    h0: &MultipathChannel,
    h1: &MultipathChannel,
    h2: &MultipathChannel,
    sync: &SyncState,
    fe: &FrontEndConfig,
    phi_tx: f64,
    ofdm: &OfdmConfig,
) -> Result<PerBand<CirEstimate>> {
    if h0.link != Link::TxRx || h1.link != Link::TxTag || h2.link != Link::TagRx {
        return invalid("channels must be (TX-RX, TX-Tag, Tag-RX)");
    }
    let grid_m = SPEED_OF_LIGHT / (ofdm.nprime as f64 * ofdm.delta_f);
    let a0 = 0.5 * Complex64::from_polar(1.0, phi_tx - fe.phases.center);
    let c0 = blurred(h0, fe.group_delays.center + sync.zeta, ofdm.fc, Some(&fe.gains.center), a0, ofdm)?;
    let b1 = blurred(h1, 0.0, ofdm.fc, None, Complex64::new(1.0, 0.0), ofdm)?;
    let side = |band: Band| -> Result<CirEstimate> {
        let a = band_coefficient(band) * Complex64::from_polar(1.0, phi_tx - fe.phases.get(band));
        let b2 = blurred(h2, fe.group_delays.get(band) + sync.zeta, ofdm.band_center_hz(band), Some(fe.gains.get(band)), a, ofdm)?;
        Ok(CirEstimate { band, taps: compound(&b1, &b2), grid_m, n: ofdm.n })
    };
    Ok(PerBand::new(CirEstimate { band: Band::Center, taps: c0, grid_m, n: ofdm.n }, side(Band::Lower)?, side(Band::Upper)?))
}

/// Smallest `n′ > start` that is a local maximum with magnitude at least
/// `a_min` times the CIR maximum.
pub fn first_peak(cir: &CirEstimate, a_min: f64, start: usize) -> Result<usize> {
    let n = cir.taps.len();
    if start >= n {
        return invalid("start outside the CIR");
    }
    if !(a_min > 0.0 && a_min < 1.0) {
        return invalid("a_min must lie in (0, 1)");
    }
    let mag = cir.magnitude();
    let thr = a_min * mag.iter().cloned().fold(0.0, f64::max);
    (start + 1..n.saturating_sub(1))
        .find(|&k| mag[k - 1] < mag[k] && mag[k] >= mag[k + 1] && mag[k] >= thr && mag[k] > 0.0)
        .ok_or_else(|| Error::NotFound(format!("no peak above {a_min} of max after bin {start}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangingConfig {
    pub nprime: usize,
    pub a_min: f64,
    /// Known TX-RX distance, m.
    pub d0_true: f64,
    pub d_calib_lower: f64,
    pub d_calib_upper: f64,
    pub w_minus: f64,
    pub w_plus: f64,
}

impl RangingConfig {
    pub fn new(nprime: usize, d0_true: f64) -> Self {
        Self { nprime, a_min: 0.3, d0_true, d_calib_lower: 0.0, d_calib_upper: 0.0, w_minus: 1.0, w_plus: 1.0 }
    }

    pub fn d_calib(&self, band: Band) -> f64 {
        match band {
            Band::Lower => self.d_calib_lower,
            Band::Upper => self.d_calib_upper,
            Band::Center => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a_min > 0.0 && self.a_min < 1.0) || !self.nprime.is_multiple_of(2) {
            return invalid("a_min must lie in (0, 1) and N' must be even");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeEstimate {
    /// Bistatic range estimate in `[0, d_max)`.
    pub d_hat: f64,
    /// Range difference before calibration and wrap.
    pub delta_d: f64,
    pub i0: usize,
    pub i_band: usize,
}

/// `[d₀ + Δd − d_calib] mod d_max`.
pub fn wrap_range(d0: f64, delta_d: f64, d_calib: f64, d_max: f64) -> f64 {
    let d = (d0 + delta_d - d_calib).rem_euclid(d_max);
    if d >= d_max {
        0.0
    } else {
        d
    }
}

/// Signed difference `a − b` folded into `[-d_max/2, d_max/2)`.
pub fn wrapped_error(a: f64, b: f64, d_max: f64) -> f64 {
    (a - b + 0.5 * d_max).rem_euclid(d_max) - 0.5 * d_max
}

/// IR-First: first significant peak of the center CIR and of the band CIR
/// (searched from the center peak on), differenced in bins.
pub fn ir_first_range(cir0: &CirEstimate, cir_band: &CirEstimate, config: &RangingConfig) -> Result<RangeEstimate> {
    config.validate()?;
    let n = cir0.nprime();
    if cir_band.nprime() != n {
        return invalid("CIRs differ in length");
    }
    // Both CIRs are rotated so the reference peak sits well inside the
    // record; the center path can land slightly before bin 0 otherwise.
    let shift = n / 8;
    let r0 = cir0.rotated(shift);
    let rb = cir_band.rotated(shift);
    let i0 = first_peak(&r0, config.a_min, 0)?;
    let d_calib = config.d_calib(cir_band.band);
    // The band path can precede the center path by noise jitter when
    // d12 ≈ d0, so the search opens one resolution cell early.
    let cell = (n as f64 / cir0.n as f64).round() as usize;
    let start = i0.saturating_sub(cell);
    // Circular search from `start`, so a band path that wraps past the
    // record end is still found (at a bin beyond `n`). The view opens one
    // bin early since `first_peak` skips the edge bins.
    let base = start.saturating_sub(1);
    let ib = base + first_peak(&rb.rotated(n - base % n), config.a_min, 0)?;
    let delta_d = (ib as f64 - i0 as f64) * cir0.grid_m;
    let d_max = n as f64 * cir0.grid_m;
    Ok(RangeEstimate { d_hat: wrap_range(config.d0_true, delta_d, d_calib, d_max), delta_d, i0, i_band: ib })
}

/// Weighted combination of the two side-band estimates.
pub fn combine_ranges(d_minus: f64, d_plus: f64, w_minus: f64, w_plus: f64) -> Result<f64> {
    if !(w_minus >= 0.0 && w_plus >= 0.0) || w_minus + w_plus == 0.0 {
        return invalid("weights must be >= 0 and not both zero");
    }
    Ok((w_minus * d_minus + w_plus * d_plus) / (w_minus + w_plus))
}

/// MUSIC pseudo-spectrum on a delay grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MusicSpectrum {
    /// Delay hypotheses, 1/B units.
    pub theta: Vec<f64>,
    pub pseudo: Vec<f64>,
    pub model_order: usize,
    /// Covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

/// Subarray length `⌈2N/3⌉`.
pub fn music_subarray(n: usize) -> usize {
    (2 * n).div_ceil(3)
}

/// Minimum description length order from descending eigenvalues with
/// `snapshots` effective snapshots, capped at `M/2` so the noise subspace
/// keeps at least half the dimensions.
pub fn mdl_order(eig: &[f64], snapshots: usize) -> usize {
    let m = eig.len();
    let k_snap = snapshots as f64;
    let mut best = (f64::INFINITY, 0);
    for k in 0..=m / 2 {
        let tail: Vec<f64> = eig[k..].iter().map(|v| v.max(1e-300)).collect();
        let len = tail.len() as f64;
        let arith = tail.iter().sum::<f64>() / len;
        let geo = (tail.iter().map(|v| v.ln()).sum::<f64>() / len).exp();
        let mdl = -k_snap * len * (geo / arith).ln() + 0.5 * k as f64 * (2.0 * m as f64 - k as f64) * k_snap.ln();
        if mdl < best.0 {
            best = (mdl, k);
        }
    }
    best.1
}

/// Forward–backward smoothed covariance over subcarrier subarrays,
/// noise-subspace pseudo-spectrum on `grid` delays spanning
/// `[-N/8, 7N/8)`. `model_order = None` selects the order by MDL.
pub fn music_spectrum(h_hat: &[Complex64], model_order: Option<usize>, grid: usize) -> Result<MusicSpectrum> {
    let n = h_hat.len();
    let m = music_subarray(n);
    if n < 3 || grid == 0 {
        return invalid("MUSIC needs N >= 3 and a non-empty grid");
    }
    if let Some(k) = model_order {
        if k == 0 || k >= m {
            return invalid(format!("model order must lie in [1, {})", m));
        }
    }
    let p = n - m + 1;
    let mut r = DMatrix::<Complex64>::zeros(m, m);
    for s in 0..p {
        let x = nalgebra::DVector::from_column_slice(&h_hat[s..s + m]);
        r += &x * x.adjoint();
    }
    r /= Complex64::new(p as f64, 0.0);
    let j = DMatrix::<Complex64>::from_fn(m, m, |a, b| if a + b == m - 1 { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) });
    let r = (&r + &j * r.conjugate() * &j) * Complex64::new(0.5, 0.0);
    let tr: f64 = (0..m).map(|i| r[(i, i)].re).sum();
    if !(tr > 0.0) || !tr.is_finite() {
        return Err(Error::EstimationFailed("covariance is zero or not finite".into()));
    }
    let eig = SymmetricEigen::new(r);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let k = match model_order {
        Some(k) => k,
        None => mdl_order(&eigenvalues, 2 * p).max(1),
    };
    let lo = -(n as f64) / 8.0;
    let mut denom = vec![0.0; grid];
    let size = grid;
    for &col in &order[k..] {
        // Σ_m conj(e_m) e^{-j2πm(lo + i·N/grid)/N} via one FFT per vector.
        let mut buf = vec![Complex64::new(0.0, 0.0); size];
        for mm in 0..m {
            let e = eig.eigenvectors[(mm, col)].conj();
            buf[mm % size] += e * Complex64::from_polar(1.0, -2.0 * PI * mm as f64 * lo / n as f64);
        }
        fft_inplace(&mut buf);
        let s = size as f64;
        denom.iter_mut().zip(&buf).for_each(|(d, v)| *d += v.norm_sqr() * s);
    }
    let theta: Vec<f64> = (0..grid).map(|i| lo + i as f64 * n as f64 / grid as f64).collect();
    let pseudo = denom.iter().map(|d| 1.0 / d.max(1e-300)).collect();
    Ok(MusicSpectrum { theta, pseudo, model_order: k, eigenvalues })
}

/// Earliest local maximum above `rel` of the spectrum maximum, at a delay
/// no smaller than `min_theta`.
pub fn earliest_music_peak(spec: &MusicSpectrum, rel: f64, min_theta: f64) -> Result<f64> {
    let p = &spec.pseudo;
    let thr = rel * p.iter().cloned().fold(0.0, f64::max);
    (1..p.len() - 1)
        .find(|&i| spec.theta[i] >= min_theta && p[i - 1] < p[i] && p[i] >= p[i + 1] && p[i] >= thr)
        .map(|i| spec.theta[i])
        .ok_or_else(|| Error::NotFound("no MUSIC peak above threshold".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MusicConfig {
    pub grid: usize,
    pub rel_threshold: f64,
    /// `None`: MDL order selection.
    pub model_order: Option<usize>,
}

impl Default for MusicConfig {
    fn default() -> Self {
        Self { grid: 4096, rel_threshold: 0.1, model_order: None }
    }
}

/// MUSIC range: earliest pseudo-spectrum peak of the center and band
/// estimates, differenced and passed through the IR-First range pipeline.
pub fn music_range(
    h0_hat: &[Complex64],
    hb_hat: &[Complex64],
    band: Band,
    music: &MusicConfig,
    config: &RangingConfig,
    ofdm: &OfdmConfig,
) -> Result<RangeEstimate> {
    let s0 = music_spectrum(h0_hat, music.model_order, music.grid)?;
    let sb = music_spectrum(hb_hat, music.model_order, music.grid)?;
    let step = ofdm.n as f64 / music.grid as f64;
    let t0 = earliest_music_peak(&s0, music.rel_threshold, f64::NEG_INFINITY)?;
    let d_calib = config.d_calib(band);
    let tb = earliest_music_peak(&sb, music.rel_threshold, t0 - 1.0)?;
    let cb = SPEED_OF_LIGHT / ofdm.bandwidth();
    let delta_d = (tb - t0) * cb;
    let d_hat = wrap_range(config.d0_true, delta_d, d_calib, ofdm.d_max());
    Ok(RangeEstimate { d_hat, delta_d, i0: ((t0 - s0.theta[0]) / step).round() as usize, i_band: ((tb - s0.theta[0]) / step).round() as usize })
}

/// Measured group-delay range offsets per method and band.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Calibration {
    pub ir_first: [f64; 2],
    pub music: [f64; 2],
}

impl Calibration {
    pub fn apply(&self, base: &RangingConfig, music: bool) -> RangingConfig {
        let v = if music { self.music } else { self.ir_first };
        RangingConfig { d_calib_lower: v[0], d_calib_upper: v[1], ..base.clone() }
    }
}

/// Zero-delay reference runs: every link a single unit LoS path with zero
/// delay, the front end of `template`, random illumination timing and
/// phases, no noise. The mean range difference per band is the
/// calibration distance. The reference channel has one path, so MUSIC runs
/// with model order 1 here (MDL is unreliable on noiseless data).
pub fn calibrate(template: &LinkScenario, runs: usize, seed: u64, base: &RangingConfig, music: &MusicConfig) -> Result<Calibration> {
    if runs == 0 {
        return invalid("calibration needs at least one run");
    }
    let ofdm = &template.ofdm;
    let b = ofdm.bandwidth();
    let unit = |link| MultipathChannel::from_taps(link, &[(0.0, Complex64::new(1.0, 0.0))], b);
    let mut rng = rng_from_seed(seed);
    let mut acc = Calibration::default();
    let cal_cfg = RangingConfig { d0_true: 0.0, d_calib_lower: -1.0, d_calib_upper: -1.0, ..base.clone() };
    let windows = 8;
    let music = &MusicConfig { model_order: Some(1), ..*music };
    for _ in 0..runs {
        let mut sc = template.clone();
        sc.h0 = unit(Link::TxRx)?;
        sc.h1 = unit(Link::TxTag)?;
        sc.h2 = unit(Link::TagRx)?;
        sc.front_end.noise_var = PerBand::splat(0.0);
        sc.front_end.adc_bits = None;
        sc.timing_offset = rng.random_range(0.0..ofdm.n as f64);
        sc.phi_tx = rng.random_range(0.0..2.0 * PI);
        sc.front_end.phases = PerBand::from_fn(|_| rng.random_range(0.0..2.0 * PI));
        let (clean, _, symbol) = sc.simulate_clean(&TagSchedule::Cw { windows })?;
        let est = estimate_link_channels(&clean, &symbol, ofdm.n, None, 0.05)?;
        let c0 = oversampled_cir(Band::Center, &est.h_hat.center, base.nprime, ofdm.delta_f)?;
        for (i, band) in Band::SIDE.into_iter().enumerate() {
            let cb = oversampled_cir(band, est.h_hat.get(band), base.nprime, ofdm.delta_f)?;
            acc.ir_first[i] += ir_first_range(&c0, &cb, &cal_cfg)?.delta_d;
            acc.music[i] += music_range(&est.h_hat.center, est.h_hat.get(band), band, music, &cal_cfg, ofdm)?.delta_d;
        }
    }
    for v in acc.ir_first.iter_mut().chain(acc.music.iter_mut()) {
        *v /= runs as f64;
    }
    Ok(acc)
}
