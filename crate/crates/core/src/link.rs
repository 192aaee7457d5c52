//! End-to-end link simulation: illumination, the three channels, the tag
//! and the reader front end, plus the receiver steps shared by the
//! experiments.
//!
//! Records are periodic (length a multiple of the symbol period) and every
//! delay is applied circularly, which makes tiled-symbol captures exact.

use std::f64::consts::PI;
use std::ops::Range;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{apply_channel, fractional_delay, Extension, MultipathChannel};
use crate::error::{invalid, Result};
use crate::receiver::{
    average_cfr, correct_cfo, demod_ofdm, estimate_cfo, estimate_channels, extract_tag_symbols, front_end,
    front_end_clean, matched_stream, BandCapture, FrontEndConfig, StreamLayout, SyncState, TagDecode,
};
use crate::signalcore::{awgn_from, rng_from_seed, ComplexVec};
use crate::tag::{band_coefficient, TagConfig, TagPacket};
use crate::waveform::{make_symbol, serialize, Band, OfdmConfig, OfdmSymbol, PerBand, SymbolKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkScenario {
    pub ofdm: OfdmConfig,
    pub illumination: SymbolKind,
    pub h0: MultipathChannel,
    pub h1: MultipathChannel,
    pub h2: MultipathChannel,
    pub tag: TagConfig,
    pub front_end: FrontEndConfig,
    pub phi_tx: f64,
    /// Illumination start relative to the capture, samples in `[0, N)`.
    pub timing_offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TagSchedule {
    /// Unmodulated tag (`x_pkt = 1`) for the whole record.
    Cw { windows: usize },
    /// CW training, then back-to-back packets, then a CW tail.
    Packets { training_windows: usize, packets: Vec<TagPacket>, offset_samples: f64, tail_windows: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptureLayout {
    pub total_samples: usize,
    pub training_windows: usize,
    /// Tag-time start of the first packet, samples.
    pub packet_start: f64,
    /// Tag symbol period in samples (tag clock offset included).
    pub tsym_samples: f64,
    pub symbols_per_packet: usize,
    pub n_packets: usize,
}

#[derive(Debug, Clone)]
pub struct SimCapture {
    pub captures: PerBand<BandCapture>,
    pub layout: CaptureLayout,
    pub symbol: OfdmSymbol,
}

impl LinkScenario {
    pub fn validate(&self) -> Result<()> {
        self.ofdm.validate()?;
        if self.ofdm.oversample != 1 {
            return invalid("the link simulation runs at the grid rate (oversample = 1)");
        }
        self.tag.validate()?;
        self.front_end.validate(self.ofdm.n)?;
        for h in [&self.h0, &self.h1, &self.h2] {
            h.check()?;
        }
        Ok(())
    }

    fn layout(&self, schedule: &TagSchedule) -> Result<CaptureLayout> {
        let n = self.ofdm.n;
        let tsym = self.tag.tsym_actual() * self.ofdm.grid_rate();
        Ok(match schedule {
            TagSchedule::Cw { windows } => {
                if *windows < 2 {
                    return invalid("a CW capture needs at least two windows");
                }
                CaptureLayout {
                    total_samples: windows * n,
                    training_windows: *windows,
                    packet_start: (windows * n) as f64,
                    tsym_samples: tsym,
                    symbols_per_packet: 0,
                    n_packets: 0,
                }
            }
            TagSchedule::Packets { training_windows, packets, offset_samples, tail_windows } => {
                if packets.is_empty() {
                    return invalid("packet schedule without packets");
                }
                let m = packets[0].m();
                if packets.iter().any(|p| p.m() != m) {
                    return invalid("all packets must have the same length");
                }
                if !(*offset_samples >= 0.0) {
                    return invalid("packet offset must be >= 0");
                }
                let start = (training_windows * n) as f64 + offset_samples;
                let end = start + (packets.len() * m) as f64 * tsym;
                let total = (end / n as f64).ceil() as usize * n + tail_windows * n;
                CaptureLayout {
                    total_samples: total,
                    training_windows: *training_windows,
                    packet_start: start,
                    tsym_samples: tsym,
                    symbols_per_packet: m,
                    n_packets: packets.len(),
                }
            }
        })
    }

    /// Tag data sequence `x_pkt(k)` on the capture grid.
    fn tag_sequence(&self, schedule: &TagSchedule, layout: &CaptureLayout) -> ComplexVec {
        let one = Complex64::new(1.0, 0.0);
        match schedule {
            TagSchedule::Cw { .. } => vec![one; layout.total_samples],
            TagSchedule::Packets { packets, .. } => {
                let syms: Vec<ComplexVec> = packets.iter().map(|p| p.symbols(&self.tag)).collect();
                let m = layout.symbols_per_packet;
                (0..layout.total_samples)
                    .map(|k| {
                        let t = k as f64 - layout.packet_start;
                        if t < 0.0 {
                            return one;
                        }
                        let s = (t / layout.tsym_samples).floor() as usize;
                        let (q, i) = (s / m, s % m);
                        if q < syms.len() {
                            syms[q][i]
                        } else {
                            one
                        }
                    })
                    .collect()
            }
        }
    }

    /// Baseband signal per band at the reader antenna, before the front end.
    pub fn rx_input(&self, schedule: &TagSchedule) -> Result<(PerBand<ComplexVec>, CaptureLayout, OfdmSymbol)> {
        self.validate()?;
        let layout = self.layout(schedule)?;
        let n = self.ofdm.n;
        let symbol = make_symbol(&self.ofdm, self.illumination)?;
        let s = serialize(&symbol, layout.total_samples / n)?;
        let rot = Complex64::from_polar(1.0, self.phi_tx);
        let s: ComplexVec = fractional_delay(&s, self.timing_offset, Extension::Circular).iter().map(|v| v * rot).collect();
        let x = self.tag_sequence(schedule, &layout);
        let fc = self.ofdm.fc;
        let ext = Extension::Circular;

        let y1 = apply_channel(&s, &self.h1, &self.ofdm, fc, ext);
        let mut center: ComplexVec = apply_channel(&s, &self.h0, &self.ofdm, fc, ext).iter().map(|v| 0.5 * v).collect();
        let a_s = self.tag.structural;
        if a_s != Complex64::new(0.0, 0.0) {
            let st = apply_channel(&y1, &self.h2, &self.ofdm, fc, ext);
            center.iter_mut().zip(&st).for_each(|(c, v)| *c += 0.5 * a_s * v);
        }
        let side = |band: Band| -> ComplexVec {
            let coef = band_coefficient(band);
            let w: ComplexVec = y1.iter().zip(&x).map(|(y, xk)| y * xk * coef).collect();
            apply_channel(&w, &self.h2, &self.ofdm, self.ofdm.band_center_hz(band), ext)
        };
        let lower = side(Band::Lower);
        let upper = side(Band::Upper);
        Ok((PerBand::new(center, lower, upper), layout, symbol))
    }

    /// Noiseless, unquantized captures.
    pub fn simulate_clean(&self, schedule: &TagSchedule) -> Result<(PerBand<ComplexVec>, CaptureLayout, OfdmSymbol)> {
        let (input, layout, symbol) = self.rx_input(schedule)?;
        let clean = front_end_clean(&input, &self.front_end, &self.ofdm, self.tag.f_off_tag)?;
        Ok((clean, layout, symbol))
    }

    pub fn simulate(&self, schedule: &TagSchedule, seed: u64) -> Result<SimCapture> {
        let (input, layout, symbol) = self.rx_input(schedule)?;
        let captures = front_end(&input, &self.front_end, &self.ofdm, self.tag.f_off_tag, seed)?;
        Ok(SimCapture { captures, layout, symbol })
    }

    /// Sync state with the true timing offset relative to `k0` and the
    /// true capture-level CFOs.
    pub fn truth_sync(&self, k0: usize) -> SyncState {
        let rate = self.ofdm.grid_rate();
        SyncState {
            cfo_est: PerBand::from_fn(|b| self.front_end.band_cfo(b, self.tag.f_off_tag, rate)),
            cfo_residual: PerBand::splat(0.0),
            k0,
            zeta: self.timing_offset - k0 as f64,
            phase_offsets: self.front_end.phases.clone(),
        }
    }
}

/// Add independent CN(0, var) noise per band.
pub fn add_noise(clean: &PerBand<ComplexVec>, var: &PerBand<f64>, seed: u64) -> Result<PerBand<ComplexVec>> {
    let mut rng = rng_from_seed(seed);
    let mut out = clean.clone();
    for b in Band::ALL {
        let v = awgn_from(&mut rng, clean.get(b).len(), *var.get(b))?;
        out.get_mut(b).iter_mut().zip(&v).for_each(|(a, n)| *a += n);
    }
    Ok(out)
}

/// Per-band channel estimates from one set of captures.
#[derive(Debug, Clone)]
pub struct ChannelEstimates {
    pub sync: SyncState,
    /// Averaged CFR per band over the averaging range.
    pub h_hat: PerBand<ComplexVec>,
    /// Per-window `R ⊘ S`, all windows from `k0`.
    pub windows: PerBand<Vec<ComplexVec>>,
}

/// Receiver front half: center-band CFO estimate applied to every band
/// (common reader clock), center-band timing reused for the side bands,
/// per-window channel estimates and ML-derotated averaging over `avg`
/// windows. `nu_max` bounds the residual per-window CFO search.
pub fn estimate_link_channels(
    captures: &PerBand<ComplexVec>,
    symbol: &OfdmSymbol,
    n: usize,
    avg: Option<Range<usize>>,
    nu_max: f64,
) -> Result<ChannelEstimates> {
    estimate_link_channels_with_cfo_error(captures, symbol, n, avg, nu_max, 0.0)
}

/// As [`estimate_link_channels`], with `cfo_error` (cycles/sample) added to
/// the repetition CFO estimate before correction.
pub fn estimate_link_channels_with_cfo_error(
    captures: &PerBand<ComplexVec>,
    symbol: &OfdmSymbol,
    n: usize,
    avg: Option<Range<usize>>,
    nu_max: f64,
    cfo_error: f64,
) -> Result<ChannelEstimates> {
    let nu0 = estimate_cfo(&captures.center, n)? + cfo_error;
    let corrected = captures.map(|_, c| correct_cfo(c, nu0));
    let mut sync = crate::receiver::timing_sync(&corrected.center, &symbol.time)?;
    let mut windows = PerBand::splat(Vec::new());
    for b in Band::ALL {
        let w = demod_ofdm(corrected.get(b), sync.k0, n)?;
        *windows.get_mut(b) = w.iter().map(|r| estimate_channels(r, &symbol.freq)).collect::<Result<Vec<_>>>()?;
    }
    let total = windows.center.len();
    let range = avg.unwrap_or(0..total);
    if range.start >= range.end || range.end > total {
        return invalid("averaging range outside the demodulated windows");
    }
    let mut h_hat = PerBand::splat(Vec::new());
    for b in Band::ALL {
        let (h, nu) = average_cfr(&windows.get(b)[range.clone()], nu_max)?;
        // Re-reference the average to window 0.
        let rot = Complex64::from_polar(1.0, -2.0 * PI * nu * range.start as f64);
        *h_hat.get_mut(b) = h.iter().map(|v| v * rot).collect();
        *sync.cfo_residual.get_mut(b) = nu;
        *sync.cfo_est.get_mut(b) = nu0;
    }
    Ok(ChannelEstimates { sync, h_hat, windows })
}

/// Tag decoding chain: channel references from the CW training windows,
/// per-band matched projections, then packet extraction. `tsym_samples` is
/// the receiver's nominal tag symbol period.
#[allow(clippy::too_many_arguments)]
pub fn decode_tag(
    captures: &PerBand<ComplexVec>,
    symbol: &OfdmSymbol,
    n: usize,
    training_windows: usize,
    tsym_samples: f64,
    k_mf: usize,
    preamble: &[u8],
    payload_len: usize,
    tag: &TagConfig,
    nu_max: f64,
) -> Result<(ChannelEstimates, TagDecode)> {
    if training_windows < 3 {
        return invalid("decoding needs at least three training windows");
    }
    // Window j spans k0 + jN, k0 < N, so the last training window is cut.
    let est = estimate_link_channels(captures, symbol, n, Some(0..training_windows - 1), nu_max)?;
    let z = |b: Band| matched_stream(est.windows.get(b), est.h_hat.get(b), *est.sync.cfo_residual.get(b));
    let layout = StreamLayout { window_len: n, k0: est.sync.k0, first_window: training_windows - 1, tsym_samples, k_mf };
    let dec = extract_tag_symbols(&z(Band::Lower), &z(Band::Upper), preamble, payload_len, tag, &layout)?;
    Ok((est, dec))
}
