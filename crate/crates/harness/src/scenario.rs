//! Random scenario generation and noise scaling.

use std::f64::consts::PI;

use backsim_core::channel::{cfr, geometry_to_channels, Geometry, MultipathChannel};
use backsim_core::link::LinkScenario;
use backsim_core::receiver::{mean_power, random_phases, FrontEndConfig};
use backsim_core::signalcore::{rng_from_seed, ComplexVec};
use backsim_core::tag::{TagConfig, TagMode};
use backsim_core::waveform::{Band, OfdmConfig, PerBand, SymbolKind};
use rand::Rng;

use crate::spec::Options;
use crate::Result;

pub const TX: [f64; 2] = [-8.0, 0.0];
pub const RX: [f64; 2] = [8.0, 0.0];

/// Tag uniform in [−9,9]×[−8,8] m; scatterers uniform in a box of
/// half-width `extent` around the TX/RX/tag centroid.
pub fn random_geometry<R: Rng>(rng: &mut R, scatterers: usize, extent: f64) -> Geometry {
    let tag = [rng.random_range(-9.0..=9.0), rng.random_range(-8.0..=8.0)];
    let c = [(TX[0] + RX[0] + tag[0]) / 3.0, (TX[1] + RX[1] + tag[1]) / 3.0];
    let scatterers = (0..scatterers)
        .map(|_| [c[0] + rng.random_range(-extent..=extent), c[1] + rng.random_range(-extent..=extent)])
        .collect();
    Geometry { tx: TX, rx: RX, tag, scatterers }
}

/// A drawn scenario: geometry plus the link with random unsynchronized
/// offsets (phases, CFOs, illumination timing).
#[derive(Debug, Clone)]
pub struct Drawn {
    pub geometry: Geometry,
    pub link: LinkScenario,
}

impl Drawn {
    pub fn d0(&self) -> f64 {
        self.geometry.d0()
    }

    /// True bistatic range `d₁ + d₂`.
    pub fn d12(&self) -> f64 {
        self.geometry.d1() + self.geometry.d2()
    }
}

pub fn front_end(ofdm: &OfdmConfig, opts: &Options) -> FrontEndConfig {
    let mut fe = FrontEndConfig::ideal(ofdm.n);
    let g = opts.group_delays;
    fe.group_delays = PerBand::new(g[0], g[1], g[2]);
    fe
}

/// Redraw the unsynchronized offsets of `link` in place.
pub fn randomize_offsets<R: Rng>(link: &mut LinkScenario, rng: &mut R, opts: &Options) {
    link.front_end.phases = random_phases(rng);
    link.front_end.f_off_rx = uniform_sym(rng, opts.rx_cfo_hz);
    link.tag.f_off_tag = uniform_sym(rng, opts.tag_cfo_hz);
    link.phi_tx = rng.random_range(0.0..2.0 * PI);
    link.timing_offset = rng.random_range(0.0..link.ofdm.n as f64);
}

fn uniform_sym<R: Rng>(rng: &mut R, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

pub fn draw(ofdm: &OfdmConfig, opts: &Options, scatterers: usize, mode: TagMode, seed: u64) -> Result<Drawn> {
    let mut rng = rng_from_seed(seed);
    let geometry = random_geometry(&mut rng, scatterers, opts.scatter_extent_m);
    let (h0, h1, h2) = geometry_to_channels(&geometry, ofdm, rng.random())?;
    let mut link = LinkScenario {
        ofdm: ofdm.clone(),
        illumination: SymbolKind::ZadoffChu { root: 1 },
        h0,
        h1,
        h2,
        tag: TagConfig::for_ofdm(ofdm, mode),
        front_end: front_end(ofdm, opts),
        phi_tx: 0.0,
        timing_offset: 0.0,
    };
    randomize_offsets(&mut link, &mut rng, opts);
    Ok(Drawn { geometry, link })
}

/// Noise variances giving side-band SNR `snr_db` (total received power over
/// noise) and the center band `offset_db` higher.
pub fn noise_for_snr(clean: &PerBand<ComplexVec>, snr_db: f64, offset_db: f64) -> PerBand<f64> {
    let lin = |db: f64| 10f64.powf(db / 10.0);
    PerBand::from_fn(|b| {
        let p = mean_power(clean.get(b));
        match b {
            Band::Center => p / lin(snr_db + offset_db),
            _ => p / lin(snr_db),
        }
    })
}

/// The channel with only its LoS path.
pub fn los_only(ch: &MultipathChannel) -> MultipathChannel {
    MultipathChannel { link: ch.link, paths: ch.paths[..1].to_vec() }
}

/// Per band, the received power of the LoS-only link over that of the
/// full link. Ranging noise is referenced to the LoS-only power, so a
/// given SNR point keeps the same noise level whatever the scatterers add.
pub fn los_power_fraction(link: &LinkScenario) -> Result<PerBand<f64>> {
    let ofdm = &link.ofdm;
    let energy = |v: &ComplexVec| v.iter().map(|x| x.norm_sqr()).sum::<f64>();
    let n = ofdm.n as f64;
    let a0 = link.h0.los().gain.norm_sqr();
    let a12 = link.h1.los().gain.norm_sqr() * link.h2.los().gain.norm_sqr();
    let h1 = cfr(&link.h1, ofdm, Band::Center)?;
    let side = |b: Band| -> Result<f64> {
        let h2 = cfr(&link.h2, ofdm, b)?;
        Ok(n * a12 / energy(&h1.iter().zip(&h2).map(|(x, y)| x * y).collect()))
    };
    Ok(PerBand::new(n * a0 / energy(&cfr(&link.h0, ofdm, Band::Center)?), side(Band::Lower)?, side(Band::Upper)?))
}
