//! Two-path resolvability sweep: one NLoS path in either the TX-RX or the
//! tag-RX channel, swept in excess length and relative power.

use std::f64::consts::PI;

use backsim_core::channel::{geometry_to_channels, Geometry, Link, MultipathChannel, Path};
use backsim_core::link::LinkScenario;
use backsim_core::signalcore::rng_from_seed;
use backsim_core::tag::{TagConfig, TagMode};
use backsim_core::waveform::SymbolKind;
use backsim_core::{Complex64, SPEED_OF_LIGHT};
use rand::Rng;
use rayon::prelude::*;

use super::{cw, experiment_calibration, noisy, range_error, ranging_rows, seed_for, Method};
use crate::record::{aggregate, ResultRecord, RunRow};
use crate::scenario::{front_end, randomize_offsets, RX, TX};
use crate::spec::ExperimentSpec;
use crate::Result;

/// Reference geometry with the tag at (0, 4).
pub fn reference_geometry() -> Geometry {
    Geometry { tx: TX, rx: RX, tag: [0.0, 4.0], scatterers: vec![] }
}

pub const NLOS_LINKS: [(Link, &str); 2] = [(Link::TxRx, "ir_first_tx_rx"), (Link::TagRx, "ir_first_tag_rx")];

fn with_nlos(ch: &MultipathChannel, excess_m: f64, rel_db: f64, phase: f64, bandwidth: f64) -> MultipathChannel {
    let los = *ch.los();
    let length_m = los.length_m + excess_m;
    let nlos = Path {
        length_m,
        delay_samples: length_m * bandwidth / SPEED_OF_LIGHT,
        gain: los.gain * Complex64::from_polar(10f64.powf(rel_db / 20.0), phase),
    };
    MultipathChannel { link: ch.link, paths: vec![los, nlos] }
}

pub fn run_resolvability(spec: &ExperimentSpec) -> Result<ResultRecord> {
    let o = &spec.options;
    let ofdm = &spec.ofdm;
    let g = reference_geometry();
    let (h0, h1, h2) = geometry_to_channels(&g, ofdm, spec.seed)?;
    let base = LinkScenario {
        ofdm: ofdm.clone(),
        illumination: SymbolKind::ZadoffChu { root: 1 },
        h0,
        h1,
        h2,
        tag: TagConfig::for_ofdm(ofdm, TagMode::Cw),
        front_end: front_end(ofdm, o),
        phi_tx: 0.0,
        timing_offset: 0.0,
    };
    let cal_seed = seed_for(spec.seed, &[0]);
    let cal = experiment_calibration(spec, &base, cal_seed)?;
    let (d0, d12) = (g.d0(), g.d1() + g.d2());

    let mut tasks = Vec::new();
    for (li, _) in NLOS_LINKS.iter().enumerate() {
        for (pi, _) in o.rel_power_grid_db.iter().enumerate() {
            for (di, _) in o.delta_d_grid_m.iter().enumerate() {
                for r in 0..spec.repeats {
                    tasks.push((li, pi, di, r));
                }
            }
        }
    }
    let b = ofdm.bandwidth();
    let out: Vec<(Vec<RunRow>, u64)> = tasks
        .par_iter()
        .map(|&(li, pi, di, r)| -> Result<(Vec<RunRow>, u64)> {
            let seed = seed_for(spec.seed, &[2, li as u64, pi as u64, di as u64, r as u64]);
            let mut rng = rng_from_seed(seed);
            let (link, method) = NLOS_LINKS[li];
            let (dd, p) = (o.delta_d_grid_m[di], o.rel_power_grid_db[pi]);
            let mut sc = base.clone();
            let phase = rng.random_range(0.0..2.0 * PI);
            match link {
                Link::TxRx => sc.h0 = with_nlos(&sc.h0, dd, p, phase, b),
                _ => sc.h2 = with_nlos(&sc.h2, dd, p, phase, b),
            }
            randomize_offsets(&mut sc, &mut rng, o);
            let (clean, _, symbol) = sc.simulate_clean(&cw(o.windows))?;
            let snr = if o.noiseless { None } else { Some(o.resolvability_snr_db) };
            let caps = noisy(&sc, &clean, snr, o.center_snr_offset_db, rng.random())?;
            let e = range_error(&sc, &caps, &symbol, &[Method::IrFirst], spec, &cal, d0, d12)?;
            let t = RunRow::new(0, r, seed, 1, method, "", 0.0).at(dd, p);
            let mut rows = ranging_rows(&e, &[Method::IrFirst], &t, d0, d12, ofdm.d_max());
            rows.iter_mut().for_each(|row| row.method = method.into());
            Ok((rows, seed))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut seeds = vec![spec.seed, cal_seed];
    for (r, s) in out {
        rows.extend(r);
        seeds.push(s);
    }
    Ok(ResultRecord {
        experiment: spec.kind.id().into(),
        spec: spec.clone(),
        aggregates: aggregate(&rows),
        rows,
        cdf: vec![],
        curves: vec![],
        seeds,
    })
}
