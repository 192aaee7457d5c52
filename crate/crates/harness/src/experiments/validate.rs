//! Analytic versus simulated-pipeline CIRs.

use backsim_core::link::{estimate_link_channels, estimate_link_channels_with_cfo_error};
use backsim_core::ranging::{analytic_cir, oversampled_cir};
use backsim_core::tag::TagMode;
use backsim_core::waveform::{Band, PerBand};
use rayon::prelude::*;

use super::{cw, seed_for, NU_MAX};
use crate::metrics::nmae_align;
use crate::record::{aggregate, ResultRecord, RunRow};
use crate::scenario::{draw, noise_for_snr};
use crate::spec::ExperimentSpec;
use crate::Result;

const BANDS: [(Band, &str); 3] = [(Band::Center, "h0"), (Band::Lower, "h12-"), (Band::Upper, "h12+")];

fn task(spec: &ExperimentSpec, ci: usize, count: usize, s: usize) -> Result<(Vec<RunRow>, Vec<u64>)> {
    let seed = seed_for(spec.seed, &[1, ci as u64, s as u64]);
    let o = &spec.options;
    let d = draw(&spec.ofdm, o, count, TagMode::Cw, seed)?;
    let ofdm = &d.link.ofdm;
    let mut rows = Vec::new();
    let mut seeds = vec![seed];

    let (clean, _, symbol) = d.link.simulate_clean(&cw(o.validate_windows))?;
    let est = estimate_link_channels(&clean, &symbol, ofdm.n, None, NU_MAX)?;
    let ana = analytic_cir(&d.link.h0, &d.link.h1, &d.link.h2, &d.link.truth_sync(est.sync.k0), &d.link.front_end, d.link.phi_tx, ofdm)?;
    for (band, name) in BANDS {
        let meas = oversampled_cir(band, est.h_hat.get(band), ofdm.nprime, ofdm.delta_f)?;
        let (e, _) = nmae_align(ana.get(band), &meas)?;
        rows.push(RunRow::new(s, 0, seed, count, &format!("pure_{name}"), "nmae", e));
    }

    if let Some(hw) = &o.hardware {
        let hw_seed = sub_seed_for_noise(seed);
        seeds.push(hw_seed);
        let mut link = d.link.clone();
        link.front_end.adc_bits = Some(hw.adc_bits);
        let (clean, _, _) = link.simulate_clean(&cw(hw.windows))?;
        let var: PerBand<f64> = noise_for_snr(&clean, hw.band_snr_db, o.center_snr_offset_db);
        link.front_end.noise_var = var;
        let sim = link.simulate(&cw(hw.windows), hw_seed)?;
        let caps = sim.captures.map(|_, c| c.samples.clone());
        let est = estimate_link_channels_with_cfo_error(&caps, &sim.symbol, ofdm.n, None, NU_MAX, hw.residual_cfo)?;
        let ana = analytic_cir(&link.h0, &link.h1, &link.h2, &link.truth_sync(est.sync.k0), &link.front_end, link.phi_tx, ofdm)?;
        for (band, name) in BANDS {
            let meas = oversampled_cir(band, est.h_hat.get(band), ofdm.nprime, ofdm.delta_f)?;
            let (e, _) = nmae_align(ana.get(band), &meas)?;
            rows.push(RunRow::new(s, 0, hw_seed, count, &format!("hw_{name}"), "nmae", e));
        }
    }
    Ok((rows, seeds))
}

fn sub_seed_for_noise(seed: u64) -> u64 {
    backsim_core::signalcore::sub_seed(seed, 0x4e01)
}

/// For each scatterer count, `scenarios` random channels: NMAE between the
/// analytic and pipeline CIRs, noiseless and (optionally) with injected
/// hardware-grade impairments.
pub fn run_validate_cir(spec: &ExperimentSpec) -> Result<ResultRecord> {
    let tasks: Vec<(usize, usize, usize)> = spec
        .scatterer_counts
        .iter()
        .enumerate()
        .flat_map(|(ci, &c)| (0..spec.scenarios).map(move |s| (ci, c, s)))
        .collect();
    let out: Vec<(Vec<RunRow>, Vec<u64>)> =
        tasks.par_iter().map(|&(ci, c, s)| task(spec, ci, c, s)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut seeds = vec![spec.seed];
    for (r, s) in out {
        rows.extend(r);
        seeds.extend(s);
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
