//! SNR sweep: ranging RMSE and R-CRLB per (SNR, scatterer count), and BER
//! over burst packets per per-bit SNR.

use backsim_core::channel::geometry_to_channels;
use backsim_core::crlb::{mu_d0, mu_d12, stochastic_crlb, CrlbInputs};
use backsim_core::link::{add_noise, decode_tag, estimate_link_channels, TagSchedule};
use backsim_core::receiver::{estimate_snr, mean_power};
use backsim_core::signalcore::{sub_seed, ComplexVec};
use backsim_core::tag::{TagMode, TagPacket, DEFAULT_PREAMBLE};
use backsim_core::waveform::{Band, PerBand};
use rand::Rng;
use rayon::prelude::*;

use super::{cw, experiment_calibration, noisy, range_error, ranging_rows, seed_for, Method, NU_MAX};
use crate::metrics::bpsk_ber;
use crate::record::{aggregate, Aggregate, ResultRecord, RunRow};
use crate::scenario::{draw, los_only, random_geometry};
use crate::spec::ExperimentSpec;
use crate::{HarnessError, Result};

const METHODS: [Method; 2] = [Method::IrFirst, Method::Music];

fn db(x: f64) -> f64 {
    10f64.powf(x / 10.0)
}

fn ranging_task(spec: &ExperimentSpec, cal: &backsim_core::ranging::Calibration, ci: usize, s: usize, r: usize) -> Result<(Vec<RunRow>, u64)> {
    let o = &spec.options;
    let count = spec.scatterer_counts[ci];
    let seed = seed_for(spec.seed, &[3, ci as u64, s as u64, r as u64]);
    let d = draw(&spec.ofdm, o, count, TagMode::Cw, seed)?;
    let (clean, _, symbol) = d.link.simulate_clean(&cw(o.windows))?;
    // one noise realization, rescaled per SNR point
    let noise_seed = sub_seed(seed, 7);
    let mut rows = Vec::new();
    for snr in spec.snr_points() {
        let caps = noisy(&d.link, &clean, (!o.noiseless).then_some(snr), o.center_snr_offset_db, noise_seed)?;
        let e = range_error(&d.link, &caps, &symbol, &METHODS, spec, cal, d.d0(), d.d12())?;
        let t = RunRow::new(s, r, seed, count, "", "", 0.0).at(snr, 0.0);
        rows.extend(ranging_rows(&e, &METHODS, &t, d.d0(), d.d12(), spec.ofdm.d_max()));
    }
    Ok((rows, seed))
}

/// Information-averaged bound over random geometries with `count`
/// scatterers; the side-band informations add across the two bands.
fn crlb_curve(spec: &ExperimentSpec, ci: usize, snr_db: f64) -> Result<(Vec<Aggregate>, u64)> {
    let o = &spec.options;
    let count = spec.scatterer_counts[ci];
    let seed = seed_for(spec.seed, &[4, ci as u64]);
    let w = o.windows as f64;
    let snr0 = db(snr_db + o.center_snr_offset_db);
    let snr = db(snr_db);
    let ofdm = spec.ofdm.clone();
    let sample = |band: Band| {
        let ofdm = ofdm.clone();
        move |rng: &mut rand_chacha::ChaCha8Rng| -> backsim_core::Result<CrlbInputs> {
            let g = random_geometry(rng, count, o.scatter_extent_m);
            let (h0, h1, h2) = geometry_to_channels(&g, &ofdm, rng.random())?;
            let beta = CrlbInputs::geometric_beta(&h1, &h2);
            let mut inp = CrlbInputs { h0, h1, h2, sigma0_sq: 1.0, sigma12_sq: 1.0, config: ofdm.clone(), beta };
            let tau0 = inp.h0.los().delay_samples;
            let tau12 = inp.h1.los().delay_samples + inp.h2.los().delay_samples;
            // noise referenced to the LoS-only link, as in the ranging runs
            let los = CrlbInputs { h0: los_only(&inp.h0), h1: los_only(&inp.h1), h2: los_only(&inp.h2), ..inp.clone() };
            let p = |v: ComplexVec| v.iter().map(|x| x.norm_sqr()).sum::<f64>() / v.len() as f64;
            inp.sigma0_sq = p(mu_d0(&los, tau0)?) / (snr0 * w);
            inp.sigma12_sq = p(mu_d12(&los, band, tau12)?) / (snr * w);
            Ok(inp)
        }
    };
    let lo = stochastic_crlb(sample(Band::Lower), Band::Lower, o.crlb_trials, seed)?;
    let up = stochastic_crlb(sample(Band::Upper), Band::Upper, o.crlb_trials, seed)?;
    let d12 = 1.0 / (1.0 / lo.crlb_d12 + 1.0 / up.crlb_d12);
    let agg = |metric: &str, value: f64| Aggregate {
        metric: metric.into(),
        method: "crlb".into(),
        scatterers: count,
        x: snr_db,
        y: 0.0,
        stat: "bound".into(),
        value,
        std_err: 0.0,
        count: o.crlb_trials,
        weight: o.crlb_trials as f64,
    };
    Ok((
        vec![agg("crlb_d0", lo.crlb_d0), agg("crlb_d12", d12), agg("r_crlb_total_m", (lo.crlb_d0 + d12).sqrt())],
        seed,
    ))
}

/// One BER record: a CW training stretch and back-to-back packets, decoded
/// at every per-bit SNR point with the same (rescaled) noise realization.
fn ber_record(spec: &ExperimentSpec, q: usize) -> Result<(Vec<RunRow>, u64)> {
    let o = &spec.options;
    let count = spec.scatterer_counts[0];
    let seed = seed_for(spec.seed, &[5, q as u64]);
    let d = draw(&spec.ofdm, o, count, TagMode::Burst, seed)?;
    let link = &d.link;
    let ofdm = &link.ofdm;
    let packets: Vec<TagPacket> =
        (0..o.ber_packets_per_record).map(|p| TagPacket::random(o.ber_payload_bits, sub_seed(seed, 100 + p as u64))).collect();
    let mut rng = backsim_core::signalcore::rng_from_seed(sub_seed(seed, 8));
    let sched = TagSchedule::Packets {
        training_windows: o.ber_training_windows,
        packets: packets.clone(),
        offset_samples: rng.random_range(0.0..ofdm.n as f64),
        tail_windows: 16,
    };
    let (clean, layout, symbol) = link.simulate_clean(&sched)?;
    let ref_est = estimate_link_channels(&clean, &symbol, ofdm.n, Some(0..o.ber_training_windows - 1), NU_MAX)?;
    let side: f64 = Band::SIDE.iter().map(|&b| ref_est.h_hat.get(b).iter().map(|v| v.norm_sqr()).sum::<f64>()).sum();
    let tsym = link.tag.tsym * ofdm.grid_rate();
    let noise_seed = sub_seed(seed, 9);
    let mut rows = Vec::new();
    for &g_db in &o.ber_grid_db {
        let s2 = o.k_mf as f64 * side / db(g_db);
        let var = PerBand::new(s2 / db(o.center_snr_offset_db), s2, s2);
        let caps = add_noise(&clean, &var, noise_seed)?;
        let dec = decode_tag(
            &caps,
            &symbol,
            ofdm.n,
            layout.training_windows,
            tsym,
            o.k_mf,
            &DEFAULT_PREAMBLE,
            o.ber_payload_bits,
            &link.tag,
            NU_MAX,
        );
        let decoded = match dec {
            Ok((_, t)) => t.packets,
            Err(backsim_core::Error::NoPacket(_)) => vec![],
            Err(e) => return Err(e.into()),
        };
        let mut errors = 0usize;
        for (p, sent) in packets.iter().enumerate() {
            let start = layout.packet_start + (p * layout.symbols_per_packet) as f64 * layout.tsym_samples;
            let hit = decoded.iter().find(|k| (k.start_sample - start).abs() < layout.tsym_samples / 2.0);
            errors += match hit {
                Some(k) => k.payload_bits.iter().zip(&sent.payload).filter(|(a, b)| a != b).count(),
                None => sent.payload.len(),
            };
        }
        let bits = (packets.len() * o.ber_payload_bits) as f64;
        let row = RunRow::new(q, 0, seed, count, "mrc", "ber", errors as f64 / bits).at(g_db, 0.0).weighted(bits);
        rows.push(row);
        let est = estimate_snr(mean_power(&caps.lower), s2, tsym, ofdm.n as f64)?;
        rows.push(RunRow::new(q, 0, seed, count, "lower", "snr_est_db", 10.0 * est.max(1e-300).log10()).at(g_db, 0.0));
    }
    Ok((rows, seed))
}

pub fn run_snr_sweep(spec: &ExperimentSpec) -> Result<ResultRecord> {
    let o = &spec.options;
    let cal_seed = seed_for(spec.seed, &[0]);
    let template = draw(&spec.ofdm, o, 0, TagMode::Cw, cal_seed)?.link;
    let cal = experiment_calibration(spec, &template, cal_seed)?;
    let mut seeds = vec![spec.seed, cal_seed];
    let mut rows = Vec::new();

    let tasks: Vec<(usize, usize, usize)> = (0..spec.scatterer_counts.len())
        .flat_map(|ci| (0..spec.scenarios).flat_map(move |s| (0..spec.repeats).map(move |r| (ci, s, r))))
        .collect();
    let out: Vec<(Vec<RunRow>, u64)> =
        tasks.par_iter().map(|&(ci, s, r)| ranging_task(spec, &cal, ci, s, r)).collect::<Result<_>>()?;
    for (r, s) in out {
        rows.extend(r);
        seeds.push(s);
    }

    let crlb_tasks: Vec<(usize, f64)> = (0..spec.scatterer_counts.len())
        .flat_map(|ci| spec.snr_points().into_iter().map(move |s| (ci, s)))
        .collect();
    let mut curves = Vec::new();
    if o.crlb_trials > 0 {
        let out: Vec<(Vec<Aggregate>, u64)> =
            crlb_tasks.par_iter().map(|&(ci, s)| crlb_curve(spec, ci, s)).collect::<Result<_>>()?;
        for (c, s) in out {
            curves.extend(c);
            if !seeds.contains(&s) {
                seeds.push(s);
            }
        }
    }

    if !o.ber_grid_db.is_empty() {
        if o.ber_payload_bits == 0 || o.ber_packets_per_record == 0 {
            return Err(HarnessError::Spec("BER records need packets with payload".into()));
        }
        let per_record = o.ber_payload_bits * o.ber_packets_per_record;
        let records = o.ber_min_bits.div_ceil(per_record).max(1);
        let out: Vec<(Vec<RunRow>, u64)> = (0..records).into_par_iter().map(|q| ber_record(spec, q)).collect::<Result<_>>()?;
        for (r, s) in out {
            rows.extend(r);
            seeds.push(s);
        }
        for &g in &o.ber_grid_db {
            curves.push(Aggregate {
                metric: "ber".into(),
                method: "theory".into(),
                scatterers: spec.scatterer_counts[0],
                x: g,
                y: 0.0,
                stat: "bound".into(),
                value: bpsk_ber(db(g)),
                std_err: 0.0,
                count: 0,
                weight: 0.0,
            });
        }
    }

    Ok(ResultRecord {
        experiment: spec.kind.id().into(),
        spec: spec.clone(),
        aggregates: aggregate(&rows),
        rows,
        cdf: vec![],
        curves,
        seeds,
    })
}
