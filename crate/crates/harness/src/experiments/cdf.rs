//! Range-error CDFs per scatterer count.

use backsim_core::signalcore::sub_seed;
use backsim_core::tag::TagMode;
use rayon::prelude::*;

use super::{cw, experiment_calibration, noisy, range_error, ranging_rows, seed_for, Method};
use crate::record::{aggregate, error_cdf, ResultRecord, RunRow};
use crate::scenario::draw;
use crate::spec::ExperimentSpec;
use crate::Result;

const METHODS: [Method; 2] = [Method::IrFirst, Method::Music];

pub fn run_ranging_cdf(spec: &ExperimentSpec) -> Result<ResultRecord> {
    let o = &spec.options;
    let cal_seed = seed_for(spec.seed, &[0]);
    let template = draw(&spec.ofdm, o, 0, TagMode::Cw, cal_seed)?.link;
    let cal = experiment_calibration(spec, &template, cal_seed)?;
    let snr = (!o.noiseless).then_some(o.cdf_snr_db);

    let tasks: Vec<(usize, usize, usize)> = (0..spec.scatterer_counts.len())
        .flat_map(|ci| (0..spec.scenarios).flat_map(move |s| (0..spec.repeats).map(move |r| (ci, s, r))))
        .collect();
    let out: Vec<(Vec<RunRow>, u64)> = tasks
        .par_iter()
        .map(|&(ci, s, r)| -> Result<(Vec<RunRow>, u64)> {
            let count = spec.scatterer_counts[ci];
            // repeats share the channel and redraw offsets and noise
            let seed = seed_for(spec.seed, &[6, ci as u64, s as u64]);
            let mut d = draw(&spec.ofdm, o, count, TagMode::Cw, seed)?;
            let rep_seed = sub_seed(seed, r as u64);
            if r > 0 {
                let mut rng = backsim_core::signalcore::rng_from_seed(rep_seed);
                crate::scenario::randomize_offsets(&mut d.link, &mut rng, o);
            }
            let (clean, _, symbol) = d.link.simulate_clean(&cw(o.windows))?;
            let caps = noisy(&d.link, &clean, snr, o.center_snr_offset_db, sub_seed(rep_seed, 7))?;
            let e = range_error(&d.link, &caps, &symbol, &METHODS, spec, &cal, d.d0(), d.d12())?;
            let t = RunRow::new(s, r, rep_seed, count, "", "", 0.0).at(o.cdf_snr_db, 0.0);
            Ok((ranging_rows(&e, &METHODS, &t, d.d0(), d.d12(), spec.ofdm.d_max()), rep_seed))
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
        cdf: error_cdf(&rows),
        rows,
        curves: vec![],
        seeds,
    })
}
