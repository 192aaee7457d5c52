//! The four experiments. Each is a pure function of its spec: every random
//! draw comes from a seed derived from `spec.seed` and the task indices,
//! and task results are merged in index order.

mod cdf;
mod resolvability;
mod sweep;
mod validate;

pub use cdf::run_ranging_cdf;
pub use resolvability::{reference_geometry, run_resolvability, NLOS_LINKS};
pub use sweep::run_snr_sweep;
pub use validate::run_validate_cir;

use backsim_core::link::{add_noise, estimate_link_channels, LinkScenario, TagSchedule};
use backsim_core::ranging::{
    calibrate, combine_ranges, ir_first_range, music_range, oversampled_cir, wrapped_error, Calibration, MusicConfig,
    RangingConfig,
};
use backsim_core::signalcore::sub_seed;
use backsim_core::waveform::Band;

use crate::record::{ResultRecord, RunRow};
use crate::scenario::{los_power_fraction, noise_for_snr};
use crate::spec::{ExperimentKind, ExperimentSpec, Options};
use crate::Result;

/// Run the experiment named by `spec.kind`.
pub fn run(spec: &ExperimentSpec) -> Result<ResultRecord> {
    spec.validate()?;
    match spec.kind {
        ExperimentKind::ValidateCir => run_validate_cir(spec),
        ExperimentKind::Resolvability => run_resolvability(spec),
        ExperimentKind::SnrSweep => run_snr_sweep(spec),
        ExperimentKind::RangingCdf => run_ranging_cdf(spec),
    }
}

/// Seed for a task path under the master seed.
pub fn seed_for(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(master, |s, &p| sub_seed(s, p))
}

/// Residual per-window CFO search bound, cycles/window.
pub(crate) const NU_MAX: f64 = 0.05;

pub(crate) fn music_config(opts: &Options) -> MusicConfig {
    MusicConfig { grid: opts.music_grid, rel_threshold: 0.1, model_order: opts.music_order }
}

pub(crate) fn ranging_base(spec: &ExperimentSpec, d0: f64) -> RangingConfig {
    RangingConfig { a_min: spec.options.a_min, ..RangingConfig::new(spec.ofdm.nprime, d0) }
}

/// Zero-delay calibration with the experiment's front end.
pub(crate) fn experiment_calibration(spec: &ExperimentSpec, template: &LinkScenario, seed: u64) -> Result<Calibration> {
    let base = ranging_base(spec, 0.0);
    Ok(calibrate(template, spec.options.calib_runs, seed, &base, &music_config(&spec.options))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Method {
    IrFirst,
    Music,
}

impl Method {
    pub(crate) fn name(self) -> &'static str {
        match self {
            Method::IrFirst => "ir_first",
            Method::Music => "music",
        }
    }
}

#[allow(clippy::too_many_arguments)]
/// Signed combined-band range error of one method, or `None` when the
/// estimator found no peak.
pub(crate) fn range_error(
    link: &LinkScenario,
    captures: &backsim_core::waveform::PerBand<backsim_core::signalcore::ComplexVec>,
    symbol: &backsim_core::waveform::OfdmSymbol,
    methods: &[Method],
    spec: &ExperimentSpec,
    cal: &Calibration,
    d0: f64,
    d12: f64,
) -> Result<Vec<Option<f64>>> {
    let ofdm = &link.ofdm;
    let est = estimate_link_channels(captures, symbol, ofdm.n, None, NU_MAX)?;
    let base = ranging_base(spec, d0);
    let music = music_config(&spec.options);
    let mut out = Vec::with_capacity(methods.len());
    for &m in methods {
        let cfg = cal.apply(&base, m == Method::Music);
        let mut d = [0.0; 2];
        let mut ok = true;
        for (i, band) in Band::SIDE.into_iter().enumerate() {
            let r = match m {
                Method::IrFirst => {
                    let c0 = oversampled_cir(Band::Center, &est.h_hat.center, ofdm.nprime, ofdm.delta_f)?;
                    let cb = oversampled_cir(band, est.h_hat.get(band), ofdm.nprime, ofdm.delta_f)?;
                    ir_first_range(&c0, &cb, &cfg)
                }
                Method::Music => music_range(&est.h_hat.center, est.h_hat.get(band), band, &music, &cfg, ofdm),
            };
            match r {
                Ok(r) => d[i] = r.d_hat,
                Err(backsim_core::Error::NotFound(_)) | Err(backsim_core::Error::EstimationFailed(_)) => ok = false,
                Err(e) => return Err(e.into()),
            }
        }
        out.push(if ok {
            // combine on the wrapped circle around the lower-band estimate
            let dm = ofdm.d_max();
            let up = d[0] + wrapped_error(d[1], d[0], dm);
            let c = combine_ranges(d[0], up, base.w_minus, base.w_plus)?;
            Some(wrapped_error(c, d12, dm))
        } else {
            None
        });
    }
    Ok(out)
}

/// Noisy copy of `clean` at side-band SNR `snr_db`, referenced to the
/// LoS-only power of `link`; `None` keeps it clean.
pub(crate) fn noisy(
    link: &LinkScenario,
    clean: &backsim_core::waveform::PerBand<backsim_core::signalcore::ComplexVec>,
    snr_db: Option<f64>,
    offset_db: f64,
    seed: u64,
) -> Result<backsim_core::waveform::PerBand<backsim_core::signalcore::ComplexVec>> {
    let Some(s) = snr_db else { return Ok(clean.clone()) };
    let frac = los_power_fraction(link)?;
    let var = noise_for_snr(clean, s, offset_db);
    let var = backsim_core::waveform::PerBand::from_fn(|b| var.get(b) * frac.get(b));
    Ok(add_noise(clean, &var, seed)?)
}

/// Ranging rows for one capture: one `range_error_m` row per method, plus
/// a `failure` row (1 when no peak was found; the error then falls back to
/// `d̂ = d₀`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn ranging_rows(
    errors: &[Option<f64>],
    methods: &[Method],
    template: &RunRow,
    d0: f64,
    d12: f64,
    d_max: f64,
) -> Vec<RunRow> {
    let mut rows = Vec::new();
    for (e, m) in errors.iter().zip(methods) {
        let value = e.unwrap_or_else(|| wrapped_error(d0, d12, d_max));
        rows.push(RunRow { method: m.name().into(), metric: "range_error_m".into(), value, ..template.clone() });
        rows.push(RunRow {
            method: m.name().into(),
            metric: "failure".into(),
            value: if e.is_some() { 0.0 } else { 1.0 },
            ..template.clone()
        });
    }
    rows
}

pub(crate) fn cw(windows: usize) -> TagSchedule {
    TagSchedule::Cw { windows }
}
