//! Pass/fail thresholds applied to experiment results.
//!
//! Monotonicity checks allow a slack of three Monte Carlo standard errors
//! of the difference between neighbouring points.

use backsim_core::channel::geometry_to_channels;
use backsim_core::crlb::{crlb_d0, crlb_d12, crlb_total, fisher_d0, fisher_d12, mu_d0, mu_d12, numerical_fisher_oracle, CrlbInputs};
use backsim_core::signalcore::rng_from_seed;
use backsim_core::waveform::{Band, OfdmConfig};
use rand::Rng;

use crate::metrics::bpsk_ber;
use crate::record::{median_error, Aggregate, CdfPoint, ResultRecord};
use crate::scenario::random_geometry;
use crate::spec::ExperimentKind;
use crate::Result;

pub const NMAE_PURE_H0: f64 = 1e-4;
pub const NMAE_PURE_H12: f64 = 1e-3;
pub const NMAE_HW_H0: f64 = 0.035;
pub const NMAE_HW_H12: f64 = 0.12;
pub const BER_MIN_BITS: f64 = 1e5;
pub const RIDGE_TOLERANCE: f64 = 0.2;
pub const CRLB_REL_TOL: f64 = 1e-6;
pub const CRLB_SPREAD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        Self { name: name.into(), pass, detail }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub fn all_pass(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.pass)
}

/// Checks that apply to `record`'s experiment.
pub fn evaluate(record: &ResultRecord) -> Result<Vec<CheckResult>> {
    Ok(match record.spec.kind {
        ExperimentKind::ValidateCir => check_validate(record),
        ExperimentKind::Resolvability => check_resolvability(record),
        ExperimentKind::SnrSweep => {
            let mut v = Vec::new();
            if !record.spec.options.ber_grid_db.is_empty() {
                v.push(check_ber(record));
            }
            v.push(check_bound_respected(record));
            v.extend(check_trends(record));
            v.push(check_crlb_oracle(&record.spec.ofdm, 100, record.spec.seed)?);
            v
        }
        ExperimentKind::RangingCdf => check_cdf(record),
    })
}

fn max_over(record: &ResultRecord, method: &str) -> Option<f64> {
    record.select("nmae", method).map(|a| a.value).reduce(f64::max)
}

/// Mean NMAE per scatterer count, worst count against each threshold.
pub fn check_validate(record: &ResultRecord) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut one = |name: &str, methods: &[&str], limit: f64| {
        let worst = methods.iter().filter_map(|m| max_over(record, m)).reduce(f64::max);
        if let Some(w) = worst {
            out.push(CheckResult::new(name, w <= limit, format!("worst mean NMAE {w:.3e} (limit {limit})")));
        }
    };
    one("nmae_pure_h0", &["pure_h0"], NMAE_PURE_H0);
    one("nmae_pure_h12", &["pure_h12-", "pure_h12+"], NMAE_PURE_H12);
    one("nmae_hw_h0", &["hw_h0"], NMAE_HW_H0);
    one("nmae_hw_h12", &["hw_h12-", "hw_h12+"], NMAE_HW_H12);
    out
}

/// Pooled BER within 3σ of `Q(√(2γ_b))`, σ from the binomial count.
pub fn check_ber(record: &ResultRecord) -> CheckResult {
    let mut ok = true;
    let mut parts = Vec::new();
    for a in record.select("ber", "mrc") {
        let p = bpsk_ber(10f64.powf(a.x / 10.0));
        let sigma = (p * (1.0 - p) / a.weight).sqrt();
        let good = (a.value - p).abs() <= 3.0 * sigma && a.weight >= BER_MIN_BITS;
        ok &= good;
        parts.push(format!("{}dB {:.3e}/{:.3e}({:+.1}σ)", a.x, a.value, p, (a.value - p) / sigma));
    }
    ok &= !parts.is_empty();
    CheckResult::new("ber_vs_theory", ok, parts.join(" "))
}

/// RMSE of `method` at `scatterers` and `x`.
fn rmse<'a>(record: &'a ResultRecord, method: &str, scatterers: usize, x: f64) -> Option<&'a Aggregate> {
    record.find("range_error_m", method, scatterers, x, 0.0)
}

pub fn check_floor(record: &ResultRecord, method: &str, scatterers: usize, limit: f64) -> CheckResult {
    let v = record.select("range_error_m", method).filter(|a| a.scatterers == scatterers).map(|a| a.value).reduce(f64::max);
    match v {
        Some(v) => CheckResult::new("ranging_floor", v <= limit, format!("{method} RMSE {v:.4} m (limit {limit:.4} m)")),
        None => CheckResult::new("ranging_floor", false, "no rows".into()),
    }
}

/// (a) per NLoS link, the excess length with the largest power-averaged
/// RMSE lies within ±20% of `c/B`; (b) RMSE ≤ 2× floor wherever
/// `Δd ≥ 2c/B` and the NLoS is at or below −10 dB.
pub fn check_resolvability(record: &ResultRecord) -> Vec<CheckResult> {
    let ofdm = &record.spec.ofdm;
    let cb = ofdm.meters_per_sample();
    let floor = ofdm.granularity_floor();
    let mut ridge_ok = true;
    let mut ridge = Vec::new();
    let mut far_ok = true;
    let mut worst_far: f64 = 0.0;
    for (_, method) in crate::experiments::NLOS_LINKS {
        let aggs: Vec<&Aggregate> = record.select("range_error_m", method).collect();
        if aggs.is_empty() {
            ridge_ok = false;
            continue;
        }
        let mut xs: Vec<f64> = aggs.iter().map(|a| a.x).filter(|&x| x > 0.0).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        let mean_at = |x: f64| {
            let v: Vec<f64> = aggs.iter().filter(|a| a.x == x).map(|a| a.value).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let peak = xs.iter().map(|&x| (x, mean_at(x))).fold((f64::NAN, f64::NEG_INFINITY), |b, p| if p.1 > b.1 { p } else { b });
        ridge_ok &= (peak.0 - cb).abs() <= RIDGE_TOLERANCE * cb;
        ridge.push(format!("{method} peak at {:.2} m ({:.3} m)", peak.0, peak.1));
        for a in aggs.iter().filter(|a| a.x >= 2.0 * cb && a.y <= -10.0) {
            worst_far = worst_far.max(a.value);
            far_ok &= a.value <= 2.0 * floor;
        }
    }
    vec![
        CheckResult::new("resolvability_ridge", ridge_ok, format!("{}; c/B = {cb:.2} m", ridge.join(", "))),
        CheckResult::new(
            "resolvability_far_paths",
            far_ok,
            format!("worst RMSE {worst_far:.3} m for Δd ≥ 2c/B, NLoS ≤ −10 dB (limit {:.3} m)", 2.0 * floor),
        ),
    ]
}

fn r_crlb(record: &ResultRecord, scatterers: usize, x: f64) -> Option<f64> {
    record.find("r_crlb_total_m", "crlb", scatterers, x, 0.0).map(|a| a.value)
}

/// Estimator RMSE ≥ R-CRLB − 3σ_MC at every (method, count, SNR).
pub fn check_bound_respected(record: &ResultRecord) -> CheckResult {
    let mut ok = true;
    let mut n = 0;
    let mut worst = f64::INFINITY;
    for m in ["ir_first", "music"] {
        for a in record.select("range_error_m", m) {
            let Some(b) = r_crlb(record, a.scatterers, a.x) else { continue };
            n += 1;
            let margin = a.value - (b - 3.0 * a.std_err);
            worst = worst.min(margin);
            ok &= margin >= 0.0;
        }
    }
    ok &= n > 0;
    CheckResult::new("rmse_above_bound", ok, format!("{n} points, smallest margin {worst:.3e} m"))
}

fn coords(record: &ResultRecord) -> (Vec<f64>, Vec<usize>) {
    let mut snrs = record.spec.snr_points();
    snrs.sort_by(f64::total_cmp);
    let mut ls = record.spec.scatterer_counts.clone();
    ls.sort();
    (snrs, ls)
}

/// RMSE nonincreasing in SNR and nondecreasing in scatterer count for both
/// methods; R-CRLB spread across counts below 20% at every SNR.
pub fn check_trends(record: &ResultRecord) -> Vec<CheckResult> {
    let (snrs, ls) = coords(record);
    let mut out = Vec::new();
    for m in ["ir_first", "music"] {
        let mut snr_bad = Vec::new();
        let mut l_bad = Vec::new();
        let slack = |a: &Aggregate, b: &Aggregate| 3.0 * (a.std_err.powi(2) + b.std_err.powi(2)).sqrt();
        for &l in &ls {
            for w in snrs.windows(2) {
                if let (Some(a), Some(b)) = (rmse(record, m, l, w[0]), rmse(record, m, l, w[1])) {
                    if b.value > a.value + slack(a, b) {
                        snr_bad.push(format!("L={} {}→{}dB {:.3}→{:.3}", l + 1, w[0], w[1], a.value, b.value));
                    }
                }
            }
        }
        for &x in &snrs {
            for w in ls.windows(2) {
                if let (Some(a), Some(b)) = (rmse(record, m, w[0], x), rmse(record, m, w[1], x)) {
                    if b.value < a.value - slack(a, b) {
                        l_bad.push(format!("{x}dB L={}→{} {:.3}→{:.3}", w[0] + 1, w[1] + 1, a.value, b.value));
                    }
                }
            }
        }
        out.push(CheckResult::new(&format!("{m}_nonincreasing_in_snr"), snr_bad.is_empty(), detail(&snr_bad)));
        out.push(CheckResult::new(&format!("{m}_nondecreasing_in_l"), l_bad.is_empty(), detail(&l_bad)));
    }
    let mut spread_bad = Vec::new();
    let mut worst: f64 = 0.0;
    for &x in &snrs {
        let v: Vec<f64> = ls.iter().filter_map(|&l| r_crlb(record, l, x)).collect();
        if v.len() < 2 {
            continue;
        }
        let (lo, hi) = v.iter().fold((f64::INFINITY, 0f64), |(a, b), &y| (a.min(y), b.max(y)));
        let s = hi / lo - 1.0;
        worst = worst.max(s);
        if !(s < CRLB_SPREAD) {
            spread_bad.push(format!("{x}dB {:.1}%", 100.0 * s));
        }
    }
    out.push(CheckResult::new(
        "r_crlb_flat_in_l",
        spread_bad.is_empty(),
        if spread_bad.is_empty() { format!("max spread {:.1}%", 100.0 * worst) } else { spread_bad.join(", ") },
    ));
    out
}

fn detail(bad: &[String]) -> String {
    if bad.is_empty() {
        "ok".into()
    } else {
        bad.join(", ")
    }
}

/// Closed-form Fisher information against the finite-difference oracle on
/// `configs` random multipath geometries and noise levels; the total must
/// equal the sum of its parts exactly.
pub fn check_crlb_oracle(ofdm: &OfdmConfig, configs: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    let mut sum_exact = true;
    let b = ofdm.bandwidth();
    for _ in 0..configs {
        let count = rng.random_range(0..=8);
        let g = random_geometry(&mut rng, count, 6.0);
        let (h0, h1, h2) = geometry_to_channels(&g, ofdm, rng.random())?;
        let beta = CrlbInputs::geometric_beta(&h1, &h2);
        let inp = CrlbInputs {
            h0,
            h1,
            h2,
            sigma0_sq: 10f64.powf(rng.random_range(-4.0..0.0)),
            sigma12_sq: 10f64.powf(rng.random_range(-6.0..-2.0)),
            config: ofdm.clone(),
            beta,
        };
        let tau0 = inp.h0.los().delay_samples;
        let tau12 = inp.h1.los().delay_samples + inp.h2.los().delay_samples;
        let o0 = numerical_fisher_oracle(|t| mu_d0(&inp, t), tau0, inp.sigma0_sq, 1e-4, b)?;
        worst = worst.max((fisher_d0(&inp)? / o0 - 1.0).abs());
        for band in Band::SIDE {
            let o12 = numerical_fisher_oracle(|t| mu_d12(&inp, band, t), tau12, inp.sigma12_sq, 1e-4, b)?;
            worst = worst.max((fisher_d12(&inp, band)? / o12 - 1.0).abs());
            sum_exact &= crlb_total(&inp, band)? == crlb_d0(&inp)? + crlb_d12(&inp, band)?;
        }
    }
    Ok(CheckResult::new(
        "crlb_matches_oracle",
        worst <= CRLB_REL_TOL && sum_exact,
        format!("{configs} configs, worst relative error {worst:.2e}, total = sum: {sum_exact}"),
    ))
}

fn quantile(cdf: &[CdfPoint], method: &str, l: usize, q: f64) -> Option<f64> {
    cdf.iter().filter(|p| p.method == method && p.l == l).find(|p| p.cdf >= q).map(|p| p.error_m)
}

/// Standard error of the median from the distribution-free 95% interval
/// `0.5 ± 0.98/√n` in quantile space, `n` independent channels.
fn median_se(cdf: &[CdfPoint], method: &str, l: usize, n: usize) -> Option<f64> {
    let h = 0.98 / (n.max(1) as f64).sqrt();
    let hi = quantile(cdf, method, l, (0.5 + h).min(1.0))?;
    let lo = quantile(cdf, method, l, (0.5 - h).max(0.0))?;
    Some((hi - lo) / (2.0 * 1.96))
}

/// CDF sanity, L=1 median at or below the floor, medians nondecreasing in
/// L up to one bin or three standard errors of the difference (repeats
/// share a channel, so the scenarios count as the independent draws).
pub fn check_cdf(record: &ResultRecord) -> Vec<CheckResult> {
    let ofdm = &record.spec.ofdm;
    let floor = ofdm.granularity_floor();
    let mut out = Vec::new();
    let mut ls: Vec<usize> = record.cdf.iter().map(|p| p.l).collect();
    ls.sort();
    ls.dedup();
    let mut shape_ok = !record.cdf.is_empty();
    for m in ["ir_first", "music"] {
        for &l in &ls {
            let pts: Vec<_> = record.cdf.iter().filter(|p| p.method == m && p.l == l).collect();
            shape_ok &= pts.windows(2).all(|w| w[0].cdf <= w[1].cdf) && pts.last().is_some_and(|p| p.cdf == 1.0);
        }
    }
    out.push(CheckResult::new("cdf_shape", shape_ok, "monotone, ends at 1".into()));
    for m in ["ir_first", "music"] {
        if ls.contains(&1) {
            let med = median_error(&record.cdf, m, 1).unwrap_or(f64::INFINITY);
            out.push(CheckResult::new(&format!("{m}_single_path_median"), med <= floor, format!("{med:.4} m (limit {floor:.4} m)")));
        }
        let n = record.spec.scenarios;
        let meds: Vec<(usize, f64, f64)> = ls
            .iter()
            .filter_map(|&l| Some((l, median_error(&record.cdf, m, l)?, median_se(&record.cdf, m, l, n)?)))
            .collect();
        let bad: Vec<String> = meds
            .windows(2)
            .filter(|w| w[1].1 < w[0].1 - ofdm.bin_m().max(3.0 * w[0].2.hypot(w[1].2)))
            .map(|w| format!("L={}→{} {:.3}→{:.3}", w[0].0, w[1].0, w[0].1, w[1].1))
            .collect();
        out.push(CheckResult::new(&format!("{m}_median_nondecreasing_in_l"), bad.is_empty(), detail(&bad)));
    }
    out
}
