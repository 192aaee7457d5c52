use std::f64::consts::PI;

use backsim_core::channel::{geometry_to_channels, Geometry, Link, MultipathChannel};
use backsim_core::link::{estimate_link_channels, LinkScenario, TagSchedule};
use backsim_core::ranging::{analytic_cir, ir_first_range, oversampled_cir, wrapped_error, RangingConfig};
use backsim_core::receiver::FrontEndConfig;
use backsim_core::signalcore::rng_from_seed;
use backsim_core::tag::{TagConfig, TagMode};
use backsim_core::waveform::{Band, OfdmConfig, PerBand, SymbolKind};
use backsim_core::Complex64;
use rand::Rng;

fn random_scenario(seed: u64, scatterers: usize) -> (LinkScenario, Geometry) {
    let ofdm = OfdmConfig::default();
    let mut rng = rng_from_seed(seed);
    let tag = [rng.random_range(-9.0..9.0), rng.random_range(-8.0..8.0)];
    let centroid = [tag[0] / 3.0, tag[1] / 3.0];
    let scat = (0..scatterers)
        .map(|_| [centroid[0] + rng.random_range(-6.0..6.0), centroid[1] + rng.random_range(-6.0..6.0)])
        .collect();
    let g = Geometry { tx: [-8.0, 0.0], rx: [8.0, 0.0], tag, scatterers: scat };
    let (h0, h1, h2) = geometry_to_channels(&g, &ofdm, seed ^ 0xABCD).unwrap();
    let mut fe = FrontEndConfig::ideal(ofdm.n);
    fe.phases = PerBand::from_fn(|_| rng.random_range(0.0..2.0 * PI));
    fe.f_off_rx = rng.random_range(-5000.0..5000.0);
    let sc = LinkScenario {
        h0,
        h1,
        h2,
        tag: TagConfig::for_ofdm(&ofdm, TagMode::Cw),
        front_end: fe,
        illumination: SymbolKind::ZadoffChu { root: 1 },
        phi_tx: rng.random_range(0.0..2.0 * PI),
        timing_offset: rng.random_range(0.0..ofdm.n as f64),
        ofdm,
    };
    (sc, g)
}

fn max_rel_err(a: &[Complex64], b: &[Complex64]) -> f64 {
    let m = b.iter().map(|v| v.norm()).fold(0.0, f64::max);
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max) / m
}

#[test]
fn analytic_cir_equals_simulated_pipeline() {
    for seed in 0..12u64 {
        let (sc, _) = random_scenario(seed, (seed % 5) as usize * 2);
        let (clean, _, symbol) = sc.simulate_clean(&TagSchedule::Cw { windows: 6 }).unwrap();
        let est = estimate_link_channels(&clean, &symbol, sc.ofdm.n, None, 0.01).unwrap();
        let truth = sc.truth_sync(est.sync.k0);
        let ana = analytic_cir(&sc.h0, &sc.h1, &sc.h2, &truth, &sc.front_end, sc.phi_tx, &sc.ofdm).unwrap();
        for band in Band::ALL {
            let meas = oversampled_cir(band, est.h_hat.get(band), sc.ofdm.nprime, sc.ofdm.delta_f).unwrap();
            let e = max_rel_err(&meas.taps, &ana.get(band).taps);
            assert!(e < 1e-9, "seed {seed} {band:?}: {e}");
        }
    }
}

#[test]
fn analytic_cir_with_receive_filter_and_group_delay() {
    let (mut sc, _) = random_scenario(77, 4);
    let n = sc.ofdm.n;
    sc.front_end.gains = PerBand::from_fn(|b| {
        (0..n).map(|i| Complex64::from_polar(1.0 + 0.01 * i as f64 * (1.0 + b.sign()), 0.02 * i as f64)).collect()
    });
    sc.front_end.group_delays = PerBand::new(0.2, 0.45, -0.1);
    let (clean, _, symbol) = sc.simulate_clean(&TagSchedule::Cw { windows: 6 }).unwrap();
    let est = estimate_link_channels(&clean, &symbol, n, None, 0.01).unwrap();
    let truth = sc.truth_sync(est.sync.k0);
    let ana = analytic_cir(&sc.h0, &sc.h1, &sc.h2, &truth, &sc.front_end, sc.phi_tx, &sc.ofdm).unwrap();
    for band in Band::ALL {
        let meas = oversampled_cir(band, est.h_hat.get(band), sc.ofdm.nprime, sc.ofdm.delta_f).unwrap();
        assert!(max_rel_err(&meas.taps, &ana.get(band).taps) < 1e-9);
    }
}

#[test]
fn single_path_analytic_peaks() {
    let ofdm = OfdmConfig::default();
    let b = ofdm.bandwidth();
    let one = |link, t: f64| MultipathChannel::from_taps(link, &[(t, Complex64::new(1.0, 0.0))], b).unwrap();
    let (t0, t1, t2) = (2.0, 1.5, 3.25);
    let sync = backsim_core::receiver::SyncState::default();
    let fe = FrontEndConfig::ideal(ofdm.n);
    let ana = analytic_cir(&one(Link::TxRx, t0), &one(Link::TxTag, t1), &one(Link::TagRx, t2), &sync, &fe, 0.0, &ofdm).unwrap();
    let peak = |v: &[Complex64]| (0..v.len()).max_by(|&a, &c| v[a].norm().total_cmp(&v[c].norm())).unwrap();
    let k = ofdm.nprime as f64 / ofdm.n as f64;
    assert_eq!(peak(&ana.center.taps), (t0 * k).round() as usize);
    assert_eq!(peak(&ana.upper.taps), ((t1 + t2) * k).round() as usize);
}

#[test]
fn noiseless_single_path_range_within_floor() {
    let ofdm = OfdmConfig::default();
    let floor = ofdm.granularity_floor();
    for seed in 100..120u64 {
        let (sc, g) = random_scenario(seed, 0);
        let (clean, _, symbol) = sc.simulate_clean(&TagSchedule::Cw { windows: 8 }).unwrap();
        let est = estimate_link_channels(&clean, &symbol, ofdm.n, None, 0.01).unwrap();
        let c0 = oversampled_cir(Band::Center, &est.h_hat.center, ofdm.nprime, ofdm.delta_f).unwrap();
        let cu = oversampled_cir(Band::Upper, &est.h_hat.upper, ofdm.nprime, ofdm.delta_f).unwrap();
        let r = ir_first_range(&c0, &cu, &RangingConfig::new(ofdm.nprime, g.d0())).unwrap();
        let e = wrapped_error(r.d_hat, g.d1() + g.d2(), ofdm.d_max());
        assert!(e.abs() <= floor, "seed {seed}: error {e}");
        assert!((0.0..ofdm.d_max()).contains(&r.d_hat));
    }
}
