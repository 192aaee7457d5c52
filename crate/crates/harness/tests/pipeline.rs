use std::process::Command;

use backsim_harness::emit::{config_hash, emit_results, read_aggregates, read_manifest, read_rows, ROWS_FILE};
use backsim_harness::experiments::run;
use backsim_harness::record::aggregate;
use backsim_harness::spec::ExperimentSpec;

fn small_sweep() -> ExperimentSpec {
    ExperimentSpec::from_json(
        r#"{"kind":"snr_sweep","scenarios":2,"repeats":2,"scatterer_counts":[0,3],
            "snr_grid_db":[0,20],"attenuation_grid_db":[],"seed":11,
            "options":{"ber_grid_db":[],"crlb_trials":4,"calib_runs":2}}"#,
    )
    .unwrap()
}

#[test]
fn files_round_trip() {
    let spec = small_sweep();
    let record = run(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_results(&record, dir.path()).unwrap();
    assert!(files.last().unwrap().ends_with("manifest.json"));

    let rows = read_rows(&dir.path().join(ROWS_FILE)).unwrap();
    assert_eq!(rows, record.rows);

    let agg = read_aggregates(dir.path()).unwrap();
    let again = aggregate(&rows);
    assert_eq!(agg.aggregates.len(), again.len());
    for (a, b) in agg.aggregates.iter().zip(&again) {
        assert_eq!((&a.metric, &a.method, a.scatterers, a.x), (&b.metric, &b.method, b.scatterers, b.x));
        assert!((a.value - b.value).abs() <= 1e-12 * b.value.abs().max(1.0));
    }
    assert_eq!(agg.curves, record.curves);

    let m = read_manifest(dir.path()).unwrap();
    assert_eq!(m.seeds, record.seeds);
    assert_eq!(m.spec, spec);
    assert_eq!(m.config_sha256, config_hash(&spec).unwrap());
    assert!(m.files.iter().any(|f| f == "crlb.csv"));
}

#[test]
fn seed_changes_the_rows() {
    let a = small_sweep();
    let b = ExperimentSpec { seed: 12, ..a.clone() };
    assert_ne!(run(&a).unwrap().rows, run(&b).unwrap().rows);
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_backsim")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cdf.json");
    let out = dir.path().join("out");
    let (cfg_s, out_s) = (cfg.to_str().unwrap(), out.to_str().unwrap());

    std::fs::write(&cfg, r#"{"kind":"ranging_cdf","scenarios":3,"repeats":1,"scatterer_counts":[0],"options":{"noiseless":true,"calib_runs":2}}"#)
        .unwrap();
    let ok = cli(&["ranging-cdf", "--config", cfg_s, "--out", out_s, "--check", "--workers", "2"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS ir_first_single_path_median"));
    assert!(out.join("cdf.csv").exists());

    // far below the noise, the single-path median misses the floor
    std::fs::write(&cfg, r#"{"kind":"ranging_cdf","scenarios":3,"repeats":1,"scatterer_counts":[0],"options":{"cdf_snr_db":-25,"calib_runs":2}}"#)
        .unwrap();
    let fail = cli(&["ranging-cdf", "--config", cfg_s, "--out", out_s, "--check"]);
    assert_eq!(fail.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&fail.stdout).contains("FAIL"));

    let wrong = cli(&["validate-cir", "--config", cfg_s, "--out", out_s]);
    assert_eq!(wrong.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&wrong.stderr).contains("ranging_cdf"));
}
