//! Debug exports: raw I/Q captures, CIR tables and bound curves.

use std::fs;
use std::path::Path;

use backsim_core::ranging::CirEstimate;
use backsim_core::Complex64;
use serde::{Deserialize, Serialize};

use crate::record::Aggregate;
use crate::{HarnessError, Result};

/// Sidecar of an `.iq` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqMeta {
    /// Sample rate, Hz.
    pub rate: f64,
    pub band: String,
    pub seed: u64,
    pub samples: usize,
    /// Always `"f64le_interleaved"`.
    pub format: String,
}

/// Write `samples` as little-endian interleaved f64 I/Q to `path` and the
/// metadata to `path` with a `.json` extension.
pub fn write_iq(path: &Path, samples: &[Complex64], rate: f64, band: &str, seed: u64) -> Result<()> {
    let mut buf = Vec::with_capacity(samples.len() * 16);
    for s in samples {
        buf.extend_from_slice(&s.re.to_le_bytes());
        buf.extend_from_slice(&s.im.to_le_bytes());
    }
    fs::write(path, buf)?;
    let meta = IqMeta { rate, band: band.into(), seed, samples: samples.len(), format: "f64le_interleaved".into() };
    fs::write(path.with_extension("json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

pub fn read_iq(path: &Path) -> Result<(Vec<Complex64>, IqMeta)> {
    let meta: IqMeta = serde_json::from_str(&fs::read_to_string(path.with_extension("json"))?)?;
    let bytes = fs::read(path)?;
    if bytes.len() != meta.samples * 16 {
        return Err(HarnessError::Invalid(format!("{} holds {} bytes, sidecar says {} samples", path.display(), bytes.len(), meta.samples)));
    }
    let f = |c: &[u8]| f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
    let samples = bytes.chunks_exact(16).map(|c| Complex64::new(f(&c[..8]), f(&c[8..]))).collect();
    Ok((samples, meta))
}

#[derive(Serialize)]
struct CirRow {
    bin: usize,
    real: f64,
    imag: f64,
    #[serde(rename = "magnitude_dB")]
    magnitude_db: f64,
}

pub fn write_cir_csv(path: &Path, cir: &CirEstimate) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (bin, t) in cir.taps.iter().enumerate() {
        w.serialize(CirRow { bin, real: t.re, imag: t.im, magnitude_db: 20.0 * t.norm().log10() })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct CrlbRow {
    #[serde(rename = "snr_dB")]
    pub snr_db: f64,
    pub scatterers: usize,
    pub crlb_d0: f64,
    pub crlb_d12: f64,
    pub r_crlb_total_m: f64,
}

/// Pivot the `crlb` curves into one row per (scatterers, SNR).
pub fn crlb_rows(curves: &[Aggregate]) -> Vec<CrlbRow> {
    let pick = |m: &str, l: usize, x: f64| {
        curves.iter().find(|a| a.method == "crlb" && a.metric == m && a.scatterers == l && a.x == x).map_or(f64::NAN, |a| a.value)
    };
    curves
        .iter()
        .filter(|a| a.method == "crlb" && a.metric == "r_crlb_total_m")
        .map(|a| CrlbRow {
            snr_db: a.x,
            scatterers: a.scatterers,
            crlb_d0: pick("crlb_d0", a.scatterers, a.x),
            crlb_d12: pick("crlb_d12", a.scatterers, a.x),
            r_crlb_total_m: a.value,
        })
        .collect()
}

pub fn write_crlb_csv(path: &Path, curves: &[Aggregate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in crlb_rows(curves) {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use backsim_core::waveform::Band;

    #[test]
    fn iq_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lower.iq");
        let x: Vec<Complex64> = (0..37).map(|k| Complex64::new((k as f64).sin() * 1e-7, -(k as f64) / 3.0)).collect();
        write_iq(&p, &x, 22.08e6, "lower", 5).unwrap();
        let (y, meta) = read_iq(&p).unwrap();
        assert_eq!(x, y);
        assert_eq!(meta.band, "lower");
        assert_eq!(meta.samples, 37);
        fs::write(&p, [0u8; 8]).unwrap();
        assert!(read_iq(&p).is_err());
    }

    #[test]
    fn cir_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cir.csv");
        let cir = CirEstimate { band: Band::Center, taps: vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.1)], grid_m: 1.0, n: 2 };
        write_cir_csv(&p, &cir).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("bin,real,imag,magnitude_dB"));
        assert_eq!(lines.next(), Some("0,1.0,0.0,0.0"));
        assert!(lines.next().unwrap().ends_with(",-20.0"));
    }
}
