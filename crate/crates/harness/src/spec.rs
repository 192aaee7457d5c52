//! Experiment descriptions read from JSON.

use std::path::Path;

use backsim_core::waveform::OfdmConfig;
use serde::{Deserialize, Serialize};

use crate::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    ValidateCir,
    Resolvability,
    SnrSweep,
    RangingCdf,
}

impl ExperimentKind {
    pub fn id(self) -> &'static str {
        match self {
            Self::ValidateCir => "validate_cir",
            Self::Resolvability => "resolvability",
            Self::SnrSweep => "snr_sweep",
            Self::RangingCdf => "ranging_cdf",
        }
    }
}

/// Injected impairments for the hardware-grade CIR validation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HardwareImpairments {
    pub adc_bits: u32,
    /// Error added to the receiver CFO estimate, cycles/sample.
    pub residual_cfo: f64,
    /// Side-band SNR, dB.
    pub band_snr_db: f64,
    pub windows: usize,
}

impl Default for HardwareImpairments {
    fn default() -> Self {
        Self { adc_bits: 12, residual_cfo: 1e-4, band_snr_db: 10.0, windows: 64 }
    }
}

/// Knobs shared by the experiments. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Options {
    /// CW windows per ranging capture.
    pub windows: usize,
    /// Windows for the noiseless CIR comparison.
    pub validate_windows: usize,
    /// Also run the impaired CIR comparison.
    pub hardware: Option<HardwareImpairments>,
    /// Center-band SNR above the side-band SNR, dB.
    pub center_snr_offset_db: f64,
    /// Receiver CFO range, Hz (uniform ±).
    pub rx_cfo_hz: f64,
    /// Tag clock offset range, Hz (uniform ±).
    pub tag_cfo_hz: f64,
    /// Group delays (center, lower, upper), 1/B units.
    pub group_delays: [f64; 3],
    pub calib_runs: usize,
    pub music_grid: usize,
    /// MUSIC model order; `None` selects by MDL.
    pub music_order: Option<usize>,
    pub a_min: f64,
    /// Scatterer box half-width around the centroid, m.
    pub scatter_extent_m: f64,
    /// Noiseless captures regardless of the SNR grid.
    pub noiseless: bool,
    /// Resolvability grids.
    pub delta_d_grid_m: Vec<f64>,
    pub rel_power_grid_db: Vec<f64>,
    pub resolvability_snr_db: f64,
    /// Per-bit SNR points for the BER sweep; empty skips BER.
    pub ber_grid_db: Vec<f64>,
    pub ber_min_bits: usize,
    pub ber_payload_bits: usize,
    pub ber_packets_per_record: usize,
    pub ber_training_windows: usize,
    pub k_mf: usize,
    /// Stochastic CRLB trials per (SNR, L).
    pub crlb_trials: usize,
    /// SNR for the ranging CDF, dB.
    pub cdf_snr_db: f64,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            windows: 32,
            validate_windows: 8,
            hardware: Some(HardwareImpairments::default()),
            center_snr_offset_db: 20.0,
            rx_cfo_hz: 5000.0,
            tag_cfo_hz: 50.0,
            group_delays: [0.0, 0.0, 0.0],
            calib_runs: 8,
            music_grid: 4096,
            music_order: None,
            a_min: 0.3,
            scatter_extent_m: 6.0,
            noiseless: false,
            delta_d_grid_m: (0..=60).map(|k| 0.5 * k as f64).collect(),
            rel_power_grid_db: (0..=12).map(|k| -30.0 + 2.5 * k as f64).collect(),
            resolvability_snr_db: 40.0,
            ber_grid_db: (0..=5).map(|k| 2.0 * k as f64).collect(),
            ber_min_bits: 100_000,
            ber_payload_bits: 240,
            ber_packets_per_record: 32,
            ber_training_windows: 65_536,
            k_mf: 6,
            crlb_trials: 200,
            cdf_snr_db: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub scenarios: usize,
    pub repeats: usize,
    /// Side-band SNR grid, dB.
    #[serde(default)]
    pub snr_grid_db: Vec<f64>,
    /// Attenuation grid, dB; mapped to SNR as `48 − attenuation`.
    #[serde(default)]
    pub attenuation_grid_db: Vec<f64>,
    pub scatterer_counts: Vec<usize>,
    pub seed: u64,
    #[serde(default)]
    pub ofdm: OfdmConfig,
    #[serde(default)]
    pub options: Options,
}

/// Attenuation that maps to 0 dB SNR.
pub const ATTENUATION_AT_0DB: f64 = 48.0;

impl ExperimentSpec {
    /// Default spec per experiment.
    pub fn default_for(kind: ExperimentKind) -> Self {
        let base = Self {
            kind,
            scenarios: 20,
            repeats: 5,
            snr_grid_db: vec![],
            attenuation_grid_db: vec![],
            scatterer_counts: vec![0, 4, 8],
            seed: 1,
            ofdm: OfdmConfig::default(),
            options: Options::default(),
        };
        match kind {
            ExperimentKind::ValidateCir => {
                Self { scenarios: 200, repeats: 1, scatterer_counts: vec![0, 2, 4, 6, 8], ..base }
            }
            ExperimentKind::Resolvability => Self { scenarios: 1, repeats: 20, scatterer_counts: vec![1], ..base },
            ExperimentKind::SnrSweep => {
                Self { attenuation_grid_db: (0..=9).map(|k| 12.0 + 4.0 * k as f64).collect(), ..base }
            }
            ExperimentKind::RangingCdf => Self { scatterer_counts: vec![0, 2, 4, 6, 8], ..base },
        }
    }

    /// Parse a spec; fields left out take the defaults of its `kind`
    /// (`ofdm` and `options` merge field by field).
    pub fn from_json(text: &str) -> Result<Self> {
        let given: serde_json::Value = serde_json::from_str(text)?;
        let kind: ExperimentKind = serde_json::from_value(
            given.get("kind").cloned().ok_or_else(|| HarnessError::Spec("missing field `kind`".into()))?,
        )?;
        let mut merged = serde_json::to_value(Self::default_for(kind))?;
        let (Some(base), Some(over)) = (merged.as_object_mut(), given.as_object()) else {
            return Err(HarnessError::Spec("spec must be a JSON object".into()));
        };
        for (k, v) in over {
            match (base.get_mut(k), v) {
                (Some(serde_json::Value::Object(b)), serde_json::Value::Object(o)) if k == "ofdm" || k == "options" => {
                    b.extend(o.clone());
                }
                _ => {
                    base.insert(k.clone(), v.clone());
                }
            }
        }
        let spec: Self = serde_json::from_value(merged)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Side-band SNR points, attenuation grid taking precedence.
    pub fn snr_points(&self) -> Vec<f64> {
        if !self.attenuation_grid_db.is_empty() {
            self.attenuation_grid_db.iter().map(|a| ATTENUATION_AT_0DB - a).collect()
        } else {
            self.snr_grid_db.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Spec(m.to_string()));
        if self.scenarios == 0 || self.repeats == 0 {
            return bad("scenarios and repeats must be >= 1");
        }
        if self.scatterer_counts.is_empty() {
            return bad("scatterer_counts must be non-empty");
        }
        self.ofdm.validate()?;
        if self.ofdm.oversample != 1 {
            return bad("experiments run at oversample = 1");
        }
        let o = &self.options;
        if o.windows < 2 || o.validate_windows < 2 || o.calib_runs == 0 || o.music_grid == 0 || o.k_mf == 0 {
            return bad("window counts, calibration runs, MUSIC grid and k_mf must be positive");
        }
        match self.kind {
            ExperimentKind::SnrSweep if self.snr_points().is_empty() => bad("snr_sweep needs an SNR or attenuation grid"),
            ExperimentKind::Resolvability if o.delta_d_grid_m.is_empty() || o.rel_power_grid_db.is_empty() => {
                bad("resolvability needs non-empty length and power grids")
            }
            _ => Ok(()),
        }
    }
}
