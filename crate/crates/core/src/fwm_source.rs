//! Twin-beam source model and named experimental configurations.
//!
//! The four-wave-mixing cell is treated as a phase-insensitive amplifier of
//! intensity gain `G`. In normalized units its low-frequency output is
//! `S = 2G − 1` on each beam and `S₋ = 1/(2G − 1)` for the intensity
//! difference; both relax to shot noise outside a Lorentzian squeezing band.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise_model::{check_unit_interval, from_db, NormalizedSpectrum, TwinBeamNoise};

/// Vacuum speed of light (m/s), used to convert delay-line lengths.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Default Lorentzian half-width of the squeezing spectrum.
pub const DEFAULT_SQUEEZING_BANDWIDTH: f64 = 10e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FwmParams {
    /// Intensity gain `G >= 1`.
    pub gain: f64,
    /// Half-width at half-maximum of the squeezing spectrum (Hz).
    pub squeezing_bandwidth: f64,
    /// Uncorrelated technical noise added to each beam (shot-noise units).
    pub excess_noise: f64,
    /// Transmission of each beam between the cell and the feedforward stage.
    pub source_transmission: f64,
}

impl FwmParams {
    pub fn lossless(gain: f64) -> Self {
        Self {
            gain,
            squeezing_bandwidth: DEFAULT_SQUEEZING_BANDWIDTH,
            excess_noise: 0.0,
            source_transmission: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gain >= 1.0) || !self.gain.is_finite() {
            return Err(Error::Domain(format!(
                "FWM gain must be >= 1, got {}",
                self.gain
            )));
        }
        if !(self.squeezing_bandwidth > 0.0) || !self.squeezing_bandwidth.is_finite() {
            return Err(Error::Domain(format!(
                "squeezing bandwidth must be > 0, got {}",
                self.squeezing_bandwidth
            )));
        }
        if !(self.excess_noise >= 0.0) || !self.excess_noise.is_finite() {
            return Err(Error::Domain(format!(
                "excess noise must be >= 0, got {}",
                self.excess_noise
            )));
        }
        check_unit_interval("source_transmission", self.source_transmission)
    }

    fn lorentzian(&self, frequency: f64) -> f64 {
        let g2 = self.squeezing_bandwidth * self.squeezing_bandwidth;
        g2 / (g2 + frequency * frequency)
    }

    /// `(S, S₋)` at one frequency.
    pub fn spectra_at(&self, frequency: f64) -> (f64, f64) {
        let amp = 2.0 * self.gain - 1.0;
        let l = self.lorentzian(frequency);
        let s = 1.0 + (amp - 1.0) * l + self.excess_noise;
        let d = 1.0 - (1.0 - 1.0 / amp) * l + self.excess_noise;
        let eta = self.source_transmission;
        (eta * s + (1.0 - eta), eta * d + (1.0 - eta))
    }

    /// Finds the gain for which the intensity-difference noise equals
    /// `s_minus` at `frequency`, keeping the other parameters.
    pub fn calibrated(self, s_minus: f64, frequency: f64) -> Result<Self> {
        let eta = self.source_transmission;
        // Undo the loss and the excess noise, then the Lorentzian weight.
        let intrinsic = (s_minus - (1.0 - eta)) / eta - self.excess_noise;
        let l = self.lorentzian(frequency);
        let inv_amp = 1.0 - (1.0 - intrinsic) / l;
        if !(inv_amp > 0.0) || inv_amp > 1.0 {
            return Err(Error::Domain(format!(
                "intensity-difference noise {s_minus} is not reachable at {frequency} Hz \
                 with the given loss, excess noise and bandwidth"
            )));
        }
        let gain = 0.5 * (1.0 / inv_amp + 1.0);
        let out = Self { gain, ..self };
        out.validate()?;
        Ok(out)
    }
}

/// Twin-beam spectra of the amplifier model on `grid`.
pub fn ideal_pia_spectra(params: &FwmParams, grid: &[f64]) -> Result<TwinBeamNoise> {
    params.validate()?;
    if grid.is_empty() {
        return Err(Error::Grid("empty frequency grid".into()));
    }
    let (s, d): (Vec<f64>, Vec<f64>) = grid.iter().map(|&f| params.spectra_at(f)).unzip();
    TwinBeamNoise::new(
        NormalizedSpectrum::new(grid.to_vec(), s)?,
        NormalizedSpectrum::new(grid.to_vec(), d)?,
    )
}

/// Flat twin-beam spectra at measured levels.
pub fn from_measured(s_minus_db: f64, single_beam_db: f64, grid: &[f64]) -> Result<TwinBeamNoise> {
    if !(s_minus_db < single_beam_db) {
        return Err(Error::Domain(format!(
            "intensity-difference noise ({s_minus_db} dB) must lie below the single-beam noise ({single_beam_db} dB)"
        )));
    }
    TwinBeamNoise::new(
        NormalizedSpectrum::flat(grid.to_vec(), from_db(single_beam_db))?,
        NormalizedSpectrum::flat(grid.to_vec(), from_db(s_minus_db))?,
    )
}

/// Values reported for a configuration by the experiment it reproduces.
/// These are comparison anchors only; no computation reads them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Anchors {
    pub intensity_difference_db: Option<f64>,
    /// Optimal-gain prediction at the analysis frequency.
    pub predicted_db: Option<f64>,
    pub measured_compensated_db: Option<f64>,
    pub measured_uncompensated_db: Option<f64>,
    pub delay_line_length_m: Option<f64>,
    /// Lowest and highest frequency with observed squeezing (Hz).
    pub squeezing_band_hz: Option<(f64, f64)>,
}

/// A named bundle of source, loss, delay and detection parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPreset {
    pub name: String,
    /// Intensity-difference noise at the analysis frequency (dB).
    pub twin_noise_db: f64,
    /// Single-beam noise (dB); `None` derives it from the amplifier model.
    pub single_beam_db: Option<f64>,
    pub eta_e: f64,
    pub eta_d: f64,
    /// Total latency of the conjugate arm (s).
    pub electronic_delay: f64,
    /// Length of the probe delay line (m).
    pub optical_delay_length: f64,
    pub detector_bandwidth: f64,
    pub analysis_frequency: f64,
    pub squeezing_bandwidth: f64,
    /// Descriptive experimental settings; never read by the models.
    pub metadata: BTreeMap<String, String>,
    pub anchors: Anchors,
}

/// Names accepted by [`preset`].
pub const PRESET_NAMES: [&str; 5] = [
    "off_resonance",
    "on_resonance",
    "off_resonance_displacement",
    "on_resonance_displacement",
    "coherent",
];

/// Probe-path transmission of the displacement (99/1 beam splitter) variant.
pub const DISPLACEMENT_TRANSMISSION: f64 = 0.99;

fn meta(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn off_resonance() -> ScenarioPreset {
    ScenarioPreset {
        name: "off_resonance".into(),
        twin_noise_db: -7.4,
        single_beam_db: None,
        eta_e: 0.88,
        eta_d: 0.95,
        electronic_delay: 65e-9,
        optical_delay_length: 19.6,
        detector_bandwidth: 4e6,
        analysis_frequency: 360e3,
        squeezing_bandwidth: DEFAULT_SQUEEZING_BANDWIDTH,
        metadata: meta(&[
            ("probe_detuning", "~1.9 GHz from 87Rb D1 F=2 -> F'=2"),
            ("one_photon_detuning", "~800 MHz blue of 85Rb D1"),
            ("two_photon_detuning", "2 MHz"),
            ("angle", "0.5 deg"),
            ("pump_power", "300 mW"),
            ("cell_temperature", "107 C"),
            ("pump_diameter", "0.9 mm"),
            ("probe_diameter", "1.3 mm"),
            ("source_relative_delay", "~7 ns probe-conjugate (not applied by default)"),
        ]),
        anchors: Anchors {
            intensity_difference_db: Some(-7.4),
            predicted_db: Some(-3.5),
            measured_compensated_db: Some(-2.9),
            measured_uncompensated_db: Some(-0.8),
            delay_line_length_m: Some(19.6),
            squeezing_band_hz: Some((200e3, 2.2e6)),
        },
    }
}

fn on_resonance() -> ScenarioPreset {
    ScenarioPreset {
        name: "on_resonance".into(),
        twin_noise_db: -5.8,
        single_beam_db: None,
        eta_e: 0.88,
        eta_d: 0.95,
        electronic_delay: 72e-9,
        optical_delay_length: 21.7,
        detector_bandwidth: 4e6,
        analysis_frequency: 360e3,
        squeezing_bandwidth: DEFAULT_SQUEEZING_BANDWIDTH,
        metadata: meta(&[
            ("probe_detuning", "resonant with 87Rb D1 F=2 -> F'=2"),
            ("one_photon_detuning", "687 MHz red of 85Rb D1 F=2 -> F'=2"),
            ("two_photon_detuning", "8 MHz"),
            ("angle", "0.4 deg"),
            ("pump_power", "750 mW"),
            ("cell_temperature", "90 C"),
            ("pump_diameter", "1.3 mm"),
            ("probe_diameter", "0.9 mm"),
            ("source_relative_delay", "none"),
        ]),
        anchors: Anchors {
            intensity_difference_db: Some(-5.8),
            predicted_db: Some(-2.4),
            measured_compensated_db: Some(-2.0),
            measured_uncompensated_db: Some(-0.5),
            delay_line_length_m: Some(21.7),
            squeezing_band_hz: Some((200e3, 2.0e6)),
        },
    }
}

fn displacement(mut base: ScenarioPreset, predicted_db: f64) -> ScenarioPreset {
    base.name.push_str("_displacement");
    base.eta_e = DISPLACEMENT_TRANSMISSION;
    base.metadata.insert(
        "actuator".into(),
        "displacement on a 99/1 beam splitter with a strong coherent state".into(),
    );
    // Whether the reported prediction also drops the probe detector's
    // efficiency is not stated; only the actuator loss is changed here.
    base.metadata.insert(
        "loss_reading".into(),
        "eta_E = 0.99 replaces actuator + delay-line loss; probe detector QE not separated".into(),
    );
    base.anchors = Anchors {
        intensity_difference_db: base.anchors.intensity_difference_db,
        predicted_db: Some(predicted_db),
        delay_line_length_m: base.anchors.delay_line_length_m,
        ..Anchors::default()
    };
    base
}

fn coherent() -> ScenarioPreset {
    let mut p = off_resonance();
    p.name = "coherent".into();
    p.twin_noise_db = 0.0;
    p.metadata = meta(&[("purpose", "shot-noise calibration: source replaced by coherent beams")]);
    p.anchors = Anchors::default();
    p
}

/// Looks up a named configuration.
pub fn preset(name: &str) -> Result<ScenarioPreset> {
    match name {
        "off_resonance" => Ok(off_resonance()),
        "on_resonance" => Ok(on_resonance()),
        "off_resonance_displacement" => Ok(displacement(off_resonance(), -4.3)),
        "on_resonance_displacement" => Ok(displacement(on_resonance(), -2.8)),
        "coherent" => Ok(coherent()),
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

impl ScenarioPreset {
    pub fn validate(&self) -> Result<()> {
        check_unit_interval("eta_E", self.eta_e)?;
        check_unit_interval("eta_D", self.eta_d)?;
        for (name, v) in [
            ("electronic_delay", self.electronic_delay),
            ("optical_delay_length", self.optical_delay_length),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!("{name} must be >= 0, got {v}")));
            }
        }
        for (name, v) in [
            ("detector_bandwidth", self.detector_bandwidth),
            ("analysis_frequency", self.analysis_frequency),
            ("squeezing_bandwidth", self.squeezing_bandwidth),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!("{name} must be > 0, got {v}")));
            }
        }
        if !self.twin_noise_db.is_finite() {
            return Err(Error::Domain("twin_noise_db must be finite".into()));
        }
        if let Some(s) = self.single_beam_db {
            if !(self.twin_noise_db < s) {
                return Err(Error::Domain(format!(
                    "single_beam_db ({s}) must exceed twin_noise_db ({})",
                    self.twin_noise_db
                )));
            }
        }
        Ok(())
    }

    /// Delay of the probe delay line in free space (s).
    pub fn optical_delay(&self) -> f64 {
        self.optical_delay_length / SPEED_OF_LIGHT
    }

    /// Amplifier parameters hitting `twin_noise_db` at the analysis
    /// frequency, given the extra source imperfections.
    pub fn fwm_params(&self, excess_noise: f64, source_transmission: f64) -> Result<FwmParams> {
        FwmParams {
            gain: 1.0,
            squeezing_bandwidth: self.squeezing_bandwidth,
            excess_noise,
            source_transmission,
        }
        .calibrated(from_db(self.twin_noise_db), self.analysis_frequency)
    }

    /// Twin-beam spectra of the scenario on `grid`: flat measured levels when
    /// `single_beam_db` is set, the calibrated amplifier model otherwise.
    pub fn twin_noise(
        &self,
        grid: &[f64],
        excess_noise: f64,
        source_transmission: f64,
    ) -> Result<TwinBeamNoise> {
        match self.single_beam_db {
            Some(s_db) => from_measured(self.twin_noise_db, s_db, grid),
            None => ideal_pia_spectra(&self.fwm_params(excess_noise, source_transmission)?, grid),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise_model::to_db;
    use approx::assert_relative_eq;

    #[test]
    fn unit_gain_is_coherent() {
        let twin = ideal_pia_spectra(&FwmParams::lossless(1.0), &[1e3, 1e6, 1e8]).unwrap();
        assert!(twin.single_beam().values().iter().all(|v| (*v - 1.0).abs() < 1e-15));
        assert!(twin
            .intensity_difference()
            .values()
            .iter()
            .all(|v| (*v - 1.0).abs() < 1e-15));
        assert!(twin.cross_correlation().iter().all(|c| c.abs() < 1e-15));
    }

    #[test]
    fn low_frequency_levels_match_inverted_gain() {
        // 2G − 1 = 1/0.18197 gives G = 3.2477.
        let params = FwmParams::lossless(0.5 * (1.0 / from_db(-7.4) + 1.0));
        assert_relative_eq!(params.gain, 3.2477, epsilon = 1e-4);
        let (s, d) = params.spectra_at(1.0);
        assert_relative_eq!(d, 0.18197, epsilon = 1e-5);
        assert_relative_eq!(s, 5.4954, epsilon = 1e-4);
        assert_relative_eq!(to_db(s).unwrap(), 7.4, epsilon = 1e-6);
    }

    #[test]
    fn out_of_band_relaxes_to_shot_noise() {
        let (s, d) = FwmParams::lossless(4.0).spectra_at(1e12);
        assert_relative_eq!(s, 1.0, epsilon = 1e-6);
        assert_relative_eq!(d, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn gain_below_one_rejected() {
        assert!(matches!(
            ideal_pia_spectra(&FwmParams::lossless(0.9), &[1e6]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn lossless_product_is_unity_at_low_frequency() {
        for g in [1.0, 1.5, 3.2477, 10.0, 250.0] {
            let (s, d) = FwmParams::lossless(g).spectra_at(0.0);
            assert_relative_eq!(s * d, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn source_loss_bounds_squeezing() {
        let mut p = FwmParams::lossless(50.0);
        p.source_transmission = 0.8;
        let (_, d) = p.spectra_at(0.0);
        let intrinsic = 1.0 / 99.0;
        assert_relative_eq!(d, 0.8 * intrinsic + 0.2, epsilon = 1e-12);
        assert!(d >= 0.2);
    }

    #[test]
    fn measured_levels() {
        let twin = from_measured(-7.4, 7.4, &[1e5, 1e6]).unwrap();
        assert_relative_eq!(twin.intensity_difference().values()[0], 0.18197, epsilon = 1e-5);
        assert_relative_eq!(twin.single_beam().values()[1], 5.4954, epsilon = 1e-4);
        let twin = from_measured(-5.8, 5.8, &[1e5]).unwrap();
        assert_relative_eq!(twin.intensity_difference().values()[0], 0.26303, epsilon = 1e-5);
        assert_relative_eq!(twin.single_beam().values()[0], 3.8019, epsilon = 1e-4);
        assert!(from_measured(1.0, 0.5, &[1e5]).is_err());

        // Nearly coherent beams call for almost no feedforward.
        let twin = from_measured(0.0, 1e-6, &[1e5]).unwrap();
        let eff = crate::noise_model::ChannelEfficiencies::new(0.88, 0.95).unwrap();
        let g = crate::noise_model::optimal_gain(&twin, &eff).unwrap();
        assert!(g.gains()[0].abs() < 1e-6);
    }

    #[test]
    fn preset_values() {
        let off = preset("off_resonance").unwrap();
        assert_eq!(off.electronic_delay, 65e-9);
        assert_eq!(off.eta_e, 0.88);
        assert_eq!(off.eta_d, 0.95);
        assert_eq!(off.analysis_frequency, 360e3);
        assert_eq!(off.detector_bandwidth, 4e6);
        assert_relative_eq!(off.optical_delay() * 1e9, 65.379, epsilon = 1e-3);

        let on = preset("on_resonance").unwrap();
        assert_eq!(on.electronic_delay, 72e-9);
        assert_eq!(on.twin_noise_db, -5.8);
        assert_eq!(on.optical_delay_length, 21.7);

        for name in ["off_resonance_displacement", "on_resonance_displacement"] {
            assert_eq!(preset(name).unwrap().eta_e, 0.99);
        }
        assert_eq!(off.metadata["two_photon_detuning"], "2 MHz");
        assert_eq!(on.metadata["cell_temperature"], "90 C");
        assert!(matches!(preset("nope"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn preset_hits_target_at_analysis_frequency() {
        for name in ["off_resonance", "on_resonance"] {
            let p = preset(name).unwrap();
            let twin = p.twin_noise(&[p.analysis_frequency], 0.0, 1.0).unwrap();
            assert_relative_eq!(
                to_db(twin.intensity_difference().values()[0]).unwrap(),
                p.twin_noise_db,
                epsilon = 1e-9
            );
        }
        let p = preset("coherent").unwrap();
        assert_relative_eq!(p.fwm_params(0.0, 1.0).unwrap().gain, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn calibration_accounts_for_source_imperfections() {
        let p = preset("off_resonance").unwrap();
        let params = p.fwm_params(0.01, 0.97).unwrap();
        let (_, d) = params.spectra_at(p.analysis_frequency);
        assert_relative_eq!(to_db(d).unwrap(), -7.4, epsilon = 1e-9);
        // Too much loss for the target.
        assert!(p.fwm_params(0.0, 0.5).is_err());
    }

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            p.validate().unwrap();
            let json = serde_json::to_string(&p).unwrap();
            let back: ScenarioPreset = serde_json::from_str(&json).unwrap();
            assert_eq!(back, p);
        }
    }
}
