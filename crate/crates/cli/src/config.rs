//! Run configuration: a TOML file with one table per module, resolved on top
//! of a named scenario preset.

use std::path::Path;

use ffsqueeze::feedforward_sim::{Actuator, DetectorResponse, RunOptions, SimConfig};
use ffsqueeze::fwm_source::{self, Anchors, ScenarioPreset, SPEED_OF_LIGHT};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModelSection {
    #[serde(rename = "eta_E", skip_serializing_if = "Option::is_none")]
    pub eta_e: Option<f64>,
    #[serde(rename = "eta_D", skip_serializing_if = "Option::is_none")]
    pub eta_d: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FwmSourceSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_minus_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub single_beam_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub squeezing_bandwidth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub excess_noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_transmission: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_delay: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rng_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detector_bandwidth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detector_response: Option<DetectorResponse>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub electronic_noise_psd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dc_block_cutoff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub electronic_delay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optical_delay_length: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compensate_delay: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain_override: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<Actuator>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rbw: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub averages: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub analysis_frequency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band_low: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band_high: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_f_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_f_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub readout_span: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_tolerance_db: Option<f64>,
}

/// The file as written; every key is optional and falls back to the preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(default)]
    pub noise_model: NoiseModelSection,
    #[serde(default)]
    pub fwm_source: FwmSourceSection,
    #[serde(default)]
    pub feedforward_sim: SimSection,
    #[serde(default)]
    pub spectral: SpectralSection,
    #[serde(default)]
    pub report: ReportSection,
}

/// Frequencies and tolerances used when reading spectra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub band_low: f64,
    pub band_high: f64,
    pub fit_f_min: f64,
    pub fit_f_max: f64,
    pub readout_span: f64,
    pub tolerance_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub preset: ScenarioPreset,
    pub sim: SimConfig,
    pub options: RunOptions,
    pub analysis: Analysis,
    /// False when source or channel parameters differ from the preset, in
    /// which case its published anchors no longer apply and are dropped.
    pub anchors_apply: bool,
}

/// Overrides given on the command line; applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub scenario: Option<String>,
    pub seed: Option<u64>,
    pub averages: Option<usize>,
    pub no_compensate: bool,
    pub duration: Option<f64>,
}

pub const DEFAULT_SCENARIO: &str = "off_resonance";

pub fn parse_str(text: &str) -> Result<ConfigFile, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
}

pub fn read_file(path: &Path) -> Result<ConfigFile, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_str(&text)
}

/// Reads, overrides and resolves a configuration file.
pub fn parse_config(path: &Path, overrides: &Overrides) -> Result<Resolved, ConfigError> {
    let mut file = read_file(path)?;
    apply_overrides(&mut file, overrides);
    resolve(&file)
}

pub fn apply_overrides(file: &mut ConfigFile, o: &Overrides) {
    if let Some(s) = &o.scenario {
        file.scenario = Some(s.clone());
    }
    if let Some(seed) = o.seed {
        file.feedforward_sim.rng_seed = Some(seed);
    }
    if let Some(k) = o.averages {
        file.spectral.averages = Some(k);
    }
    if o.no_compensate {
        file.feedforward_sim.compensate_delay = Some(false);
    }
    if let Some(d) = o.duration {
        file.feedforward_sim.duration = Some(d);
    }
}

fn invalid(e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

pub fn resolve(file: &ConfigFile) -> Result<Resolved, ConfigError> {
    let name = file.scenario.as_deref().unwrap_or(DEFAULT_SCENARIO);
    let base = fwm_source::preset(name).map_err(invalid)?;
    let mut preset = base.clone();

    let nm = &file.noise_model;
    preset.eta_e = nm.eta_e.unwrap_or(base.eta_e);
    preset.eta_d = nm.eta_d.unwrap_or(base.eta_d);

    let src = &file.fwm_source;
    preset.twin_noise_db = src.s_minus_db.unwrap_or(base.twin_noise_db);
    preset.single_beam_db = src.single_beam_db.or(base.single_beam_db);
    preset.squeezing_bandwidth = src.squeezing_bandwidth.unwrap_or(base.squeezing_bandwidth);

    let ff = &file.feedforward_sim;
    preset.detector_bandwidth = ff.detector_bandwidth.unwrap_or(base.detector_bandwidth);
    preset.electronic_delay = ff.electronic_delay.unwrap_or(base.electronic_delay);
    preset.optical_delay_length = ff.optical_delay_length.unwrap_or(base.optical_delay_length);
    preset.analysis_frequency = file
        .spectral
        .analysis_frequency
        .unwrap_or(base.analysis_frequency);

    let defaults = SimConfig::for_preset(&preset);
    let sim = SimConfig {
        sample_rate: ff.sample_rate.unwrap_or(defaults.sample_rate),
        duration: ff.duration.unwrap_or(defaults.duration),
        rng_seed: ff.rng_seed.unwrap_or(defaults.rng_seed),
        detector_response: ff.detector_response.unwrap_or(defaults.detector_response),
        electronic_noise_psd: ff.electronic_noise_psd.unwrap_or(defaults.electronic_noise_psd),
        dc_block_cutoff: ff.dc_block_cutoff.unwrap_or(defaults.dc_block_cutoff),
        source_delay: src.source_delay.unwrap_or(defaults.source_delay),
        excess_noise: src.excess_noise.unwrap_or(defaults.excess_noise),
        source_transmission: src.source_transmission.unwrap_or(defaults.source_transmission),
        rbw: file.spectral.rbw.unwrap_or(defaults.rbw),
        averages: file.spectral.averages.or(defaults.averages),
        ..defaults
    };
    if sim.rng_seed > i64::MAX as u64 {
        return Err(invalid(format!("rng_seed must be at most {}", i64::MAX)));
    }
    let options = RunOptions {
        compensate_delay: ff.compensate_delay.unwrap_or(true),
        gain_override: ff.gain_override,
        variant: ff.variant.unwrap_or_default(),
    };
    let sp = &file.spectral;
    let analysis = Analysis {
        band_low: sp.band_low.unwrap_or(200e3),
        band_high: sp.band_high.unwrap_or(2e6),
        fit_f_min: sp.fit_f_min.unwrap_or(0.2e6),
        fit_f_max: sp.fit_f_max.unwrap_or(20e6),
        readout_span: sp.readout_span.unwrap_or(100e3),
        tolerance_db: file.report.oracle_tolerance_db.unwrap_or(0.2),
    };

    preset.validate().map_err(invalid)?;
    sim.validate().map_err(invalid)?;
    validate_analysis(&analysis, &sim)?;
    if let Some(g) = options.gain_override {
        if !g.is_finite() {
            return Err(invalid(format!("gain_override must be finite, got {g}")));
        }
    }

    let anchors_apply = preset.eta_e == base.eta_e
        && preset.eta_d == base.eta_d
        && preset.twin_noise_db == base.twin_noise_db
        && preset.single_beam_db == base.single_beam_db
        && preset.squeezing_bandwidth == base.squeezing_bandwidth
        && preset.analysis_frequency == base.analysis_frequency
        && sim.excess_noise == 0.0
        && sim.source_transmission == 1.0
        && sim.source_delay == 0.0;
    if !anchors_apply {
        preset.anchors = Anchors::default();
    } else if options.variant == Actuator::Displacement && !preset.name.ends_with("_displacement") {
        // Measured values were taken with the EOM; only the displacement
        // prediction carries over.
        preset.anchors = fwm_source::preset(&format!("{}_displacement", preset.name))
            .map(|p| p.anchors)
            .unwrap_or_default();
    }
    Ok(Resolved {
        preset,
        sim,
        options,
        analysis,
        anchors_apply,
    })
}

fn validate_analysis(a: &Analysis, sim: &SimConfig) -> Result<(), ConfigError> {
    let nyquist = sim.sample_rate / 2.0;
    let pairs = [
        ("band_low", a.band_low, "band_high", a.band_high),
        ("fit_f_min", a.fit_f_min, "fit_f_max", a.fit_f_max),
    ];
    for (lo_name, lo, hi_name, hi) in pairs {
        if !(lo > 0.0 && lo < hi && hi <= nyquist) {
            return Err(invalid(format!(
                "{lo_name} ({lo}) and {hi_name} ({hi}) must satisfy 0 < {lo_name} < {hi_name} <= sample_rate/2"
            )));
        }
    }
    if !(a.readout_span > 0.0) {
        return Err(invalid(format!("readout_span must be > 0, got {}", a.readout_span)));
    }
    if !(a.tolerance_db > 0.0) {
        return Err(invalid(format!(
            "oracle_tolerance_db must be > 0, got {}",
            a.tolerance_db
        )));
    }
    Ok(())
}

impl Resolved {
    /// Every resolved value, in the file format; resolving it again yields
    /// the same configuration.
    pub fn to_file(&self) -> ConfigFile {
        let p = &self.preset;
        let s = &self.sim;
        ConfigFile {
            scenario: Some(p.name.clone()),
            noise_model: NoiseModelSection {
                eta_e: Some(p.eta_e),
                eta_d: Some(p.eta_d),
            },
            fwm_source: FwmSourceSection {
                s_minus_db: Some(p.twin_noise_db),
                single_beam_db: p.single_beam_db,
                squeezing_bandwidth: Some(p.squeezing_bandwidth),
                excess_noise: Some(s.excess_noise),
                source_transmission: Some(s.source_transmission),
                source_delay: Some(s.source_delay),
            },
            feedforward_sim: SimSection {
                sample_rate: Some(s.sample_rate),
                duration: Some(s.duration),
                rng_seed: Some(s.rng_seed),
                detector_bandwidth: Some(s.detector_bandwidth),
                detector_response: Some(s.detector_response),
                electronic_noise_psd: Some(s.electronic_noise_psd),
                dc_block_cutoff: Some(s.dc_block_cutoff),
                electronic_delay: Some(s.electronic_delay),
                optical_delay_length: Some(p.optical_delay_length),
                compensate_delay: Some(self.options.compensate_delay),
                gain_override: self.options.gain_override,
                variant: Some(self.options.variant),
            },
            spectral: SpectralSection {
                rbw: Some(s.rbw),
                averages: s.averages,
                analysis_frequency: Some(p.analysis_frequency),
                band_low: Some(self.analysis.band_low),
                band_high: Some(self.analysis.band_high),
                fit_f_min: Some(self.analysis.fit_f_min),
                fit_f_max: Some(self.analysis.fit_f_max),
                readout_span: Some(self.analysis.readout_span),
            },
            report: ReportSection {
                oracle_tolerance_db: Some(self.analysis.tolerance_db),
            },
        }
    }

    pub fn echo(&self) -> String {
        toml::to_string(&self.to_file()).expect("resolved configuration serializes")
    }

    /// Delay of the configured delay line (s).
    pub fn optical_delay(&self) -> f64 {
        self.preset.optical_delay_length / SPEED_OF_LIGHT
    }
}
